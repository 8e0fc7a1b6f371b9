// SPDX-License-Identifier: Apache-2.0
#pragma once

// Multi-task loss balancing and gradient surgery over flat gradient vectors.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "forestchat/error.hpp"
#include "forestchat/rng.hpp"

namespace forestchat::mtl {

using Vector = std::vector<double>;
using GradientSet = std::vector<Vector>;

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Checks task count and a shared finite dimension; returns the dimension.
inline std::size_t check_gradients(const GradientSet& grads, std::size_t min_tasks = 2) {
    require(grads.size() >= min_tasks, ErrorKind::invalid_argument,
            "need at least " + std::to_string(min_tasks) + " task gradients, got " + std::to_string(grads.size()));
    const auto d = grads.front().size();
    for (const auto& g : grads) {
        require(g.size() == d, ErrorKind::dimension_mismatch, "task gradients differ in length");
        for (double x : g) require(std::isfinite(x), ErrorKind::numeric, "task gradient has a non-finite entry");
    }
    return d;
}

// ---------------------------------------------------------------------------
// Loss balancing
// ---------------------------------------------------------------------------

struct WeightedTotal {
    double total = 0.0;
    std::vector<double> weights;
};

/// Each loss divided by its own detached value. Every term is exactly 1, so
/// the total is the task count; weight_i = 1 / L_i scales task i's gradient.
inline WeightedTotal normalized_total(std::span<const double> losses) {
    require(!losses.empty(), ErrorKind::invalid_argument, "no task losses");
    WeightedTotal out;
    for (double l : losses) {
        require(std::isfinite(l) && l > 0.0, ErrorKind::invalid_argument, "normalised losses must be finite and positive");
        const double detached = l;
        out.total += l / detached;
        out.weights.push_back(1.0 / detached);
    }
    return out;
}

struct UncertaintyTotal {
    double total = 0.0;
    /// d total / d s_i.
    std::vector<double> dlog_vars;
    /// exp(-s_i), the factor applied to task i's gradient.
    std::vector<double> scales;
};

/// sum_i exp(-s_i) L_i + s_i with s_i the learned log-variances.
inline UncertaintyTotal uncertainty_total(std::span<const double> losses, std::span<const double> log_vars) {
    require(losses.size() == log_vars.size(), ErrorKind::dimension_mismatch, "one log-variance per task is required");
    UncertaintyTotal out;
    for (std::size_t i = 0; i < losses.size(); ++i) {
        require(std::isfinite(log_vars[i]), ErrorKind::numeric, "log-variance must be finite");
        const double e = std::exp(-log_vars[i]);
        out.total += e * losses[i] + log_vars[i];
        out.dlog_vars.push_back(1.0 - e * losses[i]);
        out.scales.push_back(e);
    }
    return out;
}

inline constexpr double kDwaTemperature = 2.0;

/// Dynamic weight averaging from per-epoch task losses (oldest first).
/// Uniform weights until two epochs of history exist.
inline std::vector<double> dwa_weights(std::span<const std::vector<double>> history, std::size_t tasks,
                                       double temperature = kDwaTemperature) {
    require(temperature > 0.0, ErrorKind::invalid_argument, "DWA temperature must be positive");
    if (history.size() < 2) return std::vector<double>(tasks, 1.0);
    const auto& last = history[history.size() - 1];
    const auto& prev = history[history.size() - 2];
    require(last.size() == tasks && prev.size() == tasks, ErrorKind::dimension_mismatch, "loss history has the wrong task count");
    std::vector<double> logits(tasks);
    for (std::size_t i = 0; i < tasks; ++i) {
        require(prev[i] != 0.0, ErrorKind::invalid_argument, "zero loss in DWA history");
        logits[i] = last[i] / prev[i] / temperature;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (auto& l : logits) z += (l = std::exp(l - mx));
    for (auto& l : logits) l = static_cast<double>(tasks) * l / z;
    return logits;
}

// ---------------------------------------------------------------------------
// Gradient surgery
// ---------------------------------------------------------------------------

inline Vector sum(const GradientSet& grads) {
    Vector out(grads.front().size(), 0.0);
    for (const auto& g : grads)
        for (std::size_t k = 0; k < out.size(); ++k) out[k] += g[k];
    return out;
}

inline Vector mean(const GradientSet& grads) {
    Vector out = sum(grads);
    for (auto& x : out) x /= static_cast<double>(grads.size());
    return out;
}

/// Projects each task gradient off the others it conflicts with (visited in
/// a shuffled order), then sums. Zero-norm gradients are never projected onto.
inline Vector pcgrad(const GradientSet& grads, Rng& rng) {
    check_gradients(grads);
    const auto n = grads.size();
    GradientSet projected = grads;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        shuffle(std::span<std::size_t>(order), rng);
        auto& gi = projected[i];
        for (auto j : order) {
            if (j == i) continue;
            const auto& gj = grads[j];
            const double d = dot(gi, gj);
            const double nn = dot(gj, gj);
            if (d >= 0.0 || nn == 0.0) continue;
            for (std::size_t k = 0; k < gi.size(); ++k) gi[k] -= d / nn * gj[k];
        }
    }
    return sum(projected);
}

struct CagradSolution {
    Vector direction;
    std::vector<double> weights;
    /// g_w . g_0 + sqrt(phi) |g_w| at the chosen weights.
    double objective = 0.0;
};

/// g_w . g_0 + sqrt(phi) |g_w| from the Gram matrix and b_i = g_i . g_0.
inline double cagrad_objective(std::span<const double> w, const std::vector<Vector>& gram, std::span<const double> b, double sqrt_phi) {
    double lin = 0.0, quad = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        lin += w[i] * b[i];
        for (std::size_t j = 0; j < w.size(); ++j) quad += w[i] * w[j] * gram[i][j];
    }
    return lin + sqrt_phi * std::sqrt(std::max(quad, 0.0));
}

namespace detail {

/// Euclidean projection onto the probability simplex.
inline std::vector<double> project_simplex(std::vector<double> v) {
    std::vector<double> u = v;
    std::sort(u.begin(), u.end(), std::greater<>());
    double css = 0.0, theta = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        css += u[i];
        const double t = (css - 1.0) / static_cast<double>(i + 1);
        if (u[i] - t > 0.0) theta = t;
    }
    for (auto& x : v) x = std::max(x - theta, 0.0);
    return v;
}

inline std::vector<double> minimize_two_tasks(const std::vector<Vector>& gram, std::span<const double> b, double sqrt_phi) {
    const auto f = [&](double t) {
        const std::vector<double> w = {t, 1.0 - t};
        return cagrad_objective(w, gram, b, sqrt_phi);
    };
    const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double lo = 0.0, hi = 1.0;
    double x1 = hi - inv_phi * (hi - lo), x2 = lo + inv_phi * (hi - lo);
    double f1 = f(x1), f2 = f(x2);
    while (hi - lo > 1e-10) {
        if (f1 <= f2) {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    double best_t = 0.5 * (lo + hi), best_f = f(best_t);
    for (double t : {0.0, 1.0})
        if (f(t) < best_f) {
            best_f = f(t);
            best_t = t;
        }
    return {best_t, 1.0 - best_t};
}

inline std::vector<double> minimize_simplex(const std::vector<Vector>& gram, std::span<const double> b, double sqrt_phi) {
    const auto n = b.size();
    std::vector<double> w(n, 1.0 / static_cast<double>(n));
    double fw = cagrad_objective(w, gram, b, sqrt_phi);
    double step = 1.0;
    for (int it = 0; it < 2000 && step > 1e-14; ++it) {
        double quad = 0.0;
        std::vector<double> gw(n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                gw[i] += gram[i][j] * w[j];
                quad += w[i] * gram[i][j] * w[j];
            }
        const double len = std::sqrt(std::max(quad, 0.0));
        std::vector<double> grad(n);
        for (std::size_t i = 0; i < n; ++i) grad[i] = b[i] + (len > 0.0 ? sqrt_phi * gw[i] / len : 0.0);
        // Backtracking on the projected step.
        for (;;) {
            std::vector<double> trial(n);
            for (std::size_t i = 0; i < n; ++i) trial[i] = w[i] - step * grad[i];
            trial = project_simplex(std::move(trial));
            const double ft = cagrad_objective(trial, gram, b, sqrt_phi);
            if (ft < fw) {
                w = std::move(trial);
                fw = ft;
                step *= 1.5;
                break;
            }
            step *= 0.5;
            if (step <= 1e-14) break;
        }
    }
    return w;
}

} // namespace detail

/// Conflict-averse direction: d = g_0 + sqrt(phi)/|g_w| g_w, where g_0 is the
/// mean gradient, phi = c^2 |g_0|^2 and w minimises g_w . g_0 + sqrt(phi)|g_w|
/// over the simplex. Returns g_0 itself when c = 0 or when |g_w| vanishes.
inline CagradSolution cagrad(const GradientSet& grads, double c) {
    const auto d = check_gradients(grads);
    require(c >= 0.0 && std::isfinite(c), ErrorKind::invalid_argument, "CAGrad c must be finite and non-negative");
    require(std::any_of(grads.begin(), grads.end(), [](const Vector& g) { return norm(g) > 0.0; }), ErrorKind::numeric,
            "all task gradients are zero");
    const auto n = grads.size();
    CagradSolution out;
    const Vector g0 = mean(grads);
    if (c == 0.0) {
        out.direction = g0;
        out.weights.assign(n, 1.0 / static_cast<double>(n));
        out.objective = dot(g0, g0);
        return out;
    }
    const double sqrt_phi = c * norm(g0);
    std::vector<Vector> gram(n, Vector(n));
    std::vector<double> b(n);
    for (std::size_t i = 0; i < n; ++i) {
        b[i] = dot(grads[i], g0);
        for (std::size_t j = 0; j < n; ++j) gram[i][j] = dot(grads[i], grads[j]);
    }
    out.weights = n == 2 ? detail::minimize_two_tasks(gram, b, sqrt_phi) : detail::minimize_simplex(gram, b, sqrt_phi);
    out.objective = cagrad_objective(out.weights, gram, b, sqrt_phi);
    Vector gw(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) gw[k] += out.weights[i] * grads[i][k];
    const double len = norm(gw);
    double scale_ref = 0.0;
    for (const auto& g : grads) scale_ref = std::max(scale_ref, norm(g));
    out.direction = g0;
    if (len > 1e-12 * scale_ref)
        for (std::size_t k = 0; k < d; ++k) out.direction[k] += sqrt_phi / len * gw[k];
    return out;
}

/// Sign-consistency dropout: per coordinate keeps only the positive or only
/// the negative task entries, choosing positive with probability
/// 0.5 (1 + sum / sum|.|).
inline Vector graddrop(const GradientSet& grads, Rng& rng) {
    const auto d = check_gradients(grads);
    Vector out(d, 0.0);
    for (std::size_t k = 0; k < d; ++k) {
        double s = 0.0, a = 0.0;
        for (const auto& g : grads) {
            s += g[k];
            a += std::abs(g[k]);
        }
        const double purity = a == 0.0 ? 0.5 : 0.5 * (1.0 + s / a);
        const bool keep_positive = uniform01(rng) < purity;
        for (const auto& g : grads)
            if (keep_positive ? g[k] > 0.0 : g[k] < 0.0) out[k] += g[k];
    }
    return out;
}

} // namespace forestchat::mtl
