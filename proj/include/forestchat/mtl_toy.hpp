// SPDX-License-Identifier: Apache-2.0
#pragma once

// Desk-scale two-task trainer for comparing balancing and surgery strategies,
// plus the grouped ablation report.
//
// Model: shared encoder h = tanh(W x + c) (16 -> 32), a regression head with
// mean-squared error and a classification head with 10x-scaled binary
// cross-entropy on logits. Data come from a planted linear teacher.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "forestchat/error.hpp"
#include "forestchat/mtl.hpp"
#include "forestchat/rng.hpp"

namespace forestchat::mtl {

// ---------------------------------------------------------------------------
// Strategies
// ---------------------------------------------------------------------------

enum class Balancing { equal_normalized, dwa, uncertainty };
enum class Surgery { none, cagrad, pcgrad, graddrop };

inline constexpr std::array<Balancing, 3> kAllBalancing = {Balancing::equal_normalized, Balancing::dwa, Balancing::uncertainty};
inline constexpr std::array<Surgery, 4> kAllSurgery = {Surgery::none, Surgery::cagrad, Surgery::pcgrad, Surgery::graddrop};

/// Machine names, as used in config files.
inline std::string_view to_string(Balancing b) {
    switch (b) {
    case Balancing::equal_normalized: return "equal_normalized";
    case Balancing::dwa: return "dwa";
    case Balancing::uncertainty: return "uncertainty";
    }
    return "equal_normalized";
}

inline std::string_view to_string(Surgery s) {
    switch (s) {
    case Surgery::none: return "none";
    case Surgery::cagrad: return "cagrad";
    case Surgery::pcgrad: return "pcgrad";
    case Surgery::graddrop: return "graddrop";
    }
    return "none";
}

/// Report labels. The dynamic-weighting row is labelled EDWA; it runs plain DWA.
inline std::string_view label(Balancing b) {
    switch (b) {
    case Balancing::equal_normalized: return "Equal";
    case Balancing::dwa: return "EDWA";
    case Balancing::uncertainty: return "Uncertainty";
    }
    return "Equal";
}

inline std::string_view label(Surgery s) {
    switch (s) {
    case Surgery::none: return "None";
    case Surgery::cagrad: return "CAGrad";
    case Surgery::pcgrad: return "PCGrad";
    case Surgery::graddrop: return "GradDrop";
    }
    return "None";
}

inline Balancing parse_balancing(std::string_view s) {
    if (s == "equal" || s == "equal_normalized") return Balancing::equal_normalized;
    if (s == "dwa" || s == "edwa") return Balancing::dwa;
    if (s == "uncertainty") return Balancing::uncertainty;
    fail(ErrorKind::parse, "unknown balancing strategy \"" + std::string(s) + "\"");
}

inline Surgery parse_surgery(std::string_view s) {
    if (s == "none") return Surgery::none;
    if (s == "cagrad") return Surgery::cagrad;
    if (s == "pcgrad") return Surgery::pcgrad;
    if (s == "graddrop") return Surgery::graddrop;
    fail(ErrorKind::parse, "unknown surgery strategy \"" + std::string(s) + "\"");
}

struct StrategyConfig {
    Balancing balancing = Balancing::equal_normalized;
    Surgery surgery = Surgery::none;
    double dwa_temperature = kDwaTemperature;
    double cagrad_c = 0.5;
    double learning_rate = 0.02;
    /// Step size for the uncertainty log-variances.
    double log_var_learning_rate = 0.002;

    std::string name() const { return std::string(label(balancing)) + " + " + std::string(label(surgery)); }
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

inline constexpr double kClassificationScale = 10.0;
inline constexpr double kDivergenceLimit = 1e6;

struct TaskLossPair {
    double regression = 0.0;
    double classification = 0.0;
};

struct TaskGradients {
    TaskLossPair losses;
    /// Full-length gradients of each task loss; the other head's entries are 0.
    Vector regression;
    Vector classification;
};

class ToyModel {
  public:
    static constexpr std::size_t kInput = 16;
    static constexpr std::size_t kHidden = 32;
    static constexpr std::size_t kSamples = 256;
    static constexpr double kRegressionNoise = 0.3;

    // Flat parameter layout: W (hidden x input, row-major), c, then the
    // regression head (u, u0), then the classification head (v, v0).
    static constexpr std::size_t kW = 0;
    static constexpr std::size_t kC = kW + kHidden * kInput;
    static constexpr std::size_t kShared = kC + kHidden;
    static constexpr std::size_t kU = kShared;
    static constexpr std::size_t kU0 = kU + kHidden;
    static constexpr std::size_t kV = kU0 + 1;
    static constexpr std::size_t kV0 = kV + kHidden;
    static constexpr std::size_t kParams = kV0 + 1;

    explicit ToyModel(std::uint64_t seed) {
        Rng rng = make_rng(seed);
        const auto unit = [&](std::size_t n) {
            Vector v(n);
            for (auto& x : v) x = normal01(rng);
            const double len = norm(v);
            for (auto& x : v) x /= len;
            return v;
        };
        const Vector a = unit(kInput), b = unit(kInput);
        x_.resize(kSamples * kInput);
        y_.resize(kSamples);
        t_.resize(kSamples);
        for (std::size_t n = 0; n < kSamples; ++n) {
            double ya = 0.0, yb = 0.0;
            for (std::size_t i = 0; i < kInput; ++i) {
                const double v = normal01(rng);
                x_[n * kInput + i] = v;
                ya += a[i] * v;
                yb += b[i] * v;
            }
            // Teacher noise keeps the regression loss off zero, where loss
            // normalisation would blow the step size up.
            y_[n] = ya + kRegressionNoise * normal01(rng);
            t_[n] = yb > 0.0 ? 1.0 : 0.0;
        }
        init_.assign(kParams, 0.0);
        for (std::size_t i = kW; i < kC; ++i) init_[i] = normal01(rng) / std::sqrt(static_cast<double>(kInput));
        for (std::size_t i = kU; i < kU0; ++i) init_[i] = normal01(rng) / std::sqrt(static_cast<double>(kHidden));
        for (std::size_t i = kV; i < kV0; ++i) init_[i] = normal01(rng) / std::sqrt(static_cast<double>(kHidden));
    }

    const Vector& initial_parameters() const noexcept { return init_; }

    TaskLossPair losses(const Vector& p) const { return evaluate(p, false).losses; }

    TaskGradients gradients(const Vector& p) const { return evaluate(p, true); }

    /// Fraction of samples whose classification logit has the teacher's sign.
    double accuracy(const Vector& p) const {
        std::size_t hits = 0;
        std::array<double, kHidden> h{};
        for (std::size_t n = 0; n < kSamples; ++n) {
            hidden(p, n, h);
            double z = p[kV0];
            for (std::size_t j = 0; j < kHidden; ++j) z += p[kV + j] * h[j];
            hits += (z > 0.0) == (t_[n] > 0.5);
        }
        return static_cast<double>(hits) / static_cast<double>(kSamples);
    }

  private:
    void hidden(const Vector& p, std::size_t n, std::array<double, kHidden>& h) const {
        for (std::size_t j = 0; j < kHidden; ++j) {
            double a = p[kC + j];
            for (std::size_t i = 0; i < kInput; ++i) a += p[kW + j * kInput + i] * x_[n * kInput + i];
            h[j] = std::tanh(a);
        }
    }

    TaskGradients evaluate(const Vector& p, bool with_gradients) const {
        require(p.size() == kParams, ErrorKind::dimension_mismatch, "toy model parameter vector has the wrong length");
        TaskGradients out;
        if (with_gradients) {
            out.regression.assign(kParams, 0.0);
            out.classification.assign(kParams, 0.0);
        }
        const double inv_n = 1.0 / static_cast<double>(kSamples);
        std::array<double, kHidden> h{};
        for (std::size_t n = 0; n < kSamples; ++n) {
            hidden(p, n, h);
            double yr = p[kU0], z = p[kV0];
            for (std::size_t j = 0; j < kHidden; ++j) {
                yr += p[kU + j] * h[j];
                z += p[kV + j] * h[j];
            }
            const double err = yr - y_[n];
            out.losses.regression += err * err * inv_n;
            // Stable binary cross-entropy on logits.
            const double bce = std::max(z, 0.0) - z * t_[n] + std::log1p(std::exp(-std::abs(z)));
            out.losses.classification += kClassificationScale * bce * inv_n;
            if (!with_gradients) continue;

            const double dyr = 2.0 * err * inv_n;
            const double sig = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
            const double dz = kClassificationScale * (sig - t_[n]) * inv_n;
            backprop(p, n, h, dyr, kU, kU0, out.regression);
            backprop(p, n, h, dz, kV, kV0, out.classification);
        }
        return out;
    }

    void backprop(const Vector& p, std::size_t n, const std::array<double, kHidden>& h, double dout, std::size_t head,
                  std::size_t bias, Vector& g) const {
        g[bias] += dout;
        for (std::size_t j = 0; j < kHidden; ++j) {
            g[head + j] += dout * h[j];
            const double da = dout * p[head + j] * (1.0 - h[j] * h[j]);
            g[kC + j] += da;
            for (std::size_t i = 0; i < kInput; ++i) g[kW + j * kInput + i] += da * x_[n * kInput + i];
        }
    }

    std::vector<double> x_, y_, t_;
    Vector init_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct HistoryEntry {
    TaskLossPair losses;
    std::array<double, 2> weights{};
};

struct TrainResult {
    std::vector<HistoryEntry> history;
    double accuracy = 0.0;
};

namespace detail {

inline Vector slice(const Vector& v, std::size_t begin, std::size_t end) {
    return Vector(v.begin() + static_cast<long>(begin), v.begin() + static_cast<long>(end));
}

} // namespace detail

/// Full-batch gradient descent for `steps` updates. History holds the losses
/// before each update plus the final losses, with the balancing weights used.
inline TrainResult train_toy(const StrategyConfig& config, int steps, std::uint64_t seed) {
    require(steps >= 1, ErrorKind::invalid_argument, "steps must be at least 1");
    require(config.learning_rate >= 0.0, ErrorKind::invalid_argument, "learning rate must be non-negative");
    require(config.cagrad_c >= 0.0, ErrorKind::invalid_argument, "CAGrad c must be non-negative");
    require(config.dwa_temperature > 0.0, ErrorKind::invalid_argument, "DWA temperature must be positive");

    const ToyModel model(seed);
    Rng rng = make_rng(splitmix64(seed) ^ 0x5eedULL);
    Vector params = model.initial_parameters();
    std::array<double, 2> log_vars{0.0, 0.0};
    std::vector<std::vector<double>> loss_history;
    TrainResult out;
    const double lr = config.learning_rate;

    const auto guard = [](const TaskLossPair& l) {
        for (double v : {l.regression, l.classification})
            require(std::isfinite(v) && v <= kDivergenceLimit, ErrorKind::numeric, "training diverged: a task loss exceeded 1e6");
    };

    std::array<double, 2> weights{1.0, 1.0};
    for (int step = 0; step < steps; ++step) {
        auto g = model.gradients(params);
        guard(g.losses);
        const std::vector<double> losses = {g.losses.regression, g.losses.classification};
        switch (config.balancing) {
        case Balancing::equal_normalized: {
            const auto w = normalized_total(losses).weights;
            weights = {w[0], w[1]};
            break;
        }
        case Balancing::dwa: {
            const auto w = dwa_weights(loss_history, 2, config.dwa_temperature);
            weights = {w[0], w[1]};
            break;
        }
        case Balancing::uncertainty: {
            const auto u = uncertainty_total(losses, log_vars);
            weights = {u.scales[0], u.scales[1]};
            for (std::size_t i = 0; i < 2; ++i) log_vars[i] -= config.log_var_learning_rate * u.dlog_vars[i];
            break;
        }
        }
        loss_history.push_back(losses);
        out.history.push_back({g.losses, weights});

        for (auto& x : g.regression) x *= weights[0];
        for (auto& x : g.classification) x *= weights[1];
        const GradientSet shared = {detail::slice(g.regression, 0, ToyModel::kShared),
                                    detail::slice(g.classification, 0, ToyModel::kShared)};
        Vector combined;
        switch (config.surgery) {
        case Surgery::none: combined = sum(shared); break;
        case Surgery::pcgrad: combined = pcgrad(shared, rng); break;
        case Surgery::graddrop: combined = graddrop(shared, rng); break;
        case Surgery::cagrad: {
            // CAGrad's direction is mean-based; scaling by the task count puts
            // it on the same footing as the summed update.
            const bool all_zero = norm(shared[0]) == 0.0 && norm(shared[1]) == 0.0;
            combined = all_zero ? Vector(ToyModel::kShared, 0.0) : cagrad(shared, config.cagrad_c).direction;
            for (auto& x : combined) x *= 2.0;
            break;
        }
        }
        for (std::size_t k = 0; k < ToyModel::kShared; ++k) params[k] -= lr * combined[k];
        for (std::size_t k = ToyModel::kShared; k < ToyModel::kParams; ++k)
            params[k] -= lr * (g.regression[k] + g.classification[k]);
    }
    const auto final_losses = model.losses(params);
    guard(final_losses);
    out.history.push_back({final_losses, weights});
    out.accuracy = model.accuracy(params);
    return out;
}

// ---------------------------------------------------------------------------
// Ablation report
// ---------------------------------------------------------------------------

struct RunRecord {
    StrategyConfig config;
    int run = 0;
    std::uint64_t seed = 0;
    TaskLossPair initial;
    TaskLossPair final;
    double accuracy = 0.0;
};

inline constexpr std::array<std::string_view, 3> kReportMetrics = {"regression_loss", "classification_loss", "classification_accuracy"};

inline std::array<double, 3> metric_values(const RunRecord& r) {
    return {r.final.regression, r.final.classification, r.accuracy};
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

/// Population mean and standard deviation.
inline MeanStd mean_std(std::span<const double> values) {
    require(!values.empty(), ErrorKind::invalid_argument, "mean of an empty set");
    MeanStd m;
    for (double v : values) m.mean += v;
    m.mean /= static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - m.mean) * (v - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(values.size()));
    return m;
}

struct ReportRow {
    std::string group;
    std::string label;
    std::size_t runs = 0;
    std::array<MeanStd, 3> metrics{};
};

struct AblationReport {
    /// One row per balancing method, then one per surgery method; each pools
    /// every run of every configuration in that group.
    std::vector<ReportRow> grouped;
    /// One row per configuration over its runs.
    std::vector<ReportRow> per_config;
};

inline AblationReport ablation_report(std::span<const RunRecord> records) {
    require(!records.empty(), ErrorKind::invalid_argument, "ablation report needs at least one run");
    const auto row_of = [](std::string group, std::string name, const std::vector<const RunRecord*>& rs) {
        ReportRow row{std::move(group), std::move(name), rs.size(), {}};
        for (std::size_t m = 0; m < 3; ++m) {
            std::vector<double> vals;
            for (const auto* r : rs) vals.push_back(metric_values(*r)[m]);
            row.metrics[m] = mean_std(vals);
        }
        return row;
    };
    AblationReport rep;
    for (auto b : kAllBalancing) {
        std::vector<const RunRecord*> rs;
        for (const auto& r : records)
            if (r.config.balancing == b) rs.push_back(&r);
        if (!rs.empty()) rep.grouped.push_back(row_of("Loss Balancing", std::string(label(b)), rs));
    }
    for (auto s : kAllSurgery) {
        std::vector<const RunRecord*> rs;
        for (const auto& r : records)
            if (r.config.surgery == s) rs.push_back(&r);
        if (!rs.empty()) rep.grouped.push_back(row_of("Gradient Conflict Resolution", std::string(label(s)), rs));
    }
    for (auto b : kAllBalancing)
        for (auto s : kAllSurgery) {
            std::vector<const RunRecord*> rs;
            for (const auto& r : records)
                if (r.config.balancing == b && r.config.surgery == s) rs.push_back(&r);
            if (rs.empty()) continue;
            rep.per_config.push_back(row_of(std::string(label(b)), s == Surgery::none ? std::string(label(b)) : "+ " + std::string(label(s)), rs));
        }
    return rep;
}

inline nlohmann::json to_json(const AblationReport& rep) {
    const auto rows = [](const std::vector<ReportRow>& in) {
        auto arr = nlohmann::json::array();
        for (const auto& r : in) {
            nlohmann::json j{{"group", r.group}, {"label", r.label}, {"runs", r.runs}};
            for (std::size_t m = 0; m < 3; ++m)
                j[std::string(kReportMetrics[m])] = {{"mean", r.metrics[m].mean}, {"std", r.metrics[m].std}};
            arr.push_back(std::move(j));
        }
        return arr;
    };
    return {{"grouped", rows(rep.grouped)}, {"per_config", rows(rep.per_config)}};
}

namespace detail {

inline std::string fixed(double v, int digits) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(digits);
    os << v;
    return os.str();
}

} // namespace detail

inline std::string to_markdown(const AblationReport& rep) {
    std::ostringstream os;
    const auto header = [&](std::string_view first, std::string_view second) {
        os << "| " << first << " | " << second;
        for (auto m : kReportMetrics) os << " | " << m;
        os << " |\n|---|---";
        for (std::size_t i = 0; i < kReportMetrics.size(); ++i) os << "|---";
        os << "|\n";
    };
    const auto body = [&](const std::vector<ReportRow>& rows, bool show_group) {
        std::string last;
        for (const auto& r : rows) {
            os << "| " << (show_group && r.group != last ? r.group : "") << " | " << r.label;
            for (const auto& m : r.metrics) os << " | " << detail::fixed(m.mean, 4) << " ± " << detail::fixed(m.std, 4);
            os << " |\n";
            last = r.group;
        }
    };
    os << "## Grouped by strategy\n\n";
    header("Strategy", "Method");
    body(rep.grouped, true);
    os << "\n## Per configuration\n\n";
    header("Balancing", "Configuration");
    body(rep.per_config, true);
    return os.str();
}

inline std::string to_csv(const AblationReport& rep) {
    std::ostringstream os;
    os << "table,group,label,runs";
    for (auto m : kReportMetrics) os << ',' << m << "_mean," << m << "_std";
    os << '\n';
    const auto body = [&](std::string_view table, const std::vector<ReportRow>& rows) {
        for (const auto& r : rows) {
            os << table << ',' << r.group << ',' << r.label << ',' << r.runs;
            for (const auto& m : r.metrics) os << ',' << detail::fixed(m.mean, 6) << ',' << detail::fixed(m.std, 6);
            os << '\n';
        }
    };
    body("grouped", rep.grouped);
    body("per_config", rep.per_config);
    return os.str();
}

// ---------------------------------------------------------------------------
// Lab configuration
// ---------------------------------------------------------------------------

struct LabConfig {
    std::vector<StrategyConfig> strategies;
    int steps = 500;
    std::uint64_t seed = 0;
};

/// Every balancing x surgery combination with default hyperparameters.
inline std::vector<StrategyConfig> full_grid() {
    std::vector<StrategyConfig> out;
    for (auto b : kAllBalancing)
        for (auto s : kAllSurgery) {
            StrategyConfig c;
            c.balancing = b;
            c.surgery = s;
            out.push_back(c);
        }
    return out;
}

/// {"steps": 500, "seed": 0, "strategies": "all" | [{"balancing", "surgery",
/// optional "learning_rate", "cagrad_c", "dwa_temperature", "log_var_learning_rate"}]}
inline LabConfig lab_config_from_json(const nlohmann::json& j) {
    LabConfig cfg;
    try {
        require(j.is_object(), ErrorKind::parse, "lab config must be a JSON object");
        cfg.steps = j.value("steps", 500);
        cfg.seed = j.value("seed", std::uint64_t{0});
        const auto& st = j.contains("strategies") ? j.at("strategies") : nlohmann::json("all");
        if (st.is_string()) {
            require(st == "all", ErrorKind::parse, "strategies must be \"all\" or a list");
            cfg.strategies = full_grid();
        } else {
            for (const auto& e : st) {
                StrategyConfig c;
                c.balancing = parse_balancing(e.at("balancing").get<std::string>());
                c.surgery = parse_surgery(e.value("surgery", std::string("none")));
                c.learning_rate = e.value("learning_rate", c.learning_rate);
                c.cagrad_c = e.value("cagrad_c", c.cagrad_c);
                c.dwa_temperature = e.value("dwa_temperature", c.dwa_temperature);
                c.log_var_learning_rate = e.value("log_var_learning_rate", c.log_var_learning_rate);
                cfg.strategies.push_back(c);
            }
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, std::string("malformed lab config: ") + e.what());
    }
    require(!cfg.strategies.empty(), ErrorKind::invalid_argument, "lab config lists no strategies");
    require(cfg.steps >= 1, ErrorKind::invalid_argument, "steps must be at least 1");
    return cfg;
}

/// Run r of every strategy shares seed `base + r`, hence the same data and
/// initialisation.
inline std::uint64_t run_seed(std::uint64_t base, int run) { return base + static_cast<std::uint64_t>(run); }

inline RunRecord record_of(const StrategyConfig& config, int run, std::uint64_t seed, const TrainResult& result) {
    return {config, run, seed, result.history.front().losses, result.history.back().losses, result.accuracy};
}

inline nlohmann::json history_to_json(const StrategyConfig& config, int run, std::uint64_t seed, const TrainResult& result) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& h : result.history)
        steps.push_back({{"regression_loss", h.losses.regression}, {"classification_loss", h.losses.classification}, {"weights", h.weights}});
    return {{"strategy", config.name()},
            {"balancing", std::string(to_string(config.balancing))},
            {"surgery", std::string(to_string(config.surgery))},
            {"run", run},
            {"seed", seed},
            {"accuracy", result.accuracy},
            {"history", steps}};
}

} // namespace forestchat::mtl
