// SPDX-License-Identifier: Apache-2.0
#pragma once

// Zero-shot change detection by comparing each mask proposal's embedding in
// its own image with the embedding of the same footprint in the other image.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "forestchat/error.hpp"
#include "forestchat/raster.hpp"
#include "forestchat/rng.hpp"

namespace forestchat {

// ---------------------------------------------------------------------------
// Angles
// ---------------------------------------------------------------------------

inline double norm(std::span<const float> v) {
    double s = 0.0;
    for (float x : v) s += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(s);
}

/// Angle between two embeddings in degrees, in [0, 180]. Computed as
/// 2 atan2(|a/|a| - b/|b||, |a/|a| + b/|b||), which equals the arccos of the
/// cosine but keeps full precision near 0 and 180 degrees.
inline double latent_angle(std::span<const float> a, std::span<const float> b) {
    require(a.size() == b.size(), ErrorKind::dimension_mismatch,
            "embedding dimensions differ: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    const double na = norm(a), nb = norm(b);
    require(na > 0.0 && nb > 0.0, ErrorKind::invalid_argument, "embedding has zero norm");
    double diff = 0.0, sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = static_cast<double>(a[i]) / na, y = static_cast<double>(b[i]) / nb;
        diff += (x - y) * (x - y);
        sum += (x + y) * (x + y);
    }
    return 2.0 * std::atan2(std::sqrt(diff), std::sqrt(sum)) * 180.0 / std::numbers::pi;
}

// ---------------------------------------------------------------------------
// Footprints
// ---------------------------------------------------------------------------

/// Row-major run lengths alternating unset/set, starting with an unset run
/// (possibly 0).
struct Footprint {
    std::vector<std::uint32_t> counts;

    std::size_t pixels() const {
        std::size_t n = 0;
        for (std::size_t i = 1; i < counts.size(); i += 2) n += counts[i];
        return n;
    }
    std::size_t length() const {
        std::size_t n = 0;
        for (auto c : counts) n += c;
        return n;
    }
    bool operator==(const Footprint&) const = default;
};

inline Footprint encode_footprint(const ChangeMask& mask) {
    Footprint f;
    std::uint8_t current = 0;
    std::uint32_t run = 0;
    for (auto b : mask.bits()) {
        const std::uint8_t v = b ? 1 : 0;
        if (v != current) {
            f.counts.push_back(run);
            run = 0;
            current = v;
        }
        ++run;
    }
    f.counts.push_back(run);
    return f;
}

inline ChangeMask decode_footprint(const Footprint& f, int width, int height) {
    ChangeMask m(width, height);
    require(f.length() == m.size(), ErrorKind::out_of_bounds,
            "footprint covers " + std::to_string(f.length()) + " pixels but the image is " + dims_string(width, height));
    std::size_t pos = 0;
    for (std::size_t i = 0; i < f.counts.size(); ++i) {
        if (i % 2 == 1)
            for (std::size_t k = 0; k < f.counts[i]; ++k) {
                const auto p = pos + k;
                m.set(static_cast<int>(p / static_cast<std::size_t>(width)), static_cast<int>(p % static_cast<std::size_t>(width)), true);
            }
        pos += f.counts[i];
    }
    return m;
}

/// Whether the footprint covers the pixel at linear index `index`.
inline bool footprint_contains(const Footprint& f, std::size_t index) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < f.counts.size(); ++i) {
        pos += f.counts[i];
        if (index < pos) return i % 2 == 1;
    }
    return false;
}

// ---------------------------------------------------------------------------
// Proposals
// ---------------------------------------------------------------------------

enum class Epoch { t1, t2 };

inline std::string_view to_string(Epoch e) { return e == Epoch::t1 ? "t1" : "t2"; }

struct Proposal {
    int id = 0;
    Epoch time = Epoch::t1;
    Footprint footprint;
    double area_fraction = 0.0;
    double stability = 0.0;
    /// Embedding of the footprint in its own image.
    std::vector<float> emb_same;
    /// Embedding of the same footprint in the other image.
    std::vector<float> emb_other;

    bool operator==(const Proposal&) const = default;
};

struct ProposalSet {
    int width = 0;
    int height = 0;
    int embedding_dim = 0;
    int points_per_side = 16;
    std::vector<Proposal> proposals;

    std::vector<Proposal> at(Epoch e) const {
        std::vector<Proposal> out;
        for (const auto& p : proposals)
            if (p.time == e) out.push_back(p);
        return out;
    }
    bool operator==(const ProposalSet&) const = default;
};

/// Checks the per-proposal invariants against the set header.
inline void validate(const ProposalSet& set) {
    require(set.width > 0 && set.height > 0, ErrorKind::invalid_argument, "proposal set needs positive dimensions");
    require(set.embedding_dim > 0, ErrorKind::invalid_argument, "embedding_dim must be positive");
    const auto pixels = static_cast<std::size_t>(set.width) * static_cast<std::size_t>(set.height);
    std::vector<int> ids;
    for (const auto& p : set.proposals) {
        const auto tag = "proposal " + std::to_string(p.id) + ": ";
        require(p.emb_same.size() == static_cast<std::size_t>(set.embedding_dim) &&
                    p.emb_other.size() == static_cast<std::size_t>(set.embedding_dim),
                ErrorKind::dimension_mismatch, tag + "embedding length differs from embedding_dim");
        require(norm(p.emb_same) > 0.0 && norm(p.emb_other) > 0.0, ErrorKind::invalid_argument, tag + "zero embedding");
        require(p.stability >= 0.0 && p.stability <= 1.0, ErrorKind::invalid_argument, tag + "stability outside [0, 1]");
        require(p.area_fraction > 0.0 && p.area_fraction <= 1.0, ErrorKind::invalid_argument, tag + "area_fraction outside (0, 1]");
        require(p.footprint.length() == pixels, ErrorKind::out_of_bounds, tag + "footprint does not match the image size");
        ids.push_back(p.id);
    }
    std::sort(ids.begin(), ids.end());
    require(std::adjacent_find(ids.begin(), ids.end()) == ids.end(), ErrorKind::invalid_argument, "duplicate proposal id");
}

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

enum class AreaRule {
    /// Drop proposals covering more than `area_threshold` of the image.
    max_fraction,
    /// Drop proposals covering less than `area_threshold` of the image.
    min_fraction,
};

struct MatchParams {
    double change_angle_threshold = 145.0;
    double stability_threshold = 0.93;
    double area_threshold = 0.9;
    AreaRule area_rule = AreaRule::max_fraction;
    std::size_t min_area_pixels = 400;
    double object_similarity_threshold = 60.0;
    std::optional<std::size_t> top_k;

    void validate() const {
        require(change_angle_threshold >= 0.0 && change_angle_threshold <= 180.0, ErrorKind::invalid_argument,
                "change angle threshold must lie in [0, 180]");
        require(object_similarity_threshold >= 0.0 && object_similarity_threshold <= 180.0, ErrorKind::invalid_argument,
                "object similarity threshold must lie in [0, 180]");
        require(stability_threshold >= 0.0 && stability_threshold <= 1.0, ErrorKind::invalid_argument,
                "stability threshold must lie in [0, 1]");
        require(area_threshold > 0.0 && area_threshold <= 1.0, ErrorKind::invalid_argument, "area threshold must lie in (0, 1]");
    }
};

inline bool passes_filters(const Proposal& p, const MatchParams& params) {
    if (p.stability < params.stability_threshold) return false;
    if (p.footprint.pixels() < params.min_area_pixels) return false;
    if (params.area_rule == AreaRule::max_fraction) return p.area_fraction <= params.area_threshold;
    return p.area_fraction >= params.area_threshold;
}

inline std::vector<Proposal> filter_proposals(std::span<const Proposal> proposals, const MatchParams& params) {
    params.validate();
    std::vector<Proposal> out;
    for (const auto& p : proposals)
        if (passes_filters(p, params)) out.push_back(p);
    return out;
}

struct ChangeMatch {
    Proposal proposal;
    double change_angle = 0.0;
};

inline double change_angle(const Proposal& p) { return latent_angle(p.emb_same, p.emb_other); }

namespace detail {

/// Thresholds or ranks scored proposals; output sorted by id.
inline std::vector<ChangeMatch> select_changes(std::vector<ChangeMatch> scored, const MatchParams& params) {
    if (params.top_k) {
        std::sort(scored.begin(), scored.end(), [](const ChangeMatch& a, const ChangeMatch& b) {
            return a.change_angle != b.change_angle ? a.change_angle > b.change_angle : a.proposal.id < b.proposal.id;
        });
        scored.resize(std::min(scored.size(), *params.top_k));
    } else {
        std::erase_if(scored, [&](const ChangeMatch& m) { return m.change_angle < params.change_angle_threshold; });
    }
    std::sort(scored.begin(), scored.end(), [](const ChangeMatch& a, const ChangeMatch& b) { return a.proposal.id < b.proposal.id; });
    return scored;
}

} // namespace detail

/// Filters both epochs, scores every survivor by its cross-time angle and
/// keeps those at or above the threshold (or the top_k largest). The result
/// is the union over both epochs, so swapping the inputs gives the same set.
inline std::vector<ChangeMatch> bitemporal_match(std::span<const Proposal> t1, std::span<const Proposal> t2, const MatchParams& params) {
    std::vector<ChangeMatch> scored;
    for (const auto* side : {&t1, &t2})
        for (auto& p : filter_proposals(*side, params)) {
            const double angle = change_angle(p);
            scored.push_back({std::move(p), angle});
        }
    return detail::select_changes(std::move(scored), params);
}

struct QueryPoint {
    int row = 0;
    int col = 0;
    Epoch time = Epoch::t1;
};

struct PointQueryResult {
    std::vector<int> seed_ids;
    std::vector<int> category_ids;
    std::vector<ChangeMatch> changes;
};

/// Finds proposals under the clicked points, averages their unit embeddings
/// into a query, gathers every proposal within the object similarity angle of
/// it and keeps the changed ones.
inline PointQueryResult point_query(std::span<const QueryPoint> points, std::span<const Proposal> t1, std::span<const Proposal> t2,
                                    int width, int height, const MatchParams& params) {
    require(!points.empty(), ErrorKind::invalid_argument, "point query needs at least one point");
    for (const auto& q : points)
        require(q.row >= 0 && q.row < height && q.col >= 0 && q.col < width, ErrorKind::out_of_bounds,
                "query point (" + std::to_string(q.row) + ", " + std::to_string(q.col) + ") lies outside " + dims_string(width, height));

    std::vector<Proposal> pool;
    for (const auto* side : {&t1, &t2})
        for (auto& p : filter_proposals(*side, params)) pool.push_back(std::move(p));

    PointQueryResult result;
    std::vector<double> query;
    for (const auto& p : pool) {
        const bool hit = std::any_of(points.begin(), points.end(), [&](const QueryPoint& q) {
            const auto idx = static_cast<std::size_t>(q.row) * static_cast<std::size_t>(width) + static_cast<std::size_t>(q.col);
            return q.time == p.time && footprint_contains(p.footprint, idx);
        });
        if (!hit) continue;
        result.seed_ids.push_back(p.id);
        const double n = norm(p.emb_same);
        require(n > 0.0, ErrorKind::invalid_argument, "proposal " + std::to_string(p.id) + " has a zero embedding");
        if (query.empty()) query.assign(p.emb_same.size(), 0.0);
        require(query.size() == p.emb_same.size(), ErrorKind::dimension_mismatch, "seed embeddings differ in dimension");
        for (std::size_t i = 0; i < query.size(); ++i) query[i] += static_cast<double>(p.emb_same[i]) / n;
    }
    require(!result.seed_ids.empty(), ErrorKind::not_found, "no proposal contains any of the query points");

    std::vector<float> q(query.size());
    for (std::size_t i = 0; i < q.size(); ++i) q[i] = static_cast<float>(query[i] / static_cast<double>(result.seed_ids.size()));
    require(norm(q) > 0.0, ErrorKind::numeric, "seed embeddings cancel out; the query direction is undefined");

    std::vector<ChangeMatch> category;
    for (auto& p : pool) {
        const bool seed = std::find(result.seed_ids.begin(), result.seed_ids.end(), p.id) != result.seed_ids.end();
        if (!seed && latent_angle(q, p.emb_same) > params.object_similarity_threshold) continue;
        result.category_ids.push_back(p.id);
        const double angle = change_angle(p);
        category.push_back({std::move(p), angle});
    }
    std::sort(result.seed_ids.begin(), result.seed_ids.end());
    std::sort(result.category_ids.begin(), result.category_ids.end());
    result.changes = detail::select_changes(std::move(category), params);
    return result;
}

inline ChangeMask proposals_to_mask(std::span<const ChangeMatch> matches, int width, int height) {
    ChangeMask m(width, height);
    for (const auto& match : matches) {
        const auto& f = match.proposal.footprint;
        require(f.length() == m.size(), ErrorKind::out_of_bounds,
                "footprint of proposal " + std::to_string(match.proposal.id) + " does not fit " + dims_string(width, height));
        std::size_t pos = 0;
        for (std::size_t i = 0; i < f.counts.size(); ++i) {
            if (i % 2 == 1)
                for (std::size_t k = pos; k < pos + f.counts[i]; ++k)
                    m.set(static_cast<int>(k / static_cast<std::size_t>(width)), static_cast<int>(k % static_cast<std::size_t>(width)), true);
            pos += f.counts[i];
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Synthetic proposals
// ---------------------------------------------------------------------------

struct SynthSpec {
    int clusters = 2;
    int proposals_per_cluster = 6;
    int planted_changes = 3;
    double angle_within = 10.0;
    double angle_between = 90.0;
    double planted_change_angle = 150.0;
    /// Low-stability proposals with large cross-time angles.
    int unstable_distractors = 2;
    /// Adds one near-whole-image proposal with a large cross-time angle.
    bool whole_image_distractor = true;
    int width = 256;
    int height = 256;
    int points_per_side = 16;
    int embedding_dim = 32;
    std::uint64_t seed = 0;
};

struct SynthResult {
    ProposalSet set;
    ChangeMask truth;
    std::vector<int> planted_ids;
    /// Cluster index per proposal id; -1 for distractors.
    std::vector<int> cluster_of;
};

namespace detail {

using Vec = std::vector<double>;

inline double dot(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline void normalize(Vec& v) {
    const double n = std::sqrt(dot(v, v));
    for (auto& x : v) x /= n;
}

inline Vec random_unit(Rng& rng, std::size_t dim) {
    Vec v(dim);
    do {
        for (auto& x : v) x = normal01(rng);
    } while (dot(v, v) < 1e-12);
    normalize(v);
    return v;
}

/// Unit vector at exactly `degrees` from unit vector `v`, in a random direction.
inline Vec rotate_random(const Vec& v, double degrees, Rng& rng) {
    Vec u;
    do {
        u = random_unit(rng, v.size());
        const double d = dot(u, v);
        for (std::size_t i = 0; i < u.size(); ++i) u[i] -= d * v[i];
    } while (dot(u, u) < 1e-6);
    normalize(u);
    const double t = degrees * std::numbers::pi / 180.0;
    Vec out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::cos(t) * v[i] + std::sin(t) * u[i];
    return out;
}

inline std::vector<float> to_float(const Vec& v) { return {v.begin(), v.end()}; }

/// `k` unit vectors with every pairwise angle equal to `degrees`, randomly
/// oriented in `dim` dimensions (Cholesky factor of the Gram matrix).
inline std::vector<Vec> equiangular_centers(int k, double degrees, std::size_t dim, Rng& rng) {
    const double c = std::cos(degrees * std::numbers::pi / 180.0);
    const auto n = static_cast<std::size_t>(k);
    require(n <= dim, ErrorKind::invalid_argument, "embedding_dim must be at least the cluster count");
    std::vector<Vec> L(n, Vec(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
            double s = (i == j) ? 1.0 : c;
            for (std::size_t m = 0; m < j; ++m) s -= L[i][m] * L[j][m];
            if (i == j) {
                require(s > 1e-12, ErrorKind::invalid_argument,
                        std::to_string(k) + " clusters cannot be mutually " + std::to_string(degrees) + " degrees apart");
                L[i][i] = std::sqrt(s);
            } else {
                L[i][j] = s / L[j][j];
            }
        }
    // Random orthonormal basis by Gram-Schmidt.
    std::vector<Vec> basis;
    while (basis.size() < n) {
        Vec v = random_unit(rng, dim);
        for (const auto& b : basis) {
            const double d = dot(v, b);
            for (std::size_t i = 0; i < dim; ++i) v[i] -= d * b[i];
        }
        if (dot(v, v) < 1e-6) continue;
        normalize(v);
        basis.push_back(std::move(v));
    }
    std::vector<Vec> centers(n, Vec(dim, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j)
            for (std::size_t d = 0; d < dim; ++d) centers[i][d] += L[i][j] * basis[j][d];
    return centers;
}

} // namespace detail

inline SynthResult synth_proposals(const SynthSpec& spec) {
    require(spec.clusters >= 1 && spec.proposals_per_cluster >= 1, ErrorKind::invalid_argument, "need at least one cluster member");
    require(spec.angle_within >= 0.0 && spec.angle_within < spec.angle_between, ErrorKind::invalid_argument,
            "angle_within must be below angle_between");
    require(spec.angle_within < 90.0, ErrorKind::invalid_argument, "angle_within must be below 90 degrees");
    require(spec.planted_change_angle >= 0.0 && spec.planted_change_angle <= 180.0, ErrorKind::invalid_argument,
            "planted change angle must lie in [0, 180]");
    const int members = spec.clusters * spec.proposals_per_cluster;
    require(spec.planted_changes >= 0 && spec.planted_changes <= members, ErrorKind::invalid_argument,
            "more planted changes than cluster members");
    require(spec.points_per_side >= 4 && spec.width >= spec.points_per_side && spec.height >= spec.points_per_side,
            ErrorKind::invalid_argument, "image too small for the proposal grid");

    Rng rng = make_rng(spec.seed);
    const auto dim = static_cast<std::size_t>(spec.embedding_dim);
    const auto centers = detail::equiangular_centers(spec.clusters, spec.angle_between, dim, rng);

    SynthResult out;
    out.set.width = spec.width;
    out.set.height = spec.height;
    out.set.embedding_dim = spec.embedding_dim;
    out.set.points_per_side = spec.points_per_side;
    out.truth = ChangeMask(spec.width, spec.height);

    // Footprints are non-overlapping blocks of grid tiles.
    const int g = spec.points_per_side;
    std::vector<std::uint8_t> used(static_cast<std::size_t>(g * g), 0);
    const auto place_block = [&]() {
        for (int attempt = 0; attempt < 2000; ++attempt) {
            const int bh = 2 + static_cast<int>(uniform_index(rng, 2)), bw = 2 + static_cast<int>(uniform_index(rng, 2));
            const int r0 = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(g - bh + 1)));
            const int c0 = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(g - bw + 1)));
            bool free = true;
            for (int r = r0; r < r0 + bh && free; ++r)
                for (int c = c0; c < c0 + bw && free; ++c) free = used[static_cast<std::size_t>(r * g + c)] == 0;
            if (!free) continue;
            ChangeMask m(spec.width, spec.height);
            for (int r = r0; r < r0 + bh; ++r)
                for (int c = c0; c < c0 + bw; ++c) {
                    used[static_cast<std::size_t>(r * g + c)] = 1;
                    const int y0 = r * spec.height / g, y1 = (r + 1) * spec.height / g;
                    const int x0 = c * spec.width / g, x1 = (c + 1) * spec.width / g;
                    for (int y = y0; y < y1; ++y)
                        for (int x = x0; x < x1; ++x) m.set(y, x, true);
                }
            return m;
        }
        fail(ErrorKind::invalid_argument, "too many proposals to place without overlap on the grid");
    };
    const auto add = [&](const ChangeMask& fp, const detail::Vec& same, const detail::Vec& other, double stability, int cluster) {
        Proposal p;
        p.id = static_cast<int>(out.set.proposals.size());
        p.time = uniform_index(rng, 2) == 0 ? Epoch::t1 : Epoch::t2;
        p.footprint = encode_footprint(fp);
        p.area_fraction = static_cast<double>(fp.count()) / static_cast<double>(fp.size());
        p.stability = stability;
        p.emb_same = detail::to_float(same);
        p.emb_other = detail::to_float(other);
        out.set.proposals.push_back(std::move(p));
        out.cluster_of.push_back(cluster);
    };

    std::vector<int> order(static_cast<std::size_t>(members));
    for (int i = 0; i < members; ++i) order[static_cast<std::size_t>(i)] = i;
    shuffle(std::span<int>(order), rng);
    std::vector<std::uint8_t> planted(static_cast<std::size_t>(members), 0);
    for (int i = 0; i < spec.planted_changes; ++i) planted[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;

    for (int k = 0; k < spec.clusters; ++k)
        for (int j = 0; j < spec.proposals_per_cluster; ++j) {
            const auto member = static_cast<std::size_t>(k * spec.proposals_per_cluster + j);
            const auto same = detail::rotate_random(centers[static_cast<std::size_t>(k)], uniform(rng, 0.0, spec.angle_within), rng);
            const bool is_planted = planted[member] != 0;
            const auto other = detail::rotate_random(same, is_planted ? spec.planted_change_angle : uniform(rng, 0.0, spec.angle_within), rng);
            const auto fp = place_block();
            if (is_planted) {
                out.planted_ids.push_back(static_cast<int>(out.set.proposals.size()));
                for (std::size_t i = 0; i < fp.size(); ++i)
                    if (fp.bits()[i]) out.truth.set(static_cast<int>(i) / spec.width, static_cast<int>(i) % spec.width, true);
            }
            add(fp, same, other, uniform(rng, 0.95, 1.0), k);
        }
    for (int i = 0; i < spec.unstable_distractors; ++i) {
        const auto same = detail::random_unit(rng, dim);
        add(place_block(), same, detail::rotate_random(same, 170.0, rng), uniform(rng, 0.3, 0.85), -1);
    }
    if (spec.whole_image_distractor) {
        ChangeMask fp = ChangeMask::filled(spec.width, spec.height, true);
        for (int x = 0; x < spec.width; ++x) fp.set(0, x, false);
        const auto same = detail::random_unit(rng, dim);
        add(fp, same, detail::rotate_random(same, 170.0, rng), 0.99, -1);
    }
    return out;
}

} // namespace forestchat
