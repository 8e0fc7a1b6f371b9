// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "forestchat/error.hpp"

namespace forestchat {

inline std::string dims_string(int width, int height) {
    return std::to_string(width) + "x" + std::to_string(height);
}

// ---------------------------------------------------------------------------
// Raster types
// ---------------------------------------------------------------------------

/// Binary change raster, row-major, 1 = change.
class ChangeMask {
public:
    ChangeMask() = default;

    ChangeMask(int width, int height) : width_(width), height_(height) {
        require(width > 0 && height > 0, ErrorKind::invalid_argument,
                "mask dimensions must be positive, got " + dims_string(width, height));
        bits_.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), 0);
    }

    ChangeMask(int width, int height, std::vector<std::uint8_t> bits) : ChangeMask(width, height) {
        require(bits.size() == bits_.size(), ErrorKind::invalid_argument,
                "mask data length " + std::to_string(bits.size()) + " does not match " + dims_string(width, height));
        for (auto b : bits) require(b <= 1, ErrorKind::invalid_argument, "mask cells must be 0 or 1");
        bits_ = std::move(bits);
    }

    static ChangeMask filled(int width, int height, bool value) {
        ChangeMask m(width, height);
        std::fill(m.bits_.begin(), m.bits_.end(), static_cast<std::uint8_t>(value));
        return m;
    }

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    std::size_t size() const noexcept { return bits_.size(); }
    bool empty() const noexcept { return bits_.empty(); }

    bool at(int row, int col) const { return bits_[index(row, col)] != 0; }
    void set(int row, int col, bool value) { bits_[index(row, col)] = static_cast<std::uint8_t>(value); }
    bool contains(int row, int col) const noexcept { return row >= 0 && col >= 0 && row < height_ && col < width_; }

    std::span<const std::uint8_t> bits() const noexcept { return bits_; }

    std::size_t count() const noexcept {
        return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
    }

    bool same_shape(const ChangeMask& other) const noexcept {
        return width_ == other.width_ && height_ == other.height_;
    }

    bool operator==(const ChangeMask&) const = default;

private:
    std::size_t index(int row, int col) const {
        return static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(col);
    }

    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint8_t> bits_;
};

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
    bool operator==(const Rgb&) const = default;
};

/// Interleaved 8-bit RGB raster.
class RgbImage {
public:
    RgbImage() = default;

    RgbImage(int width, int height, Rgb fill = {}) : width_(width), height_(height) {
        require(width > 0 && height > 0, ErrorKind::invalid_argument,
                "image dimensions must be positive, got " + dims_string(width, height));
        data_.resize(static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3);
        for (std::size_t i = 0; i < data_.size(); i += 3) {
            data_[i] = fill.r;
            data_[i + 1] = fill.g;
            data_[i + 2] = fill.b;
        }
    }

    RgbImage(int width, int height, std::vector<std::uint8_t> data) : width_(width), height_(height) {
        require(width > 0 && height > 0, ErrorKind::invalid_argument,
                "image dimensions must be positive, got " + dims_string(width, height));
        require(data.size() == static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3,
                ErrorKind::invalid_argument, "RGB data length does not match " + dims_string(width, height));
        data_ = std::move(data);
    }

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    bool empty() const noexcept { return data_.empty(); }

    Rgb at(int row, int col) const {
        const auto i = offset(row, col);
        return {data_[i], data_[i + 1], data_[i + 2]};
    }
    void set(int row, int col, Rgb px) {
        const auto i = offset(row, col);
        data_[i] = px.r;
        data_[i + 1] = px.g;
        data_[i + 2] = px.b;
    }
    std::uint8_t channel(int row, int col, int c) const { return data_[offset(row, col) + static_cast<std::size_t>(c)]; }

    std::span<const std::uint8_t> data() const noexcept { return data_; }
    std::span<std::uint8_t> data() noexcept { return data_; }

    bool same_shape(const RgbImage& other) const noexcept {
        return width_ == other.width_ && height_ == other.height_;
    }

    bool operator==(const RgbImage&) const = default;

private:
    std::size_t offset(int row, int col) const {
        return (static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(col)) * 3;
    }

    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint8_t> data_;
};

/// Co-registered image pair with optional ground truth.
class BitemporalPair {
public:
    BitemporalPair(RgbImage image_a, RgbImage image_b, std::optional<ChangeMask> ground_truth = std::nullopt)
        : image_a_(std::move(image_a)), image_b_(std::move(image_b)), ground_truth_(std::move(ground_truth)) {
        require(image_a_.same_shape(image_b_), ErrorKind::dimension_mismatch,
                "image A is " + dims_string(image_a_.width(), image_a_.height()) + " but image B is " +
                    dims_string(image_b_.width(), image_b_.height()));
        if (ground_truth_) {
            require(ground_truth_->width() == image_a_.width() && ground_truth_->height() == image_a_.height(),
                    ErrorKind::dimension_mismatch, "ground truth dimensions do not match the image pair");
        }
    }

    const RgbImage& image_a() const noexcept { return image_a_; }
    const RgbImage& image_b() const noexcept { return image_b_; }
    const std::optional<ChangeMask>& ground_truth() const noexcept { return ground_truth_; }
    int width() const noexcept { return image_a_.width(); }
    int height() const noexcept { return image_a_.height(); }

private:
    RgbImage image_a_;
    RgbImage image_b_;
    std::optional<ChangeMask> ground_truth_;
};

// ---------------------------------------------------------------------------
// Mask analytics
// ---------------------------------------------------------------------------

inline double change_fraction(const ChangeMask& mask) {
    return static_cast<double>(mask.count()) / static_cast<double>(mask.size());
}

enum class Connectivity { four = 4, eight = 8 };

struct BoundingBox {
    int min_row = 0, min_col = 0, max_row = 0, max_col = 0;
    bool operator==(const BoundingBox&) const = default;
};

struct Patch {
    int id = 0;
    std::size_t area = 0;
    BoundingBox bbox;
    double centroid_row = 0.0;
    double centroid_col = 0.0;
};

/// Maximal connected components of change pixels, largest first; ties by (min_row, min_col).
inline std::vector<Patch> connected_patches(const ChangeMask& mask, Connectivity connectivity = Connectivity::eight) {
    const int w = mask.width(), h = mask.height();
    std::vector<std::uint8_t> seen(mask.size(), 0);
    std::vector<Patch> patches;
    std::vector<std::pair<int, int>> stack;

    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const auto start = static_cast<std::size_t>(r) * static_cast<std::size_t>(w) + static_cast<std::size_t>(c);
            if (!mask.at(r, c) || seen[start]) continue;
            seen[start] = 1;
            stack.assign(1, {r, c});
            Patch p;
            p.bbox = {r, c, r, c};
            double sum_r = 0.0, sum_c = 0.0;
            while (!stack.empty()) {
                const auto [pr, pc] = stack.back();
                stack.pop_back();
                ++p.area;
                sum_r += pr;
                sum_c += pc;
                p.bbox.min_row = std::min(p.bbox.min_row, pr);
                p.bbox.min_col = std::min(p.bbox.min_col, pc);
                p.bbox.max_row = std::max(p.bbox.max_row, pr);
                p.bbox.max_col = std::max(p.bbox.max_col, pc);
                for (int dr = -1; dr <= 1; ++dr) {
                    for (int dc = -1; dc <= 1; ++dc) {
                        if (dr == 0 && dc == 0) continue;
                        if (connectivity == Connectivity::four && dr != 0 && dc != 0) continue;
                        const int nr = pr + dr, nc = pc + dc;
                        if (!mask.contains(nr, nc) || !mask.at(nr, nc)) continue;
                        const auto ni = static_cast<std::size_t>(nr) * static_cast<std::size_t>(w) + static_cast<std::size_t>(nc);
                        if (seen[ni]) continue;
                        seen[ni] = 1;
                        stack.emplace_back(nr, nc);
                    }
                }
            }
            p.centroid_row = sum_r / static_cast<double>(p.area);
            p.centroid_col = sum_c / static_cast<double>(p.area);
            patches.push_back(p);
        }
    }

    std::sort(patches.begin(), patches.end(), [](const Patch& a, const Patch& b) {
        if (a.area != b.area) return a.area > b.area;
        if (a.bbox.min_row != b.bbox.min_row) return a.bbox.min_row < b.bbox.min_row;
        return a.bbox.min_col < b.bbox.min_col;
    });
    for (std::size_t i = 0; i < patches.size(); ++i) patches[i].id = static_cast<int>(i);
    return patches;
}

struct PatchStatistics {
    std::size_t count = 0;
    double mean_area = 0.0;
    double std_area = 0.0;
    double coefficient_of_variation = 0.0;
};

/// Population statistics over patch areas; CV is 0 for fewer than two patches.
inline PatchStatistics patch_statistics(std::span<const Patch> patches) {
    PatchStatistics s;
    s.count = patches.size();
    if (patches.empty()) return s;
    double sum = 0.0;
    for (const auto& p : patches) sum += static_cast<double>(p.area);
    s.mean_area = sum / static_cast<double>(s.count);
    double ss = 0.0;
    for (const auto& p : patches) {
        const double d = static_cast<double>(p.area) - s.mean_area;
        ss += d * d;
    }
    s.std_area = std::sqrt(ss / static_cast<double>(s.count));
    s.coefficient_of_variation = s.count <= 1 ? 0.0 : s.std_area / s.mean_area;
    return s;
}

enum class GridCell { top_left, top_center, top_right, center_left, center, center_right, bottom_left, bottom_center, bottom_right };

inline constexpr std::array<std::string_view, 9> kGridCellNames = {
    "top-left", "top-center", "top-right", "center-left", "center", "center-right", "bottom-left", "bottom-center", "bottom-right",
};

inline std::string_view to_string(GridCell cell) { return kGridCellNames[static_cast<std::size_t>(cell)]; }

inline constexpr double kConcentrationShare = 0.25;

struct SpatialDistribution {
    enum class Layout { none, concentrated, scattered };

    std::array<double, 9> share{};
    Layout layout = Layout::none;
    /// Cells with share >= 0.25 by descending share (concentrated layout only).
    std::vector<GridCell> cells;

    double share_of(GridCell cell) const { return share[static_cast<std::size_t>(cell)]; }
    std::size_t occupied_cells() const {
        return static_cast<std::size_t>(std::count_if(share.begin(), share.end(), [](double s) { return s > 0.0; }));
    }
};

inline std::string_view to_string(SpatialDistribution::Layout layout) {
    switch (layout) {
    case SpatialDistribution::Layout::none: return "none";
    case SpatialDistribution::Layout::concentrated: return "concentrated";
    case SpatialDistribution::Layout::scattered: return "scattered";
    }
    return "none";
}

inline GridCell grid_cell_of(double row, double col, int width, int height) {
    const auto band = [](double v, int extent) {
        const int b = static_cast<int>(std::floor(v * 3.0 / static_cast<double>(extent)));
        return std::clamp(b, 0, 2);
    };
    return static_cast<GridCell>(band(row, height) * 3 + band(col, width));
}

/// Credits each patch's area to the 3x3 cell holding its centroid.
inline SpatialDistribution spatial_distribution(std::span<const Patch> patches, int width, int height) {
    require(width >= 3 && height >= 3, ErrorKind::invalid_argument,
            "a 3x3 grid needs at least 3x3 pixels, got " + dims_string(width, height));
    SpatialDistribution d;
    double total = 0.0;
    std::array<double, 9> area{};
    for (const auto& p : patches) {
        area[static_cast<std::size_t>(grid_cell_of(p.centroid_row, p.centroid_col, width, height))] += static_cast<double>(p.area);
        total += static_cast<double>(p.area);
    }
    if (total <= 0.0) return d;
    for (std::size_t i = 0; i < 9; ++i) d.share[i] = area[i] / total;

    for (std::size_t i = 0; i < 9; ++i)
        if (d.share[i] >= kConcentrationShare) d.cells.push_back(static_cast<GridCell>(i));
    std::stable_sort(d.cells.begin(), d.cells.end(), [&](GridCell a, GridCell b) { return d.share_of(a) > d.share_of(b); });

    if (!d.cells.empty())
        d.layout = SpatialDistribution::Layout::concentrated;
    else if (d.occupied_cells() >= 4)
        d.layout = SpatialDistribution::Layout::scattered;
    return d;
}

// ---------------------------------------------------------------------------
// Classical differencing detector
// ---------------------------------------------------------------------------

enum class ThresholdMode { otsu, fixed };

struct DifferenceConfig {
    double blur_sigma = 1.0;
    ThresholdMode threshold_mode = ThresholdMode::otsu;
    /// Used with ThresholdMode::fixed, in RGB-distance units (0 .. 255*sqrt(3)).
    double fixed_threshold = 60.0;
    int min_area = 50;
    int morph_radius = 1;
};

namespace detail {

using Field = std::vector<double>;

inline Field gaussian_blur(const Field& in, int w, int h, double sigma) {
    if (sigma <= 0.0) return in;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double norm = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[static_cast<std::size_t>(i + radius)] = std::exp(-(i * i) / (2.0 * sigma * sigma));
        norm += kernel[static_cast<std::size_t>(i + radius)];
    }
    for (auto& k : kernel) k /= norm;

    Field tmp(in.size()), out(in.size());
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int cc = std::clamp(c + i, 0, w - 1);
                acc += kernel[static_cast<std::size_t>(i + radius)] * in[static_cast<std::size_t>(r * w + cc)];
            }
            tmp[static_cast<std::size_t>(r * w + c)] = acc;
        }
    }
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int rr = std::clamp(r + i, 0, h - 1);
                acc += kernel[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(rr * w + c)];
            }
            out[static_cast<std::size_t>(r * w + c)] = acc;
        }
    }
    return out;
}

/// Otsu's threshold over a 256-bin histogram spanning [0, max]. Returns the
/// last bin of the background class, or nullopt when no split exists.
inline std::optional<int> otsu_bin(const std::array<std::size_t, 256>& hist) {
    std::size_t total = 0;
    double weighted = 0.0;
    for (int i = 0; i < 256; ++i) {
        total += hist[static_cast<std::size_t>(i)];
        weighted += static_cast<double>(i) * static_cast<double>(hist[static_cast<std::size_t>(i)]);
    }
    std::optional<int> best;
    double best_var = -1.0;
    std::size_t w0 = 0;
    double sum0 = 0.0;
    for (int t = 0; t < 255; ++t) {
        w0 += hist[static_cast<std::size_t>(t)];
        sum0 += static_cast<double>(t) * static_cast<double>(hist[static_cast<std::size_t>(t)]);
        const std::size_t w1 = total - w0;
        if (w0 == 0 || w1 == 0) continue;
        const double m0 = sum0 / static_cast<double>(w0);
        const double m1 = (weighted - sum0) / static_cast<double>(w1);
        const double var = static_cast<double>(w0) * static_cast<double>(w1) * (m0 - m1) * (m0 - m1);
        if (var > best_var) {
            best_var = var;
            best = t;
        }
    }
    return best;
}

// Square structuring element; pixels outside the raster never shrink an erosion
// and never grow a dilation.
inline std::vector<std::uint8_t> morph(const std::vector<std::uint8_t>& in, int w, int h, int radius, bool dilate) {
    if (radius <= 0) return in;
    std::vector<std::uint8_t> tmp(in.size()), out(in.size());
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            std::uint8_t v = dilate ? 0 : 1;
            for (int i = std::max(0, c - radius); i <= std::min(w - 1, c + radius); ++i) {
                const auto x = in[static_cast<std::size_t>(r * w + i)];
                v = dilate ? std::max(v, x) : std::min(v, x);
            }
            tmp[static_cast<std::size_t>(r * w + c)] = v;
        }
    }
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            std::uint8_t v = dilate ? 0 : 1;
            for (int i = std::max(0, r - radius); i <= std::min(h - 1, r + radius); ++i) {
                const auto x = tmp[static_cast<std::size_t>(i * w + c)];
                v = dilate ? std::max(v, x) : std::min(v, x);
            }
            out[static_cast<std::size_t>(r * w + c)] = v;
        }
    }
    return out;
}

} // namespace detail

/// Per-pixel Euclidean RGB distance between the two acquisitions.
inline std::vector<double> rgb_distance(const RgbImage& a, const RgbImage& b) {
    require(a.same_shape(b), ErrorKind::dimension_mismatch, "images must share dimensions");
    std::vector<double> d(static_cast<std::size_t>(a.width()) * static_cast<std::size_t>(a.height()));
    const auto pa = a.data(), pb = b.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            const double diff = static_cast<double>(pa[i * 3 + c]) - static_cast<double>(pb[i * 3 + c]);
            acc += diff * diff;
        }
        d[i] = std::sqrt(acc);
    }
    return d;
}

/// Removes 8-connected components smaller than `min_area` pixels.
inline ChangeMask remove_small_patches(const ChangeMask& mask, std::size_t min_area) {
    if (min_area <= 1) return mask;
    ChangeMask out(mask.width(), mask.height());
    const int w = mask.width(), h = mask.height();
    std::vector<int> label(mask.size(), -1);
    std::vector<std::pair<int, int>> stack, members;
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const auto idx = static_cast<std::size_t>(r * w + c);
            if (!mask.at(r, c) || label[idx] >= 0) continue;
            label[idx] = 1;
            stack.assign(1, {r, c});
            members.clear();
            while (!stack.empty()) {
                const auto [pr, pc] = stack.back();
                stack.pop_back();
                members.emplace_back(pr, pc);
                for (int dr = -1; dr <= 1; ++dr)
                    for (int dc = -1; dc <= 1; ++dc) {
                        const int nr = pr + dr, nc = pc + dc;
                        if (!mask.contains(nr, nc) || !mask.at(nr, nc)) continue;
                        const auto ni = static_cast<std::size_t>(nr * w + nc);
                        if (label[ni] >= 0) continue;
                        label[ni] = 1;
                        stack.emplace_back(nr, nc);
                    }
            }
            if (members.size() >= min_area)
                for (const auto& [mr, mc] : members) out.set(mr, mc, true);
        }
    }
    return out;
}

/// Distance -> blur -> threshold -> open/close -> small-component removal.
inline ChangeMask difference_mask(const BitemporalPair& pair, const DifferenceConfig& cfg = {}) {
    require(cfg.blur_sigma >= 0.0, ErrorKind::invalid_argument, "blur_sigma must be non-negative");
    require(cfg.morph_radius >= 0, ErrorKind::invalid_argument, "morph_radius must be non-negative");
    require(cfg.min_area >= 0, ErrorKind::invalid_argument, "min_area must be non-negative");
    const int w = pair.width(), h = pair.height();
    const auto dist = detail::gaussian_blur(rgb_distance(pair.image_a(), pair.image_b()), w, h, cfg.blur_sigma);

    std::vector<std::uint8_t> bits(dist.size(), 0);
    if (cfg.threshold_mode == ThresholdMode::fixed) {
        for (std::size_t i = 0; i < dist.size(); ++i) bits[i] = dist[i] > cfg.fixed_threshold ? 1 : 0;
    } else {
        const double max_v = *std::max_element(dist.begin(), dist.end());
        // Blur leaves ~1e-13 residue on flat fields; anything below this is "no difference".
        if (max_v > 1e-9) {
            std::array<std::size_t, 256> hist{};
            std::vector<int> bin(dist.size());
            for (std::size_t i = 0; i < dist.size(); ++i) {
                bin[i] = std::min(255, static_cast<int>(dist[i] / max_v * 256.0));
                ++hist[static_cast<std::size_t>(bin[i])];
            }
            // A single occupied bin means a uniform difference field: nothing stands out.
            if (const auto t = detail::otsu_bin(hist))
                for (std::size_t i = 0; i < dist.size(); ++i) bits[i] = bin[i] > *t ? 1 : 0;
        }
    }

    bits = detail::morph(bits, w, h, cfg.morph_radius, false);
    bits = detail::morph(bits, w, h, cfg.morph_radius, true);
    bits = detail::morph(bits, w, h, cfg.morph_radius, true);
    bits = detail::morph(bits, w, h, cfg.morph_radius, false);

    return remove_small_patches(ChangeMask(w, h, std::move(bits)), static_cast<std::size_t>(cfg.min_area));
}

inline constexpr Rgb kOverlayTruePositive{255, 255, 0};
inline constexpr Rgb kOverlayFalsePositive{255, 0, 0};
inline constexpr Rgb kOverlayFalseNegative{0, 255, 0};

/// TP yellow, FP red, FN green; true negatives keep the base pixel.
inline RgbImage overlay(const ChangeMask& pred, const ChangeMask& gt, const RgbImage& base) {
    require(pred.same_shape(gt) && pred.width() == base.width() && pred.height() == base.height(),
            ErrorKind::dimension_mismatch, "overlay inputs must share dimensions");
    RgbImage out = base;
    for (int r = 0; r < pred.height(); ++r) {
        for (int c = 0; c < pred.width(); ++c) {
            const bool p = pred.at(r, c), g = gt.at(r, c);
            if (p && g)
                out.set(r, c, kOverlayTruePositive);
            else if (p)
                out.set(r, c, kOverlayFalsePositive);
            else if (g)
                out.set(r, c, kOverlayFalseNegative);
        }
    }
    return out;
}

} // namespace forestchat
