// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dataset index in the LEVIR-MCI layout: root/{train,val,test}/{A,B,label}/<id>.png
// (optionally under root/images/), with captions either in per-split files
// root/<split>_captions.json or in a single LevirCCcaptions.json.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "forestchat/error.hpp"
#include "forestchat/metrics.hpp"
#include "forestchat/png_io.hpp"
#include "forestchat/raster.hpp"
#include "forestchat/rng.hpp"

namespace forestchat::dataset {

namespace fs = std::filesystem;

enum class Split { train, val, test };

inline constexpr std::array<Split, 3> kAllSplits = {Split::train, Split::val, Split::test};

inline std::string_view to_string(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "train";
}

inline Split parse_split(std::string_view s) {
    for (auto sp : kAllSplits)
        if (to_string(sp) == s) return sp;
    fail(ErrorKind::parse, "unknown split \"" + std::string(s) + "\"");
}

struct Example {
    std::string id;
    Split split = Split::train;
    fs::path image_a;
    fs::path image_b;
    fs::path mask;
    std::vector<std::string> captions;

    bool operator==(const Example&) const = default;
};

struct DatasetIndex {
    fs::path root;
    std::map<Split, std::vector<Example>> splits;

    std::size_t size() const {
        std::size_t n = 0;
        for (const auto& [s, v] : splits) n += v.size();
        return n;
    }
    std::size_t size(Split s) const {
        const auto it = splits.find(s);
        return it == splits.end() ? 0 : it->second.size();
    }
    const std::vector<Example>& examples(Split s) const {
        static const std::vector<Example> empty;
        const auto it = splits.find(s);
        return it == splits.end() ? empty : it->second;
    }
    bool operator==(const DatasetIndex&) const = default;
};

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, path.string() + ": " + e.what());
    }
}

inline std::string stem_of(const std::string& filename) { return fs::path(filename).stem().string(); }

/// Captions keyed by (split, example id).
using CaptionTable = std::map<std::pair<Split, std::string>, std::vector<std::string>>;

/// Per-split files: [{"example_id", "filename", "captions": [...]}, ...].
inline void read_split_captions(const fs::path& path, Split split, CaptionTable& table) {
    const auto j = read_json(path);
    require(j.is_array(), ErrorKind::parse, path.string() + ": expected an array of caption records");
    try {
        for (const auto& rec : j) {
            std::string id = rec.contains("example_id") ? rec.at("example_id").get<std::string>()
                                                        : stem_of(rec.at("filename").get<std::string>());
            table[{split, id}] = rec.at("captions").get<std::vector<std::string>>();
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, path.string() + ": " + e.what());
    }
}

/// Upstream LEVIR-CC file: {"images": [{"filepath", "filename", "sentences": [{"raw"}]}]}.
inline void read_levircc_captions(const fs::path& path, CaptionTable& table) {
    const auto j = read_json(path);
    try {
        for (const auto& img : j.at("images")) {
            const auto split_name = img.contains("split") ? img.at("split").get<std::string>() : img.at("filepath").get<std::string>();
            if (split_name != "train" && split_name != "val" && split_name != "test") continue;
            std::vector<std::string> caps;
            for (const auto& s : img.at("sentences")) {
                auto raw = s.at("raw").get<std::string>();
                const auto b = raw.find_first_not_of(" \t"), e = raw.find_last_not_of(" \t");
                caps.push_back(b == std::string::npos ? std::string() : raw.substr(b, e - b + 1));
            }
            table[{parse_split(split_name), stem_of(img.at("filename").get<std::string>())}] = std::move(caps);
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, path.string() + ": " + e.what());
    }
}

inline fs::path image_root(const fs::path& root) {
    if (fs::is_directory(root / "images") && !fs::is_directory(root / "train")) return root / "images";
    return root;
}

} // namespace detail

/// Builds a sorted index. Every example must have A, B and label images of
/// equal size.
inline DatasetIndex load_index(const fs::path& root) {
    require(fs::is_directory(root), ErrorKind::not_found, "dataset root " + root.string() + " does not exist");
    DatasetIndex index;
    index.root = root;

    detail::CaptionTable captions;
    if (fs::exists(root / "LevirCCcaptions.json")) detail::read_levircc_captions(root / "LevirCCcaptions.json", captions);
    for (auto s : kAllSplits) {
        const auto file = root / (std::string(to_string(s)) + "_captions.json");
        if (fs::exists(file)) detail::read_split_captions(file, s, captions);
    }

    const auto images = detail::image_root(root);
    for (auto s : kAllSplits) {
        const auto dir = images / std::string(to_string(s));
        if (!fs::is_directory(dir)) continue;
        require(fs::is_directory(dir / "A"), ErrorKind::not_found, "missing directory " + (dir / "A").string());
        std::vector<Example> examples;
        for (const auto& entry : fs::directory_iterator(dir / "A")) {
            if (!entry.is_regular_file() || entry.path().extension() != ".png") continue;
            Example ex;
            ex.id = entry.path().stem().string();
            ex.split = s;
            ex.image_a = entry.path();
            ex.image_b = dir / "B" / entry.path().filename();
            ex.mask = dir / "label" / entry.path().filename();
            require(fs::exists(ex.image_b), ErrorKind::not_found, "example " + ex.id + ": missing image B " + ex.image_b.string());
            require(fs::exists(ex.mask), ErrorKind::not_found, "example " + ex.id + ": missing mask " + ex.mask.string());
            const auto ia = png::probe(ex.image_a), ib = png::probe(ex.image_b), im = png::probe(ex.mask);
            require(ia.width == ib.width && ia.height == ib.height && ia.width == im.width && ia.height == im.height,
                    ErrorKind::dimension_mismatch, "example " + ex.id + ": A, B and mask sizes differ");
            if (const auto it = captions.find({s, ex.id}); it != captions.end()) ex.captions = it->second;
            examples.push_back(std::move(ex));
        }
        std::sort(examples.begin(), examples.end(), [](const Example& a, const Example& b) { return a.id < b.id; });
        index.splits[s] = std::move(examples);
    }
    return index;
}

// ---------------------------------------------------------------------------
// Tree subset
// ---------------------------------------------------------------------------

inline constexpr std::array<std::string_view, 10> kTreeKeywords = {
    "tree", "trees", "wood", "woods", "woodland", "wooded", "forest", "forests", "jungle", "jungles",
};

inline bool mentions_trees(const std::vector<std::string>& captions) {
    for (const auto& c : captions)
        for (const auto& tok : tokenize(c))
            if (std::find(kTreeKeywords.begin(), kTreeKeywords.end(), tok) != kTreeKeywords.end()) return true;
    return false;
}

/// Keeps examples with a tree keyword as a whole token in any caption.
inline DatasetIndex filter_tree_examples(const DatasetIndex& index) {
    bool any_captions = false;
    for (const auto& [s, v] : index.splits)
        for (const auto& ex : v) any_captions = any_captions || !ex.captions.empty();
    require(any_captions || index.size() == 0, ErrorKind::precondition, "the index has no captions to filter on");
    DatasetIndex out;
    out.root = index.root;
    for (const auto& [s, v] : index.splits) {
        auto& kept = out.splits[s];
        for (const auto& ex : v)
            if (mentions_trees(ex.captions)) kept.push_back(ex);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitRatios {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
};

struct SplitCounts {
    std::size_t val = 0;
    std::size_t test = 0;
};

struct SplitAssignment {
    std::vector<std::string> train;
    std::vector<std::string> val;
    std::vector<std::string> test;
};

/// Sizes for `n` examples: val and test take floor(n * ratio), train the rest.
inline SplitCounts split_counts(std::size_t n, const SplitRatios& r) {
    require(r.train >= 0 && r.val >= 0 && r.test >= 0 && std::abs(r.train + r.val + r.test - 1.0) < 1e-9, ErrorKind::invalid_argument,
            "split ratios must be non-negative and sum to 1");
    const auto part = [&](double ratio) { return static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratio + 1e-9)); };
    return {part(r.val), part(r.test)};
}

/// Seeded shuffle of the sorted ids, then train | val | test in that order.
/// `counts` overrides the ratio-derived val/test sizes.
inline SplitAssignment make_splits(std::vector<std::string> ids, const SplitRatios& ratios, std::uint64_t seed,
                                   std::optional<SplitCounts> counts = std::nullopt) {
    require(!ids.empty(), ErrorKind::invalid_argument, "cannot split an empty index");
    std::sort(ids.begin(), ids.end());
    require(std::adjacent_find(ids.begin(), ids.end()) == ids.end(), ErrorKind::invalid_argument, "duplicate example id");
    const auto c = counts ? *counts : split_counts(ids.size(), ratios);
    require(c.val + c.test <= ids.size(), ErrorKind::invalid_argument, "val and test counts exceed the example count");
    Rng rng = make_rng(seed);
    shuffle(std::span<std::string>(ids), rng);
    SplitAssignment out;
    const auto n_train = ids.size() - c.val - c.test;
    const auto begin = ids.begin();
    out.train.assign(begin, begin + static_cast<long>(n_train));
    out.val.assign(begin + static_cast<long>(n_train), begin + static_cast<long>(n_train + c.val));
    out.test.assign(begin + static_cast<long>(n_train + c.val), ids.end());
    return out;
}

inline std::vector<std::string> all_ids(const DatasetIndex& index) {
    std::vector<std::string> ids;
    for (const auto& [s, v] : index.splits)
        for (const auto& ex : v) ids.push_back(ex.id);
    return ids;
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

inline constexpr std::size_t kHistogramBins = 20;

struct MaskStats {
    std::vector<std::pair<std::string, double>> fractions;
    double mean = 0.0;
    double max = 0.0;
    /// Counts over 5%-wide change-fraction bins; 1.0 falls in the last bin.
    std::array<std::size_t, kHistogramBins> histogram{};
};

inline MaskStats mask_stats(std::span<const Example> examples) {
    MaskStats s;
    for (const auto& ex : examples) {
        const double f = change_fraction(png::read_mask(ex.mask));
        s.fractions.emplace_back(ex.id, f);
        s.mean += f;
        s.max = std::max(s.max, f);
        const auto bin = std::min(kHistogramBins - 1, static_cast<std::size_t>(f * static_cast<double>(kHistogramBins)));
        ++s.histogram[bin];
    }
    if (!examples.empty()) s.mean /= static_cast<double>(examples.size());
    return s;
}

struct NormalizationStats {
    std::array<double, 3> mean{};
    std::array<double, 3> std{};
};

/// Per-channel mean and population std of both images of every example, in
/// [0, 1] units, accumulated in one streaming pass.
inline NormalizationStats normalization_stats(std::span<const Example> examples) {
    require(!examples.empty(), ErrorKind::invalid_argument, "normalisation statistics need a non-empty split");
    std::array<double, 3> mean{}, m2{};
    double count = 0.0;
    for (const auto& ex : examples)
        for (const auto* path : {&ex.image_a, &ex.image_b}) {
            const auto img = png::read_rgb(*path);
            const auto data = img.data();
            for (std::size_t i = 0; i < data.size(); i += 3) {
                count += 1.0;
                for (std::size_t c = 0; c < 3; ++c) {
                    const double v = data[i + c] / 255.0;
                    const double d = v - mean[c];
                    mean[c] += d / count;
                    m2[c] += d * (v - mean[c]);
                }
            }
        }
    NormalizationStats s;
    for (std::size_t c = 0; c < 3; ++c) {
        s.mean[c] = mean[c];
        s.std[c] = std::sqrt(m2[c] / count);
        require(s.std[c] > 0.0, ErrorKind::numeric, "channel " + std::to_string(c) + " has zero standard deviation");
    }
    return s;
}

// ---------------------------------------------------------------------------
// Resizing
// ---------------------------------------------------------------------------

/// Bilinear resize with half-pixel centres, clamped borders and rounding to
/// the nearest integer (halves up).
inline RgbImage resize_bilinear(const RgbImage& src, int width, int height) {
    require(width > 0 && height > 0, ErrorKind::invalid_argument, "target size must be positive");
    if (src.width() == width && src.height() == height) return src;
    RgbImage out(width, height);
    const double sx = static_cast<double>(src.width()) / width, sy = static_cast<double>(src.height()) / height;
    for (int r = 0; r < height; ++r) {
        const double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height() - 1));
        const int y0 = static_cast<int>(std::floor(fy)), y1 = std::min(y0 + 1, src.height() - 1);
        const double wy = fy - y0;
        for (int c = 0; c < width; ++c) {
            const double fx = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width() - 1));
            const int x0 = static_cast<int>(std::floor(fx)), x1 = std::min(x0 + 1, src.width() - 1);
            const double wx = fx - x0;
            std::array<std::uint8_t, 3> px{};
            for (int ch = 0; ch < 3; ++ch) {
                const double v = (1 - wy) * ((1 - wx) * src.channel(y0, x0, ch) + wx * src.channel(y0, x1, ch)) +
                                 wy * ((1 - wx) * src.channel(y1, x0, ch) + wx * src.channel(y1, x1, ch));
                px[static_cast<std::size_t>(ch)] = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
            }
            out.set(r, c, {px[0], px[1], px[2]});
        }
    }
    return out;
}

/// Nearest-neighbour resize (pixel centres), which keeps masks binary.
inline ChangeMask resize_nearest(const ChangeMask& src, int width, int height) {
    require(width > 0 && height > 0, ErrorKind::invalid_argument, "target size must be positive");
    ChangeMask out(width, height);
    for (int r = 0; r < height; ++r) {
        const int y = std::min(src.height() - 1, static_cast<int>((r + 0.5) * src.height() / height));
        for (int c = 0; c < width; ++c) {
            const int x = std::min(src.width() - 1, static_cast<int>((c + 0.5) * src.width() / width));
            out.set(r, c, src.at(y, x));
        }
    }
    return out;
}

struct LoadedExample {
    std::string id;
    BitemporalPair pair;
};

inline LoadedExample load_example(const Example& ex) {
    return {ex.id, BitemporalPair(png::read_rgb(ex.image_a), png::read_rgb(ex.image_b), png::read_mask(ex.mask))};
}

inline LoadedExample resize_example(const LoadedExample& ex, int size) {
    const auto& p = ex.pair;
    auto a = resize_bilinear(p.image_a(), size, size);
    auto b = resize_bilinear(p.image_b(), size, size);
    if (p.ground_truth()) return {ex.id, BitemporalPair(std::move(a), std::move(b), resize_nearest(*p.ground_truth(), size, size))};
    return {ex.id, BitemporalPair(std::move(a), std::move(b))};
}

} // namespace forestchat::dataset
