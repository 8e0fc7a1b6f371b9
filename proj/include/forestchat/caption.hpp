// SPDX-License-Identifier: Apache-2.0
#pragma once

// Rule-based change captions built from mask features.
//
// A caption is [severity] + [loss noun] + [verb] followed by the location,
// patch and variation phrases in a seeded order. Every slot draws from a
// fixed lexicon, so the token set of all captions is closed.

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "forestchat/error.hpp"
#include "forestchat/raster.hpp"
#include "forestchat/rng.hpp"

namespace forestchat {

// ---------------------------------------------------------------------------
// Bins
// ---------------------------------------------------------------------------

enum class Severity { no, minimal, slight, minor, modest, moderate, considerable, extensive };

inline constexpr std::array<std::string_view, 8> kSeverityWords = {
    "no", "minimal", "slight", "minor", "modest", "moderate", "considerable", "extensive",
};

inline std::string_view to_string(Severity s) { return kSeverityWords[static_cast<std::size_t>(s)]; }

/// Lower bounds of the non-zero severity bins, from "minimal" upwards.
inline constexpr std::array<double, 7> kSeverityLowerBounds = {0.0, 0.01, 0.03, 0.06, 0.12, 0.20, 0.35};

inline Severity severity_of(double change_fraction) {
    require(change_fraction >= 0.0 && change_fraction <= 1.0, ErrorKind::invalid_argument,
            "change fraction must lie in [0, 1], got " + std::to_string(change_fraction));
    if (change_fraction == 0.0) return Severity::no;
    int bin = 0;
    for (std::size_t i = 1; i < kSeverityLowerBounds.size(); ++i)
        if (change_fraction >= kSeverityLowerBounds[i]) bin = static_cast<int>(i);
    return static_cast<Severity>(bin + 1);
}

enum class SizeVariation { similar, some, large, high };

inline constexpr std::array<std::string_view, 4> kSizeVariationPhrases = {
    "similar in size", "showing some variation in size", "displaying large variations in size", "highly varied in size",
};

inline std::string_view to_string(SizeVariation v) { return kSizeVariationPhrases[static_cast<std::size_t>(v)]; }

inline SizeVariation size_variation_of(double coefficient_of_variation) {
    if (coefficient_of_variation < 0.3) return SizeVariation::similar;
    if (coefficient_of_variation < 0.7) return SizeVariation::some;
    if (coefficient_of_variation < 1.2) return SizeVariation::large;
    return SizeVariation::high;
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

struct CaptionFeatures {
    Severity severity = Severity::no;
    double change_fraction = 0.0;
    std::size_t patch_count = 0;
    SizeVariation size_variation = SizeVariation::similar;
    SpatialDistribution location;
};

inline CaptionFeatures extract_features(const ChangeMask& mask) {
    CaptionFeatures f;
    f.change_fraction = change_fraction(mask);
    f.severity = severity_of(f.change_fraction);
    const auto patches = connected_patches(mask);
    const auto stats = patch_statistics(patches);
    f.patch_count = stats.count;
    f.size_variation = size_variation_of(stats.coefficient_of_variation);
    f.location = spatial_distribution(patches, mask.width(), mask.height());
    return f;
}

// ---------------------------------------------------------------------------
// Lexicon
// ---------------------------------------------------------------------------

namespace lexicon {

inline constexpr std::array<std::string_view, 5> kLossNouns = {
    "forest loss", "forest degradation", "deforestation", "tree cover loss", "forest clearing",
};
inline constexpr std::array<std::string_view, 5> kVerbs = {"is visible", "is detected", "is noted", "is observed", "can be seen"};
inline constexpr std::array<std::string_view, 3> kScattered = {
    "scattered across multiple regions", "spread across the whole image", "distributed over several areas",
};
inline constexpr std::array<std::string_view, 2> kSinglePatch = {"occurring in a single patch", "forming one contiguous patch"};
inline constexpr std::array<std::string_view, 2> kFewPatches = {"occurring in a few patches", "occurring in several patches"};
inline constexpr std::array<std::string_view, 2> kManyPatches = {"occurring in many small patches", "spread over numerous patches"};
inline constexpr std::array<std::string_view, 4> kNoChange = {
    "no forest loss is detected", "no deforestation is observed", "no change in forest cover is visible", "no tree cover loss is noted",
};
/// Severity adjectives that may take the "some" prefix.
inline constexpr std::array<Severity, 5> kSomePrefixable = {
    Severity::minimal, Severity::slight, Severity::minor, Severity::modest, Severity::moderate,
};
/// Largest patch count described as "a few".
inline constexpr std::size_t kFewPatchLimit = 5;

/// Every whitespace token the engine can emit.
inline const std::set<std::string>& words() {
    static const std::set<std::string> all = [] {
        std::set<std::string> out;
        const auto add = [&](std::string_view phrase) {
            std::size_t i = 0;
            while (i < phrase.size()) {
                const auto j = std::min(phrase.find(' ', i), phrase.size());
                if (j > i) out.emplace(phrase.substr(i, j - i));
                i = j + 1;
            }
        };
        for (auto w : kSeverityWords) add(w);
        for (auto w : kSizeVariationPhrases) add(w);
        for (auto w : kGridCellNames) add(w);
        for (const auto* group : {&kLossNouns, &kVerbs}) for (auto w : *group) add(w);
        for (auto w : kScattered) add(w);
        for (const auto* group : {&kSinglePatch, &kFewPatches, &kManyPatches}) for (auto w : *group) add(w);
        for (auto w : kNoChange) add(w);
        for (auto w : {"some", "which", "are", "with", "patches", "and", "the", "in", "mainly", "located", "largely",
                       "concentrated", "area", "areas", "section", "sections"})
            add(w);
        return out;
    }();
    return all;
}

} // namespace lexicon

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace detail {

template <typename Array>
std::string_view pick(Rng& rng, const Array& options) {
    return options[uniform_index(rng, options.size())];
}

inline std::string cell_list(const std::vector<GridCell>& cells) {
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i > 0) out += " and ";
        out += to_string(cells[i]);
    }
    return out;
}

inline std::string location_phrase(const SpatialDistribution& loc, Rng& rng) {
    switch (loc.layout) {
    case SpatialDistribution::Layout::none: return {};
    case SpatialDistribution::Layout::scattered: return std::string(pick(rng, lexicon::kScattered));
    case SpatialDistribution::Layout::concentrated: break;
    }
    const bool plural = loc.cells.size() > 1;
    const std::array<std::string_view, 2> leads = {"mainly located in the", "largely concentrated in the"};
    const std::array<std::string_view, 2> tails = {plural ? "areas" : "area", plural ? "sections" : "section"};
    return std::string(pick(rng, leads)) + " " + cell_list(loc.cells) + " " + std::string(pick(rng, tails));
}

inline std::string patch_phrase(std::size_t count, Rng& rng) {
    if (count == 1) return std::string(pick(rng, lexicon::kSinglePatch));
    if (count <= lexicon::kFewPatchLimit) return std::string(pick(rng, lexicon::kFewPatches));
    return std::string(pick(rng, lexicon::kManyPatches));
}

} // namespace detail

/// Deterministic for a (features, seed) pair. An empty mask yields the fixed
/// no-change sentence.
inline std::string render_caption(const CaptionFeatures& f, std::uint64_t seed) {
    if (f.patch_count == 0 || f.severity == Severity::no) return std::string(lexicon::kNoChange[0]);
    Rng rng = make_rng(seed);

    std::string head;
    const bool prefixable = std::find(lexicon::kSomePrefixable.begin(), lexicon::kSomePrefixable.end(), f.severity) !=
                            lexicon::kSomePrefixable.end();
    if (prefixable && uniform_index(rng, 2) == 1) head = "some ";
    head += to_string(f.severity);
    head += " ";
    head += detail::pick(rng, lexicon::kLossNouns);
    head += " ";
    head += detail::pick(rng, lexicon::kVerbs);

    enum Slot { location, patch, variation };
    std::vector<Slot> order;
    if (f.location.layout != SpatialDistribution::Layout::none) order.push_back(location);
    order.push_back(patch);
    // A lone patch has no size spread to describe.
    if (f.patch_count > 1) order.push_back(variation);
    shuffle(std::span<Slot>(order), rng);

    std::string out = head;
    for (std::size_t i = 0; i < order.size(); ++i) {
        out += " ";
        switch (order[i]) {
        case location: out += detail::location_phrase(f.location, rng); break;
        case patch: out += detail::patch_phrase(f.patch_count, rng); break;
        case variation:
            out += (i > 0 && order[i - 1] == patch) ? "which are " : "with patches ";
            out += to_string(f.size_variation);
            break;
        }
    }
    return out;
}

struct CaptionSet {
    std::optional<std::string> human;
    std::vector<std::string> generated;

    /// Human caption first when present, then the generated ones.
    std::vector<std::string> all() const {
        std::vector<std::string> out;
        if (human) out.push_back(*human);
        out.insert(out.end(), generated.begin(), generated.end());
        return out;
    }
};

inline constexpr std::size_t kGeneratedCaptions = 4;
inline constexpr int kCaptionAttempts = 32;

inline CaptionSet generate_caption_set(const ChangeMask& mask, const std::optional<std::string>& human, std::uint64_t seed) {
    CaptionSet set;
    set.human = human;
    const auto features = extract_features(mask);
    if (features.patch_count == 0) {
        for (auto s : lexicon::kNoChange) set.generated.emplace_back(s);
        return set;
    }
    std::uint64_t state = seed;
    for (int attempt = 0; attempt < kCaptionAttempts && set.generated.size() < kGeneratedCaptions; ++attempt) {
        state = splitmix64(state);
        auto caption = render_caption(features, state);
        if (std::find(set.generated.begin(), set.generated.end(), caption) == set.generated.end())
            set.generated.push_back(std::move(caption));
    }
    require(set.generated.size() == kGeneratedCaptions, ErrorKind::precondition,
            "could not draw 4 distinct captions in " + std::to_string(kCaptionAttempts) + " attempts");
    return set;
}

} // namespace forestchat
