// SPDX-License-Identifier: Apache-2.0
#pragma once

// Seeded synthetic rasters shared by the unit and acceptance suites.

#include <algorithm>
#include <cstdint>

#include "forestchat/raster.hpp"
#include "forestchat/rng.hpp"

namespace forestchat::testing {

/// Random mask with independent Bernoulli cells.
inline ChangeMask random_mask(Rng& rng, int width, int height, double density) {
    ChangeMask m(width, height);
    for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c) m.set(r, c, uniform01(rng) < density);
    return m;
}

/// Mask made of random filled rectangles.
inline ChangeMask random_blob_mask(Rng& rng, int width, int height, int blobs, int max_side) {
    ChangeMask m(width, height);
    for (int i = 0; i < blobs; ++i) {
        const int bh = 1 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(max_side)));
        const int bw = 1 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(max_side)));
        const int r0 = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(height)));
        const int c0 = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(width)));
        for (int r = r0; r < std::min(height, r0 + bh); ++r)
            for (int c = c0; c < std::min(width, c0 + bw); ++c) m.set(r, c, true);
    }
    return m;
}

struct SquareFixture {
    BitemporalPair pair;
    ChangeMask truth;
};

/// Forest-textured image A; B recolours one square to bare soil and adds
/// uniform noise of +-`noise_amplitude` (8-bit units) to every channel of B.
inline SquareFixture square_fixture(std::uint64_t seed, int size = 128, int side = 32, int noise_amplitude = 5) {
    Rng rng = make_rng(seed);
    RgbImage a(size, size);
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
            const auto jitter = [&](int base) {
                return static_cast<std::uint8_t>(std::clamp(base + static_cast<int>(uniform_index(rng, 21)) - 10, 0, 255));
            };
            a.set(r, c, {jitter(40), jitter(95), jitter(45)});
        }
    const int r0 = 8 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(size - side - 16)));
    const int c0 = 8 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(size - side - 16)));
    RgbImage b = a;
    ChangeMask truth(size, size);
    for (int r = r0; r < r0 + side; ++r)
        for (int c = c0; c < c0 + side; ++c) {
            b.set(r, c, {165, 120, 70});
            truth.set(r, c, true);
        }
    if (noise_amplitude > 0) {
        auto data = b.data();
        for (auto& v : data) {
            const int n = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(2 * noise_amplitude + 1))) - noise_amplitude;
            v = static_cast<std::uint8_t>(std::clamp(static_cast<int>(v) + n, 0, 255));
        }
    }
    return {BitemporalPair(std::move(a), std::move(b)), std::move(truth)};
}

inline double change_iou(const ChangeMask& pred, const ChangeMask& truth) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.bits()[i] != 0, t = truth.bits()[i] != 0;
        inter += p && t;
        uni += p || t;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

} // namespace forestchat::testing
