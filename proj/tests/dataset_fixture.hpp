// SPDX-License-Identifier: Apache-2.0
#pragma once

// Writes small on-disk datasets in the expected directory layout.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "forestchat/png_io.hpp"
#include "forestchat/rng.hpp"
#include "fixtures.hpp"

namespace forestchat::testing {

struct ToyExample {
    std::string id;
    std::string split;
    std::vector<std::string> captions;
    int changed_rows = 0;
};

/// Fresh directory under the system temp dir; removed by the destructor.
class TempDir {
public:
    explicit TempDir(const std::string& name) : path_(std::filesystem::temp_directory_path() / ("forestchat_" + name)) {
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

/// Writes random 16x16 image pairs whose masks have the first `changed_rows`
/// rows set, plus per-split caption files.
inline void write_toy_dataset(const std::filesystem::path& root, const std::vector<ToyExample>& examples, std::uint64_t seed = 1,
                              int size = 16) {
    Rng rng = make_rng(seed);
    std::map<std::string, nlohmann::json> captions;
    for (const auto& ex : examples) {
        const auto dir = root / ex.split;
        for (const char* sub : {"A", "B", "label"}) std::filesystem::create_directories(dir / sub);
        RgbImage a(size, size), b(size, size);
        for (auto* img : {&a, &b})
            for (auto& v : img->data()) v = static_cast<std::uint8_t>(uniform_index(rng, 256));
        ChangeMask m(size, size);
        for (int r = 0; r < ex.changed_rows; ++r)
            for (int c = 0; c < size; ++c) m.set(r, c, true);
        png::write_rgb(dir / "A" / (ex.id + ".png"), a);
        png::write_rgb(dir / "B" / (ex.id + ".png"), b);
        png::write_mask(dir / "label" / (ex.id + ".png"), m);
        captions[ex.split].push_back({{"example_id", ex.id}, {"filename", ex.id + ".png"}, {"captions", ex.captions}});
    }
    for (const auto& [split, arr] : captions) std::ofstream(root / (split + "_captions.json")) << arr.dump(1);
}

} // namespace forestchat::testing
