// SPDX-License-Identifier: Apache-2.0
#pragma once

// PNG codec on top of libpng's simplified API. Masks are 8-bit grayscale
// (0 = no change, 255 = change); any nonzero channel on ingestion is change.

#include <png.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "forestchat/error.hpp"
#include "forestchat/raster.hpp"

namespace forestchat::png {

namespace detail {

struct ImageGuard {
    png_image image{};
    ImageGuard() {
        image.version = PNG_IMAGE_VERSION;
    }
    ~ImageGuard() { png_image_free(&image); }
    ImageGuard(const ImageGuard&) = delete;
    ImageGuard& operator=(const ImageGuard&) = delete;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorKind::io, "short write to " + path.string());
}

inline std::vector<std::uint8_t> decode(std::span<const std::uint8_t> bytes, std::uint32_t format, int& width, int& height) {
    ImageGuard g;
    if (!png_image_begin_read_from_memory(&g.image, bytes.data(), bytes.size()))
        fail(ErrorKind::parse, std::string("invalid PNG: ") + g.image.message);
    g.image.format = format;
    std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(g.image));
    if (!png_image_finish_read(&g.image, nullptr, pixels.data(), 0, nullptr))
        fail(ErrorKind::parse, std::string("PNG decode failed: ") + g.image.message);
    width = static_cast<int>(g.image.width);
    height = static_cast<int>(g.image.height);
    return pixels;
}

inline std::vector<std::uint8_t> encode(const std::uint8_t* pixels, int width, int height, std::uint32_t format) {
    ImageGuard g;
    g.image.width = static_cast<png_uint_32>(width);
    g.image.height = static_cast<png_uint_32>(height);
    g.image.format = format;
    png_alloc_size_t size = 0;
    if (!png_image_write_get_memory_size(g.image, size, 0, pixels, 0, nullptr))
        fail(ErrorKind::io, std::string("PNG size query failed: ") + g.image.message);
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&g.image, out.data(), &size, 0, pixels, 0, nullptr))
        fail(ErrorKind::io, std::string("PNG encode failed: ") + g.image.message);
    out.resize(size);
    return out;
}

} // namespace detail

struct Dimensions {
    int width = 0;
    int height = 0;
};

/// Reads only the header.
inline Dimensions probe(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    detail::ImageGuard g;
    if (!png_image_begin_read_from_memory(&g.image, bytes.data(), bytes.size()))
        fail(ErrorKind::parse, path.string() + ": invalid PNG: " + g.image.message);
    return {static_cast<int>(g.image.width), static_cast<int>(g.image.height)};
}

inline RgbImage decode_rgb(std::span<const std::uint8_t> bytes) {
    int w = 0, h = 0;
    auto px = detail::decode(bytes, PNG_FORMAT_RGB, w, h);
    return RgbImage(w, h, std::move(px));
}

inline ChangeMask decode_mask(std::span<const std::uint8_t> bytes) {
    int w = 0, h = 0;
    const auto px = detail::decode(bytes, PNG_FORMAT_RGB, w, h);
    std::vector<std::uint8_t> bits(static_cast<std::size_t>(w) * static_cast<std::size_t>(h));
    for (std::size_t i = 0; i < bits.size(); ++i)
        bits[i] = (px[i * 3] | px[i * 3 + 1] | px[i * 3 + 2]) != 0 ? 1 : 0;
    return ChangeMask(w, h, std::move(bits));
}

inline std::vector<std::uint8_t> encode_rgb(const RgbImage& image) {
    return detail::encode(image.data().data(), image.width(), image.height(), PNG_FORMAT_RGB);
}

inline std::vector<std::uint8_t> encode_mask(const ChangeMask& mask) {
    std::vector<std::uint8_t> gray(mask.size());
    const auto bits = mask.bits();
    for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = bits[i] ? 255 : 0;
    return detail::encode(gray.data(), mask.width(), mask.height(), PNG_FORMAT_GRAY);
}

inline RgbImage read_rgb(const std::filesystem::path& path) {
    try {
        return decode_rgb(detail::read_file(path));
    } catch (const Error& e) {
        fail(e.kind(), path.string() + ": " + e.what());
    }
}

inline ChangeMask read_mask(const std::filesystem::path& path) {
    try {
        return decode_mask(detail::read_file(path));
    } catch (const Error& e) {
        fail(e.kind(), path.string() + ": " + e.what());
    }
}

inline void write_rgb(const std::filesystem::path& path, const RgbImage& image) {
    detail::write_file(path, encode_rgb(image));
}

inline void write_mask(const std::filesystem::path& path, const ChangeMask& mask) {
    detail::write_file(path, encode_mask(mask));
}

} // namespace forestchat::png
