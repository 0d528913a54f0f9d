#pragma once

// Binary grid files ("MWMG"), binary PGM masks, and saliency normalization.
//
// Grid layout, all little-endian:
//   0..3   magic "MWMG"
//   4..7   u32 height
//   8..11  u32 width
//   12..   height*width f32, row-major

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <vector>

#include "mwm/error.hpp"
#include "mwm/grid.hpp"

namespace mwm {

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::IOFailure, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::IOFailure, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(Errc::IOFailure, "short write to " + path.string());
}

inline void put_u32le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32le(const std::uint8_t* p) {
    return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
           (std::uint32_t{p[3]} << 24);
}

inline void put_f32le(std::vector<std::uint8_t>& out, float v) {
    put_u32le(out, std::bit_cast<std::uint32_t>(v));
}

inline float get_f32le(const std::uint8_t* p) { return std::bit_cast<float>(get_u32le(p)); }

}  // namespace detail

inline constexpr std::array<char, 4> kGridMagic{'M', 'W', 'M', 'G'};

inline std::vector<std::uint8_t> encode_grid(const GridF32& grid) {
    std::vector<std::uint8_t> out;
    out.reserve(12 + 4 * grid.size());
    out.insert(out.end(), kGridMagic.begin(), kGridMagic.end());
    detail::put_u32le(out, static_cast<std::uint32_t>(grid.height()));
    detail::put_u32le(out, static_cast<std::uint32_t>(grid.width()));
    for (float v : grid.values()) detail::put_f32le(out, v);
    return out;
}

inline GridF32 decode_grid(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || !std::equal(kGridMagic.begin(), kGridMagic.end(), bytes.begin())) {
        throw Error(Errc::MagicMismatch, "missing MWMG magic");
    }
    if (bytes.size() < 12) throw Error(Errc::TruncatedFile, "header shorter than 12 bytes");
    const std::uint32_t h = detail::get_u32le(bytes.data() + 4);
    const std::uint32_t w = detail::get_u32le(bytes.data() + 8);
    if (h == 0 || w == 0) throw Error(Errc::ShapeMismatch, "grid dimensions must be positive");
    const std::uint64_t n = std::uint64_t{h} * w;
    if (bytes.size() - 12 < n * 4) {
        throw Error(Errc::TruncatedFile, "payload holds " + std::to_string((bytes.size() - 12) / 4) +
                                             " floats, header claims " + std::to_string(n));
    }
    std::vector<float> values(n);
    for (std::uint64_t i = 0; i < n; ++i) values[i] = detail::get_f32le(bytes.data() + 12 + 4 * i);
    GridF32 grid(h, w, std::move(values));
    require_finite(grid);
    return grid;
}

inline GridF32 load_grid(const std::filesystem::path& path) {
    return decode_grid(detail::read_file(path));
}

inline void save_grid(const std::filesystem::path& path, const GridF32& grid) {
    require_finite(grid);
    detail::write_file(path, encode_grid(grid));
}

/// Affine rescale to [0,1]. A constant map cannot be binarized and is rejected.
inline SaliencyMap normalize_saliency(const GridF32& raw) {
    require_finite(raw);
    if (raw.empty()) throw Error(Errc::ConstantMap, "empty saliency map");
    const auto [lo_it, hi_it] = std::minmax_element(raw.values().begin(), raw.values().end());
    const double lo = *lo_it;
    const double hi = *hi_it;
    if (!(hi > lo)) throw Error(Errc::ConstantMap, "saliency map is constant");
    const double span = hi - lo;
    GridF32 out(raw.height(), raw.width());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        out[i] = static_cast<float>(std::clamp((raw[i] - lo) / span, 0.0, 1.0));
    }
    return out;
}

/// Images must already be in [0,1]; anything else is a caller error.
inline void require_unit_range(const GridF32& image) {
    require_finite(image);
    for (float v : image.values()) {
        if (v < 0.0f || v > 1.0f) throw Error(Errc::InvalidArgument, "intensity outside [0,1]");
    }
}

namespace detail {

// Skips whitespace and '#' comments between PGM header tokens.
inline std::size_t pgm_skip(std::span<const std::uint8_t> b, std::size_t pos) {
    while (pos < b.size()) {
        if (b[pos] == '#') {
            while (pos < b.size() && b[pos] != '\n') ++pos;
        } else if (std::isspace(b[pos])) {
            ++pos;
        } else {
            break;
        }
    }
    return pos;
}

inline std::uint64_t pgm_number(std::span<const std::uint8_t> b, std::size_t& pos) {
    pos = pgm_skip(b, pos);
    if (pos >= b.size() || !std::isdigit(b[pos])) throw Error(Errc::NotPGM, "malformed PGM header");
    std::uint64_t v = 0;
    while (pos < b.size() && std::isdigit(b[pos])) {
        v = v * 10 + (b[pos] - '0');
        if (v > std::numeric_limits<std::uint32_t>::max()) throw Error(Errc::NotPGM, "PGM header value too large");
        ++pos;
    }
    return v;
}

struct PgmRaster {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> pixels;
};

inline PgmRaster decode_pgm(std::span<const std::uint8_t> b) {
    if (b.size() < 2 || b[0] != 'P' || b[1] != '5') throw Error(Errc::NotPGM, "missing P5 magic");
    std::size_t pos = 2;
    const auto width = pgm_number(b, pos);
    const auto height = pgm_number(b, pos);
    const auto maxval = pgm_number(b, pos);
    if (width == 0 || height == 0) throw Error(Errc::NotPGM, "PGM dimensions must be positive");
    if (maxval != 255) throw Error(Errc::UnsupportedMaxval, "maxval " + std::to_string(maxval));
    if (pos >= b.size() || !std::isspace(b[pos])) throw Error(Errc::NotPGM, "missing separator after maxval");
    ++pos;
    const std::size_t n = width * height;
    if (b.size() - pos < n) throw Error(Errc::TruncatedFile, "PGM raster shorter than header claims");
    return {height, width, std::vector<std::uint8_t>(b.begin() + pos, b.begin() + pos + n)};
}

inline std::vector<std::uint8_t> encode_pgm(std::size_t height, std::size_t width,
                                            std::span<const std::uint8_t> pixels) {
    const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), pixels.begin(), pixels.end());
    return out;
}

}  // namespace detail

inline BinaryMask decode_mask_pgm(std::span<const std::uint8_t> bytes) {
    auto raster = detail::decode_pgm(bytes);
    BinaryMask mask(raster.height, raster.width);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = raster.pixels[i] > 127 ? 1 : 0;
    return mask;
}

inline BinaryMask load_mask_pgm(const std::filesystem::path& path) {
    return decode_mask_pgm(detail::read_file(path));
}

/// Foreground is written as 255, background as 0.
inline void save_mask_pgm(const std::filesystem::path& path, const BinaryMask& mask) {
    std::vector<std::uint8_t> pixels(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) pixels[i] = mask[i] ? 255 : 0;
    detail::write_file(path, detail::encode_pgm(mask.height(), mask.width(), pixels));
}

/// 8-bit grayscale PGM scaled to [0,1].
inline ImageGray load_image_pgm(const std::filesystem::path& path) {
    auto raster = detail::decode_pgm(detail::read_file(path));
    ImageGray image(raster.height, raster.width);
    for (std::size_t i = 0; i < image.size(); ++i) image[i] = static_cast<float>(raster.pixels[i]) / 255.0f;
    return image;
}

/// Loads an image from either container; dispatches on the extension.
inline ImageGray load_image(const std::filesystem::path& path) {
    ImageGray image = path.extension() == ".pgm" ? load_image_pgm(path) : load_grid(path);
    require_unit_range(image);
    return image;
}

}  // namespace mwm
