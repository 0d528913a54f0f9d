#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mwm/error.hpp"

namespace mwm {

/// Row-major 2-D container shared by saliency maps, images and masks.
template <typename T>
class Grid {
public:
    using value_type = T;

    Grid() = default;
    Grid(std::size_t height, std::size_t width, T fill = T{})
        : height_(height), width_(width), values_(height * width, fill) {}
    Grid(std::size_t height, std::size_t width, std::vector<T> values)
        : height_(height), width_(width), values_(std::move(values)) {
        if (values_.size() != height_ * width_) {
            throw Error(Errc::ShapeMismatch, "grid payload has " + std::to_string(values_.size()) +
                                                 " values, expected " +
                                                 std::to_string(height_ * width_));
        }
    }

    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    T& operator()(std::size_t r, std::size_t c) { return values_[r * width_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return values_[r * width_ + c]; }
    T& operator[](std::size_t i) { return values_[i]; }
    const T& operator[](std::size_t i) const { return values_[i]; }

    std::span<T> values() noexcept { return values_; }
    std::span<const T> values() const noexcept { return values_; }
    const std::vector<T>& storage() const noexcept { return values_; }

    bool same_shape(const auto& other) const noexcept {
        return height_ == other.height() && width_ == other.width();
    }

    friend bool operator==(const Grid&, const Grid&) = default;

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::vector<T> values_;
};

using GridF32 = Grid<float>;
/// Saliency maps are GridF32 values normalized to [0,1].
using SaliencyMap = GridF32;
/// Grayscale images share the float container; intensities live in [0,1].
using ImageGray = GridF32;
/// One byte per pixel, each 0 or 1.
using BinaryMask = Grid<std::uint8_t>;

inline std::size_t count_foreground(const BinaryMask& mask) {
    std::size_t n = 0;
    for (auto b : mask.values()) n += b != 0;
    return n;
}

inline void require_same_shape(const auto& a, const auto& b, const char* what) {
    if (a.height() != b.height() || a.width() != b.width()) {
        throw Error(Errc::ShapeMismatch,
                    std::string(what) + ": " + std::to_string(a.height()) + "x" +
                        std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                        std::to_string(b.width()));
    }
}

inline void require_finite(const GridF32& grid) {
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (!std::isfinite(grid[i])) {
            throw Error(Errc::NonFinite, "value at index " + std::to_string(i) + " is not finite");
        }
    }
}

}  // namespace mwm
