#pragma once

// Patch-level masking plans with separate ratios for ROI and background
// patches. Visibility bit 1 = visible, 0 = masked.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mwm/detail/base64.hpp"
#include "mwm/error.hpp"
#include "mwm/grid.hpp"
#include "mwm/rng.hpp"
#include "mwm/roi.hpp"

namespace mwm {

struct PatchGrid {
    std::size_t image_h = 0;
    std::size_t image_w = 0;
    std::size_t patch = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;

    static PatchGrid make(std::size_t image_h, std::size_t image_w, std::size_t patch) {
        if (patch == 0 || image_h == 0 || image_w == 0) {
            throw Error(Errc::InvalidArgument, "patch grid needs positive image and patch sizes");
        }
        return {image_h, image_w, patch, (image_h + patch - 1) / patch, (image_w + patch - 1) / patch};
    }

    std::size_t count() const noexcept { return rows * cols; }

    /// Pixel area of patch (r, c); edge patches are clipped to the image.
    std::size_t patch_area(std::size_t r, std::size_t c) const noexcept {
        const std::size_t ph = std::min(patch, image_h - r * patch);
        const std::size_t pw = std::min(patch, image_w - c * patch);
        return ph * pw;
    }

    friend bool operator==(const PatchGrid&, const PatchGrid&) = default;
};

enum class Region : std::uint8_t { Background = 0, Roi = 1 };

using RegionLabels = Grid<std::uint8_t>;  // rows x cols, values are Region

struct MaskPlan {
    std::string image_id;
    PatchGrid grid;
    RegionLabels region;
    Grid<std::uint8_t> visible;
    double roi_ratio = 0.0;
    double bg_ratio = 0.0;
    std::uint64_t seed = 0;

    bool is_visible(std::size_t r, std::size_t c) const { return visible(r, c) != 0; }
    std::size_t masked_count() const {
        return visible.size() - static_cast<std::size_t>(std::count(visible.values().begin(), visible.values().end(), 1));
    }

    friend bool operator==(const MaskPlan&, const MaskPlan&) = default;
};

/// Patch is ROI when the union of boxes covers at least `overlap_threshold`
/// of its (clipped) area.
inline RegionLabels classify_patches(const PatchGrid& grid, std::span<const RoiBox> rois,
                                     double overlap_threshold = 0.5) {
    if (!(overlap_threshold > 0.0 && overlap_threshold <= 1.0)) {
        throw Error(Errc::InvalidArgument, "overlap threshold must be in (0, 1]");
    }
    RegionLabels labels(grid.rows, grid.cols, static_cast<std::uint8_t>(Region::Background));
    if (rois.empty()) return labels;
    const BinaryMask covered = rasterize(rois, grid.image_h, grid.image_w);
    for (std::size_t pr = 0; pr < grid.rows; ++pr) {
        for (std::size_t pc = 0; pc < grid.cols; ++pc) {
            std::size_t hits = 0;
            const std::size_t r1 = std::min(grid.image_h, (pr + 1) * grid.patch);
            const std::size_t c1 = std::min(grid.image_w, (pc + 1) * grid.patch);
            for (std::size_t r = pr * grid.patch; r < r1; ++r) {
                for (std::size_t c = pc * grid.patch; c < c1; ++c) hits += covered(r, c);
            }
            const double fraction = static_cast<double>(hits) / static_cast<double>(grid.patch_area(pr, pc));
            if (fraction >= overlap_threshold) labels(pr, pc) = static_cast<std::uint8_t>(Region::Roi);
        }
    }
    return labels;
}

/// round-half-away-from-zero(ratio * n), optionally at least one when the
/// ratio is positive and the region is nonempty.
inline std::size_t masked_target(double ratio, std::size_t n, bool at_least_one = false) {
    auto k = static_cast<std::size_t>(std::lround(ratio * static_cast<double>(n)));
    if (at_least_one && ratio > 0.0 && n >= 1) k = std::max<std::size_t>(k, 1);
    return std::min(k, n);
}

namespace detail {

// Masks `k` of `indices`, uniformly without replacement (partial Fisher-Yates).
inline void mask_subset(std::vector<std::size_t> indices, std::size_t k, Rng& rng,
                        Grid<std::uint8_t>& visible) {
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(indices.size() - i));
        std::swap(indices[i], indices[j]);
        visible[indices[i]] = 0;
    }
}

inline void require_ratio(double r, const char* what) {
    if (!(r >= 0.0 && r <= 1.0)) throw Error(Errc::InvalidArgument, std::string(what) + " must be in [0, 1]");
}

}  // namespace detail

inline MaskPlan sample_plan(const PatchGrid& grid, const RegionLabels& labels, double roi_ratio, double bg_ratio,
                            std::uint64_t seed) {
    detail::require_ratio(roi_ratio, "roi_ratio");
    detail::require_ratio(bg_ratio, "bg_ratio");
    if (labels.height() != grid.rows || labels.width() != grid.cols) {
        throw Error(Errc::ShapeMismatch, "region labels do not match the patch grid");
    }
    std::vector<std::size_t> roi, bg;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        (labels[i] == static_cast<std::uint8_t>(Region::Roi) ? roi : bg).push_back(i);
    }
    MaskPlan plan{{}, grid, labels, Grid<std::uint8_t>(grid.rows, grid.cols, 1), roi_ratio, bg_ratio, seed};
    Rng rng(seed);
    detail::mask_subset(roi, masked_target(roi_ratio, roi.size(), true), rng, plan.visible);
    detail::mask_subset(bg, masked_target(bg_ratio, bg.size()), rng, plan.visible);
    return plan;
}

inline double overall_ratio(const MaskPlan& plan) {
    if (plan.visible.empty()) return 0.0;
    return static_cast<double>(plan.masked_count()) / static_cast<double>(plan.visible.size());
}

/// Region-agnostic baseline: every patch is background.
inline MaskPlan random_plan(const PatchGrid& grid, double ratio, std::uint64_t seed) {
    return sample_plan(grid, RegionLabels(grid.rows, grid.cols, 0), 0.0, ratio, seed);
}

/// Background ratio that brings the overall masked fraction to `target`,
/// given that ROI patches are masked at `roi_ratio`.
inline double solve_bg_ratio(const RegionLabels& labels, double roi_ratio, double target) {
    const std::size_t total = labels.size();
    const auto n_roi = static_cast<std::size_t>(
        std::count(labels.values().begin(), labels.values().end(), static_cast<std::uint8_t>(Region::Roi)));
    const std::size_t n_bg = total - n_roi;
    if (n_bg == 0) return 0.0;
    const double roi_masked = static_cast<double>(masked_target(roi_ratio, n_roi, true));
    return std::clamp((target * static_cast<double>(total) - roi_masked) / static_cast<double>(n_bg), 0.0, 1.0);
}

namespace detail {

inline std::string pack_bits(const Grid<std::uint8_t>& bits) {
    std::vector<std::uint8_t> bytes((bits.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < bits.size(); ++i) {
        if (bits[i]) bytes[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    }
    return base64_encode(bytes);
}

inline Grid<std::uint8_t> unpack_bits(const std::string& text, std::size_t rows, std::size_t cols) {
    const auto bytes = base64_decode(text);
    if (bytes.size() != (rows * cols + 7) / 8) throw Error(Errc::ConfigInvalid, "bitset length mismatch");
    Grid<std::uint8_t> bits(rows, cols);
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = (bytes[i / 8] >> (i % 8)) & 1u;
    return bits;
}

}  // namespace detail

/// Bitsets are row-major, least significant bit first, base64 encoded.
inline nlohmann::ordered_json plan_to_json(const MaskPlan& plan) {
    nlohmann::ordered_json j;
    j["image_id"] = plan.image_id;
    j["patch"] = plan.grid.patch;
    j["rows"] = plan.grid.rows;
    j["cols"] = plan.grid.cols;
    j["image_h"] = plan.grid.image_h;
    j["image_w"] = plan.grid.image_w;
    j["roi_ratio"] = plan.roi_ratio;
    j["bg_ratio"] = plan.bg_ratio;
    j["seed"] = plan.seed;
    j["region"] = detail::pack_bits(plan.region);
    j["visible"] = detail::pack_bits(plan.visible);
    return j;
}

inline MaskPlan plan_from_json(const nlohmann::json& j) {
    try {
        MaskPlan plan;
        plan.image_id = j.value("image_id", std::string{});
        const auto patch = j.at("patch").get<std::size_t>();
        const auto rows = j.at("rows").get<std::size_t>();
        const auto cols = j.at("cols").get<std::size_t>();
        const auto h = j.value("image_h", rows * patch);
        const auto w = j.value("image_w", cols * patch);
        plan.grid = PatchGrid::make(h, w, patch);
        if (plan.grid.rows != rows || plan.grid.cols != cols) {
            throw Error(Errc::ConfigInvalid, "plan rows/cols inconsistent with image size");
        }
        plan.roi_ratio = j.at("roi_ratio").get<double>();
        plan.bg_ratio = j.at("bg_ratio").get<double>();
        plan.seed = j.at("seed").get<std::uint64_t>();
        plan.region = detail::unpack_bits(j.at("region").get<std::string>(), rows, cols);
        plan.visible = detail::unpack_bits(j.at("visible").get<std::string>(), rows, cols);
        return plan;
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::ConfigInvalid, std::string("bad plan file: ") + e.what());
    }
}

inline MaskPlan load_plan(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::IOFailure, "cannot open " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::ConfigInvalid, path.string() + ": " + e.what());
    }
    return plan_from_json(j);
}

}  // namespace mwm
