#pragma once

// Synthetic corpus: grayscale images with Gaussian-blob "lesions", the
// matching saliency maps and ground-truth masks. Ground truth is the
// half-maximum disc of each blob; the saliency map is the blob profile
// plus a little noise, so its two-cluster split sits below half maximum
// and the binarized core covers the ground truth.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "mwm/grid.hpp"
#include "mwm/rng.hpp"

namespace mwm {

struct SynthConfig {
    std::size_t count = 10;
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t max_blobs = 2;
    double sigma_min = 5.0;
    double sigma_max = 6.5;
    double saliency_noise = 0.03;
    double image_noise = 0.04;
    std::uint64_t seed = 0;
};

struct Blob {
    double row = 0.0;
    double col = 0.0;
    double sigma = 1.0;
};

struct SynthItem {
    std::string image_id;
    std::vector<Blob> blobs;
    ImageGray image;
    GridF32 saliency;
    BinaryMask ground_truth;
};

inline std::string synth_id(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "synth_%04zu", index);
    return buf;
}

/// Max over blobs of exp(-d^2 / 2 sigma^2) at pixel (r, c).
inline double blob_profile(const std::vector<Blob>& blobs, double r, double c) {
    double v = 0.0;
    for (const auto& b : blobs) {
        const double d2 = (r - b.row) * (r - b.row) + (c - b.col) * (c - b.col);
        v = std::max(v, std::exp(-d2 / (2.0 * b.sigma * b.sigma)));
    }
    return v;
}

inline SynthItem make_synth_item(const SynthConfig& cfg, std::size_t index) {
    SynthItem item;
    item.image_id = synth_id(index);
    Rng rng(derive_seed(cfg.seed, item.image_id));

    const std::size_t n_blobs = 1 + rng.below(std::max<std::size_t>(1, cfg.max_blobs));
    for (std::size_t attempt = 0; item.blobs.size() < n_blobs && attempt < 1000; ++attempt) {
        Blob b;
        b.sigma = rng.uniform(cfg.sigma_min, cfg.sigma_max);
        const double edge = 2.5 * b.sigma;
        b.row = rng.uniform(edge, static_cast<double>(cfg.height) - 1.0 - edge);
        b.col = rng.uniform(edge, static_cast<double>(cfg.width) - 1.0 - edge);
        bool clear = true;
        for (const auto& o : item.blobs) {
            clear = clear && std::hypot(b.row - o.row, b.col - o.col) > 5.0 * std::max(b.sigma, o.sigma);
        }
        if (clear) item.blobs.push_back(b);
    }

    item.image = ImageGray(cfg.height, cfg.width);
    item.saliency = GridF32(cfg.height, cfg.width);
    item.ground_truth = BinaryMask(cfg.height, cfg.width);
    for (std::size_t r = 0; r < cfg.height; ++r) {
        for (std::size_t c = 0; c < cfg.width; ++c) {
            const double p = blob_profile(item.blobs, static_cast<double>(r), static_cast<double>(c));
            item.ground_truth(r, c) = p >= 0.5 ? 1 : 0;
            item.saliency(r, c) = static_cast<float>(std::clamp(p + cfg.saliency_noise * rng.normal(), 0.0, 1.0));
            item.image(r, c) = static_cast<float>(std::clamp(0.15 + 0.6 * p + cfg.image_noise * rng.normal(), 0.0, 1.0));
        }
    }
    return item;
}

}  // namespace mwm
