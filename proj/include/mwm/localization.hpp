#pragma once

// Saliency map -> regions of interest:
//   two-cluster k-means binarization -> connected components -> selection
//   -> enclosing boxes -> provider refinement -> margin expansion.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mwm/error.hpp"
#include "mwm/grid.hpp"
#include "mwm/provider.hpp"
#include "mwm/roi.hpp"
#include "mwm/saliency_io.hpp"

namespace mwm {

struct KMeansResult {
    std::array<double, 2> centers{};  // ascending
    BinaryMask assignment;            // 1 = member of the higher-center cluster
    double inertia = 0.0;
    int iterations = 0;
    std::vector<double> inertia_history;  // within-cluster SSE after each Lloyd update

    /// Assignment is exactly {value >= threshold()}.
    double threshold() const noexcept { return 0.5 * (centers[0] + centers[1]); }
};

/// Lloyd's algorithm with k=2 on the 1-D multiset of map values.
///
/// Centers start at the means of the lower and upper halves of the sorted
/// values, so the result does not depend on a seed. In one dimension a
/// two-cluster assignment is a threshold at the center midpoint, which lets
/// each iteration run on the sorted values with a binary search.
inline KMeansResult kmeans_binarize(const SaliencyMap& map, int max_iters = 100, double tol = 1e-6) {
    if (max_iters < 1) throw Error(Errc::InvalidArgument, "max_iters must be >= 1");
    if (map.empty()) throw Error(Errc::DegenerateClusters, "empty map");
    require_finite(map);

    std::vector<double> sorted(map.values().begin(), map.values().end());
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    std::vector<double> prefix(n + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + sorted[i];

    const std::size_t half = n / 2;
    if (half == 0) throw Error(Errc::DegenerateClusters, "need at least two values");
    double lo = prefix[half] / static_cast<double>(half);
    double hi = (prefix[n] - prefix[half]) / static_cast<double>(n - half);

    auto split_at = [&](double t) {
        return static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), t) - sorted.begin());
    };
    auto sse = [&](std::size_t k, double c0, double c1) {
        double s = 0.0;
        for (std::size_t i = 0; i < k; ++i) s += (sorted[i] - c0) * (sorted[i] - c0);
        for (std::size_t i = k; i < n; ++i) s += (sorted[i] - c1) * (sorted[i] - c1);
        return s;
    };

    KMeansResult result;
    for (int it = 0; it < max_iters; ++it) {
        const std::size_t k = split_at(0.5 * (lo + hi));
        if (k == 0 || k == n) throw Error(Errc::DegenerateClusters, "one cluster is empty");
        const double new_lo = prefix[k] / static_cast<double>(k);
        const double new_hi = (prefix[n] - prefix[k]) / static_cast<double>(n - k);
        const double shift = std::max(std::abs(new_lo - lo), std::abs(new_hi - hi));
        lo = new_lo;
        hi = new_hi;
        result.iterations = it + 1;
        result.inertia_history.push_back(sse(k, lo, hi));
        if (shift < tol) break;
    }

    result.centers = {lo, hi};
    const double t = result.threshold();
    const std::size_t k = split_at(t);
    if (k == 0 || k == n) throw Error(Errc::DegenerateClusters, "one cluster is empty");
    result.inertia = sse(k, lo, hi);
    result.assignment = BinaryMask(map.height(), map.width());
    for (std::size_t i = 0; i < map.size(); ++i) {
        result.assignment[i] = static_cast<double>(map[i]) >= t ? 1 : 0;
    }
    return result;
}

struct Component {
    int label = 0;
    std::size_t area = 0;
    int row_min = 0;
    int col_min = 0;
    int row_max = 0;
    int col_max = 0;

    friend bool operator==(const Component&, const Component&) = default;
};

struct Labeling {
    Grid<int> labels;  // 0 = background
    std::vector<Component> components;  // area descending, ties by label
};

namespace detail {

class DisjointSet {
public:
    int make() {
        parent_.push_back(static_cast<int>(parent_.size()));
        return parent_.back();
    }
    int find(int x) {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }
    void unite(int a, int b) {
        a = find(a);
        b = find(b);
        if (a != b) parent_[std::max(a, b)] = std::min(a, b);
    }

private:
    std::vector<int> parent_;
};

}  // namespace detail

/// Two-pass union-find labeling. Labels follow raster-scan order of each
/// component's first pixel, starting at 1.
inline Labeling connected_components(const BinaryMask& mask, int connectivity = 8) {
    if (connectivity != 4 && connectivity != 8) {
        throw Error(Errc::InvalidArgument, "connectivity must be 4 or 8");
    }
    const int h = static_cast<int>(mask.height());
    const int w = static_cast<int>(mask.width());
    Grid<int> provisional(mask.height(), mask.width(), -1);
    detail::DisjointSet sets;

    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            if (!mask(r, c)) continue;
            int assigned = -1;
            auto visit = [&](int rr, int cc) {
                if (rr < 0 || cc < 0 || cc >= w) return;
                const int other = provisional(rr, cc);
                if (other < 0) return;
                if (assigned < 0) {
                    assigned = other;
                } else {
                    sets.unite(assigned, other);
                }
            };
            visit(r, c - 1);
            visit(r - 1, c);
            if (connectivity == 8) {
                visit(r - 1, c - 1);
                visit(r - 1, c + 1);
            }
            provisional(r, c) = assigned >= 0 ? assigned : sets.make();
        }
    }

    Labeling out{Grid<int>(mask.height(), mask.width(), 0), {}};
    std::vector<int> root_to_label;
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const int p = provisional(r, c);
            if (p < 0) continue;
            const int root = sets.find(p);
            if (static_cast<std::size_t>(root) >= root_to_label.size()) root_to_label.resize(root + 1, 0);
            int& label = root_to_label[root];
            if (label == 0) {
                out.components.push_back({static_cast<int>(out.components.size()) + 1, 0, r, c, r, c});
                label = out.components.back().label;
            }
            out.labels(r, c) = label;
            Component& comp = out.components[label - 1];
            ++comp.area;
            comp.row_min = std::min(comp.row_min, r);
            comp.row_max = std::max(comp.row_max, r);
            comp.col_min = std::min(comp.col_min, c);
            comp.col_max = std::max(comp.col_max, c);
        }
    }
    std::stable_sort(out.components.begin(), out.components.end(),
                     [](const Component& a, const Component& b) { return a.area > b.area; });
    return out;
}

struct RelativeArea {
    double alpha = 0.5;
};
struct TopK {
    std::size_t k = 1;
};
using SelectionPolicy = std::variant<RelativeArea, TopK>;

/// Keeps the dominant components. Input must already be sorted by area
/// (descending); a nonempty input never yields an empty selection.
inline std::vector<Component> select_components(std::span<const Component> components,
                                                const SelectionPolicy& policy) {
    if (components.empty()) return {};
    std::vector<Component> kept;
    if (const auto* rel = std::get_if<RelativeArea>(&policy)) {
        const double cutoff = rel->alpha * static_cast<double>(components.front().area);
        for (const auto& c : components) {
            if (static_cast<double>(c.area) >= cutoff) kept.push_back(c);
        }
    } else {
        const std::size_t k = std::max<std::size_t>(1, std::get<TopK>(policy).k);
        kept.assign(components.begin(), components.begin() + std::min(k, components.size()));
    }
    if (kept.empty()) kept.push_back(components.front());
    return kept;
}

inline RoiBox enclosing_box(const Component& c) {
    if (c.area < 1) throw Error(Errc::EmptyMask, "component has no pixels");
    return RoiBox{c.row_min, c.col_min, c.row_max, c.col_max, c.label, 0.0};
}

/// Grows the box on every side by round(margin * side length of that axis),
/// then clamps to the image.
inline RoiBox expand_to_roi(const RoiBox& box, double margin, std::size_t height, std::size_t width) {
    if (!(margin >= 0.0)) throw Error(Errc::InvalidArgument, "margin must be >= 0");
    if (box.row_min > box.row_max || box.col_min > box.col_max) throw Error(Errc::EmptyMask, "inverted box");
    const long grow_r = std::lround(margin * box.height());
    const long grow_c = std::lround(margin * box.width());
    RoiBox out = box;
    out.row_min = static_cast<int>(std::max<long>(0, box.row_min - grow_r));
    out.col_min = static_cast<int>(std::max<long>(0, box.col_min - grow_c));
    out.row_max = static_cast<int>(std::min<long>(static_cast<long>(height) - 1, box.row_max + grow_r));
    out.col_max = static_cast<int>(std::min<long>(static_cast<long>(width) - 1, box.col_max + grow_c));
    out.margin = margin;
    return out;
}

inline std::optional<RoiBox> tight_box(const BinaryMask& mask) {
    std::optional<RoiBox> box;
    for (std::size_t r = 0; r < mask.height(); ++r) {
        for (std::size_t c = 0; c < mask.width(); ++c) {
            if (!mask(r, c)) continue;
            const int ri = static_cast<int>(r), ci = static_cast<int>(c);
            if (!box) {
                box = RoiBox{ri, ci, ri, ci, 0, 0.0};
            } else {
                box->row_min = std::min(box->row_min, ri);
                box->row_max = std::max(box->row_max, ri);
                box->col_min = std::min(box->col_min, ci);
                box->col_max = std::max(box->col_max, ci);
            }
        }
    }
    return box;
}

inline RoiBox expand_to_roi(const BinaryMask& mask, double margin) {
    auto box = tight_box(mask);
    if (!box) throw Error(Errc::EmptyMask, "mask has no foreground");
    return expand_to_roi(*box, margin, mask.height(), mask.width());
}

/// Provider mask restricted to the prompt boxes, each dilated by `margin`.
inline BinaryMask refine_regions(const ImageGray& image, std::span<const RoiBox> boxes,
                                 RefinementProvider& provider, double margin) {
    if (boxes.empty()) throw Error(Errc::InvalidArgument, "refine_regions needs at least one box");
    BinaryMask refined = provider.refine(image, boxes);
    require_same_shape(refined, image, "provider mask");
    std::vector<RoiBox> dilated;
    dilated.reserve(boxes.size());
    for (const auto& b : boxes) dilated.push_back(expand_to_roi(b, margin, image.height(), image.width()));
    const BinaryMask allowed = rasterize(dilated, image.height(), image.width());
    for (std::size_t i = 0; i < refined.size(); ++i) refined[i] = refined[i] && allowed[i];
    return refined;
}

struct LocalizeConfig {
    int connectivity = 8;
    SelectionPolicy policy = RelativeArea{0.5};
    double margin = 0.1;
    std::string provider_command;  // empty = identity provider
    int max_iters = 100;
    double tol = 1e-6;
};

/// Full localization. One box per retained component; a component whose
/// refined mask comes back empty is dropped. If every component is dropped
/// the call fails with EmptyMask.
inline std::vector<RoiBox> localize(const GridF32& map, const ImageGray& image, const LocalizeConfig& cfg,
                                    RefinementProvider& provider) {
    require_same_shape(map, image, "saliency map vs image");
    const SaliencyMap saliency = normalize_saliency(map);
    const KMeansResult km = kmeans_binarize(saliency, cfg.max_iters, cfg.tol);
    const Labeling labeling = connected_components(km.assignment, cfg.connectivity);
    const auto selected = select_components(labeling.components, cfg.policy);
    if (selected.empty()) throw Error(Errc::EmptyMask, "no foreground after binarization");

    std::vector<RoiBox> prompts;
    for (const auto& c : selected) prompts.push_back(enclosing_box(c));
    const BinaryMask refined = refine_regions(image, prompts, provider, cfg.margin);

    std::vector<RoiBox> rois;
    for (const auto& prompt : prompts) {
        const RoiBox window = expand_to_roi(prompt, cfg.margin, image.height(), image.width());
        BinaryMask region(image.height(), image.width());
        bool any = false;
        for (int r = window.row_min; r <= window.row_max; ++r) {
            for (int c = window.col_min; c <= window.col_max; ++c) {
                if (refined(r, c)) region(r, c) = 1, any = true;
            }
        }
        if (!any) continue;
        RoiBox roi = expand_to_roi(region, cfg.margin);
        roi.source_label = prompt.source_label;
        rois.push_back(roi);
    }
    if (rois.empty()) throw Error(Errc::EmptyMask, "provider removed every region");
    return rois;
}

}  // namespace mwm
