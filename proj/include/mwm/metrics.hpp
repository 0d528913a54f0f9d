#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>

#include "mwm/error.hpp"
#include "mwm/grid.hpp"
#include "mwm/roi.hpp"

namespace mwm {

/// Occlusion precision |P ∩ G| / |P| and recall |P ∩ G| / |G|.
struct OcclusionScore {
    double precision = 0.0;
    double recall = 0.0;
    std::size_t intersection = 0;
    std::size_t pred_area = 0;
    std::size_t gt_area = 0;
};

inline OcclusionScore occlusion_metrics(const BinaryMask& pred, const BinaryMask& gt) {
    require_same_shape(pred, gt, "prediction vs ground truth");
    OcclusionScore s;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0;
        const bool g = gt[i] != 0;
        s.pred_area += p;
        s.gt_area += g;
        s.intersection += p && g;
    }
    if (s.pred_area == 0) throw Error(Errc::EmptyPrediction, "prediction has no pixels");
    if (s.gt_area == 0) throw Error(Errc::EmptyGroundTruth, "ground truth has no pixels");
    s.precision = static_cast<double>(s.intersection) / static_cast<double>(s.pred_area);
    s.recall = static_cast<double>(s.intersection) / static_cast<double>(s.gt_area);
    return s;
}

inline OcclusionScore occlusion_metrics(const RoiBox& pred, const BinaryMask& gt) {
    if (!pred.within(gt.height(), gt.width())) throw Error(Errc::ShapeMismatch, "box outside ground-truth frame");
    return occlusion_metrics(rasterize(pred, gt.height(), gt.width()), gt);
}

/// Unweighted means of (precision, recall).
inline std::pair<double, double> aggregate_scores(std::span<const OcclusionScore> scores) {
    if (scores.empty()) throw Error(Errc::EmptyList, "no scores to aggregate");
    double p = 0.0, r = 0.0;
    for (const auto& s : scores) {
        p += s.precision;
        r += s.recall;
    }
    const auto n = static_cast<double>(scores.size());
    return {p / n, r / n};
}

}  // namespace mwm
