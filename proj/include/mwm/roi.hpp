#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mwm/error.hpp"
#include "mwm/grid.hpp"

namespace mwm {

/// Inclusive pixel box. `source_label` is the component it came from and
/// `margin` the fractional expansion already applied.
struct RoiBox {
    int row_min = 0;
    int col_min = 0;
    int row_max = 0;
    int col_max = 0;
    int source_label = 0;
    double margin = 0.0;

    int height() const noexcept { return row_max - row_min + 1; }
    int width() const noexcept { return col_max - col_min + 1; }
    std::size_t area() const noexcept { return static_cast<std::size_t>(height()) * width(); }
    bool contains(int r, int c) const noexcept {
        return r >= row_min && r <= row_max && c >= col_min && c <= col_max;
    }
    bool contains(const RoiBox& o) const noexcept {
        return o.row_min >= row_min && o.row_max <= row_max && o.col_min >= col_min && o.col_max <= col_max;
    }
    bool within(std::size_t height, std::size_t width) const noexcept {
        return row_min >= 0 && col_min >= 0 && row_min <= row_max && col_min <= col_max &&
               row_max < static_cast<long>(height) && col_max < static_cast<long>(width);
    }

    friend bool operator==(const RoiBox&, const RoiBox&) = default;
};

/// Union of boxes as a mask; parts outside the image are ignored.
inline BinaryMask rasterize(std::span<const RoiBox> boxes, std::size_t height, std::size_t width) {
    BinaryMask mask(height, width);
    for (const auto& b : boxes) {
        const int r0 = std::max(0, b.row_min);
        const int c0 = std::max(0, b.col_min);
        const int r1 = std::min(static_cast<int>(height) - 1, b.row_max);
        const int c1 = std::min(static_cast<int>(width) - 1, b.col_max);
        for (int r = r0; r <= r1; ++r) {
            for (int c = c0; c <= c1; ++c) mask(r, c) = 1;
        }
    }
    return mask;
}

inline BinaryMask rasterize(const RoiBox& box, std::size_t height, std::size_t width) {
    return rasterize(std::span<const RoiBox>(&box, 1), height, width);
}

struct ImageRoi {
    std::string image_id;
    RoiBox box;
};

inline nlohmann::ordered_json to_json(const std::string& image_id, const RoiBox& b) {
    nlohmann::ordered_json j;
    j["image_id"] = image_id;
    j["row_min"] = b.row_min;
    j["col_min"] = b.col_min;
    j["row_max"] = b.row_max;
    j["col_max"] = b.col_max;
    j["source_label"] = b.source_label;
    j["margin"] = b.margin;
    return j;
}

inline std::string to_jsonl(std::span<const ImageRoi> rois) {
    std::string out;
    for (const auto& roi : rois) {
        out += to_json(roi.image_id, roi.box).dump();
        out += '\n';
    }
    return out;
}

inline ImageRoi roi_from_json(const nlohmann::json& j) {
    try {
        ImageRoi roi;
        roi.image_id = j.value("image_id", std::string{});
        roi.box.row_min = j.at("row_min").get<int>();
        roi.box.col_min = j.at("col_min").get<int>();
        roi.box.row_max = j.at("row_max").get<int>();
        roi.box.col_max = j.at("col_max").get<int>();
        roi.box.source_label = j.value("source_label", 0);
        roi.box.margin = j.value("margin", 0.0);
        return roi;
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::ConfigInvalid, std::string("bad ROI record: ") + e.what());
    }
}

inline std::vector<ImageRoi> parse_jsonl(const std::string& text) {
    std::vector<ImageRoi> rois;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(start, end - start);
        start = end + 1;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw Error(Errc::ConfigInvalid, std::string("bad JSONL line: ") + e.what());
        }
        rois.push_back(roi_from_json(j));
    }
    return rois;
}

inline std::vector<ImageRoi> read_rois_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::IOFailure, "cannot open " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_jsonl(text);
}

inline void write_rois_jsonl(const std::filesystem::path& path, std::span<const ImageRoi> rois) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::IOFailure, "cannot open " + path.string() + " for writing");
    out << to_jsonl(rois);
    if (!out) throw Error(Errc::IOFailure, "short write to " + path.string());
}

}  // namespace mwm
