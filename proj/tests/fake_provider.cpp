// Test refinement provider speaking the subprocess protocol:
//   fake_provider <mode> <image.mwmg> <boxes.jsonl> <out.pgm>
// Modes: erode (boxes shrunk by one pixel), grow (boxes grown by five
// pixels), fail (exit 3), wrongshape (one extra row and column), garbage.

#include <cstdio>
#include <string>

#include "mwm/roi.hpp"
#include "mwm/saliency_io.hpp"

int main(int argc, char** argv) {
    if (argc != 5) return 64;
    const std::string mode = argv[1];
    try {
        const auto image = mwm::load_grid(argv[2]);
        const auto rois = mwm::read_rois_jsonl(argv[3]);
        if (mode == "fail") return 3;
        if (mode == "garbage") {
            std::FILE* f = std::fopen(argv[4], "wb");
            std::fputs("not a pgm", f);
            std::fclose(f);
            return 0;
        }
        const std::size_t extra = mode == "wrongshape" ? 1 : 0;
        mwm::BinaryMask out(image.height() + extra, image.width() + extra);
        const int delta = mode == "grow" ? 5 : -1;
        for (const auto& r : rois) {
            for (int y = r.box.row_min - delta; y <= r.box.row_max + delta; ++y) {
                for (int x = r.box.col_min - delta; x <= r.box.col_max + delta; ++x) {
                    if (y >= 0 && x >= 0 && y < int(out.height()) && x < int(out.width())) out(y, x) = 1;
                }
            }
        }
        mwm::save_mask_pgm(argv[4], out);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "fake_provider: %s\n", e.what());
        return 2;
    }
    return 0;
}
