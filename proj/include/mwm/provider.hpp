#pragma once

// Refinement providers. A provider receives the image and the prompt boxes
// and returns a mask of the image's shape. External providers are plain
// executables invoked as
//     <command> <image.mwmg> <boxes.jsonl> <out_mask.pgm>
// and signal success with exit status 0 and a valid P5 PGM.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <mutex>
#include <random>
#include <span>
#include <string>

#include "mwm/error.hpp"
#include "mwm/grid.hpp"
#include "mwm/roi.hpp"
#include "mwm/saliency_io.hpp"

namespace mwm {

class RefinementProvider {
public:
    virtual ~RefinementProvider() = default;
    virtual BinaryMask refine(const ImageGray& image, std::span<const RoiBox> boxes) = 0;
    virtual std::string name() const = 0;
};

/// Returns the rasterized union of the prompt boxes.
class IdentityProvider final : public RefinementProvider {
public:
    BinaryMask refine(const ImageGray& image, std::span<const RoiBox> boxes) override {
        return rasterize(boxes, image.height(), image.width());
    }
    std::string name() const override { return "identity"; }
};

class CommandProvider final : public RefinementProvider {
public:
    /// `reentrant` providers may be called from several threads at once;
    /// otherwise calls through this instance are serialized.
    explicit CommandProvider(std::string command, bool reentrant = false)
        : command_(std::move(command)), reentrant_(reentrant) {
        if (command_.empty()) throw Error(Errc::ConfigInvalid, "empty provider command");
    }

    BinaryMask refine(const ImageGray& image, std::span<const RoiBox> boxes) override {
        std::unique_lock lock(mutex_, std::defer_lock);
        if (!reentrant_) lock.lock();

        namespace fs = std::filesystem;
        const fs::path dir = make_scratch_dir();
        struct Cleanup {
            fs::path p;
            ~Cleanup() {
                std::error_code ec;
                fs::remove_all(p, ec);
            }
        } cleanup{dir};

        const fs::path image_path = dir / "image.mwmg";
        const fs::path boxes_path = dir / "boxes.jsonl";
        const fs::path out_path = dir / "out_mask.pgm";
        save_grid(image_path, image);
        std::vector<ImageRoi> records;
        for (const auto& b : boxes) records.push_back({"prompt", b});
        write_rois_jsonl(boxes_path, records);

        const std::string cmd = command_ + " " + quote(image_path) + " " + quote(boxes_path) + " " +
                                quote(out_path);
        const int status = std::system(cmd.c_str());
        if (status != 0) {
            throw Error(Errc::ProviderFailure, "'" + command_ + "' exited with status " + std::to_string(status));
        }
        BinaryMask mask;
        try {
            mask = load_mask_pgm(out_path);
        } catch (const Error& e) {
            throw Error(Errc::ProviderFailure, std::string("unreadable provider output: ") + e.what());
        }
        require_same_shape(mask, image, "provider mask");
        return mask;
    }

    std::string name() const override { return command_; }

private:
    static std::string quote(const std::filesystem::path& p) {
        std::string out = "'";
        for (char ch : p.string()) {
            if (ch == '\'') {
                out += "'\\''";
            } else {
                out += ch;
            }
        }
        return out + "'";
    }

    static std::filesystem::path make_scratch_dir() {
        static std::atomic<unsigned> counter{0};
        static const auto salt = std::random_device{}();
        auto dir = std::filesystem::temp_directory_path() /
                   ("mwm-provider-" + std::to_string(salt) + "-" + std::to_string(counter++));
        std::filesystem::create_directories(dir);
        return dir;
    }

    std::string command_;
    bool reentrant_;
    std::mutex mutex_;
};

}  // namespace mwm
