#pragma once

// Batch commands behind the `mwm` executable. Each run_* function takes a
// fully resolved option struct, writes its artifacts, and returns the exit
// status (0 ok, 1 per-item or I/O failure). Invalid configuration throws
// Error(Errc::ConfigInvalid), which the CLI maps to exit status 2.
//
// Every artifact records the master seed and a hash of the parameters that
// produced it (paths excluded), and is written under a ".partial" name that
// is renamed only once the artifact is complete.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "mwm/error.hpp"
#include "mwm/localization.hpp"
#include "mwm/mask_planner.hpp"
#include "mwm/metrics.hpp"
#include "mwm/provider.hpp"
#include "mwm/rng.hpp"
#include "mwm/roi.hpp"
#include "mwm/saliency_io.hpp"
#include "mwm/synth.hpp"
#include "mwm/toy_mim.hpp"

namespace mwm::app {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Shared plumbing

inline std::string config_hash(const ojson& params) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(stable_hash(params.dump())));
    return buf;
}

inline fs::path partial_path(const fs::path& p) { return fs::path(p.string() + ".partial"); }

inline void ensure_parent(const fs::path& p) {
    if (p.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(p.parent_path(), ec);
        if (ec) throw Error(Errc::IOFailure, "cannot create " + p.parent_path().string() + ": " + ec.message());
    }
}

/// Writes to "<path>.partial"; `commit` renames it into place.
inline void stage_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
    ensure_parent(path);
    detail::write_file(partial_path(path), bytes);
}

inline void stage_text(const fs::path& path, const std::string& text) {
    stage_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline void commit(const fs::path& path) {
    std::error_code ec;
    fs::rename(partial_path(path), path, ec);
    if (ec) throw Error(Errc::IOFailure, "cannot finalize " + path.string() + ": " + ec.message());
}

inline void write_atomically(const fs::path& path, const std::string& text) {
    stage_text(path, text);
    commit(path);
}

struct ItemError {
    std::string image_id;
    Errc code = Errc::IOFailure;
    std::string message;
};

/// JSON Lines: {"image_id", "error", "message"}.
inline void write_error_log(const fs::path& path, const std::vector<ItemError>& errors) {
    std::string text;
    for (const auto& e : errors) {
        ojson j;
        j["image_id"] = e.image_id;
        j["error"] = std::string(to_string(e.code));
        j["message"] = e.message;
        text += j.dump() + "\n";
    }
    write_atomically(fs::path(path.string() + ".errors.jsonl"), text);
}

inline ojson provenance(std::string_view command, std::uint64_t seed, const ojson& params) {
    ojson j;
    j["command"] = std::string(command);
    j["seed"] = seed;
    j["config_hash"] = config_hash(params);
    j["config"] = params;
    return j;
}

inline std::string csv_provenance(std::string_view command, std::uint64_t seed, const ojson& params) {
    return "# mwm " + std::string(command) + " seed=" + std::to_string(seed) + " config_hash=" + config_hash(params) +
           "\n";
}

/// Runs fn(i) for i in [0, n) on a small worker pool. Each index is handled
/// by exactly one worker; callers store results by index, so completion
/// order never leaks into outputs.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t workers = 0) {
    if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) fn(i);
        });
    }
}

/// Sorted stems of files in `dir` with extension `ext`.
inline std::vector<std::string> list_ids(const fs::path& dir, std::string_view ext) {
    if (!fs::is_directory(dir)) throw Error(Errc::ConfigInvalid, "not a directory: " + dir.string());
    std::vector<std::string> ids;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ext) ids.push_back(entry.path().stem().string());
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

inline fs::path find_image(const fs::path& dir, const std::string& id) {
    for (const char* ext : {".mwmg", ".pgm"}) {
        fs::path p = dir / (id + ext);
        if (fs::exists(p)) return p;
    }
    throw Error(Errc::IOFailure, "no image for " + id + " in " + dir.string());
}

inline std::map<std::string, std::vector<RoiBox>> group_by_image(const std::vector<ImageRoi>& rois) {
    std::map<std::string, std::vector<RoiBox>> out;
    for (const auto& r : rois) out[r.image_id].push_back(r.box);
    return out;
}

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
    fs::path out;
    SynthConfig cfg;
};

inline ojson synth_params(const SynthConfig& c) {
    return ojson{{"count", c.count},         {"height", c.height},
                 {"width", c.width},         {"max_blobs", c.max_blobs},
                 {"sigma_min", c.sigma_min}, {"sigma_max", c.sigma_max},
                 {"saliency_noise", c.saliency_noise}, {"image_noise", c.image_noise}};
}

/// Layout: images/<id>.mwmg, saliency/<id>.mwmg, masks/<id>.pgm, manifest.json.
inline int run_synth(const SynthOptions& opt, std::ostream& log) {
    if (opt.out.empty()) throw Error(Errc::ConfigInvalid, "synth needs an output directory");
    if (opt.cfg.count == 0) throw Error(Errc::ConfigInvalid, "--n must be positive");
    if (opt.cfg.height < 16 || opt.cfg.width < 16) throw Error(Errc::ConfigInvalid, "synthetic images must be >= 16x16");
    std::vector<std::string> ids(opt.cfg.count);
    parallel_for(opt.cfg.count, [&](std::size_t i) {
        const SynthItem item = make_synth_item(opt.cfg, i);
        ids[i] = item.image_id;
        const fs::path image = opt.out / "images" / (item.image_id + ".mwmg");
        const fs::path saliency = opt.out / "saliency" / (item.image_id + ".mwmg");
        const fs::path mask = opt.out / "masks" / (item.image_id + ".pgm");
        stage_bytes(image, encode_grid(item.image));
        stage_bytes(saliency, encode_grid(item.saliency));
        std::vector<std::uint8_t> pixels(item.ground_truth.size());
        for (std::size_t k = 0; k < pixels.size(); ++k) pixels[k] = item.ground_truth[k] ? 255 : 0;
        stage_bytes(mask, detail::encode_pgm(item.ground_truth.height(), item.ground_truth.width(), pixels));
        commit(image);
        commit(saliency);
        commit(mask);
    });
    ojson manifest = provenance("synth", opt.cfg.seed, synth_params(opt.cfg));
    manifest["items"] = ids;
    write_atomically(opt.out / "manifest.json", manifest.dump(2) + "\n");
    log << "synth: wrote " << ids.size() << " items to " << opt.out.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// localize

struct LocalizeOptions {
    fs::path saliency_dir;
    fs::path image_dir;
    fs::path out;
    LocalizeConfig cfg;
    std::uint64_t seed = 0;
};

inline ojson localize_params(const LocalizeConfig& c) {
    ojson j;
    j["connectivity"] = c.connectivity;
    if (const auto* rel = std::get_if<RelativeArea>(&c.policy)) {
        j["policy"] = "relative";
        j["alpha"] = rel->alpha;
    } else {
        j["policy"] = "topk";
        j["k"] = std::get<TopK>(c.policy).k;
    }
    j["margin"] = c.margin;
    j["provider"] = c.provider_command.empty() ? "identity" : c.provider_command;
    j["max_iters"] = c.max_iters;
    j["tol"] = c.tol;
    return j;
}

/// Reads a LocalizeConfig from JSON; absent keys keep their defaults.
inline LocalizeConfig localize_config_from_json(const nlohmann::json& j) {
    LocalizeConfig c;
    try {
        c.connectivity = j.value("connectivity", c.connectivity);
        const std::string policy = j.value("policy", std::string("relative"));
        if (policy == "relative") {
            c.policy = RelativeArea{j.value("alpha", 0.5)};
        } else if (policy == "topk") {
            c.policy = TopK{j.value("k", std::size_t{1})};
        } else {
            throw Error(Errc::ConfigInvalid, "unknown selection policy '" + policy + "'");
        }
        c.margin = j.value("margin", c.margin);
        c.provider_command = j.value("provider", std::string{});
        if (c.provider_command == "identity") c.provider_command.clear();
        c.max_iters = j.value("max_iters", c.max_iters);
        c.tol = j.value("tol", c.tol);
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::ConfigInvalid, std::string("localize config: ") + e.what());
    }
    return c;
}

inline void validate(const LocalizeConfig& c) {
    if (c.connectivity != 4 && c.connectivity != 8) throw Error(Errc::ConfigInvalid, "connectivity must be 4 or 8");
    if (!(c.margin >= 0.0)) throw Error(Errc::ConfigInvalid, "margin must be >= 0");
    if (c.max_iters < 1) throw Error(Errc::ConfigInvalid, "max_iters must be >= 1");
    if (!(c.tol >= 0.0)) throw Error(Errc::ConfigInvalid, "tol must be >= 0");
    if (const auto* rel = std::get_if<RelativeArea>(&c.policy); rel && !(rel->alpha >= 0.0 && rel->alpha <= 1.0)) {
        throw Error(Errc::ConfigInvalid, "alpha must be in [0, 1]");
    }
}

inline std::unique_ptr<RefinementProvider> make_provider(const LocalizeConfig& c) {
    if (c.provider_command.empty()) return std::make_unique<IdentityProvider>();
    return std::make_unique<CommandProvider>(c.provider_command);
}

struct LocalizeOutcome {
    std::vector<ImageRoi> rois;  // sorted by image_id
    std::vector<ItemError> errors;
};

inline LocalizeOutcome localize_corpus(const fs::path& saliency_dir, const fs::path& image_dir,
                                       const LocalizeConfig& cfg) {
    validate(cfg);
    const auto ids = list_ids(saliency_dir, ".mwmg");
    auto provider = make_provider(cfg);
    std::vector<std::vector<RoiBox>> boxes(ids.size());
    std::vector<std::optional<ItemError>> failures(ids.size());
    parallel_for(ids.size(), [&](std::size_t i) {
        try {
            const GridF32 saliency = load_grid(saliency_dir / (ids[i] + ".mwmg"));
            const ImageGray image = load_image(find_image(image_dir, ids[i]));
            boxes[i] = localize(saliency, image, cfg, *provider);
        } catch (const Error& e) {
            failures[i] = ItemError{ids[i], e.code(), e.what()};
        }
    });
    LocalizeOutcome out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (failures[i]) {
            out.errors.push_back(*failures[i]);
            continue;
        }
        for (const auto& b : boxes[i]) out.rois.push_back({ids[i], b});
    }
    return out;
}

inline int finish(const fs::path& out, const std::vector<ItemError>& errors, std::ostream& log,
                  std::string_view command) {
    if (errors.empty()) {
        commit(out);
        return 0;
    }
    write_error_log(out, errors);
    for (const auto& e : errors) log << command << ": " << e.image_id << ": " << e.message << "\n";
    log << command << ": " << errors.size() << " item(s) failed; output left at " << partial_path(out).string()
        << "\n";
    return 1;
}

/// Output: JSON Lines of ROI boxes plus "<out>.meta.json" with provenance.
inline int run_localize(const LocalizeOptions& opt, std::ostream& log) {
    if (opt.out.empty()) throw Error(Errc::ConfigInvalid, "localize needs --out");
    auto outcome = localize_corpus(opt.saliency_dir, opt.image_dir, opt.cfg);
    const ojson params = localize_params(opt.cfg);
    write_atomically(fs::path(opt.out.string() + ".meta.json"),
                     provenance("localize", opt.seed, params).dump(2) + "\n");
    stage_text(opt.out, to_jsonl(outcome.rois));
    log << "localize: " << outcome.rois.size() << " boxes\n";
    return finish(opt.out, outcome.errors, log, "localize");
}

// ---------------------------------------------------------------------------
// plan

enum class Strategy { Mwm, Random };

inline Strategy parse_strategy(const std::string& s) {
    if (s == "mwm") return Strategy::Mwm;
    if (s == "random") return Strategy::Random;
    throw Error(Errc::ConfigInvalid, "unknown strategy '" + s + "' (expected mwm or random)");
}

struct PlanSettings {
    std::size_t patch = kEncoderStride;
    Strategy strategy = Strategy::Mwm;
    double roi_ratio = 0.9;
    std::optional<double> bg_ratio;  // unset: solved from target_ratio
    double target_ratio = 0.4;       // overall ratio (also the random-plan ratio)
    double overlap = 0.5;
};

inline ojson plan_params(const PlanSettings& s) {
    ojson j;
    j["patch"] = s.patch;
    j["strategy"] = s.strategy == Strategy::Mwm ? "mwm" : "random";
    j["roi_ratio"] = s.roi_ratio;
    j["bg_ratio"] = s.bg_ratio ? ojson(*s.bg_ratio) : ojson(nullptr);
    j["target_ratio"] = s.target_ratio;
    j["overlap"] = s.overlap;
    return j;
}

inline void validate(const PlanSettings& s) {
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (s.patch == 0) throw Error(Errc::ConfigInvalid, "patch must be positive");
    if (!unit(s.roi_ratio) || !unit(s.target_ratio) || (s.bg_ratio && !unit(*s.bg_ratio))) {
        throw Error(Errc::ConfigInvalid, "ratios must be in [0, 1]");
    }
    if (!(s.overlap > 0.0 && s.overlap <= 1.0)) throw Error(Errc::ConfigInvalid, "overlap must be in (0, 1]");
}

/// Plan for one image; the per-image seed is derived from the master seed.
inline MaskPlan make_plan(const std::string& image_id, std::size_t height, std::size_t width,
                          std::span<const RoiBox> boxes, const PlanSettings& s, std::uint64_t master_seed) {
    const PatchGrid grid = PatchGrid::make(height, width, s.patch);
    const std::uint64_t seed = derive_seed(master_seed, image_id);
    MaskPlan plan;
    if (s.strategy == Strategy::Random) {
        plan = random_plan(grid, s.target_ratio, seed);
    } else {
        const RegionLabels labels = classify_patches(grid, boxes, s.overlap);
        const double bg = s.bg_ratio ? *s.bg_ratio : solve_bg_ratio(labels, s.roi_ratio, s.target_ratio);
        plan = sample_plan(grid, labels, s.roi_ratio, bg, seed);
    }
    plan.image_id = image_id;
    return plan;
}

struct PlanOptions {
    fs::path rois;
    fs::path image_dir;
    std::size_t height = 0;  // used when no image directory is given
    std::size_t width = 0;
    fs::path out;
    PlanSettings settings;
    std::uint64_t seed = 0;
};

/// Writes <out>/<image_id>.plan.json per image.
inline int run_plan(const PlanOptions& opt, std::ostream& log) {
    if (opt.out.empty()) throw Error(Errc::ConfigInvalid, "plan needs --out");
    validate(opt.settings);
    std::map<std::string, std::vector<RoiBox>> boxes;
    if (!opt.rois.empty()) boxes = group_by_image(read_rois_jsonl(opt.rois));
    if (opt.settings.strategy == Strategy::Mwm && opt.rois.empty()) {
        throw Error(Errc::ConfigInvalid, "mwm plans need --rois");
    }
    std::vector<std::string> ids;
    if (!opt.image_dir.empty()) {
        ids = list_ids(opt.image_dir, ".mwmg");
        for (const auto& id : list_ids(opt.image_dir, ".pgm")) ids.push_back(id);
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    } else {
        if (opt.height == 0 || opt.width == 0) throw Error(Errc::ConfigInvalid, "plan needs --images or --height/--width");
        for (const auto& [id, _] : boxes) ids.push_back(id);
    }
    const ojson params = plan_params(opt.settings);
    const std::string hash = config_hash(params);
    std::vector<std::optional<ItemError>> failures(ids.size());
    parallel_for(ids.size(), [&](std::size_t i) {
        try {
            std::size_t h = opt.height, w = opt.width;
            if (!opt.image_dir.empty()) {
                const ImageGray image = load_image(find_image(opt.image_dir, ids[i]));
                h = image.height();
                w = image.width();
            }
            const auto it = boxes.find(ids[i]);
            const std::span<const RoiBox> rois =
                it == boxes.end() ? std::span<const RoiBox>{} : std::span<const RoiBox>(it->second);
            for (const auto& b : rois) {
                if (!b.within(h, w)) throw Error(Errc::ShapeMismatch, "ROI outside image bounds");
            }
            const MaskPlan plan = make_plan(ids[i], h, w, rois, opt.settings, opt.seed);
            auto j = plan_to_json(plan);
            j["master_seed"] = opt.seed;
            j["config_hash"] = hash;
            j["overall_ratio"] = overall_ratio(plan);
            write_atomically(opt.out / (ids[i] + ".plan.json"), j.dump(2) + "\n");
        } catch (const Error& e) {
            failures[i] = ItemError{ids[i], e.code(), e.what()};
        }
    });
    std::vector<ItemError> errors;
    for (auto& f : failures) {
        if (f) errors.push_back(*f);
    }
    log << "plan: " << ids.size() - errors.size() << " plans written to " << opt.out.string() << "\n";
    if (!errors.empty()) {
        write_error_log(opt.out / "plan", errors);
        for (const auto& e : errors) log << "plan: " << e.image_id << ": " << e.message << "\n";
        return 1;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// pretrain-toy / sweep

struct TrainingItem {
    std::string image_id;
    ImageGray image;
    MaskPlan plan;
};

struct TrainingRun {
    ToyModel<float> model;
    std::vector<double> losses;  // loss before each step
};

/// Cycles through `items` in order, one SGD step per item.
inline TrainingRun train_toy(const ToyHyper& hyper, const std::vector<TrainingItem>& items, std::size_t steps) {
    if (items.empty()) throw Error(Errc::EmptyList, "no training items");
    TrainingRun run{ToyModel<float>(hyper), {}};
    run.losses.reserve(steps);
    for (std::size_t s = 0; s < steps; ++s) {
        const auto& item = items[s % items.size()];
        run.losses.push_back(train_step(run.model, item.image, item.plan));
    }
    return run;
}

/// Mean masked loss of `model` over `items`, forward only.
inline double evaluate_loss(const ToyModel<float>& model, const std::vector<TrainingItem>& items) {
    if (items.empty()) throw Error(Errc::EmptyList, "no evaluation items");
    double sum = 0.0;
    for (const auto& item : items) {
        sum += recon_loss(reconstruct(model, item.image, item.plan),
                          reconstruction_target(item.image, model.hyper()), item.plan);
    }
    return sum / static_cast<double>(items.size());
}

inline ojson hyper_params(const ToyHyper& h) {
    ojson j = hyper_to_json(h);
    j.erase("seed");
    return j;
}

struct PretrainOptions {
    fs::path image_dir;
    fs::path plan_dir;  // optional; random plans at `random_ratio` otherwise
    fs::path out;       // checkpoint
    fs::path loss_csv;  // optional
    std::size_t steps = 200;
    double random_ratio = 0.6;
    ToyHyper hyper;     // hyper.seed is the master seed
};

inline int run_pretrain(const PretrainOptions& opt, std::ostream& log) {
    if (opt.out.empty()) throw Error(Errc::ConfigInvalid, "pretrain-toy needs --out");
    const auto ids = list_ids(opt.image_dir, ".mwmg");
    if (ids.empty()) throw Error(Errc::ConfigInvalid, "no .mwmg images in " + opt.image_dir.string());
    ToyHyper hyper = opt.hyper;
    {
        const ImageGray first = load_image(opt.image_dir / (ids.front() + ".mwmg"));
        hyper.image_h = first.height();
        hyper.image_w = first.width();
    }
    try {
        ToyModel<float>::validate(hyper);
    } catch (const Error& e) {
        throw Error(Errc::ConfigInvalid, e.what());
    }
    std::vector<TrainingItem> items;
    std::vector<ItemError> errors;
    for (const auto& id : ids) {
        try {
            TrainingItem item{id, load_image(opt.image_dir / (id + ".mwmg")), {}};
            if (!opt.plan_dir.empty()) {
                item.plan = load_plan(opt.plan_dir / (id + ".plan.json"));
            } else {
                item.plan = random_plan(PatchGrid::make(item.image.height(), item.image.width(), hyper.patch),
                                        opt.random_ratio, derive_seed(hyper.seed, id));
            }
            require_plan_matches(item.image, item.plan);
            if (item.image.height() != hyper.image_h || item.image.width() != hyper.image_w) {
                throw Error(Errc::ShapeMismatch, "all training images must share one size");
            }
            if (item.plan.masked_count() == 0) throw Error(Errc::NoMaskedPatches, "plan masks no patches");
            items.push_back(std::move(item));
        } catch (const Error& e) {
            errors.push_back({id, e.code(), e.what()});
        }
    }
    if (!errors.empty()) {
        write_error_log(opt.out, errors);
        for (const auto& e : errors) log << "pretrain-toy: " << e.image_id << ": " << e.message << "\n";
        return 1;
    }

    ojson params = hyper_params(hyper);
    params["steps"] = opt.steps;
    params["plans"] = opt.plan_dir.empty() ? ojson("random") : ojson("files");
    params["random_ratio"] = opt.random_ratio;
    const TrainingRun run = train_toy(hyper, items, opt.steps);

    stage_bytes(opt.out, encode_checkpoint(run.model, provenance("pretrain-toy", hyper.seed, params)));
    if (!opt.loss_csv.empty()) {
        std::string csv = csv_provenance("pretrain-toy", hyper.seed, params) + "step,loss\n";
        char buf[64];
        for (std::size_t s = 0; s < run.losses.size(); ++s) {
            std::snprintf(buf, sizeof buf, "%zu,%.9g\n", s, run.losses[s]);
            csv += buf;
        }
        write_atomically(opt.loss_csv, csv);
    }
    commit(opt.out);
    if (!run.losses.empty()) {
        log << "pretrain-toy: loss " << run.losses.front() << " -> " << run.losses.back() << " over " << opt.steps
            << " steps\n";
    }
    return 0;
}

struct SweepOptions {
    fs::path saliency_dir;
    fs::path image_dir;
    fs::path out;
    std::vector<double> ratios{0.4, 0.5, 0.6, 0.7};
    PlanSettings plan;  // target_ratio is overwritten per sweep point
    LocalizeConfig localize;
    std::size_t steps = 200;
    std::size_t max_images = 4;
    ToyHyper hyper;  // hyper.seed is the master seed
};

struct SweepPoint {
    double ratio = 0.0;
    double realized_ratio = 0.0;  // mean overall masked fraction of the plans
    double final_loss = 0.0;
};

/// Trains one toy model per target ratio on the first `max_images` images and
/// reports the post-training masked loss.
inline std::vector<SweepPoint> sweep(const SweepOptions& opt) {
    validate(opt.plan);
    for (double r : opt.ratios) {
        if (!(r > 0.0 && r <= 1.0)) throw Error(Errc::ConfigInvalid, "sweep ratios must be in (0, 1]");
    }
    std::vector<std::string> ids = list_ids(opt.image_dir, ".mwmg");
    if (ids.size() > opt.max_images) ids.resize(opt.max_images);
    if (ids.empty()) throw Error(Errc::ConfigInvalid, "no .mwmg images in " + opt.image_dir.string());

    std::map<std::string, std::vector<RoiBox>> boxes;
    if (opt.plan.strategy == Strategy::Mwm) {
        auto outcome = localize_corpus(opt.saliency_dir, opt.image_dir, opt.localize);
        if (!outcome.errors.empty()) throw Error(outcome.errors.front().code, outcome.errors.front().message);
        boxes = group_by_image(outcome.rois);
    }
    std::vector<ImageGray> images;
    for (const auto& id : ids) images.push_back(load_image(opt.image_dir / (id + ".mwmg")));
    ToyHyper hyper = opt.hyper;
    hyper.image_h = images.front().height();
    hyper.image_w = images.front().width();
    try {
        ToyModel<float>::validate(hyper);
    } catch (const Error& e) {
        throw Error(Errc::ConfigInvalid, e.what());
    }

    std::vector<SweepPoint> points(opt.ratios.size());
    parallel_for(opt.ratios.size(), [&](std::size_t k) {
        PlanSettings settings = opt.plan;
        settings.target_ratio = opt.ratios[k];
        std::vector<TrainingItem> items;
        double realized = 0.0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const auto it = boxes.find(ids[i]);
            const std::span<const RoiBox> rois =
                it == boxes.end() ? std::span<const RoiBox>{} : std::span<const RoiBox>(it->second);
            MaskPlan plan = make_plan(ids[i], images[i].height(), images[i].width(), rois, settings, opt.hyper.seed);
            realized += overall_ratio(plan);
            items.push_back({ids[i], images[i], std::move(plan)});
        }
        const TrainingRun run = train_toy(hyper, items, opt.steps);
        points[k] = {opt.ratios[k], realized / static_cast<double>(ids.size()), evaluate_loss(run.model, items)};
    });
    return points;
}

/// CSV `ratio,final_loss`, one row per requested ratio.
inline int run_sweep(const SweepOptions& opt, std::ostream& log) {
    if (opt.out.empty()) throw Error(Errc::ConfigInvalid, "sweep needs --out");
    const auto points = sweep(opt);
    ojson params = hyper_params(opt.hyper);
    params["ratios"] = opt.ratios;
    params["plan"] = plan_params(opt.plan);
    params["localize"] = localize_params(opt.localize);
    params["steps"] = opt.steps;
    params["max_images"] = opt.max_images;
    std::string csv = csv_provenance("sweep", opt.hyper.seed, params) + "ratio,final_loss\n";
    char buf[96];
    for (const auto& p : points) {
        std::snprintf(buf, sizeof buf, "%.6g,%.9g\n", p.ratio, p.final_loss);
        csv += buf;
        log << "sweep: ratio " << p.ratio << " (realized " << p.realized_ratio << ") final loss " << p.final_loss
            << "\n";
    }
    write_atomically(opt.out, csv);
    return 0;
}

// ---------------------------------------------------------------------------
// eval-occlusion

struct EvalOptions {
    fs::path rois;
    fs::path mask_dir;
    fs::path out;
    std::uint64_t seed = 0;
};

struct EvalRow {
    std::string image_id;
    OcclusionScore score;
};

/// Scores the union of each image's boxes against its ground-truth mask.
inline std::pair<std::vector<EvalRow>, std::vector<ItemError>> evaluate_occlusion(const fs::path& rois,
                                                                                  const fs::path& mask_dir) {
    const auto boxes = group_by_image(read_rois_jsonl(rois));
    const auto ids = list_ids(mask_dir, ".pgm");
    std::vector<std::optional<EvalRow>> rows(ids.size());
    std::vector<std::optional<ItemError>> failures(ids.size());
    parallel_for(ids.size(), [&](std::size_t i) {
        try {
            const BinaryMask gt = load_mask_pgm(mask_dir / (ids[i] + ".pgm"));
            const auto it = boxes.find(ids[i]);
            if (it == boxes.end()) throw Error(Errc::EmptyPrediction, "no boxes for " + ids[i]);
            for (const auto& b : it->second) {
                if (!b.within(gt.height(), gt.width())) throw Error(Errc::ShapeMismatch, "box outside mask frame");
            }
            rows[i] = EvalRow{ids[i], occlusion_metrics(rasterize(it->second, gt.height(), gt.width()), gt)};
        } catch (const Error& e) {
            failures[i] = ItemError{ids[i], e.code(), e.what()};
        }
    });
    std::pair<std::vector<EvalRow>, std::vector<ItemError>> out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (rows[i]) out.first.push_back(*rows[i]);
        if (failures[i]) out.second.push_back(*failures[i]);
    }
    return out;
}

/// CSV `image_id,precision,recall,intersection,pred_area,gt_area` and a
/// final `mean` row carrying the unweighted means.
inline int run_eval(const EvalOptions& opt, std::ostream& log) {
    if (opt.out.empty()) throw Error(Errc::ConfigInvalid, "eval-occlusion needs --out");
    auto [rows, errors] = evaluate_occlusion(opt.rois, opt.mask_dir);
    std::string csv = csv_provenance("eval-occlusion", opt.seed, ojson::object()) +
                      "image_id,precision,recall,intersection,pred_area,gt_area\n";
    char buf[256];
    std::vector<OcclusionScore> scores;
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%zu,%zu,%zu\n", r.image_id.c_str(), r.score.precision,
                      r.score.recall, r.score.intersection, r.score.pred_area, r.score.gt_area);
        csv += buf;
        scores.push_back(r.score);
    }
    if (!scores.empty()) {
        const auto [p, r] = aggregate_scores(scores);
        std::snprintf(buf, sizeof buf, "mean,%.6f,%.6f,,,\n", p, r);
        csv += buf;
        log << "eval-occlusion: " << scores.size() << " images, mean precision " << p << ", mean recall " << r << "\n";
    }
    stage_text(opt.out, csv);
    return finish(opt.out, errors, log, "eval-occlusion");
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckCase {
    ToyModel<float> model;
    ImageGray image;
    MaskPlan plan;
};

/// Small randomized configuration: image 32 or 48 px, 2..6 channels per
/// stage, nonzero biases and mask embeddings, random plan with masking
/// ratio in [0.3, 0.7].
inline GradcheckCase make_gradcheck_case(std::uint64_t master_seed, std::size_t index, double slope = 0.1) {
    Rng rng(derive_seed(master_seed, "gradcheck-" + std::to_string(index)));
    ToyHyper h;
    h.image_h = 16 * (2 + rng.below(2));
    h.image_w = 16 * (2 + rng.below(2));
    for (auto& c : h.channels) c = 2 + rng.below(5);
    h.slope = slope;
    h.seed = rng.next();
    GradcheckCase gc{ToyModel<float>(h), {}, {}};
    for (auto& p : gc.model.params()) {
        if (p.shape.size() == 4) continue;
        for (auto& v : p.values) v = static_cast<float>(rng.uniform(-0.2, 0.2));
    }
    SynthConfig sc;
    sc.height = h.image_h;
    sc.width = h.image_w;
    sc.sigma_min = 3.0;
    sc.sigma_max = 4.0;
    sc.max_blobs = 1;
    sc.seed = rng.next();
    gc.image = make_synth_item(sc, index).image;
    const PatchGrid grid = PatchGrid::make(h.image_h, h.image_w, h.patch);
    gc.plan = random_plan(grid, rng.uniform(0.3, 0.7), rng.next());
    return gc;
}

struct GradcheckOptions {
    std::size_t configs = 20;
    double epsilon = 1e-4;
    double threshold = 1e-3;
    std::size_t samples = 64;
    std::uint64_t seed = 0;
    fs::path out;  // optional CSV
};

inline std::vector<double> gradcheck_errors(const GradcheckOptions& opt) {
    if (!(opt.epsilon >= 1e-6 && opt.epsilon <= 1e-2)) throw Error(Errc::ConfigInvalid, "epsilon must be in [1e-6, 1e-2]");
    std::vector<double> errors(opt.configs);
    parallel_for(opt.configs, [&](std::size_t i) {
        const auto gc = make_gradcheck_case(opt.seed, i);
        errors[i] = grad_check(gc.model, gc.image, gc.plan, opt.epsilon, opt.samples, derive_seed(opt.seed, "fd") + i);
    });
    return errors;
}

inline int run_gradcheck(const GradcheckOptions& opt, std::ostream& log) {
    const auto errors = gradcheck_errors(opt);
    double worst = 0.0;
    std::string csv;
    if (!opt.out.empty()) {
        csv = csv_provenance("gradcheck", opt.seed,
                             ojson{{"configs", opt.configs}, {"epsilon", opt.epsilon}, {"samples", opt.samples}}) +
              "config,max_rel_error\n";
    }
    char buf[64];
    for (std::size_t i = 0; i < errors.size(); ++i) {
        worst = std::max(worst, errors[i]);
        std::snprintf(buf, sizeof buf, "%zu,%.6e\n", i, errors[i]);
        csv += opt.out.empty() ? "" : buf;
        log << "gradcheck: config " << i << " max relative error " << errors[i] << "\n";
    }
    if (!opt.out.empty()) write_atomically(opt.out, csv);
    const bool ok = worst < opt.threshold;
    log << "gradcheck: worst " << worst << (ok ? " < " : " >= ") << opt.threshold << (ok ? " PASS" : " FAIL") << "\n";
    return ok ? 0 : 1;
}

}  // namespace mwm::app
