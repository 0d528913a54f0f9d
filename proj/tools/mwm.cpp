// mwm: command-line front end for the localization / masking / toy MIM toolkit.

#include <cstdlib>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mwm/app.hpp"
#include "mwm/prompt.hpp"

namespace {

namespace fs = std::filesystem;
using namespace mwm;

// Accepts JSON (a top-level object) or TOML/INI. Keys may use '_' or '-'.
// Top-level keys belong to the subcommand being run. A seed in the file
// yields to MWM_SEED, so precedence is command line > environment > file.
class JsonOrTomlConfig : public CLI::ConfigBase {
public:
    std::string subcommand;

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        std::string text((std::istreambuf_iterator<char>(input)), std::istreambuf_iterator<char>());
        const auto first = text.find_first_not_of(" \t\r\n");
        std::vector<CLI::ConfigItem> items;
        if (first == std::string::npos || text[first] != '{') {
            std::istringstream again(text);
            items = CLI::ConfigBase::from_config(again);
            for (auto& item : items) normalize(item.name);
        } else {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(text);
            } catch (const nlohmann::json::exception& e) {
                throw CLI::ConversionError(std::string("config: ") + e.what());
            }
            flatten(items, j, "", {});
        }
        const bool env_seed = std::getenv("MWM_SEED") != nullptr;
        std::vector<CLI::ConfigItem> scoped;
        for (auto& item : items) {
            if (item.parents.empty() && !subcommand.empty()) item.parents.push_back(subcommand);
            if (item.parents.size() == 1 && item.parents[0] == subcommand && item.name == "seed" && env_seed) continue;
            scoped.push_back(std::move(item));
        }
        return scoped;
    }

private:
    static void normalize(std::string& name) {
        for (auto& ch : name) ch = ch == '_' ? '-' : ch;
    }

    static std::string scalar(const nlohmann::json& v) {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
        if (v.is_number()) return v.dump();
        throw CLI::ConversionError("unsupported config value " + v.dump());
    }

    static void flatten(std::vector<CLI::ConfigItem>& out, const nlohmann::json& j, std::string name,
                        std::vector<std::string> parents) {
        if (j.is_object()) {
            if (!name.empty()) parents.push_back(name);
            for (auto it = j.begin(); it != j.end(); ++it) flatten(out, *it, it.key(), parents);
            return;
        }
        CLI::ConfigItem item;
        item.parents = std::move(parents);
        normalize(name);
        item.name = name;
        if (j.is_array()) {
            for (const auto& v : j) item.inputs.push_back(scalar(v));
        } else {
            item.inputs.push_back(scalar(j));
        }
        out.push_back(std::move(item));
    }
};

void add_seed(CLI::App* sub, std::uint64_t& seed) {
    sub->add_option("--seed", seed, "Master seed")->envname("MWM_SEED")->capture_default_str();
}

void add_data_dirs(CLI::App* sub, fs::path& data, fs::path& saliency, fs::path& images) {
    sub->add_option("--data", data, "Corpus root containing saliency/ and images/ (as written by synth)");
    sub->add_option("--saliency", saliency, "Directory of saliency maps (<id>.mwmg)");
    sub->add_option("--images", images, "Directory of images (<id>.mwmg or <id>.pgm)");
}

void resolve_dirs(const fs::path& data, fs::path& saliency, fs::path& images) {
    if (!data.empty()) {
        if (saliency.empty()) saliency = data / "saliency";
        if (images.empty()) images = data / "images";
    }
    if (saliency.empty() || images.empty()) {
        throw Error(Errc::ConfigInvalid, "give --data or both --saliency and --images");
    }
}

struct LocalizeFlags {
    std::string policy = "relative";
    double alpha = 0.5;
    std::size_t k = 1;
};

void add_localize_flags(CLI::App* sub, LocalizeConfig& cfg, LocalizeFlags& flags) {
    sub->add_option("--connectivity", cfg.connectivity, "Pixel connectivity (4 or 8)")->capture_default_str();
    sub->add_option("--policy", flags.policy, "Component selection: relative or topk")->capture_default_str();
    sub->add_option("--alpha", flags.alpha, "Relative-area cutoff for the relative policy")->capture_default_str();
    sub->add_option("--k", flags.k, "Components kept by the topk policy")->capture_default_str();
    sub->add_option("--margin", cfg.margin, "Box expansion per side, as a fraction of side length")
        ->capture_default_str();
    sub->add_option("--provider", cfg.provider_command,
                    "Refinement command run as: <cmd> <image.mwmg> <boxes.jsonl> <out.pgm> (default: identity)");
    sub->add_option("--max-iters", cfg.max_iters, "K-means iteration cap")->capture_default_str();
    sub->add_option("--tol", cfg.tol, "K-means center-movement tolerance")->capture_default_str();
}

void apply_localize_flags(LocalizeConfig& cfg, const LocalizeFlags& flags) {
    if (flags.policy == "relative") {
        cfg.policy = RelativeArea{flags.alpha};
    } else if (flags.policy == "topk") {
        cfg.policy = TopK{flags.k};
    } else {
        throw Error(Errc::ConfigInvalid, "unknown --policy '" + flags.policy + "'");
    }
    if (cfg.provider_command == "identity") cfg.provider_command.clear();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Text-guided region localization, region-aware mask planning and toy masked image modeling"};
    auto config = std::make_shared<JsonOrTomlConfig>();
    app.config_formatter(config);
    app.set_config("--config", "", "JSON or TOML file with option values for the subcommand (keys = long option names)");
    app.require_subcommand(1);
    app.allow_config_extras(CLI::config_extras_mode::error);
    app.fallthrough();  // lets --config follow the subcommand name

    // synth
    app::SynthOptions synth;
    std::size_t synth_size = 0;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic blob corpus");
    synth_cmd->add_option("--out", synth.out, "Output directory")->required();
    synth_cmd->add_option("--n", synth.cfg.count, "Number of items")->capture_default_str();
    synth_cmd->add_option("--size", synth_size, "Square image size (overrides --height/--width)");
    synth_cmd->add_option("--height", synth.cfg.height)->capture_default_str();
    synth_cmd->add_option("--width", synth.cfg.width)->capture_default_str();
    synth_cmd->add_option("--blobs", synth.cfg.max_blobs, "Maximum blobs per image")->capture_default_str();
    synth_cmd->add_option("--saliency-noise", synth.cfg.saliency_noise)->capture_default_str();
    add_seed(synth_cmd, synth.cfg.seed);

    // localize
    app::LocalizeOptions loc;
    LocalizeFlags loc_flags;
    fs::path loc_data;
    auto* loc_cmd = app.add_subcommand("localize", "Saliency maps -> ROI boxes (JSON Lines)");
    add_data_dirs(loc_cmd, loc_data, loc.saliency_dir, loc.image_dir);
    loc_cmd->add_option("--out", loc.out, "Output .jsonl")->required();
    add_localize_flags(loc_cmd, loc.cfg, loc_flags);
    add_seed(loc_cmd, loc.seed);

    // plan
    app::PlanOptions plan;
    std::string plan_strategy = "mwm";
    double plan_bg = -1.0;
    auto* plan_cmd = app.add_subcommand("plan", "ROI boxes -> per-image patch masking plans");
    plan_cmd->add_option("--rois", plan.rois, "ROI boxes (.jsonl)");
    plan_cmd->add_option("--images", plan.image_dir, "Image directory (gives ids and sizes)");
    plan_cmd->add_option("--height", plan.height, "Image height when no --images");
    plan_cmd->add_option("--width", plan.width, "Image width when no --images");
    plan_cmd->add_option("--out", plan.out, "Output directory")->required();
    plan_cmd->add_option("--patch", plan.settings.patch)->capture_default_str();
    plan_cmd->add_option("--strategy", plan_strategy, "mwm (region-aware) or random")->capture_default_str();
    plan_cmd->add_option("--roi-ratio", plan.settings.roi_ratio)->capture_default_str();
    plan_cmd->add_option("--bg-ratio", plan_bg, "Background ratio (default: solved from --target-ratio)");
    plan_cmd->add_option("--target-ratio", plan.settings.target_ratio, "Overall masking ratio")
        ->capture_default_str();
    plan_cmd->add_option("--overlap", plan.settings.overlap, "Patch/ROI overlap needed to label a patch ROI")
        ->capture_default_str();
    add_seed(plan_cmd, plan.seed);

    // pretrain-toy
    app::PretrainOptions pre;
    fs::path pre_data;
    std::vector<std::size_t> pre_channels;
    auto* pre_cmd = app.add_subcommand("pretrain-toy", "Train the toy sparse masked autoencoder");
    pre_cmd->add_option("--data", pre_data, "Corpus root (uses <data>/images)");
    pre_cmd->add_option("--images", pre.image_dir, "Image directory (<id>.mwmg)");
    pre_cmd->add_option("--plans", pre.plan_dir, "Plan directory (<id>.plan.json); random plans if absent");
    pre_cmd->add_option("--out", pre.out, "Checkpoint path (.mwmt)")->required();
    pre_cmd->add_option("--loss-csv", pre.loss_csv, "Write step,loss CSV here");
    pre_cmd->add_option("--steps", pre.steps)->capture_default_str();
    pre_cmd->add_option("--lr", pre.hyper.lr)->capture_default_str();
    pre_cmd->add_option("--random-ratio", pre.random_ratio, "Masking ratio of generated random plans")
        ->capture_default_str();
    pre_cmd->add_option("--channels", pre_channels, "Encoder channels for the 4 stages")->expected(4)->delimiter(',');
    pre_cmd->add_option("--slope", pre.hyper.slope, "Leaky activation slope")->capture_default_str();
    pre_cmd->add_flag("--normalize-targets", pre.hyper.normalize_targets, "Per-patch standardized targets");
    add_seed(pre_cmd, pre.hyper.seed);

    // eval-occlusion
    app::EvalOptions ev;
    fs::path ev_data;
    auto* ev_cmd = app.add_subcommand("eval-occlusion", "Occlusion precision/recall of ROI boxes vs masks");
    ev_cmd->add_option("--rois", ev.rois, "ROI boxes (.jsonl)")->required();
    ev_cmd->add_option("--data", ev_data, "Corpus root (uses <data>/masks)");
    ev_cmd->add_option("--masks", ev.mask_dir, "Ground-truth masks (<id>.pgm)");
    ev_cmd->add_option("--out", ev.out, "Report CSV")->required();
    add_seed(ev_cmd, ev.seed);

    // gradcheck
    app::GradcheckOptions gc;
    auto* gc_cmd = app.add_subcommand("gradcheck", "Reverse-mode vs finite-difference gradients");
    gc_cmd->add_option("--configs", gc.configs)->capture_default_str();
    gc_cmd->add_option("--epsilon", gc.epsilon)->capture_default_str();
    gc_cmd->add_option("--threshold", gc.threshold)->capture_default_str();
    gc_cmd->add_option("--samples", gc.samples, "Parameters probed per config")->capture_default_str();
    gc_cmd->add_option("--out", gc.out, "Optional CSV of per-config errors");
    add_seed(gc_cmd, gc.seed);

    // sweep
    app::SweepOptions sw;
    LocalizeFlags sw_flags;
    fs::path sw_data;
    std::string sw_strategy = "mwm";
    auto* sw_cmd = app.add_subcommand("sweep", "Final toy loss across overall masking ratios");
    add_data_dirs(sw_cmd, sw_data, sw.saliency_dir, sw.image_dir);
    sw_cmd->add_option("--ratios", sw.ratios, "Overall masking ratios")->delimiter(',')->capture_default_str();
    sw_cmd->add_option("--strategy", sw_strategy, "mwm or random")->capture_default_str();
    sw_cmd->add_option("--roi-ratio", sw.plan.roi_ratio)->capture_default_str();
    sw_cmd->add_option("--overlap", sw.plan.overlap)->capture_default_str();
    sw_cmd->add_option("--steps", sw.steps)->capture_default_str();
    sw_cmd->add_option("--max-images", sw.max_images)->capture_default_str();
    sw_cmd->add_option("--lr", sw.hyper.lr)->capture_default_str();
    sw_cmd->add_option("--out", sw.out, "Output CSV")->required();
    add_localize_flags(sw_cmd, sw.localize, sw_flags);
    add_seed(sw_cmd, sw.hyper.seed);

    // prompt
    PromptTemplate tmpl;
    std::string style = "sentence", category, modality;
    auto* prompt_cmd = app.add_subcommand("prompt", "Render a text prompt template");
    prompt_cmd->add_option("--category", category)->required();
    prompt_cmd->add_option("--modality", modality);
    prompt_cmd->add_option("--style", style, "sentence or phrase")->capture_default_str();
    prompt_cmd->add_option("--template", tmpl.text, "Template with [category] and [modality] slots");

    for (int i = 1; i < argc; ++i) {
        if (argv[i][0] != '-' && app.get_subcommand_no_throw(argv[i]) != nullptr) {
            config->subcommand = argv[i];
            break;
        }
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        std::ostream& log = std::cerr;
        if (*synth_cmd) {
            if (synth_size) synth.cfg.height = synth.cfg.width = synth_size;
            return app::run_synth(synth, log);
        }
        if (*loc_cmd) {
            resolve_dirs(loc_data, loc.saliency_dir, loc.image_dir);
            apply_localize_flags(loc.cfg, loc_flags);
            return app::run_localize(loc, log);
        }
        if (*plan_cmd) {
            plan.settings.strategy = app::parse_strategy(plan_strategy);
            if (plan_bg >= 0.0) plan.settings.bg_ratio = plan_bg;
            return app::run_plan(plan, log);
        }
        if (*pre_cmd) {
            if (pre.image_dir.empty()) pre.image_dir = pre_data / "images";
            if (pre.image_dir == "images") throw Error(Errc::ConfigInvalid, "give --data or --images");
            if (!pre_channels.empty()) std::copy(pre_channels.begin(), pre_channels.end(), pre.hyper.channels.begin());
            return app::run_pretrain(pre, log);
        }
        if (*ev_cmd) {
            if (ev.mask_dir.empty()) {
                if (ev_data.empty()) throw Error(Errc::ConfigInvalid, "give --data or --masks");
                ev.mask_dir = ev_data / "masks";
            }
            return app::run_eval(ev, log);
        }
        if (*gc_cmd) return app::run_gradcheck(gc, log);
        if (*sw_cmd) {
            resolve_dirs(sw_data, sw.saliency_dir, sw.image_dir);
            apply_localize_flags(sw.localize, sw_flags);
            sw.plan.strategy = app::parse_strategy(sw_strategy);
            return app::run_sweep(sw, log);
        }
        if (*prompt_cmd) {
            if (style == "phrase") {
                tmpl.style = PromptStyle::Phrase;
            } else if (style != "sentence") {
                throw Error(Errc::ConfigInvalid, "unknown --style '" + style + "'");
            }
            std::cout << render_prompt(tmpl, category, modality) << "\n";
            return 0;
        }
    } catch (const Error& e) {
        std::cerr << "mwm: " << e.what() << "\n";
        return e.code() == Errc::ConfigInvalid || e.code() == Errc::MissingSlot ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "mwm: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
