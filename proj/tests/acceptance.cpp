// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Oracles live in oracles.hpp and in this file.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "mwm/app.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mwm;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// 1. K-means assignment == threshold at the center midpoint.
Outcome kmeans_threshold() {
    const auto t0 = Clock::now();
    std::size_t mismatches = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        Rng rng(derive_seed(1, "kmeans-" + std::to_string(seed)));
        SaliencyMap m(64, 64);
        const int kind = static_cast<int>(seed % 3);
        for (auto& v : m.values()) {
            double x = rng.unit();
            if (kind == 1) x = std::pow(x, 3.0);
            if (kind == 2) x = rng.unit() < 0.2 ? 0.7 + 0.3 * x : 0.4 * x;
            v = static_cast<float>(x);
        }
        const auto km = kmeans_binarize(m);
        const double t = 0.5 * (km.centers[0] + km.centers[1]);
        for (std::size_t i = 0; i < m.size(); ++i) mismatches += km.assignment[i] != (m[i] >= t ? 1 : 0);
    }
    const double secs = seconds_since(t0);
    return {mismatches == 0 && secs < 10.0, fmt("1000 maps, %zu pixel mismatches, %.2f s (limit 10 s)", mismatches, secs)};
}

// 2. Connected components vs flood fill.
Outcome components_oracle() {
    std::size_t bad = 0, comps = 0;
    for (std::uint64_t seed = 0; seed < 500; ++seed) {
        Rng rng(derive_seed(2, "cc-" + std::to_string(seed)));
        const auto mask = oracle::random_mask(rng, 64, 64, rng.uniform(0.1, 0.75));
        for (int conn : {4, 8}) {
            const auto got = connected_components(mask, conn);
            const auto want = oracle::flood_fill(mask, conn);
            comps += want.components.size();
            if (got.components.size() != want.components.size()) {
                ++bad;
                continue;
            }
            std::multiset<std::array<std::size_t, 5>> a, b;
            for (const auto& c : got.components) {
                a.insert({c.area, std::size_t(c.row_min), std::size_t(c.col_min), std::size_t(c.row_max),
                          std::size_t(c.col_max)});
            }
            for (const auto& c : want.components) {
                b.insert({c.area, std::size_t(c.row_min), std::size_t(c.col_min), std::size_t(c.row_max),
                          std::size_t(c.col_max)});
            }
            bad += a != b;
        }
    }
    return {bad == 0, fmt("500 masks x {4,8}-connectivity, %zu components, %zu mismatching labelings", comps, bad)};
}

// 3. Occlusion precision/recall vs pixel-set counting, plus fixtures.
Outcome occlusion_oracle() {
    std::size_t bad = 0;
    for (std::uint64_t seed = 0; seed < 500; ++seed) {
        Rng rng(derive_seed(3, "occ-" + std::to_string(seed)));
        const std::size_t h = 8 + rng.below(57), w = 8 + rng.below(57);
        BinaryMask gt = oracle::random_mask(rng, h, w, rng.uniform(0.05, 0.6));
        if (count_foreground(gt) == 0) gt(0, 0) = 1;
        RoiBox box;
        box.row_min = static_cast<int>(rng.below(h));
        box.row_max = box.row_min + static_cast<int>(rng.below(h - box.row_min));
        box.col_min = static_cast<int>(rng.below(w));
        box.col_max = box.col_min + static_cast<int>(rng.below(w - box.col_min));

        std::set<std::pair<int, int>> pred_set, gt_set;
        for (int r = box.row_min; r <= box.row_max; ++r)
            for (int c = box.col_min; c <= box.col_max; ++c) pred_set.insert({r, c});
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c)
                if (gt(r, c)) gt_set.insert({int(r), int(c)});
        std::size_t inter = 0;
        for (const auto& p : pred_set) inter += gt_set.count(p);
        const double p = double(inter) / double(pred_set.size());
        const double rcl = double(inter) / double(gt_set.size());
        const auto s = occlusion_metrics(box, gt);
        bad += s.precision != p || s.recall != rcl;
    }
    BinaryMask m(8, 8);
    m(2, 2) = m(2, 3) = m(3, 2) = m(3, 3) = 1;
    BinaryMask other(8, 8);
    other(7, 7) = 1;
    const auto same = occlusion_metrics(m, m);
    const auto disjoint = occlusion_metrics(other, m);
    const auto contain = occlusion_metrics(RoiBox{1, 1, 4, 4, 0, 0.0}, m);
    const bool fixtures = same.precision == 1.0 && same.recall == 1.0 && disjoint.precision == 0.0 &&
                          disjoint.recall == 0.0 && contain.precision == 0.25 && contain.recall == 1.0;
    return {bad == 0 && fixtures, fmt("500 pairs, %zu mismatches; fixtures (1,1) (0,0) (0.25,1.0) %s", bad,
                                      fixtures ? "ok" : "WRONG")};
}

// 4. Per-region masked counts equal rounded targets; reproducible per seed.
Outcome plan_exactness() {
    std::size_t bad = 0, nonrepro = 0;
    Rng meta(derive_seed(4, "plans"));
    auto rounded = [](double ratio, std::size_t n) { return static_cast<std::size_t>(std::floor(ratio * n + 0.5)); };
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t rows = 1 + meta.below(20), cols = 1 + meta.below(20), patch = 4 + meta.below(13);
        const auto grid = PatchGrid::make(rows * patch - meta.below(patch), cols * patch - meta.below(patch), patch);
        RegionLabels labels(grid.rows, grid.cols, 0);
        const double roi_density = meta.unit();
        for (auto& l : labels.values()) l = meta.unit() < roi_density;
        const double rr = meta.unit(), br = meta.unit();
        const std::uint64_t seed = meta.next();
        const auto plan = sample_plan(grid, labels, rr, br, seed);
        std::size_t n_roi = 0, m_roi = 0, m_bg = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            n_roi += labels[i];
            (labels[i] ? m_roi : m_bg) += plan.visible[i] == 0;
        }
        std::size_t want_roi = rounded(rr, n_roi);
        if (rr > 0 && n_roi > 0 && want_roi == 0) want_roi = 1;
        bad += m_roi != want_roi || m_bg != rounded(br, labels.size() - n_roi);
        const auto again = sample_plan(grid, labels, rr, br, seed);
        nonrepro += !(again == plan) || nlohmann::json(plan_to_json(again)).dump() != nlohmann::json(plan_to_json(plan)).dump();
    }
    return {bad == 0 && nonrepro == 0,
            fmt("1000 random cases, %zu count mismatches, %zu non-reproducible plans", bad, nonrepro)};
}

// 5. Densify and masked-loss semantics.
Outcome densify_and_loss() {
    ToyHyper hp;
    hp.image_h = 48;
    hp.image_w = 64;
    hp.channels = {4, 6, 8, 10};
    hp.seed = 5;
    ToyModel<float> model(hp);
    Rng rng(derive_seed(5, "semantics"));
    for (auto& p : model.params())
        if (p.shape.size() == 1)
            for (auto& v : p.values) v = static_cast<float>(rng.uniform(-0.3, 0.3));
    ImageGray img(48, 64);
    for (auto& v : img.values()) v = static_cast<float>(rng.unit());
    const auto grid = PatchGrid::make(48, 64, 16);
    std::vector<std::string> failures;

    // densify is the identity when nothing is masked
    const auto visible = random_plan(grid, 0.0, 1);
    const auto pyr = sparse_encode(apply_mask(img, visible), visible, model);
    for (std::size_t l = 0; l < kStages; ++l) {
        const auto& emb = model.param("mask_emb" + std::to_string(l + 1)).values;
        if (!(densify<float>(pyr.levels[l], pyr.visibility[l], emb) == pyr.levels[l])) failures.push_back("identity");
    }
    auto graph = build_forward(model, img, visible, false);
    for (std::size_t l = 0; l < kStages; ++l) {
        if (!(graph.tape.value(graph.densified[l]) == graph.tape.value(graph.features[l]))) {
            failures.push_back("pipeline identity");
        }
    }

    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto plan = random_plan(grid, 0.3 + 0.02 * s, s);
        const auto vis = pixel_visibility(plan);
        const auto rec = reconstruct(model, img, plan);
        const double base = recon_loss(rec, img, plan);

        auto rec_visible = rec;  // perturb the reconstruction on visible pixels
        for (std::size_t i = 0; i < vis.size(); ++i)
            if (vis[i]) rec_visible[i] += static_cast<float>(rng.normal());
        if (recon_loss(rec_visible, img, plan) != base) failures.push_back("visible perturbation");

        auto hidden = img;  // change masked content of the encoder input
        for (std::size_t i = 0; i < vis.size(); ++i)
            if (!vis[i]) hidden[i] = static_cast<float>(rng.unit());
        const auto g0 = compute_gradients(model, img, img, plan);
        const auto g1 = compute_gradients(model, hidden, img, plan);
        if (g0.loss != g1.loss || g0.params != g1.params || g0.loss != base) failures.push_back("hidden input");

        auto exact = img;  // loss is zero iff masked pixels match
        for (std::size_t i = 0; i < vis.size(); ++i)
            if (vis[i]) exact[i] = rec[i];
        if (recon_loss(img, exact, plan) != 0.0) failures.push_back("zero at match");
        std::size_t first_masked = 0;
        while (vis[first_masked]) ++first_masked;
        auto near = img;
        near[first_masked] += 1e-3f;
        if (!(recon_loss(near, img, plan) > 0.0)) failures.push_back("positive off match");
    }
    std::string detail = "densify identity, visible/hidden invariance, zero iff match over 20 plans";
    if (!failures.empty()) detail += "; failed: " + failures.front() + fmt(" (+%zu more)", failures.size() - 1);
    return {failures.empty(), detail};
}

// 6. Reverse mode vs central differences.
Outcome gradient_check() {
    const auto t0 = Clock::now();
    app::GradcheckOptions opt;  // 20 configs, epsilon 1e-4, 64 samples
    const auto errors = app::gradcheck_errors(opt);
    const double secs = seconds_since(t0);
    const double worst = *std::max_element(errors.begin(), errors.end());
    return {errors.size() == 20 && worst < 1e-3 && secs < 60.0,
            fmt("20 configs, eps 1e-4, worst rel err %.3e (limit 1e-3), %.1f s (limit 60 s)", worst, secs)};
}

// 7. Toy convergence and determinism.
Outcome convergence() {
    SynthConfig sc;
    sc.seed = 1;
    const auto item = make_synth_item(sc, 0);
    const std::vector<RoiBox> rois = [&] {
        IdentityProvider id;
        LocalizeConfig cfg;
        cfg.margin = 0.2;
        return localize(item.saliency, item.image, cfg, id);
    }();
    app::PlanSettings settings;
    const auto plan = app::make_plan(item.image_id, 64, 64, rois, settings, 5);
    ToyHyper hp;
    hp.seed = 5;
    auto run = [&] { return app::train_toy(hp, {{item.image_id, item.image, plan}}, 200); };
    const auto a = run();
    const auto b = run();
    const double first = a.losses.front();
    const double last = forward_loss(a.model, item.image, plan);
    const bool deterministic = a.model == b.model && a.losses == b.losses;
    return {last < 0.5 * first && deterministic,
            fmt("200 steps: %.5f -> %.5f (ratio %.3f, limit 0.5), reruns %s", first, last, last / first,
                deterministic ? "identical" : "DIFFER")};
}

// 8. Ratio sweep scaffold.
Outcome ratio_sweep() {
    testutil::TempDir dir;
    std::ostringstream log;
    app::SynthOptions so{dir / "corpus", {}};
    so.cfg.count = 4;
    so.cfg.seed = 8;
    app::run_synth(so, log);

    app::SweepOptions sw;
    sw.saliency_dir = dir / "corpus/saliency";
    sw.image_dir = dir / "corpus/images";
    sw.out = dir / "sweep.csv";
    sw.localize.margin = 0.2;
    sw.hyper.seed = 8;
    app::run_sweep(sw, log);
    std::ifstream in(sw.out);
    std::string line;
    std::vector<std::string> rows;
    while (std::getline(in, line))
        if (!line.empty() && line[0] != '#') rows.push_back(line);
    const bool four_rows = rows.size() == 5 && rows[0] == "ratio,final_loss";

    // Differentiated plan at 0.4 and random plan at 0.7 on the same image.
    const auto id = app::list_ids(sw.image_dir, ".mwmg").front();
    const auto sal = load_grid(sw.saliency_dir / (id + ".mwmg"));
    const auto img = load_grid(sw.image_dir / (id + ".mwmg"));
    IdentityProvider provider;
    const auto rois = localize(sal, img, sw.localize, provider);
    app::PlanSettings mwm_s;
    mwm_s.target_ratio = 0.4;
    app::PlanSettings rnd_s;
    rnd_s.strategy = app::Strategy::Random;
    rnd_s.target_ratio = 0.7;
    const auto pm = app::make_plan(id, img.height(), img.width(), rois, mwm_s, 8);
    const auto pr = app::make_plan(id, img.height(), img.width(), {}, rnd_s, 8);
    std::size_t n_roi = 0, m_roi = 0, m_bg = 0;
    for (std::size_t i = 0; i < pm.region.size(); ++i) {
        n_roi += pm.region[i];
        (pm.region[i] ? m_roi : m_bg) += pm.visible[i] == 0;
    }
    const std::size_t n = pm.visible.size();
    const bool mwm_ok = n_roi > 0 && n_roi < n && std::abs(overall_ratio(pm) - 0.4) <= 0.5 / n + 1e-12 &&
                        double(m_roi) / n_roi > double(m_bg) / (n - n_roi);
    const bool rnd_ok = pr.masked_count() == static_cast<std::size_t>(std::lround(0.7 * n));
    return {four_rows && mwm_ok && rnd_ok,
            fmt("%zu curve rows; region-aware 0.4 plan: ROI %zu/%zu, BG %zu/%zu masked (overall %.3f); random 0.7 "
                "plan: %zu/%zu masked",
                rows.empty() ? 0 : rows.size() - 1, m_roi, n_roi, m_bg, n - n_roi, overall_ratio(pm),
                pr.masked_count(), n)};
}

// 9. Synthetic end-to-end localization recall.
Outcome synthetic_recall() {
    SynthConfig sc;
    sc.count = 50;
    sc.seed = 9;
    LocalizeConfig cfg;
    cfg.margin = 0.2;
    std::vector<OcclusionScore> scores;
    for (std::size_t i = 0; i < sc.count; ++i) {
        const auto item = make_synth_item(sc, i);
        IdentityProvider id;
        const auto rois = localize(item.saliency, item.image, cfg, id);
        scores.push_back(occlusion_metrics(rasterize(rois, item.image.height(), item.image.width()), item.ground_truth));
    }
    const auto [precision, recall] = aggregate_scores(scores);
    return {recall >= 0.95, fmt("50 images, margin 0.2: mean recall %.4f (limit >= 0.95), mean precision %.4f",
                                recall, precision)};
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"kmeans-threshold-equivalence", kmeans_threshold},
        {"connected-components-oracle", components_oracle},
        {"occlusion-metrics-oracle", occlusion_oracle},
        {"mask-plan-exactness", plan_exactness},
        {"densify-and-masked-loss-semantics", densify_and_loss},
        {"gradient-check", gradient_check},
        {"toy-convergence", convergence},
        {"ratio-sweep-scaffold", ratio_sweep},
        {"synthetic-end-to-end-recall", synthetic_recall},
    };
    int failed = 0;
    for (const auto& [name, fn] : criteria) {
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
        failed += !o.pass;
    }
    std::cout << (failed ? "FAILED " : "ALL PASSED ") << criteria.size() - failed << "/" << criteria.size() << std::endl;
    return failed ? 1 : 0;
}
