#include <cmath>
#include <cstring>

#include "mwm/mask_planner.hpp"
#include "mwm/synth.hpp"
#include "mwm/toy_mim.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mwm;

namespace {

ToyHyper small_hyper(std::size_t h = 32, std::size_t w = 48, double slope = 0.1) {
    ToyHyper hp;
    hp.image_h = h;
    hp.image_w = w;
    hp.channels = {3, 4, 5, 6};
    hp.slope = slope;
    hp.seed = 21;
    return hp;
}

template <typename T>
void randomize_small_params(ToyModel<T>& model, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& p : model.params()) {
        if (p.shape.size() == 4) continue;
        for (auto& v : p.values) v = static_cast<T>(rng.uniform(-0.3, 0.3));
    }
}

ImageGray random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
    Rng rng(seed);
    ImageGray img(h, w);
    for (auto& v : img.values()) v = static_cast<float>(rng.unit());
    return img;
}

MaskPlan plan_from_bits(std::size_t h, std::size_t w, std::size_t patch, std::vector<std::uint8_t> visible) {
    const auto g = PatchGrid::make(h, w, patch);
    MaskPlan p;
    p.grid = g;
    p.region = RegionLabels(g.rows, g.cols, 0);
    p.visible = Grid<std::uint8_t>(g.rows, g.cols, std::move(visible));
    return p;
}

MaskPlan all_visible(std::size_t h, std::size_t w, std::size_t patch = 16) {
    const auto g = PatchGrid::make(h, w, patch);
    return plan_from_bits(h, w, patch, std::vector<std::uint8_t>(g.count(), 1));
}

MaskPlan all_masked(std::size_t h, std::size_t w, std::size_t patch = 16) {
    const auto g = PatchGrid::make(h, w, patch);
    return plan_from_bits(h, w, patch, std::vector<std::uint8_t>(g.count(), 0));
}

// Dense reference forward pass built from the naive convolution oracle.
struct DenseForward {
    std::array<std::vector<double>, kStages> features;
    std::vector<double> reconstruction;
};

DenseForward dense_reference(const ToyModel<double>& m, const ImageGray& img) {
    const auto& hp = m.hyper();
    auto leaky = [&](std::vector<double> v) {
        for (auto& x : v) x = x < 0 ? hp.slope * x : x;
        return v;
    };
    auto P = [&](const std::string& n) { return m.param(n).values; };
    DenseForward out;
    std::vector<double> x(img.values().begin(), img.values().end());
    std::size_t c = 1, h = img.height(), w = img.width();
    std::array<std::size_t, kStages> hs{}, ws{};
    for (std::size_t l = 0; l < kStages; ++l) {
        const std::string s = "enc" + std::to_string(l + 1);
        std::size_t oh, ow;
        x = leaky(oracle::conv(x, c, h, w, P(s + ".weight"), P(s + ".bias"), hp.channels[l], 3, 2, 1, oh, ow));
        c = hp.channels[l], h = oh, w = ow;
        hs[l] = h, ws[l] = w;
        out.features[l] = x;
    }
    auto project = [&](std::size_t l) {
        const std::string s = "proj" + std::to_string(l + 1);
        std::size_t oh, ow;
        return oracle::conv(out.features[l], hp.channels[l], hs[l], ws[l], P(s + ".weight"), P(s + ".bias"),
                            hp.channels[l], 1, 1, 0, oh, ow);
    };
    auto upsample = [](const std::vector<double>& v, std::size_t ch, std::size_t hh, std::size_t ww) {
        std::vector<double> u(ch * hh * ww * 4);
        for (std::size_t k = 0; k < ch; ++k)
            for (std::size_t r = 0; r < 2 * hh; ++r)
                for (std::size_t q = 0; q < 2 * ww; ++q) u[(k * 2 * hh + r) * 2 * ww + q] = v[(k * hh + r / 2) * ww + q / 2];
        return u;
    };
    std::vector<double> d = project(kStages - 1);
    for (std::size_t l = kStages - 1; l >= 1; --l) {
        const std::string s = "up" + std::to_string(l);
        std::size_t oh, ow;
        auto u = leaky(oracle::conv(upsample(d, hp.channels[l], hs[l], ws[l]), hp.channels[l], 2 * hs[l], 2 * ws[l],
                                    P(s + ".weight"), P(s + ".bias"), hp.channels[l - 1], 3, 1, 1, oh, ow));
        const auto p = project(l - 1);
        for (std::size_t i = 0; i < u.size(); ++i) u[i] += p[i];
        d = u;
    }
    std::size_t oh, ow;
    out.reconstruction = oracle::conv(upsample(d, hp.channels[0], hs[0], ws[0]), hp.channels[0], 2 * hs[0], 2 * ws[0],
                                      P("readout.weight"), P("readout.bias"), 1, 3, 1, 1, oh, ow);
    return out;
}

}  // namespace

TEST(ApplyMask, Cases) {
    const auto img = random_image(32, 32, 1);
    EXPECT_EQ(apply_mask(img, all_visible(32, 32, 8)), img);
    EXPECT_EQ(apply_mask(img, all_masked(32, 32, 8)), ImageGray(32, 32, 0.0f));
    std::vector<std::uint8_t> bits(16, 1);
    bits[0] = 0;
    const auto out = apply_mask(img, plan_from_bits(32, 32, 8, bits));
    for (std::size_t r = 0; r < 32; ++r) {
        for (std::size_t c = 0; c < 32; ++c) {
            if (r < 8 && c < 8) {
                ASSERT_EQ(out(r, c), 0.0f);
            } else {
                ASSERT_EQ(out(r, c), img(r, c));
            }
        }
    }
    EXPECT_ERRC(apply_mask(ImageGray(30, 32), all_visible(32, 32, 8)), Errc::ShapeMismatch);
}

TEST(Hyper, PatchMustMatchEncoderStride) {
    ToyHyper hp = small_hyper();
    hp.patch = 8;
    EXPECT_ERRC(ToyModel<float>{hp}, Errc::ShapeMismatch);
    hp = small_hyper(40, 32);
    EXPECT_ERRC(ToyModel<float>{hp}, Errc::ShapeMismatch);
}

TEST(MaskPyramid, EachLevelDecimatesThePrevious) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto plan = random_plan(PatchGrid::make(64, 48, 16), 0.5, seed);
        const auto levels = visibility_pyramid(plan);
        EXPECT_EQ(levels[kStages], plan.visible);
        for (std::size_t l = 0; l < kStages; ++l) {
            ASSERT_EQ(levels[l + 1].height() * 2, levels[l].height());
            for (std::size_t r = 0; r < levels[l].height(); ++r)
                for (std::size_t c = 0; c < levels[l].width(); ++c)
                    ASSERT_EQ(levels[l](r, c), levels[l + 1](r / 2, c / 2));
        }
    }
}

TEST(SparseEncode, AllVisibleEqualsDenseConvolution) {
    ToyModel<double> m(small_hyper());
    randomize_small_params(m, 4);
    const auto img = random_image(32, 48, 2);
    const auto pyr = sparse_encode(img, all_visible(32, 48), m);
    const auto ref = dense_reference(m, img);
    for (std::size_t l = 0; l < kStages; ++l) {
        ASSERT_EQ(pyr.levels[l].size(), ref.features[l].size());
        for (std::size_t i = 0; i < ref.features[l].size(); ++i) ASSERT_NEAR(pyr.levels[l].data[i], ref.features[l][i], 1e-12);
    }
}

TEST(SparseEncode, AllMaskedGivesZeros) {
    ToyModel<float> m(small_hyper());
    randomize_small_params(m, 5);
    const auto pyr = sparse_encode(ImageGray(32, 48, 0.0f), all_masked(32, 48), m);
    for (const auto& level : pyr.levels)
        for (float v : level.data) ASSERT_EQ(v, 0.0f);
}

TEST(Pipeline, AllVisibleEqualsDenseAutoencoder) {
    ToyModel<double> m(small_hyper());
    randomize_small_params(m, 6);
    const auto img = random_image(32, 48, 3);
    const auto rec = reconstruct(m, img, all_visible(32, 48));
    const auto ref = dense_reference(m, img);
    for (std::size_t i = 0; i < rec.size(); ++i) ASSERT_NEAR(rec[i], ref.reconstruction[i], 1e-6);
}

TEST(Pipeline, HiddenContentDoesNotMatter) {
    ToyModel<float> m(small_hyper());
    randomize_small_params(m, 7);
    const auto plan = random_plan(PatchGrid::make(32, 48, 16), 0.5, 8);
    const auto a = random_image(32, 48, 9);
    auto b = a;
    const auto vis = pixel_visibility(plan);
    Rng rng(10);
    for (std::size_t i = 0; i < b.size(); ++i)
        if (!vis[i]) b[i] = static_cast<float>(rng.unit());
    ASSERT_NE(a, b);

    const auto pa = sparse_encode(apply_mask(a, plan), plan, m);
    const auto pb = sparse_encode(apply_mask(b, plan), plan, m);
    for (std::size_t l = 0; l < kStages; ++l) EXPECT_EQ(pa.levels[l], pb.levels[l]);

    EXPECT_EQ(reconstruct(m, a, plan), reconstruct(m, b, plan));
}

TEST(Densify, Branches) {
    Rng rng(11);
    ad::Tensor<float> f(3, 2, 2);
    for (auto& v : f.data) v = static_cast<float>(rng.normal());
    const std::vector<float> emb{0.5f, -1.0f, 2.0f};
    EXPECT_EQ(densify<float>(f, Grid<std::uint8_t>(2, 2, 1), emb), f);
    const auto all = densify<float>(f, Grid<std::uint8_t>(2, 2, 0), emb);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(all.data[c * 4 + i], emb[c]);
    Grid<std::uint8_t> one(2, 2, 1);
    one(1, 0) = 0;
    const std::vector<float> zero(3, 0.0f);
    const auto z = densify<float>(f, one, zero);
    for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_EQ(z.at(c, 1, 0), 0.0f);
        EXPECT_EQ(z.at(c, 0, 1), f.at(c, 0, 1));
    }
}

TEST(Decode, ZeroParametersGiveZero) {
    ToyModel<float> m(small_hyper());
    for (auto& p : m.params()) std::fill(p.values.begin(), p.values.end(), 0.0f);
    const auto pyr = sparse_encode(random_image(32, 48, 12), all_visible(32, 48), m);
    const auto rec = decode(pyr.levels, m);
    EXPECT_EQ(rec, GridF32(32, 48, 0.0f));
}

TEST(Decode, HomogeneousWhenLinear) {
    ToyModel<double> m(small_hyper(32, 48, 1.0));
    randomize_small_params(m, 13);
    for (auto& p : m.params()) {
        if (p.name.starts_with("up") || p.name.starts_with("proj") || p.name.starts_with("readout")) {
            if (p.shape.size() == 1) std::fill(p.values.begin(), p.values.end(), 0.0);
        }
    }
    const auto pyr = sparse_encode(random_image(32, 48, 14), all_visible(32, 48), m);
    const auto base = decode(pyr.levels, m);
    auto scaled = m;
    for (std::size_t l = 1; l <= kStages; ++l)
        for (auto& v : scaled.param("proj" + std::to_string(l) + ".weight").values) v *= 2.0;
    const auto doubled = decode(pyr.levels, scaled);
    for (std::size_t i = 0; i < base.size(); ++i) ASSERT_NEAR(doubled[i], 2.0f * base[i], 1e-5f * (1 + std::abs(base[i])));
}

TEST(ReconLoss, Cases) {
    // 4x4 image with 2x2 patches, only patch (0,0) masked.
    std::vector<std::uint8_t> bits(4, 1);
    bits[0] = 0;
    const auto plan = plan_from_bits(4, 4, 2, bits);
    const auto img = random_image(4, 4, 15);
    EXPECT_EQ(recon_loss(img, img, plan), 0.0);
    auto off = img;
    for (auto& v : off.values()) v += 0.5f;
    EXPECT_NEAR(recon_loss(off, img, plan), 0.25, 1e-7);

    auto visible_only = img;
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 4; ++c)
            if (r >= 2 || c >= 2) visible_only(r, c) += 3.0f;
    EXPECT_EQ(recon_loss(visible_only, img, plan), 0.0);
    auto one_pixel = img;
    one_pixel(1, 1) += 0.01f;
    EXPECT_GT(recon_loss(one_pixel, img, plan), 0.0);
    EXPECT_ERRC(recon_loss(img, img, all_visible(4, 4, 2)), Errc::NoMaskedPatches);
}

TEST(Gradients, VisiblePixelsGetExactlyZero) {
    ToyModel<float> m(small_hyper());
    randomize_small_params(m, 16);
    const auto plan = random_plan(PatchGrid::make(32, 48, 16), 0.5, 17);
    const auto g = compute_gradients(m, random_image(32, 48, 18), plan);
    const auto vis = pixel_visibility(plan);
    std::size_t nonzero_masked = 0;
    for (std::size_t i = 0; i < vis.size(); ++i) {
        if (vis[i]) {
            ASSERT_EQ(g.d_reconstruction[i], 0.0f);
        } else {
            nonzero_masked += g.d_reconstruction[i] != 0.0f;
        }
    }
    EXPECT_GT(nonzero_masked, 0u);
}

TEST(Gradients, HiddenInputContentChangesNothing) {
    ToyModel<float> m(small_hyper());
    randomize_small_params(m, 19);
    const auto plan = random_plan(PatchGrid::make(32, 48, 16), 0.5, 20);
    const auto target = random_image(32, 48, 21);
    auto input = target;
    const auto vis = pixel_visibility(plan);
    for (std::size_t i = 0; i < input.size(); ++i)
        if (!vis[i]) input[i] = 1.0f - input[i];
    const auto g1 = compute_gradients(m, target, target, plan);
    const auto g2 = compute_gradients(m, input, target, plan);
    EXPECT_EQ(g1.loss, g2.loss);
    EXPECT_EQ(g1.params, g2.params);
    EXPECT_EQ(g1.d_reconstruction, g2.d_reconstruction);
}

TEST(Gradients, ZeroImageZeroParamsIsStationary) {
    ToyModel<float> m(small_hyper());
    for (auto& p : m.params()) std::fill(p.values.begin(), p.values.end(), 0.0f);
    const auto g = compute_gradients(m, ImageGray(32, 48, 0.0f), random_plan(PatchGrid::make(32, 48, 16), 0.5, 1));
    EXPECT_EQ(g.loss, 0.0);
    for (const auto& t : g.params)
        for (float v : t) ASSERT_EQ(v, 0.0f);
}

TEST(Train, ZeroLearningRateLeavesModel) {
    ToyHyper hp = small_hyper();
    hp.lr = 0.0;
    ToyModel<float> m(hp);
    const auto before = m;
    const auto img = random_image(32, 48, 22);
    const auto plan = random_plan(PatchGrid::make(32, 48, 16), 0.5, 2);
    const double loss = train_step(m, img, plan);
    EXPECT_EQ(m, before);
    EXPECT_EQ(loss, forward_loss(m, img, plan));
}

TEST(Train, SameSeedSameTrajectory) {
    const auto img = random_image(32, 48, 23);
    const auto plan = random_plan(PatchGrid::make(32, 48, 16), 0.5, 3);
    ToyModel<float> a(small_hyper()), b(small_hyper());
    for (int s = 0; s < 10; ++s) {
        const double la = train_step(a, img, plan);
        const double lb = train_step(b, img, plan);
        ASSERT_EQ(la, lb);
        ASSERT_EQ(a, b);
    }
}

TEST(Train, LossDropsOnBlobImage) {
    SynthConfig sc;
    sc.height = 32;
    sc.width = 32;
    sc.sigma_min = 3;
    sc.sigma_max = 4;
    sc.seed = 4;
    const auto img = make_synth_item(sc, 0).image;
    const auto plan = random_plan(PatchGrid::make(32, 32, 16), 0.5, 4);
    ToyHyper hp = small_hyper(32, 32);
    ToyModel<float> m(hp);
    const double first = train_step(m, img, plan);
    double last = first;
    for (int s = 0; s < 30; ++s) last = train_step(m, img, plan);
    EXPECT_LT(last, first);
}

TEST(GradCheck, LinearModelIsExact) {
    ToyModel<float> m(small_hyper(32, 32, 1.0));
    randomize_small_params(m, 24);
    const auto plan = random_plan(PatchGrid::make(32, 32, 16), 0.5, 5);
    // The loss is exactly quadratic in each parameter, so the central
    // difference has no truncation error and a wide step only shrinks the
    // rounding term.
    EXPECT_LT(grad_check(m, random_image(32, 32, 25), plan, 1e-2, 64, 1), 1e-6);
}

TEST(GradCheck, LeakyModelWithinTolerance) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        ToyModel<float> m(small_hyper(32, 32));
        randomize_small_params(m, 26 + seed);
        const auto plan = random_plan(PatchGrid::make(32, 32, 16), 0.5, 6 + seed);
        EXPECT_LT(grad_check(m, random_image(32, 32, 27 + seed), plan, 1e-4, 64, seed), 1e-3);
    }
}

TEST(GradCheck, EpsilonRange) {
    ToyModel<float> m(small_hyper(32, 32));
    const auto plan = random_plan(PatchGrid::make(32, 32, 16), 0.5, 1);
    EXPECT_ERRC(grad_check(m, random_image(32, 32, 1), plan, 0.5), Errc::InvalidArgument);
}

TEST(Checkpoint, RoundTrip) {
    ToyModel<float> m(small_hyper());
    randomize_small_params(m, 28);
    testutil::TempDir dir;
    save_checkpoint(dir / "m.mwmt", m, {{"note", "x"}});
    EXPECT_EQ(load_checkpoint(dir / "m.mwmt"), m);
}

TEST(Checkpoint, CorruptFilesRejected) {
    ToyModel<float> m(small_hyper());
    auto bytes = encode_checkpoint(m);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_ERRC(decode_checkpoint(bad_magic), Errc::MagicMismatch);
    auto short_payload = bytes;
    short_payload.resize(bytes.size() - 3);
    EXPECT_ERRC(decode_checkpoint(short_payload), Errc::TruncatedFile);
    EXPECT_ERRC(decode_checkpoint(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 6)), Errc::TruncatedFile);
}
