#pragma once

// Desk-scale sparse masked image modeling.
//
//   apply_mask -> sparse_encode (4 stride-2 stages, masked cells re-zeroed
//   after each stage) -> densify (masked cells <- learned embedding per level)
//   -> decode (top-down: D4 = proj4(F'4), D(l-1) = up(l-1)(D(l)) + proj(l-1)(F'(l-1)),
//   readout to pixels) -> masked MSE.
//
// Parameters and activations are templated on the scalar so the same code
// runs in float for training and in double for gradient checking.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mwm/autodiff.hpp"
#include "mwm/error.hpp"
#include "mwm/grid.hpp"
#include "mwm/mask_planner.hpp"
#include "mwm/rng.hpp"
#include "mwm/saliency_io.hpp"

namespace mwm {

inline constexpr std::size_t kStages = 4;
inline constexpr std::size_t kEncoderStride = std::size_t{1} << kStages;

struct ToyHyper {
    std::size_t image_h = 64;
    std::size_t image_w = 64;
    std::size_t patch = kEncoderStride;
    std::array<std::size_t, kStages> channels{8, 16, 32, 64};
    double slope = 0.1;  // leaky activation; 1.0 makes the model linear
    double lr = 0.05;
    std::uint64_t seed = 0;
    bool normalize_targets = false;  // per-patch standardized targets

    friend bool operator==(const ToyHyper&, const ToyHyper&) = default;
};

template <typename T>
struct ParamTensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<T> values;
};

/// All learnable state, in checkpoint order:
///   enc{1..4}.weight/bias, mask_emb{1..4}, proj{1..4}.weight/bias,
///   up{3,2,1}.weight/bias, readout.weight/bias.
template <typename T>
class ToyModel {
public:
    ToyModel() = default;

    explicit ToyModel(const ToyHyper& hyper) : hyper_(hyper) {
        validate(hyper);
        const auto& ch = hyper.channels;
        for (std::size_t l = 0; l < kStages; ++l) {
            const std::size_t cin = l == 0 ? 1 : ch[l - 1];
            declare("enc" + std::to_string(l + 1) + ".weight", {ch[l], cin, 3, 3});
            declare("enc" + std::to_string(l + 1) + ".bias", {ch[l]});
        }
        for (std::size_t l = 0; l < kStages; ++l) declare("mask_emb" + std::to_string(l + 1), {ch[l]});
        for (std::size_t l = 0; l < kStages; ++l) {
            declare("proj" + std::to_string(l + 1) + ".weight", {ch[l], ch[l], 1, 1});
            declare("proj" + std::to_string(l + 1) + ".bias", {ch[l]});
        }
        for (std::size_t l = kStages - 1; l >= 1; --l) {
            declare("up" + std::to_string(l) + ".weight", {ch[l - 1], ch[l], 3, 3});
            declare("up" + std::to_string(l) + ".bias", {ch[l - 1]});
        }
        declare("readout.weight", {1, ch[0], 3, 3});
        declare("readout.bias", {1});

        // Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and mask
        // embeddings start at zero.
        Rng rng(hyper.seed);
        for (auto& p : params_) {
            if (p.shape.size() != 4) continue;
            const double bound = 1.0 / std::sqrt(static_cast<double>(p.shape[1] * p.shape[2] * p.shape[3]));
            for (auto& v : p.values) v = static_cast<T>(rng.uniform(-bound, bound));
        }
    }

    static void validate(const ToyHyper& h) {
        if (h.patch != kEncoderStride) {
            throw Error(Errc::ShapeMismatch, "patch size must equal the encoder stride " + std::to_string(kEncoderStride));
        }
        if (h.image_h == 0 || h.image_w == 0 || h.image_h % h.patch != 0 || h.image_w % h.patch != 0) {
            throw Error(Errc::ShapeMismatch, "image size must be a positive multiple of the patch size");
        }
        for (auto c : h.channels) {
            if (c == 0) throw Error(Errc::InvalidArgument, "channel counts must be positive");
        }
    }

    const ToyHyper& hyper() const noexcept { return hyper_; }
    std::vector<ParamTensor<T>>& params() noexcept { return params_; }
    const std::vector<ParamTensor<T>>& params() const noexcept { return params_; }

    ParamTensor<T>& param(const std::string& name) { return params_[index_of(name)]; }
    const ParamTensor<T>& param(const std::string& name) const { return params_[index_of(name)]; }

    std::size_t index_of(const std::string& name) const {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (params_[i].name == name) return i;
        }
        throw Error(Errc::InvalidArgument, "no parameter named " + name);
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.values.size();
        return n;
    }

    /// Flat view index -> (tensor, offset).
    T& flat(std::size_t i) {
        for (auto& p : params_) {
            if (i < p.values.size()) return p.values[i];
            i -= p.values.size();
        }
        throw Error(Errc::InvalidArgument, "flat parameter index out of range");
    }

    template <typename U>
    ToyModel<U> cast() const {
        ToyModel<U> out;
        out.hyper_ = hyper_;
        for (const auto& p : params_) {
            out.params_.push_back({p.name, p.shape, std::vector<U>(p.values.begin(), p.values.end())});
        }
        return out;
    }

    friend bool operator==(const ToyModel& a, const ToyModel& b) {
        if (!(a.hyper_ == b.hyper_) || a.params_.size() != b.params_.size()) return false;
        for (std::size_t i = 0; i < a.params_.size(); ++i) {
            if (a.params_[i].name != b.params_[i].name || a.params_[i].shape != b.params_[i].shape ||
                a.params_[i].values != b.params_[i].values) {
                return false;
            }
        }
        return true;
    }

private:
    template <typename>
    friend class ToyModel;

    void declare(std::string name, std::vector<std::size_t> shape) {
        std::size_t n = 1;
        for (auto s : shape) n *= s;
        params_.push_back({std::move(name), std::move(shape), std::vector<T>(n, T{0})});
    }

    ToyHyper hyper_;
    std::vector<ParamTensor<T>> params_;
};

// ---------------------------------------------------------------------------
// Masks

/// Pixel-resolution visibility (1 = visible) from a patch plan.
inline Grid<std::uint8_t> pixel_visibility(const MaskPlan& plan) {
    Grid<std::uint8_t> vis(plan.grid.image_h, plan.grid.image_w);
    for (std::size_t r = 0; r < vis.height(); ++r) {
        for (std::size_t c = 0; c < vis.width(); ++c) {
            vis(r, c) = plan.visible(r / plan.grid.patch, c / plan.grid.patch);
        }
    }
    return vis;
}

inline void require_plan_matches(const GridF32& image, const MaskPlan& plan) {
    if (plan.grid.image_h != image.height() || plan.grid.image_w != image.width() ||
        plan.visible.height() != plan.grid.rows || plan.visible.width() != plan.grid.cols) {
        throw Error(Errc::ShapeMismatch, "mask plan does not match image " + std::to_string(image.height()) + "x" +
                                             std::to_string(image.width()));
    }
}

/// Pixels under masked patches are set to 0; visible pixels are untouched.
inline ImageGray apply_mask(const ImageGray& image, const MaskPlan& plan) {
    require_plan_matches(image, plan);
    ImageGray out = image;
    const auto vis = pixel_visibility(plan);
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!vis[i]) out[i] = 0.0f;
    }
    return out;
}

/// Visibility at levels 0 (pixels) .. kStages. Level l has the image size
/// divided by 2^l; cell (r, c) takes the bit of the patch it falls in.
inline std::array<Grid<std::uint8_t>, kStages + 1> visibility_pyramid(const MaskPlan& plan) {
    std::array<Grid<std::uint8_t>, kStages + 1> levels;
    for (std::size_t l = 0; l <= kStages; ++l) {
        const std::size_t scale = std::size_t{1} << l;
        const std::size_t cells_per_patch = plan.grid.patch / scale;
        Grid<std::uint8_t> g(plan.grid.image_h / scale, plan.grid.image_w / scale);
        for (std::size_t r = 0; r < g.height(); ++r) {
            for (std::size_t c = 0; c < g.width(); ++c) g(r, c) = plan.visible(r / cells_per_patch, c / cells_per_patch);
        }
        levels[l] = std::move(g);
    }
    for (std::size_t l = 0; l < kStages; ++l) {
        const auto& fine = levels[l];
        const auto& coarse = levels[l + 1];
        for (std::size_t r = 0; r < coarse.height(); ++r) {
            for (std::size_t c = 0; c < coarse.width(); ++c) {
                if (coarse(r, c) != fine(2 * r, 2 * c)) {
                    throw Error(Errc::ShapeMismatch, "mask pyramid is not a 2x decimation");
                }
            }
        }
    }
    return levels;
}

// ---------------------------------------------------------------------------
// Forward graph

template <typename T>
struct FeaturePyramid {
    std::array<ad::Tensor<T>, kStages> levels;                // F1..F4
    std::array<Grid<std::uint8_t>, kStages> visibility;       // per level
};

template <typename T>
struct ForwardGraph {
    ad::Tape<T> tape;
    std::vector<ad::Var> params;  // one leaf per model parameter tensor
    std::array<ad::Var, kStages> features{};
    std::array<ad::Var, kStages> densified{};
    ad::Var reconstruction{};
    ad::Var loss{};
    bool has_loss = false;
    // Inputs of every leaky activation, with the cells whose values reach the
    // loss (empty grid = all cells). Used to locate activation kinks.
    std::vector<ad::Var> preactivations;
    std::vector<Grid<std::uint8_t>> preactivation_keep;
};

namespace detail {

template <typename T>
ad::Tensor<T> to_tensor(const GridF32& g) {
    ad::Tensor<T> t(1, g.height(), g.width());
    for (std::size_t i = 0; i < g.size(); ++i) t.data[i] = static_cast<T>(g[i]);
    return t;
}

template <typename T>
void add_param_leaves(ForwardGraph<T>& graph, const ToyModel<T>& model) {
    for (const auto& p : model.params()) {
        ad::Tensor<T> t(p.values.size(), 1, 1);
        t.data = p.values;
        graph.params.push_back(graph.tape.leaf(std::move(t)));
    }
}

template <typename T>
ad::Var param_var(const ForwardGraph<T>& graph, const ToyModel<T>& model, const std::string& name) {
    return graph.params[model.index_of(name)];
}

template <typename T>
void encode_into(ForwardGraph<T>& graph, const ToyModel<T>& model, const GridF32& sparse_image,
                 const std::array<Grid<std::uint8_t>, kStages + 1>& vis) {
    auto& tape = graph.tape;
    const T slope = static_cast<T>(model.hyper().slope);
    ad::Var x = ad::mask_cells(tape, tape.leaf(to_tensor<T>(sparse_image)), vis[0]);
    for (std::size_t l = 0; l < kStages; ++l) {
        const std::string stem = "enc" + std::to_string(l + 1);
        x = ad::conv2d(tape, x, param_var(graph, model, stem + ".weight"), param_var(graph, model, stem + ".bias"),
                       model.hyper().channels[l], 3, 2, 1);
        graph.preactivations.push_back(x);
        graph.preactivation_keep.push_back(vis[l + 1]);
        x = ad::leaky(tape, x, slope);
        x = ad::mask_cells(tape, x, vis[l + 1]);
        graph.features[l] = x;
    }
}

template <typename T>
void decode_into(ForwardGraph<T>& graph, const ToyModel<T>& model) {
    auto& tape = graph.tape;
    const auto& ch = model.hyper().channels;
    const T slope = static_cast<T>(model.hyper().slope);
    auto project = [&](std::size_t l) {
        const std::string stem = "proj" + std::to_string(l + 1);
        return ad::conv2d(tape, graph.densified[l], param_var(graph, model, stem + ".weight"),
                          param_var(graph, model, stem + ".bias"), ch[l], 1, 1, 0);
    };
    ad::Var d = project(kStages - 1);
    for (std::size_t l = kStages - 1; l >= 1; --l) {
        const std::string stem = "up" + std::to_string(l);
        ad::Var up = ad::upsample2(tape, d);
        up = ad::conv2d(tape, up, param_var(graph, model, stem + ".weight"), param_var(graph, model, stem + ".bias"),
                        ch[l - 1], 3, 1, 1);
        graph.preactivations.push_back(up);
        graph.preactivation_keep.emplace_back();
        up = ad::leaky(tape, up, slope);
        d = ad::add(tape, up, project(l - 1));
    }
    ad::Var up = ad::upsample2(tape, d);
    graph.reconstruction = ad::conv2d(tape, up, param_var(graph, model, "readout.weight"),
                                      param_var(graph, model, "readout.bias"), 1, 3, 1, 1);
}

/// Per-patch standardization: (x - mean) / sqrt(var + 1e-6).
inline GridF32 standardize_patches(const GridF32& image, std::size_t patch) {
    GridF32 out = image;
    for (std::size_t pr = 0; pr * patch < image.height(); ++pr) {
        for (std::size_t pc = 0; pc * patch < image.width(); ++pc) {
            const std::size_t r1 = std::min(image.height(), (pr + 1) * patch);
            const std::size_t c1 = std::min(image.width(), (pc + 1) * patch);
            double sum = 0.0, sq = 0.0;
            std::size_t n = 0;
            for (std::size_t r = pr * patch; r < r1; ++r) {
                for (std::size_t c = pc * patch; c < c1; ++c) {
                    sum += image(r, c);
                    sq += double(image(r, c)) * image(r, c);
                    ++n;
                }
            }
            const double mean = sum / n;
            const double sd = std::sqrt(std::max(0.0, sq / n - mean * mean) + 1e-6);
            for (std::size_t r = pr * patch; r < r1; ++r) {
                for (std::size_t c = pc * patch; c < c1; ++c) out(r, c) = static_cast<float>((image(r, c) - mean) / sd);
            }
        }
    }
    return out;
}

}  // namespace detail

inline GridF32 reconstruction_target(const ImageGray& image, const ToyHyper& hyper) {
    return hyper.normalize_targets ? detail::standardize_patches(image, hyper.patch) : image;
}

/// Builds the full graph: mask `input`, encode, densify, decode and (when
/// `with_loss` is set) the masked MSE against `target`.
template <typename T>
ForwardGraph<T> build_forward(const ToyModel<T>& model, const ImageGray& input, const GridF32& target,
                              const MaskPlan& plan, bool with_loss = true) {
    require_plan_matches(input, plan);
    require_same_shape(input, target, "input vs target");
    if (input.height() != model.hyper().image_h || input.width() != model.hyper().image_w ||
        plan.grid.patch != model.hyper().patch) {
        throw Error(Errc::ShapeMismatch, "image or plan does not match the model configuration");
    }
    const auto vis = visibility_pyramid(plan);
    ForwardGraph<T> graph;
    detail::add_param_leaves(graph, model);
    detail::encode_into(graph, model, apply_mask(input, plan), vis);
    for (std::size_t l = 0; l < kStages; ++l) {
        graph.densified[l] = ad::densify(graph.tape, graph.features[l], vis[l + 1],
                                         detail::param_var(graph, model, "mask_emb" + std::to_string(l + 1)));
    }
    detail::decode_into(graph, model);
    if (with_loss) {
        Grid<std::uint8_t> masked = vis[0];
        for (auto& b : masked.values()) b = !b;
        graph.loss = ad::masked_mse(graph.tape, graph.reconstruction, detail::to_tensor<T>(target), masked);
        graph.has_loss = true;
    }
    return graph;
}

template <typename T>
ForwardGraph<T> build_forward(const ToyModel<T>& model, const ImageGray& image, const MaskPlan& plan,
                              bool with_loss = true) {
    return build_forward(model, image, reconstruction_target(image, model.hyper()), plan, with_loss);
}

/// Encoder features of an already-masked image, with per-level visibility.
template <typename T>
FeaturePyramid<T> sparse_encode(const ImageGray& sparse_image, const MaskPlan& plan, const ToyModel<T>& model) {
    require_plan_matches(sparse_image, plan);
    if (sparse_image.height() != model.hyper().image_h || sparse_image.width() != model.hyper().image_w) {
        throw Error(Errc::ShapeMismatch, "image does not match the model configuration");
    }
    const auto vis = visibility_pyramid(plan);
    ForwardGraph<T> graph;
    detail::add_param_leaves(graph, model);
    detail::encode_into(graph, model, sparse_image, vis);
    FeaturePyramid<T> out;
    for (std::size_t l = 0; l < kStages; ++l) {
        out.levels[l] = graph.tape.value(graph.features[l]);
        out.visibility[l] = vis[l + 1];
    }
    return out;
}

/// F'(i) = F(i) where visible, otherwise the embedding.
template <typename T>
ad::Tensor<T> densify(const ad::Tensor<T>& features, const Grid<std::uint8_t>& visibility,
                      std::span<const T> embedding) {
    ad::Tape<T> tape;
    ad::Tensor<T> emb(embedding.size(), 1, 1);
    emb.data.assign(embedding.begin(), embedding.end());
    const ad::Var v = ad::densify(tape, tape.leaf(features), visibility, tape.leaf(std::move(emb)));
    return tape.value(v);
}

/// Decoder applied to a pyramid whose levels are already densified.
template <typename T>
GridF32 decode(const std::array<ad::Tensor<T>, kStages>& densified, const ToyModel<T>& model) {
    ForwardGraph<T> graph;
    detail::add_param_leaves(graph, model);
    for (std::size_t l = 0; l < kStages; ++l) graph.densified[l] = graph.tape.leaf(densified[l]);
    detail::decode_into(graph, model);
    const auto& t = graph.tape.value(graph.reconstruction);
    GridF32 out(t.height, t.width);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(t.data[i]);
    return out;
}

/// Mean over pixels of masked patches of (x_hat - x)^2, accumulated in double.
inline double recon_loss(const GridF32& reconstruction, const ImageGray& image, const MaskPlan& plan) {
    require_same_shape(reconstruction, image, "reconstruction vs image");
    require_plan_matches(image, plan);
    const auto vis = pixel_visibility(plan);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < image.size(); ++i) {
        if (vis[i]) continue;
        const double d = static_cast<double>(reconstruction[i]) - static_cast<double>(image[i]);
        sum += d * d;
        ++n;
    }
    if (n == 0) throw Error(Errc::NoMaskedPatches, "plan masks no patches");
    return sum / static_cast<double>(n);
}

template <typename T>
GridF32 reconstruct(const ToyModel<T>& model, const ImageGray& image, const MaskPlan& plan) {
    auto graph = build_forward(model, image, plan, false);
    const auto& t = graph.tape.value(graph.reconstruction);
    GridF32 out(t.height, t.width);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(t.data[i]);
    return out;
}

template <typename T>
struct Gradients {
    double loss = 0.0;
    std::vector<std::vector<T>> params;  // parallel to model.params()
    GridF32 reconstruction;
    std::vector<T> d_reconstruction;      // dL/dx_hat per pixel
};

/// Loss and gradients when the encoder sees `input` and the loss compares
/// against `target`.
template <typename T>
Gradients<T> compute_gradients(const ToyModel<T>& model, const ImageGray& input, const GridF32& target,
                               const MaskPlan& plan) {
    auto graph = build_forward(model, input, target, plan, true);
    graph.tape.backward(graph.loss);
    Gradients<T> out;
    const auto& rec = graph.tape.value(graph.reconstruction);
    out.reconstruction = GridF32(rec.height, rec.width);
    for (std::size_t i = 0; i < rec.size(); ++i) out.reconstruction[i] = static_cast<float>(rec.data[i]);
    out.loss = recon_loss(out.reconstruction, target, plan);
    for (auto v : graph.params) out.params.push_back(graph.tape.grad(v).data);
    out.d_reconstruction = graph.tape.grad(graph.reconstruction).data;
    return out;
}

template <typename T>
Gradients<T> compute_gradients(const ToyModel<T>& model, const ImageGray& image, const MaskPlan& plan) {
    return compute_gradients(model, image, reconstruction_target(image, model.hyper()), plan);
}

struct ForwardProbe {
    double loss = 0.0;
    std::vector<std::uint8_t> negative;  // sign of each loss-relevant leaky input
};

/// Loss at the model's own precision plus the activation sign pattern.
template <typename T>
ForwardProbe forward_probe(const ToyModel<T>& model, const ImageGray& image, const MaskPlan& plan) {
    auto graph = build_forward(model, image, plan, true);
    const auto& rec = graph.tape.value(graph.reconstruction);
    const GridF32 target = reconstruction_target(image, model.hyper());
    const auto vis = pixel_visibility(plan);
    ForwardProbe probe;
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < rec.size(); ++i) {
        if (vis[i]) continue;
        const double d = static_cast<double>(rec.data[i]) - static_cast<double>(target[i]);
        sum += d * d;
        ++n;
    }
    probe.loss = sum / static_cast<double>(n);
    for (std::size_t k = 0; k < graph.preactivations.size(); ++k) {
        const auto& v = graph.tape.value(graph.preactivations[k]);
        const auto& keep = graph.preactivation_keep[k];
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (keep.empty() || keep[i % v.plane()]) probe.negative.push_back(v.data[i] < T{0});
        }
    }
    return probe;
}

template <typename T>
double forward_loss(const ToyModel<T>& model, const ImageGray& image, const MaskPlan& plan) {
    return forward_probe(model, image, plan).loss;
}

/// One SGD step; returns the loss before the update.
template <typename T>
double train_step(ToyModel<T>& model, const ImageGray& image, const MaskPlan& plan) {
    const auto grads = compute_gradients(model, image, plan);
    const T lr = static_cast<T>(model.hyper().lr);
    auto& params = model.params();
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t i = 0; i < params[p].values.size(); ++i) params[p].values[i] -= lr * grads.params[p][i];
    }
    return grads.loss;
}

/// Finite-difference derivative of the loss along flat parameter `index`.
///
/// Within one activation region the reconstruction is affine in any single
/// parameter, so the loss is exactly quadratic there. The central stencil is
/// used when both probes stay in the base region; if one side crosses a
/// kink, the exact one-sided stencil (-3 L0 + 4 L1 - L2) / 2h on the other
/// side is used instead; if both cross, h shrinks.
inline double finite_difference(ToyModel<double>& model, std::size_t index, const ImageGray& image,
                                const MaskPlan& plan, const ForwardProbe& base, double epsilon) {
    double& theta = model.flat(index);
    const double saved = theta;
    auto at = [&](double offset) {
        theta = saved + offset;
        auto probe = forward_probe(model, image, plan);
        theta = saved;
        return probe;
    };
    double h = epsilon;
    for (int attempt = 0; attempt < 4; ++attempt, h *= 0.1) {
        const auto up = at(h);
        const auto down = at(-h);
        const bool up_ok = up.negative == base.negative;
        const bool down_ok = down.negative == base.negative;
        if ((up_ok && down_ok) || attempt == 3) return (up.loss - down.loss) / (2.0 * h);
        if (up_ok) {
            const auto up2 = at(2.0 * h);
            if (up2.negative == base.negative) return (-3.0 * base.loss + 4.0 * up.loss - up2.loss) / (2.0 * h);
        }
        if (down_ok) {
            const auto down2 = at(-2.0 * h);
            if (down2.negative == base.negative) return (3.0 * base.loss - 4.0 * down.loss + down2.loss) / (2.0 * h);
        }
    }
    return 0.0;  // unreachable
}

/// Max relative error between reverse-mode and finite-difference gradients
/// over `samples` randomly chosen parameters:
///   max |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
/// Runs in double precision on a copy of the model.
template <typename T>
double grad_check(const ToyModel<T>& model, const ImageGray& image, const MaskPlan& plan, double epsilon = 1e-4,
                  std::size_t samples = 64, std::uint64_t seed = 0) {
    if (!(epsilon >= 1e-6 && epsilon <= 1e-2)) throw Error(Errc::InvalidArgument, "epsilon must be in [1e-6, 1e-2]");
    ToyModel<double> probe = model.template cast<double>();
    const auto grads = compute_gradients(probe, image, plan);
    std::vector<double> flat_grad;
    for (const auto& g : grads.params) flat_grad.insert(flat_grad.end(), g.begin(), g.end());
    const ForwardProbe base = forward_probe(probe, image, plan);

    const std::size_t total = flat_grad.size();
    std::vector<std::size_t> order(total);
    for (std::size_t i = 0; i < total; ++i) order[i] = i;
    Rng rng(seed);
    const std::size_t k = std::min(samples, total);
    for (std::size_t i = 0; i < k; ++i) std::swap(order[i], order[i + rng.below(total - i)]);

    double worst = 0.0;
    for (std::size_t s = 0; s < k; ++s) {
        const double fd = finite_difference(probe, order[s], image, plan, base, epsilon);
        const double ad_grad = flat_grad[order[s]];
        const double denom = std::max({std::abs(ad_grad), std::abs(fd), 1e-8});
        worst = std::max(worst, std::abs(ad_grad - fd) / denom);
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Checkpoints: "MWMT", u32 LE header length, JSON header, f32 LE payload in
// declared parameter order.

inline constexpr std::array<char, 4> kCheckpointMagic{'M', 'W', 'M', 'T'};

inline nlohmann::ordered_json hyper_to_json(const ToyHyper& h) {
    nlohmann::ordered_json j;
    j["image_h"] = h.image_h;
    j["image_w"] = h.image_w;
    j["patch"] = h.patch;
    j["channels"] = h.channels;
    j["slope"] = h.slope;
    j["lr"] = h.lr;
    j["seed"] = h.seed;
    j["normalize_targets"] = h.normalize_targets;
    return j;
}

inline ToyHyper hyper_from_json(const nlohmann::json& j) {
    ToyHyper h;
    h.image_h = j.value("image_h", h.image_h);
    h.image_w = j.value("image_w", h.image_w);
    h.patch = j.value("patch", h.patch);
    h.channels = j.value("channels", h.channels);
    h.slope = j.value("slope", h.slope);
    h.lr = j.value("lr", h.lr);
    h.seed = j.value("seed", h.seed);
    h.normalize_targets = j.value("normalize_targets", h.normalize_targets);
    return h;
}

inline std::vector<std::uint8_t> encode_checkpoint(const ToyModel<float>& model,
                                                   const nlohmann::ordered_json& extra = {}) {
    nlohmann::ordered_json header;
    header["hyper"] = hyper_to_json(model.hyper());
    header["seed"] = model.hyper().seed;
    auto& shapes = header["params"] = nlohmann::ordered_json::array();
    for (const auto& p : model.params()) shapes.push_back({{"name", p.name}, {"shape", p.shape}});
    if (!extra.is_null()) header["meta"] = extra;
    const std::string text = header.dump();

    std::vector<std::uint8_t> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
    detail::put_u32le(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& p : model.params()) {
        for (float v : p.values) detail::put_f32le(out, v);
    }
    return out;
}

inline ToyModel<float> decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
        throw Error(Errc::MagicMismatch, "missing MWMT magic");
    }
    if (bytes.size() < 8) throw Error(Errc::TruncatedFile, "checkpoint header truncated");
    const std::uint32_t len = detail::get_u32le(bytes.data() + 4);
    if (bytes.size() - 8 < len) throw Error(Errc::TruncatedFile, "checkpoint header truncated");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + len);
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::ConfigInvalid, std::string("checkpoint header: ") + e.what());
    }
    ToyModel<float> model(hyper_from_json(header.at("hyper")));
    const auto& declared = header.at("params");
    if (declared.size() != model.params().size()) throw Error(Errc::ShapeMismatch, "checkpoint parameter count");
    std::size_t offset = 8 + len;
    for (std::size_t i = 0; i < declared.size(); ++i) {
        auto& p = model.params()[i];
        if (declared[i].at("name").get<std::string>() != p.name ||
            declared[i].at("shape").get<std::vector<std::size_t>>() != p.shape) {
            throw Error(Errc::ShapeMismatch, "checkpoint parameter " + p.name);
        }
        if (bytes.size() - offset < 4 * p.values.size()) throw Error(Errc::TruncatedFile, "checkpoint payload");
        for (auto& v : p.values) {
            v = detail::get_f32le(bytes.data() + offset);
            offset += 4;
        }
    }
    return model;
}

inline void save_checkpoint(const std::filesystem::path& path, const ToyModel<float>& model,
                            const nlohmann::ordered_json& extra = {}) {
    detail::write_file(path, encode_checkpoint(model, extra));
}

inline ToyModel<float> load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(detail::read_file(path));
}

}  // namespace mwm
