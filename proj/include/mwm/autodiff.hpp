#pragma once

// Minimal tape-based reverse-mode differentiation over CHW feature maps.
// Only the operations the toy reconstruction model needs are provided.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "mwm/error.hpp"
#include "mwm/grid.hpp"

namespace mwm::ad {

template <typename T>
struct Tensor {
    std::size_t channels = 1;
    std::size_t height = 1;
    std::size_t width = 1;
    std::vector<T> data;

    Tensor() = default;
    Tensor(std::size_t c, std::size_t h, std::size_t w, T fill = T{})
        : channels(c), height(h), width(w), data(c * h * w, fill) {}

    std::size_t size() const noexcept { return data.size(); }
    std::size_t plane() const noexcept { return height * width; }
    T& at(std::size_t c, std::size_t r, std::size_t col) { return data[(c * height + r) * width + col]; }
    const T& at(std::size_t c, std::size_t r, std::size_t col) const {
        return data[(c * height + r) * width + col];
    }
    bool same_shape(const Tensor& o) const noexcept {
        return channels == o.channels && height == o.height && width == o.width;
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

struct Var {
    std::size_t id = 0;
};

template <typename T>
class Tape {
public:
    using Adjoint = std::function<void(Tape&, Var self)>;

    Var leaf(Tensor<T> value) { return push(std::move(value), nullptr); }

    Var push(Tensor<T> value, Adjoint backward) {
        Node node;
        node.grad = Tensor<T>(value.channels, value.height, value.width);
        node.value = std::move(value);
        node.backward = std::move(backward);
        nodes_.push_back(std::move(node));
        return Var{nodes_.size() - 1};
    }

    const Tensor<T>& value(Var v) const { return nodes_[v.id].value; }
    Tensor<T>& grad(Var v) { return nodes_[v.id].grad; }
    const Tensor<T>& grad(Var v) const { return nodes_[v.id].grad; }

    /// Seeds d(root)/d(root) = 1 and runs the recorded adjoints in reverse.
    void backward(Var root) {
        if (value(root).size() != 1) throw Error(Errc::InvalidArgument, "backward needs a scalar root");
        nodes_[root.id].grad.data[0] = T{1};
        for (std::size_t i = root.id + 1; i-- > 0;) {
            if (nodes_[i].backward) nodes_[i].backward(*this, Var{i});
        }
    }

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        Adjoint backward;
    };
    std::vector<Node> nodes_;
};

namespace detail {

// Calls fn(out_index, weight_index, in_index) for every in-bounds tap.
template <typename Fn>
void conv_taps(std::size_t cin, std::size_t ih, std::size_t iw, std::size_t cout, std::size_t oh, std::size_t ow,
               std::size_t kernel, std::size_t stride, std::size_t pad, Fn&& fn) {
    for (std::size_t co = 0; co < cout; ++co) {
        for (std::size_t ci = 0; ci < cin; ++ci) {
            for (std::size_t ky = 0; ky < kernel; ++ky) {
                for (std::size_t kx = 0; kx < kernel; ++kx) {
                    const std::size_t wi = ((co * cin + ci) * kernel + ky) * kernel + kx;
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                        const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                        if (iy < 0 || iy >= static_cast<long>(ih)) continue;
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                            if (ix < 0 || ix >= static_cast<long>(iw)) continue;
                            fn((co * oh + oy) * ow + ox, wi, (ci * ih + static_cast<std::size_t>(iy)) * iw +
                                                                 static_cast<std::size_t>(ix));
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// Square-kernel 2-D convolution with zero padding. `weight` holds
/// out*in*k*k values (out-major), `bias` holds `out` values.
template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var weight, Var bias, std::size_t out_channels, std::size_t kernel,
           std::size_t stride, std::size_t pad) {
    const Tensor<T>& in = tape.value(x);
    const std::size_t cin = in.channels, ih = in.height, iw = in.width;
    if (tape.value(weight).size() != out_channels * cin * kernel * kernel || tape.value(bias).size() != out_channels) {
        throw Error(Errc::ShapeMismatch, "conv2d parameter shape");
    }
    if (ih + 2 * pad < kernel || iw + 2 * pad < kernel) throw Error(Errc::ShapeMismatch, "conv2d input too small");
    const std::size_t oh = (ih + 2 * pad - kernel) / stride + 1;
    const std::size_t ow = (iw + 2 * pad - kernel) / stride + 1;

    Tensor<T> out(out_channels, oh, ow);
    const auto& w = tape.value(weight).data;
    const auto& b = tape.value(bias).data;
    for (std::size_t co = 0; co < out_channels; ++co) {
        std::fill_n(out.data.begin() + static_cast<long>(co * oh * ow), oh * ow, b[co]);
    }
    detail::conv_taps(cin, ih, iw, out_channels, oh, ow, kernel, stride, pad,
                      [&](std::size_t o, std::size_t k, std::size_t i) { out.data[o] += w[k] * in.data[i]; });

    return tape.push(std::move(out), [=](Tape<T>& t, Var self) {
        const auto& g = t.grad(self).data;
        const auto& xv = t.value(x).data;
        const auto& wv = t.value(weight).data;
        auto& gx = t.grad(x).data;
        auto& gw = t.grad(weight).data;
        auto& gb = t.grad(bias).data;
        for (std::size_t co = 0; co < out_channels; ++co) {
            for (std::size_t i = 0; i < oh * ow; ++i) gb[co] += g[co * oh * ow + i];
        }
        detail::conv_taps(cin, ih, iw, out_channels, oh, ow, kernel, stride, pad,
                          [&](std::size_t o, std::size_t k, std::size_t i) {
                              gw[k] += g[o] * xv[i];
                              gx[i] += g[o] * wv[k];
                          });
    });
}

/// max(x, 0) + slope * min(x, 0). slope 1 is the identity.
template <typename T>
Var leaky(Tape<T>& tape, Var x, T slope) {
    Tensor<T> out = tape.value(x);
    for (auto& v : out.data) v = v < T{0} ? slope * v : v;
    return tape.push(std::move(out), [=](Tape<T>& t, Var self) {
        const auto& g = t.grad(self).data;
        const auto& xv = t.value(x).data;
        auto& gx = t.grad(x).data;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += xv[i] < T{0} ? slope * g[i] : g[i];
    });
}

/// Zeroes every cell whose `keep` bit is 0 (all channels).
template <typename T>
Var mask_cells(Tape<T>& tape, Var x, const Grid<std::uint8_t>& keep) {
    Tensor<T> out = tape.value(x);
    if (keep.height() != out.height || keep.width() != out.width) throw Error(Errc::ShapeMismatch, "mask_cells");
    for (std::size_t c = 0; c < out.channels; ++c) {
        for (std::size_t i = 0; i < out.plane(); ++i) {
            if (!keep[i]) out.data[c * out.plane() + i] = T{0};
        }
    }
    return tape.push(std::move(out), [=](Tape<T>& t, Var self) {
        const auto& g = t.grad(self).data;
        auto& gx = t.grad(x).data;
        const std::size_t plane = keep.size();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (keep[i % plane]) gx[i] += g[i];
        }
    });
}

/// Cells with `visible` = 0 are replaced by the per-channel `embedding`.
template <typename T>
Var densify(Tape<T>& tape, Var x, const Grid<std::uint8_t>& visible, Var embedding) {
    Tensor<T> out = tape.value(x);
    const auto& emb = tape.value(embedding).data;
    if (visible.height() != out.height || visible.width() != out.width || emb.size() != out.channels) {
        throw Error(Errc::ShapeMismatch, "densify");
    }
    for (std::size_t c = 0; c < out.channels; ++c) {
        for (std::size_t i = 0; i < out.plane(); ++i) {
            if (!visible[i]) out.data[c * out.plane() + i] = emb[c];
        }
    }
    return tape.push(std::move(out), [=](Tape<T>& t, Var self) {
        const auto& g = t.grad(self).data;
        auto& gx = t.grad(x).data;
        auto& ge = t.grad(embedding).data;
        const std::size_t plane = visible.size();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (visible[i % plane]) {
                gx[i] += g[i];
            } else {
                ge[i / plane] += g[i];
            }
        }
    });
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
Var upsample2(Tape<T>& tape, Var x) {
    const Tensor<T>& in = tape.value(x);
    Tensor<T> out(in.channels, in.height * 2, in.width * 2);
    for (std::size_t c = 0; c < out.channels; ++c) {
        for (std::size_t r = 0; r < out.height; ++r) {
            for (std::size_t col = 0; col < out.width; ++col) out.at(c, r, col) = in.at(c, r / 2, col / 2);
        }
    }
    return tape.push(std::move(out), [=](Tape<T>& t, Var self) {
        const auto& g = t.grad(self);
        auto& gx = t.grad(x);
        for (std::size_t c = 0; c < g.channels; ++c) {
            for (std::size_t r = 0; r < g.height; ++r) {
                for (std::size_t col = 0; col < g.width; ++col) gx.at(c, r / 2, col / 2) += g.at(c, r, col);
            }
        }
    });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
    if (!tape.value(a).same_shape(tape.value(b))) throw Error(Errc::ShapeMismatch, "add");
    Tensor<T> out = tape.value(a);
    const auto& bv = tape.value(b).data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv[i];
    return tape.push(std::move(out), [=](Tape<T>& t, Var self) {
        const auto& g = t.grad(self).data;
        auto& ga = t.grad(a).data;
        auto& gb = t.grad(b).data;
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] += g[i];
        }
    });
}

/// Mean of squared error over pixels whose `masked` bit is 1. The reduction
/// accumulates in double. Unmasked pixels receive an exactly-zero gradient.
template <typename T>
Var masked_mse(Tape<T>& tape, Var prediction, const Tensor<T>& target, const Grid<std::uint8_t>& masked) {
    const Tensor<T>& pred = tape.value(prediction);
    if (!pred.same_shape(target) || pred.channels != 1 || masked.height() != pred.height ||
        masked.width() != pred.width) {
        throw Error(Errc::ShapeMismatch, "masked_mse");
    }
    std::size_t count = 0;
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!masked[i]) continue;
        const double d = static_cast<double>(pred.data[i]) - static_cast<double>(target.data[i]);
        sum += d * d;
        ++count;
    }
    if (count == 0) throw Error(Errc::NoMaskedPatches, "plan masks no pixels");
    Tensor<T> out(1, 1, 1, static_cast<T>(sum / static_cast<double>(count)));
    return tape.push(std::move(out), [=](Tape<T>& t, Var self) {
        const T g = t.grad(self).data[0];
        const auto& pv = t.value(prediction).data;
        auto& gp = t.grad(prediction).data;
        const T scale = static_cast<T>(2.0 / static_cast<double>(count));
        for (std::size_t i = 0; i < gp.size(); ++i) {
            if (masked[i]) gp[i] += g * scale * (pv[i] - target.data[i]);
        }
    });
}

}  // namespace mwm::ad
