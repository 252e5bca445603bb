// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flowcast/errors.hpp"
#include "flowcast/rng.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast::ag {

template <typename S>
class TapeT;

// Lightweight handle to a node on a tape.
template <typename S>
struct VarT {
    TapeT<S>* tape = nullptr;
    uint32_t id = 0;

    const TensorT<S>& val() const;
    const TensorT<S>& grad() const;
};

// Reverse-mode tape. Nodes are appended in forward order, so walking the tape
// backwards is already a valid topological order for backpropagation.
template <typename S>
class TapeT {
public:
    using BackFn = std::function<void(TapeT&, uint32_t self)>;

    VarT<S> leaf(TensorT<S> value) {
        nodes_.push_back(Node{std::move(value), {}, nullptr, no_kink()});
        return VarT<S>{this, static_cast<uint32_t>(nodes_.size() - 1)};
    }

    // Leaf bound to a parameter; after backward(), accumulate_param_grads()
    // deposits the leaf gradient into the parameter.
    VarT<S> param(ParameterT<S>& p) {
        VarT<S> v = leaf(p.value);
        bindings_.emplace_back(&p, v.id);
        return v;
    }

    VarT<S> make_node(TensorT<S> value, BackFn back, S kink_margin = no_kink()) {
        nodes_.push_back(Node{std::move(value), {}, std::move(back), kink_margin});
        return VarT<S>{this, static_cast<uint32_t>(nodes_.size() - 1)};
    }

    const TensorT<S>& value(uint32_t id) const { return nodes_[id].value; }
    const TensorT<S>& grad(uint32_t id) const { return nodes_[id].grad; }

    TensorT<S>& grad_accum(uint32_t id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad = TensorT<S>::zeros(n.value.shape());
        return n.grad;
    }

    // Backpropagate from a scalar root.
    void backward(VarT<S> root) {
        if (root.tape != this) throw ShapeError("backward: variable belongs to another tape");
        if (nodes_[root.id].value.numel() != 1)
            throw ShapeError("backward: root must be scalar, got " +
                             nodes_[root.id].value.shape_string());
        grad_accum(root.id).fill(S(1));
        for (uint32_t i = root.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.grad.empty() && n.back) n.back(*this, i);
        }
    }

    // p.grad += leaf grad, for trainable bound parameters.
    void accumulate_param_grads() {
        for (auto& [p, id] : bindings_) {
            if (!p->trainable) continue;
            const TensorT<S>& g = nodes_[id].grad;
            if (!g.empty()) p->accumulate_grad(g);
        }
    }

    // Total gradient of `p` over every leaf bound to it on this tape (a
    // parameter may be bound more than once when one forward pass reuses it).
    // Empty tensor when no gradient reached any binding.
    TensorT<S> param_grad(const ParameterT<S>& p) const {
        TensorT<S> total;
        for (const auto& [bp, id] : bindings_) {
            if (bp != &p) continue;
            const TensorT<S>& g = nodes_[id].grad;
            if (g.empty()) continue;
            if (total.empty())
                total = g;
            else
                total.add_scaled(g, S(1));
        }
        return total;
    }

    // Smallest |pre-activation| seen at any kink (ReLU, |.|) on this tape.
    S kink_margin() const {
        S m = no_kink();
        for (const Node& n : nodes_) m = std::min(m, n.kink_margin);
        return m;
    }

    size_t size() const { return nodes_.size(); }

    static constexpr S no_kink() { return std::numeric_limits<S>::infinity(); }

private:
    struct Node {
        TensorT<S> value;
        TensorT<S> grad;
        BackFn back;
        S kink_margin;
    };

    std::vector<Node> nodes_;
    std::vector<std::pair<ParameterT<S>*, uint32_t>> bindings_;
};

template <typename S>
const TensorT<S>& VarT<S>::val() const {
    return tape->value(id);
}
template <typename S>
const TensorT<S>& VarT<S>::grad() const {
    return tape->grad(id);
}

namespace detail {

template <typename S>
TapeT<S>& same_tape(VarT<S> a, VarT<S> b) {
    if (a.tape != b.tape || a.tape == nullptr)
        throw ShapeError("operands belong to different tapes");
    return *a.tape;
}

// c[m x n] += a[m x k] * b[k x n]
template <typename S>
void gemm_acc(const S* a, const S* b, S* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        for (size_t p = 0; p < k; ++p) {
            const S av = arow[p];
            if (av == S(0)) continue;
            const S* brow = b + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m x n] += a^T * b, with a[r x m], b[r x n]
template <typename S>
void gemm_at_b_acc(const S* a, const S* b, S* c, size_t r, size_t m, size_t n) {
    for (size_t p = 0; p < r; ++p) {
        const S* arow = a + p * m;
        const S* brow = b + p * n;
        for (size_t i = 0; i < m; ++i) {
            const S av = arow[i];
            if (av == S(0)) continue;
            S* crow = c + i * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m x k] += a * b^T, with a[m x n], b[k x n]
template <typename S>
void gemm_a_bt_acc(const S* a, const S* b, S* c, size_t m, size_t n, size_t k) {
    for (size_t i = 0; i < m; ++i) {
        const S* arow = a + i * n;
        S* crow = c + i * k;
        for (size_t p = 0; p < k; ++p) {
            const S* brow = b + p * n;
            S acc = S(0);
            for (size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
            crow[p] += acc;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Arithmetic
// ---------------------------------------------------------------------------

template <typename S>
VarT<S> add(VarT<S> a, VarT<S> b) {
    TapeT<S>& t = detail::same_tape(a, b);
    a.val().require_same_shape(b.val(), "add");
    TensorT<S> out = a.val();
    out.add_scaled(b.val(), S(1));
    const uint32_t ia = a.id, ib = b.id;
    return t.make_node(std::move(out), [ia, ib](TapeT<S>& tp, uint32_t self) {
        const TensorT<S>& g = tp.grad(self);
        tp.grad_accum(ia).add_scaled(g, S(1));
        tp.grad_accum(ib).add_scaled(g, S(1));
    });
}

template <typename S>
VarT<S> mul(VarT<S> a, VarT<S> b) {
    TapeT<S>& t = detail::same_tape(a, b);
    a.val().require_same_shape(b.val(), "mul");
    TensorT<S> out(a.val().shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * b.val()[i];
    const uint32_t ia = a.id, ib = b.id;
    return t.make_node(std::move(out), [ia, ib](TapeT<S>& tp, uint32_t self) {
        const TensorT<S>& g = tp.grad(self);
        const TensorT<S>& av = tp.value(ia);
        const TensorT<S>& bv = tp.value(ib);
        TensorT<S>& ga = tp.grad_accum(ia);
        TensorT<S>& gb = tp.grad_accum(ib);
        for (size_t i = 0; i < g.numel(); ++i) {
            ga[i] += g[i] * bv[i];
            gb[i] += g[i] * av[i];
        }
    });
}

template <typename S>
VarT<S> scale(VarT<S> a, S factor) {
    TensorT<S> out = a.val();
    out.scale_inplace(factor);
    const uint32_t ia = a.id;
    return a.tape->make_node(std::move(out), [ia, factor](TapeT<S>& tp, uint32_t self) {
        tp.grad_accum(ia).add_scaled(tp.grad(self), factor);
    });
}

template <typename S>
VarT<S> add_scalar(VarT<S> a, S constant) {
    TensorT<S> out = a.val();
    for (size_t i = 0; i < out.numel(); ++i) out[i] += constant;
    const uint32_t ia = a.id;
    return a.tape->make_node(std::move(out), [ia](TapeT<S>& tp, uint32_t self) {
        tp.grad_accum(ia).add_scaled(tp.grad(self), S(1));
    });
}

template <typename S>
VarT<S> sum(VarT<S> a) {
    S total = S(0);
    for (size_t i = 0; i < a.val().numel(); ++i) total += a.val()[i];
    const uint32_t ia = a.id;
    return a.tape->make_node(TensorT<S>({1}, {total}), [ia](TapeT<S>& tp, uint32_t self) {
        const S g = tp.grad(self)[0];
        TensorT<S>& ga = tp.grad_accum(ia);
        for (size_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename S>
VarT<S> matmul(VarT<S> a, VarT<S> b) {
    TapeT<S>& t = detail::same_tape(a, b);
    const TensorT<S>& av = a.val();
    const TensorT<S>& bv = b.val();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        throw ShapeError("matmul: incompatible shapes " + av.shape_string() + " x " +
                         bv.shape_string());
    const size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    TensorT<S> out({m, n});
    detail::gemm_acc(av.data(), bv.data(), out.data(), m, k, n);
    const uint32_t ia = a.id, ib = b.id;
    return t.make_node(std::move(out), [ia, ib, m, k, n](TapeT<S>& tp, uint32_t self) {
        const TensorT<S>& g = tp.grad(self);
        detail::gemm_a_bt_acc(g.data(), tp.value(ib).data(), tp.grad_accum(ia).data(), m, n, k);
        detail::gemm_at_b_acc(tp.value(ia).data(), g.data(), tp.grad_accum(ib).data(), m, k, n);
    });
}

// y = x.W + b applied to the last axis; x may be rank 2 or rank 3 (leading
// axes are treated as batch rows).
template <typename S>
VarT<S> linear(VarT<S> x, VarT<S> w, VarT<S> b) {
    TapeT<S>& t = detail::same_tape(x, w);
    detail::same_tape(x, b);
    const TensorT<S>& xv = x.val();
    const TensorT<S>& wv = w.val();
    const TensorT<S>& bv = b.val();
    if (xv.rank() < 2 || wv.rank() != 2 || bv.rank() != 1)
        throw ShapeError("linear: bad ranks x=" + xv.shape_string() + " w=" + wv.shape_string());
    const size_t in = xv.dim(xv.rank() - 1);
    if (wv.dim(0) != in || bv.dim(0) != wv.dim(1))
        throw ShapeError("linear: shape mismatch x=" + xv.shape_string() +
                         " w=" + wv.shape_string() + " b=" + bv.shape_string());
    const size_t out_dim = wv.dim(1);
    const size_t rows = xv.numel() / in;
    std::vector<size_t> out_shape(xv.shape());
    out_shape.back() = out_dim;
    TensorT<S> out(out_shape);
    for (size_t r = 0; r < rows; ++r) {
        S* orow = out.data() + r * out_dim;
        for (size_t j = 0; j < out_dim; ++j) orow[j] = bv[j];
    }
    detail::gemm_acc(xv.data(), wv.data(), out.data(), rows, in, out_dim);
    const uint32_t ix = x.id, iw = w.id, ib = b.id;
    return t.make_node(std::move(out), [ix, iw, ib, rows, in, out_dim](TapeT<S>& tp, uint32_t self) {
        const TensorT<S>& g = tp.grad(self);
        detail::gemm_a_bt_acc(g.data(), tp.value(iw).data(), tp.grad_accum(ix).data(), rows,
                              out_dim, in);
        detail::gemm_at_b_acc(tp.value(ix).data(), g.data(), tp.grad_accum(iw).data(), rows, in,
                              out_dim);
        TensorT<S>& gb = tp.grad_accum(ib);
        for (size_t r = 0; r < rows; ++r) {
            const S* grow = g.data() + r * out_dim;
            for (size_t j = 0; j < out_dim; ++j) gb[j] += grow[j];
        }
    });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename S>
VarT<S> relu(VarT<S> x) {
    const TensorT<S>& xv = x.val();
    TensorT<S> out(xv.shape());
    S margin = TapeT<S>::no_kink();
    for (size_t i = 0; i < xv.numel(); ++i) {
        // Propagate NaN instead of flushing it to zero so numerical blowups
        // stay visible to the loss-side divergence check.
        out[i] = std::isnan(xv[i]) ? xv[i] : (xv[i] > S(0) ? xv[i] : S(0));
        margin = std::min(margin, static_cast<S>(std::abs(xv[i])));
    }
    const uint32_t ix = x.id;
    return x.tape->make_node(
        std::move(out),
        [ix](TapeT<S>& tp, uint32_t self) {
            const TensorT<S>& g = tp.grad(self);
            const TensorT<S>& xv2 = tp.value(ix);
            TensorT<S>& gx = tp.grad_accum(ix);
            for (size_t i = 0; i < g.numel(); ++i)
                if (xv2[i] > S(0)) gx[i] += g[i];
        },
        margin);
}

template <typename S>
VarT<S> gelu(VarT<S> x) {
    // tanh approximation, matching GPT-2.
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    const TensorT<S>& xv = x.val();
    TensorT<S> out(xv.shape());
    for (size_t i = 0; i < xv.numel(); ++i) {
        const double v = static_cast<double>(xv[i]);
        out[i] = static_cast<S>(0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))));
    }
    const uint32_t ix = x.id;
    return x.tape->make_node(std::move(out), [ix](TapeT<S>& tp, uint32_t self) {
        const TensorT<S>& g = tp.grad(self);
        const TensorT<S>& xv2 = tp.value(ix);
        TensorT<S>& gx = tp.grad_accum(ix);
        for (size_t i = 0; i < g.numel(); ++i) {
            const double v = static_cast<double>(xv2[i]);
            const double th = std::tanh(kC * (v + kA * v * v * v));
            const double d =
                0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * v * v);
            gx[i] += g[i] * static_cast<S>(d);
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Layer normalization over the last axis, population variance, then affine.
template <typename S>
VarT<S> layer_norm(VarT<S> x, VarT<S> gamma, VarT<S> beta, S eps) {
    TapeT<S>& t = detail::same_tape(x, gamma);
    detail::same_tape(x, beta);
    if (eps <= S(0)) throw ConfigError("layer_norm: eps must be positive");
    const TensorT<S>& xv = x.val();
    const size_t axis_len = xv.dim(xv.rank() - 1);
    if (gamma.val().numel() != axis_len || beta.val().numel() != axis_len)
        throw ShapeError("layer_norm: gamma/beta length must match normalized axis");
    const size_t slices = xv.numel() / axis_len;

    TensorT<S> xhat(xv.shape());
    std::vector<S> inv_std(slices);
    TensorT<S> out(xv.shape());
    const TensorT<S>& gv = gamma.val();
    const TensorT<S>& bv = beta.val();
    for (size_t s = 0; s < slices; ++s) {
        const S* row = xv.data() + s * axis_len;
        S mean = S(0);
        for (size_t i = 0; i < axis_len; ++i) mean += row[i];
        mean /= static_cast<S>(axis_len);
        S var = S(0);
        for (size_t i = 0; i < axis_len; ++i) {
            const S d = row[i] - mean;
            var += d * d;
        }
        var /= static_cast<S>(axis_len);
        const S inv = S(1) / static_cast<S>(std::sqrt(static_cast<double>(var + eps)));
        inv_std[s] = inv;
        S* xh = xhat.data() + s * axis_len;
        S* orow = out.data() + s * axis_len;
        for (size_t i = 0; i < axis_len; ++i) {
            xh[i] = (row[i] - mean) * inv;
            orow[i] = gv[i] * xh[i] + bv[i];
        }
    }

    const uint32_t ix = x.id, ig = gamma.id, ib = beta.id;
    return t.make_node(std::move(out), [ix, ig, ib, axis_len, slices, xhat = std::move(xhat),
                                        inv_std = std::move(inv_std)](TapeT<S>& tp, uint32_t self) {
        const TensorT<S>& g = tp.grad(self);
        const TensorT<S>& gv2 = tp.value(ig);
        TensorT<S>& gx = tp.grad_accum(ix);
        TensorT<S>& gg = tp.grad_accum(ig);
        TensorT<S>& gb = tp.grad_accum(ib);
        const S n = static_cast<S>(axis_len);
        std::vector<S> dxhat(axis_len);
        for (size_t s = 0; s < slices; ++s) {
            const S* grow = g.data() + s * axis_len;
            const S* xh = xhat.data() + s * axis_len;
            S sum_dxhat = S(0), sum_dxhat_xhat = S(0);
            for (size_t i = 0; i < axis_len; ++i) {
                dxhat[i] = grow[i] * gv2[i];
                sum_dxhat += dxhat[i];
                sum_dxhat_xhat += dxhat[i] * xh[i];
                gg[i] += grow[i] * xh[i];
                gb[i] += grow[i];
            }
            S* gxrow = gx.data() + s * axis_len;
            const S inv = inv_std[s];
            for (size_t i = 0; i < axis_len; ++i)
                gxrow[i] += inv * (dxhat[i] - sum_dxhat / n - xh[i] * sum_dxhat_xhat / n);
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

// Same-length 1-D cross-correlation with zero padding, odd kernel size.
// x: [N x C_in x T], kernels: [C_out x C_in x K], bias: [C_out].
template <typename S>
VarT<S> conv1d_same(VarT<S> x, VarT<S> kernels, VarT<S> bias) {
    TapeT<S>& t = detail::same_tape(x, kernels);
    detail::same_tape(x, bias);
    const TensorT<S>& xv = x.val();
    const TensorT<S>& kv = kernels.val();
    const TensorT<S>& bv = bias.val();
    if (xv.rank() != 3 || kv.rank() != 3 || bv.rank() != 1)
        throw ShapeError("conv1d_same: bad ranks x=" + xv.shape_string() +
                         " kernels=" + kv.shape_string());
    const size_t batch = xv.dim(0), c_in = xv.dim(1), time = xv.dim(2);
    const size_t c_out = kv.dim(0), ksize = kv.dim(2);
    if (kv.dim(1) != c_in || bv.dim(0) != c_out)
        throw ShapeError("conv1d_same: channel mismatch x=" + xv.shape_string() +
                         " kernels=" + kv.shape_string());
    if (ksize % 2 == 0) throw ConfigError("conv1d_same: kernel size must be odd");
    const size_t pad = (ksize - 1) / 2;

    TensorT<S> out({batch, c_out, time});
    for (size_t n = 0; n < batch; ++n)
        for (size_t co = 0; co < c_out; ++co) {
            S* orow = out.data() + (n * c_out + co) * time;
            for (size_t tt = 0; tt < time; ++tt) {
                S acc = bv[co];
                for (size_t ci = 0; ci < c_in; ++ci) {
                    const S* xrow = xv.data() + (n * c_in + ci) * time;
                    const S* krow = kv.data() + (co * c_in + ci) * ksize;
                    for (size_t kk = 0; kk < ksize; ++kk) {
                        const ptrdiff_t src = static_cast<ptrdiff_t>(tt + kk) -
                                              static_cast<ptrdiff_t>(pad);
                        if (src >= 0 && src < static_cast<ptrdiff_t>(time))
                            acc += xrow[src] * krow[kk];
                    }
                }
                orow[tt] = acc;
            }
        }

    const uint32_t ix = x.id, ik = kernels.id, ibias = bias.id;
    return t.make_node(std::move(out), [ix, ik, ibias, batch, c_in, c_out, time, ksize,
                                        pad](TapeT<S>& tp, uint32_t self) {
        const TensorT<S>& g = tp.grad(self);
        const TensorT<S>& xv2 = tp.value(ix);
        const TensorT<S>& kv2 = tp.value(ik);
        TensorT<S>& gx = tp.grad_accum(ix);
        TensorT<S>& gk = tp.grad_accum(ik);
        TensorT<S>& gb = tp.grad_accum(ibias);
        for (size_t n = 0; n < batch; ++n)
            for (size_t co = 0; co < c_out; ++co) {
                const S* grow = g.data() + (n * c_out + co) * time;
                for (size_t tt = 0; tt < time; ++tt) gb[co] += grow[tt];
                for (size_t ci = 0; ci < c_in; ++ci) {
                    const S* xrow = xv2.data() + (n * c_in + ci) * time;
                    const S* krow = kv2.data() + (co * c_in + ci) * ksize;
                    S* gxrow = gx.data() + (n * c_in + ci) * time;
                    S* gkrow = gk.data() + (co * c_in + ci) * ksize;
                    for (size_t tt = 0; tt < time; ++tt) {
                        const S gval = grow[tt];
                        if (gval == S(0)) continue;
                        for (size_t kk = 0; kk < ksize; ++kk) {
                            const ptrdiff_t src = static_cast<ptrdiff_t>(tt + kk) -
                                                  static_cast<ptrdiff_t>(pad);
                            if (src >= 0 && src < static_cast<ptrdiff_t>(time)) {
                                gxrow[src] += gval * krow[kk];
                                gkrow[kk] += gval * xrow[src];
                            }
                        }
                    }
                }
            }
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename S>
VarT<S> reshape(VarT<S> x, std::vector<size_t> shape) {
    TensorT<S> out = x.val().reshaped(shape);
    const uint32_t ix = x.id;
    return x.tape->make_node(std::move(out), [ix](TapeT<S>& tp, uint32_t self) {
        tp.grad_accum(ix).add_scaled(tp.grad(self).reshaped(tp.value(ix).shape()), S(1));
    });
}

// [tokens x D] -> [H x tokens x D/H]
template <typename S>
VarT<S> split_heads(VarT<S> x, size_t heads) {
    const TensorT<S>& xv = x.val();
    if (xv.rank() != 2 || xv.dim(1) % heads != 0)
        throw ShapeError("split_heads: width not divisible by head count");
    const size_t tokens = xv.dim(0), width = xv.dim(1), dh = width / heads;
    TensorT<S> out({heads, tokens, dh});
    for (size_t h = 0; h < heads; ++h)
        for (size_t tk = 0; tk < tokens; ++tk)
            for (size_t j = 0; j < dh; ++j) out.at3(h, tk, j) = xv.at2(tk, h * dh + j);
    const uint32_t ix = x.id;
    return x.tape->make_node(std::move(out), [ix, heads, tokens, dh](TapeT<S>& tp, uint32_t self) {
        const TensorT<S>& g = tp.grad(self);
        TensorT<S>& gx = tp.grad_accum(ix);
        for (size_t h = 0; h < heads; ++h)
            for (size_t tk = 0; tk < tokens; ++tk)
                for (size_t j = 0; j < dh; ++j) gx.at2(tk, h * dh + j) += g.at3(h, tk, j);
    });
}

// [H x tokens x dh] -> [tokens x H*dh]
template <typename S>
VarT<S> merge_heads(VarT<S> x) {
    const TensorT<S>& xv = x.val();
    if (xv.rank() != 3) throw ShapeError("merge_heads: expected rank-3 input");
    const size_t heads = xv.dim(0), tokens = xv.dim(1), dh = xv.dim(2);
    TensorT<S> out({tokens, heads * dh});
    for (size_t h = 0; h < heads; ++h)
        for (size_t tk = 0; tk < tokens; ++tk)
            for (size_t j = 0; j < dh; ++j) out.at2(tk, h * dh + j) = xv.at3(h, tk, j);
    const uint32_t ix = x.id;
    return x.tape->make_node(std::move(out), [ix, heads, tokens, dh](TapeT<S>& tp, uint32_t self) {
        const TensorT<S>& g = tp.grad(self);
        TensorT<S>& gx = tp.grad_accum(ix);
        for (size_t h = 0; h < heads; ++h)
            for (size_t tk = 0; tk < tokens; ++tk)
                for (size_t j = 0; j < dh; ++j) gx.at3(h, tk, j) += g.at2(tk, h * dh + j);
    });
}

// First `rows` rows of a rank-2 tensor.
template <typename S>
VarT<S> take_rows(VarT<S> x, size_t rows) {
    const TensorT<S>& xv = x.val();
    if (xv.rank() != 2 || rows > xv.dim(0))
        throw ShapeError("take_rows: cannot take " + std::to_string(rows) + " rows from " +
                         xv.shape_string());
    const size_t cols = xv.dim(1);
    TensorT<S> out({rows, cols});
    for (size_t i = 0; i < rows * cols; ++i) out[i] = xv[i];
    const uint32_t ix = x.id;
    return x.tape->make_node(std::move(out), [ix, rows, cols](TapeT<S>& tp, uint32_t self) {
        const TensorT<S>& g = tp.grad(self);
        TensorT<S>& gx = tp.grad_accum(ix);
        for (size_t i = 0; i < rows * cols; ++i) gx[i] += g[i];
    });
}

// [N x F x D] -> [N x D], picking one channel.
template <typename S>
VarT<S> select_channel(VarT<S> x, size_t channel) {
    const TensorT<S>& xv = x.val();
    if (xv.rank() != 3 || channel >= xv.dim(1))
        throw ShapeError("select_channel: bad channel for " + xv.shape_string());
    const size_t n0 = xv.dim(0), n1 = xv.dim(1), n2 = xv.dim(2);
    TensorT<S> out({n0, n2});
    for (size_t i = 0; i < n0; ++i)
        for (size_t j = 0; j < n2; ++j) out.at2(i, j) = xv.at3(i, channel, j);
    const uint32_t ix = x.id;
    return x.tape->make_node(std::move(out), [ix, channel, n0, n1, n2](TapeT<S>& tp, uint32_t self) {
        (void)n1;
        const TensorT<S>& g = tp.grad(self);
        TensorT<S>& gx = tp.grad_accum(ix);
        for (size_t i = 0; i < n0; ++i)
            for (size_t j = 0; j < n2; ++j) gx.at3(i, channel, j) += g.at2(i, j);
    });
}

// [N x F x D] -> [N x D], averaging channels.
template <typename S>
VarT<S> mean_channels(VarT<S> x) {
    const TensorT<S>& xv = x.val();
    if (xv.rank() != 3) throw ShapeError("mean_channels: expected rank-3 input");
    const size_t n0 = xv.dim(0), n1 = xv.dim(1), n2 = xv.dim(2);
    TensorT<S> out({n0, n2});
    const S inv = S(1) / static_cast<S>(n1);
    for (size_t i = 0; i < n0; ++i)
        for (size_t j = 0; j < n2; ++j) {
            S acc = S(0);
            for (size_t f = 0; f < n1; ++f) acc += xv.at3(i, f, j);
            out.at2(i, j) = acc * inv;
        }
    const uint32_t ix = x.id;
    return x.tape->make_node(std::move(out), [ix, n0, n1, n2, inv](TapeT<S>& tp, uint32_t self) {
        const TensorT<S>& g = tp.grad(self);
        TensorT<S>& gx = tp.grad_accum(ix);
        for (size_t i = 0; i < n0; ++i)
            for (size_t j = 0; j < n2; ++j) {
                const S gv = g.at2(i, j) * inv;
                for (size_t f = 0; f < n1; ++f) gx.at3(i, f, j) += gv;
            }
    });
}

// Pointwise channel expansion: s[N x T], weight[1 x F], bias[F] -> [N x F x T]
// with out[n,f,t] = s[n,t] * weight[0,f] + bias[f].
template <typename S>
VarT<S> expand_channels(VarT<S> s, VarT<S> weight, VarT<S> bias) {
    TapeT<S>& t = detail::same_tape(s, weight);
    detail::same_tape(s, bias);
    const TensorT<S>& sv = s.val();
    const TensorT<S>& wv = weight.val();
    const TensorT<S>& bv = bias.val();
    if (sv.rank() != 2 || wv.rank() != 2 || wv.dim(0) != 1 || bv.rank() != 1 ||
        bv.dim(0) != wv.dim(1))
        throw ShapeError("expand_channels: bad shapes s=" + sv.shape_string() +
                         " w=" + wv.shape_string() + " b=" + bv.shape_string());
    const size_t nodes = sv.dim(0), time = sv.dim(1), channels = wv.dim(1);
    TensorT<S> out({nodes, channels, time});
    for (size_t n = 0; n < nodes; ++n)
        for (size_t f = 0; f < channels; ++f) {
            const S wf = wv[f], bf = bv[f];
            const S* srow = sv.data() + n * time;
            S* orow = out.data() + (n * channels + f) * time;
            for (size_t tt = 0; tt < time; ++tt) orow[tt] = srow[tt] * wf + bf;
        }
    const uint32_t is = s.id, iw = weight.id, ib = bias.id;
    return t.make_node(std::move(out), [is, iw, ib, nodes, time, channels](TapeT<S>& tp,
                                                                           uint32_t self) {
        const TensorT<S>& g = tp.grad(self);
        const TensorT<S>& sv2 = tp.value(is);
        const TensorT<S>& wv2 = tp.value(iw);
        TensorT<S>& gs = tp.grad_accum(is);
        TensorT<S>& gw = tp.grad_accum(iw);
        TensorT<S>& gb = tp.grad_accum(ib);
        for (size_t n = 0; n < nodes; ++n)
            for (size_t f = 0; f < channels; ++f) {
                const S* grow = g.data() + (n * channels + f) * time;
                const S* srow = sv2.data() + n * time;
                S* gsrow = gs.data() + n * time;
                const S wf = wv2[f];
                S acc_w = S(0), acc_b = S(0);
                for (size_t tt = 0; tt < time; ++tt) {
                    gsrow[tt] += grow[tt] * wf;
                    acc_w += grow[tt] * srow[tt];
                    acc_b += grow[tt];
                }
                gw[f] += acc_w;
                gb[f] += acc_b;
            }
    });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

enum class AttnMask { none, causal };

// Scaled dot-product attention over [heads x tokens x d_head] inputs.
template <typename S>
VarT<S> softmax_attention(VarT<S> q, VarT<S> k, VarT<S> v, AttnMask mask) {
    TapeT<S>& t = detail::same_tape(q, k);
    detail::same_tape(q, v);
    const TensorT<S>& qv = q.val();
    if (qv.rank() != 3) throw ShapeError("softmax_attention: expected rank-3 inputs");
    qv.require_same_shape(k.val(), "softmax_attention q/k");
    qv.require_same_shape(v.val(), "softmax_attention q/v");
    const size_t heads = qv.dim(0), tokens = qv.dim(1), dh = qv.dim(2);
    const S inv_sqrt = S(1) / static_cast<S>(std::sqrt(static_cast<double>(dh)));

    TensorT<S> probs({heads, tokens, tokens});
    TensorT<S> out({heads, tokens, dh});
    const TensorT<S>& kv = k.val();
    const TensorT<S>& vv = v.val();
    std::vector<S> logits(tokens);
    for (size_t h = 0; h < heads; ++h) {
        const S* qh = qv.data() + h * tokens * dh;
        const S* kh = kv.data() + h * tokens * dh;
        const S* vh = vv.data() + h * tokens * dh;
        for (size_t i = 0; i < tokens; ++i) {
            const size_t limit = (mask == AttnMask::causal) ? i + 1 : tokens;
            const S* qrow = qh + i * dh;
            S max_logit = -std::numeric_limits<S>::infinity();
            for (size_t j = 0; j < limit; ++j) {
                const S* krow = kh + j * dh;
                S acc = S(0);
                for (size_t d = 0; d < dh; ++d) acc += qrow[d] * krow[d];
                logits[j] = acc * inv_sqrt;
                max_logit = std::max(max_logit, logits[j]);
            }
            S denom = S(0);
            S* prow = probs.data() + (h * tokens + i) * tokens;
            for (size_t j = 0; j < limit; ++j) {
                prow[j] = static_cast<S>(std::exp(static_cast<double>(logits[j] - max_logit)));
                denom += prow[j];
            }
            for (size_t j = 0; j < limit; ++j) prow[j] /= denom;
            for (size_t j = limit; j < tokens; ++j) prow[j] = S(0);
            S* orow = out.data() + (h * tokens + i) * dh;
            for (size_t d = 0; d < dh; ++d) orow[d] = S(0);
            for (size_t j = 0; j < limit; ++j) {
                const S p = prow[j];
                const S* vrow = vh + j * dh;
                for (size_t d = 0; d < dh; ++d) orow[d] += p * vrow[d];
            }
        }
    }

    const uint32_t iq = q.id, ik = k.id, iv = v.id;
    return t.make_node(std::move(out), [iq, ik, iv, heads, tokens, dh, inv_sqrt,
                                        probs = std::move(probs)](TapeT<S>& tp, uint32_t self) {
        const TensorT<S>& g = tp.grad(self);
        const TensorT<S>& qv2 = tp.value(iq);
        const TensorT<S>& kv2 = tp.value(ik);
        const TensorT<S>& vv2 = tp.value(iv);
        TensorT<S>& gq = tp.grad_accum(iq);
        TensorT<S>& gk = tp.grad_accum(ik);
        TensorT<S>& gv = tp.grad_accum(iv);
        std::vector<S> dprob(tokens), dscore(tokens);
        for (size_t h = 0; h < heads; ++h) {
            const size_t base = h * tokens * dh;
            for (size_t i = 0; i < tokens; ++i) {
                const S* grow = g.data() + base + i * dh;
                const S* prow = probs.data() + (h * tokens + i) * tokens;
                // dV += P^T g ; dP = g V^T
                S dot = S(0);
                for (size_t j = 0; j < tokens; ++j) {
                    const S p = prow[j];
                    const S* vrow = vv2.data() + base + j * dh;
                    S acc = S(0);
                    for (size_t d = 0; d < dh; ++d) acc += grow[d] * vrow[d];
                    dprob[j] = acc;
                    dot += acc * p;
                    if (p != S(0)) {
                        S* gvrow = gv.data() + base + j * dh;
                        for (size_t d = 0; d < dh; ++d) gvrow[d] += p * grow[d];
                    }
                }
                // dS = P o (dP - sum_j dP_j P_j), then dQ += dS K / sqrt, dK += dS^T Q / sqrt
                const S* qrow = qv2.data() + base + i * dh;
                S* gqrow = gq.data() + base + i * dh;
                for (size_t j = 0; j < tokens; ++j) {
                    const S p = prow[j];
                    if (p == S(0)) continue;
                    const S ds = p * (dprob[j] - dot) * inv_sqrt;
                    const S* krow = kv2.data() + base + j * dh;
                    S* gkrow = gk.data() + base + j * dh;
                    for (size_t d = 0; d < dh; ++d) {
                        gqrow[d] += ds * krow[d];
                        gkrow[d] += ds * qrow[d];
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

// Inverted dropout. Inference mode (or p == 0) is exactly the identity.
template <typename S>
VarT<S> dropout(VarT<S> x, double p, bool training, RngStream* rng) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: probability must be in [0, 1)");
    if (!training || p == 0.0) return x;
    if (rng == nullptr) throw ConfigError("dropout: training mode requires an RNG stream");
    const TensorT<S>& xv = x.val();
    const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
    TensorT<S> mask(xv.shape());
    TensorT<S> out(xv.shape());
    for (size_t i = 0; i < xv.numel(); ++i) {
        mask[i] = rng->uniform() < p ? S(0) : keep_scale;
        out[i] = xv[i] * mask[i];
    }
    const uint32_t ix = x.id;
    return x.tape->make_node(std::move(out),
                             [ix, mask = std::move(mask)](TapeT<S>& tp, uint32_t self) {
                                 const TensorT<S>& g = tp.grad(self);
                                 TensorT<S>& gx = tp.grad_accum(ix);
                                 for (size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * mask[i];
                             });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean absolute error against a constant target; subgradient 0 at exact ties.
template <typename S>
VarT<S> mean_abs_error(VarT<S> pred, const TensorT<S>& target) {
    const TensorT<S>& pv = pred.val();
    pv.require_same_shape(target, "mean_abs_error");
    const size_t count = pv.numel();
    S total = S(0);
    S margin = TapeT<S>::no_kink();
    for (size_t i = 0; i < count; ++i) {
        const S d = pv[i] - target[i];
        total += static_cast<S>(std::abs(d));
        margin = std::min(margin, static_cast<S>(std::abs(d)));
    }
    total /= static_cast<S>(count);
    const uint32_t ip = pred.id;
    return pred.tape->make_node(
        TensorT<S>({1}, {total}),
        [ip, target, count](TapeT<S>& tp, uint32_t self) {
            const S g = tp.grad(self)[0] / static_cast<S>(count);
            const TensorT<S>& pv2 = tp.value(ip);
            TensorT<S>& gp = tp.grad_accum(ip);
            for (size_t i = 0; i < count; ++i) {
                const S d = pv2[i] - target[i];
                if (d > S(0))
                    gp[i] += g;
                else if (d < S(0))
                    gp[i] -= g;
            }
        },
        margin);
}

// max(x, floor) built as a shifted ReLU so the kink is tracked.
template <typename S>
VarT<S> clamp_floor(VarT<S> x, S floor) {
    return add_scalar(relu(add_scalar(x, -floor)), floor);
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

template <typename S>
struct GradCheckOptions {
    S step = static_cast<S>(1e-5);
    size_t max_coords = 0;  // 0 = check every coordinate
    uint64_t seed = 12345;  // used when sampling coordinates
};

template <typename S>
struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_parameter;
    size_t coords_checked = 0;
};

// Compares reverse-mode gradients against central finite differences
// (f(p+h) - f(p-h)) / 2h. `loss_fn` must rebuild the full forward pass from
// the current parameter values on the tape it is given, binding every
// parameter it uses via tape.param().
template <typename S, typename LossFn>
GradCheckReport<S> grad_check(LossFn&& loss_fn, std::span<ParameterT<S>* const> params,
                              GradCheckOptions<S> opts = {}) {
    auto eval = [&](TapeT<S>& tape) -> VarT<S> {
        VarT<S> root = loss_fn(tape);
        if (root.val().numel() != 1)
            throw ShapeError("grad_check: loss function must return a scalar");
        return root;
    };

    TapeT<S> tape;
    VarT<S> root = eval(tape);
    if (!root.val().all_finite()) throw NumericError("grad_check: loss is not finite");
    tape.backward(root);

    std::vector<TensorT<S>> analytic(params.size());
    for (size_t pi = 0; pi < params.size(); ++pi) {
        const TensorT<S>& g = tape.param_grad(*params[pi]);
        analytic[pi] = g.empty() ? TensorT<S>::zeros(params[pi]->value.shape()) : g;
        if (!analytic[pi].all_finite())
            throw NumericError("grad_check: non-finite analytic gradient for parameter '" +
                               params[pi]->name + "'");
    }

    std::vector<std::pair<size_t, size_t>> coords;
    size_t total = 0;
    for (const auto* p : params) total += p->value.numel();
    if (opts.max_coords == 0 || opts.max_coords >= total) {
        for (size_t pi = 0; pi < params.size(); ++pi)
            for (size_t ei = 0; ei < params[pi]->value.numel(); ++ei) coords.emplace_back(pi, ei);
    } else {
        RngStream rng(opts.seed);
        for (size_t c = 0; c < opts.max_coords; ++c) {
            uint64_t flat = rng.below(total);
            size_t pi = 0;
            while (flat >= params[pi]->value.numel()) {
                flat -= params[pi]->value.numel();
                ++pi;
            }
            coords.emplace_back(pi, static_cast<size_t>(flat));
        }
    }

    GradCheckReport<S> report;
    report.coords_checked = coords.size();
    const double h = static_cast<double>(opts.step);
    for (const auto& [pi, ei] : coords) {
        ParameterT<S>& p = *params[pi];
        const S saved = p.value[ei];
        p.value[ei] = saved + opts.step;
        TapeT<S> tp1;
        const double f_plus = static_cast<double>(eval(tp1).val()[0]);
        p.value[ei] = saved - opts.step;
        TapeT<S> tp2;
        const double f_minus = static_cast<double>(eval(tp2).val()[0]);
        p.value[ei] = saved;
        if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
            throw NumericError("grad_check: non-finite loss while perturbing parameter '" +
                               p.name + "'");
        const double numeric = (f_plus - f_minus) / (2.0 * h);
        const double exact = static_cast<double>(analytic[pi][ei]);
        const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-8});
        const double rel = std::abs(exact - numeric) / denom;
        if (rel > report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_parameter = p.name;
        }
    }
    return report;
}

}  // namespace flowcast::ag
