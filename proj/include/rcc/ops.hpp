#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <utility>
#include <vector>

#include "rcc/tensor.hpp"

// Differentiable dense primitives. Every op builds exactly the graph needed
// for reverse mode when grad mode is on and at least one input requires grad;
// otherwise it is a plain kernel with no retained state. Shapes are checked
// strictly; there is no implicit broadcasting.

namespace rcc {

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using EMap = Eigen::Map<EMat<T>>;
template <class T>
using ECMap = Eigen::Map<const EMat<T>>;
template <class T>
using EStride = Eigen::Map<EMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ECStride = Eigen::Map<const EMat<T>, 0, Eigen::OuterStride<>>;

template <class T>
inline bool track_grad(std::initializer_list<const Tensor<T>*> inputs) {
    if (!grad_mode_flag()) return false;
    for (const Tensor<T>* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.value().size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (track_grad<T>({&a, &b})) {
        out.set_requires_grad(true);
        out.ptr()->parents = {a.ptr(), b.ptr()};
        out.ptr()->backward_fn = [an = a.ptr(), bn = b.ptr()](TensorNode<T>& o,
                                                              LeafGrads<T>* sink) {
            for (auto& pn : {an, bn}) {
                if (!pn->requires_grad) continue;
                auto& g = pn->grad_buffer(sink);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
            }
        };
    }
    return out;
}

// x: [m, n] plus a length-n vector added to every row.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
    const int m = x.rows(), n = x.cols();
    if (b.numel() != n)
        throw ShapeError("add_bias: bias length " + std::to_string(b.numel()) +
                         " vs row width " + std::to_string(n));
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out.data()[i * n + j] = x.data()[i * n + j] + b.data()[j];
    if (track_grad<T>({&x, &b})) {
        out.set_requires_grad(true);
        out.ptr()->parents = {x.ptr(), b.ptr()};
        out.ptr()->backward_fn = [xn = x.ptr(), bn = b.ptr(), m, n](TensorNode<T>& o,
                                                                    LeafGrads<T>* sink) {
            if (xn->requires_grad) {
                auto& g = xn->grad_buffer(sink);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
            }
            if (bn->requires_grad) {
                auto& g = bn->grad_buffer(sink);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) g[j] += o.grad[i * n + j];
            }
        };
    }
    return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.value().size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (track_grad<T>({&a, &b})) {
        out.set_requires_grad(true);
        out.ptr()->parents = {a.ptr(), b.ptr()};
        out.ptr()->backward_fn = [an = a.ptr(), bn = b.ptr()](TensorNode<T>& o,
                                                              LeafGrads<T>* sink) {
            if (an->requires_grad) {
                auto& g = an->grad_buffer(sink);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                auto& g = bn->grad_buffer(sink);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * an->value[i];
            }
        };
    }
    return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const std::size_t n = a.value().size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    if (track_grad<T>({&a})) {
        out.set_requires_grad(true);
        out.ptr()->parents = {a.ptr()};
        out.ptr()->backward_fn = [an = a.ptr(), c](TensorNode<T>& o, LeafGrads<T>* sink) {
            auto& g = an->grad_buffer(sink);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * c;
        };
    }
    return out;
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros({1});
    double acc = 0.0;
    for (const T& v : a.value()) acc += static_cast<double>(v);
    out.data()[0] = static_cast<T>(acc);
    if (track_grad<T>({&a})) {
        out.set_requires_grad(true);
        out.ptr()->parents = {a.ptr()};
        out.ptr()->backward_fn = [an = a.ptr()](TensorNode<T>& o, LeafGrads<T>* sink) {
            auto& g = an->grad_buffer(sink);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0];
        };
    }
    return out;
}

// Exact GELU, x * Phi(x).
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const std::size_t n = x.value().size();
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = static_cast<double>(x.data()[i]);
        out.data()[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
    }
    if (track_grad<T>({&x})) {
        out.set_requires_grad(true);
        out.ptr()->parents = {x.ptr()};
        out.ptr()->backward_fn = [xn = x.ptr()](TensorNode<T>& o, LeafGrads<T>* sink) {
            constexpr double inv_sqrt2pi = 0.39894228040143267794;
            auto& g = xn->grad_buffer(sink);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double v = static_cast<double>(xn->value[i]);
                const double cdf = 0.5 * (1.0 + std::erf(v * 0.70710678118654752440));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                g[i] += o.grad[i] * static_cast<T>(cdf + v * pdf);
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul / normalization
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw ShapeError("matmul: expects 2-D operands, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros({m, n});
    EMap<T>(out.data(), m, n).noalias() =
        ECMap<T>(a.data(), m, k) * ECMap<T>(b.data(), k, n);
    if (track_grad<T>({&a, &b})) {
        out.set_requires_grad(true);
        out.ptr()->parents = {a.ptr(), b.ptr()};
        out.ptr()->backward_fn = [an = a.ptr(), bn = b.ptr(), m, k, n](
                                     TensorNode<T>& o, LeafGrads<T>* sink) {
            ECMap<T> g(o.grad.data(), m, n);
            if (an->requires_grad) {
                EMap<T> ga(an->grad_buffer(sink).data(), m, k);
                ga.noalias() += g * ECMap<T>(bn->value.data(), k, n).transpose();
            }
            if (bn->requires_grad) {
                EMap<T> gb(bn->grad_buffer(sink).data(), k, n);
                gb.noalias() += ECMap<T>(an->value.data(), m, k).transpose() * g;
            }
        };
    }
    return out;
}

// Zero-mean unit-variance normalization over the last axis, then affine.
template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                    T eps) {
    if (eps <= T(0)) throw ParamError("layernorm: eps must be positive");
    const int m = x.rows(), n = x.cols();
    if (gain.numel() != n || bias.numel() != n)
        throw ShapeError("layernorm: gain/bias must match last dimension " +
                         std::to_string(n));
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    std::vector<T> xhat;
    std::vector<T> inv_std(static_cast<std::size_t>(m));
    const bool needs_grad = track_grad<T>({&x, &gain, &bias});
    xhat.resize(static_cast<std::size_t>(m) * n);
    for (int i = 0; i < m; ++i) {
        const T* row = x.data() + static_cast<std::size_t>(i) * n;
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += row[j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= n;
        const T s = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        inv_std[static_cast<std::size_t>(i)] = s;
        for (int j = 0; j < n; ++j) {
            const T xh = static_cast<T>((row[j] - mean)) * s;
            xhat[static_cast<std::size_t>(i) * n + j] = xh;
            out.data()[static_cast<std::size_t>(i) * n + j] = xh * gain.data()[j] + bias.data()[j];
        }
    }
    if (needs_grad) {
        out.set_requires_grad(true);
        out.ptr()->parents = {x.ptr(), gain.ptr(), bias.ptr()};
        out.ptr()->backward_fn = [xn = x.ptr(), gn = gain.ptr(), bn = bias.ptr(),
                                  xhat = std::move(xhat), inv_std = std::move(inv_std), m,
                                  n](TensorNode<T>& o, LeafGrads<T>* sink) {
            if (gn->requires_grad) {
                auto& gg = gn->grad_buffer(sink);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        gg[j] += o.grad[static_cast<std::size_t>(i) * n + j] *
                                 xhat[static_cast<std::size_t>(i) * n + j];
            }
            if (bn->requires_grad) {
                auto& gb = bn->grad_buffer(sink);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        gb[j] += o.grad[static_cast<std::size_t>(i) * n + j];
            }
            if (xn->requires_grad) {
                auto& gx = xn->grad_buffer(sink);
                for (int i = 0; i < m; ++i) {
                    const std::size_t off = static_cast<std::size_t>(i) * n;
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int j = 0; j < n; ++j) {
                        const double d = static_cast<double>(o.grad[off + j]) *
                                         gn->value[static_cast<std::size_t>(j)];
                        sum_dxhat += d;
                        sum_dxhat_xhat += d * xhat[off + j];
                    }
                    const double mean_dxhat = sum_dxhat / n;
                    const double mean_dxhat_xhat = sum_dxhat_xhat / n;
                    const double s = inv_std[static_cast<std::size_t>(i)];
                    for (int j = 0; j < n; ++j) {
                        const double d = static_cast<double>(o.grad[off + j]) *
                                         gn->value[static_cast<std::size_t>(j)];
                        gx[off + j] += static_cast<T>(
                            s * (d - mean_dxhat - xhat[off + j] * mean_dxhat_xhat));
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// lookup / sequence-axis ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> embedding(const Tensor<T>& table, const TokenSeq& ids) {
    if (table.ndim() != 2) throw ShapeError("embedding: table must be 2-D");
    const int v = table.dim(0), d = table.dim(1);
    const int t = static_cast<int>(ids.size());
    Tensor<T> out = Tensor<T>::zeros({t, d});
    for (int i = 0; i < t; ++i) {
        const TokenId id = ids[static_cast<std::size_t>(i)];
        if (id < 0 || id >= v)
            throw ParamError("embedding: token id " + std::to_string(id) +
                             " outside vocab of " + std::to_string(v));
        const T* src = table.data() + static_cast<std::size_t>(id) * d;
        T* dst = out.data() + static_cast<std::size_t>(i) * d;
        std::copy(src, src + d, dst);
    }
    if (track_grad<T>({&table})) {
        out.set_requires_grad(true);
        out.ptr()->parents = {table.ptr()};
        out.ptr()->backward_fn = [tn = table.ptr(), ids, d](TensorNode<T>& o,
                                                            LeafGrads<T>* sink) {
            auto& g = tn->grad_buffer(sink);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                T* dst = g.data() + static_cast<std::size_t>(ids[i]) * d;
                const T* src = o.grad.data() + i * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        };
    }
    return out;
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<int>& indices) {
    if (x.ndim() != 2) throw ShapeError("gather_rows: input must be 2-D");
    const int m = x.dim(0), d = x.dim(1);
    const int k = static_cast<int>(indices.size());
    Tensor<T> out = Tensor<T>::zeros({k, d});
    for (int i = 0; i < k; ++i) {
        const int r = indices[static_cast<std::size_t>(i)];
        if (r < 0 || r >= m)
            throw ShapeError("gather_rows: row " + std::to_string(r) + " out of " +
                             std::to_string(m));
        std::copy(x.data() + static_cast<std::size_t>(r) * d,
                  x.data() + static_cast<std::size_t>(r + 1) * d,
                  out.data() + static_cast<std::size_t>(i) * d);
    }
    if (track_grad<T>({&x})) {
        out.set_requires_grad(true);
        out.ptr()->parents = {x.ptr()};
        out.ptr()->backward_fn = [xn = x.ptr(), indices, d](TensorNode<T>& o,
                                                            LeafGrads<T>* sink) {
            auto& g = xn->grad_buffer(sink);
            for (std::size_t i = 0; i < indices.size(); ++i) {
                T* dst = g.data() + static_cast<std::size_t>(indices[i]) * d;
                const T* src = o.grad.data() + i * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        };
    }
    return out;
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, int r0, int r1) {
    if (x.ndim() != 2) throw ShapeError("slice_rows: input must be 2-D");
    const int m = x.dim(0), d = x.dim(1);
    if (r0 < 0 || r1 < r0 || r1 > m)
        throw ShapeError("slice_rows: range [" + std::to_string(r0) + "," +
                         std::to_string(r1) + ") out of " + std::to_string(m) + " rows");
    const int k = r1 - r0;
    Tensor<T> out = Tensor<T>::zeros({k, d});
    std::copy(x.data() + static_cast<std::size_t>(r0) * d,
              x.data() + static_cast<std::size_t>(r1) * d, out.data());
    if (track_grad<T>({&x})) {
        out.set_requires_grad(true);
        out.ptr()->parents = {x.ptr()};
        out.ptr()->backward_fn = [xn = x.ptr(), r0, k, d](TensorNode<T>& o,
                                                          LeafGrads<T>* sink) {
            auto& g = xn->grad_buffer(sink);
            for (std::size_t i = 0; i < static_cast<std::size_t>(k) * d; ++i)
                g[static_cast<std::size_t>(r0) * d + i] += o.grad[i];
        };
    }
    return out;
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const int d = parts.front().cols();
    int total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.cols() != d)
            throw ShapeError("concat_rows: all parts must be 2-D with equal width");
        total += p.rows();
    }
    Tensor<T> out = Tensor<T>::zeros({total, d});
    int row = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.numel(),
                  out.data() + static_cast<std::size_t>(row) * d);
        row += p.rows();
    }
    bool needs = false;
    if (grad_mode_flag())
        for (const auto& p : parts) needs = needs || p.requires_grad();
    if (needs) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorNode<T>>> ps;
        ps.reserve(parts.size());
        for (const auto& p : parts) ps.push_back(p.ptr());
        out.ptr()->parents = ps;
        out.ptr()->backward_fn = [ps, d](TensorNode<T>& o, LeafGrads<T>* sink) {
            std::size_t off = 0;
            for (const auto& pn : ps) {
                const std::size_t len = pn->value.size();
                if (pn->requires_grad) {
                    auto& g = pn->grad_buffer(sink);
                    for (std::size_t i = 0; i < len; ++i) g[i] += o.grad[off + i];
                }
                off += len;
            }
        };
    }
    return out;
}

// out = x with rows [row0, row0 + y.rows) incremented by y. Rows outside the
// range pass through untouched; with an empty y this is the identity.
template <class T>
Tensor<T> add_rows_at(const Tensor<T>& x, const Tensor<T>& y, int row0) {
    if (x.ndim() != 2 || y.ndim() != 2 || x.cols() != y.cols())
        throw ShapeError("add_rows_at: 2-D inputs of equal width required");
    if (y.rows() == 0) return x;
    if (row0 < 0 || row0 + y.rows() > x.rows())
        throw ShapeError("add_rows_at: target range out of bounds");
    const int d = x.cols();
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    std::copy(x.data(), x.data() + x.numel(), out.data());
    const std::size_t off = static_cast<std::size_t>(row0) * d;
    for (std::size_t i = 0; i < static_cast<std::size_t>(y.numel()); ++i)
        out.data()[off + i] += y.data()[i];
    if (track_grad<T>({&x, &y})) {
        out.set_requires_grad(true);
        out.ptr()->parents = {x.ptr(), y.ptr()};
        out.ptr()->backward_fn = [xn = x.ptr(), yn = y.ptr(), off](TensorNode<T>& o,
                                                                   LeafGrads<T>* sink) {
            if (xn->requires_grad) {
                auto& g = xn->grad_buffer(sink);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
            }
            if (yn->requires_grad) {
                auto& g = yn->grad_buffer(sink);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[off + i];
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// attention / positional
// ---------------------------------------------------------------------------

// Multi-head scaled dot-product attention with an explicit additive mask of
// shape [nq, nk] (0 where allowed, a large negative value where blocked).
// q/k/v are [nq|nk, d] with heads packed along the feature axis.
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const Tensor<T>& mask, int n_heads) {
    const int nq = q.rows(), nk = k.rows(), d = q.cols();
    if (k.cols() != d || v.cols() != d || v.rows() != nk)
        throw ShapeError("attention: q/k/v widths or kv lengths disagree");
    if (n_heads <= 0 || d % n_heads != 0)
        throw ShapeError("attention: feature width not divisible by head count");
    if (mask.rows() != nq || mask.cols() != nk)
        throw ShapeError("attention: mask must be [nq, nk]");
    if (mask.requires_grad())
        throw ParamError("attention: mask is not differentiable");
    const int hd = d / n_heads;
    const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

    Tensor<T> out = Tensor<T>::zeros({nq, d});
    const bool needs_grad = track_grad<T>({&q, &k, &v});
    // probs saved per head for the backward pass
    std::vector<T> probs(static_cast<std::size_t>(n_heads) * nq * nk);
    EMat<T> scores(nq, nk);
    for (int h = 0; h < n_heads; ++h) {
        ECStride<T> qh(q.data() + static_cast<std::size_t>(h) * hd, nq, hd,
                       Eigen::OuterStride<>(d));
        ECStride<T> kh(k.data() + static_cast<std::size_t>(h) * hd, nk, hd,
                       Eigen::OuterStride<>(d));
        ECStride<T> vh(v.data() + static_cast<std::size_t>(h) * hd, nk, hd,
                       Eigen::OuterStride<>(d));
        scores.noalias() = qh * kh.transpose();
        scores *= sc;
        scores += ECMap<T>(mask.data(), nq, nk);
        // row softmax
        T* p = probs.data() + static_cast<std::size_t>(h) * nq * nk;
        for (int i = 0; i < nq; ++i) {
            T mx = scores(i, 0);
            for (int j = 1; j < nk; ++j) mx = std::max(mx, scores(i, j));
            double z = 0.0;
            for (int j = 0; j < nk; ++j) {
                const T e = std::exp(scores(i, j) - mx);
                p[static_cast<std::size_t>(i) * nk + j] = e;
                z += static_cast<double>(e);
            }
            const T inv = static_cast<T>(1.0 / z);
            for (int j = 0; j < nk; ++j) p[static_cast<std::size_t>(i) * nk + j] *= inv;
        }
        EStride<T> oh(out.data() + static_cast<std::size_t>(h) * hd, nq, hd,
                      Eigen::OuterStride<>(d));
        oh.noalias() = ECMap<T>(p, nq, nk) * vh;
    }

    if (needs_grad) {
        out.set_requires_grad(true);
        out.ptr()->parents = {q.ptr(), k.ptr(), v.ptr()};
        out.ptr()->backward_fn = [qn = q.ptr(), kn = k.ptr(), vn = v.ptr(),
                                  probs = std::move(probs), n_heads, hd, d, nq, nk,
                                  sc](TensorNode<T>& o, LeafGrads<T>* sink) {
            std::vector<T>* gq = qn->requires_grad ? &qn->grad_buffer(sink) : nullptr;
            std::vector<T>* gk = kn->requires_grad ? &kn->grad_buffer(sink) : nullptr;
            std::vector<T>* gv = vn->requires_grad ? &vn->grad_buffer(sink) : nullptr;
            EMat<T> dp(nq, nk), ds(nq, nk);
            for (int h = 0; h < n_heads; ++h) {
                ECMap<T> ph(probs.data() + static_cast<std::size_t>(h) * nq * nk, nq, nk);
                ECStride<T> go(o.grad.data() + static_cast<std::size_t>(h) * hd, nq, hd,
                               Eigen::OuterStride<>(d));
                ECStride<T> qh(qn->value.data() + static_cast<std::size_t>(h) * hd, nq, hd,
                               Eigen::OuterStride<>(d));
                ECStride<T> kh(kn->value.data() + static_cast<std::size_t>(h) * hd, nk, hd,
                               Eigen::OuterStride<>(d));
                ECStride<T> vh(vn->value.data() + static_cast<std::size_t>(h) * hd, nk, hd,
                               Eigen::OuterStride<>(d));
                if (gv) {
                    EStride<T> gvh(gv->data() + static_cast<std::size_t>(h) * hd, nk, hd,
                                   Eigen::OuterStride<>(d));
                    gvh.noalias() += ph.transpose() * go;
                }
                if (gq || gk) {
                    dp.noalias() = go * vh.transpose();
                    // softmax backward: ds = p .* (dp - rowsum(dp .* p))
                    for (int i = 0; i < nq; ++i) {
                        double rowsum = 0.0;
                        for (int j = 0; j < nk; ++j)
                            rowsum += static_cast<double>(dp(i, j)) * ph(i, j);
                        for (int j = 0; j < nk; ++j)
                            ds(i, j) = ph(i, j) * (dp(i, j) - static_cast<T>(rowsum));
                    }
                    ds *= sc;
                    if (gq) {
                        EStride<T> gqh(gq->data() + static_cast<std::size_t>(h) * hd, nq,
                                       hd, Eigen::OuterStride<>(d));
                        gqh.noalias() += ds * kh;
                    }
                    if (gk) {
                        EStride<T> gkh(gk->data() + static_cast<std::size_t>(h) * hd, nk,
                                       hd, Eigen::OuterStride<>(d));
                        gkh.noalias() += ds.transpose() * qh;
                    }
                }
            }
        };
    }
    return out;
}

// Rotary position encoding applied head-wise to x [n, d], with an explicit
// absolute position per row. Pairs (2i, 2i+1) within each head are rotated by
// pos * base^(-2i/hd).
template <class T>
Tensor<T> rope(const Tensor<T>& x, const std::vector<int>& positions, int n_heads,
               double base = 10000.0) {
    const int n = x.rows(), d = x.cols();
    if (static_cast<int>(positions.size()) != n)
        throw ShapeError("rope: one position per row required");
    if (n_heads <= 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0)
        throw ShapeError("rope: head width must be even");
    const int hd = d / n_heads;
    std::vector<double> inv_freq(static_cast<std::size_t>(hd / 2));
    for (int i = 0; i < hd / 2; ++i)
        inv_freq[static_cast<std::size_t>(i)] =
            std::pow(base, -2.0 * i / static_cast<double>(hd));

    auto rotate = [n, d, hd, n_heads](const T* src, T* dst, const std::vector<int>& pos,
                                      const std::vector<double>& freq, bool inverse) {
        for (int r = 0; r < n; ++r) {
            const double p = static_cast<double>(pos[static_cast<std::size_t>(r)]);
            for (int h = 0; h < n_heads; ++h) {
                const std::size_t off = static_cast<std::size_t>(r) * d +
                                        static_cast<std::size_t>(h) * hd;
                for (int i = 0; i < hd / 2; ++i) {
                    const double th = p * freq[static_cast<std::size_t>(i)];
                    const T c = static_cast<T>(std::cos(th));
                    const T s = static_cast<T>(inverse ? -std::sin(th) : std::sin(th));
                    const T x0 = src[off + 2 * i], x1 = src[off + 2 * i + 1];
                    dst[off + 2 * i] += x0 * c - x1 * s;
                    dst[off + 2 * i + 1] += x0 * s + x1 * c;
                }
            }
        }
    };

    Tensor<T> out = Tensor<T>::zeros(x.shape());
    rotate(x.data(), out.data(), positions, inv_freq, false);
    if (track_grad<T>({&x})) {
        out.set_requires_grad(true);
        out.ptr()->parents = {x.ptr()};
        out.ptr()->backward_fn = [xn = x.ptr(), positions, inv_freq,
                                  rotate](TensorNode<T>& o, LeafGrads<T>* sink) {
            rotate(o.grad.data(), xn->grad_buffer(sink).data(), positions, inv_freq, true);
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

// Mean of -log softmax(logits)[target] over positions whose mask is nonzero.
// Masked-out positions contribute nothing to the value or the gradient.
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const TokenSeq& targets,
                                const std::vector<int>& mask) {
    if (logits.ndim() != 2) throw ShapeError("softmax_cross_entropy: logits must be 2-D");
    const int p = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != p || static_cast<int>(mask.size()) != p)
        throw ShapeError("softmax_cross_entropy: targets/mask must match positions");
    int count = 0;
    for (int i = 0; i < p; ++i)
        if (mask[static_cast<std::size_t>(i)]) ++count;
    if (count == 0)
        throw EmptyLossError("softmax_cross_entropy: empty loss, mask selects no position");
    for (int i = 0; i < p; ++i) {
        const TokenId t = targets[static_cast<std::size_t>(i)];
        if (t < 0 || t >= v)
            throw ParamError("softmax_cross_entropy: target id out of vocab");
    }

    const bool needs_grad = track_grad<T>({&logits});
    std::vector<T> probs;
    if (needs_grad) probs.resize(static_cast<std::size_t>(p) * v);
    double loss = 0.0;
    std::vector<T> rowbuf(static_cast<std::size_t>(v));
    for (int i = 0; i < p; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        const T* row = logits.data() + static_cast<std::size_t>(i) * v;
        T mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < v; ++j) {
            const T e = std::exp(row[j] - mx);
            rowbuf[static_cast<std::size_t>(j)] = e;
            z += static_cast<double>(e);
        }
        if (needs_grad) {
            const T inv = static_cast<T>(1.0 / z);
            for (int j = 0; j < v; ++j)
                probs[static_cast<std::size_t>(i) * v + j] =
                    rowbuf[static_cast<std::size_t>(j)] * inv;
        }
        if (mask[static_cast<std::size_t>(i)]) {
            const TokenId t = targets[static_cast<std::size_t>(i)];
            loss -= std::log(static_cast<double>(
                        rowbuf[static_cast<std::size_t>(t)]) / z);
        }
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss / count));
    if (needs_grad) {
        out.set_requires_grad(true);
        out.ptr()->parents = {logits.ptr()};
        out.ptr()->backward_fn = [ln = logits.ptr(), targets, mask,
                                  probs = std::move(probs), p, v,
                                  count](TensorNode<T>& o, LeafGrads<T>* sink) {
            auto& g = ln->grad_buffer(sink);
            const T go = o.grad[0] / static_cast<T>(count);
            for (int i = 0; i < p; ++i) {
                if (!mask[static_cast<std::size_t>(i)]) continue;
                const std::size_t off = static_cast<std::size_t>(i) * v;
                for (int j = 0; j < v; ++j) g[off + j] += go * probs[off + j];
                g[off + targets[static_cast<std::size_t>(i)]] -= go;
            }
        };
    }
    return out;
}

// Additive causal mask: 0 at or below the diagonal, -1e9 above.
template <class T>
Tensor<T> causal_mask(int n) {
    Tensor<T> m = Tensor<T>::zeros({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            m.data()[static_cast<std::size_t>(i) * n + j] = static_cast<T>(-1e9);
    return m;
}

}  // namespace rcc
