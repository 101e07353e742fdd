#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <vector>

#include "advlab/autograd.hpp"
#include "advlab/tensor.hpp"

// Differentiable operations. Forward paths allocate fresh outputs; when a
// GradTape is active and an input is tracked, a backward closure is recorded.
// Broadcasting is restricted to scalar<->tensor and equal shapes.

namespace advlab {

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

// C (+)= op(A) * op(B) with row-major storage.
template <typename T>
void gemm(const T* a, int ar, int ac, bool ta, const T* b, int br, int bc, bool tb,
          T* c, bool accumulate) {
    CMapRM<T> A(a, ar, ac);
    CMapRM<T> B(b, br, bc);
    const int m = ta ? ac : ar;
    const int n = tb ? br : bc;
    MapRM<T> C(c, m, n);
    if (!ta && !tb) {
        if (accumulate) C.noalias() += A * B; else C.noalias() = A * B;
    } else if (ta && !tb) {
        if (accumulate) C.noalias() += A.transpose() * B; else C.noalias() = A.transpose() * B;
    } else if (!ta && tb) {
        if (accumulate) C.noalias() += A * B.transpose(); else C.noalias() = A * B.transpose();
    } else {
        if (accumulate) C.noalias() += A.transpose() * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    }
}

inline int conv_out_extent(int in, int k, int stride, int pad, const char* what) {
    const int span = in + 2 * pad - k;
    if (span < 0 || span % stride != 0)
        throw ShapeError(cat("conv: ", what, "=", in, " with kernel ", k, " stride ", stride,
                             " pad ", pad, " gives a non-integer output extent"));
    return span / stride + 1;
}

// cols[(c*kh+ki)*kw+kj, oh*ow_count+ow] = img[c, oh*stride-pad+ki, ow*stride-pad+kj]
template <typename T>
void im2col(const T* img, int ch, int h, int w, int kh, int kw, int stride, int pad,
            int oh_count, int ow_count, T* cols) {
    for (int c = 0; c < ch; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                T* row = cols + static_cast<int64_t>((c * kh + ki) * kw + kj) * oh_count * ow_count;
                for (int oh = 0; oh < oh_count; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= h) {
                        std::fill(row + static_cast<int64_t>(oh) * ow_count,
                                  row + static_cast<int64_t>(oh + 1) * ow_count, T(0));
                        continue;
                    }
                    const T* src = img + (static_cast<int64_t>(c) * h + ih) * w;
                    for (int ow = 0; ow < ow_count; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        row[static_cast<int64_t>(oh) * ow_count + ow] =
                            (iw < 0 || iw >= w) ? T(0) : src[iw];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add columns back into the image.
template <typename T>
void col2im(const T* cols, int ch, int h, int w, int kh, int kw, int stride, int pad,
            int oh_count, int ow_count, T* img) {
    for (int c = 0; c < ch; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const T* row = cols + static_cast<int64_t>((c * kh + ki) * kw + kj) * oh_count * ow_count;
                for (int oh = 0; oh < oh_count; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= h) continue;
                    T* dst = img + (static_cast<int64_t>(c) * h + ih) * w;
                    for (int ow = 0; ow < ow_count; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        if (iw >= 0 && iw < w) dst[iw] += row[static_cast<int64_t>(oh) * ow_count + ow];
                    }
                }
            }
        }
    }
}

enum class Bcast { none, left_scalar, right_scalar };

inline Bcast binary_mode(const std::vector<int>& a, const std::vector<int>& b,
                         int64_t an, int64_t bn, const char* op) {
    if (a == b) return Bcast::none;
    if (an == 1) return Bcast::left_scalar;
    if (bn == 1) return Bcast::right_scalar;
    throw ShapeError(cat(op, ": shapes ", shape_str(a), " and ", shape_str(b),
                         " are neither equal nor scalar-broadcastable"));
}

}  // namespace detail

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
    if (!t.all_finite())
        throw NumericError(detail::cat(op, ": non-finite value in output of shape ",
                                       shape_str(t.shape())));
}

// ---------------------------------------------------------------------------
// elementwise binary (equal shape or scalar broadcast)
// ---------------------------------------------------------------------------

namespace detail {

// fwd(av, bv) -> out; da(g, av, bv), db(g, av, bv) -> per-element gradients
template <typename T, typename F, typename Da, typename Db>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, F fwd, Da da, Db db) {
    const Bcast mode = binary_mode(a.shape(), b.shape(), a.numel(), b.numel(), name);
    const bool asc = mode == Bcast::left_scalar;
    const bool bsc = mode == Bcast::right_scalar;
    Tensor<T> out(asc ? b.shape() : a.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = fwd(a[asc ? 0 : i], b[bsc ? 0 : i]);
    check_finite(out, name);
    if (auto* tp = GradTape<T>::active()) {
        int ia = tp->node_of(a), ib = tp->node_of(b);
        if (ia >= 0 || ib >= 0) {
            int io = tp->make_node(out);
            Tensor<T> as = a, bs = b;
            tp->set_backward(io, [=](GradTape<T>& t) {
                const auto& g = t.grad_buf(io);
                if (ia >= 0) {
                    auto& ga = t.grad_acc(ia);
                    if (asc) {
                        for (int64_t i = 0; i < n; ++i) ga[0] += da(g[i], as[0], bs[bsc ? 0 : i]);
                    } else {
                        for (int64_t i = 0; i < n; ++i) ga[i] += da(g[i], as[i], bs[bsc ? 0 : i]);
                    }
                }
                if (ib >= 0) {
                    auto& gb = t.grad_acc(ib);
                    if (bsc) {
                        for (int64_t i = 0; i < n; ++i) gb[0] += db(g[i], as[asc ? 0 : i], bs[0]);
                    } else {
                        for (int64_t i = 0; i < n; ++i) gb[i] += db(g[i], as[asc ? 0 : i], bs[i]);
                    }
                }
            });
        }
    }
    return out;
}

// fwd(av) -> out; dgrad(g, av, outv) -> gradient
template <typename T, typename F, typename D>
Tensor<T> unary_op(const Tensor<T>& a, const char* name, F fwd, D dgrad) {
    Tensor<T> out(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = fwd(a[i]);
    check_finite(out, name);
    if (auto* tp = GradTape<T>::active()) {
        int ia = tp->node_of(a);
        if (ia >= 0) {
            int io = tp->make_node(out);
            Tensor<T> as = a, os = out;
            tp->set_backward(io, [=](GradTape<T>& t) {
                const auto& g = t.grad_buf(io);
                auto& ga = t.grad_acc(ia);
                for (int64_t i = 0; i < n; ++i) ga[i] += dgrad(g[i], as[i], os[i]);
            });
        }
    }
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(a, b, "add",
                             [](T x, T y) { return x + y; },
                             [](T g, T, T) { return g; },
                             [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(a, b, "sub",
                             [](T x, T y) { return x - y; },
                             [](T g, T, T) { return g; },
                             [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(a, b, "mul",
                             [](T x, T y) { return x * y; },
                             [](T g, T, T y) { return g * y; },
                             [](T g, T x, T) { return g * x; });
}

// scalar constant multiply / add
template <typename T>
Tensor<T> smul(const Tensor<T>& a, T c) {
    return detail::unary_op(a, "smul",
                            [c](T x) { return c * x; },
                            [c](T g, T, T) { return c * g; });
}

template <typename T>
Tensor<T> sadd(const Tensor<T>& a, T c) {
    return detail::unary_op(a, "sadd",
                            [c](T x) { return x + c; },
                            [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    return detail::unary_op(a, "relu",
                            [](T x) { return x > T(0) ? x : T(0); },
                            [](T g, T x, T) { return x > T(0) ? g : T(0); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
    return detail::unary_op(a, "tanh",
                            [](T x) { return std::tanh(x); },
                            [](T g, T, T y) { return g * (T(1) - y * y); });
}

// subgradient 0 at the clamp boundaries and outside
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
    return detail::unary_op(a, "clamp",
                            [lo, hi](T x) { return std::min(hi, std::max(lo, x)); },
                            [lo, hi](T g, T x, T) { return (x > lo && x < hi) ? g : T(0); });
}

// sign(0) = 0; gradient is zero everywhere
template <typename T>
Tensor<T> sign(const Tensor<T>& a) {
    return detail::unary_op(a, "sign",
                            [](T x) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); },
                            [](T, T, T) { return T(0); });
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

// a[m,k] x b[k,n]; dA = G.B^T, dB = A^T.G
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw ShapeError(detail::cat("matmul: expected 2-d operands, got ", shape_str(a.shape()),
                                     " and ", shape_str(b.shape())));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw ShapeError(detail::cat("matmul: inner extents differ: ", shape_str(a.shape()),
                                     " vs ", shape_str(b.shape())));
    Tensor<T> out({m, n});
    detail::gemm(a.data(), m, k, false, b.data(), k, n, false, out.data(), false);
    check_finite(out, "matmul");
    if (auto* tp = GradTape<T>::active()) {
        int ia = tp->node_of(a), ib = tp->node_of(b);
        if (ia >= 0 || ib >= 0) {
            int io = tp->make_node(out);
            Tensor<T> as = a, bs = b;
            tp->set_backward(io, [=](GradTape<T>& t) {
                const T* g = t.grad_buf(io).data();
                if (ia >= 0)
                    detail::gemm(g, m, n, false, bs.data(), k, n, true, t.grad_acc(ia).data(), true);
                if (ib >= 0)
                    detail::gemm(as.data(), m, k, true, g, m, n, false, t.grad_acc(ib).data(), true);
            });
        }
    }
    return out;
}

// Batched product over leading axis: a[B,M,K] x b[B,K,N] (or b[B,N,K] with
// transpose_b) -> [B,M,N].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0))
        throw ShapeError(detail::cat("bmm: expected matching 3-d operands, got ",
                                     shape_str(a.shape()), " and ", shape_str(b.shape())));
    const int bt = a.dim(0), m = a.dim(1), k = a.dim(2);
    const int n = transpose_b ? b.dim(1) : b.dim(2);
    const int bk = transpose_b ? b.dim(2) : b.dim(1);
    if (bk != k)
        throw ShapeError(detail::cat("bmm: inner extents differ: ", shape_str(a.shape()), " vs ",
                                     shape_str(b.shape())));
    Tensor<T> out({bt, m, n});
    const int64_t sa = static_cast<int64_t>(m) * k, sb = static_cast<int64_t>(b.dim(1)) * b.dim(2),
                  so = static_cast<int64_t>(m) * n;
    for (int i = 0; i < bt; ++i) {
        if (transpose_b)
            detail::gemm(a.data() + i * sa, m, k, false, b.data() + i * sb, n, k, true,
                         out.data() + i * so, false);
        else
            detail::gemm(a.data() + i * sa, m, k, false, b.data() + i * sb, k, n, false,
                         out.data() + i * so, false);
    }
    check_finite(out, "bmm");
    if (auto* tp = GradTape<T>::active()) {
        int ia = tp->node_of(a), ib = tp->node_of(b);
        if (ia >= 0 || ib >= 0) {
            int io = tp->make_node(out);
            Tensor<T> as = a, bs = b;
            tp->set_backward(io, [=](GradTape<T>& t) {
                const T* g = t.grad_buf(io).data();
                for (int i = 0; i < bt; ++i) {
                    const T* gi = g + i * so;
                    if (ia >= 0) {
                        T* ga = t.grad_acc(ia).data() + i * sa;
                        // y = A.B   -> dA = G.B^T ; y = A.B^T -> dA = G.B
                        if (transpose_b)
                            detail::gemm(gi, m, n, false, bs.data() + i * sb, n, k, false, ga, true);
                        else
                            detail::gemm(gi, m, n, false, bs.data() + i * sb, k, n, true, ga, true);
                    }
                    if (ib >= 0) {
                        T* gb = t.grad_acc(ib).data() + i * sb;
                        // y = A.B   -> dB = A^T.G ; y = A.B^T -> dB = G^T.A
                        if (transpose_b)
                            detail::gemm(gi, m, n, true, as.data() + i * sa, m, k, false, gb, true);
                        else
                            detail::gemm(as.data() + i * sa, m, k, true, gi, m, n, false, gb, true);
                    }
                }
            });
        }
    }
    return out;
}

// x[..., Din] x w[Din, Dout] + b[Dout] applied over the trailing axis.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.ndim() < 1 || w.ndim() != 2)
        throw ShapeError("linear: bad operand ranks");
    const int din = w.dim(0), dout = w.dim(1);
    if (x.dim(x.ndim() - 1) != din)
        throw ShapeError(detail::cat("linear: trailing extent of ", shape_str(x.shape()),
                                     " does not match weight ", shape_str(w.shape())));
    if (b.numel() != dout) throw ShapeError("linear: bias length mismatch");
    const int rows = static_cast<int>(x.numel() / din);
    std::vector<int> oshape = x.shape();
    oshape.back() = dout;
    Tensor<T> out(oshape);
    detail::gemm(x.data(), rows, din, false, w.data(), din, dout, false, out.data(), false);
    for (int r = 0; r < rows; ++r) {
        T* row = out.data() + static_cast<int64_t>(r) * dout;
        for (int j = 0; j < dout; ++j) row[j] += b[j];
    }
    check_finite(out, "linear");
    if (auto* tp = GradTape<T>::active()) {
        int ix = tp->node_of(x), iw = tp->node_of(w), ib = tp->node_of(b);
        if (ix >= 0 || iw >= 0 || ib >= 0) {
            int io = tp->make_node(out);
            Tensor<T> xs = x, ws = w;
            tp->set_backward(io, [=](GradTape<T>& t) {
                const T* g = t.grad_buf(io).data();
                if (ix >= 0)
                    detail::gemm(g, rows, dout, false, ws.data(), din, dout, true,
                                 t.grad_acc(ix).data(), true);
                if (iw >= 0)
                    detail::gemm(xs.data(), rows, din, true, g, rows, dout, false,
                                 t.grad_acc(iw).data(), true);
                if (ib >= 0) {
                    auto& gb = t.grad_acc(ib);
                    for (int r = 0; r < rows; ++r)
                        for (int j = 0; j < dout; ++j) gb[j] += g[static_cast<int64_t>(r) * dout + j];
                }
            });
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int> shape) {
    Tensor<T> out(std::move(shape), a.vec());
    if (out.numel() != a.numel())
        throw ShapeError(detail::cat("reshape: cannot view ", shape_str(a.shape()), " as ",
                                     shape_str(out.shape())));
    if (auto* tp = GradTape<T>::active()) {
        int ia = tp->node_of(a);
        if (ia >= 0) {
            int io = tp->make_node(out);
            const int64_t n = a.numel();
            tp->set_backward(io, [=](GradTape<T>& t) {
                t.accumulate(ia, t.grad_buf(io).data(), n);
            });
        }
    }
    return out;
}

// Permutes axes: out index i_perm[d] = in index d.
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm) {
    const int nd = a.ndim();
    if (static_cast<int>(perm.size()) != nd) throw ShapeError("permute: rank mismatch");
    std::vector<int> oshape(nd);
    for (int d = 0; d < nd; ++d) oshape[d] = a.dim(perm[d]);

    // strides of the input viewed through the permutation
    std::vector<int64_t> istride(nd, 1);
    for (int d = nd - 2; d >= 0; --d) istride[d] = istride[d + 1] * a.dim(d + 1);
    std::vector<int64_t> pstride(nd);
    for (int d = 0; d < nd; ++d) pstride[d] = istride[perm[d]];

    Tensor<T> out(oshape);
    const int64_t n = a.numel();
    std::vector<int> idx(nd, 0);
    const T* src = a.data();
    T* dst = out.data();
    for (int64_t i = 0; i < n; ++i) {
        int64_t off = 0;
        for (int d = 0; d < nd; ++d) off += idx[d] * pstride[d];
        dst[i] = src[off];
        for (int d = nd - 1; d >= 0; --d) {
            if (++idx[d] < oshape[d]) break;
            idx[d] = 0;
        }
    }
    if (auto* tp = GradTape<T>::active()) {
        int ia = tp->node_of(a);
        if (ia >= 0) {
            int io = tp->make_node(out);
            std::vector<int64_t> ps = pstride;
            std::vector<int> os = oshape;
            tp->set_backward(io, [=](GradTape<T>& t) {
                const auto& g = t.grad_buf(io);
                auto& ga = t.grad_acc(ia);
                std::vector<int> ix(nd, 0);
                for (int64_t i = 0; i < n; ++i) {
                    int64_t off = 0;
                    for (int d = 0; d < nd; ++d) off += ix[d] * ps[d];
                    ga[off] += g[i];
                    for (int d = nd - 1; d >= 0; --d) {
                        if (++ix[d] < os[d]) break;
                        ix[d] = 0;
                    }
                }
            });
        }
    }
    return out;
}

// Concatenation along `axis`; all other extents must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const int nd = parts[0].ndim();
    if (axis < 0 || axis >= nd) throw ShapeError("concat: bad axis");
    std::vector<int> oshape = parts[0].shape();
    oshape[axis] = 0;
    for (const auto& p : parts) {
        if (p.ndim() != nd) throw ShapeError("concat: rank mismatch");
        for (int d = 0; d < nd; ++d)
            if (d != axis && p.dim(d) != parts[0].dim(d))
                throw ShapeError("concat: extent mismatch off the concat axis");
        oshape[axis] += p.dim(axis);
    }
    Tensor<T> out(oshape);
    int64_t outer = 1, tail = 1;
    for (int d = 0; d < axis; ++d) outer *= oshape[d];
    for (int d = axis + 1; d < nd; ++d) tail *= oshape[d];
    const int64_t ostride = static_cast<int64_t>(oshape[axis]) * tail;

    std::vector<int64_t> offsets;  // start of each part inside an outer block
    {
        int64_t off = 0;
        for (const auto& p : parts) {
            offsets.push_back(off);
            off += static_cast<int64_t>(p.dim(axis)) * tail;
        }
    }
    for (size_t pi = 0; pi < parts.size(); ++pi) {
        const auto& p = parts[pi];
        const int64_t block = static_cast<int64_t>(p.dim(axis)) * tail;
        for (int64_t o = 0; o < outer; ++o)
            std::copy(p.data() + o * block, p.data() + (o + 1) * block,
                      out.data() + o * ostride + offsets[pi]);
    }
    check_finite(out, "concat");
    if (auto* tp = GradTape<T>::active()) {
        std::vector<int> in_nodes(parts.size(), -1);
        bool any = false;
        for (size_t pi = 0; pi < parts.size(); ++pi) {
            in_nodes[pi] = tp->node_of(parts[pi]);
            any = any || in_nodes[pi] >= 0;
        }
        if (any) {
            int io = tp->make_node(out);
            std::vector<int64_t> blocks;
            for (const auto& p : parts) blocks.push_back(static_cast<int64_t>(p.dim(axis)) * tail);
            tp->set_backward(io, [=](GradTape<T>& t) {
                const auto& g = t.grad_buf(io);
                for (size_t pi = 0; pi < in_nodes.size(); ++pi) {
                    if (in_nodes[pi] < 0) continue;
                    auto& gp = t.grad_acc(in_nodes[pi]);
                    for (int64_t o = 0; o < outer; ++o) {
                        const T* src = g.data() + o * ostride + offsets[pi];
                        T* dst = gp.data() + o * blocks[pi];
                        for (int64_t i = 0; i < blocks[pi]; ++i) dst[i] += src[i];
                    }
                }
            });
        }
    }
    return out;
}

// x[N,C,H,W] + b[C] broadcast over batch and spatial axes.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
    if (x.ndim() != 4 || b.numel() != x.dim(1))
        throw ShapeError(detail::cat("add_channel_bias: ", shape_str(b.shape()), " vs ",
                                     shape_str(x.shape())));
    const int n = x.dim(0), c = x.dim(1);
    const int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
    Tensor<T> out(x.shape());
    for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
            const T* src = x.data() + (static_cast<int64_t>(ni) * c + ci) * hw;
            T* dst = out.data() + (static_cast<int64_t>(ni) * c + ci) * hw;
            const T bv = b[ci];
            for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] + bv;
        }
    check_finite(out, "add_channel_bias");
    if (auto* tp = GradTape<T>::active()) {
        int ix = tp->node_of(x), ib = tp->node_of(b);
        if (ix >= 0 || ib >= 0) {
            int io = tp->make_node(out);
            tp->set_backward(io, [=](GradTape<T>& t) {
                const auto& g = t.grad_buf(io);
                if (ix >= 0) t.accumulate(ix, g.data(), static_cast<int64_t>(g.size()));
                if (ib >= 0) {
                    auto& gb = t.grad_acc(ib);
                    for (int ni = 0; ni < n; ++ni)
                        for (int ci = 0; ci < c; ++ci) {
                            const T* src = g.data() + (static_cast<int64_t>(ni) * c + ci) * hw;
                            T s = 0;
                            for (int64_t i = 0; i < hw; ++i) s += src[i];
                            gb[static_cast<size_t>(ci)] += s;
                        }
                }
            });
        }
    }
    return out;
}

// x[N, ...] + p[...]: adds p to every slice along the leading axis. Used for
// positional embeddings.
template <typename T>
Tensor<T> add_broadcast0(const Tensor<T>& x, const Tensor<T>& p) {
    if (x.ndim() < 2)
        throw ShapeError("add_broadcast0: need at least 2 axes on the left operand");
    const int64_t inner = p.numel();
    if (x.numel() % inner != 0 || x.numel() / x.dim(0) != inner)
        throw ShapeError(detail::cat("add_broadcast0: ", shape_str(p.shape()),
                                     " does not tile ", shape_str(x.shape())));
    const int n = x.dim(0);
    Tensor<T> out(x.shape());
    for (int i = 0; i < n; ++i) {
        const T* src = x.data() + static_cast<int64_t>(i) * inner;
        T* dst = out.data() + static_cast<int64_t>(i) * inner;
        for (int64_t j = 0; j < inner; ++j) dst[j] = src[j] + p[j];
    }
    check_finite(out, "add_broadcast0");
    if (auto* tp = GradTape<T>::active()) {
        int ix = tp->node_of(x), ip = tp->node_of(p);
        if (ix >= 0 || ip >= 0) {
            int io = tp->make_node(out);
            tp->set_backward(io, [=](GradTape<T>& t) {
                const auto& g = t.grad_buf(io);
                if (ix >= 0) t.accumulate(ix, g.data(), static_cast<int64_t>(n) * inner);
                if (ip >= 0) {
                    auto& gp = t.grad_acc(ip);
                    for (int i = 0; i < n; ++i) {
                        const T* src = g.data() + static_cast<int64_t>(i) * inner;
                        for (int64_t j = 0; j < inner; ++j) gp[static_cast<size_t>(j)] += src[j];
                    }
                }
            });
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T s = 0;
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) s += a[i];
    Tensor<T> out = Tensor<T>::scalar(s);
    check_finite(out, "sum");
    if (auto* tp = GradTape<T>::active()) {
        int ia = tp->node_of(a);
        if (ia >= 0) {
            int io = tp->make_node(out);
            tp->set_backward(io, [=](GradTape<T>& t) {
                const T g = t.grad_buf(io)[0];
                auto& ga = t.grad_acc(ia);
                for (int64_t i = 0; i < n; ++i) ga[i] += g;
            });
        }
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    return smul(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

// [N,T,D] -> [N,D], mean over the token axis.
template <typename T>
Tensor<T> mean_tokens(const Tensor<T>& a) {
    if (a.ndim() != 3) throw ShapeError("mean_tokens: expected [N,T,D]");
    const int n = a.dim(0), tk = a.dim(1), d = a.dim(2);
    Tensor<T> out({n, d});
    const T inv = T(1) / static_cast<T>(tk);
    for (int i = 0; i < n; ++i)
        for (int t0 = 0; t0 < tk; ++t0) {
            const T* src = a.data() + (static_cast<int64_t>(i) * tk + t0) * d;
            T* dst = out.data() + static_cast<int64_t>(i) * d;
            for (int j = 0; j < d; ++j) dst[j] += src[j] * inv;
        }
    check_finite(out, "mean_tokens");
    if (auto* tp = GradTape<T>::active()) {
        int ia = tp->node_of(a);
        if (ia >= 0) {
            int io = tp->make_node(out);
            tp->set_backward(io, [=](GradTape<T>& t) {
                const auto& g = t.grad_buf(io);
                auto& ga = t.grad_acc(ia);
                for (int i = 0; i < n; ++i)
                    for (int t0 = 0; t0 < tk; ++t0) {
                        T* dst = ga.data() + (static_cast<int64_t>(i) * tk + t0) * d;
                        const T* src = g.data() + static_cast<int64_t>(i) * d;
                        for (int j = 0; j < d; ++j) dst[j] += src[j] * inv;
                    }
            });
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// normalization and softmax
// ---------------------------------------------------------------------------

// Softmax over the trailing axis.
template <typename T>
Tensor<T> softmax_last(const Tensor<T>& a) {
    const int l = a.dim(a.ndim() - 1);
    const int64_t rows = a.numel() / l;
    Tensor<T> out(a.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const T* src = a.data() + r * l;
        T* dst = out.data() + r * l;
        T mx = src[0];
        for (int j = 1; j < l; ++j) mx = std::max(mx, src[j]);
        T sum = 0;
        for (int j = 0; j < l; ++j) {
            dst[j] = std::exp(src[j] - mx);
            sum += dst[j];
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < l; ++j) dst[j] *= inv;
    }
    check_finite(out, "softmax");
    if (auto* tp = GradTape<T>::active()) {
        int ia = tp->node_of(a);
        if (ia >= 0) {
            int io = tp->make_node(out);
            Tensor<T> os = out;
            tp->set_backward(io, [=](GradTape<T>& t) {
                const auto& g = t.grad_buf(io);
                auto& ga = t.grad_acc(ia);
                for (int64_t r = 0; r < rows; ++r) {
                    const T* gr = g.data() + r * l;
                    const T* s = os.data() + r * l;
                    T dot = 0;
                    for (int j = 0; j < l; ++j) dot += gr[j] * s[j];
                    T* dst = ga.data() + r * l;
                    for (int j = 0; j < l; ++j) dst[j] += s[j] * (gr[j] - dot);
                }
            });
        }
    }
    return out;
}

// Layer normalization over the trailing axis with affine parameters.
template <typename T>
Tensor<T> layernorm_last(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                         T eps = T(1e-5)) {
    const int d = x.dim(x.ndim() - 1);
    if (gamma.numel() != d || beta.numel() != d)
        throw ShapeError("layernorm: parameter length does not match trailing extent");
    const int64_t rows = x.numel() / d;
    Tensor<T> out(x.shape());
    Tensor<T> xhat(x.shape());
    std::vector<T> ivstd(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const T* src = x.data() + r * d;
        T mu = 0;
        for (int j = 0; j < d; ++j) mu += src[j];
        mu /= static_cast<T>(d);
        T var = 0;
        for (int j = 0; j < d; ++j) var += (src[j] - mu) * (src[j] - mu);
        var /= static_cast<T>(d);
        const T iv = T(1) / std::sqrt(var + eps);
        ivstd[static_cast<size_t>(r)] = iv;
        T* xh = xhat.data() + r * d;
        T* dst = out.data() + r * d;
        for (int j = 0; j < d; ++j) {
            xh[j] = (src[j] - mu) * iv;
            dst[j] = gamma[j] * xh[j] + beta[j];
        }
    }
    check_finite(out, "layernorm");
    if (auto* tp = GradTape<T>::active()) {
        int ix = tp->node_of(x), ig = tp->node_of(gamma), ib = tp->node_of(beta);
        if (ix >= 0 || ig >= 0 || ib >= 0) {
            int io = tp->make_node(out);
            Tensor<T> xh = xhat, gs = gamma;
            auto iv = ivstd;
            tp->set_backward(io, [=](GradTape<T>& t) {
                const auto& g = t.grad_buf(io);
                for (int64_t r = 0; r < rows; ++r) {
                    const T* gr = g.data() + r * d;
                    const T* xhr = xh.data() + r * d;
                    if (ix >= 0) {
                        T mean_dxh = 0, mean_dxh_xh = 0;
                        for (int j = 0; j < d; ++j) {
                            const T dxh = gr[j] * gs[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhr[j];
                        }
                        mean_dxh /= static_cast<T>(d);
                        mean_dxh_xh /= static_cast<T>(d);
                        T* dst = t.grad_acc(ix).data() + r * d;
                        for (int j = 0; j < d; ++j) {
                            const T dxh = gr[j] * gs[j];
                            dst[j] += iv[static_cast<size_t>(r)] *
                                      (dxh - mean_dxh - xhr[j] * mean_dxh_xh);
                        }
                    }
                    if (ig >= 0) {
                        auto& gg = t.grad_acc(ig);
                        for (int j = 0; j < d; ++j) gg[j] += gr[j] * xhr[j];
                    }
                    if (ib >= 0) {
                        auto& gb = t.grad_acc(ib);
                        for (int j = 0; j < d; ++j) gb[j] += gr[j];
                    }
                }
            });
        }
    }
    return out;
}

enum class BnMode { train, eval };

// Running statistics owned by the enclosing layer.
template <typename T>
struct BnStats {
    std::vector<T> mean;
    std::vector<T> var;
};

// Batch normalization over [N,C,H,W]. Train mode normalizes with batch
// statistics; when `update_running` is set the running stats move by
// exponential average. Eval mode normalizes with running stats. Both modes
// are differentiable w.r.t. x, gamma, beta.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BnStats<T>& running, BnMode mode, bool update_running,
                      T momentum = T(0.1), T eps = T(1e-5)) {
    if (x.ndim() != 4) throw ShapeError("batchnorm2d: expected [N,C,H,W]");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (gamma.numel() != c || beta.numel() != c ||
        static_cast<int>(running.mean.size()) != c || static_cast<int>(running.var.size()) != c)
        throw ShapeError("batchnorm2d: channel count does not match parameters");
    const int64_t hw = static_cast<int64_t>(h) * w;
    const int64_t m = static_cast<int64_t>(n) * hw;

    std::vector<T> mean(static_cast<size_t>(c)), ivstd(static_cast<size_t>(c));
    if (mode == BnMode::train) {
        for (int ci = 0; ci < c; ++ci) {
            T mu = 0;
            for (int ni = 0; ni < n; ++ni) {
                const T* src = x.data() + (static_cast<int64_t>(ni) * c + ci) * hw;
                for (int64_t i = 0; i < hw; ++i) mu += src[i];
            }
            mu /= static_cast<T>(m);
            T var = 0;
            for (int ni = 0; ni < n; ++ni) {
                const T* src = x.data() + (static_cast<int64_t>(ni) * c + ci) * hw;
                for (int64_t i = 0; i < hw; ++i) var += (src[i] - mu) * (src[i] - mu);
            }
            var /= static_cast<T>(m);
            mean[static_cast<size_t>(ci)] = mu;
            ivstd[static_cast<size_t>(ci)] = T(1) / std::sqrt(var + eps);
            if (update_running) {
                running.mean[static_cast<size_t>(ci)] =
                    (T(1) - momentum) * running.mean[static_cast<size_t>(ci)] + momentum * mu;
                running.var[static_cast<size_t>(ci)] =
                    (T(1) - momentum) * running.var[static_cast<size_t>(ci)] + momentum * var;
            }
        }
    } else {
        for (int ci = 0; ci < c; ++ci) {
            mean[static_cast<size_t>(ci)] = running.mean[static_cast<size_t>(ci)];
            ivstd[static_cast<size_t>(ci)] =
                T(1) / std::sqrt(running.var[static_cast<size_t>(ci)] + eps);
        }
    }

    Tensor<T> out(x.shape());
    Tensor<T> xhat(x.shape());
    for (int ni = 0; ni < n; ++ni)
        for (int ci = 0; ci < c; ++ci) {
            const T* src = x.data() + (static_cast<int64_t>(ni) * c + ci) * hw;
            T* xh = xhat.data() + (static_cast<int64_t>(ni) * c + ci) * hw;
            T* dst = out.data() + (static_cast<int64_t>(ni) * c + ci) * hw;
            const T mu = mean[static_cast<size_t>(ci)], iv = ivstd[static_cast<size_t>(ci)];
            const T ga = gamma[ci], be = beta[ci];
            for (int64_t i = 0; i < hw; ++i) {
                xh[i] = (src[i] - mu) * iv;
                dst[i] = ga * xh[i] + be;
            }
        }
    check_finite(out, "batchnorm2d");

    if (auto* tp = GradTape<T>::active()) {
        int ix = tp->node_of(x), ig = tp->node_of(gamma), ib = tp->node_of(beta);
        if (ix >= 0 || ig >= 0 || ib >= 0) {
            int io = tp->make_node(out);
            Tensor<T> xh = xhat, gs = gamma;
            auto iv = ivstd;
            const bool batch_stats = mode == BnMode::train;
            tp->set_backward(io, [=](GradTape<T>& t) {
                const auto& g = t.grad_buf(io);
                for (int ci = 0; ci < c; ++ci) {
                    T sum_g = 0, sum_g_xh = 0;
                    for (int ni = 0; ni < n; ++ni) {
                        const int64_t base = (static_cast<int64_t>(ni) * c + ci) * hw;
                        for (int64_t i = 0; i < hw; ++i) {
                            sum_g += g[base + i];
                            sum_g_xh += g[base + i] * xh[base + i];
                        }
                    }
                    if (ig >= 0) t.grad_acc(ig)[static_cast<size_t>(ci)] += sum_g_xh;
                    if (ib >= 0) t.grad_acc(ib)[static_cast<size_t>(ci)] += sum_g;
                    if (ix >= 0) {
                        auto& gx = t.grad_acc(ix);
                        const T ga = gs[ci], ivc = iv[static_cast<size_t>(ci)];
                        if (batch_stats) {
                            const T mg = sum_g / static_cast<T>(m);
                            const T mgx = sum_g_xh / static_cast<T>(m);
                            for (int ni = 0; ni < n; ++ni) {
                                const int64_t base = (static_cast<int64_t>(ni) * c + ci) * hw;
                                for (int64_t i = 0; i < hw; ++i)
                                    gx[base + i] += ga * ivc * (g[base + i] - mg - xh[base + i] * mgx);
                            }
                        } else {
                            for (int ni = 0; ni < n; ++ni) {
                                const int64_t base = (static_cast<int64_t>(ni) * c + ci) * hw;
                                for (int64_t i = 0; i < hw; ++i) gx[base + i] += ga * ivc * g[base + i];
                            }
                        }
                    }
                }
            });
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

// Cross-correlation: x[N,C,H,W] * w[F,C,kh,kw] -> [N,F,H',W'].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
    if (x.ndim() != 4 || w.ndim() != 4)
        throw ShapeError("conv2d: expected x[N,C,H,W] and w[F,C,kh,kw]");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int f = w.dim(0), kc = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (kc != c)
        throw ShapeError(detail::cat("conv2d: input channels ", c, " vs kernel channels ", kc));
    const int oh = detail::conv_out_extent(h, kh, stride, pad, "H");
    const int ow = detail::conv_out_extent(wd, kw, stride, pad, "W");
    const int ckk = c * kh * kw;
    const int64_t ohw = static_cast<int64_t>(oh) * ow;

    Tensor<T> out({n, f, oh, ow});
    std::vector<T> cols(static_cast<size_t>(ckk) * ohw);
    for (int ni = 0; ni < n; ++ni) {
        detail::im2col(x.data() + static_cast<int64_t>(ni) * c * h * wd, c, h, wd, kh, kw,
                       stride, pad, oh, ow, cols.data());
        detail::gemm(w.data(), f, ckk, false, cols.data(), ckk, static_cast<int>(ohw), false,
                     out.data() + static_cast<int64_t>(ni) * f * ohw, false);
    }
    check_finite(out, "conv2d");

    if (auto* tp = GradTape<T>::active()) {
        int ix = tp->node_of(x), iw = tp->node_of(w);
        if (ix >= 0 || iw >= 0) {
            int io = tp->make_node(out);
            Tensor<T> xs = x, ws = w;
            tp->set_backward(io, [=](GradTape<T>& t) {
                const auto& g = t.grad_buf(io);
                std::vector<T> cbuf(static_cast<size_t>(ckk) * ohw);
                for (int ni = 0; ni < n; ++ni) {
                    const T* gn = g.data() + static_cast<int64_t>(ni) * f * ohw;
                    if (iw >= 0) {
                        detail::im2col(xs.data() + static_cast<int64_t>(ni) * c * h * wd, c, h, wd,
                                       kh, kw, stride, pad, oh, ow, cbuf.data());
                        detail::gemm(gn, f, static_cast<int>(ohw), false, cbuf.data(), ckk,
                                     static_cast<int>(ohw), true, t.grad_acc(iw).data(), true);
                    }
                    if (ix >= 0) {
                        detail::gemm(ws.data(), f, ckk, true, gn, f, static_cast<int>(ohw), false,
                                     cbuf.data(), false);
                        detail::col2im(cbuf.data(), c, h, wd, kh, kw, stride, pad, oh, ow,
                                       t.grad_acc(ix).data() + static_cast<int64_t>(ni) * c * h * wd);
                    }
                }
            });
        }
    }
    return out;
}

// Adjoint of conv2d: x[N,C,H,W] * w[C,F,kh,kw] -> [N,F,H',W'] with
// H' = (H-1)*stride - 2*pad + kh.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
    if (x.ndim() != 4 || w.ndim() != 4)
        throw ShapeError("conv_transpose2d: expected x[N,C,H,W] and w[C,F,kh,kw]");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int wc = w.dim(0), f = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (wc != c)
        throw ShapeError(detail::cat("conv_transpose2d: input channels ", c, " vs kernel ", wc));
    const int oh = (h - 1) * stride - 2 * pad + kh;
    const int ow = (wd - 1) * stride - 2 * pad + kw;
    if (oh <= 0 || ow <= 0) throw ShapeError("conv_transpose2d: non-positive output extent");
    // sanity: the forward conv over the output geometry must reproduce (h,w)
    if (detail::conv_out_extent(oh, kh, stride, pad, "H'") != h ||
        detail::conv_out_extent(ow, kw, stride, pad, "W'") != wd)
        throw ShapeError("conv_transpose2d: geometry is not the adjoint of a conv2d");

    const int fkk = f * kh * kw;
    const int64_t hw = static_cast<int64_t>(h) * wd;
    const int64_t ohw = static_cast<int64_t>(oh) * ow;

    Tensor<T> out({n, f, oh, ow});
    std::vector<T> cols(static_cast<size_t>(fkk) * hw);
    for (int ni = 0; ni < n; ++ni) {
        // cols[FKK, HW] = w^T[FKK, C] . x_n[C, HW], then scatter into the image
        detail::gemm(w.data(), c, fkk, true, x.data() + static_cast<int64_t>(ni) * c * hw, c,
                     static_cast<int>(hw), false, cols.data(), false);
        detail::col2im(cols.data(), f, oh, ow, kh, kw, stride, pad, h, wd,
                       out.data() + static_cast<int64_t>(ni) * f * ohw);
    }
    check_finite(out, "conv_transpose2d");

    if (auto* tp = GradTape<T>::active()) {
        int ix = tp->node_of(x), iw = tp->node_of(w);
        if (ix >= 0 || iw >= 0) {
            int io = tp->make_node(out);
            Tensor<T> xs = x, ws = w;
            tp->set_backward(io, [=](GradTape<T>& t) {
                const auto& g = t.grad_buf(io);
                std::vector<T> cbuf(static_cast<size_t>(fkk) * hw);
                for (int ni = 0; ni < n; ++ni) {
                    const T* gn = g.data() + static_cast<int64_t>(ni) * f * ohw;
                    detail::im2col(gn, f, oh, ow, kh, kw, stride, pad, h, wd, cbuf.data());
                    if (ix >= 0)
                        detail::gemm(ws.data(), c, fkk, false, cbuf.data(), fkk,
                                     static_cast<int>(hw), false,
                                     t.grad_acc(ix).data() + static_cast<int64_t>(ni) * c * hw, true);
                    if (iw >= 0)
                        detail::gemm(xs.data() + static_cast<int64_t>(ni) * c * hw, c,
                                     static_cast<int>(hw), false, cbuf.data(), fkk,
                                     static_cast<int>(hw), true, t.grad_acc(iw).data(), true);
                }
            });
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Mean cross entropy of logits[N,K] against integer labels, log-sum-exp
// stabilized. Gradient is (softmax - onehot)/N.
template <typename T>
Tensor<T> loss_ce(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2) throw ShapeError("loss_ce: expected logits[N,K]");
    const int n = logits.dim(0), k = logits.dim(1);
    if (static_cast<int>(labels.size()) != n)
        throw ShapeError(detail::cat("loss_ce: ", labels.size(), " labels for ", n, " rows"));
    Tensor<T> probs({n, k});
    T total = 0;
    for (int i = 0; i < n; ++i) {
        const int y = labels[static_cast<size_t>(i)];
        if (y < 0 || y >= k) throw DataError(detail::cat("loss_ce: label ", y, " out of range"));
        const T* row = logits.data() + static_cast<int64_t>(i) * k;
        T mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        T* p = probs.data() + static_cast<int64_t>(i) * k;
        for (int j = 0; j < k; ++j) {
            p[j] = std::exp(row[j] - mx);
            sum += p[j];
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < k; ++j) p[j] *= inv;
        total += std::log(sum) + mx - row[y];
    }
    Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(n));
    check_finite(out, "loss_ce");
    if (auto* tp = GradTape<T>::active()) {
        int il = tp->node_of(logits);
        if (il >= 0) {
            int io = tp->make_node(out);
            Tensor<T> ps = probs;
            std::vector<int> ys = labels;
            tp->set_backward(io, [=](GradTape<T>& t) {
                const T g = t.grad_buf(io)[0] / static_cast<T>(n);
                auto& gl = t.grad_acc(il);
                for (int i = 0; i < n; ++i) {
                    const T* p = ps.data() + static_cast<int64_t>(i) * k;
                    T* dst = gl.data() + static_cast<int64_t>(i) * k;
                    for (int j = 0; j < k; ++j) dst[j] += g * p[j];
                    dst[ys[static_cast<size_t>(i)]] -= g;
                }
            });
        }
    }
    return out;
}

// Mean smooth-L1 (Huber) distance: 0.5 d^2/delta for |d|<delta, |d|-delta/2
// otherwise, d = a - b.
template <typename T>
Tensor<T> loss_smooth_l1(const Tensor<T>& a, const Tensor<T>& b, T delta = T(1)) {
    if (!a.same_shape(b))
        throw ShapeError(detail::cat("loss_smooth_l1: shapes ", shape_str(a.shape()), " vs ",
                                     shape_str(b.shape())));
    const int64_t n = a.numel();
    T total = 0;
    for (int64_t i = 0; i < n; ++i) {
        const T d = a[i] - b[i];
        const T ad = std::abs(d);
        total += ad < delta ? T(0.5) * d * d / delta : ad - T(0.5) * delta;
    }
    Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(n));
    check_finite(out, "loss_smooth_l1");
    if (auto* tp = GradTape<T>::active()) {
        int ia = tp->node_of(a), ib = tp->node_of(b);
        if (ia >= 0 || ib >= 0) {
            int io = tp->make_node(out);
            Tensor<T> as = a, bs = b;
            tp->set_backward(io, [=](GradTape<T>& t) {
                const T g = t.grad_buf(io)[0] / static_cast<T>(n);
                for (int64_t i = 0; i < n; ++i) {
                    const T d = as[i] - bs[i];
                    const T gi = g * (std::abs(d) < delta ? d / delta
                                                          : (d > T(0) ? T(1) : T(-1)));
                    if (ia >= 0) t.grad_acc(ia)[static_cast<size_t>(i)] += gi;
                    if (ib >= 0) t.grad_acc(ib)[static_cast<size_t>(i)] -= gi;
                }
            });
        }
    }
    return out;
}

}  // namespace advlab
