// Differentiable operations on Tensor. Each op computes its forward value
// and, when an input is tracked, records a backward closure on the tape.
//
// Conventions:
//   * matrices are 2-D [rows x cols], vectors are 1-D
//   * linear layers store weights as [in x out] so forward is a plain matmul
//   * an op whose inputs are all untracked returns an untracked tensor, so
//     evaluation paths run tape-free through the same code
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mtdnn/tensor.hpp"

namespace mtdnn {

namespace detail {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    MTDNN_CHECK(a.shape == b.shape, ShapeError,
                op << ": shape mismatch " << shape_str(a.shape) << " vs " << shape_str(b.shape));
}

template <typename T, typename F>
void record(Tensor<T>& out, Tape<T>* tp, F&& back) {
    if (!tp) return;
    out.tape = tp;
    out.node = tp->push(out.size(), std::forward<F>(back));
}

}  // namespace detail

// ---------------------------------------------------------------- matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    MTDNN_CHECK(a.ndim() == 2 && b.ndim() == 2, ShapeError,
                "matmul: expects 2-D operands, got " << shape_str(a.shape) << " and "
                                                     << shape_str(b.shape));
    MTDNN_CHECK(a.shape[1] == b.shape[0], ShapeError,
                "matmul: inner dimensions disagree: " << shape_str(a.shape) << " x "
                                                      << shape_str(b.shape));
    const int r = a.shape[0], k = a.shape[1], c = b.shape[1];
    Tensor<T> out = Tensor<T>::zeros({r, c});
    {
        const T* __restrict__ ap = a.ptr();
        const T* __restrict__ bp = b.ptr();
        T* __restrict__ op = out.ptr();
        for (int i = 0; i < r; ++i) {
            for (int kk = 0; kk < k; ++kk) {
                const T av = ap[i * k + kk];
                const T* brow = bp + kk * c;
                T* orow = op + i * c;
                for (int j = 0; j < c; ++j) orow[j] += av * brow[j];
            }
        }
    }
    Tape<T>* tp = joint_tape<T>({&a, &b});
    detail::record(out, tp, [an = a.node, bn = b.node, ab = a.buf, bb = b.buf, r, k, c](
                               Tape<T>& t, const std::vector<T>& go) {
        if (an >= 0) {
            auto& ga = t.grad(an);
            const T* bp = bb->data();
            // dA = gO . B^T
            for (int i = 0; i < r; ++i)
                for (int kk = 0; kk < k; ++kk) {
                    T acc = 0;
                    const T* gr = go.data() + size_t(i) * c;
                    const T* br = bp + size_t(kk) * c;
                    for (int j = 0; j < c; ++j) acc += gr[j] * br[j];
                    ga[size_t(i) * k + kk] += acc;
                }
        }
        if (bn >= 0) {
            auto& gb = t.grad(bn);
            const T* ap = ab->data();
            // dB = A^T . gO
            for (int kk = 0; kk < k; ++kk)
                for (int i = 0; i < r; ++i) {
                    const T av = ap[size_t(i) * k + kk];
                    const T* gr = go.data() + size_t(i) * c;
                    T* gbr = gb.data() + size_t(kk) * c;
                    for (int j = 0; j < c; ++j) gbr[j] += av * gr[j];
                }
        }
    });
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    MTDNN_CHECK(a.ndim() == 2, ShapeError, "transpose: expects 2-D, got " << shape_str(a.shape));
    const int r = a.shape[0], c = a.shape[1];
    Tensor<T> out = Tensor<T>::uninit({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.ptr()[size_t(j) * r + i] = a.ptr()[size_t(i) * c + j];
    detail::record(out, joint_tape<T>({&a}),
                   [an = a.node, r, c](Tape<T>& t, const std::vector<T>& go) {
                       auto& ga = t.grad(an);
                       for (int j = 0; j < c; ++j)
                           for (int i = 0; i < r; ++i)
                               ga[size_t(i) * c + j] += go[size_t(j) * r + i];
                   });
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape s) {
    MTDNN_CHECK(numel(s) == a.size(), ShapeError,
                "reshape: cannot view " << shape_str(a.shape) << " as " << shape_str(s));
    Tensor<T> out;
    out.shape = std::move(s);
    out.buf = a.buf;
    detail::record(out, joint_tape<T>({&a}),
                   [an = a.node](Tape<T>& t, const std::vector<T>& go) {
                       t.add_grad(an, go.data(), int64_t(go.size()));
                   });
    return out;
}

// ----------------------------------------------------------- elementwise

// add supports equal shapes plus the bias broadcast [m x d] + [d].
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() == 2 && b.ndim() == 1) {
        MTDNN_CHECK(a.shape[1] == b.shape[0], ShapeError,
                    "add: cannot broadcast " << shape_str(b.shape) << " over rows of "
                                             << shape_str(a.shape));
        const int m = a.shape[0], d = a.shape[1];
        Tensor<T> out = Tensor<T>::uninit(a.shape);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < d; ++j)
                out.ptr()[size_t(i) * d + j] = a.ptr()[size_t(i) * d + j] + b.ptr()[j];
        detail::record(out, joint_tape<T>({&a, &b}),
                       [an = a.node, bn = b.node, m, d](Tape<T>& t, const std::vector<T>& go) {
                           if (an >= 0) t.add_grad(an, go.data(), int64_t(go.size()));
                           if (bn >= 0) {
                               auto& gb = t.grad(bn);
                               for (int i = 0; i < m; ++i)
                                   for (int j = 0; j < d; ++j) gb[size_t(j)] += go[size_t(i) * d + j];
                           }
                       });
        return out;
    }
    detail::check_same_shape(a, b, "add");
    Tensor<T> out = Tensor<T>::uninit(a.shape);
    for (int64_t i = 0; i < a.size(); ++i) out.ptr()[i] = a.ptr()[i] + b.ptr()[i];
    detail::record(out, joint_tape<T>({&a, &b}),
                   [an = a.node, bn = b.node](Tape<T>& t, const std::vector<T>& go) {
                       if (an >= 0) t.add_grad(an, go.data(), int64_t(go.size()));
                       if (bn >= 0) t.add_grad(bn, go.data(), int64_t(go.size()));
                   });
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<T> out = Tensor<T>::uninit(a.shape);
    for (int64_t i = 0; i < a.size(); ++i) out.ptr()[i] = a.ptr()[i] - b.ptr()[i];
    detail::record(out, joint_tape<T>({&a, &b}),
                   [an = a.node, bn = b.node](Tape<T>& t, const std::vector<T>& go) {
                       if (an >= 0) t.add_grad(an, go.data(), int64_t(go.size()));
                       if (bn >= 0) {
                           auto& gb = t.grad(bn);
                           for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
                       }
                   });
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<T> out = Tensor<T>::uninit(a.shape);
    for (int64_t i = 0; i < a.size(); ++i) out.ptr()[i] = a.ptr()[i] * b.ptr()[i];
    detail::record(out, joint_tape<T>({&a, &b}),
                   [an = a.node, bn = b.node, ab = a.buf, bb = b.buf](Tape<T>& t,
                                                                      const std::vector<T>& go) {
                       if (an >= 0) {
                           auto& ga = t.grad(an);
                           for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * (*bb)[i];
                       }
                       if (bn >= 0) {
                           auto& gb = t.grad(bn);
                           for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * (*ab)[i];
                       }
                   });
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::uninit(a.shape);
    for (int64_t i = 0; i < a.size(); ++i) out.ptr()[i] = a.ptr()[i] * c;
    detail::record(out, joint_tape<T>({&a}),
                   [an = a.node, c](Tape<T>& t, const std::vector<T>& go) {
                       auto& ga = t.grad(an);
                       for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
                   });
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    if (GradCheckWatch::active() && GradCheckWatch::sink()) {
        auto& sink = *GradCheckWatch::sink();
        for (int64_t i = 0; i < a.size(); ++i) sink.push_back(double(a.ptr()[i]));
    }
    Tensor<T> out = Tensor<T>::uninit(a.shape);
    for (int64_t i = 0; i < a.size(); ++i) out.ptr()[i] = a.ptr()[i] > T(0) ? a.ptr()[i] : T(0);
    detail::record(out, joint_tape<T>({&a}),
                   [an = a.node, ab = a.buf](Tape<T>& t, const std::vector<T>& go) {
                       auto& ga = t.grad(an);
                       for (size_t i = 0; i < go.size(); ++i)
                           if ((*ab)[i] > T(0)) ga[i] += go[i];
                   });
    return out;
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::uninit(a.shape);
    for (int64_t i = 0; i < a.size(); ++i) out.ptr()[i] = std::tanh(a.ptr()[i]);
    detail::record(out, joint_tape<T>({&a}),
                   [an = a.node, ob = out.buf](Tape<T>& t, const std::vector<T>& go) {
                       auto& ga = t.grad(an);
                       for (size_t i = 0; i < go.size(); ++i) {
                           const T y = (*ob)[i];
                           ga[i] += go[i] * (T(1) - y * y);
                       }
                   });
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::uninit(a.shape);
    for (int64_t i = 0; i < a.size(); ++i) {
        const T x = a.ptr()[i];
        out.ptr()[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                                 : std::exp(x) / (T(1) + std::exp(x));
    }
    detail::record(out, joint_tape<T>({&a}),
                   [an = a.node, ob = out.buf](Tape<T>& t, const std::vector<T>& go) {
                       auto& ga = t.grad(an);
                       for (size_t i = 0; i < go.size(); ++i) {
                           const T y = (*ob)[i];
                           ga[i] += go[i] * y * (T(1) - y);
                       }
                   });
    return out;
}

// tanh-approximation gelu: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr T c0 = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T c1 = T(0.044715);
    Tensor<T> out = Tensor<T>::uninit(a.shape);
    for (int64_t i = 0; i < a.size(); ++i) {
        const T x = a.ptr()[i];
        out.ptr()[i] = T(0.5) * x * (T(1) + std::tanh(c0 * (x + c1 * x * x * x)));
    }
    detail::record(out, joint_tape<T>({&a}),
                   [an = a.node, ab = a.buf, c0, c1](Tape<T>& t, const std::vector<T>& go) {
                       auto& ga = t.grad(an);
                       for (size_t i = 0; i < go.size(); ++i) {
                           const T x = (*ab)[i];
                           const T u = c0 * (x + c1 * x * x * x);
                           const T th = std::tanh(u);
                           const T sech2 = T(1) - th * th;
                           const T du = c0 * (T(1) + T(3) * c1 * x * x);
                           ga[i] += go[i] * (T(0.5) * (T(1) + th) + T(0.5) * x * sech2 * du);
                       }
                   });
    return out;
}

// ---------------------------------------------------------------- softmax

namespace detail {

// Stable softmax of a contiguous slice.
template <typename T>
void softmax_slice(const T* x, T* y, int n, int stride) {
    T mx = x[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x[size_t(i) * stride]);
    T sum = 0;
    for (int i = 0; i < n; ++i) {
        const T e = std::exp(x[size_t(i) * stride] - mx);
        y[size_t(i) * stride] = e;
        sum += e;
    }
    for (int i = 0; i < n; ++i) y[size_t(i) * stride] /= sum;
}

// dX slice given softmax output slice y and upstream slice g.
template <typename T>
void softmax_back_slice(const T* y, const T* g, T* gx, int n, int stride) {
    T dot = 0;
    for (int i = 0; i < n; ++i) dot += y[size_t(i) * stride] * g[size_t(i) * stride];
    for (int i = 0; i < n; ++i)
        gx[size_t(i) * stride] += y[size_t(i) * stride] * (g[size_t(i) * stride] - dot);
}

}  // namespace detail

// softmax over `axis`. 1-D tensors use axis 0; 2-D tensors accept axis 0
// (down columns) or 1 (along rows).
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
    MTDNN_CHECK(a.ndim() == 1 || a.ndim() == 2, ShapeError,
                "softmax: expects 1-D or 2-D, got " << shape_str(a.shape));
    MTDNN_CHECK(axis >= 0 && axis < a.ndim(), ShapeError,
                "softmax: axis " << axis << " invalid for " << shape_str(a.shape));
    Tensor<T> out = Tensor<T>::uninit(a.shape);
    const int r = a.ndim() == 2 ? a.shape[0] : 1;
    const int c = a.ndim() == 2 ? a.shape[1] : a.shape[0];
    const bool rows = (a.ndim() == 1) || axis == 1;
    if (rows) {
        for (int i = 0; i < r; ++i)
            detail::softmax_slice(a.ptr() + size_t(i) * c, out.ptr() + size_t(i) * c, c, 1);
    } else {
        for (int j = 0; j < c; ++j) detail::softmax_slice(a.ptr() + j, out.ptr() + j, r, c);
    }
    detail::record(out, joint_tape<T>({&a}),
                   [an = a.node, ob = out.buf, r, c, rows](Tape<T>& t, const std::vector<T>& go) {
                       auto& ga = t.grad(an);
                       const T* y = ob->data();
                       if (rows) {
                           for (int i = 0; i < r; ++i)
                               detail::softmax_back_slice(y + size_t(i) * c, go.data() + size_t(i) * c,
                                                          ga.data() + size_t(i) * c, c, 1);
                       } else {
                           for (int j = 0; j < c; ++j)
                               detail::softmax_back_slice(y + j, go.data() + j, ga.data() + j, r, c);
                       }
                   });
    return out;
}

// -------------------------------------------------------------- layer_norm

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    MTDNN_CHECK(x.ndim() == 2, ShapeError, "layer_norm: expects 2-D input, got " << shape_str(x.shape));
    const int m = x.shape[0], d = x.shape[1];
    MTDNN_CHECK(d >= 2, ShapeError, "layer_norm: feature width must be >= 2, got " << d);
    MTDNN_CHECK(gain.ndim() == 1 && gain.shape[0] == d, ShapeError,
                "layer_norm: gain shape " << shape_str(gain.shape) << " does not match width " << d);
    MTDNN_CHECK(bias.ndim() == 1 && bias.shape[0] == d, ShapeError,
                "layer_norm: bias shape " << shape_str(bias.shape) << " does not match width " << d);
    Tensor<T> out = Tensor<T>::uninit(x.shape);
    auto xhat = std::make_shared<std::vector<T>>(size_t(m) * d);
    auto inv_std = std::make_shared<std::vector<T>>(size_t(m));
    for (int i = 0; i < m; ++i) {
        const T* row = x.ptr() + size_t(i) * d;
        T mean = 0;
        for (int j = 0; j < d; ++j) mean += row[j];
        mean /= T(d);
        T var = 0;
        for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= T(d);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[size_t(i)] = is;
        for (int j = 0; j < d; ++j) {
            const T xh = (row[j] - mean) * is;
            (*xhat)[size_t(i) * d + j] = xh;
            out.ptr()[size_t(i) * d + j] = gain.ptr()[j] * xh + bias.ptr()[j];
        }
    }
    detail::record(out, joint_tape<T>({&x, &gain, &bias}),
                   [xn = x.node, gn = gain.node, bn = bias.node, gb = gain.buf, xhat, inv_std, m,
                    d](Tape<T>& t, const std::vector<T>& go) {
                       for (int i = 0; i < m; ++i) {
                           const T* gor = go.data() + size_t(i) * d;
                           const T* xh = xhat->data() + size_t(i) * d;
                           if (xn >= 0) {
                               auto& gx = t.grad(xn);
                               T mean_dxh = 0, mean_dxh_xh = 0;
                               for (int j = 0; j < d; ++j) {
                                   const T dxh = gor[j] * (*gb)[size_t(j)];
                                   mean_dxh += dxh;
                                   mean_dxh_xh += dxh * xh[j];
                               }
                               mean_dxh /= T(d);
                               mean_dxh_xh /= T(d);
                               const T is = (*inv_std)[size_t(i)];
                               for (int j = 0; j < d; ++j) {
                                   const T dxh = gor[j] * (*gb)[size_t(j)];
                                   gx[size_t(i) * d + j] +=
                                       is * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                               }
                           }
                           if (gn >= 0) {
                               auto& gg = t.grad(gn);
                               for (int j = 0; j < d; ++j) gg[size_t(j)] += gor[j] * xh[j];
                           }
                           if (bn >= 0) {
                               auto& gbias = t.grad(bn);
                               for (int j = 0; j < d; ++j) gbias[size_t(j)] += gor[j];
                           }
                       }
                   });
    return out;
}

// ------------------------------------------------------- gather / scatter

// Row gather: out[i] = table[ids[i]]. Backward sums upstream rows into
// repeated table rows. This is the embedding lookup.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<int>& ids) {
    MTDNN_CHECK(table.ndim() == 2, ShapeError,
                "gather_rows: table must be 2-D, got " << shape_str(table.shape));
    const int v = table.shape[0], d = table.shape[1];
    for (size_t i = 0; i < ids.size(); ++i)
        MTDNN_CHECK(ids[i] >= 0 && ids[i] < v, IndexError,
                    "gather_rows: id " << ids[i] << " out of range [0," << v << ") at position "
                                       << i);
    Tensor<T> out = Tensor<T>::uninit({int(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.ptr() + size_t(ids[i]) * d, d, out.ptr() + i * size_t(d));
    detail::record(out, joint_tape<T>({&table}),
                   [tn = table.node, ids, d](Tape<T>& t, const std::vector<T>& go) {
                       auto& gt = t.grad(tn);
                       for (size_t i = 0; i < ids.size(); ++i) {
                           T* dst = gt.data() + size_t(ids[i]) * d;
                           const T* src = go.data() + i * size_t(d);
                           for (int j = 0; j < d; ++j) dst[j] += src[j];
                       }
                   });
    return out;
}

template <typename T>
Tensor<T> select_row(const Tensor<T>& x, int i) {
    MTDNN_CHECK(x.ndim() == 2, ShapeError, "select_row: expects 2-D, got " << shape_str(x.shape));
    MTDNN_CHECK(i >= 0 && i < x.shape[0], IndexError,
                "select_row: row " << i << " out of range [0," << x.shape[0] << ")");
    const int d = x.shape[1];
    Tensor<T> out = Tensor<T>::uninit({d});
    std::copy_n(x.ptr() + size_t(i) * d, d, out.ptr());
    detail::record(out, joint_tape<T>({&x}),
                   [xn = x.node, i, d](Tape<T>& t, const std::vector<T>& go) {
                       auto& gx = t.grad(xn);
                       for (int j = 0; j < d; ++j) gx[size_t(i) * d + j] += go[size_t(j)];
                   });
    return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int c0, int c1) {
    MTDNN_CHECK(x.ndim() == 2, ShapeError, "slice_cols: expects 2-D, got " << shape_str(x.shape));
    MTDNN_CHECK(0 <= c0 && c0 < c1 && c1 <= x.shape[1], IndexError,
                "slice_cols: range [" << c0 << "," << c1 << ") invalid for " << shape_str(x.shape));
    const int m = x.shape[0], d = x.shape[1], w = c1 - c0;
    Tensor<T> out = Tensor<T>::uninit({m, w});
    for (int i = 0; i < m; ++i)
        std::copy_n(x.ptr() + size_t(i) * d + c0, w, out.ptr() + size_t(i) * w);
    detail::record(out, joint_tape<T>({&x}),
                   [xn = x.node, c0, m, d, w](Tape<T>& t, const std::vector<T>& go) {
                       auto& gx = t.grad(xn);
                       for (int i = 0; i < m; ++i)
                           for (int j = 0; j < w; ++j)
                               gx[size_t(i) * d + c0 + j] += go[size_t(i) * w + j];
                   });
    return out;
}

// Stack 1-D rows of equal length into a matrix. Untracked rows contribute
// values but receive no gradient.
template <typename T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
    MTDNN_CHECK(!rows.empty(), ShapeError, "stack_rows: no rows given");
    const int d = rows[0].shape.empty() ? 0 : rows[0].shape[0];
    Tape<T>* tp = nullptr;
    for (const auto& r : rows) {
        MTDNN_CHECK(r.ndim() == 1 && r.shape[0] == d, ShapeError,
                    "stack_rows: row shape " << shape_str(r.shape) << " differs from [" << d << "]");
        if (r.tracked()) {
            MTDNN_CHECK(tp == nullptr || tp == r.tape, ContractError,
                        "stack_rows: rows live on different tapes");
            tp = r.tape;
        }
    }
    const int n = int(rows.size());
    Tensor<T> out = Tensor<T>::uninit({n, d});
    std::vector<int> nodes(rows.size());
    for (int i = 0; i < n; ++i) {
        std::copy_n(rows[size_t(i)].ptr(), d, out.ptr() + size_t(i) * d);
        nodes[size_t(i)] = rows[size_t(i)].node;
    }
    detail::record(out, tp, [nodes, d](Tape<T>& t, const std::vector<T>& go) {
        for (size_t i = 0; i < nodes.size(); ++i) {
            if (nodes[i] < 0) continue;
            t.add_grad(nodes[i], go.data() + i * size_t(d), d);
        }
    });
    return out;
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b) {
    MTDNN_CHECK(a.ndim() == 1 && b.ndim() == 1, ShapeError,
                "concat: expects 1-D operands, got " << shape_str(a.shape) << " and "
                                                     << shape_str(b.shape));
    const int na = a.shape[0], nb = b.shape[0];
    Tensor<T> out = Tensor<T>::uninit({na + nb});
    std::copy_n(a.ptr(), na, out.ptr());
    std::copy_n(b.ptr(), nb, out.ptr() + na);
    detail::record(out, joint_tape<T>({&a, &b}),
                   [an = a.node, bn = b.node, na, nb](Tape<T>& t, const std::vector<T>& go) {
                       if (an >= 0) t.add_grad(an, go.data(), na);
                       if (bn >= 0) t.add_grad(bn, go.data() + na, nb);
                   });
    return out;
}

// -------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T s = 0;
    for (int64_t i = 0; i < a.size(); ++i) s += a.ptr()[i];
    Tensor<T> out = Tensor<T>::scalar(s);
    detail::record(out, joint_tape<T>({&a}),
                   [an = a.node, n = a.size()](Tape<T>& t, const std::vector<T>& go) {
                       auto& ga = t.grad(an);
                       for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += go[0];
                   });
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    T s = 0;
    for (int64_t i = 0; i < a.size(); ++i) s += a.ptr()[i];
    const T inv = T(1) / T(a.size());
    Tensor<T> out = Tensor<T>::scalar(s * inv);
    detail::record(out, joint_tape<T>({&a}),
                   [an = a.node, n = a.size(), inv](Tape<T>& t, const std::vector<T>& go) {
                       auto& ga = t.grad(an);
                       for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += go[0] * inv;
                   });
    return out;
}

// Mean of scalar tensors; used to reduce per-example losses over a batch.
template <typename T>
Tensor<T> mean_of(const std::vector<Tensor<T>>& scalars) {
    MTDNN_CHECK(!scalars.empty(), ContractError, "mean_of: empty list");
    Tape<T>* tp = nullptr;
    T s = 0;
    std::vector<int> nodes;
    nodes.reserve(scalars.size());
    for (const auto& x : scalars) {
        MTDNN_CHECK(x.size() == 1, ContractError, "mean_of: operand is not scalar");
        s += x.ptr()[0];
        nodes.push_back(x.node);
        if (x.tracked()) {
            MTDNN_CHECK(tp == nullptr || tp == x.tape, ContractError,
                        "mean_of: operands live on different tapes");
            tp = x.tape;
        }
    }
    const T inv = T(1) / T(scalars.size());
    Tensor<T> out = Tensor<T>::scalar(s * inv);
    detail::record(out, tp, [nodes, inv](Tape<T>& t, const std::vector<T>& go) {
        for (int nd : nodes) {
            if (nd < 0) continue;
            const T g = go[0] * inv;
            t.add_grad(nd, &g, 1);
        }
    });
    return out;
}

// ---------------------------------------------------------------- dropout

// Inverted dropout: kept entries are scaled by 1/(1-p) so evaluation is the
// identity. Draws come from the rng the caller passes (one named stream per
// run), keeping training runs reproducible.
template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double p, Rng& rng, Mode mode) {
    MTDNN_CHECK(p >= 0.0 && p < 1.0, ContractError, "dropout: p must be in [0,1), got " << p);
    if (mode == Mode::Eval || p == 0.0) return a;
    MTDNN_CHECK(!GradCheckWatch::active(), ContractError,
                "dropout is active during a gradient check; put the model in eval mode");
    const T keep_scale = T(1.0 / (1.0 - p));
    auto mask = std::make_shared<std::vector<T>>(size_t(a.size()));
    Tensor<T> out = Tensor<T>::uninit(a.shape);
    for (int64_t i = 0; i < a.size(); ++i) {
        const T m = rng.next_double() < p ? T(0) : keep_scale;
        (*mask)[size_t(i)] = m;
        out.ptr()[i] = a.ptr()[i] * m;
    }
    detail::record(out, joint_tape<T>({&a}),
                   [an = a.node, mask](Tape<T>& t, const std::vector<T>& go) {
                       auto& ga = t.grad(an);
                       for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * (*mask)[i];
                   });
    return out;
}

// ------------------------------------------------------------------ losses

namespace detail {

// Writes log-softmax of each row of x [n x k] into lsm.
template <typename T>
void log_softmax_rows(const T* x, T* lsm, int n, int k) {
    for (int i = 0; i < n; ++i) {
        const T* row = x + size_t(i) * k;
        T* out = lsm + size_t(i) * k;
        T mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (int j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
        const T lse = mx + std::log(sum);
        for (int j = 0; j < k; ++j) out[j] = row[j] - lse;
    }
}

}  // namespace detail

// Mean negative log-likelihood of hard class ids. logits is [n x k] (a 1-D
// logit vector is treated as one row).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
    Tensor<T> lg = logits.ndim() == 1 ? reshape(logits, {1, logits.shape[0]}) : logits;
    MTDNN_CHECK(lg.ndim() == 2, ShapeError,
                "cross_entropy: logits must be 1-D or 2-D, got " << shape_str(logits.shape));
    const int n = lg.shape[0], k = lg.shape[1];
    MTDNN_CHECK(int(targets.size()) == n, ShapeError,
                "cross_entropy: " << n << " logit rows but " << targets.size() << " targets");
    for (size_t i = 0; i < targets.size(); ++i)
        MTDNN_CHECK(targets[i] >= 0 && targets[i] < k, IndexError,
                    "cross_entropy: target id " << targets[i] << " out of range [0," << k
                                                << ") at row " << i);
    auto lsm = std::make_shared<std::vector<T>>(size_t(n) * k);
    detail::log_softmax_rows(lg.ptr(), lsm->data(), n, k);
    T loss = 0;
    for (int i = 0; i < n; ++i) loss -= (*lsm)[size_t(i) * k + targets[size_t(i)]];
    loss /= T(n);
    Tensor<T> out = Tensor<T>::scalar(loss);
    detail::record(out, joint_tape<T>({&lg}),
                   [ln = lg.node, lsm, targets, n, k](Tape<T>& t, const std::vector<T>& go) {
                       auto& gl = t.grad(ln);
                       const T w = go[0] / T(n);
                       for (int i = 0; i < n; ++i)
                           for (int j = 0; j < k; ++j) {
                               const T p = std::exp((*lsm)[size_t(i) * k + j]);
                               const T ind = j == targets[size_t(i)] ? T(1) : T(0);
                               gl[size_t(i) * k + j] += w * (p - ind);
                           }
                   });
    return out;
}

// Soft-target cross entropy: mean over rows of -sum(target * log_softmax).
// Targets are fixed probability rows (each must sum to 1 +/- 1e-6).
template <typename T>
Tensor<T> cross_entropy_soft(const Tensor<T>& logits, const std::vector<T>& target_rows) {
    Tensor<T> lg = logits.ndim() == 1 ? reshape(logits, {1, logits.shape[0]}) : logits;
    MTDNN_CHECK(lg.ndim() == 2, ShapeError,
                "cross_entropy: logits must be 1-D or 2-D, got " << shape_str(logits.shape));
    const int n = lg.shape[0], k = lg.shape[1];
    MTDNN_CHECK(int64_t(target_rows.size()) == int64_t(n) * k, ShapeError,
                "cross_entropy: target rows size " << target_rows.size() << " != " << n << "x" << k);
    for (int i = 0; i < n; ++i) {
        T s = 0;
        for (int j = 0; j < k; ++j) s += target_rows[size_t(i) * k + j];
        MTDNN_CHECK(std::abs(double(s) - 1.0) <= 1e-6, ContractError,
                    "cross_entropy: soft target row " << i << " sums to " << double(s)
                                                      << ", expected 1");
    }
    auto lsm = std::make_shared<std::vector<T>>(size_t(n) * k);
    detail::log_softmax_rows(lg.ptr(), lsm->data(), n, k);
    T loss = 0;
    for (int64_t i = 0; i < int64_t(n) * k; ++i) loss -= target_rows[size_t(i)] * (*lsm)[size_t(i)];
    loss /= T(n);
    Tensor<T> out = Tensor<T>::scalar(loss);
    detail::record(out, joint_tape<T>({&lg}),
                   [ln = lg.node, lsm, target_rows, n, k](Tape<T>& t, const std::vector<T>& go) {
                       auto& gl = t.grad(ln);
                       const T w = go[0] / T(n);
                       for (int i = 0; i < n; ++i) {
                           T row_sum = 0;
                           for (int j = 0; j < k; ++j) row_sum += target_rows[size_t(i) * k + j];
                           for (int j = 0; j < k; ++j) {
                               const T p = std::exp((*lsm)[size_t(i) * k + j]);
                               gl[size_t(i) * k + j] +=
                                   w * (row_sum * p - target_rows[size_t(i) * k + j]);
                           }
                       }
                   });
    return out;
}

enum class Divergence { Mse, Kl, SymmetricKl };

inline const char* divergence_name(Divergence d) {
    switch (d) {
        case Divergence::Mse: return "mse";
        case Divergence::Kl: return "kl";
        case Divergence::SymmetricKl: return "symmetric_kl";
    }
    return "?";
}

namespace detail {

template <typename T>
void check_prob_rows(const Tensor<T>& p, const char* who) {
    const int k = p.ndim() == 2 ? p.shape[1] : p.shape[0];
    const int n = p.ndim() == 2 ? p.shape[0] : 1;
    for (int i = 0; i < n; ++i) {
        T s = 0;
        for (int j = 0; j < k; ++j) s += p.ptr()[size_t(i) * k + j];
        MTDNN_CHECK(std::abs(double(s) - 1.0) <= 1e-6, ContractError,
                    who << ": probability row " << i << " sums to " << double(s) << ", expected 1");
    }
}

// KL(p||q) summed over all entries, with q floored at 1e-12 and 0*log0 = 0.
template <typename T>
Tensor<T> kl_core(const Tensor<T>& p, const Tensor<T>& q) {
    check_same_shape(p, q, "kl");
    constexpr T kFloor = T(1e-12);
    T loss = 0;
    const int64_t n = p.size();
    for (int64_t i = 0; i < n; ++i) {
        const T pi = p.ptr()[i];
        if (pi <= T(0)) continue;
        const T qi = std::max(q.ptr()[i], kFloor);
        loss += pi * (std::log(pi) - std::log(qi));
    }
    Tensor<T> out = Tensor<T>::scalar(loss);
    record(out, joint_tape<T>({&p, &q}),
           [pn = p.node, qn = q.node, pb = p.buf, qb = q.buf, n, kFloor](
               Tape<T>& t, const std::vector<T>& go) {
               const T g = go[0];
               if (pn >= 0) {
                   auto& gp = t.grad(pn);
                   for (int64_t i = 0; i < n; ++i) {
                       const T pi = (*pb)[size_t(i)];
                       if (pi <= T(0)) continue;
                       const T qi = std::max((*qb)[size_t(i)], kFloor);
                       gp[size_t(i)] += g * (std::log(pi) - std::log(qi) + T(1));
                   }
               }
               if (qn >= 0) {
                   auto& gq = t.grad(qn);
                   for (int64_t i = 0; i < n; ++i) {
                       const T pi = (*pb)[size_t(i)];
                       if (pi <= T(0)) continue;
                       if ((*qb)[size_t(i)] <= kFloor) continue;  // clamped: no gradient
                       gq[size_t(i)] -= g * pi / (*qb)[size_t(i)];
                   }
               }
           });
    return out;
}

}  // namespace detail

// mse = mean squared difference; kl variants expect probability rows.
template <typename T>
Tensor<T> divergence(Divergence kind, const Tensor<T>& p, const Tensor<T>& q) {
    switch (kind) {
        case Divergence::Mse: {
            detail::check_same_shape(p, q, "mse");
            const int64_t n = p.size();
            T loss = 0;
            for (int64_t i = 0; i < n; ++i) {
                const T d = p.ptr()[i] - q.ptr()[i];
                loss += d * d;
            }
            loss /= T(n);
            Tensor<T> out = Tensor<T>::scalar(loss);
            detail::record(out, joint_tape<T>({&p, &q}),
                           [pn = p.node, qn = q.node, pb = p.buf, qb = q.buf,
                            n](Tape<T>& t, const std::vector<T>& go) {
                               const T w = go[0] * T(2) / T(n);
                               for (int64_t i = 0; i < n; ++i) {
                                   const T d = (*pb)[size_t(i)] - (*qb)[size_t(i)];
                                   if (pn >= 0) t.grad(pn)[size_t(i)] += w * d;
                                   if (qn >= 0) t.grad(qn)[size_t(i)] -= w * d;
                               }
                           });
            return out;
        }
        case Divergence::Kl:
            detail::check_prob_rows(p, "kl(p,.)");
            detail::check_prob_rows(q, "kl(.,q)");
            return detail::kl_core(p, q);
        case Divergence::SymmetricKl: {
            detail::check_prob_rows(p, "symmetric_kl(p,.)");
            detail::check_prob_rows(q, "symmetric_kl(.,q)");
            return add(detail::kl_core(p, q), detail::kl_core(q, p));
        }
    }
    MTDNN_THROW(ContractError, "divergence: unknown kind");
}

// --------------------------------------------------------------- helpers

// x [in] -> [out] through weight [in x out] and bias [out].
template <typename T>
Tensor<T> linear_vec(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    MTDNN_CHECK(x.ndim() == 1, ShapeError, "linear_vec: expects 1-D input, got " << shape_str(x.shape));
    Tensor<T> y = matmul(reshape(x, {1, x.shape[0]}), w);
    return add(reshape(y, {y.shape[1]}), b);
}

}  // namespace mtdnn
