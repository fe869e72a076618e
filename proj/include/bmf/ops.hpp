#pragma once

#include <cmath>
#include <numeric>

#include "bmf/tensor.hpp"

namespace bmf {

namespace detail {

// C(m x n) += op(A) * op(B). op(A) is m x k (stored k x m when ta),
// op(B) is k x n (stored n x k when tb).
template <typename T>
void gemm_acc(bool ta, bool tb, int64_t m, int64_t n, int64_t k, const T* A, const T* B, T* C) {
    if (!ta && !tb) {
        for (int64_t i = 0; i < m; ++i) {
            T* c = C + i * n;
            const T* a = A + i * k;
            for (int64_t p = 0; p < k; ++p) {
                T av = a[p];
                const T* b = B + p * n;
                for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
            }
        }
    } else if (!ta && tb) {
        for (int64_t i = 0; i < m; ++i) {
            const T* a = A + i * k;
            T* c = C + i * n;
            for (int64_t j = 0; j < n; ++j) {
                const T* b = B + j * k;
                T s = 0;
                for (int64_t p = 0; p < k; ++p) s += a[p] * b[p];
                c[j] += s;
            }
        }
    } else if (ta && !tb) {
        for (int64_t p = 0; p < k; ++p) {
            const T* a = A + p * m;
            const T* b = B + p * n;
            for (int64_t i = 0; i < m; ++i) {
                T av = a[i];
                T* c = C + i * n;
                for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
            }
        }
    } else {
        for (int64_t i = 0; i < m; ++i) {
            T* c = C + i * n;
            for (int64_t j = 0; j < n; ++j) {
                const T* b = B + j * k;
                T s = 0;
                for (int64_t p = 0; p < k; ++p) s += A[p * m + i] * b[p];
                c[j] += s;
            }
        }
    }
}

inline int64_t ceil_div(int64_t a, int64_t b) { return a > 0 ? (a + b - 1) / b : 0; }

}  // namespace detail

template <typename T>
void check_finite(const Tensor<T>& t, const std::string& context) {
    if (!t.all_finite()) fail(context + ": non-finite values detected");
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.shape() == b.shape(), "add: shape mismatch ", shape_str(a.shape()), " vs ",
          shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto* o = out.node().get();
    const T* av = a.data().data();
    const T* bv = b.data().data();
    for (int64_t i = 0; i < out.numel(); ++i) o->value[i] = av[i] + bv[i];
    if (detail::want_grad<T>({&a, &b})) {
        auto* an = a.node().get();
        auto* bn = b.node().get();
        detail::attach(out, {a, b}, [o, an, bn] {
            int64_t n = o->numel();
            if (an->requires_grad)
                for (int64_t i = 0; i < n; ++i) an->grad[i] += o->grad[i];
            if (bn->requires_grad)
                for (int64_t i = 0; i < n; ++i) bn->grad[i] += o->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.shape() == b.shape(), "sub: shape mismatch ", shape_str(a.shape()), " vs ",
          shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto* o = out.node().get();
    const T* av = a.data().data();
    const T* bv = b.data().data();
    for (int64_t i = 0; i < out.numel(); ++i) o->value[i] = av[i] - bv[i];
    if (detail::want_grad<T>({&a, &b})) {
        auto* an = a.node().get();
        auto* bn = b.node().get();
        detail::attach(out, {a, b}, [o, an, bn] {
            int64_t n = o->numel();
            if (an->requires_grad)
                for (int64_t i = 0; i < n; ++i) an->grad[i] += o->grad[i];
            if (bn->requires_grad)
                for (int64_t i = 0; i < n; ++i) bn->grad[i] -= o->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.shape() == b.shape(), "mul: shape mismatch ", shape_str(a.shape()), " vs ",
          shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto* o = out.node().get();
    const T* av = a.data().data();
    const T* bv = b.data().data();
    for (int64_t i = 0; i < out.numel(); ++i) o->value[i] = av[i] * bv[i];
    if (detail::want_grad<T>({&a, &b})) {
        auto* an = a.node().get();
        auto* bn = b.node().get();
        detail::attach(out, {a, b}, [o, an, bn] {
            int64_t n = o->numel();
            if (an->requires_grad)
                for (int64_t i = 0; i < n; ++i) an->grad[i] += o->grad[i] * bn->value[i];
            if (bn->requires_grad)
                for (int64_t i = 0; i < n; ++i) bn->grad[i] += o->grad[i] * an->value[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto* o = out.node().get();
    const T* av = a.data().data();
    for (int64_t i = 0; i < out.numel(); ++i) o->value[i] = av[i] * c;
    if (detail::want_grad<T>({&a})) {
        auto* an = a.node().get();
        detail::attach(out, {a}, [o, an, c] {
            for (int64_t i = 0; i < o->numel(); ++i) an->grad[i] += o->grad[i] * c;
        });
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto* o = out.node().get();
    const T* av = a.data().data();
    for (int64_t i = 0; i < out.numel(); ++i) o->value[i] = av[i] > T(0) ? av[i] : T(0);
    if (detail::want_grad<T>({&a})) {
        auto* an = a.node().get();
        detail::attach(out, {a}, [o, an] {
            for (int64_t i = 0; i < o->numel(); ++i)
                if (an->value[i] > T(0)) an->grad[i] += o->grad[i];
        });
    }
    return out;
}

// tanh-approximation form
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    static const T c = T(std::sqrt(2.0 / M_PI));
    static const T k = T(0.044715);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    auto* o = out.node().get();
    const T* av = a.data().data();
    for (int64_t i = 0; i < out.numel(); ++i) {
        T x = av[i];
        o->value[i] = T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x)));
    }
    if (detail::want_grad<T>({&a})) {
        auto* an = a.node().get();
        detail::attach(out, {a}, [o, an] {
            for (int64_t i = 0; i < o->numel(); ++i) {
                T x = an->value[i];
                T t = std::tanh(c * (x + k * x * x * x));
                T d = T(0.5) * (T(1) + t) +
                      T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
                an->grad[i] += o->grad[i] * d;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int64_t> new_shape) {
    check(shape_numel(new_shape) == a.numel(), "reshape: ", shape_str(a.shape()), " -> ",
          shape_str(new_shape), " changes element count");
    Tensor<T> out = Tensor<T>::from(std::move(new_shape), {a.data().begin(), a.data().end()});
    if (detail::want_grad<T>({&a})) {
        auto* o = out.node().get();
        auto* an = a.node().get();
        detail::attach(out, {a}, [o, an] {
            for (int64_t i = 0; i < o->numel(); ++i) an->grad[i] += o->grad[i];
        });
    }
    return out;
}

inline std::vector<int64_t> row_major_strides(const std::vector<int64_t>& shape) {
    std::vector<int64_t> s(shape.size(), 1);
    for (int64_t i = (int64_t)shape.size() - 2; i >= 0; --i) s[i] = s[i + 1] * shape[i + 1];
    return s;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int64_t>& perm) {
    check((int64_t)perm.size() == a.dim(), "permute: rank mismatch");
    std::vector<int64_t> out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.shape()[perm[i]];
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    auto in_strides = row_major_strides(a.shape());
    // stride in the input for each output axis
    std::vector<int64_t> strides(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) strides[i] = in_strides[perm[i]];
    auto* o = out.node().get();
    const T* av = a.data().data();
    int64_t rank = a.dim();
    std::vector<int64_t> idx(rank, 0);
    int64_t n = out.numel();
    for (int64_t flat = 0, src = 0; flat < n; ++flat) {
        o->value[flat] = av[src];
        for (int64_t ax = rank - 1; ax >= 0; --ax) {
            src += strides[ax];
            if (++idx[ax] < out_shape[ax]) break;
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    if (detail::want_grad<T>({&a})) {
        auto* an = a.node().get();
        detail::attach(out, {a}, [o, an, strides, out_shape, rank] {
            std::vector<int64_t> ix(rank, 0);
            int64_t total = o->numel();
            for (int64_t flat = 0, src = 0; flat < total; ++flat) {
                an->grad[src] += o->grad[flat];
                for (int64_t ax = rank - 1; ax >= 0; --ax) {
                    src += strides[ax];
                    if (++ix[ax] < out_shape[ax]) break;
                    src -= strides[ax] * out_shape[ax];
                    ix[ax] = 0;
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int64_t axis, int64_t start, int64_t len) {
    if (axis < 0) axis += a.dim();
    check(axis >= 0 && axis < a.dim(), "slice: bad axis");
    check(start >= 0 && len >= 1 && start + len <= a.shape()[axis], "slice: range [", start, ",",
          start + len, ") out of bounds for axis size ", a.shape()[axis]);
    std::vector<int64_t> out_shape = a.shape();
    out_shape[axis] = len;
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= a.shape()[i];
    for (int64_t i = axis + 1; i < a.dim(); ++i) inner *= a.shape()[i];
    int64_t n_axis = a.shape()[axis];
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    auto* o = out.node().get();
    const T* av = a.data().data();
    for (int64_t ou = 0; ou < outer; ++ou)
        for (int64_t j = 0; j < len; ++j) {
            const T* src = av + (ou * n_axis + start + j) * inner;
            T* dst = o->value.data() + (ou * len + j) * inner;
            std::copy(src, src + inner, dst);
        }
    if (detail::want_grad<T>({&a})) {
        auto* an = a.node().get();
        detail::attach(out, {a}, [o, an, outer, inner, n_axis, start, len] {
            for (int64_t ou = 0; ou < outer; ++ou)
                for (int64_t j = 0; j < len; ++j) {
                    T* dst = an->grad.data() + (ou * n_axis + start + j) * inner;
                    const T* src = o->grad.data() + (ou * len + j) * inner;
                    for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, int64_t axis) {
    if (axis < 0) axis += a.dim();
    check(a.dim() == b.dim(), "concat: rank mismatch");
    for (int64_t i = 0; i < a.dim(); ++i)
        check(i == axis || a.shape()[i] == b.shape()[i], "concat: shape mismatch ",
              shape_str(a.shape()), " vs ", shape_str(b.shape()), " on axis ", i);
    std::vector<int64_t> out_shape = a.shape();
    out_shape[axis] += b.shape()[axis];
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= a.shape()[i];
    for (int64_t i = axis + 1; i < a.dim(); ++i) inner *= a.shape()[i];
    int64_t na = a.shape()[axis], nb = b.shape()[axis];
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    auto* o = out.node().get();
    const T* av = a.data().data();
    const T* bv = b.data().data();
    for (int64_t ou = 0; ou < outer; ++ou) {
        T* dst = o->value.data() + ou * (na + nb) * inner;
        std::copy(av + ou * na * inner, av + (ou + 1) * na * inner, dst);
        std::copy(bv + ou * nb * inner, bv + (ou + 1) * nb * inner, dst + na * inner);
    }
    if (detail::want_grad<T>({&a, &b})) {
        auto* an = a.node().get();
        auto* bn = b.node().get();
        detail::attach(out, {a, b}, [o, an, bn, outer, inner, na, nb] {
            for (int64_t ou = 0; ou < outer; ++ou) {
                const T* g = o->grad.data() + ou * (na + nb) * inner;
                if (an->requires_grad) {
                    T* dst = an->grad.data() + ou * na * inner;
                    for (int64_t i = 0; i < na * inner; ++i) dst[i] += g[i];
                }
                if (bn->requires_grad) {
                    T* dst = bn->grad.data() + ou * nb * inner;
                    for (int64_t i = 0; i < nb * inner; ++i) dst[i] += g[na * inner + i];
                }
            }
        });
    }
    return out;
}

// Repeats a [1, ...] tensor along axis 0. Backward sums over the copies.
template <typename T>
Tensor<T> expand0(const Tensor<T>& a, int64_t n) {
    check(a.dim() >= 1 && a.shape()[0] == 1, "expand0: leading axis must be 1");
    std::vector<int64_t> out_shape = a.shape();
    out_shape[0] = n;
    int64_t chunk = a.numel();
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    auto* o = out.node().get();
    const T* av = a.data().data();
    for (int64_t i = 0; i < n; ++i) std::copy(av, av + chunk, o->value.data() + i * chunk);
    if (detail::want_grad<T>({&a})) {
        auto* an = a.node().get();
        detail::attach(out, {a}, [o, an, n, chunk] {
            for (int64_t i = 0; i < n; ++i) {
                const T* g = o->grad.data() + i * chunk;
                for (int64_t j = 0; j < chunk; ++j) an->grad[j] += g[j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T s = 0;
    for (T v : a.data()) s += v;
    Tensor<T> out = Tensor<T>::scalar(s);
    if (detail::want_grad<T>({&a})) {
        auto* o = out.node().get();
        auto* an = a.node().get();
        detail::attach(out, {a}, [o, an] {
            T g = o->grad[0];
            for (auto& gv : an->grad) gv += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    return scale(sum_all(a), T(1) / T(a.numel()));
}

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

// a: [..., m, k]; b: [k, n] (shared over batch) or [..., k, n]. With
// transpose_b, b's last two axes are [n, k].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
    check(a.dim() >= 2 && b.dim() >= 2, "matmul: operands must have rank >= 2");
    int64_t m = a.shape()[a.dim() - 2];
    int64_t k = a.shape()[a.dim() - 1];
    int64_t bk = transpose_b ? b.shape()[b.dim() - 1] : b.shape()[b.dim() - 2];
    int64_t n = transpose_b ? b.shape()[b.dim() - 2] : b.shape()[b.dim() - 1];
    check(bk == k, "matmul: inner dimension mismatch ", shape_str(a.shape()), " vs ",
          shape_str(b.shape()), (transpose_b ? " (b transposed)" : ""));
    bool shared_b = b.dim() == 2;
    int64_t batch = 1;
    std::vector<int64_t> out_shape;
    for (int64_t i = 0; i + 2 < a.dim(); ++i) {
        batch *= a.shape()[i];
        out_shape.push_back(a.shape()[i]);
    }
    if (!shared_b) {
        check(a.dim() == b.dim(), "matmul: batched operands must have equal rank");
        for (int64_t i = 0; i + 2 < a.dim(); ++i)
            check(a.shape()[i] == b.shape()[i], "matmul: batch dims differ");
    }
    out_shape.push_back(m);
    out_shape.push_back(n);

    Tensor<T> out = Tensor<T>::zeros(out_shape);
    auto* o = out.node().get();
    const T* av = a.data().data();
    const T* bv = b.data().data();
    int64_t b_step = shared_b ? 0 : k * n;
    for (int64_t bt = 0; bt < batch; ++bt)
        detail::gemm_acc(false, transpose_b, m, n, k, av + bt * m * k, bv + bt * b_step,
                         o->value.data() + bt * m * n);
    if (detail::want_grad<T>({&a, &b})) {
        auto* an = a.node().get();
        auto* bn = b.node().get();
        detail::attach(out, {a, b}, [o, an, bn, m, n, k, batch, b_step, transpose_b] {
            for (int64_t bt = 0; bt < batch; ++bt) {
                const T* g = o->grad.data() + bt * m * n;
                const T* bvv = bn->value.data() + bt * b_step;
                const T* avv = an->value.data() + bt * m * k;
                if (an->requires_grad) {
                    T* da = an->grad.data() + bt * m * k;
                    // da = g * op(b)^T
                    detail::gemm_acc(false, !transpose_b, m, k, n, g, bvv, da);
                }
                if (bn->requires_grad) {
                    T* db = bn->grad.data() + bt * b_step;
                    if (transpose_b)
                        detail::gemm_acc(true, false, n, k, m, g, avv, db);  // db = g^T * a
                    else
                        detail::gemm_acc(true, false, k, n, m, avv, g, db);  // db = a^T * g
                }
            }
        });
    }
    return out;
}

// input: [..., d_in], weight: [d_in, d_out], bias: [d_out] (optional).
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
    check(input.dim() >= 1 && weight.dim() == 2, "linear: bad ranks");
    int64_t d_in = weight.shape()[0];
    int64_t d_out = weight.shape()[1];
    check(input.shape().back() == d_in, "linear: input last dim ", input.shape().back(),
          " != weight d_in ", d_in);
    if (bias.defined())
        check(bias.numel() == d_out, "linear: bias length ", bias.numel(), " != d_out ", d_out);
    int64_t rows = input.numel() / d_in;
    std::vector<int64_t> out_shape = input.shape();
    out_shape.back() = d_out;
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    auto* o = out.node().get();
    if (bias.defined()) {
        const T* bv = bias.data().data();
        for (int64_t r = 0; r < rows; ++r)
            std::copy(bv, bv + d_out, o->value.data() + r * d_out);
    }
    detail::gemm_acc(false, false, rows, d_out, d_in, input.data().data(), weight.data().data(),
                     o->value.data());
    if (detail::want_grad<T>({&input, &weight, &bias})) {
        auto* xn = input.node().get();
        auto* wn = weight.node().get();
        auto* bn = bias.defined() ? bias.node().get() : nullptr;
        detail::attach(out, {input, weight, bias}, [o, xn, wn, bn, rows, d_in, d_out] {
            const T* g = o->grad.data();
            if (xn->requires_grad)
                detail::gemm_acc(false, true, rows, d_in, d_out, g, wn->value.data(),
                                 xn->grad.data());
            if (wn->requires_grad)
                detail::gemm_acc(true, false, d_in, d_out, rows, xn->value.data(), g,
                                 wn->grad.data());
            if (bn && bn->requires_grad)
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < d_out; ++j) bn->grad[j] += g[r * d_out + j];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv / pooling
// ---------------------------------------------------------------------------

// input: [B, C_in, H, W] (or [C_in, H, W]), weight: [C_out, C_in, kh, kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::pair<int64_t, int64_t> stride, std::pair<int64_t, int64_t> padding) {
    bool batched = input.dim() == 4;
    check(batched || input.dim() == 3, "conv2d: input must be rank 3 or 4, got ",
          shape_str(input.shape()));
    check(weight.dim() == 4, "conv2d: weight must be [C_out, C_in, kh, kw]");
    const auto& is = input.shape();
    int64_t B = batched ? is[0] : 1;
    int64_t C_in = is[batched ? 1 : 0], H = is[batched ? 2 : 1], W = is[batched ? 3 : 2];
    int64_t C_out = weight.shape()[0], kh = weight.shape()[2], kw = weight.shape()[3];
    auto [sh, sw] = stride;
    auto [ph, pw] = padding;
    check(weight.shape()[1] == C_in, "conv2d: weight C_in ", weight.shape()[1],
          " != input channels ", C_in);
    check(sh >= 1 && sw >= 1, "conv2d: strides must be >= 1");
    check(kh <= H + 2 * ph && kw <= W + 2 * pw, "conv2d: kernel ", kh, "x", kw,
          " exceeds padded input ", H + 2 * ph, "x", W + 2 * pw);
    if (bias.defined()) check(bias.numel() == C_out, "conv2d: bias length != C_out");
    int64_t OH = (H + 2 * ph - kh) / sh + 1;
    int64_t OW = (W + 2 * pw - kw) / sw + 1;

    std::vector<int64_t> out_shape =
        batched ? std::vector<int64_t>{B, C_out, OH, OW} : std::vector<int64_t>{C_out, OH, OW};
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    auto* o = out.node().get();
    const T* xv = input.data().data();
    const T* wv = weight.data().data();
    if (bias.defined()) {
        const T* bv = bias.data().data();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t co = 0; co < C_out; ++co)
                std::fill_n(o->value.data() + (b * C_out + co) * OH * OW, OH * OW, bv[co]);
    }
    // accumulate per kernel tap over the valid output window
    auto run_forward = [=](T* ov) {
        for (int64_t b = 0; b < B; ++b)
            for (int64_t co = 0; co < C_out; ++co)
                for (int64_t ci = 0; ci < C_in; ++ci)
                    for (int64_t kr = 0; kr < kh; ++kr) {
                        int64_t oh_lo = std::max<int64_t>(0, detail::ceil_div(ph - kr, sh));
                        int64_t oh_hi_num = H - 1 - kr + ph;
                        if (oh_hi_num < 0) continue;
                        int64_t oh_hi = std::min(OH - 1, oh_hi_num / sh);
                        for (int64_t kc = 0; kc < kw; ++kc) {
                            T wval = wv[((co * C_in + ci) * kh + kr) * kw + kc];
                            int64_t ow_lo = std::max<int64_t>(0, detail::ceil_div(pw - kc, sw));
                            int64_t ow_hi_num = W - 1 - kc + pw;
                            if (ow_hi_num < 0) continue;
                            int64_t ow_hi = std::min(OW - 1, ow_hi_num / sw);
                            for (int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                                int64_t ih = oh * sh + kr - ph;
                                const T* xrow = xv + ((b * C_in + ci) * H + ih) * W;
                                T* orow = ov + ((b * C_out + co) * OH + oh) * OW;
                                for (int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                                    orow[ow] += wval * xrow[ow * sw + kc - pw];
                            }
                        }
                    }
    };
    run_forward(o->value.data());

    if (detail::want_grad<T>({&input, &weight, &bias})) {
        auto* xn = input.node().get();
        auto* wn = weight.node().get();
        auto* bn = bias.defined() ? bias.node().get() : nullptr;
        detail::attach(out, {input, weight, bias},
                       [o, xn, wn, bn, B, C_in, C_out, H, W, kh, kw, sh, sw, ph, pw, OH, OW] {
            const T* g = o->grad.data();
            if (bn && bn->requires_grad)
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t co = 0; co < C_out; ++co) {
                        const T* grow = g + (b * C_out + co) * OH * OW;
                        T s = 0;
                        for (int64_t i = 0; i < OH * OW; ++i) s += grow[i];
                        bn->grad[co] += s;
                    }
            for (int64_t b = 0; b < B; ++b)
                for (int64_t co = 0; co < C_out; ++co)
                    for (int64_t ci = 0; ci < C_in; ++ci)
                        for (int64_t kr = 0; kr < kh; ++kr) {
                            int64_t oh_lo = std::max<int64_t>(0, detail::ceil_div(ph - kr, sh));
                            int64_t oh_hi_num = H - 1 - kr + ph;
                            if (oh_hi_num < 0) continue;
                            int64_t oh_hi = std::min(OH - 1, oh_hi_num / sh);
                            for (int64_t kc = 0; kc < kw; ++kc) {
                                int64_t ow_lo =
                                    std::max<int64_t>(0, detail::ceil_div(pw - kc, sw));
                                int64_t ow_hi_num = W - 1 - kc + pw;
                                if (ow_hi_num < 0) continue;
                                int64_t ow_hi = std::min(OW - 1, ow_hi_num / sw);
                                int64_t widx = ((co * C_in + ci) * kh + kr) * kw + kc;
                                T wval = wn->value[widx];
                                T wacc = 0;
                                for (int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                                    int64_t ih = oh * sh + kr - ph;
                                    const T* grow = g + ((b * C_out + co) * OH + oh) * OW;
                                    const T* xrow =
                                        xn->value.data() + ((b * C_in + ci) * H + ih) * W;
                                    T* dxrow = xn->requires_grad
                                                   ? xn->grad.data() + ((b * C_in + ci) * H + ih) * W
                                                   : nullptr;
                                    for (int64_t ow = ow_lo; ow <= ow_hi; ++ow) {
                                        int64_t iw = ow * sw + kc - pw;
                                        wacc += grow[ow] * xrow[iw];
                                        if (dxrow) dxrow[iw] += wval * grow[ow];
                                    }
                                }
                                if (wn->requires_grad) wn->grad[widx] += wacc;
                            }
                        }
        });
    }
    return out;
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& input, std::pair<int64_t, int64_t> kernel,
                     std::pair<int64_t, int64_t> stride) {
    bool batched = input.dim() == 4;
    check(batched || input.dim() == 3, "max_pool2d: input must be rank 3 or 4");
    const auto& is = input.shape();
    int64_t B = batched ? is[0] : 1;
    int64_t C = is[batched ? 1 : 0], H = is[batched ? 2 : 1], W = is[batched ? 3 : 2];
    auto [kh, kw] = kernel;
    auto [sh, sw] = stride;
    check(kh <= H && kw <= W, "max_pool2d: kernel larger than input");
    int64_t OH = (H - kh) / sh + 1, OW = (W - kw) / sw + 1;
    std::vector<int64_t> out_shape =
        batched ? std::vector<int64_t>{B, C, OH, OW} : std::vector<int64_t>{C, OH, OW};
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    auto* o = out.node().get();
    const T* xv = input.data().data();
    std::vector<int64_t> argmax(out.numel());
    for (int64_t bc = 0; bc < B * C; ++bc)
        for (int64_t oh = 0; oh < OH; ++oh)
            for (int64_t ow = 0; ow < OW; ++ow) {
                int64_t best = (bc * H + oh * sh) * W + ow * sw;
                T bv = xv[best];
                for (int64_t r = 0; r < kh; ++r)
                    for (int64_t c = 0; c < kw; ++c) {
                        int64_t idx = (bc * H + oh * sh + r) * W + ow * sw + c;
                        if (xv[idx] > bv) {
                            bv = xv[idx];
                            best = idx;
                        }
                    }
                int64_t oidx = (bc * OH + oh) * OW + ow;
                o->value[oidx] = bv;
                argmax[oidx] = best;
            }
    if (detail::want_grad<T>({&input})) {
        auto* xn = input.node().get();
        detail::attach(out, {input}, [o, xn, argmax = std::move(argmax)] {
            for (int64_t i = 0; i < o->numel(); ++i) xn->grad[argmax[i]] += o->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& input, std::pair<int64_t, int64_t> kernel,
                     std::pair<int64_t, int64_t> stride) {
    bool batched = input.dim() == 4;
    check(batched || input.dim() == 3, "avg_pool2d: input must be rank 3 or 4");
    const auto& is = input.shape();
    int64_t B = batched ? is[0] : 1;
    int64_t C = is[batched ? 1 : 0], H = is[batched ? 2 : 1], W = is[batched ? 3 : 2];
    auto [kh, kw] = kernel;
    auto [sh, sw] = stride;
    check(kh <= H && kw <= W, "avg_pool2d: kernel larger than input");
    int64_t OH = (H - kh) / sh + 1, OW = (W - kw) / sw + 1;
    std::vector<int64_t> out_shape =
        batched ? std::vector<int64_t>{B, C, OH, OW} : std::vector<int64_t>{C, OH, OW};
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    auto* o = out.node().get();
    const T* xv = input.data().data();
    T inv = T(1) / T(kh * kw);
    for (int64_t bc = 0; bc < B * C; ++bc)
        for (int64_t oh = 0; oh < OH; ++oh)
            for (int64_t ow = 0; ow < OW; ++ow) {
                T s = 0;
                for (int64_t r = 0; r < kh; ++r)
                    for (int64_t c = 0; c < kw; ++c)
                        s += xv[(bc * H + oh * sh + r) * W + ow * sw + c];
                o->value[(bc * OH + oh) * OW + ow] = s * inv;
            }
    if (detail::want_grad<T>({&input})) {
        auto* xn = input.node().get();
        detail::attach(out, {input}, [o, xn, B, C, H, W, kh, kw, sh, sw, OH, OW, inv] {
            for (int64_t bc = 0; bc < B * C; ++bc)
                for (int64_t oh = 0; oh < OH; ++oh)
                    for (int64_t ow = 0; ow < OW; ++ow) {
                        T g = o->grad[(bc * OH + oh) * OW + ow] * inv;
                        for (int64_t r = 0; r < kh; ++r)
                            for (int64_t c = 0; c < kw; ++c)
                                xn->grad[(bc * H + oh * sh + r) * W + ow * sw + c] += g;
                    }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// normalization / softmax
// ---------------------------------------------------------------------------

// Normalizes over the last axis, then applies the affine (gamma, beta).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
    int64_t e = x.shape().back();
    check(e >= 1, "layer_norm: empty rows");
    check(gamma.numel() == e && beta.numel() == e, "layer_norm: affine params must have length ",
          e);
    int64_t rows = x.numel() / e;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto* o = out.node().get();
    const T* xv = x.data().data();
    const T* gv = gamma.data().data();
    const T* bv = beta.data().data();
    std::vector<T> mu(rows), rstd(rows);
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = xv + r * e;
        T m = 0;
        for (int64_t j = 0; j < e; ++j) m += row[j];
        m /= T(e);
        T var = 0;
        for (int64_t j = 0; j < e; ++j) var += (row[j] - m) * (row[j] - m);
        var /= T(e);
        T rs = T(1) / std::sqrt(var + eps);
        mu[r] = m;
        rstd[r] = rs;
        T* orow = o->value.data() + r * e;
        for (int64_t j = 0; j < e; ++j) orow[j] = (row[j] - m) * rs * gv[j] + bv[j];
    }
    if (detail::want_grad<T>({&x, &gamma, &beta})) {
        auto* xn = x.node().get();
        auto* gn = gamma.node().get();
        auto* bn = beta.node().get();
        detail::attach(out, {x, gamma, beta},
                       [o, xn, gn, bn, rows, e, mu = std::move(mu), rstd = std::move(rstd)] {
            for (int64_t r = 0; r < rows; ++r) {
                const T* dy = o->grad.data() + r * e;
                const T* xrow = xn->value.data() + r * e;
                T m = mu[r], rs = rstd[r];
                T sum_dyg = 0, sum_dygx = 0;
                for (int64_t j = 0; j < e; ++j) {
                    T xh = (xrow[j] - m) * rs;
                    T dg = dy[j] * gn->value[j];
                    sum_dyg += dg;
                    sum_dygx += dg * xh;
                    if (gn->requires_grad) gn->grad[j] += dy[j] * xh;
                    if (bn->requires_grad) bn->grad[j] += dy[j];
                }
                if (xn->requires_grad) {
                    T inv_e = T(1) / T(e);
                    T* dx = xn->grad.data() + r * e;
                    for (int64_t j = 0; j < e; ++j) {
                        T xh = (xrow[j] - m) * rs;
                        T dg = dy[j] * gn->value[j];
                        dx[j] += rs * (dg - inv_e * sum_dyg - xh * inv_e * sum_dygx);
                    }
                }
            }
        });
    }
    return out;
}

namespace detail {
template <typename T>
void axis_extents(const Tensor<T>& x, int64_t& axis, int64_t& outer, int64_t& n, int64_t& inner) {
    if (axis < 0) axis += x.dim();
    check(axis >= 0 && axis < x.dim(), "softmax: bad axis");
    outer = 1;
    inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= x.shape()[i];
    for (int64_t i = axis + 1; i < x.dim(); ++i) inner *= x.shape()[i];
    n = x.shape()[axis];
}
}  // namespace detail

// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int64_t axis = -1) {
    int64_t outer, n, inner;
    detail::axis_extents(x, axis, outer, n, inner);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto* o = out.node().get();
    const T* xv = x.data().data();
    for (int64_t ou = 0; ou < outer; ++ou)
        for (int64_t in = 0; in < inner; ++in) {
            int64_t base = ou * n * inner + in;
            T mx = xv[base];
            for (int64_t i = 1; i < n; ++i) mx = std::max(mx, xv[base + i * inner]);
            T sum = 0;
            for (int64_t i = 0; i < n; ++i) {
                T ev = std::exp(xv[base + i * inner] - mx);
                o->value[base + i * inner] = ev;
                sum += ev;
            }
            T inv = T(1) / sum;
            for (int64_t i = 0; i < n; ++i) o->value[base + i * inner] *= inv;
        }
    if (detail::want_grad<T>({&x})) {
        auto* xn = x.node().get();
        detail::attach(out, {x}, [o, xn, outer, n, inner] {
            for (int64_t ou = 0; ou < outer; ++ou)
                for (int64_t in = 0; in < inner; ++in) {
                    int64_t base = ou * n * inner + in;
                    T dot = 0;
                    for (int64_t i = 0; i < n; ++i)
                        dot += o->grad[base + i * inner] * o->value[base + i * inner];
                    for (int64_t i = 0; i < n; ++i)
                        xn->grad[base + i * inner] +=
                            o->value[base + i * inner] * (o->grad[base + i * inner] - dot);
                }
        });
    }
    return out;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, int64_t axis = -1) {
    int64_t outer, n, inner;
    detail::axis_extents(x, axis, outer, n, inner);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto* o = out.node().get();
    const T* xv = x.data().data();
    for (int64_t ou = 0; ou < outer; ++ou)
        for (int64_t in = 0; in < inner; ++in) {
            int64_t base = ou * n * inner + in;
            T mx = xv[base];
            for (int64_t i = 1; i < n; ++i) mx = std::max(mx, xv[base + i * inner]);
            T sum = 0;
            for (int64_t i = 0; i < n; ++i) sum += std::exp(xv[base + i * inner] - mx);
            T lse = mx + std::log(sum);
            for (int64_t i = 0; i < n; ++i) o->value[base + i * inner] = xv[base + i * inner] - lse;
        }
    if (detail::want_grad<T>({&x})) {
        auto* xn = x.node().get();
        detail::attach(out, {x}, [o, xn, outer, n, inner] {
            for (int64_t ou = 0; ou < outer; ++ou)
                for (int64_t in = 0; in < inner; ++in) {
                    int64_t base = ou * n * inner + in;
                    T gsum = 0;
                    for (int64_t i = 0; i < n; ++i) gsum += o->grad[base + i * inner];
                    for (int64_t i = 0; i < n; ++i)
                        xn->grad[base + i * inner] +=
                            o->grad[base + i * inner] - std::exp(o->value[base + i * inner]) * gsum;
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.shape() == b.shape(), "mse_loss: shape mismatch ", shape_str(a.shape()), " vs ",
          shape_str(b.shape()));
    int64_t n = a.numel();
    const T* av = a.data().data();
    const T* bv = b.data().data();
    T s = 0;
    for (int64_t i = 0; i < n; ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
    Tensor<T> out = Tensor<T>::scalar(s / T(n));
    if (detail::want_grad<T>({&a, &b})) {
        auto* o = out.node().get();
        auto* an = a.node().get();
        auto* bn = b.node().get();
        detail::attach(out, {a, b}, [o, an, bn, n] {
            T g = o->grad[0] * T(2) / T(n);
            for (int64_t i = 0; i < n; ++i) {
                T d = g * (an->value[i] - bn->value[i]);
                if (an->requires_grad) an->grad[i] += d;
                if (bn->requires_grad) bn->grad[i] -= d;
            }
        });
    }
    return out;
}

// Mean negative log-softmax of the true class.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    check(logits.dim() == 2, "cross_entropy: logits must be [B, c]");
    int64_t B = logits.shape()[0], c = logits.shape()[1];
    check((int64_t)labels.size() == B, "cross_entropy: ", labels.size(), " labels for batch ", B);
    for (int y : labels)
        check(y >= 0 && y < c, "cross_entropy: label ", y, " out of range [0,", c, ")");
    const T* zv = logits.data().data();
    std::vector<T> probs(B * c);
    T loss = 0;
    for (int64_t r = 0; r < B; ++r) {
        const T* row = zv + r * c;
        T mx = row[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (int64_t j = 0; j < c; ++j) {
            probs[r * c + j] = std::exp(row[j] - mx);
            sum += probs[r * c + j];
        }
        for (int64_t j = 0; j < c; ++j) probs[r * c + j] /= sum;
        loss += mx + std::log(sum) - row[labels[r]];
    }
    Tensor<T> out = Tensor<T>::scalar(loss / T(B));
    if (detail::want_grad<T>({&logits})) {
        auto* o = out.node().get();
        auto* zn = logits.node().get();
        detail::attach(out, {logits}, [o, zn, labels, B, c, probs = std::move(probs)] {
            T g = o->grad[0] / T(B);
            for (int64_t r = 0; r < B; ++r)
                for (int64_t j = 0; j < c; ++j)
                    zn->grad[r * c + j] +=
                        g * (probs[r * c + j] - (j == labels[r] ? T(1) : T(0)));
        });
    }
    return out;
}

// Both arguments are log-probabilities; returns mean over rows of
// sum p * (log p - log q).
template <typename T>
Tensor<T> kl_div(const Tensor<T>& log_p, const Tensor<T>& log_q) {
    check(log_p.shape() == log_q.shape(), "kl_div: shape mismatch");
    check(log_p.dim() == 2, "kl_div: expected [B, c] log-probabilities");
    int64_t B = log_p.shape()[0], c = log_p.shape()[1];
    const T* lp = log_p.data().data();
    const T* lq = log_q.data().data();
    if (strict_checks()) {
        for (int64_t r = 0; r < B; ++r) {
            T sp = 0, sq = 0;
            for (int64_t j = 0; j < c; ++j) {
                sp += std::exp((double)lp[r * c + j]);
                sq += std::exp((double)lq[r * c + j]);
            }
            check(std::abs(sp - T(1)) <= T(1e-5) && std::abs(sq - T(1)) <= T(1e-5),
                  "kl_div: row ", r, " is not a normalized log-distribution");
        }
    }
    T loss = 0;
    for (int64_t i = 0; i < B * c; ++i) loss += std::exp(lp[i]) * (lp[i] - lq[i]);
    Tensor<T> out = Tensor<T>::scalar(loss / T(B));
    if (detail::want_grad<T>({&log_p, &log_q})) {
        auto* o = out.node().get();
        auto* pn = log_p.node().get();
        auto* qn = log_q.node().get();
        detail::attach(out, {log_p, log_q}, [o, pn, qn, B, c] {
            T g = o->grad[0] / T(B);
            for (int64_t i = 0; i < B * c; ++i) {
                T p = std::exp(pn->value[i]);
                if (pn->requires_grad)
                    pn->grad[i] += g * (p * (pn->value[i] - qn->value[i]) + p);
                if (qn->requires_grad) qn->grad[i] -= g * p;
            }
        });
    }
    return out;
}

}  // namespace bmf
