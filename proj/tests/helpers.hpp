#pragma once

#include <doctest.h>

#include "bmf/gradcheck.hpp"
#include "bmf/ops.hpp"

namespace testutil {

using bmf::Tensor;

// Scalarizes an op output with fixed random weights so gradient checks see a
// non-uniform upstream gradient.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& t, uint64_t seed = 7) {
    bmf::Rng rng = bmf::make_rng(seed, {0xabc});
    Tensor<T> w = Tensor<T>::randu(t.shape(), rng, T(-1), T(1));
    return bmf::sum_all(bmf::mul(t, w));
}

// Independent dense convolution, no autograd, used as the conv2d oracle.
inline std::vector<double> conv2d_oracle(const std::vector<double>& x, int64_t C_in, int64_t H,
                                         int64_t W, const std::vector<double>& w, int64_t C_out,
                                         int64_t kh, int64_t kw, const std::vector<double>& bias,
                                         int64_t sh, int64_t sw, int64_t ph, int64_t pw) {
    int64_t OH = (H + 2 * ph - kh) / sh + 1;
    int64_t OW = (W + 2 * pw - kw) / sw + 1;
    std::vector<double> out(C_out * OH * OW, 0.0);
    for (int64_t co = 0; co < C_out; ++co)
        for (int64_t oh = 0; oh < OH; ++oh)
            for (int64_t ow = 0; ow < OW; ++ow) {
                double acc = bias.empty() ? 0.0 : bias[co];
                for (int64_t ci = 0; ci < C_in; ++ci)
                    for (int64_t r = 0; r < kh; ++r)
                        for (int64_t c = 0; c < kw; ++c) {
                            int64_t ih = oh * sh + r - ph;
                            int64_t iw = ow * sw + c - pw;
                            if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                            acc += x[(ci * H + ih) * W + iw] * w[((co * C_in + ci) * kh + r) * kw + c];
                        }
                out[(co * OH + oh) * OW + ow] = acc;
            }
    return out;
}

}  // namespace testutil
