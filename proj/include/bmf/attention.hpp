#pragma once

#include <optional>

#include "bmf/ops.hpp"
#include "bmf/params.hpp"

namespace bmf {

template <typename T>
struct LinearLayer {
    Tensor<T> w, b;  // b stays undefined for bias-free projections

    LinearLayer() = default;
    LinearLayer(ParamSet<T>& ps, const std::string& prefix, int64_t d_in, int64_t d_out, Rng& rng,
                bool bias = true) {
        w = ps.add(prefix + ".w", Tensor<T>::trunc_normal({d_in, d_out}, rng, T(0.02)));
        if (bias) b = ps.add(prefix + ".b", Tensor<T>::zeros({d_out}));
    }

    Tensor<T> forward(const Tensor<T>& x) const { return linear(x, w, b); }
    int64_t d_in() const { return w.shape()[0]; }
    int64_t d_out() const { return w.shape()[1]; }
};

template <typename T>
struct LayerNormLayer {
    Tensor<T> gamma, beta;
    T eps = T(1e-5);

    LayerNormLayer() = default;
    LayerNormLayer(ParamSet<T>& ps, const std::string& prefix, int64_t e) {
        gamma = ps.add(prefix + ".gamma", Tensor<T>::full({e}, T(1)));
        beta = ps.add(prefix + ".beta", Tensor<T>::zeros({e}));
    }

    Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }
};

// 2D-conv token reconstruction (stride = kernel) with a class token prepended
// at index 0. Input [B, 1, H, W] -> [B, 1 + (H/kh)*(W/kw), e].
template <typename T>
struct PatchEmbed {
    Tensor<T> conv_w, conv_b, cls, pos;
    int64_t kh = 1, kw = 2;

    PatchEmbed() = default;
    PatchEmbed(ParamSet<T>& ps, const std::string& prefix, std::pair<int64_t, int64_t> kernel,
               int64_t e, Rng& rng, int64_t tokens_for_pos = 0) {
        kh = kernel.first;
        kw = kernel.second;
        conv_w = ps.add(prefix + ".conv.w", Tensor<T>::trunc_normal({e, 1, kh, kw}, rng, T(0.02)));
        conv_b = ps.add(prefix + ".conv.b", Tensor<T>::zeros({e}));
        cls = ps.add(prefix + ".cls", Tensor<T>::trunc_normal({1, 1, e}, rng, T(0.02)));
        if (tokens_for_pos > 0)
            pos = ps.add(prefix + ".pos",
                         Tensor<T>::trunc_normal({1, tokens_for_pos, e}, rng, T(0.02)));
    }

    Tensor<T> forward(const Tensor<T>& map) const {
        check(map.dim() == 4 && map.shape()[1] == 1, "embed: expected [B, 1, H, W], got ",
              shape_str(map.shape()));
        int64_t B = map.shape()[0], H = map.shape()[2], W = map.shape()[3];
        check(H % kh == 0 && W % kw == 0, "embed: input ", H, "x", W,
              " not divisible by kernel ", kh, "x", kw);
        int64_t e = conv_w.shape()[0];
        Tensor<T> y = conv2d(map, conv_w, conv_b, {kh, kw}, {0, 0});  // [B, e, H/kh, W/kw]
        int64_t patches = (H / kh) * (W / kw);
        Tensor<T> tokens = permute(reshape(y, {B, e, patches}), {0, 2, 1});  // [B, patches, e]
        Tensor<T> seq = concat(expand0(cls, B), tokens, 1);
        if (pos.defined()) {
            check(pos.shape()[1] == 1 + patches, "embed: positional table expects ",
                  pos.shape()[1], " tokens, got ", 1 + patches);
            seq = add(seq, expand0(pos, B));
        }
        return seq;
    }
};

template <typename T>
struct MhaOut {
    Tensor<T> x;     // [B, l, e]
    Tensor<T> maps;  // [B, h, l, l], rows normalized
};

// Scaled dot-product attention over h heads followed by the output matrix
// w_h: X = Concat(softmax(Q K^T / sqrt(head_dim)) V) * W_h.
template <typename T>
MhaOut<T> mha(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& w_h,
              int64_t heads) {
    check(q.dim() == 3 && k.dim() == 3 && v.dim() == 3, "mha: inputs must be [B, l, e]");
    int64_t B = q.shape()[0], lq = q.shape()[1], e = q.shape()[2];
    int64_t lk = k.shape()[1];
    check(k.shape()[2] == e && v.shape()[2] == e && v.shape()[1] == lk,
          "mha: inconsistent K/V shapes");
    check(e % heads == 0, "mha: hidden size ", e, " not divisible by ", heads, " heads");
    int64_t hd = e / heads;

    auto split = [&](const Tensor<T>& t, int64_t l) {
        return permute(reshape(t, {B, l, heads, hd}), {0, 2, 1, 3});  // [B, h, l, hd]
    };
    Tensor<T> qh = split(q, lq), kh = split(k, lk), vh = split(v, lk);
    Tensor<T> scores = scale(matmul(qh, kh, /*transpose_b=*/true), T(1) / std::sqrt(T(hd)));
    Tensor<T> maps = softmax(scores, -1);
    Tensor<T> ctx = matmul(maps, vh);                                   // [B, h, lq, hd]
    Tensor<T> merged = reshape(permute(ctx, {0, 2, 1, 3}), {B, lq, e});  // concat heads
    return {matmul(merged, w_h), maps};
}

template <typename T>
struct BlockTaps {
    Tensor<T> attn;    // attention maps [B, h, l, l]
    Tensor<T> hidden;  // block output sequence [B, l, e]
};

template <typename T>
struct BlockOut {
    Tensor<T> z;
    BlockTaps<T> taps;
};

struct BlockSpec {
    bool cross = false;
    bool embed_q = false;  // q side consumes a 1xHxW feature map
    bool embed_kv = false;
    std::pair<int64_t, int64_t> kernel{1, 2};
    int64_t hidden = 320;
    int64_t heads = 8;
    int64_t mlp_ratio = 4;
    int64_t pos_tokens = 0;  // > 0 enables the learned positional table
};

// One attention module of the network. Crossmodal: Q from the m side,
// K/V from the b side, first residual adds the embedded m (Y = MHA + m),
// then Z = MLP(LN(Y)) + Y. The self variant derives Q, K, V from a single
// source chain.
template <typename T>
class TransformerBlock {
public:
    TransformerBlock(ParamSet<T>& ps, const std::string& prefix, const BlockSpec& spec, Rng& rng)
        : name_(prefix), spec_(spec) {
        if (spec.embed_q)
            q_embed_.emplace(ps, prefix + ".embed_q", spec.kernel, spec.hidden, rng,
                             spec.pos_tokens);
        ln_q_ = LayerNormLayer<T>(ps, prefix + ".ln_q", spec.hidden);
        if (spec.cross) {
            if (spec.embed_kv)
                kv_embed_.emplace(ps, prefix + ".embed_kv", spec.kernel, spec.hidden, rng,
                                  spec.pos_tokens);
            ln_kv_ = LayerNormLayer<T>(ps, prefix + ".ln_kv", spec.hidden);
        }
        wq_ = LinearLayer<T>(ps, prefix + ".mha.wq", spec.hidden, spec.hidden, rng);
        wk_ = LinearLayer<T>(ps, prefix + ".mha.wk", spec.hidden, spec.hidden, rng);
        wv_ = LinearLayer<T>(ps, prefix + ".mha.wv", spec.hidden, spec.hidden, rng);
        wh_ = ps.add(prefix + ".mha.wh",
                     Tensor<T>::trunc_normal({spec.hidden, spec.hidden}, rng, T(0.02)));
        ln_mlp_ = LayerNormLayer<T>(ps, prefix + ".ln_mlp", spec.hidden);
        fc1_ = LinearLayer<T>(ps, prefix + ".mlp.fc1", spec.hidden,
                              spec.mlp_ratio * spec.hidden, rng);
        fc2_ = LinearLayer<T>(ps, prefix + ".mlp.fc2", spec.mlp_ratio * spec.hidden,
                              spec.hidden, rng);
    }

    // kv_src is ignored for self blocks.
    BlockOut<T> forward(const Tensor<T>& q_src, const Tensor<T>& kv_src = {}) const {
        Tensor<T> q_tokens = resolve(q_src, q_embed_, "q");
        Tensor<T> kv_tokens;
        if (spec_.cross) {
            check(kv_src.defined(), name_, ": crossmodal block needs a key/value source");
            kv_tokens = resolve(kv_src, kv_embed_, "kv");
        } else {
            kv_tokens = q_tokens;
        }
        Tensor<T> qn = ln_q_.forward(q_tokens);
        Tensor<T> kn = spec_.cross ? ln_kv_->forward(kv_tokens) : qn;
        Tensor<T> Q = wq_.forward(qn);
        Tensor<T> K = wk_.forward(kn);
        Tensor<T> V = wv_.forward(kn);
        MhaOut<T> att = mha(Q, K, V, wh_, spec_.heads);
        Tensor<T> y = add(att.x, q_tokens);
        Tensor<T> h = fc2_.forward(gelu(fc1_.forward(ln_mlp_.forward(y))));
        Tensor<T> z = add(h, y);
        return {z, {att.maps, z}};
    }

    const BlockSpec& spec() const { return spec_; }
    const std::string& name() const { return name_; }

private:
    Tensor<T> resolve(const Tensor<T>& src, const std::optional<PatchEmbed<T>>& embed,
                      const char* side) const {
        if (embed.has_value()) {
            check(src.dim() == 4, name_, ": ", side, " side expects a feature map, got ",
                  shape_str(src.shape()));
            return embed->forward(src);
        }
        check(src.dim() == 3 && src.shape()[2] == spec_.hidden, name_, ": ", side,
              " side expects [B, l, ", spec_.hidden, "] tokens, got ", shape_str(src.shape()));
        return src;
    }

    std::string name_;
    BlockSpec spec_;
    std::optional<PatchEmbed<T>> q_embed_, kv_embed_;
    LayerNormLayer<T> ln_q_;
    std::optional<LayerNormLayer<T>> ln_kv_;
    LinearLayer<T> wq_, wk_, wv_;
    Tensor<T> wh_;
    LayerNormLayer<T> ln_mlp_;
    LinearLayer<T> fc1_, fc2_;
};

}  // namespace bmf
