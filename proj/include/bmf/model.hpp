#pragma once

#include "bmf/attention.hpp"

namespace bmf {

enum class Variant { teacher, student, bnet_s, mnet_s, no_aefm, no_alignment };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::teacher: return "teacher";
        case Variant::student: return "student";
        case Variant::bnet_s: return "bnet_s";
        case Variant::mnet_s: return "mnet_s";
        case Variant::no_aefm: return "no_aefm";
        case Variant::no_alignment: return "no_alignment";
    }
    return "?";
}

inline Variant variant_from_name(const std::string& s) {
    for (Variant v : {Variant::teacher, Variant::student, Variant::bnet_s, Variant::mnet_s,
                      Variant::no_aefm, Variant::no_alignment})
        if (s == variant_name(v)) return v;
    fail("unknown model variant '" + s + "'");
}

// Encoder width presets. `paper` reproduces the documented map shapes
// (64x1x5 and 160x1x2); the smaller presets keep the same layer pattern with
// reduced widths for desk-scale training and gradient checking.
enum class EncPreset { paper, desk, grad_tiny };

struct ModelConfig {
    Variant variant = Variant::student;
    int64_t hidden = 320;
    int64_t heads = 8;
    int64_t classes = 2;
    int64_t mfi_pairs = 1;    // crossmodal+self pairs; teacher uses 2
    int64_t aefm_blocks = 2;  // teacher uses 4
    int64_t ff_blocks = 2;    // teacher uses 4
    int64_t mlp_ratio = 4;
    std::pair<int64_t, int64_t> eeg_input{21, 256};
    std::pair<int64_t, int64_t> enose_input{10, 90};
    std::pair<int64_t, int64_t> enc_out{16, 20};  // aligned feature map (1 x h x w)
    std::pair<int64_t, int64_t> mfi_kernel{1, 2};
    int64_t ff_rows = 16;  // spliced class tokens reshape to ff_rows x (total/ff_rows)
    std::pair<int64_t, int64_t> ff_kernel{2, 4};
    EncPreset enc_preset = EncPreset::paper;
    bool positional = false;

    bool has_enose() const { return variant != Variant::bnet_s; }
    bool has_eeg() const { return variant != Variant::mnet_s; }
    bool has_mfi() const { return has_enose() && has_eeg(); }
    bool has_aefm() const { return variant != Variant::no_aefm; }
    bool align_in_loss() const { return has_mfi() && variant != Variant::no_alignment; }

    int64_t mfi_tokens() const {
        return 1 + (enc_out.first / mfi_kernel.first) * (enc_out.second / mfi_kernel.second);
    }
    // number of class tokens spliced into the FF input
    int64_t splice_count() const { return (has_mfi() ? 1 : 0) + (has_aefm() ? 1 : 0); }
    int64_t ff_cols() const { return splice_count() * hidden / ff_rows; }
    int64_t ff_tokens() const {
        return 1 + (ff_rows / ff_kernel.first) * (ff_cols() / ff_kernel.second);
    }

    void validate() const {
        check(hidden % heads == 0, "config: hidden ", hidden, " not divisible by ", heads,
              " heads");
        check(enc_out.first % mfi_kernel.first == 0 && enc_out.second % mfi_kernel.second == 0,
              "config: enc_out not divisible by the MFI embedding kernel");
        if (variant == Variant::teacher)
            check(mfi_pairs == 2 && aefm_blocks == 4 && ff_blocks == 4,
                  "config: teacher uses 2 MFI pairs and 4 AEFM/FF blocks");
        else
            check(mfi_pairs == 1 && aefm_blocks == 2 && ff_blocks == 2,
                  "config: student-family models use 1 MFI pair and 2 AEFM/FF blocks");
        check(splice_count() >= 1, "config: variant leaves nothing to fuse");
        check((splice_count() * hidden) % ff_rows == 0, "config: FF reshape rows ", ff_rows,
              " do not divide ", splice_count() * hidden);
        check(ff_rows % ff_kernel.first == 0 && ff_cols() % ff_kernel.second == 0,
              "config: FF input ", ff_rows, "x", ff_cols(), " not divisible by FF kernel");
    }

    static ModelConfig paper(Variant v) {
        ModelConfig c;
        c.variant = v;
        if (v == Variant::teacher) {
            c.mfi_pairs = 2;
            c.aefm_blocks = 4;
            c.ff_blocks = 4;
        }
        return c;
    }

    static ModelConfig desk(Variant v) {
        ModelConfig c = paper(v);
        c.hidden = 16;
        c.heads = 2;
        c.enc_out = {4, 10};
        c.ff_rows = 4;
        c.enc_preset = EncPreset::desk;
        return c;
    }

    static ModelConfig grad_tiny(Variant v) {
        ModelConfig c = paper(v);
        c.hidden = 8;
        c.heads = 2;
        c.enc_out = {5, 4};
        c.ff_rows = 4;
        c.enc_preset = EncPreset::grad_tiny;
        return c;
    }

    static ModelConfig profile(const std::string& name, Variant v) {
        if (name == "paper") return paper(v);
        if (name == "desk") return desk(v);
        if (name == "tiny") return grad_tiny(v);
        fail("unknown model profile '" + name + "' (expected paper/desk/tiny)");
    }
};

// ---------------------------------------------------------------------------
// encoders
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2dLayer {
    Tensor<T> w, b;
    std::pair<int64_t, int64_t> stride, pad;

    Conv2dLayer() = default;
    Conv2dLayer(ParamSet<T>& ps, const std::string& prefix, int64_t in_ch, int64_t out_ch,
                std::pair<int64_t, int64_t> kernel, std::pair<int64_t, int64_t> stride_,
                std::pair<int64_t, int64_t> pad_, Rng& rng)
        : stride(stride_), pad(pad_) {
        T sigma = std::sqrt(T(2) / T(in_ch * kernel.first * kernel.second));
        w = ps.add(prefix + ".w",
                   Tensor<T>::randn({out_ch, in_ch, kernel.first, kernel.second}, rng, T(0),
                                    sigma));
        b = ps.add(prefix + ".b", Tensor<T>::zeros({out_ch}));
    }

    Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }

    std::pair<int64_t, int64_t> out_hw(std::pair<int64_t, int64_t> in) const {
        return {(in.first + 2 * pad.first - w.shape()[2]) / stride.first + 1,
                (in.second + 2 * pad.second - w.shape()[3]) / stride.second + 1};
    }
    int64_t flops(std::pair<int64_t, int64_t> in) const {
        auto [oh, ow] = out_hw(in);
        return w.shape()[0] * oh * ow * w.shape()[1] * w.shape()[2] * w.shape()[3] * 2;
    }
};

// AlexNet-style shallow stack: five convolutions with pooling after the
// 1st, 2nd and 5th. Output map is reshaped to [B, 1, enc_h, enc_w].
template <typename T>
class EnoseEncoder {
public:
    EnoseEncoder(ParamSet<T>& ps, const ModelConfig& cfg, Rng& rng) {
        std::array<int64_t, 5> ch;
        switch (cfg.enc_preset) {
            case EncPreset::paper: ch = {16, 32, 64, 64, 64}; break;
            case EncPreset::desk: ch = {8, 16, 16, 16, 8}; break;
            case EncPreset::grad_tiny: ch = {4, 8, 8, 8, 4}; break;
        }
        enc_h_ = cfg.enc_out.first;
        enc_w_ = cfg.enc_out.second;
        convs_.push_back(Conv2dLayer<T>(ps, "enose_enc.conv1", 1, ch[0], {3, 7}, {1, 2}, {1, 3},
                                        rng));
        convs_.push_back(Conv2dLayer<T>(ps, "enose_enc.conv2", ch[0], ch[1], {3, 3}, {1, 1},
                                        {1, 1}, rng));
        convs_.push_back(Conv2dLayer<T>(ps, "enose_enc.conv3", ch[1], ch[2], {3, 3}, {1, 1},
                                        {1, 1}, rng));
        convs_.push_back(Conv2dLayer<T>(ps, "enose_enc.conv4", ch[2], ch[3], {3, 3}, {1, 1},
                                        {1, 1}, rng));
        convs_.push_back(Conv2dLayer<T>(ps, "enose_enc.conv5", ch[3], ch[4], {3, 3}, {1, 1},
                                        {1, 1}, rng));

        // shape walk for the flops tally
        std::pair<int64_t, int64_t> hw = cfg.enose_input;
        flops_ = 0;
        flops_ += convs_[0].flops(hw);
        hw = convs_[0].out_hw(hw);
        hw = {hw.first / 2, hw.second / 3};  // pool (2,3)
        flops_ += convs_[1].flops(hw);
        hw = convs_[1].out_hw(hw);
        hw = {hw.first, hw.second / 3};  // pool (1,3)
        for (int i = 2; i < 5; ++i) {
            flops_ += convs_[i].flops(hw);
            hw = convs_[i].out_hw(hw);
        }
        // final avg pool (h,1) collapses height
        check(ch[4] * 1 * hw.second == enc_h_ * enc_w_, "enose encoder: final map ", ch[4], "x1x",
              hw.second, " cannot reshape to ", enc_h_, "x", enc_w_);
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        check(x.dim() == 4 && x.shape()[1] == 1, "enose encoder: expected [B, 1, 10, 90], got ",
              shape_str(x.shape()));
        int64_t B = x.shape()[0];
        Tensor<T> h = relu(convs_[0].forward(x));
        h = max_pool2d(h, {2, 3}, {2, 3});
        h = relu(convs_[1].forward(h));
        h = max_pool2d(h, {1, 3}, {1, 3});
        h = relu(convs_[2].forward(h));
        h = relu(convs_[3].forward(h));
        h = relu(convs_[4].forward(h));
        h = avg_pool2d(h, {h.shape()[2], 1}, {h.shape()[2], 1});
        return reshape(h, {B, 1, enc_h_, enc_w_});
    }

    int64_t flops() const { return flops_; }

private:
    std::vector<Conv2dLayer<T>> convs_;
    int64_t enc_h_ = 0, enc_w_ = 0;
    int64_t flops_ = 0;
};

template <typename T>
struct ResidualStage {
    Conv2dLayer<T> conv1, conv2;
    std::optional<Conv2dLayer<T>> shortcut;

    ResidualStage() = default;
    ResidualStage(ParamSet<T>& ps, const std::string& prefix, int64_t in_ch, int64_t out_ch,
                  int64_t stride, Rng& rng) {
        conv1 = Conv2dLayer<T>(ps, prefix + ".conv1", in_ch, out_ch, {3, 3}, {stride, stride},
                               {1, 1}, rng);
        conv2 = Conv2dLayer<T>(ps, prefix + ".conv2", out_ch, out_ch, {3, 3}, {1, 1}, {1, 1}, rng);
        if (in_ch != out_ch || stride != 1)
            shortcut = Conv2dLayer<T>(ps, prefix + ".shortcut", in_ch, out_ch, {1, 1},
                                      {stride, stride}, {0, 0}, rng);
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> h = conv2.forward(relu(conv1.forward(x)));
        Tensor<T> sc = shortcut ? shortcut->forward(x) : x;
        return relu(add(h, sc));
    }

    std::pair<int64_t, int64_t> out_hw(std::pair<int64_t, int64_t> in) const {
        return conv2.out_hw(conv1.out_hw(in));
    }
    int64_t flops(std::pair<int64_t, int64_t> in) const {
        int64_t f = conv1.flops(in) + conv2.flops(conv1.out_hw(in));
        if (shortcut) f += shortcut->flops(in);
        return f;
    }
};

// ResNet-style stack: stem convolution, pooling, residual stages with
// identity/projection shortcuts, then an average pool down to the aligned
// feature size.
template <typename T>
class EegEncoder {
public:
    EegEncoder(ParamSet<T>& ps, const ModelConfig& cfg, Rng& rng) {
        enc_h_ = cfg.enc_out.first;
        enc_w_ = cfg.enc_out.second;
        std::vector<int64_t> stage_ch, stage_stride;
        std::pair<int64_t, int64_t> stem_kernel, stem_stride, stem_pad;
        int64_t stem_ch;
        switch (cfg.enc_preset) {
            case EncPreset::paper:
                stem_ch = 20;
                stem_kernel = {3, 7};
                stem_stride = {1, 2};
                stem_pad = {1, 3};
                stage_ch = {20, 40, 80, 160};
                stage_stride = {1, 2, 2, 2};
                final_pool_ = {3, 4};
                break;
            case EncPreset::desk:
                stem_ch = 8;
                stem_kernel = {3, 9};
                stem_stride = {2, 8};
                stem_pad = {1, 4};
                stage_ch = {16, 20};
                stage_stride = {2, 2};
                final_pool_ = {3, 2};
                break;
            case EncPreset::grad_tiny:
                stem_ch = 4;
                stem_kernel = {3, 9};
                stem_stride = {2, 8};
                stem_pad = {1, 4};
                stage_ch = {8, 10};
                stage_stride = {2, 2};
                final_pool_ = {3, 2};
                break;
        }
        stem_ = Conv2dLayer<T>(ps, "eeg_enc.stem", 1, stem_ch, stem_kernel, stem_stride, stem_pad,
                               rng);
        int64_t in_ch = stem_ch;
        for (size_t i = 0; i < stage_ch.size(); ++i) {
            stages_.emplace_back(ps, "eeg_enc.stage" + std::to_string(i + 1), in_ch, stage_ch[i],
                                 stage_stride[i], rng);
            in_ch = stage_ch[i];
        }

        std::pair<int64_t, int64_t> hw = cfg.eeg_input;
        flops_ = stem_.flops(hw);
        hw = stem_.out_hw(hw);
        hw = {hw.first, hw.second / 2};  // pool (1,2)
        for (auto& st : stages_) {
            flops_ += st.flops(hw);
            hw = st.out_hw(hw);
        }
        int64_t out_h = hw.first / final_pool_.first, out_w = hw.second / final_pool_.second;
        check(in_ch * out_h * out_w == enc_h_ * enc_w_, "eeg encoder: final map ", in_ch, "x",
              out_h, "x", out_w, " cannot reshape to ", enc_h_, "x", enc_w_);
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        check(x.dim() == 4 && x.shape()[1] == 1, "eeg encoder: expected [B, 1, 21, 256], got ",
              shape_str(x.shape()));
        int64_t B = x.shape()[0];
        Tensor<T> h = relu(stem_.forward(x));
        h = max_pool2d(h, {1, 2}, {1, 2});
        for (auto& st : stages_) h = st.forward(h);
        h = avg_pool2d(h, final_pool_, final_pool_);
        return reshape(h, {B, 1, enc_h_, enc_w_});
    }

    int64_t flops() const { return flops_; }
    size_t stage_count() const { return stages_.size(); }

private:
    Conv2dLayer<T> stem_;
    std::vector<ResidualStage<T>> stages_;
    std::pair<int64_t, int64_t> final_pool_{3, 4};
    int64_t enc_h_ = 0, enc_w_ = 0;
    int64_t flops_ = 0;
};

// ---------------------------------------------------------------------------
// full model
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardTrace {
    // aligned encoder outputs [B, 1, enc_h, enc_w]; undefined for variants
    // missing the modality
    Tensor<T> m, b;
    std::vector<BlockTaps<T>> mfi_taps, aefm_taps, ff_taps;
    std::vector<Tensor<T>> mfi_seq;  // Z1, S1 (, Z2, S2) in chain order
    Tensor<T> mfi_final, aefm_final;
    Tensor<T> fc_feature;  // I: [B, hidden]
    Tensor<T> logits;      // [B, classes]
    Tensor<T> probs;       // P: [B, classes]

    int64_t batch() const { return probs.shape()[0]; }
};

template <typename T>
class BmfNet {
public:
    BmfNet(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng = make_rng(seed, {0xB0D1});
        if (cfg_.has_enose()) enose_enc_.emplace(params_, cfg_, rng);
        if (cfg_.has_eeg()) eeg_enc_.emplace(params_, cfg_, rng);

        int64_t l_mfi = cfg_.mfi_tokens();
        auto base = [&](bool embeds_map) {
            BlockSpec s;
            s.hidden = cfg_.hidden;
            s.heads = cfg_.heads;
            s.mlp_ratio = cfg_.mlp_ratio;
            s.kernel = cfg_.mfi_kernel;
            s.pos_tokens = cfg_.positional && embeds_map ? l_mfi : 0;
            return s;
        };
        if (cfg_.has_mfi()) {
            for (int64_t p = 0; p < cfg_.mfi_pairs; ++p) {
                BlockSpec cross = base(true);
                cross.cross = true;
                cross.embed_q = true;
                cross.embed_kv = p == 0;  // later pairs read the previous S directly
                mfi_.emplace_back(params_, "mfi.cross" + std::to_string(p + 1), cross, rng);
                BlockSpec self = base(false);
                mfi_.emplace_back(params_, "mfi.self" + std::to_string(p + 1), self, rng);
            }
        }
        if (cfg_.has_aefm()) {
            for (int64_t i = 0; i < cfg_.aefm_blocks; ++i) {
                BlockSpec s = base(i == 0);
                s.embed_q = i == 0;
                aefm_.emplace_back(params_, "aefm." + std::to_string(i + 1), s, rng);
            }
        }
        for (int64_t i = 0; i < cfg_.ff_blocks; ++i) {
            BlockSpec s = base(false);
            s.embed_q = i == 0;
            s.kernel = cfg_.ff_kernel;
            s.pos_tokens = cfg_.positional && i == 0 ? cfg_.ff_tokens() : 0;
            ff_.emplace_back(params_, "ff." + std::to_string(i + 1), s, rng);
        }
        head_ = LinearLayer<T>(params_, "head.fc", cfg_.hidden, cfg_.classes, rng);
    }

    // eeg: [B, 1, 21, 256]; enose: [B, 1, 10, 90]. Either may be left
    // undefined for the single-modality ablations.
    ForwardTrace<T> forward(const Tensor<T>& eeg, const Tensor<T>& enose) const {
        ForwardTrace<T> tr;
        if (cfg_.has_enose()) {
            check(enose.defined(), "forward: variant ", variant_name(cfg_.variant),
                  " needs an e-nose input");
            tr.m = enose_enc_->forward(enose);
        }
        if (cfg_.has_eeg()) {
            check(eeg.defined(), "forward: variant ", variant_name(cfg_.variant),
                  " needs an EEG input");
            tr.b = eeg_enc_->forward(eeg);
        }

        if (cfg_.has_mfi()) {
            Tensor<T> cur;
            for (int64_t p = 0; p < cfg_.mfi_pairs; ++p) {
                const auto& cross = mfi_[2 * p];
                const auto& self = mfi_[2 * p + 1];
                Tensor<T> kv = p == 0 ? tr.b : cur;
                auto z = cross.forward(tr.m, kv);
                tr.mfi_taps.push_back(z.taps);
                tr.mfi_seq.push_back(z.z);
                auto s = self.forward(z.z);
                tr.mfi_taps.push_back(s.taps);
                tr.mfi_seq.push_back(s.z);
                cur = s.z;
            }
            tr.mfi_final = cur;
        }
        if (cfg_.has_aefm()) {
            Tensor<T> cur = cfg_.has_eeg() ? tr.b : tr.m;
            for (size_t i = 0; i < aefm_.size(); ++i) {
                auto out = aefm_[i].forward(cur);
                tr.aefm_taps.push_back(out.taps);
                cur = out.z;
            }
            tr.aefm_final = cur;
        }

        // splice the class tokens and reshape into the FF input map
        Tensor<T> spliced;
        if (cfg_.has_mfi()) spliced = cls_token(tr.mfi_final);
        if (cfg_.has_aefm()) {
            Tensor<T> b_cls = cls_token(tr.aefm_final);
            spliced = spliced.defined() ? concat(spliced, b_cls, 2) : b_cls;
        }
        int64_t B = spliced.shape()[0];
        Tensor<T> ff_map = reshape(spliced, {B, 1, cfg_.ff_rows, cfg_.ff_cols()});
        Tensor<T> cur = ff_map;
        for (size_t i = 0; i < ff_.size(); ++i) {
            auto out = ff_[i].forward(cur);
            tr.ff_taps.push_back(out.taps);
            cur = out.z;
        }

        tr.fc_feature = reshape(slice(cur, 1, 0, 1), {B, cfg_.hidden});
        tr.logits = head_.forward(tr.fc_feature);
        tr.probs = softmax(tr.logits, -1);
        return tr;
    }

    const ModelConfig& config() const { return cfg_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }

    int64_t count_params() const { return params_.total_numel(); }

    // Multiply-adds x2 over conv/linear/attention matmuls for one sample.
    int64_t count_flops() const {
        int64_t total = 0;
        if (enose_enc_) total += enose_enc_->flops();
        if (eeg_enc_) total += eeg_enc_->flops();
        int64_t l = cfg_.mfi_tokens();
        for (size_t i = 0; i < mfi_.size(); ++i) total += block_flops(mfi_[i], l, l);
        for (size_t i = 0; i < aefm_.size(); ++i) total += block_flops(aefm_[i], l, l);
        int64_t lf = cfg_.ff_tokens();
        for (size_t i = 0; i < ff_.size(); ++i) total += block_flops(ff_[i], lf, lf);
        total += cfg_.hidden * cfg_.classes * 2;  // classifier
        return total;
    }

private:
    static Tensor<T> cls_token(const Tensor<T>& seq) { return slice(seq, 1, 0, 1); }

    int64_t block_flops(const TransformerBlock<T>& blk, int64_t l_q, int64_t l_kv) const {
        const BlockSpec& s = blk.spec();
        int64_t e = s.hidden;
        int64_t f = 0;
        if (s.embed_q) f += e * (l_q - 1) * s.kernel.first * s.kernel.second * 2;
        if (s.cross && s.embed_kv) f += e * (l_kv - 1) * s.kernel.first * s.kernel.second * 2;
        f += l_q * e * e * 2;            // Q projection
        f += 2 * l_kv * e * e * 2;       // K, V projections
        f += 2 * l_q * l_kv * e * 2;     // scores and context matmuls
        f += l_q * e * e * 2;            // W_h
        f += 2 * l_q * e * s.mlp_ratio * e * 2;  // MLP
        return f;
    }

    ModelConfig cfg_;
    ParamSet<T> params_;
    std::optional<EnoseEncoder<T>> enose_enc_;
    std::optional<EegEncoder<T>> eeg_enc_;
    std::vector<TransformerBlock<T>> mfi_, aefm_, ff_;
    LinearLayer<T> head_;
};

}  // namespace bmf
