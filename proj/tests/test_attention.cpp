#include <doctest.h>

#include "bmf/attention.hpp"
#include "bmf/gradcheck.hpp"
#include "helpers.hpp"

using namespace bmf;
using testutil::weighted_sum;

namespace {

template <typename T>
void copy_param(ParamSet<T>& ps, const std::string& from, const std::string& to) {
    auto src = ps.at(from).data();
    auto dst = ps.at(to).raw_data();
    REQUIRE(src.size() == dst.size());
    std::copy(src.begin(), src.end(), dst.begin());
}

template <typename T>
void fill_param(ParamSet<T>& ps, const std::string& name, T v) {
    for (auto& x : ps.at(name).raw_data()) x = v;
}

}  // namespace

TEST_CASE("patch embed shapes at paper scale") {
    Rng rng = make_rng(21);
    SUBCASE("1x16x20 with 1x2 kernel -> 161 tokens") {
        ParamSet<float> ps;
        PatchEmbed<float> emb(ps, "e", {1, 2}, 320, rng);
        TensorF map = TensorF::randn({1, 1, 16, 20}, rng);
        TensorF seq = emb.forward(map);
        CHECK(seq.shape() == std::vector<int64_t>{1, 161, 320});
    }
    SUBCASE("1x16x40 with 2x4 kernel -> 81 tokens") {
        ParamSet<float> ps;
        PatchEmbed<float> emb(ps, "e", {2, 4}, 320, rng);
        TensorF map = TensorF::randn({1, 1, 16, 40}, rng);
        CHECK(emb.forward(map).shape() == std::vector<int64_t>{1, 81, 320});
    }
    SUBCASE("single patch keeps the class token in front") {
        ParamSet<float> ps;
        PatchEmbed<float> emb(ps, "e", {2, 2}, 8, rng);
        TensorF map = TensorF::randn({1, 1, 2, 2}, rng);
        TensorF seq = emb.forward(map);
        CHECK(seq.shape() == std::vector<int64_t>{1, 2, 8});
        // row 0 is the class token itself
        for (int64_t j = 0; j < 8; ++j) CHECK(seq.data()[j] == ps.at("e.cls").data()[j]);
    }
    SUBCASE("indivisible input rejected") {
        ParamSet<float> ps;
        PatchEmbed<float> emb(ps, "e", {1, 2}, 8, rng);
        TensorF bad = TensorF::randn({1, 1, 3, 5}, rng);
        CHECK_THROWS(emb.forward(bad));
    }
}

TEST_CASE("mha shapes and normalized maps at paper scale") {
    Rng rng = make_rng(22);
    TensorF q = TensorF::randn({1, 161, 320}, rng, 0.f, 0.5f);
    TensorF k = TensorF::randn({1, 161, 320}, rng, 0.f, 0.5f);
    TensorF v = TensorF::randn({1, 161, 320}, rng, 0.f, 0.5f);
    TensorF wh = TensorF::randn({320, 320}, rng, 0.f, 0.02f);
    auto out = mha(q, k, v, wh, 8);
    CHECK(out.x.shape() == std::vector<int64_t>{1, 161, 320});
    CHECK(out.maps.shape() == std::vector<int64_t>{1, 8, 161, 161});
    for (int64_t row = 0; row < 8 * 161; ++row) {
        double s = 0;
        for (int64_t j = 0; j < 161; ++j) {
            float p = out.maps.data()[row * 161 + j];
            CHECK(p >= 0.f);
            s += p;
        }
        CHECK(std::abs(s - 1.0) < 1e-5);
    }
    CHECK_THROWS(mha(q, k, v, wh, 7));  // 320 % 7 != 0
}

TEST_CASE("mha with identical keys attends uniformly") {
    Rng rng = make_rng(23);
    int64_t l = 9, e = 8;
    TensorD q = TensorD::randn({1, l, e}, rng);
    TensorD krow = TensorD::randn({1, 1, e}, rng);
    TensorD k = expand0(permute(expand0(permute(krow, {1, 0, 2}), l), {1, 0, 2}), 1);
    k = reshape(k, {1, l, e});
    TensorD v = TensorD::randn({1, l, e}, rng);
    TensorD wh = TensorD::randn({e, e}, rng);
    auto out = mha(q, k, v, wh, 2);
    for (int64_t i = 0; i < out.maps.numel(); ++i)
        CHECK(out.maps.data()[i] == doctest::Approx(1.0 / l).epsilon(1e-9));
}

TEST_CASE("mha matches a hand-computed 2x2 single-head attention") {
    // l=2, e=1, one head: everything reduces to scalars
    double q1 = 0.8, q2 = -0.4, k1 = 1.2, k2 = 0.5, v1 = 2.0, v2 = -1.0, w = 1.7;
    TensorD q = TensorD::from({1, 2, 1}, {q1, q2});
    TensorD k = TensorD::from({1, 2, 1}, {k1, k2});
    TensorD v = TensorD::from({1, 2, 1}, {v1, v2});
    TensorD wh = TensorD::from({1, 1}, {w});
    auto out = mha(q, k, v, wh, 1);

    auto row = [&](double qq, double& o) {
        double s1 = qq * k1, s2 = qq * k2;  // head_dim 1 -> scale 1
        double m = std::max(s1, s2);
        double e1 = std::exp(s1 - m), e2 = std::exp(s2 - m);
        double a1 = e1 / (e1 + e2), a2 = e2 / (e1 + e2);
        o = (a1 * v1 + a2 * v2) * w;
    };
    double o1, o2;
    row(q1, o1);
    row(q2, o2);
    CHECK(out.x.data()[0] == doctest::Approx(o1).epsilon(1e-12));
    CHECK(out.x.data()[1] == doctest::Approx(o2).epsilon(1e-12));
}

TEST_CASE("mha is permutation-equivariant without positional signal") {
    Rng rng = make_rng(24);
    int64_t l = 6, e = 8;
    TensorD s = TensorD::randn({1, l, e}, rng);
    TensorD wh = TensorD::randn({e, e}, rng);
    std::vector<int64_t> perm{3, 0, 5, 1, 4, 2};
    TensorD sp = TensorD::zeros({1, l, e});
    for (int64_t i = 0; i < l; ++i)
        for (int64_t j = 0; j < e; ++j)
            sp.raw_data()[i * e + j] = s.data()[perm[i] * e + j];
    auto base = mha(s, s, s, wh, 2);
    auto permuted = mha(sp, sp, sp, wh, 2);
    for (int64_t i = 0; i < l; ++i)
        for (int64_t j = 0; j < e; ++j)
            CHECK(permuted.x.data()[i * e + j] ==
                  doctest::Approx(base.x.data()[perm[i] * e + j]).epsilon(1e-10));
}

namespace {

// Recomposes the crossmodal block from its registered parameters with bare
// ops; independent wiring oracle for Y = MHA(Q_m, K_b, V_b) + m and
// Z = MLP(LN(Y)) + Y.
TensorD cross_block_oracle(ParamSet<double>& ps, const std::string& p, const TensorD& m_map,
                           const TensorD& b_seq, int64_t heads) {
    auto embed = [&](const TensorD& map, const std::string& side) {
        TensorD y = conv2d(map, ps.at(p + side + ".conv.w"), ps.at(p + side + ".conv.b"),
                           {ps.at(p + side + ".conv.w").shape()[2],
                            ps.at(p + side + ".conv.w").shape()[3]},
                           {0, 0});
        int64_t e = y.shape()[1], np = y.shape()[2] * y.shape()[3];
        TensorD tok = permute(reshape(y, {1, e, np}), {0, 2, 1});
        return concat(expand0(ps.at(p + side + ".cls"), 1), tok, 1);
    };
    TensorD m_emb = embed(m_map, ".embed_q");
    TensorD qn = layer_norm(m_emb, ps.at(p + ".ln_q.gamma"), ps.at(p + ".ln_q.beta"));
    TensorD kn = layer_norm(b_seq, ps.at(p + ".ln_kv.gamma"), ps.at(p + ".ln_kv.beta"));
    TensorD Q = linear(qn, ps.at(p + ".mha.wq.w"), ps.at(p + ".mha.wq.b"));
    TensorD K = linear(kn, ps.at(p + ".mha.wk.w"), ps.at(p + ".mha.wk.b"));
    TensorD V = linear(kn, ps.at(p + ".mha.wv.w"), ps.at(p + ".mha.wv.b"));
    auto att = mha(Q, K, V, ps.at(p + ".mha.wh"), heads);
    TensorD y = add(att.x, m_emb);
    TensorD h = linear(gelu(linear(layer_norm(y, ps.at(p + ".ln_mlp.gamma"),
                                              ps.at(p + ".ln_mlp.beta")),
                                   ps.at(p + ".mlp.fc1.w"), ps.at(p + ".mlp.fc1.b"))),
                       ps.at(p + ".mlp.fc2.w"), ps.at(p + ".mlp.fc2.b"));
    return add(h, y);
}

}  // namespace

TEST_CASE("crossmodal block: shape, wiring oracle, degenerate passthroughs") {
    Rng rng = make_rng(25);
    BlockSpec spec;
    spec.cross = true;
    spec.embed_q = true;
    spec.embed_kv = false;  // kv side consumes a ready token sequence
    spec.hidden = 16;
    spec.heads = 4;
    ParamSet<double> ps;
    TransformerBlock<double> blk(ps, "blk", spec, rng);

    TensorD m = TensorD::randn({1, 1, 4, 6}, rng);   // 12 patches with 1x2 kernel
    TensorD b = TensorD::randn({1, 13, 16}, rng);    // matching token count
    auto out = blk.forward(m, b);
    CHECK(out.z.shape() == std::vector<int64_t>{1, 13, 16});
    CHECK(out.taps.hidden.shape() == out.z.shape());
    CHECK(out.taps.attn.shape() == std::vector<int64_t>{1, 4, 13, 13});

    TensorD ref = cross_block_oracle(ps, "blk", m, b, 4);
    for (int64_t i = 0; i < ref.numel(); ++i)
        CHECK(out.z.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));

    // zero MLP -> Z == Y; the oracle's MLP term vanishes too, leaving Y
    fill_param(ps, "blk.mlp.fc1.w", 0.0);
    fill_param(ps, "blk.mlp.fc1.b", 0.0);
    fill_param(ps, "blk.mlp.fc2.w", 0.0);
    fill_param(ps, "blk.mlp.fc2.b", 0.0);
    auto out_nomlp = blk.forward(m, b);
    TensorD y_ref = cross_block_oracle(ps, "blk", m, b, 4);
    for (int64_t i = 0; i < y_ref.numel(); ++i)
        CHECK(out_nomlp.z.data()[i] == doctest::Approx(y_ref.data()[i]).epsilon(1e-12));
    // ... and additionally zero W_h -> pure residual of the embedded m
    fill_param(ps, "blk.mha.wh", 0.0);
    auto out_res = blk.forward(m, b);
    TensorD m_emb = [&] {
        TensorD y = conv2d(m, ps.at("blk.embed_q.conv.w"), ps.at("blk.embed_q.conv.b"), {1, 2},
                           {0, 0});
        TensorD tok = permute(reshape(y, {1, 16, 12}), {0, 2, 1});
        return concat(expand0(ps.at("blk.embed_q.cls"), 1), tok, 1);
    }();
    for (int64_t i = 0; i < m_emb.numel(); ++i)
        CHECK(out_res.z.data()[i] == doctest::Approx(m_emb.data()[i]).epsilon(1e-12));

    // wrong kv token width
    CHECK_THROWS(blk.forward(m, TensorD::randn({1, 13, 8}, rng)));
}

TEST_CASE("self block equals crossmodal block fed with itself") {
    Rng rng = make_rng(26);
    BlockSpec self_spec;
    self_spec.cross = false;
    self_spec.embed_q = true;
    self_spec.hidden = 8;
    self_spec.heads = 2;
    ParamSet<double> ps;
    TransformerBlock<double> self_blk(ps, "s", self_spec, rng);

    BlockSpec cross_spec = self_spec;
    cross_spec.cross = true;
    cross_spec.embed_kv = true;
    TransformerBlock<double> cross_blk(ps, "c", cross_spec, rng);
    // share every q-side weight with the self block, and make the kv side
    // identical to the q side
    for (const std::string part :
         {".embed_q.conv.w", ".embed_q.conv.b", ".embed_q.cls", ".ln_q.gamma", ".ln_q.beta",
          ".mha.wq.w", ".mha.wq.b", ".mha.wk.w", ".mha.wk.b", ".mha.wv.w", ".mha.wv.b", ".mha.wh",
          ".ln_mlp.gamma", ".ln_mlp.beta", ".mlp.fc1.w", ".mlp.fc1.b", ".mlp.fc2.w",
          ".mlp.fc2.b"})
        copy_param(ps, "s" + part, "c" + part);
    copy_param(ps, "s.embed_q.conv.w", "c.embed_kv.conv.w");
    copy_param(ps, "s.embed_q.conv.b", "c.embed_kv.conv.b");
    copy_param(ps, "s.embed_q.cls", "c.embed_kv.cls");
    copy_param(ps, "s.ln_q.gamma", "c.ln_kv.gamma");
    copy_param(ps, "s.ln_q.beta", "c.ln_kv.beta");

    TensorD map = TensorD::randn({1, 1, 2, 4}, rng);
    auto self_out = self_blk.forward(map);
    auto cross_out = cross_blk.forward(map, map);
    REQUIRE(self_out.z.shape() == cross_out.z.shape());
    for (int64_t i = 0; i < self_out.z.numel(); ++i)
        CHECK(self_out.z.data()[i] == doctest::Approx(cross_out.z.data()[i]).epsilon(1e-12));
}

TEST_CASE("self block on tokens and on feature maps") {
    Rng rng = make_rng(27);
    BlockSpec spec;
    spec.hidden = 16;
    spec.heads = 2;
    spec.embed_q = false;
    ParamSet<float> ps;
    TransformerBlock<float> blk(ps, "t", spec, rng);
    TensorF tokens = TensorF::randn({2, 11, 16}, rng);
    auto out = blk.forward(tokens);
    CHECK(out.z.shape() == std::vector<int64_t>{2, 11, 16});

    BlockSpec mspec = spec;
    mspec.embed_q = true;
    ParamSet<float> ps2;
    TransformerBlock<float> mblk(ps2, "m", mspec, rng);
    TensorF map = TensorF::randn({2, 1, 4, 6}, rng);
    CHECK(mblk.forward(map).z.shape() == std::vector<int64_t>{2, 13, 16});
}

TEST_CASE("block gradients pass finite differences (tiny config)") {
    Rng rng = make_rng(28);
    BlockSpec spec;
    spec.cross = true;
    spec.embed_q = true;
    spec.embed_kv = true;
    spec.hidden = 8;
    spec.heads = 2;
    ParamSet<double> ps;
    TransformerBlock<double> blk(ps, "g", spec, rng);
    TensorD m = TensorD::randn({1, 1, 2, 4}, rng);
    TensorD b = TensorD::randn({1, 1, 2, 4}, rng);
    auto rep = finite_diff_check<double>(
        [&] { return weighted_sum(blk.forward(m, b).z); }, ps, 120, 1e-5, 5);
    INFO("max rel err ", rep.max_rel_error, " at ", rep.worst_param);
    CHECK(rep.max_rel_error <= 1e-3);
}

TEST_CASE("learned positional table changes permutation behaviour only when enabled") {
    Rng rng = make_rng(29);
    BlockSpec spec;
    spec.embed_q = true;
    spec.hidden = 8;
    spec.heads = 2;
    spec.pos_tokens = 1 + 4;  // 2x4 map, 1x2 kernel
    ParamSet<float> ps;
    TransformerBlock<float> blk(ps, "p", spec, rng);
    TensorF map = TensorF::randn({1, 1, 2, 4}, rng);
    CHECK(blk.forward(map).z.shape() == std::vector<int64_t>{1, 5, 8});
    CHECK(ps.contains("p.embed_q.pos"));
}
