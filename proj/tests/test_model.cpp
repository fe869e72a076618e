#include <doctest.h>

#include "bmf/gradcheck.hpp"
#include "bmf/model.hpp"
#include "helpers.hpp"

using namespace bmf;
using testutil::weighted_sum;

namespace {

template <typename T>
std::pair<Tensor<T>, Tensor<T>> random_inputs(int64_t batch, Rng& rng) {
    return {Tensor<T>::randn({batch, 1, 21, 256}, rng, T(0), T(2)),
            Tensor<T>::randn({batch, 1, 10, 90}, rng, T(1), T(0.5))};
}

}  // namespace

TEST_CASE("enose encoder: shape, zero input, batch order") {
    Rng rng = make_rng(31);
    SUBCASE("paper preset hits 1x16x20") {
        ParamSet<float> ps;
        ModelConfig cfg = ModelConfig::paper(Variant::student);
        EnoseEncoder<float> enc(ps, cfg, rng);
        TensorF x = TensorF::randn({1, 1, 10, 90}, rng);
        TensorF y = enc.forward(x);
        CHECK(y.shape() == std::vector<int64_t>{1, 1, 16, 20});
        CHECK(enc.flops() > 0);
        // zero input with zero-initialized biases stays zero
        TensorF zero = TensorF::zeros({1, 1, 10, 90});
        for (float v : enc.forward(zero).data()) CHECK(v == 0.f);
    }
    SUBCASE("desk preset: batched forward preserves order") {
        ParamSet<float> ps;
        ModelConfig cfg = ModelConfig::desk(Variant::student);
        EnoseEncoder<float> enc(ps, cfg, rng);
        TensorF batch = TensorF::randn({240, 1, 10, 90}, rng);
        TensorF by = enc.forward(batch);
        CHECK(by.shape() == std::vector<int64_t>{240, 1, 4, 10});
        for (int64_t i : {0L, 7L, 239L}) {
            TensorF one = TensorF::from({1, 1, 10, 90},
                                        {batch.data().begin() + i * 900,
                                         batch.data().begin() + (i + 1) * 900});
            TensorF oy = enc.forward(one);
            for (int64_t j = 0; j < 40; ++j)
                CHECK(by.data()[i * 40 + j] == doctest::Approx(oy.data()[j]).epsilon(1e-6));
        }
    }
}

TEST_CASE("eeg encoder: shape and residual stage behaviour") {
    Rng rng = make_rng(32);
    SUBCASE("paper preset hits 1x16x20") {
        ParamSet<float> ps;
        ModelConfig cfg = ModelConfig::paper(Variant::student);
        EegEncoder<float> enc(ps, cfg, rng);
        TensorF x = TensorF::randn({2, 1, 21, 256}, rng);
        CHECK(enc.forward(x).shape() == std::vector<int64_t>{2, 1, 16, 20});
        CHECK(enc.stage_count() == 4);
    }
    SUBCASE("zeroed residual stage is a pure shortcut") {
        ParamSet<double> ps;
        ResidualStage<double> same(ps, "id", 3, 3, 1, rng);
        for (auto& v : ps.at("id.conv1.w").raw_data()) v = 0;
        for (auto& v : ps.at("id.conv2.w").raw_data()) v = 0;
        TensorD x = TensorD::randu({1, 3, 4, 4}, rng, 0.0, 2.0);  // non-negative
        TensorD y = same.forward(x);
        for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);

        ResidualStage<double> proj(ps, "pr", 3, 5, 2, rng);
        for (auto& v : ps.at("pr.conv1.w").raw_data()) v = 0;
        for (auto& v : ps.at("pr.conv2.w").raw_data()) v = 0;
        TensorD py = proj.forward(x);
        TensorD ref = relu(conv2d(x, ps.at("pr.shortcut.w"), ps.at("pr.shortcut.b"), {2, 2},
                                  {0, 0}));
        for (int64_t i = 0; i < ref.numel(); ++i) CHECK(py.data()[i] == ref.data()[i]);
    }
    SUBCASE("tiny preset gradient check") {
        ParamSet<double> ps;
        ModelConfig cfg = ModelConfig::grad_tiny(Variant::student);
        EegEncoder<double> enc(ps, cfg, rng);
        CHECK(enc.stage_count() == 2);
        TensorD x = TensorD::randn({1, 1, 21, 256}, rng);
        auto rep = finite_diff_check<double>(
            [&] { return weighted_sum(enc.forward(x)); }, ps, 50, 1e-5, 3);
        INFO("max rel err ", rep.max_rel_error, " at ", rep.worst_param);
        CHECK(rep.max_rel_error <= 1e-3);
    }
}

TEST_CASE("teacher forward at paper scale: documented shapes") {
    Rng rng = make_rng(33);
    BmfNet<float> teacher(ModelConfig::paper(Variant::teacher), 1);
    auto [eeg, enose] = random_inputs<float>(1, rng);
    NoGradGuard ng;
    auto tr = teacher.forward(eeg, enose);
    REQUIRE(tr.mfi_seq.size() == 4);
    for (const auto& s : tr.mfi_seq) CHECK(s.shape() == std::vector<int64_t>{1, 161, 320});
    CHECK(tr.mfi_final.shape() == std::vector<int64_t>{1, 161, 320});
    CHECK(tr.aefm_final.shape() == std::vector<int64_t>{1, 161, 320});
    for (const auto& t : tr.ff_taps) CHECK(t.hidden.shape() == std::vector<int64_t>{1, 81, 320});
    CHECK(tr.fc_feature.shape() == std::vector<int64_t>{1, 320});
    CHECK(tr.probs.shape() == std::vector<int64_t>{1, 2});
    double sum = tr.probs.data()[0] + tr.probs.data()[1];
    CHECK(std::abs(sum - 1.0) < 1e-6);
    CHECK(tr.mfi_taps.size() == 4);
    CHECK(tr.aefm_taps.size() == 4);
    CHECK(tr.ff_taps.size() == 4);
    CHECK(tr.m.shape() == std::vector<int64_t>{1, 1, 16, 20});
    CHECK(tr.b.shape() == std::vector<int64_t>{1, 1, 16, 20});
}

TEST_CASE("student trace: tap counts and determinism") {
    Rng rng = make_rng(34);
    ModelConfig cfg = ModelConfig::desk(Variant::student);
    BmfNet<float> net(cfg, 7);
    auto [eeg, enose] = random_inputs<float>(2, rng);
    NoGradGuard ng;
    auto tr = net.forward(eeg, enose);
    CHECK(tr.mfi_taps.size() == 2);
    CHECK(tr.aefm_taps.size() == 2);
    CHECK(tr.ff_taps.size() == 2);
    for (int64_t r = 0; r < 2; ++r) {
        double s = tr.probs.data()[r * 2] + tr.probs.data()[r * 2 + 1];
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
    // same seed, same input -> identical outputs
    BmfNet<float> twin(cfg, 7);
    auto tr2 = twin.forward(eeg, enose);
    for (int64_t i = 0; i < tr.probs.numel(); ++i)
        CHECK(tr.probs.data()[i] == tr2.probs.data()[i]);
}

TEST_CASE("batch permutation permutes outputs identically") {
    Rng rng = make_rng(35);
    BmfNet<float> net(ModelConfig::desk(Variant::student), 3);
    auto [eeg, enose] = random_inputs<float>(3, rng);
    NoGradGuard ng;
    auto base = net.forward(eeg, enose);
    std::vector<int64_t> perm{2, 0, 1};
    auto permuted_input = [&](const TensorF& t) {
        int64_t chunk = t.numel() / t.shape()[0];
        TensorF out = TensorF::zeros(t.shape());
        for (int64_t i = 0; i < 3; ++i)
            std::copy(t.data().begin() + perm[i] * chunk, t.data().begin() + (perm[i] + 1) * chunk,
                      out.raw_data().begin() + i * chunk);
        return out;
    };
    auto shuffled = net.forward(permuted_input(eeg), permuted_input(enose));
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 2; ++j)
            CHECK(shuffled.probs.data()[i * 2 + j] ==
                  doctest::Approx(base.probs.data()[perm[i] * 2 + j]).epsilon(1e-5));
}

TEST_CASE("teacher and student share the FMA encoder architecture") {
    BmfNet<float> teacher(ModelConfig::paper(Variant::teacher), 1);
    BmfNet<float> student(ModelConfig::paper(Variant::student), 2);
    auto encoder_shapes = [](const ParamSet<float>& ps) {
        std::vector<std::pair<std::string, std::vector<int64_t>>> out;
        for (size_t i = 0; i < ps.size(); ++i) {
            const std::string& n = ps.name(i);
            if (n.rfind("enose_enc.", 0) == 0 || n.rfind("eeg_enc.", 0) == 0)
                out.push_back({n, ps.value(i).shape()});
        }
        return out;
    };
    auto ts = encoder_shapes(teacher.params());
    auto ss = encoder_shapes(student.params());
    REQUIRE(ts.size() == ss.size());
    for (size_t i = 0; i < ts.size(); ++i) {
        CHECK(ts[i].first == ss[i].first);
        CHECK(ts[i].second == ss[i].second);
    }
}

TEST_CASE("complexity: params ordering, flops band, classifier size") {
    BmfNet<float> teacher(ModelConfig::paper(Variant::teacher), 1);
    BmfNet<float> student(ModelConfig::paper(Variant::student), 1);
    CHECK(teacher.count_params() > student.count_params());
    double ratio = double(teacher.count_flops()) / double(student.count_flops());
    INFO("teacher ", teacher.count_flops(), " / student ", student.count_flops(), " = ", ratio);
    CHECK(ratio >= 1.4);
    CHECK(ratio <= 2.2);
    // FC(320 -> 2) carries 320*2 + 2 parameters
    const auto& ps = teacher.params();
    int64_t fc = 0;
    for (size_t i = 0; i < ps.size(); ++i)
        if (ps.name(i).rfind("head.fc", 0) == 0) fc += ps.value(i).numel();
    CHECK(fc == 642);
}

TEST_CASE("ablation variants are constructible and run") {
    Rng rng = make_rng(36);
    NoGradGuard ng;
    auto [eeg, enose] = random_inputs<float>(1, rng);
    SUBCASE("bnet_s: EEG only") {
        BmfNet<float> net(ModelConfig::desk(Variant::bnet_s), 4);
        auto tr = net.forward(eeg, TensorF{});
        CHECK(tr.probs.shape() == std::vector<int64_t>{1, 2});
        CHECK(!tr.m.defined());
        CHECK(tr.mfi_taps.empty());
        CHECK(tr.aefm_taps.size() == 2);
        CHECK_THROWS(net.forward(TensorF{}, enose));
    }
    SUBCASE("mnet_s: e-nose only") {
        BmfNet<float> net(ModelConfig::desk(Variant::mnet_s), 4);
        auto tr = net.forward(TensorF{}, enose);
        CHECK(tr.probs.shape() == std::vector<int64_t>{1, 2});
        CHECK(!tr.b.defined());
        CHECK(tr.mfi_taps.empty());
        CHECK(tr.aefm_taps.size() == 2);  // AEFM runs on the e-nose features
    }
    SUBCASE("no_aefm keeps MFI only") {
        BmfNet<float> net(ModelConfig::desk(Variant::no_aefm), 4);
        auto tr = net.forward(eeg, enose);
        CHECK(tr.aefm_taps.empty());
        CHECK(tr.mfi_taps.size() == 2);
        CHECK(tr.probs.shape() == std::vector<int64_t>{1, 2});
    }
    SUBCASE("no_alignment matches student structure") {
        BmfNet<float> net(ModelConfig::desk(Variant::no_alignment), 4);
        auto tr = net.forward(eeg, enose);
        CHECK(tr.mfi_taps.size() == 2);
        CHECK(net.config().align_in_loss() == false);
    }
}

TEST_CASE("full tiny model gradient check") {
    Rng rng = make_rng(37);
    BmfNet<double> net(ModelConfig::grad_tiny(Variant::student), 11);
    auto [eeg, enose] = random_inputs<double>(1, rng);
    auto rep = finite_diff_check<double>(
        [&] {
            auto tr = net.forward(eeg, enose);
            return add(weighted_sum(tr.logits, 1), scale(mse_loss(tr.m, tr.b), 0.3));
        },
        net.params(), 60, 1e-5, 17);
    INFO("max rel err ", rep.max_rel_error, " at ", rep.worst_param, "[", rep.worst_index, "]");
    CHECK(rep.max_rel_error <= 1e-3);
}

TEST_CASE("config validation rejects bad geometry") {
    ModelConfig bad = ModelConfig::paper(Variant::student);
    bad.heads = 7;  // 320 % 7 != 0
    CHECK_THROWS(BmfNet<float>(bad, 0));
    ModelConfig bad2 = ModelConfig::paper(Variant::teacher);
    bad2.mfi_pairs = 1;
    CHECK_THROWS(BmfNet<float>(bad2, 0));
}
