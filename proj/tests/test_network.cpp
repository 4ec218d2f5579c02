#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "reference_net.hpp"
#include "qsci/errors.hpp"
#include "qsci/network.hpp"

using namespace qsci;
using oracle::random_tensor;

namespace {

using refnet::reference_forward;

QNetConfig tiny(int c = 8, int n = 1, int k = 2, int heads = 2, int cr = 4) {
    QNetConfig g;
    g.base_channels = c;
    g.resdnet_blocks = n;
    g.cformer_per_block = k;
    g.heads = heads;
    g.cr = cr;
    return g;
}

Tensor input_for(const QNetConfig& cfg, int64_t n, int64_t h, int64_t w, uint64_t seed) {
    return random_tensor({n, 2, cfg.cr, h, w}, seed, 0.0f, 1.0f);
}

Tensor run(QNet& net, const Tensor& x) {
    Tape tape(false);
    return net.forward(tape, tape.constant(x)).value();
}

// Gives zero-initialised parameters some signal so equivalence tests are not vacuous.
void perturb(QNet& net, uint64_t seed, bool include_shortcuts) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(-0.05f, 0.05f);
    for (auto& l : net.layers()) {
        if (l.shortcut && !include_shortcuts) continue;
        for (auto& v : l.weight.value.data()) v += u(rng);
        for (auto& v : l.bias.value.data()) v += u(rng);
    }
}

}  // namespace

TEST(Variants, FlagsAndBits) {
    const QNetConfig q8 = make_variant("q8");
    EXPECT_EQ(q8.body_bits, 8);
    EXPECT_FALSE(q8.use_fem_shortcuts);
    EXPECT_FALSE(q8.use_vrm_shortcuts);
    EXPECT_TRUE(q8.use_qk_shift);
    for (const char* n : {"q4", "q3", "q2"}) {
        const QNetConfig c = make_variant(n);
        EXPECT_TRUE(c.use_fem_shortcuts && c.use_vrm_shortcuts && c.use_qk_shift) << n;
        EXPECT_EQ(c.shortcut_bits, 8);
    }
    EXPECT_EQ(make_variant("q3").body_bits, 3);
    const QNetConfig fp = make_variant("fp32");
    EXPECT_EQ(fp.body_bits, 32);
    EXPECT_EQ(fp.shortcut_bits, 32);
    EXPECT_FALSE(fp.use_fem_shortcuts || fp.use_vrm_shortcuts || fp.use_qk_shift);
    EXPECT_FALSE(fp.quantized());
    const QNetConfig base = make_variant("q4_baseline");
    EXPECT_EQ(base.body_bits, 4);
    EXPECT_FALSE(base.use_fem_shortcuts || base.use_vrm_shortcuts || base.use_qk_shift);
    EXPECT_TRUE(make_variant("q4_shift").use_qk_shift);
    EXPECT_TRUE(make_variant("q4_shift_fem").use_fem_shortcuts);
    EXPECT_FALSE(make_variant("q4_shift_fem").use_vrm_shortcuts);
    EXPECT_EQ(make_variant("q8_resd4").bits_for(Module::ResDNet), 4);
    EXPECT_EQ(make_variant("q8_resd4").bits_for(Module::VideoReconstruction), 8);
    EXPECT_THROW(make_variant("q5"), ConfigError);
}

TEST(Variants, GeometryCarriedOver) {
    const QNetConfig c = make_variant("q4", tiny(12, 3, 1, 3, 6));
    EXPECT_EQ(c.base_channels, 12);
    EXPECT_EQ(c.resdnet_blocks, 3);
    EXPECT_EQ(c.heads, 3);
    EXPECT_EQ(c.cr, 6);
    EXPECT_EQ(c.geometry_fingerprint(), tiny(12, 3, 1, 3, 6).geometry_fingerprint());
    EXPECT_NE(c.fingerprint(), make_variant("q8", tiny(12, 3, 1, 3, 6)).fingerprint());
}

TEST(Config, Validation) {
    QNetConfig c = tiny();
    c.heads = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny();
    c.body_bits = 8;
    c.shortcut_bits = 4;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny();
    c.body_bits = 6;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_THROW(QNet net(c), ConfigError);
}

TEST(QNet, OutputShapes) {
    for (const char* v : {"fp32", "q8", "q4", "q2"}) {
        for (auto [n, h, w] : {std::tuple{1, 8, 8}, std::tuple{2, 12, 16}}) {
            QNet net(make_variant(v, tiny()), 1);
            const Tensor out = run(net, input_for(net.config(), n, h, w, 2));
            EXPECT_EQ(out.shape(), (Shape{n, 4, h, w})) << v;
            for (float x : out.data()) {
                ASSERT_GE(x, 0.0f);
                ASSERT_LE(x, 1.0f);
            }
        }
    }
}

TEST(QNet, ReconstructShape) {
    QNet net(make_variant("q8", tiny()), 1);
    const MaskSet m = generate_masks(3, 4, 8, 10);
    const VideoClip v = synth_video(4, 4, 8, 10, 2);
    EXPECT_EQ(net.reconstruct(encode(v, m), m).frames.shape(), v.frames.shape());
}

TEST(QNet, InputValidation) {
    QNet net(tiny(), 1);
    EXPECT_THROW(run(net, random_tensor({1, 2, 3, 8, 8}, 1)), ConfigError);
    EXPECT_THROW(run(net, random_tensor({1, 3, 4, 8, 8}, 1)), ConfigError);
    EXPECT_THROW(run(net, random_tensor({1, 2, 4, 7, 8}, 1)), ConfigError);
}

TEST(QNet, Deterministic) {
    QNet a(make_variant("q4", tiny()), 5), b(make_variant("q4", tiny()), 5);
    const Tensor x = input_for(a.config(), 2, 8, 8, 6);
    a.calibrate({x});
    b.calibrate({x});
    EXPECT_EQ(run(a, x), run(a, x));
    EXPECT_EQ(run(a, x), run(b, x));
    QNet c(make_variant("q4", tiny()), 6);
    EXPECT_NE(a.layer_named("fem.conv1").weight.value, c.layer_named("fem.conv1").weight.value);
}

TEST(QNet, FullPrecisionMatchesReference) {
    for (auto cfg : {tiny(), tiny(8, 2, 1, 4, 3), make_variant("fp32", tiny(16, 1, 1, 2, 4))}) {
        for (bool sc : {false, true}) {
            cfg.use_fem_shortcuts = cfg.use_vrm_shortcuts = cfg.use_qk_shift = sc;
            QNet net(cfg, 3);
            perturb(net, 4, true);
            for (auto& at : net.attentions()) {
                if (!at.shift) continue;
                at.beta_q.value = random_tensor({cfg.base_channels}, 5, -0.3f, 0.3f);
                at.beta_k.value = random_tensor({cfg.base_channels}, 6, -0.3f, 0.3f);
            }
            const Tensor x = input_for(cfg, 2, 8, 12, 7);
            const Tensor got = run(net, x);
            EXPECT_LE(oracle::max_abs(got, reference_forward(net, x)), 1e-6) << cfg.canonical();
        }
    }
}

TEST(QNet, ZeroInitShortcutsLeaveOutputUnchanged) {
    for (auto [plain, with] : {std::pair{"q4_shift", "q4"}, std::pair{"q4_baseline", "q4_shift_fem"}}) {
        QNetConfig pc = make_variant(plain, tiny()), wc = make_variant(with, tiny());
        wc.use_qk_shift = pc.use_qk_shift;
        QNet a(pc, 9), b(wc, 9);
        perturb(a, 10, false);
        perturb(b, 10, false);
        const Tensor x = input_for(pc, 1, 8, 8, 11);
        a.calibrate({x});
        for (auto& l : b.layers()) {
            if (l.shortcut) continue;
            const QConvLayer& src = a.layer_named(l.name);
            l.aq.set(src.aq.a(), src.aq.z());
            l.wq.set(src.wq.a());
        }
        for (size_t i = 0; i < a.attentions().size(); ++i) {
            auto &s = a.attentions()[i], &d = b.attentions()[i];
            d.q_quant.set(s.q_quant.a(), s.q_quant.z());
            d.k_quant.set(s.k_quant.a(), s.k_quant.z());
            d.p_quant.set(s.p_quant.a(), s.p_quant.z());
        }
        EXPECT_EQ(run(a, x), run(b, x)) << plain << " vs " << with;
    }
    QNet a(tiny(), 12), b([] {
        QNetConfig c = tiny();
        c.use_fem_shortcuts = c.use_vrm_shortcuts = true;
        return c;
    }(), 12);
    const Tensor x = input_for(tiny(), 1, 8, 8, 13);
    EXPECT_EQ(run(a, x), run(b, x));
}

TEST(QNet, ZeroShiftIsBitIdentical) {
    QNet plain(make_variant("q4_baseline", tiny()), 14), shifted(make_variant("q4_shift", tiny()), 14);
    const Tensor x = input_for(plain.config(), 1, 8, 8, 15);
    plain.calibrate({x});
    shifted.calibrate({x});
    EXPECT_EQ(run(plain, x), run(shifted, x));
}

TEST(Attention, ShiftMovesMeanByBetaMean) {
    Tape tape(false);
    const Tensor q = random_tensor({2, 6, 4, 3, 3}, 16);
    const Tensor beta = random_tensor({6}, 17);
    const Tensor qs = add_channel(tape.constant(q), tape.constant(beta)).value();
    double mq = 0.0, ms = 0.0, mb = 0.0;
    for (size_t i = 0; i < q.numel(); ++i) {
        mq += q[i];
        ms += qs[i];
    }
    for (float b : beta.data()) mb += b;
    EXPECT_NEAR(ms / q.numel() - mq / q.numel(), mb / 6.0, 1e-6);
}

TEST(Attention, ProbabilitiesSumToOne) {
    const Tensor q = random_tensor({1, 8, 4, 3, 3}, 18, -3.0f, 3.0f), k = random_tensor({1, 8, 4, 3, 3}, 19, -3.0f, 3.0f);
    const Tensor p = softmax_raw(temporal_scores_raw(q, k, 2, 0.5f), 3);
    for (int64_t h = 0; h < 2; ++h)
        for (int64_t t1 = 0; t1 < 4; ++t1)
            for (int64_t i = 0; i < 3; ++i)
                for (int64_t j = 0; j < 3; ++j) {
                    double s = 0.0;
                    for (int64_t t2 = 0; t2 < 4; ++t2) s += p.at({0, h, t1, t2, i, j});
                    EXPECT_NEAR(s, 1.0, 1e-5);
                }
}

TEST(Attention, SingleFrameIsProjectedValue) {
    QNetConfig c = tiny(8, 1, 1, 2, 1);
    c.use_qk_shift = true;
    QNet net(c, 20);
    auto& at = net.attentions()[0];
    at.beta_q.value = random_tensor({8}, 21);
    const Tensor x = random_tensor({1, 8, 1, 4, 4}, 22);
    Tape tape(false);
    Var xv = tape.constant(x);
    const Tensor got = net.shifted_attention(tape, at, xv).value();
    const Tensor want = net.layer(tape, *at.out, net.layer(tape, *at.v, xv)).value();
    EXPECT_EQ(got, want);
}

TEST(Attention, KeyOffsetLeavesOutputUnchanged) {
    QNetConfig c = tiny(8, 1, 1, 2, 4);
    c.use_qk_shift = true;
    QNet net(c, 23);
    auto& at = net.attentions()[0];
    const Tensor x = random_tensor({1, 8, 4, 4, 4}, 24);
    Tape tape(false);
    const Tensor base = net.shifted_attention(tape, at, tape.constant(x)).value();
    // a constant added to every key shifts each query's logits uniformly
    at.beta_k.value.fill(0.75f);
    const Tensor shifted = net.shifted_attention(tape, at, tape.constant(x)).value();
    EXPECT_LE(max_abs_diff(base, shifted), 1e-5);
}

TEST(Attention, HeadMismatchRejected) {
    Tape tape(false);
    Var q = tape.constant(Tensor({1, 6, 2, 2, 2}));
    EXPECT_THROW(temporal_scores(q, q, 4, 1.0f), ConfigError);
}

TEST(CFormer, ZeroOutputProjectionIsIdentity) {
    QNet net(make_variant("q4", tiny()), 25);
    const Tensor x = random_tensor({1, 8, 4, 4, 4}, 26);
    net.calibrate({input_for(net.config(), 1, 8, 8, 27)});
    for (auto& blk : net.blocks())
        for (auto& cf : blk.cformers) {
            cf.mlp_out->weight.value.fill(0.0f);
            cf.mlp_out->bias.value.fill(0.0f);
            Tape tape(false);
            EXPECT_EQ(net.cformer(tape, cf, tape.constant(x)).value(), x);
        }
    for (auto& blk : net.blocks()) {
        blk.fuse->weight.value.fill(0.0f);
        blk.fuse->bias.value.fill(0.0f);
    }
    Tape tape(false);
    EXPECT_EQ(net.resdnet(tape, tape.constant(x)).value(), x);
}

TEST(Audit, OneQuantizerPairPerWeightedLayer) {
    for (const char* v : {"fp32", "q8", "q4", "q4_baseline", "q8_vrm4", "q2"}) {
        const QNetConfig cfg = make_variant(v, tiny());
        QNet net(cfg);
        const auto rows = net.audit(4, 16, 16);
        size_t weighted = 0, attn = 0;
        std::set<std::string> names;
        for (const auto& r : rows) {
            EXPECT_TRUE(names.insert(r.name).second) << r.name;
            if (!r.weighted) {
                ++attn;
                continue;
            }
            ++weighted;
            EXPECT_EQ(r.act_quantizers, 1);
            EXPECT_EQ(r.weight_quantizers, 1);
            const int want = r.shortcut ? cfg.shortcut_bits : cfg.bits_for(r.module);
            EXPECT_EQ(r.w_bits, want) << v << " " << r.name;
            EXPECT_EQ(r.a_bits, want) << v << " " << r.name;
            const QConvLayer& l = net.layer_named(r.name);
            EXPECT_EQ(l.aq.bits.bits(), want);
            EXPECT_EQ(l.wq.bits.bits(), want);
        }
        EXPECT_EQ(weighted, net.layers().size());
        EXPECT_EQ(attn, 2 * net.attentions().size());
        EXPECT_NE(audit_table(rows).find("fem.conv1"), std::string::npos);
    }
}

TEST(Audit, ShortcutsPresentOnlyWhenEnabled) {
    auto has = [](const QNetConfig& c, const std::string& n) {
        QNet net(c);
        for (const auto& l : net.layers())
            if (l.name == n) return true;
        return false;
    };
    EXPECT_FALSE(has(make_variant("q4_shift", tiny()), "fem.sc1"));
    EXPECT_TRUE(has(make_variant("q4_shift_fem", tiny()), "fem.sc2"));
    EXPECT_FALSE(has(make_variant("q4_shift_fem", tiny()), "vrm.sc1"));
    EXPECT_TRUE(has(make_variant("q4", tiny()), "vrm.sc2"));
}

TEST(Audit, MacCountsFollowGeometry) {
    QNet net(tiny());
    const auto rows = net.audit(4, 16, 16);
    for (const auto& r : rows) {
        if (r.name == "fem.conv1") {
            EXPECT_EQ(r.macs, 8 * 2 * 27 * 4 * 16 * 16);
            EXPECT_EQ(r.params, 8 * 2 * 27 + 8);
        }
        if (r.name == "resd0.cf0.attn.q") {
            EXPECT_EQ(r.macs, 8 * 8 * 4 * 8 * 8);
        }
        if (r.name == "vrm.out") {
            EXPECT_EQ(r.macs, 1 * 4 * 27 * 4 * 16 * 16);
        }
    }
}

TEST(Calibration, QuantizedStaysCloseToFullPrecision) {
    QNet fp(tiny(), 28), q8(make_variant("q8", tiny()), 28);
    perturb(fp, 29, false);
    perturb(q8, 29, false);
    const Tensor x = input_for(tiny(), 2, 8, 8, 30);
    q8.calibrate({x});
    const Tensor a = run(fp, x), b = run(q8, x);
    EXPECT_LE(max_abs_diff(a, b), 0.05f);
    EXPECT_NE(a, b);
}

TEST(Calibration, WeightAlphaBoundsCodes) {
    const Tensor w = random_tensor({16, 8, 3, 3, 3}, 31, -0.2f, 0.2f);
    for (int b : {2, 4, 8}) {
        const float a = choose_weight_alpha(w, BitWidth(b), 8 * 27);
        float m = 0.0f;
        for (float v : w.data()) m = std::max(m, std::fabs(v));
        EXPECT_GT(a, 0.0f);
        EXPECT_LE(a, m / BitWidth(b).qp() * 1.0001f);
    }
    const auto [alpha, zero] = choose_act_params({0.0f, 0.25f, 0.5f, 1.0f}, BitWidth(8));
    EXPECT_NEAR(alpha, 1.0f / 255.0f, 1e-6);
    EXPECT_NEAR(zero, 128.0f / 255.0f, 1e-6);
}

TEST(Gradients, FullNetworkFiniteDifferences) {
    QNetConfig cfg = tiny(4, 1, 1, 2, 2);
    cfg.use_fem_shortcuts = cfg.use_vrm_shortcuts = cfg.use_qk_shift = true;
    QNet net(cfg, 32);
    perturb(net, 33, true);
    const Tensor x = input_for(cfg, 1, 4, 4, 34);
    const Tensor target = random_tensor({1, 2, 4, 4}, 35, 0.0f, 1.0f);
    auto loss_of = [&] {
        Tape tape(false);
        const Tensor y = net.forward(tape, tape.constant(x)).value();
        double s = 0.0;
        for (size_t i = 0; i < y.numel(); ++i) s += (double(y[i]) - target[i]) * (double(y[i]) - target[i]);
        return s / static_cast<double>(y.numel());
    };
    net.zero_grad();
    {
        Tape tape;
        Var y = net.forward(tape, tape.constant(x));
        Var d = sub(y, tape.constant(target));
        tape.backward(mean(mul(d, d)));
    }
    std::vector<double> analytic, numeric;
    const double h = 1e-3;
    for (const char* name : {"fem.conv1.weight", "fem.sc2.weight", "resd0.cf0.attn.q.weight", "resd0.cf0.attn.beta_k",
                             "resd0.cf0.mlp_in.bias", "resd0.fuse.weight", "vrm.up.weight", "vrm.out.bias"}) {
        Parameter* p = net.find(name);
        ASSERT_NE(p, nullptr) << name;
        for (size_t i = 0; i < p->value.numel(); i += std::max<size_t>(1, p->value.numel() / 6)) {
            const float orig = p->value[i];
            p->value[i] = orig + static_cast<float>(h);
            const double up = loss_of();
            p->value[i] = orig - static_cast<float>(h);
            const double down = loss_of();
            p->value[i] = orig;
            analytic.push_back(p->grad[i]);
            numeric.push_back((up - down) / (2 * h));
        }
    }
    EXPECT_LE(oracle::rel_err(analytic, numeric), 1e-3);
}
