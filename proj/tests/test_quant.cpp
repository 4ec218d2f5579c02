#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "qsci/errors.hpp"
#include "qsci/quant.hpp"

using namespace qsci;
using oracle::random_tensor;

namespace {

ActQuantizer act(int bits, float alpha, float zero) {
    ActQuantizer q(BitWidth(bits), "aq");
    q.set(alpha, zero);
    return q;
}

WeightQuantizer wgt(int bits, float alpha) {
    WeightQuantizer q(BitWidth(bits), "wq");
    q.set(alpha);
    return q;
}

const int kBits[] = {2, 3, 4, 8};

}  // namespace

TEST(BitWidth, Ranges) {
    EXPECT_EQ(BitWidth(8).qn(), 128);
    EXPECT_EQ(BitWidth(8).qp(), 127);
    EXPECT_EQ(BitWidth(4).qn(), 8);
    EXPECT_EQ(BitWidth(4).qp(), 7);
    EXPECT_EQ(BitWidth(2).qn(), 2);
    EXPECT_EQ(BitWidth(2).qp(), 1);
    EXPECT_TRUE(BitWidth(32).passthrough());
    EXPECT_THROW(BitWidth(5), ConfigError);
    EXPECT_THROW(BitWidth(16), ConfigError);
}

TEST(Quantizer, DefaultsAndNames) {
    ActQuantizer a(BitWidth(8), "layer.x");
    EXPECT_EQ(a.a(), 1.0f);
    EXPECT_EQ(a.z(), 0.0f);
    EXPECT_EQ(a.alpha.name, "layer.x.alpha");
    EXPECT_EQ(a.zero.name, "layer.x.zero");
    WeightQuantizer w(BitWidth(4), "layer.w");
    EXPECT_EQ(w.a(), 1.0f);
}

TEST(ActQuantize, Examples) {
    auto q8 = act(8, 1.0f, 0.0f);
    EXPECT_EQ(act_quantize(Tensor::scalar(0.0f), q8).item(), 0.0f);
    EXPECT_EQ(act_quantize(Tensor::scalar(300.0f), q8).item(), 127.0f);
    EXPECT_EQ(act_quantize(Tensor::scalar(-300.0f), q8).item(), -128.0f);
    auto q = act(8, 0.5f, 0.1f);
    EXPECT_EQ(act_quantize(Tensor::scalar(2.3f), q).item(), 4.0f);
}

TEST(ActQuantize, TiesRoundToEven) {
    EXPECT_EQ(round_half_even(0.5f), 0.0f);
    EXPECT_EQ(round_half_even(1.5f), 2.0f);
    EXPECT_EQ(round_half_even(2.5f), 2.0f);
    EXPECT_EQ(round_half_even(-0.5f), 0.0f);
    EXPECT_EQ(round_half_even(-1.5f), -2.0f);
    EXPECT_EQ(round_half_even(2.4f), 2.0f);
    auto q = act(8, 1.0f, 0.0f);
    EXPECT_EQ(act_quantize(Tensor::scalar(2.5f), q).item(), 2.0f);
    EXPECT_EQ(act_quantize(Tensor::scalar(3.5f), q).item(), 4.0f);
}

TEST(ActQuantize, NonFiniteRejected) {
    auto q = act(8, 1.0f, 0.0f);
    EXPECT_THROW(act_quantize(Tensor::scalar(std::nanf("")), q), NumericError);
    EXPECT_THROW(act_quantize(Tensor::scalar(INFINITY), q), NumericError);
}

TEST(ActDequantize, Examples) {
    EXPECT_EQ(act_dequantize(Tensor::scalar(0.0f), act(8, 1.0f, 0.0f)).item(), 0.0f);
    EXPECT_NEAR(act_dequantize(Tensor::scalar(4.0f), act(8, 0.5f, 0.1f)).item(), 2.1f, 1e-6);
}

TEST(ActQuantize, IntegralInputsAreFixedPoints) {
    for (int b : kBits) {
        auto q = act(b, 1.0f, 0.0f);
        const BitWidth bw(b);
        for (int v = -bw.qn(); v <= bw.qp(); ++v) {
            const Tensor x = Tensor::scalar(static_cast<float>(v));
            EXPECT_EQ(act_dequantize(act_quantize(x, q), q), x);
        }
    }
}

TEST(WeightQuantize, Examples) {
    for (float a : {0.1f, 1.0f, 3.7f}) {
        auto q = wgt(4, a);
        EXPECT_EQ(weight_dequantize(weight_quantize(Tensor::scalar(0.0f), q), q).item(), 0.0f);
    }
    auto q = wgt(4, 1.0f);
    EXPECT_EQ(weight_quantize(Tensor::scalar(5.0f), q).item(), 5.0f);
    EXPECT_EQ(weight_dequantize(weight_quantize(Tensor::scalar(5.0f), q), q).item(), 5.0f);
    EXPECT_EQ(weight_quantize(Tensor::scalar(-100.0f), q).item(), -8.0f);
    EXPECT_EQ(weight_quantize(Tensor::scalar(100.0f), q).item(), 7.0f);
}

TEST(Quantize, CodeRangeAndIntegrality) {
    for (int b : kBits) {
        const BitWidth bw(b);
        const Tensor x = random_tensor({5000}, 100 + b, -50.0f, 50.0f);
        for (const Tensor& c : {act_quantize(x, act(b, 0.37f, -1.3f)), weight_quantize(x, wgt(b, 0.21f))}) {
            for (float v : c.data()) {
                ASSERT_GE(v, -bw.qn());
                ASSERT_LE(v, bw.qp());
                ASSERT_EQ(v, std::round(v));
            }
        }
    }
}

TEST(Quantize, Idempotent) {
    for (int b : kBits) {
        const Tensor x = random_tensor({4000}, 200 + b, -10.0f, 10.0f);
        const Tensor once = fake_quant_raw(x, 0.173f, 0.41f, BitWidth(b));
        EXPECT_EQ(fake_quant_raw(once, 0.173f, 0.41f, BitWidth(b)), once) << b;
        const Tensor w1 = fake_quant_raw(x, 0.093f, 0.0f, BitWidth(b));
        EXPECT_EQ(fake_quant_raw(w1, 0.093f, 0.0f, BitWidth(b)), w1) << b;
    }
}

TEST(Quantize, Monotone) {
    for (int b : kBits) {
        Tensor x = random_tensor({3000}, 300 + b, -20.0f, 20.0f);
        std::sort(x.data().begin(), x.data().end());
        const Tensor c = act_quantize(x, act(b, 0.29f, 0.7f));
        for (size_t i = 1; i < c.numel(); ++i) ASSERT_LE(c[i - 1], c[i]);
    }
}

TEST(Quantize, FakeQuantMatchesDirectFormula) {
    for (int b : kBits) {
        const BitWidth bw(b);
        const float alpha = 0.23f, z = -0.4f;
        const Tensor x = random_tensor({2000}, 400 + b, -5.0f, 5.0f);
        const Tensor y = fake_quant_raw(x, alpha, z, bw);
        for (size_t i = 0; i < x.numel(); ++i) {
            const double v = (static_cast<double>(x[i]) - z) / alpha;
            const double code = std::nearbyint(std::clamp(v, -double(bw.qn()), double(bw.qp())));
            ASSERT_NEAR(y[i], code * alpha + z, 1e-5);
        }
    }
}

TEST(Ste, MaskOnManyElements) {
    for (int b : kBits) {
        const BitWidth bw(b);
        auto q = act(b, 0.05f, 0.2f);
        // about half the samples land inside the clip interval
        const float span = 2.0f * q.a() * bw.qn() + std::fabs(q.z());
        const Tensor x = random_tensor({10000}, 500 + b, -span, span);
        const Tensor g = random_tensor({10000}, 600 + b, 0.5f, 1.5f);
        Tape tape;
        Var xv = tape.leaf(x);
        Var y = fake_quant(xv, q);
        tape.backward(sum(mul(y, tape.constant(g))));
        const Tensor& gx = tape.grad(xv);
        size_t inside = 0, outside = 0;
        for (size_t i = 0; i < x.numel(); ++i) {
            const double v = (static_cast<double>(x[i]) - q.z()) / q.a();
            if (std::fabs(v + bw.qn()) < 1e-3 || std::fabs(v - bw.qp()) < 1e-3) continue;
            if (v > -bw.qn() && v < bw.qp()) {
                ASSERT_EQ(gx[i], g[i]);
                ++inside;
            } else {
                ASSERT_EQ(gx[i], 0.0f);
                ++outside;
            }
        }
        EXPECT_GT(inside, 1000u);
        EXPECT_GT(outside, 1000u);
    }
}

TEST(Ste, WeightMask) {
    auto q = wgt(4, 0.1f);
    const Tensor w({4}, std::vector<float>{0.26f, -0.33f, 5.0f, -5.0f});
    Tape tape;
    Var wv = tape.leaf(w);
    tape.backward(sum(fake_quant(wv, q)));
    EXPECT_EQ(tape.grad(wv)[0], 1.0f);
    EXPECT_EQ(tape.grad(wv)[1], 1.0f);
    EXPECT_EQ(tape.grad(wv)[2], 0.0f);
    EXPECT_EQ(tape.grad(wv)[3], 0.0f);
    EXPECT_NEAR(q.alpha.grad.item(), (3.0 - 2.6) + (-3.0 + 3.3) + 7.0 - 8.0, 1e-5);
}

TEST(Ste, ParameterGradientRules) {
    auto q = act(4, 0.5f, 0.25f);
    q.alpha.zero_grad();
    q.zero.zero_grad();
    // v = (x - z) / alpha: 2.6 (in range), 20 (high clip), -20 (low clip)
    const Tensor x({3}, std::vector<float>{1.55f, 10.25f, -9.75f});
    Tape tape;
    tape.backward(sum(fake_quant(tape.constant(x), q)));
    const double want_alpha = (3.0 - 2.6) + 7.0 - 8.0;
    EXPECT_NEAR(q.alpha.grad.item(), want_alpha, 1e-5);
    EXPECT_FLOAT_EQ(q.zero.grad.item(), 2.0f);
}

TEST(Ste, AlphaGradientMatchesFiniteDifferenceOnClipped) {
    for (int b : kBits) {
        const BitWidth bw(b);
        const float alpha = 0.3f, z = 0.1f, h = 1e-3f;
        Tensor x = random_tensor({200}, 700 + b, 0.0f, 1.0f);
        for (size_t i = 0; i < x.numel(); ++i)
            x[i] = (i % 2 ? 1.0f : -1.0f) * (alpha * bw.qn() * 2.0f + 1.0f + x[i]);
        auto q = act(b, alpha, z);
        q.alpha.zero_grad();
        Tape tape;
        tape.backward(sum(fake_quant(tape.constant(x), q)));
        double plus = 0.0, minus = 0.0;
        const Tensor yp = fake_quant_raw(x, alpha + h, z, bw), ym = fake_quant_raw(x, alpha - h, z, bw);
        for (float v : yp.data()) plus += v;
        for (float v : ym.data()) minus += v;
        const double fd = (plus - minus) / (2.0 * h);
        EXPECT_NEAR(q.alpha.grad.item(), fd, 1e-2 * std::max(1.0, std::fabs(fd))) << b;
        EXPECT_EQ(std::signbit(q.alpha.grad.item()), std::signbit(fd));
    }
}

TEST(Ste, PassThroughIsIdentity) {
    ActQuantizer a(BitWidth(32), "p");
    WeightQuantizer w(BitWidth(32), "pw");
    const Tensor x = random_tensor({50}, 800, -1e3f, 1e3f);
    Tape tape;
    Var xv = tape.leaf(x);
    Var y = fake_quant(fake_quant(xv, a), w);
    EXPECT_EQ(y.value(), x);
    tape.backward(sum(y));
    for (float g : tape.grad(xv).data()) EXPECT_EQ(g, 1.0f);
    EXPECT_EQ(act_quantize(x, a), x);
}

TEST(QLinear, IntegralExact) {
    auto aq = act(8, 1.0f, 0.0f);
    auto wq = wgt(8, 1.0f);
    Tape tape(false);
    const Tensor x({2, 3}, std::vector<float>{1, -2, 3, 4, 5, -6});
    const Tensor w({2, 3}, std::vector<float>{7, 0, -1, 2, 2, 2});
    const Tensor y = q_linear(tape.constant(x), tape.constant(w), aq, wq).value();
    EXPECT_EQ(y, Tensor({2, 2}, std::vector<float>{4, 4, 34, 6}));
}

TEST(QLinear, PassThroughIsMatmul) {
    ActQuantizer aq(BitWidth(32), "a");
    WeightQuantizer wq(BitWidth(32), "w");
    const Tensor x = random_tensor({3, 5}, 801), w = random_tensor({4, 5}, 802);
    Tape tape(false);
    const Tensor y = q_linear(tape.constant(x), tape.constant(w), aq, wq).value();
    Tensor wt({5, 4});
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 5; ++j) wt.at({j, i}) = w.at({i, j});
    EXPECT_LE(oracle::max_abs(y, oracle::matmul(x, wt)), 1e-5);
}

TEST(QLinear, MatchesFakeQuantOracle) {
    for (int b : kBits) {
        auto aq = act(b, 0.11f, -0.05f);
        auto wq = wgt(b, 0.07f);
        const Tensor x = random_tensor({6, 9}, 803 + b), w = random_tensor({5, 9}, 900 + b, -0.5f, 0.5f);
        Tape tape(false);
        const Tensor y = q_linear(tape.constant(x), tape.constant(w), aq, wq).value();
        const Tensor xq = fake_quant_raw(x, aq.a(), aq.z(), aq.bits);
        const Tensor wqv = fake_quant_raw(w, wq.a(), 0.0f, wq.bits);
        Tensor wt({9, 5});
        for (int64_t i = 0; i < 5; ++i)
            for (int64_t j = 0; j < 9; ++j) wt.at({j, i}) = wqv.at({i, j});
        const auto want = oracle::matmul(xq, wt);
        std::vector<double> got(y.vec().begin(), y.vec().end());
        EXPECT_LE(oracle::rel_err(got, want), 1e-5) << b;
    }
}

TEST(QConv3d, MatchesFakeQuantOracle) {
    for (int b : kBits) {
        auto aq = act(b, 0.09f, 0.13f);
        auto wq = wgt(b, 0.05f);
        const Tensor x = random_tensor({2, 3, 3, 6, 6}, 1000 + b), w = random_tensor({4, 3, 3, 3, 3}, 1100 + b, -0.3f, 0.3f);
        const Tensor bias = random_tensor({4}, 1200 + b);
        for (int stride : {1, 2}) {
            ConvGeom g;
            g.stride = {1, stride, stride};
            g.padding = {1, 1, 1};
            Tape tape(false);
            Var bv = tape.constant(bias);
            const Tensor y = q_conv3d(tape.constant(x), tape.constant(w), &bv, aq, wq, g).value();
            const Tensor xq = fake_quant_raw(x, aq.a(), aq.z(), aq.bits);
            const Tensor wqv = fake_quant_raw(w, wq.a(), 0.0f, wq.bits);
            const auto want = oracle::conv3d(xq, wqv, &bias, g);
            std::vector<double> got(y.vec().begin(), y.vec().end());
            EXPECT_LE(oracle::rel_err(got, want), 1e-5) << b << " stride " << stride;
        }
    }
}

TEST(QConv3d, GradientsMatchFakeQuantComposition) {
    const Tensor x = random_tensor({1, 2, 3, 4, 4}, 1300), w = random_tensor({3, 2, 3, 3, 3}, 1301, -0.4f, 0.4f);
    const Tensor bias = random_tensor({3}, 1302);
    ConvGeom g;
    g.padding = {1, 1, 1};
    const Tensor up = random_tensor({1, 3, 3, 4, 4}, 1303);
    auto run = [&](bool fused) {
        auto aq = act(4, 0.12f, 0.05f);
        auto wq = wgt(4, 0.06f);
        aq.alpha.zero_grad();
        aq.zero.zero_grad();
        wq.alpha.zero_grad();
        Tape tape;
        Var xv = tape.leaf(x), wv = tape.leaf(w), bv = tape.leaf(bias);
        Var y = fused ? q_conv3d(xv, wv, &bv, aq, wq, g) : conv3d(fake_quant(xv, aq), fake_quant(wv, wq), &bv, g);
        tape.backward(sum(mul(y, tape.constant(up))));
        return std::vector<Tensor>{y.value(), tape.grad(xv), tape.grad(wv), tape.grad(bv), aq.alpha.grad, aq.zero.grad,
                                   wq.alpha.grad};
    };
    const auto a = run(true), b = run(false);
    for (size_t i = 0; i < a.size(); ++i) {
        std::vector<double> va(a[i].vec().begin(), a[i].vec().end()), vb(b[i].vec().begin(), b[i].vec().end());
        EXPECT_LE(oracle::rel_err(va, vb), 1e-4) << "output " << i;
    }
}

TEST(QConv3d, PassThroughIsConv) {
    ActQuantizer aq(BitWidth(32), "a");
    WeightQuantizer wq(BitWidth(32), "w");
    const Tensor x = random_tensor({1, 2, 2, 4, 4}, 1400), w = random_tensor({2, 2, 1, 3, 3}, 1401);
    ConvGeom g;
    g.padding = {0, 1, 1};
    Tape tape(false);
    const Tensor y = q_conv3d(tape.constant(x), tape.constant(w), nullptr, aq, wq, g).value();
    EXPECT_LE(oracle::max_abs(y, oracle::conv3d(x, w, nullptr, g)), 1e-5);
}
