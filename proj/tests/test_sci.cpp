#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "qsci/errors.hpp"
#include "qsci/sci.hpp"

using namespace qsci;
using oracle::random_tensor;

namespace {

VideoClip random_clip(int64_t t, int64_t h, int64_t w, uint64_t seed) {
    return VideoClip{random_tensor({t, h, w}, seed, 0.0f, 1.0f)};
}

double column_centroid(const Tensor& frames, int64_t t) {
    double m = 0.0, mx = 0.0;
    for (int64_t i = 0; i < frames.dim(1); ++i)
        for (int64_t j = 0; j < frames.dim(2); ++j) {
            const double v = frames.at({t, i, j});
            m += v;
            mx += v * (j + 0.5);
        }
    return mx / m;
}

}  // namespace

TEST(Masks, BinaryAndDeterministic) {
    const MaskSet a = generate_masks(5, 4, 32, 32, 0.5);
    const MaskSet b = generate_masks(5, 4, 32, 32, 0.5);
    EXPECT_EQ(a.masks, b.masks);
    EXPECT_NE(a.masks, generate_masks(6, 4, 32, 32, 0.5).masks);
    for (float v : a.masks.data()) ASSERT_TRUE(v == 0.0f || v == 1.0f);
    EXPECT_EQ(a.masks.shape(), (Shape{4, 32, 32}));
}

TEST(Masks, DensityWithinBinomialBound) {
    for (double p : {0.2, 0.5, 0.8}) {
        for (uint64_t seed = 1; seed <= 5; ++seed) {
            const MaskSet m = generate_masks(seed, 4, 32, 32, p);
            double ones = 0.0;
            for (float v : m.masks.data()) ones += v;
            const double n = 4096.0, sigma = std::sqrt(n * p * (1 - p));
            EXPECT_LE(std::fabs(ones - p * n), 3.0 * sigma) << p << " seed " << seed;
        }
    }
}

TEST(Masks, TemporalSumAndZeroPixels) {
    const MaskSet m = generate_masks(9, 3, 16, 16, 0.3);
    int64_t zeros = 0;
    for (int64_t i = 0; i < 16; ++i)
        for (int64_t j = 0; j < 16; ++j) {
            float s = 0.0f;
            for (int64_t t = 0; t < 3; ++t) s += m.masks.at({t, i, j});
            EXPECT_EQ(m.temporal_sum.at({i, j}), s);
            zeros += s == 0.0f;
        }
    EXPECT_EQ(m.zero_sum_pixels, zeros);
    EXPECT_GT(zeros, 0);
}

TEST(Masks, InvalidInputsRejected) {
    EXPECT_THROW(generate_masks(1, 4, 8, 8, 0.0), ConfigError);
    EXPECT_THROW(generate_masks(1, 4, 8, 8, 1.0), ConfigError);
    EXPECT_THROW(MaskSet::from_tensor(Tensor({1, 2, 2}, 0.5f)), DataError);
}

TEST(Encode, SingleFrameAllOnes) {
    const VideoClip v = random_clip(1, 8, 8, 10);
    const Measurement y = encode(v, MaskSet::from_tensor(Tensor::ones({1, 8, 8})));
    EXPECT_EQ(y.y, v.frames.reshaped({8, 8}));
    EXPECT_EQ(y.cr, 1);
}

TEST(Encode, ZeroMaskGivesZero) {
    const Measurement y = encode(random_clip(4, 8, 8, 11), MaskSet::from_tensor(Tensor::zeros({4, 8, 8})));
    for (float v : y.y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Encode, MatchesDirectSum) {
    const VideoClip v = random_clip(4, 8, 6, 12);
    const MaskSet m = generate_masks(3, 4, 8, 6);
    const Measurement y = encode(v, m);
    for (int64_t i = 0; i < 8; ++i)
        for (int64_t j = 0; j < 6; ++j) {
            double s = 0.0;
            for (int64_t t = 0; t < 4; ++t) s += static_cast<double>(m.masks.at({t, i, j})) * v.frames.at({t, i, j});
            EXPECT_NEAR(y.y.at({i, j}), s, 1e-6);
        }
}

TEST(Encode, LinearExactly) {
    // dyadic values keep every sum exact in float
    const MaskSet m = generate_masks(4, 4, 8, 8);
    Tensor x1({4, 8, 8}), x2({4, 8, 8});
    const Tensor r1 = random_tensor({4, 8, 8}, 13, 0.0f, 1.0f), r2 = random_tensor({4, 8, 8}, 14, 0.0f, 1.0f);
    for (size_t i = 0; i < x1.numel(); ++i) {
        x1[i] = std::floor(r1[i] * 256.0f) / 256.0f;
        x2[i] = std::floor(r2[i] * 256.0f) / 256.0f;
    }
    const float a = 0.5f, b = 0.25f;
    Tensor mix({4, 8, 8});
    for (size_t i = 0; i < mix.numel(); ++i) mix[i] = a * x1[i] + b * x2[i];
    const Tensor y1 = encode({x1}, m).y, y2 = encode({x2}, m).y, ym = encode({mix}, m).y;
    for (size_t i = 0; i < ym.numel(); ++i) ASSERT_EQ(ym[i], a * y1[i] + b * y2[i]);
}

TEST(Encode, LinearWithinRounding) {
    const MaskSet m = generate_masks(5, 4, 8, 8);
    const VideoClip x1 = random_clip(4, 8, 8, 15), x2 = random_clip(4, 8, 8, 16);
    Tensor mix({4, 8, 8});
    for (size_t i = 0; i < mix.numel(); ++i) mix[i] = 0.3f * x1.frames[i] + 0.6f * x2.frames[i];
    const Tensor y1 = encode(x1, m).y, y2 = encode(x2, m).y, ym = encode({mix}, m).y;
    for (size_t i = 0; i < ym.numel(); ++i) ASSERT_NEAR(ym[i], 0.3f * y1[i] + 0.6f * y2[i], 1e-5);
}

TEST(Encode, PerPixelLipschitz) {
    const MaskSet m = generate_masks(6, 4, 16, 16);
    for (uint64_t s = 0; s < 5; ++s) {
        const VideoClip a = random_clip(4, 16, 16, 100 + s), b = random_clip(4, 16, 16, 200 + s);
        const Tensor ya = encode(a, m).y, yb = encode(b, m).y;
        for (int64_t i = 0; i < 16; ++i)
            for (int64_t j = 0; j < 16; ++j) {
                double dmax = 0.0;
                for (int64_t t = 0; t < 4; ++t)
                    dmax = std::max(dmax, std::fabs(double(a.frames.at({t, i, j})) - b.frames.at({t, i, j})));
                ASSERT_LE(std::fabs(double(ya.at({i, j})) - yb.at({i, j})), m.temporal_sum.at({i, j}) * dmax + 1e-6);
            }
    }
}

TEST(Encode, MeasurementBounded) {
    const MaskSet m = generate_masks(7, 4, 16, 16);
    const Measurement y = encode(random_clip(4, 16, 16, 17), m);
    for (size_t i = 0; i < y.y.numel(); ++i) {
        EXPECT_GE(y.y[i], 0.0f);
        EXPECT_LE(y.y[i], m.temporal_sum[i]);
    }
}

TEST(Encode, NoiseIsSeededAndZeroMean) {
    const MaskSet m = generate_masks(8, 4, 32, 32);
    const VideoClip v = random_clip(4, 32, 32, 18);
    const Tensor clean = encode(v, m).y;
    const Tensor n1 = encode(v, m, 0.1, 42).y, n2 = encode(v, m, 0.1, 42).y;
    EXPECT_EQ(n1, n2);
    EXPECT_NE(n1, encode(v, m, 0.1, 43).y);
    double mean = 0.0, var = 0.0;
    for (size_t i = 0; i < clean.numel(); ++i) {
        const double d = double(n1[i]) - clean[i];
        mean += d;
        var += d * d;
    }
    mean /= clean.numel();
    var /= clean.numel();
    EXPECT_NEAR(mean, 0.0, 4.0 * 0.1 / 32.0);
    EXPECT_NEAR(std::sqrt(var), 0.1, 0.01);
}

TEST(Encode, ShapeMismatchRejected) {
    EXPECT_THROW(encode(random_clip(3, 8, 8, 19), generate_masks(1, 4, 8, 8)), ConfigError);
    EXPECT_THROW(encode(random_clip(4, 8, 6, 19), generate_masks(1, 4, 8, 8)), ConfigError);
}

TEST(InitialEstimate, SingleFrameRoundTrip) {
    const VideoClip v = random_clip(1, 8, 8, 20);
    const MaskSet m = MaskSet::from_tensor(Tensor::ones({1, 8, 8}));
    const Tensor e = initial_estimate(encode(v, m), m);
    EXPECT_EQ(e.shape(), (Shape{1, 2, 1, 8, 8}));
    for (int64_t i = 0; i < 8; ++i)
        for (int64_t j = 0; j < 8; ++j) {
            EXPECT_EQ(e.at({0, 0, 0, i, j}), v.frames.at({0, i, j}));
            EXPECT_EQ(e.at({0, 1, 0, i, j}), v.frames.at({0, i, j}));
        }
}

TEST(InitialEstimate, ZeroSumPixelsGuarded) {
    Tensor mk = Tensor::ones({2, 4, 4});
    mk.at({0, 1, 1}) = 0.0f;
    mk.at({1, 1, 1}) = 0.0f;
    const MaskSet m = MaskSet::from_tensor(mk);
    Measurement y{Tensor({4, 4}, 1.0f), 2};
    const Tensor e = initial_estimate(y, m);
    EXPECT_TRUE(e.all_finite());
    for (int64_t c = 0; c < 2; ++c)
        for (int64_t t = 0; t < 2; ++t) EXPECT_EQ(e.at({0, c, t, 1, 1}), 0.0f);
}

TEST(InitialEstimate, MatchesPerPixelOracle) {
    const MaskSet m = generate_masks(21, 4, 8, 8, 0.4);
    const Measurement y = encode(random_clip(4, 8, 8, 22), m);
    const Tensor e = initial_estimate(y, m);
    for (int64_t i = 0; i < 8; ++i)
        for (int64_t j = 0; j < 8; ++j) {
            double s = 0.0;
            for (int64_t t = 0; t < 4; ++t) s += m.masks.at({t, i, j});
            const double est = y.y.at({i, j}) / std::max(s, 1.0);
            for (int64_t t = 0; t < 4; ++t) {
                EXPECT_NEAR(e.at({0, 0, t, i, j}), est, 1e-6);
                EXPECT_NEAR(e.at({0, 1, t, i, j}), m.masks.at({t, i, j}) * est, 1e-6);
            }
        }
}

TEST(InitialEstimate, StackBatch) {
    const MaskSet m = generate_masks(23, 2, 4, 4);
    const Tensor a = initial_estimate(encode(random_clip(2, 4, 4, 24), m), m);
    const Tensor b = initial_estimate(encode(random_clip(2, 4, 4, 25), m), m);
    const Tensor s = stack_batch({a, b});
    EXPECT_EQ(s.shape(), (Shape{2, 2, 2, 4, 4}));
    for (size_t i = 0; i < a.numel(); ++i) {
        EXPECT_EQ(s[i], a[i]);
        EXPECT_EQ(s[a.numel() + i], b[i]);
    }
}

TEST(SynthVideo, StaticWithoutObjects) {
    const VideoClip v = synth_video(30, 4, 16, 16, 0);
    for (int64_t t = 1; t < 4; ++t)
        for (int64_t i = 0; i < 16; ++i)
            for (int64_t j = 0; j < 16; ++j) ASSERT_EQ(v.frames.at({t, i, j}), v.frames.at({0, i, j}));
}

TEST(SynthVideo, DeterministicAndInRange) {
    const VideoClip a = synth_video(31, 4, 24, 24, 3), b = synth_video(31, 4, 24, 24, 3);
    EXPECT_EQ(a.frames, b.frames);
    EXPECT_NE(a.frames, synth_video(32, 4, 24, 24, 3).frames);
    for (float v : a.frames.data()) {
        ASSERT_GE(v, 0.0f);
        ASSERT_LE(v, 1.0f);
    }
}

TEST(SynthVideo, ObjectsMove) {
    const VideoClip v = synth_video(33, 4, 24, 24, 3);
    double diff = 0.0;
    for (int64_t i = 0; i < 24; ++i)
        for (int64_t j = 0; j < 24; ++j) diff += std::fabs(v.frames.at({3, i, j}) - v.frames.at({0, i, j}));
    EXPECT_GT(diff, 0.0);
}

TEST(SynthVideo, CentroidTracksVelocity) {
    for (bool disk : {false, true}) {
        for (double x0 : {6.0, 6.3, 7.75}) {
            SceneSpec s;
            s.t = 6;
            s.h = 20;
            s.w = 24;
            s.background_offset = 0.0;
            MovingObject o;
            o.disk = disk;
            o.x = x0;
            o.y = disk ? 10.0 : 7.0;
            o.w = disk ? 3.5 : 5.0;
            o.h = 5.0;
            o.vx = 1.0;
            o.intensity = 0.8f;
            s.objects.push_back(o);
            const VideoClip v = render_scene(s);
            for (int64_t t = 1; t < 6; ++t) {
                EXPECT_NEAR(column_centroid(v.frames, t) - column_centroid(v.frames, t - 1), 1.0, 0.1)
                    << (disk ? "disk " : "rect ") << x0 << " t=" << t;
            }
        }
    }
}
