#include "qsci/sci.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "qsci/errors.hpp"

namespace qsci {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double standard_normal(std::mt19937_64& rng) {
    double u1 = uniform01(rng);
    const double u2 = uniform01(rng);
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

MaskSet MaskSet::from_tensor(Tensor masks, uint64_t seed, double density) {
    if (masks.rank() != 3) throw ConfigError("mask set must be [T,H,W], got " + shape_str(masks.shape()));
    for (float v : masks.data()) {
        if (v != 0.0f && v != 1.0f) throw DataError("mask values must be 0 or 1");
    }
    MaskSet m;
    m.seed = seed;
    m.density = density;
    const int64_t t = masks.dim(0), hw = masks.dim(1) * masks.dim(2);
    m.temporal_sum = Tensor(Shape{masks.dim(1), masks.dim(2)});
    for (int64_t f = 0; f < t; ++f)
        for (int64_t i = 0; i < hw; ++i) m.temporal_sum.ptr()[i] += masks.ptr()[f * hw + i];
    m.zero_sum_pixels = std::count(m.temporal_sum.data().begin(), m.temporal_sum.data().end(), 0.0f);
    m.masks = std::move(masks);
    return m;
}

MaskSet generate_masks(uint64_t seed, int64_t t, int64_t h, int64_t w, double p) {
    if (!(p > 0.0 && p < 1.0)) throw ConfigError("mask density must lie in (0, 1)");
    if (t < 1 || h < 1 || w < 1) throw ConfigError("mask extents must be positive");
    std::mt19937_64 rng(seed);
    Tensor m(Shape{t, h, w});
    for (auto& v : m.data()) v = uniform01(rng) < p ? 1.0f : 0.0f;
    return MaskSet::from_tensor(std::move(m), seed, p);
}

Measurement encode(const VideoClip& video, const MaskSet& masks, double noise_sigma, uint64_t noise_seed) {
    if (video.frames.shape() != masks.masks.shape()) {
        throw ConfigError("encode: video " + shape_str(video.frames.shape()) + " does not match masks " +
                          shape_str(masks.masks.shape()));
    }
    const int64_t t = masks.frames(), hw = masks.height() * masks.width();
    Measurement out{Tensor(Shape{masks.height(), masks.width()}), t};
    for (int64_t f = 0; f < t; ++f)
        for (int64_t i = 0; i < hw; ++i) out.y.ptr()[i] += masks.masks.ptr()[f * hw + i] * video.frames.ptr()[f * hw + i];
    if (noise_sigma > 0.0) {
        std::mt19937_64 rng(noise_seed);
        for (auto& v : out.y.data()) v += static_cast<float>(noise_sigma * standard_normal(rng));
    }
    return out;
}

Tensor initial_estimate(const Measurement& y, const MaskSet& masks) {
    if (y.y.shape() != Shape{masks.height(), masks.width()}) {
        throw ConfigError("initial_estimate: measurement " + shape_str(y.y.shape()) + " does not match masks " +
                          shape_str(masks.masks.shape()));
    }
    const int64_t t = masks.frames(), hw = masks.height() * masks.width();
    Tensor out(Shape{1, 2, t, masks.height(), masks.width()});
    for (int64_t i = 0; i < hw; ++i) {
        // unexposed pixels carry only noise
        const float sum = masks.temporal_sum.ptr()[i];
        const float e = sum > 0.0f ? y.y.ptr()[i] / std::max(sum, 1.0f) : 0.0f;
        for (int64_t f = 0; f < t; ++f) {
            out.ptr()[f * hw + i] = e;
            out.ptr()[(t + f) * hw + i] = masks.masks.ptr()[f * hw + i] * e;
        }
    }
    return out;
}

Tensor stack_batch(const std::vector<Tensor>& items) {
    if (items.empty()) throw ConfigError("stack_batch: no items");
    Shape s = items[0].shape();
    if (s.empty() || s[0] != 1) throw ConfigError("stack_batch: items must have a leading unit axis");
    s[0] = static_cast<int64_t>(items.size());
    Tensor out(s);
    const size_t each = items[0].numel();
    for (size_t i = 0; i < items.size(); ++i) {
        if (items[i].shape() != items[0].shape()) throw ConfigError("stack_batch: item shapes differ");
        std::copy(items[i].data().begin(), items[i].data().end(), out.ptr() + i * each);
    }
    return out;
}

namespace {

double overlap(double a0, double a1, double b0, double b1) { return std::max(0.0, std::min(a1, b1) - std::max(a0, b0)); }

constexpr int kDiskSamples = 8;

}  // namespace

VideoClip render_scene(const SceneSpec& scene) {
    if (scene.t < 1 || scene.h < 1 || scene.w < 1) throw ConfigError("render_scene: extents must be positive");
    Tensor bg(Shape{scene.h, scene.w});
    for (int64_t i = 0; i < scene.h; ++i)
        for (int64_t j = 0; j < scene.w; ++j) {
            double v = scene.background_offset;
            for (const auto& wv : scene.waves) {
                v += wv.amp * std::sin(2.0 * std::numbers::pi * (wv.fx * j + wv.fy * i) + wv.phase);
            }
            bg.ptr()[i * scene.w + j] = static_cast<float>(v);
        }
    Tensor frames(Shape{scene.t, scene.h, scene.w});
    std::vector<double> cov(static_cast<size_t>(scene.h * scene.w));
    for (int64_t f = 0; f < scene.t; ++f) {
        float* fr = frames.ptr() + f * scene.h * scene.w;
        std::copy(bg.data().begin(), bg.data().end(), fr);
        for (const auto& ob : scene.objects) {
            const double ox = ob.x + ob.vx * static_cast<double>(f);
            const double oy = ob.y + ob.vy * static_cast<double>(f);
            for (int64_t i = 0; i < scene.h; ++i)
                for (int64_t j = 0; j < scene.w; ++j) {
                    double c;
                    if (!ob.disk) {
                        c = overlap(ox, ox + ob.w, static_cast<double>(j), j + 1.0) *
                            overlap(oy, oy + ob.h, static_cast<double>(i), i + 1.0);
                    } else {
                        int inside = 0;
                        const double r2 = ob.w * ob.w;
                        for (int a = 0; a < kDiskSamples; ++a)
                            for (int b = 0; b < kDiskSamples; ++b) {
                                const double sx = j + (b + 0.5) / kDiskSamples - ox;
                                const double sy = i + (a + 0.5) / kDiskSamples - oy;
                                inside += (sx * sx + sy * sy) <= r2;
                            }
                        c = static_cast<double>(inside) / (kDiskSamples * kDiskSamples);
                    }
                    float& px = fr[i * scene.w + j];
                    px = static_cast<float>(px * (1.0 - c) + ob.intensity * c);
                }
        }
        for (int64_t i = 0; i < scene.h * scene.w; ++i) fr[i] = std::clamp(fr[i], 0.0f, 1.0f);
    }
    return VideoClip{std::move(frames)};
}

SceneSpec random_scene(uint64_t seed, int64_t t, int64_t h, int64_t w, int n_objects) {
    if (n_objects < 0) throw ConfigError("n_objects must be non-negative");
    std::mt19937_64 rng(seed);
    auto uni = [&](double lo, double hi) { return lo + (hi - lo) * uniform01(rng); };
    SceneSpec s;
    s.t = t;
    s.h = h;
    s.w = w;
    s.background_offset = uni(0.25, 0.55);
    const int waves = 2 + static_cast<int>(uniform01(rng) * 2.0);
    for (int i = 0; i < waves; ++i) {
        s.waves.push_back({uni(-0.15, 0.15), uni(-0.15, 0.15), uni(0.0, 2.0 * std::numbers::pi), uni(0.03, 0.1)});
    }
    for (int i = 0; i < n_objects; ++i) {
        MovingObject o;
        o.disk = uniform01(rng) < 0.5;
        o.w = o.disk ? uni(2.0, 0.2 * static_cast<double>(std::min(h, w))) : uni(3.0, 0.4 * static_cast<double>(w));
        o.h = uni(3.0, 0.4 * static_cast<double>(h));
        o.x = uni(0.0, static_cast<double>(w) - 2.0);
        o.y = uni(0.0, static_cast<double>(h) - 2.0);
        o.vx = uni(-2.0, 2.0);
        o.vy = uni(-2.0, 2.0);
        o.intensity = static_cast<float>(uni(0.0, 1.0));
        s.objects.push_back(o);
    }
    return s;
}

VideoClip synth_video(uint64_t seed, int64_t t, int64_t h, int64_t w, int n_objects) {
    return render_scene(random_scene(seed, t, h, w, n_objects));
}

}  // namespace qsci
