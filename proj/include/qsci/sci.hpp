#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "qsci/tensor.hpp"

namespace qsci {

/// Binary modulation masks [T, H, W].
struct MaskSet {
    Tensor masks;
    uint64_t seed = 0;
    double density = 0.5;
    Tensor temporal_sum;          ///< [H, W], sum over t of masks
    int64_t zero_sum_pixels = 0;  ///< pixels never exposed

    int64_t frames() const { return masks.dim(0); }
    int64_t height() const { return masks.dim(1); }
    int64_t width() const { return masks.dim(2); }

    /// Builds a mask set from explicit values; validates {0,1} content.
    static MaskSet from_tensor(Tensor masks, uint64_t seed = 0, double density = 0.5);
};

/// Snapshot measurement y[H, W] with compression ratio T.
struct Measurement {
    Tensor y;
    int64_t cr = 0;
};

/// Video frames [T, H, W] with values in [0, 1].
struct VideoClip {
    Tensor frames;

    int64_t frames_count() const { return frames.dim(0); }
};

/// Uniform double in [0, 1) from the top 53 bits of one draw.
double uniform01(std::mt19937_64& rng);
/// Standard normal via Box-Muller on uniform01 draws.
double standard_normal(std::mt19937_64& rng);

MaskSet generate_masks(uint64_t seed, int64_t t, int64_t h, int64_t w, double p = 0.5);

/// y = sum_t M_t * X_t + noise. noise_sigma == 0 gives the exact linear model.
Measurement encode(const VideoClip& video, const MaskSet& masks, double noise_sigma = 0.0, uint64_t noise_seed = 0);

/// Network input stack [1, 2, T, H, W]: channel 0 is E = y / max(sum_t M_t, 1)
/// broadcast over T, channel 1 is M_t * E. E is 0 where no mask ever opens.
Tensor initial_estimate(const Measurement& y, const MaskSet& masks);

/// Stacks per-clip estimates into a batch [N, 2, T, H, W].
Tensor stack_batch(const std::vector<Tensor>& items);

struct MovingObject {
    bool disk = false;
    double x = 0.0, y = 0.0;    ///< top-left (rect) or centre (disk) at t=0, pixels
    double w = 4.0, h = 4.0;    ///< rect extents; disk uses w as radius
    double vx = 0.0, vy = 0.0;  ///< pixels per frame
    float intensity = 1.0f;
};

struct SceneSpec {
    int64_t t = 4, h = 32, w = 32;
    /// Background texture: sum of oriented sinusoids plus offset.
    struct Wave {
        double fx, fy, phase, amp;
    };
    std::vector<Wave> waves;
    double background_offset = 0.3;
    std::vector<MovingObject> objects;
};

/// Renders a scene with anti-aliased object coverage; values clamped to [0, 1].
VideoClip render_scene(const SceneSpec& scene);

/// Random textured background with n moving rectangles/disks; deterministic per seed.
SceneSpec random_scene(uint64_t seed, int64_t t, int64_t h, int64_t w, int n_objects);

VideoClip synth_video(uint64_t seed, int64_t t, int64_t h, int64_t w, int n_objects);

}  // namespace qsci
