#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "qsci/autodiff.hpp"
#include "qsci/network.hpp"
#include "qsci/sci.hpp"

namespace qsci {

struct TrainConfig {
    double lr_phase1 = 1e-4;
    double lr_phase2 = 1e-5;
    int epochs_phase1 = 60;
    int epochs_phase2 = 20;
    int batch = 1;
    int crop = 32;
    bool aug_crop = true;
    bool aug_flip = true;
    bool aug_scale = true;
    double scale_min = 0.75;
    double scale_max = 1.25;
    uint64_t seed = 1;       ///< data order, augmentation and noise draws
    uint64_t init_seed = 0;  ///< weight initialisation
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int calib_clips = 8;
    int probe_clips = 32;

    void validate() const;
};

struct DataConfig {
    uint64_t seed = 7;
    int count = 200;
    int source_size = 48;
    uint64_t val_seed = 1007;
    int val_count = 16;
    uint64_t mask_seed = 11;
    double mask_density = 0.5;
    double noise_sigma = 0.0;
    int objects = 3;

    void validate() const;
};

/// Training clips at source size plus held-out clips and measurements at crop size.
struct Dataset {
    MaskSet masks;  ///< [T, crop, crop]
    double noise_sigma = 0.0;
    std::vector<VideoClip> train;
    std::vector<VideoClip> val;
    std::vector<Measurement> val_meas;
    /// Centre crops of the first training clips, for loss probes and calibration.
    std::vector<VideoClip> probe;
    std::vector<Measurement> probe_meas;
};

Dataset make_dataset(const DataConfig& data, int64_t frames, int crop, int probe_clips);

/// Builds the dataset around externally supplied clips and masks.
Dataset assemble_dataset(std::vector<VideoClip> train, std::vector<VideoClip> val, MaskSet masks, double noise_sigma,
                         uint64_t noise_seed, int probe_clips);

/// Mean squared error normalised by T * H * W (and batch).
Var mse_loss(Var pred, Var target);
double mse_loss(const VideoClip& pred, const VideoClip& gt);

struct AdamMoments {
    Tensor m, v;
};

struct AdamState {
    int64_t step = 0;
    std::map<std::string, AdamMoments> moments;
};

/// One bias-corrected Adam update over every parameter with a gradient.
void adam_step(const std::vector<Parameter*>& params, AdamState& state, double lr, const TrainConfig& cfg);

struct AugmentFlags {
    bool crop = false;
    bool flip = false;
    bool scale = false;
    int crop_size = 32;
    double scale_min = 0.75;
    double scale_max = 1.25;
};

/// Random rescale (bilinear), random crop, then horizontal/vertical flips
/// with probability 0.5 each. All flags off returns the clip unchanged.
VideoClip augment(const VideoClip& clip, const AugmentFlags& flags, std::mt19937_64& rng);

VideoClip flip_clip(const VideoClip& clip, bool horizontal, bool vertical);
VideoClip center_crop(const VideoClip& clip, int64_t size);
VideoClip rescale_clip(const VideoClip& clip, int64_t h, int64_t w);

struct ClipMetrics {
    double psnr = 0.0;
    double ssim = 0.0;
};

struct EvalResult {
    std::vector<ClipMetrics> clips;
    std::vector<VideoClip> recon;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
};

EvalResult evaluate(QNet& net, const MaskSet& masks, const std::vector<VideoClip>& gt,
                    const std::vector<Measurement>& meas, bool keep_recon = false);

/// Mean reconstruction loss of the network on the probe clips.
double probe_loss(QNet& net, const Dataset& data);

struct EpochLog {
    int epoch = 0;
    int phase = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double probe_loss = 0.0;
    double val_psnr = 0.0;
    double val_ssim = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> log;  ///< row 0 is the pre-training evaluation
};

/// Runs phase 1 then phase 2. Deterministic given the config and dataset.
TrainResult train(QNet& net, const TrainConfig& cfg, const Dataset& data,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

std::string loss_csv(const std::vector<EpochLog>& log);

struct Archive;
/// Loads weights from a full-precision checkpoint archive and calibrates all
/// quantizers on the probe clips.
void init_quantized(QNet& net, const Archive& fp_ckpt, const Dataset& data, int calib_clips);

}  // namespace qsci
