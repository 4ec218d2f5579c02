#pragma once

#include <functional>
#include <string>
#include <vector>

#include "qsci/config.hpp"
#include "qsci/container.hpp"
#include "qsci/train.hpp"

namespace qsci {

/// Break-down ladder: baseline, +shift, +FEM shortcuts, +VRM shortcuts.
const std::vector<std::string>& ladder_variants();
/// Per-module grid: one module at 4-bit inside an 8-bit network, then full 8-bit.
const std::vector<std::string>& module_grid_variants();

struct VariantResult {
    std::string group;
    std::string variant;
    QNetConfig net;
    std::vector<EpochLog> log;
    double val_psnr = 0.0;
    double val_ssim = 0.0;
    double params_m = 0.0;
    double ops_g = 0.0;
    Archive checkpoint;
};

using EpochHook = std::function<void(const std::string& variant, const EpochLog&)>;

/// Trains the full-precision model from scratch.
VariantResult train_full_precision(const ExperimentConfig& cfg, const Dataset& data, const EpochHook& hook = {});

/// Builds `variant` on cfg's geometry, initialises it from the full-precision
/// checkpoint (quantizers calibrated on the probe clips), then fine-tunes.
VariantResult train_variant(const std::string& variant, const ExperimentConfig& cfg, const Dataset& data,
                            const Archive& fp_ckpt, const EpochHook& hook = {});

/// CSV: group,variant,body_bits,shift,fem,vrm,val_psnr,val_ssim,params_m,ops_g
std::string ablation_csv(const std::vector<VariantResult>& rows);

}  // namespace qsci
