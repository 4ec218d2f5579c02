#pragma once

#include "qsci/tensor.hpp"

namespace qsci {

inline constexpr double kPsnrCap = 100.0;

double mse(const Tensor& a, const Tensor& b);

/// 10 log10(1 / mse) with peak 1.0; identical inputs give kPsnrCap.
double psnr(const Tensor& a, const Tensor& b);

/// Mean of per-frame PSNR over the leading axis of [T, H, W].
double frame_psnr(const Tensor& a, const Tensor& b);

/// SSIM of one [H, W] frame: 11x11 Gaussian window (sigma 1.5), k1 = 0.01,
/// k2 = 0.03, peak 1.0, averaged over the valid region.
double ssim_frame(const Tensor& a, const Tensor& b);

/// SSIM averaged over frames of [T, H, W] (a rank-2 input is one frame).
double ssim(const Tensor& a, const Tensor& b);

}  // namespace qsci
