#pragma once

#include <cstdint>
#include <string>

#include "qsci/autodiff.hpp"
#include "qsci/tensor.hpp"

namespace qsci {

/// Quantizer bit-width. 32 means full precision (pass-through).
class BitWidth {
public:
    BitWidth() = default;
    explicit BitWidth(int bits);

    int bits() const noexcept { return bits_; }
    bool passthrough() const noexcept { return bits_ == 32; }
    /// Magnitude of the lowest code: 2^(bits-1).
    int32_t qn() const noexcept { return passthrough() ? 0 : (int32_t{1} << (bits_ - 1)); }
    /// Highest code: 2^(bits-1) - 1.
    int32_t qp() const noexcept { return passthrough() ? 0 : (int32_t{1} << (bits_ - 1)) - 1; }

    static bool valid(int bits) noexcept { return bits == 2 || bits == 3 || bits == 4 || bits == 8 || bits == 32; }

    bool operator==(const BitWidth&) const = default;

private:
    int bits_ = 32;
};

inline constexpr float kAlphaFloor = 1e-8f;

/// Asymmetric activation quantizer: code = round(clip((x - z) / alpha, -qn, qp)).
struct ActQuantizer {
    BitWidth bits;
    Parameter alpha;
    Parameter zero;

    ActQuantizer() : ActQuantizer(BitWidth(32), "act") {}
    ActQuantizer(BitWidth b, const std::string& name);

    float a() const { return alpha.value.item(); }
    float z() const { return zero.value.item(); }
    void set(float alpha_v, float zero_v);
};

/// Symmetric weight quantizer: code = round(clip(w / alpha, -qn, qp)).
struct WeightQuantizer {
    BitWidth bits;
    Parameter alpha;

    WeightQuantizer() : WeightQuantizer(BitWidth(32), "weight") {}
    WeightQuantizer(BitWidth b, const std::string& name);

    float a() const { return alpha.value.item(); }
    void set(float alpha_v);
};

/// Round half to even (the current FP rounding mode is assumed to be the default).
float round_half_even(float v);

/// Integer code of a single value; asymmetric form. Non-finite input throws.
float quantize_value(float x, float alpha, float zero, BitWidth bits);

/// Codes as integral floats. Pass-through bit-width returns the input unchanged.
Tensor act_quantize(const Tensor& x, const ActQuantizer& q);
Tensor act_dequantize(const Tensor& codes, const ActQuantizer& q);
Tensor weight_quantize(const Tensor& w, const WeightQuantizer& q);
Tensor weight_dequantize(const Tensor& codes, const WeightQuantizer& q);

/// quantize-then-dequantize in one pass (no tape).
Tensor fake_quant_raw(const Tensor& x, float alpha, float zero, BitWidth bits);

/// Tape-recorded fake quantization with the straight-through estimator.
/// x-gradient passes where the pre-clip value lies in [-qn, qp] and is zero
/// outside; alpha gets (code - v) in range and the clipped code outside;
/// zero gets 0 in range and 1 outside.
Var fake_quant(Var x, ActQuantizer& q);
Var fake_quant(Var x, WeightQuantizer& q);

/// Contraction of fake_quant(x) with fake_quant(w) for x[..., k], w[n, k],
/// computed over integer codes as a_x * a_w * ((Q_a(x) + z/a_x) . Q_w(w)).
Var q_linear(Var x, Var w, ActQuantizer& aq, WeightQuantizer& wq);

/// Quantized 3-D convolution. Forward runs over integer codes with the
/// zero-point correction restricted to in-bounds taps, so results are
/// reproducible by the integer path; backward is the convolution adjoint on
/// dequantized operands followed by the STE rules.
Var q_conv3d(Var x, Var w, const Var* bias, ActQuantizer& aq, WeightQuantizer& wq, const ConvGeom& geom);

/// Scale the integer accumulator back to real units. Shared with the integer
/// path so both produce bit-identical floats.
inline float rescale_accumulator(float acc, float corr, float alpha_x, float zero, float alpha_w) {
    return alpha_w * (alpha_x * acc + zero * corr);
}

}  // namespace qsci
