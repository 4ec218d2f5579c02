#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "qsci/network.hpp"
#include "qsci/sci.hpp"

namespace qsci {

/// Codes per 64-bit word; codes never straddle words.
int codes_per_word(int bits);

/// Two's-complement b-bit fields, little-endian within each word; unused high bits are zero.
std::vector<uint64_t> pack_weights(std::span<const int32_t> codes, int bits);
std::vector<int32_t> unpack_weights(std::span<const uint64_t> words, size_t count, int bits);
/// Tensor of integral codes (as produced by weight_quantize).
std::vector<uint64_t> pack_weights(const Tensor& codes, int bits);

struct PackedLayer {
    std::string name;
    int64_t out_channels = 0, in_channels = 0, kt = 1, kh = 1, kw = 1;
    ConvGeom geom;
    int w_bits = 32, a_bits = 32;
    float alpha_w = 1.0f, alpha_x = 1.0f, zero = 0.0f;
    std::vector<float> bias;
    int64_t code_count = 0;
    std::vector<uint64_t> words;
    /// Raw weights for full-precision layers (w_bits or a_bits == 32).
    std::vector<float> float_weight;

    // Derived at load.
    std::vector<int32_t> codes;   ///< [O, C * taps]
    std::vector<int64_t> wsum;    ///< [O, taps], code sums over input channels
    double acc_bound = 0.0;       ///< K * 2^(a-1) * 2^(b-1)

    bool integer() const { return w_bits < 32 && a_bits < 32; }
    int64_t taps() const { return kt * kh * kw; }
    Shape weight_shape() const { return {out_channels, in_channels, kt, kh, kw}; }
    /// Unpacks codes and derives sums and the accumulator bound.
    void prepare();
};

/// Accumulator range check: refuses (DataError naming the layer) when the
/// worst-case |acc| exceeds a signed accumulator of `acc_bits` bits.
void check_accumulator(const PackedLayer& l, int acc_bits = 64);

/// Integer contraction of activation codes x[N, C, T, H, W] with the layer's
/// packed weights: int64 accumulation, zero-point correction over in-bounds
/// taps, rescale by alpha_x * alpha_w, plus bias.
Tensor int_contract(const Tensor& x_codes, const PackedLayer& l);

/// Runs one packed layer on real-valued input (quantizes with the layer's
/// activation quantizer first; full-precision layers run in float).
Tensor run_packed_layer(const PackedLayer& l, const Tensor& x);

struct PackedModel {
    QNetConfig config;
    uint64_t fingerprint = 0;
    std::vector<PackedLayer> layers;
    /// Non-packed parameters: query/key shifts and attention quantizer scales.
    std::map<std::string, Tensor> blobs;

    const PackedLayer& layer(const std::string& name) const;
};

PackedModel pack_model(QNet& net);

inline constexpr uint16_t kPackedVersion = 1;
std::string encode_packed(const PackedModel& m);
/// Validates magic, version, fingerprint and accumulator bounds.
PackedModel decode_packed(std::string_view bytes, const std::string& context, int acc_bits = 64);
void save_packed(const std::string& path, const PackedModel& m);
PackedModel load_packed(const std::string& path, int acc_bits = 64);
/// Load and require the given network config.
PackedModel load_packed(const std::string& path, const QNetConfig& expect);

/// Integer-path reconstruction; elementwise and attention arithmetic run in
/// float on dequantized values exactly as in the float network.
VideoClip infer_packed(const PackedModel& m, const Measurement& y, const MaskSet& masks);
Tensor infer_packed(const PackedModel& m, const Tensor& input);

struct BenchGeometry {
    int64_t in_channels = 16, out_channels = 16, kernel = 3, t = 4, h = 16, w = 16;
};

struct BenchRow {
    std::string path;  ///< "float" or "int<b>"
    int bits = 32;
    double flops = 0.0;
    double theoretical_ops = 0.0;
    double seconds_per_call = 0.0;
    double ops_per_second = 0.0;
};

/// Times the float convolution and the integer contraction on one layer.
/// repetitions == 0 returns no rows.
std::vector<BenchRow> kernel_bench(const BenchGeometry& g, int bits, int repetitions, uint64_t seed = 0);

}  // namespace qsci
