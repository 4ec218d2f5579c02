#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "qsci/autodiff.hpp"
#include "qsci/quant.hpp"
#include "qsci/sci.hpp"

namespace qsci {

enum class Module { FeatureExtraction, ResDNet, VideoReconstruction };

const char* module_name(Module m);

/// Miniature three-stage reconstruction network configuration.
struct QNetConfig {
    int base_channels = 16;
    int resdnet_blocks = 2;
    int cformer_per_block = 2;
    int heads = 2;
    int cr = 4;
    int body_bits = 32;
    int shortcut_bits = 32;
    /// Per-module overrides of body_bits; 0 inherits. Used by the per-module ablation grid.
    int fem_bits = 0;
    int resd_bits = 0;
    int vrm_bits = 0;
    bool use_fem_shortcuts = false;
    bool use_vrm_shortcuts = false;
    bool use_qk_shift = false;

    void validate() const;
    int bits_for(Module m) const;
    bool quantized() const;

    /// Canonical "key = value" text, one key per line, fixed order.
    std::string canonical() const;
    uint64_t fingerprint() const;
    /// Hash of the shape-defining fields only (channels, blocks, heads, cr).
    uint64_t geometry_fingerprint() const;

    bool operator==(const QNetConfig&) const = default;
};

/// Named variants: fp32, q8, q4, q3, q2, q4_baseline, q4_shift, q4_shift_fem.
QNetConfig make_variant(std::string_view name, const QNetConfig& geometry = {});

uint64_t fnv1a64(std::string_view bytes);

/// One quantized convolution (1x1x1 convolutions double as linear layers).
struct QConvLayer {
    std::string name;
    Module module = Module::FeatureExtraction;
    bool shortcut = false;
    /// Spatial downscale of this layer's output relative to the input frames.
    int out_scale = 1;
    ConvGeom geom;
    Parameter weight;
    Parameter bias;
    ActQuantizer aq;
    WeightQuantizer wq;

    int64_t out_channels() const { return weight.value.dim(0); }
    int64_t in_channels() const { return weight.value.dim(1); }
    int64_t taps() const { return weight.value.dim(2) * weight.value.dim(3) * weight.value.dim(4); }
};

struct ShiftedAttention {
    std::string name;
    QConvLayer* q = nullptr;
    QConvLayer* k = nullptr;
    QConvLayer* v = nullptr;
    QConvLayer* out = nullptr;
    bool shift = false;
    Parameter beta_q;  ///< [C], present only when shift is enabled
    Parameter beta_k;
    ActQuantizer q_quant;
    ActQuantizer k_quant;
    ActQuantizer p_quant;
    int heads = 1;
};

struct CFormerBlock {
    QConvLayer* conv = nullptr;
    ShiftedAttention* attn = nullptr;
    QConvLayer* fuse = nullptr;
    QConvLayer* mlp_in = nullptr;
    QConvLayer* mlp_out = nullptr;
};

struct ResDBlock {
    std::vector<CFormerBlock> cformers;
    QConvLayer* fuse = nullptr;
};

/// Structural audit row. Weightless rows are the attention products.
struct LayerAudit {
    std::string name;
    Module module = Module::FeatureExtraction;
    bool weighted = true;
    bool shortcut = false;
    int64_t in_channels = 0, out_channels = 0, taps = 0;
    int w_bits = 32, a_bits = 32;
    int act_quantizers = 0, weight_quantizers = 0;
    int64_t params = 0;
    int64_t macs = 0;
};

/// Collects activation samples during calibration.
struct ActObserver {
    std::unordered_map<const ActQuantizer*, std::vector<float>> samples;
    size_t cap = 1 << 15;
    void observe(const ActQuantizer& q, const Tensor& x);
};

/// Replaces the quantized convolution of weight-bearing layers during forward.
using LayerExecutor = std::function<Tensor(const QConvLayer&, const Tensor& x)>;

class QNet {
public:
    explicit QNet(const QNetConfig& cfg, uint64_t init_seed = 0);
    QNet(const QNet&) = delete;
    QNet& operator=(const QNet&) = delete;

    const QNetConfig& config() const noexcept { return cfg_; }

    /// input [N, 2, T, H, W] -> frames [N, T, H, W], clamped to [0, 1].
    Var forward(Tape& tape, Var input);
    Var feature_extraction(Tape& tape, Var x);
    Var resdnet(Tape& tape, Var x);
    Var cformer(Tape& tape, CFormerBlock& blk, Var x);
    Var shifted_attention(Tape& tape, ShiftedAttention& attn, Var x);
    Var video_reconstruction(Tape& tape, Var features);
    Var layer(Tape& tape, QConvLayer& l, Var x);
    Var act_quant(Tape& tape, Var x, ActQuantizer& q);

    /// End-to-end reconstruction of one measurement.
    VideoClip reconstruct(const Measurement& y, const MaskSet& masks);

    std::vector<Parameter*> parameters();
    Parameter* find(const std::string& name);

    std::deque<QConvLayer>& layers() noexcept { return layers_; }
    const std::deque<QConvLayer>& layers() const noexcept { return layers_; }
    std::deque<ShiftedAttention>& attentions() noexcept { return attns_; }
    std::vector<ResDBlock>& blocks() noexcept { return blocks_; }
    QConvLayer& layer_named(const std::string& name);

    std::vector<LayerAudit> audit(int64_t t, int64_t h, int64_t w) const;

    /// Sets quantizer scales from activation statistics of `inputs` and
    /// from the current weights. No-op for pass-through quantizers.
    void calibrate(const std::vector<Tensor>& inputs);
    void calibrate_weights();

    /// Installs (or clears, with nullptr) a layer executor. Not thread-safe.
    void set_executor(const LayerExecutor* exec) noexcept { executor_ = exec; }

    void zero_grad();
    /// Enforces the alpha > 0 floor on every quantizer.
    void clamp_quantizers();

private:
    QConvLayer& add_layer(const std::string& name, Module m, int64_t in, int64_t out, int k, ConvGeom geom,
                          bool shortcut, int out_scale);
    void build();

    QNetConfig cfg_;
    uint64_t seed_;
    std::deque<QConvLayer> layers_;
    std::deque<ShiftedAttention> attns_;
    std::vector<ResDBlock> blocks_;
    std::unordered_map<std::string, QConvLayer*> by_name_;
    ActObserver* observer_ = nullptr;
    const LayerExecutor* executor_ = nullptr;

    QConvLayer* fem_conv1_ = nullptr;
    QConvLayer* fem_conv2_ = nullptr;
    QConvLayer* fem_conv3_ = nullptr;
    QConvLayer* fem_sc1_ = nullptr;
    QConvLayer* fem_sc2_ = nullptr;
    QConvLayer* vrm_up_ = nullptr;
    QConvLayer* vrm_conv_ = nullptr;
    QConvLayer* vrm_out_ = nullptr;
    QConvLayer* vrm_sc1_ = nullptr;
    QConvLayer* vrm_sc2_ = nullptr;
};

inline constexpr float kLeakySlope = 0.01f;

/// Plain-text layer table (one row per audit entry).
std::string audit_table(const std::vector<LayerAudit>& rows);

/// Chooses a weight scale minimising quantization MSE over a grid.
float choose_weight_alpha(const Tensor& w, BitWidth bits, int64_t fan_in);
/// Chooses (alpha, zero) for activation samples by percentile-range search.
std::pair<float, float> choose_act_params(std::vector<float> samples, BitWidth bits);

}  // namespace qsci
