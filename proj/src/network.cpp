#include "qsci/network.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

#include "qsci/errors.hpp"

namespace qsci {

const char* module_name(Module m) {
    switch (m) {
        case Module::FeatureExtraction: return "fem";
        case Module::ResDNet: return "resdnet";
        case Module::VideoReconstruction: return "vrm";
    }
    return "?";
}

uint64_t fnv1a64(std::string_view bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// ---------------------------------------------------------------------------
// QNetConfig

void QNetConfig::validate() const {
    if (base_channels < 2 || base_channels % 2 != 0) throw ConfigError("net.base_channels must be even and >= 2");
    if (resdnet_blocks < 0) throw ConfigError("net.resdnet_blocks must be >= 0");
    if (cformer_per_block < 0) throw ConfigError("net.cformer_per_block must be >= 0");
    if (heads < 1 || base_channels % heads != 0) throw ConfigError("net.base_channels must be divisible by net.heads");
    if (cr < 1) throw ConfigError("net.cr must be >= 1");
    for (int b : {body_bits, shortcut_bits}) {
        if (!BitWidth::valid(b)) throw ConfigError("unsupported bit-width " + std::to_string(b));
    }
    for (int b : {fem_bits, resd_bits, vrm_bits}) {
        if (b != 0 && !BitWidth::valid(b)) throw ConfigError("unsupported module bit-width " + std::to_string(b));
    }
    if (shortcut_bits < body_bits) throw ConfigError("net.shortcut_bits must be >= net.body_bits");
}

int QNetConfig::bits_for(Module m) const {
    int b = 0;
    switch (m) {
        case Module::FeatureExtraction: b = fem_bits; break;
        case Module::ResDNet: b = resd_bits; break;
        case Module::VideoReconstruction: b = vrm_bits; break;
    }
    return b ? b : body_bits;
}

bool QNetConfig::quantized() const {
    return bits_for(Module::FeatureExtraction) < 32 || bits_for(Module::ResDNet) < 32 ||
           bits_for(Module::VideoReconstruction) < 32 || ((use_fem_shortcuts || use_vrm_shortcuts) && shortcut_bits < 32);
}

std::string QNetConfig::canonical() const {
    std::ostringstream os;
    os << "net.base_channels = " << base_channels << '\n'
       << "net.resdnet_blocks = " << resdnet_blocks << '\n'
       << "net.cformer_per_block = " << cformer_per_block << '\n'
       << "net.heads = " << heads << '\n'
       << "net.cr = " << cr << '\n'
       << "net.body_bits = " << body_bits << '\n'
       << "net.shortcut_bits = " << shortcut_bits << '\n'
       << "net.fem_bits = " << fem_bits << '\n'
       << "net.resd_bits = " << resd_bits << '\n'
       << "net.vrm_bits = " << vrm_bits << '\n'
       << "net.use_fem_shortcuts = " << (use_fem_shortcuts ? "true" : "false") << '\n'
       << "net.use_vrm_shortcuts = " << (use_vrm_shortcuts ? "true" : "false") << '\n'
       << "net.use_qk_shift = " << (use_qk_shift ? "true" : "false") << '\n';
    return os.str();
}

uint64_t QNetConfig::fingerprint() const { return fnv1a64(canonical()); }

uint64_t QNetConfig::geometry_fingerprint() const {
    std::ostringstream os;
    os << base_channels << ',' << resdnet_blocks << ',' << cformer_per_block << ',' << heads << ',' << cr;
    return fnv1a64(os.str());
}

QNetConfig make_variant(std::string_view name, const QNetConfig& geometry) {
    QNetConfig c;
    c.base_channels = geometry.base_channels;
    c.resdnet_blocks = geometry.resdnet_blocks;
    c.cformer_per_block = geometry.cformer_per_block;
    c.heads = geometry.heads;
    c.cr = geometry.cr;
    auto low_bit = [&](int bits) {
        c.body_bits = bits;
        c.shortcut_bits = 8;
        c.use_fem_shortcuts = c.use_vrm_shortcuts = c.use_qk_shift = true;
    };
    if (name == "fp32") {
        c.body_bits = c.shortcut_bits = 32;
    } else if (name == "q8") {
        c.body_bits = c.shortcut_bits = 8;
        c.use_qk_shift = true;
    } else if (name == "q8_baseline") {
        c.body_bits = c.shortcut_bits = 8;
    } else if (name == "q8_fem4" || name == "q8_resd4" || name == "q8_vrm4") {
        c.body_bits = c.shortcut_bits = 8;
        if (name == "q8_fem4") c.fem_bits = 4;
        if (name == "q8_resd4") c.resd_bits = 4;
        if (name == "q8_vrm4") c.vrm_bits = 4;
    } else if (name == "q4") {
        low_bit(4);
    } else if (name == "q3") {
        low_bit(3);
    } else if (name == "q2") {
        low_bit(2);
    } else if (name == "q4_baseline" || name == "q4_shift" || name == "q4_shift_fem") {
        c.body_bits = 4;
        c.shortcut_bits = 8;
        c.use_qk_shift = name != "q4_baseline";
        c.use_fem_shortcuts = name == "q4_shift_fem";
    } else {
        throw ConfigError("unknown variant '" + std::string(name) + "'");
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Calibration helpers

void ActObserver::observe(const ActQuantizer& q, const Tensor& x) {
    auto& s = samples[&q];
    const size_t stride = std::max<size_t>(1, x.numel() / cap);
    for (size_t i = 0; i < x.numel() && s.size() < 4 * cap; i += stride) s.push_back(x[i]);
}

float choose_weight_alpha(const Tensor& w, BitWidth bits, int64_t fan_in) {
    if (bits.passthrough()) return 1.0f;
    float m = 0.0f;
    for (float v : w.data()) m = std::max(m, std::fabs(v));
    const float qp = static_cast<float>(bits.qp());
    if (m == 0.0f) return std::max(kAlphaFloor, 1.0f / (std::sqrt(static_cast<float>(std::max<int64_t>(fan_in, 1))) * qp));
    float best_alpha = m / qp;
    double best_err = -1.0;
    for (int step = 20; step >= 4; --step) {
        const float alpha = std::max(kAlphaFloor, 0.05f * static_cast<float>(step) * m / qp);
        double err = 0.0;
        for (float v : w.data()) {
            const double d = v - quantize_value(v, alpha, 0.0f, bits) * alpha;
            err += d * d;
        }
        if (best_err < 0.0 || err < best_err) {
            best_err = err;
            best_alpha = alpha;
        }
    }
    return best_alpha;
}

std::pair<float, float> choose_act_params(std::vector<float> samples, BitWidth bits) {
    if (bits.passthrough() || samples.empty()) return {1.0f, 0.0f};
    std::sort(samples.begin(), samples.end());
    const size_t n = samples.size();
    auto pct = [&](double p) { return samples[std::min(n - 1, static_cast<size_t>(p * static_cast<double>(n - 1)))]; };
    const float levels = static_cast<float>(bits.qn() + bits.qp());
    const size_t eval_stride = std::max<size_t>(1, n / 8192);
    std::pair<float, float> best{1.0f, 0.0f};
    double best_err = -1.0;
    for (double lo_p : {0.0, 0.001, 0.01}) {
        for (double hi_p : {1.0, 0.999, 0.99, 0.98, 0.95}) {
            const float lo = pct(lo_p), hi = pct(hi_p);
            const float alpha = std::max((hi - lo) / levels, 1e-6f);
            const float zero = lo + static_cast<float>(bits.qn()) * alpha;
            double err = 0.0;
            for (size_t i = 0; i < n; i += eval_stride) {
                const float v = samples[i];
                const double d = v - (quantize_value(v, alpha, zero, bits) * alpha + zero);
                err += d * d;
            }
            if (best_err < 0.0 || err < best_err) {
                best_err = err;
                best = {alpha, zero};
            }
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// QNet construction

QNet::QNet(const QNetConfig& cfg, uint64_t init_seed) : cfg_(cfg), seed_(init_seed) {
    cfg_.validate();
    build();
}

QConvLayer& QNet::add_layer(const std::string& name, Module m, int64_t in, int64_t out, int k, ConvGeom geom,
                            bool shortcut, int out_scale) {
    QConvLayer& l = layers_.emplace_back();
    l.name = name;
    l.module = m;
    l.shortcut = shortcut;
    l.out_scale = out_scale;
    l.geom = geom;
    l.weight = Parameter{name + ".weight", Tensor(Shape{out, in, k, k, k}), {}};
    l.bias = Parameter{name + ".bias", Tensor(Shape{out}), {}};
    const BitWidth bits(shortcut ? cfg_.shortcut_bits : cfg_.bits_for(m));
    l.aq = ActQuantizer(bits, name + ".aq");
    l.wq = WeightQuantizer(bits, name + ".wq");
    by_name_[name] = &l;
    return l;
}

namespace {

enum class InitKind { Zero, LeakyRelu, Linear, Residual };

void init_weight(Parameter& w, InitKind kind, uint64_t seed) {
    if (kind == InitKind::Zero) return;
    const int64_t fan_in = w.value.dim(1) * w.value.dim(2) * w.value.dim(3) * w.value.dim(4);
    float bound = std::sqrt(3.0f / static_cast<float>(fan_in));
    if (kind == InitKind::LeakyRelu) bound *= std::sqrt(2.0f);
    if (kind == InitKind::Residual) bound *= 0.2f;
    std::mt19937_64 rng(seed ^ fnv1a64(w.name));
    for (auto& v : w.value.data()) v = static_cast<float>((2.0 * uniform01(rng) - 1.0) * bound);
}

}  // namespace

void QNet::build() {
    const int64_t c = cfg_.base_channels;
    const ConvGeom same{{1, 1, 1}, {1, 1, 1}};
    const ConvGeom down{{1, 2, 2}, {1, 1, 1}};
    const ConvGeom point{};
    using M = Module;

    fem_conv1_ = &add_layer("fem.conv1", M::FeatureExtraction, 2, c, 3, same, false, 1);
    fem_conv2_ = &add_layer("fem.conv2", M::FeatureExtraction, c, c, 3, down, false, 2);
    fem_conv3_ = &add_layer("fem.conv3", M::FeatureExtraction, c, c, 3, same, false, 2);
    init_weight(fem_conv1_->weight, InitKind::LeakyRelu, seed_);
    init_weight(fem_conv2_->weight, InitKind::LeakyRelu, seed_);
    init_weight(fem_conv3_->weight, InitKind::Linear, seed_);
    if (cfg_.use_fem_shortcuts) {
        fem_sc1_ = &add_layer("fem.sc1", M::FeatureExtraction, 2, c, 1, point, true, 1);
        fem_sc2_ = &add_layer("fem.sc2", M::FeatureExtraction, 4 * c, c, 1, point, true, 2);
    }

    for (int b = 0; b < cfg_.resdnet_blocks; ++b) {
        ResDBlock blk;
        const std::string bp = "resd" + std::to_string(b);
        for (int k = 0; k < cfg_.cformer_per_block; ++k) {
            const std::string p = bp + ".cf" + std::to_string(k);
            CFormerBlock cf;
            cf.conv = &add_layer(p + ".conv", M::ResDNet, c, c / 2, 3, same, false, 2);
            init_weight(cf.conv->weight, InitKind::LeakyRelu, seed_);
            ShiftedAttention& at = attns_.emplace_back();
            at.name = p + ".attn";
            at.heads = cfg_.heads;
            at.shift = cfg_.use_qk_shift;
            at.q = &add_layer(at.name + ".q", M::ResDNet, c, c, 1, point, false, 2);
            at.k = &add_layer(at.name + ".k", M::ResDNet, c, c, 1, point, false, 2);
            at.v = &add_layer(at.name + ".v", M::ResDNet, c, c, 1, point, false, 2);
            at.out = &add_layer(at.name + ".out", M::ResDNet, c, c / 2, 1, point, false, 2);
            for (QConvLayer* l : {at.q, at.k, at.v, at.out}) init_weight(l->weight, InitKind::Linear, seed_);
            if (at.shift) {
                at.beta_q = Parameter{at.name + ".beta_q", Tensor(Shape{c}), {}};
                at.beta_k = Parameter{at.name + ".beta_k", Tensor(Shape{c}), {}};
            }
            const BitWidth ab(cfg_.bits_for(M::ResDNet));
            at.q_quant = ActQuantizer(ab, at.name + ".qq");
            at.k_quant = ActQuantizer(ab, at.name + ".kq");
            at.p_quant = ActQuantizer(ab, at.name + ".pq");
            cf.attn = &at;
            cf.fuse = &add_layer(p + ".fuse", M::ResDNet, c, c, 1, point, false, 2);
            cf.mlp_in = &add_layer(p + ".mlp_in", M::ResDNet, c, 2 * c, 1, point, false, 2);
            cf.mlp_out = &add_layer(p + ".mlp_out", M::ResDNet, 2 * c, c, 1, point, false, 2);
            init_weight(cf.fuse->weight, InitKind::Linear, seed_);
            init_weight(cf.mlp_in->weight, InitKind::Linear, seed_);
            init_weight(cf.mlp_out->weight, InitKind::Residual, seed_);
            blk.cformers.push_back(cf);
        }
        blk.fuse = &add_layer(bp + ".fuse", M::ResDNet, c, c, 1, point, false, 2);
        init_weight(blk.fuse->weight, InitKind::Residual, seed_);
        blocks_.push_back(std::move(blk));
    }

    vrm_up_ = &add_layer("vrm.up", M::VideoReconstruction, c, 2 * c, 3, same, false, 2);
    vrm_conv_ = &add_layer("vrm.conv", M::VideoReconstruction, c / 2, c / 2, 3, same, false, 1);
    vrm_out_ = &add_layer("vrm.out", M::VideoReconstruction, c / 2, 1, 3, same, false, 1);
    init_weight(vrm_up_->weight, InitKind::LeakyRelu, seed_);
    init_weight(vrm_conv_->weight, InitKind::LeakyRelu, seed_);
    init_weight(vrm_out_->weight, InitKind::Residual, seed_);
    vrm_out_->bias.value.fill(0.5f);
    if (cfg_.use_vrm_shortcuts) {
        vrm_sc1_ = &add_layer("vrm.sc1", M::VideoReconstruction, c, 2 * c, 1, point, true, 2);
        vrm_sc2_ = &add_layer("vrm.sc2", M::VideoReconstruction, c / 2, 1, 1, point, true, 1);
    }
}

QConvLayer& QNet::layer_named(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw ConfigError("no layer named '" + name + "'");
    return *it->second;
}

std::vector<Parameter*> QNet::parameters() {
    std::vector<Parameter*> out;
    for (auto& l : layers_) {
        out.insert(out.end(), {&l.weight, &l.bias, &l.aq.alpha, &l.aq.zero, &l.wq.alpha});
    }
    for (auto& a : attns_) {
        if (a.shift) out.insert(out.end(), {&a.beta_q, &a.beta_k});
        out.insert(out.end(), {&a.q_quant.alpha, &a.q_quant.zero, &a.k_quant.alpha, &a.k_quant.zero,
                               &a.p_quant.alpha, &a.p_quant.zero});
    }
    return out;
}

Parameter* QNet::find(const std::string& name) {
    for (Parameter* p : parameters()) {
        if (p->name == name) return p;
    }
    return nullptr;
}

// ---------------------------------------------------------------------------
// Forward

Var QNet::layer(Tape& tape, QConvLayer& l, Var x) {
    if (executor_) return tape.constant((*executor_)(l, x.value()));
    Var w = tape.param(l.weight);
    Var b = tape.param(l.bias);
    if (observer_) {
        if (!l.aq.bits.passthrough()) observer_->observe(l.aq, x.value());
        return conv3d(x, w, &b, l.geom);
    }
    return q_conv3d(x, w, &b, l.aq, l.wq, l.geom);
}

Var QNet::act_quant(Tape& tape, Var x, ActQuantizer& q) {
    (void)tape;
    if (observer_) {
        if (!q.bits.passthrough()) observer_->observe(q, x.value());
        return x;
    }
    return fake_quant(x, q);
}

Var QNet::feature_extraction(Tape& tape, Var x) {
    Var h1 = layer(tape, *fem_conv1_, x);
    if (fem_sc1_) h1 = add(h1, layer(tape, *fem_sc1_, x));
    h1 = leaky_relu(h1, kLeakySlope);
    Var h2 = leaky_relu(layer(tape, *fem_conv2_, h1), kLeakySlope);
    Var out = layer(tape, *fem_conv3_, h2);
    if (fem_sc2_) out = add(out, layer(tape, *fem_sc2_, pixel_unshuffle_spatial(h1, 2)));
    return out;
}

Var QNet::shifted_attention(Tape& tape, ShiftedAttention& at, Var x) {
    Var q = layer(tape, *at.q, x);
    Var k = layer(tape, *at.k, x);
    Var v = layer(tape, *at.v, x);
    if (at.shift) {
        q = add_channel(q, tape.param(at.beta_q));
        k = add_channel(k, tape.param(at.beta_k));
    }
    q = act_quant(tape, q, at.q_quant);
    k = act_quant(tape, k, at.k_quant);
    const int64_t d = q.shape()[1] / at.heads;
    Var scores = temporal_scores(q, k, at.heads, 1.0f / std::sqrt(static_cast<float>(d)));
    Var probs = act_quant(tape, softmax(scores, 3), at.p_quant);
    return layer(tape, *at.out, temporal_mix(probs, v, at.heads));
}

Var QNet::cformer(Tape& tape, CFormerBlock& blk, Var x) {
    Var conv_branch = leaky_relu(layer(tape, *blk.conv, x), kLeakySlope);
    Var attn_branch = shifted_attention(tape, *blk.attn, x);
    Var fused = layer(tape, *blk.fuse, concat({conv_branch, attn_branch}, 1));
    Var mlp = layer(tape, *blk.mlp_out, gelu(layer(tape, *blk.mlp_in, fused)));
    return add(x, mlp);
}

Var QNet::resdnet(Tape& tape, Var x) {
    for (auto& blk : blocks_) {
        Var h = x;
        for (auto& cf : blk.cformers) h = cformer(tape, cf, h);
        x = add(x, layer(tape, *blk.fuse, h));
    }
    return x;
}

Var QNet::video_reconstruction(Tape& tape, Var features) {
    Var up = layer(tape, *vrm_up_, features);
    if (vrm_sc1_) up = add(up, layer(tape, *vrm_sc1_, features));
    Var a = leaky_relu(pixel_shuffle_spatial(up, 2), kLeakySlope);
    Var c = leaky_relu(layer(tape, *vrm_conv_, a), kLeakySlope);
    Var out = layer(tape, *vrm_out_, c);
    if (vrm_sc2_) out = add(out, layer(tape, *vrm_sc2_, a));
    const Shape& s = out.shape();
    return clamp(reshape(out, Shape{s[0], s[2], s[3], s[4]}), 0.0f, 1.0f);
}

Var QNet::forward(Tape& tape, Var input) {
    const Shape& s = input.shape();
    if (s.size() != 5 || s[1] != 2) throw ConfigError("qnet: input must be [N,2,T,H,W], got " + shape_str(s));
    if (s[2] != cfg_.cr) {
        throw ConfigError("qnet: input has T=" + std::to_string(s[2]) + " but config cr=" + std::to_string(cfg_.cr));
    }
    if (s[3] % 2 != 0 || s[4] % 2 != 0) throw ConfigError("qnet: H and W must be even");
    return video_reconstruction(tape, resdnet(tape, feature_extraction(tape, input)));
}

VideoClip QNet::reconstruct(const Measurement& y, const MaskSet& masks) {
    Tape tape(false);
    Var out = forward(tape, tape.constant(initial_estimate(y, masks)));
    const Shape& s = out.shape();
    return VideoClip{out.value().reshaped(Shape{s[1], s[2], s[3]})};
}

// ---------------------------------------------------------------------------
// Audit

std::vector<LayerAudit> QNet::audit(int64_t t, int64_t h, int64_t w) const {
    std::vector<LayerAudit> rows;
    auto conv_row = [&](const QConvLayer& l) {
        LayerAudit r;
        r.name = l.name;
        r.module = l.module;
        r.shortcut = l.shortcut;
        r.in_channels = l.in_channels();
        r.out_channels = l.out_channels();
        r.taps = l.taps();
        r.w_bits = l.wq.bits.bits();
        r.a_bits = l.aq.bits.bits();
        r.act_quantizers = 1;
        r.weight_quantizers = 1;
        r.params = static_cast<int64_t>(l.weight.value.numel() + l.bias.value.numel());
        r.macs = r.out_channels * r.in_channels * r.taps * t * (h / l.out_scale) * (w / l.out_scale);
        rows.push_back(r);
    };
    auto attn_rows = [&](const ShiftedAttention& a) {
        const int64_t c = a.q->out_channels();
        const int64_t tokens = (h / 2) * (w / 2);
        for (const char* suffix : {".scores", ".mix"}) {
            LayerAudit r;
            r.name = a.name + suffix;
            r.module = Module::ResDNet;
            r.weighted = false;
            r.in_channels = c;
            r.out_channels = c;
            r.a_bits = r.w_bits = a.q_quant.bits.bits();
            r.act_quantizers = std::string(suffix) == ".scores" ? 2 : 1;
            r.macs = c * t * t * tokens;
            rows.push_back(r);
        }
    };
    size_t attn_idx = 0;
    for (const auto& l : layers_) {
        conv_row(l);
        if (attn_idx < attns_.size() && &l == attns_[attn_idx].out) attn_rows(attns_[attn_idx++]);
    }
    return rows;
}

std::string audit_table(const std::vector<LayerAudit>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(24) << "layer" << std::setw(9) << "module" << std::setw(6) << "kind" << std::setw(6)
       << "in" << std::setw(6) << "out" << std::setw(6) << "taps" << std::setw(7) << "w_bits" << std::setw(7)
       << "a_bits" << std::setw(5) << "aq" << std::setw(5) << "wq" << std::setw(10) << "params"
       << "macs\n";
    for (const auto& r : rows) {
        os << std::setw(24) << r.name << std::setw(9) << module_name(r.module) << std::setw(6)
           << (r.weighted ? (r.shortcut ? "sc" : "conv") : "attn") << std::setw(6) << r.in_channels << std::setw(6)
           << r.out_channels << std::setw(6) << r.taps << std::setw(7) << r.w_bits << std::setw(7) << r.a_bits
           << std::setw(5) << r.act_quantizers << std::setw(5) << r.weight_quantizers << std::setw(10) << r.params
           << r.macs << '\n';
    }
    os << "# cformer fusion: concat(conv branch, attention branch) -> 1x1x1 conv\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Calibration and maintenance

void QNet::calibrate_weights() {
    for (auto& l : layers_) {
        l.wq.set(choose_weight_alpha(l.weight.value, l.wq.bits, l.in_channels() * l.taps()));
    }
}

void QNet::calibrate(const std::vector<Tensor>& inputs) {
    calibrate_weights();
    ActObserver obs;
    observer_ = &obs;
    try {
        for (const Tensor& in : inputs) {
            Tape tape(false);
            forward(tape, tape.constant(in));
        }
    } catch (...) {
        observer_ = nullptr;
        throw;
    }
    observer_ = nullptr;
    auto apply = [&](ActQuantizer& q) {
        if (q.bits.passthrough()) return;
        auto it = obs.samples.find(&q);
        if (it == obs.samples.end()) return;
        auto [alpha, zero] = choose_act_params(std::move(it->second), q.bits);
        q.set(alpha, zero);
    };
    for (auto& l : layers_) apply(l.aq);
    for (auto& a : attns_) {
        apply(a.q_quant);
        apply(a.k_quant);
        apply(a.p_quant);
    }
}

void QNet::zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
}

void QNet::clamp_quantizers() {
    auto floor = [](Parameter& p) { p.value[0] = std::max(p.value[0], kAlphaFloor); };
    for (auto& l : layers_) {
        floor(l.aq.alpha);
        floor(l.wq.alpha);
    }
    for (auto& a : attns_) {
        floor(a.q_quant.alpha);
        floor(a.k_quant.alpha);
        floor(a.p_quant.alpha);
    }
}

}  // namespace qsci
