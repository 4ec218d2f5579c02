#include "qsci/packed.hpp"

#include <cassert>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>

#include "qsci/accounting.hpp"
#include "qsci/config.hpp"
#include "qsci/container.hpp"
#include "qsci/conv.hpp"
#include "qsci/errors.hpp"
#include "qsci/parallel.hpp"
#include "qsci/quant.hpp"

namespace qsci {

int codes_per_word(int bits) {
    if (bits != 2 && bits != 3 && bits != 4 && bits != 8) throw ConfigError("packing supports 2, 3, 4 or 8 bits");
    return 64 / bits;
}

std::vector<uint64_t> pack_weights(std::span<const int32_t> codes, int bits) {
    const int per = codes_per_word(bits);
    const int32_t lo = -(1 << (bits - 1)), hi = (1 << (bits - 1)) - 1;
    const uint64_t mask = (uint64_t{1} << bits) - 1;
    std::vector<uint64_t> words((codes.size() + static_cast<size_t>(per) - 1) / static_cast<size_t>(per), 0);
    for (size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] < lo || codes[i] > hi) {
            throw DataError("code " + std::to_string(codes[i]) + " outside the " + std::to_string(bits) + "-bit range");
        }
        const uint64_t field = static_cast<uint64_t>(static_cast<int64_t>(codes[i])) & mask;
        words[i / static_cast<size_t>(per)] |= field << (bits * static_cast<int>(i % static_cast<size_t>(per)));
    }
    return words;
}

std::vector<int32_t> unpack_weights(std::span<const uint64_t> words, size_t count, int bits) {
    const int per = codes_per_word(bits);
    if (words.size() * static_cast<size_t>(per) < count) throw DataError("packed weights shorter than code count");
    const uint64_t mask = (uint64_t{1} << bits) - 1;
    const uint64_t sign = uint64_t{1} << (bits - 1);
    std::vector<int32_t> out(count);
    for (size_t i = 0; i < count; ++i) {
        const uint64_t f = (words[i / static_cast<size_t>(per)] >> (bits * static_cast<int>(i % static_cast<size_t>(per)))) & mask;
        out[i] = static_cast<int32_t>(static_cast<int64_t>(f ^ sign) - static_cast<int64_t>(sign));
    }
    return out;
}

std::vector<uint64_t> pack_weights(const Tensor& codes, int bits) {
    std::vector<int32_t> c(codes.numel());
    for (size_t i = 0; i < c.size(); ++i) {
        const float v = codes[i];
        if (v != std::nearbyint(v)) throw DataError("pack_weights: non-integral code");
        c[i] = static_cast<int32_t>(v);
    }
    return pack_weights(std::span<const int32_t>(c), bits);
}

// ---------------------------------------------------------------------------

void PackedLayer::prepare() {
    codes.clear();
    wsum.clear();
    acc_bound = 0.0;
    if (!integer()) return;
    if (code_count != out_channels * in_channels * taps()) throw DataError("layer '" + name + "': code count mismatch");
    codes = unpack_weights(words, static_cast<size_t>(code_count), w_bits);
    wsum.assign(static_cast<size_t>(out_channels * taps()), 0);
    for (int64_t o = 0; o < out_channels; ++o)
        for (int64_t c = 0; c < in_channels; ++c)
            for (int64_t tp = 0; tp < taps(); ++tp) {
                wsum[static_cast<size_t>(o * taps() + tp)] += codes[static_cast<size_t>((o * in_channels + c) * taps() + tp)];
            }
    acc_bound = static_cast<double>(in_channels * taps()) * std::ldexp(1.0, a_bits - 1) * std::ldexp(1.0, w_bits - 1);
}

void check_accumulator(const PackedLayer& l, int acc_bits) {
    if (!l.integer()) return;
    const double limit = std::ldexp(1.0, acc_bits - 1) - 1.0;
    if (l.acc_bound > limit) {
        throw DataError("layer '" + l.name + "': worst-case accumulator " + std::to_string(l.acc_bound) +
                        " exceeds a " + std::to_string(acc_bits) + "-bit accumulator");
    }
}

Tensor int_contract(const Tensor& x_codes, const PackedLayer& l) {
    if (!l.integer()) throw ConfigError("int_contract: layer '" + l.name + "' is not integer-quantized");
    if (l.codes.size() != static_cast<size_t>(l.code_count)) throw ConfigError("int_contract: layer not prepared");
    const ConvDims d = conv_dims(x_codes.shape(), l.weight_shape(), l.geom);
    const int64_t k = d.k(), p = d.out_plane(), taps = d.taps();

    std::vector<int32_t> xin(x_codes.numel());
    for (size_t i = 0; i < xin.size(); ++i) xin[i] = static_cast<int32_t>(x_codes[i]);

    const std::vector<float> valid = conv_valid_mask(d, l.geom);
    std::vector<int64_t> corr(static_cast<size_t>(d.o * p), 0);
    for (int64_t o = 0; o < d.o; ++o)
        for (int64_t tp = 0; tp < taps; ++tp) {
            const int64_t s = l.wsum[static_cast<size_t>(o * taps + tp)];
            if (s == 0) continue;
            for (int64_t i = 0; i < p; ++i) {
                if (valid[static_cast<size_t>(tp * p + i)] != 0.0f) corr[static_cast<size_t>(o * p + i)] += s;
            }
        }

    Tensor out(Shape{d.n, d.o, d.to, d.ho, d.wo});
    std::vector<int32_t> cols(static_cast<size_t>(k * p));
    for (int64_t n = 0; n < d.n; ++n) {
        im2col(xin.data() + n * d.c * d.in_plane(), d, l.geom, cols.data());
        float* dst = out.ptr() + n * d.o * p;
        parallel_for(d.o, [&](int64_t ob, int64_t oe) {
            std::vector<int64_t> acc(static_cast<size_t>(p));
            for (int64_t o = ob; o < oe; ++o) {
                std::fill(acc.begin(), acc.end(), 0);
                const int32_t* wrow = l.codes.data() + o * k;
                for (int64_t j = 0; j < k; ++j) {
                    const int64_t wv = wrow[j];
                    if (wv == 0) continue;
                    const int32_t* crow = cols.data() + j * p;
                    for (int64_t i = 0; i < p; ++i) acc[static_cast<size_t>(i)] += wv * crow[i];
                }
                const float bv = l.bias.empty() ? 0.0f : l.bias[static_cast<size_t>(o)];
                for (int64_t i = 0; i < p; ++i) {
                    assert(std::fabs(static_cast<double>(acc[static_cast<size_t>(i)])) <= l.acc_bound);
                    dst[o * p + i] = rescale_accumulator(static_cast<float>(acc[static_cast<size_t>(i)]),
                                                         static_cast<float>(corr[static_cast<size_t>(o * p + i)]),
                                                         l.alpha_x, l.zero, l.alpha_w) +
                                     bv;
                }
            }
        });
    }
    return out;
}

Tensor run_packed_layer(const PackedLayer& l, const Tensor& x) {
    if (l.integer()) {
        const BitWidth bits(l.a_bits);
        Tensor codes(x.shape());
        for (size_t i = 0; i < x.numel(); ++i) codes[i] = quantize_value(x[i], l.alpha_x, l.zero, bits);
        return int_contract(codes, l);
    }
    const Tensor xq = fake_quant_raw(x, l.alpha_x, l.zero, BitWidth(l.a_bits));
    const Tensor wq = fake_quant_raw(Tensor(l.weight_shape(), l.float_weight), l.alpha_w, 0.0f, BitWidth(l.w_bits));
    const Tensor bias(Shape{l.out_channels}, l.bias);
    return conv3d_forward(xq, wq, &bias, l.geom);
}

// ---------------------------------------------------------------------------

const PackedLayer& PackedModel::layer(const std::string& name) const {
    for (const auto& l : layers) {
        if (l.name == name) return l;
    }
    throw DataError("packed model has no layer '" + name + "'");
}

PackedModel pack_model(QNet& net) {
    PackedModel m;
    m.config = net.config();
    m.fingerprint = m.config.fingerprint();
    for (const auto& src : net.layers()) {
        PackedLayer l;
        l.name = src.name;
        const Shape& ws = src.weight.value.shape();
        l.out_channels = ws[0];
        l.in_channels = ws[1];
        l.kt = ws[2];
        l.kh = ws[3];
        l.kw = ws[4];
        l.geom = src.geom;
        l.w_bits = src.wq.bits.bits();
        l.a_bits = src.aq.bits.bits();
        l.alpha_w = src.wq.a();
        l.alpha_x = src.aq.a();
        l.zero = src.aq.z();
        l.bias = src.bias.value.vec();
        if (l.integer()) {
            const Tensor codes = weight_quantize(src.weight.value, src.wq);
            l.code_count = static_cast<int64_t>(codes.numel());
            l.words = pack_weights(codes, l.w_bits);
        } else {
            l.float_weight = src.weight.value.vec();
        }
        l.prepare();
        m.layers.push_back(std::move(l));
    }
    for (auto& a : net.attentions()) {
        if (a.shift) {
            m.blobs[a.beta_q.name] = a.beta_q.value;
            m.blobs[a.beta_k.name] = a.beta_k.value;
        }
        for (ActQuantizer* q : {&a.q_quant, &a.k_quant, &a.p_quant}) {
            m.blobs[q->alpha.name] = q->alpha.value;
            m.blobs[q->zero.name] = q->zero.value;
        }
    }
    return m;
}

namespace {

constexpr std::string_view kPackedMagic = "QSCIPACK";

void write_floats(ByteWriter& w, const std::vector<float>& v) {
    w.u32(static_cast<uint32_t>(v.size()));
    for (float f : v) w.f32(f);
}

std::vector<float> read_floats(ByteReader& r, size_t limit) {
    const uint32_t n = r.u32();
    if (n > limit) r.fail("float block larger than file");
    std::vector<float> v(n);
    for (auto& f : v) f = r.f32();
    return v;
}

}  // namespace

std::string encode_packed(const PackedModel& m) {
    ByteWriter w;
    w.raw(kPackedMagic);
    w.u16(kPackedVersion);
    w.u64(m.fingerprint);
    w.str(m.config.canonical());
    w.u32(static_cast<uint32_t>(m.layers.size()));
    for (const auto& l : m.layers) {
        w.str(l.name);
        for (int64_t v : {l.out_channels, l.in_channels, l.kt, l.kh, l.kw}) w.i64(v);
        for (int v : l.geom.stride) w.u32(static_cast<uint32_t>(v));
        for (int v : l.geom.padding) w.u32(static_cast<uint32_t>(v));
        w.u8(static_cast<uint8_t>(l.w_bits));
        w.u8(static_cast<uint8_t>(l.a_bits));
        w.f32(l.alpha_w);
        w.f32(l.alpha_x);
        w.f32(l.zero);
        write_floats(w, l.bias);
        w.i64(l.code_count);
        w.u32(static_cast<uint32_t>(l.words.size()));
        for (uint64_t word : l.words) w.u64(word);
        write_floats(w, l.float_weight);
    }
    w.u32(static_cast<uint32_t>(m.blobs.size()));
    for (const auto& [name, t] : m.blobs) {
        w.str(name);
        w.u8(static_cast<uint8_t>(t.rank()));
        for (int64_t d : t.shape()) w.i64(d);
        for (float f : t.data()) w.f32(f);
    }
    return w.data();
}

PackedModel decode_packed(std::string_view bytes, const std::string& context, int acc_bits) {
    ByteReader r(bytes, context);
    if (r.raw(8) != kPackedMagic) r.fail("not a packed model (bad magic)");
    if (const uint16_t v = r.u16(); v != kPackedVersion) r.fail("unsupported packed version " + std::to_string(v));
    PackedModel m;
    m.fingerprint = r.u64();
    m.config = parse_net_config(r.str());
    if (m.config.fingerprint() != m.fingerprint) r.fail("fingerprint does not match the embedded config");
    const size_t limit = bytes.size();
    const uint32_t nl = r.u32();
    for (uint32_t i = 0; i < nl; ++i) {
        PackedLayer l;
        l.name = r.str();
        for (int64_t* v : {&l.out_channels, &l.in_channels, &l.kt, &l.kh, &l.kw}) {
            *v = r.i64();
            if (*v < 1) r.fail("layer '" + l.name + "' has a non-positive extent");
        }
        for (int& v : l.geom.stride) v = static_cast<int>(r.u32());
        for (int& v : l.geom.padding) v = static_cast<int>(r.u32());
        l.w_bits = r.u8();
        l.a_bits = r.u8();
        if (!BitWidth::valid(l.w_bits) || !BitWidth::valid(l.a_bits)) r.fail("layer '" + l.name + "' has invalid bits");
        l.alpha_w = r.f32();
        l.alpha_x = r.f32();
        l.zero = r.f32();
        l.bias = read_floats(r, limit);
        l.code_count = r.i64();
        const uint32_t nw = r.u32();
        if (nw > limit / 8) r.fail("word block larger than file");
        l.words.resize(nw);
        for (auto& word : l.words) word = r.u64();
        l.float_weight = read_floats(r, limit);
        if (!l.integer() && l.float_weight.size() != static_cast<size_t>(shape_numel(l.weight_shape()))) {
            r.fail("layer '" + l.name + "' float weight size mismatch");
        }
        l.prepare();
        check_accumulator(l, acc_bits);
        m.layers.push_back(std::move(l));
    }
    const uint32_t nb = r.u32();
    for (uint32_t i = 0; i < nb; ++i) {
        std::string name = r.str();
        Shape s(r.u8());
        for (auto& d : s) {
            d = r.i64();
            if (d < 0) r.fail("negative extent in blob '" + name + "'");
        }
        if (static_cast<size_t>(shape_numel(s)) > limit / 4) r.fail("blob larger than file");
        std::vector<float> v(static_cast<size_t>(shape_numel(s)));
        for (auto& f : v) f = r.f32();
        m.blobs[name] = Tensor(s, std::move(v));
    }
    if (!r.done()) r.fail("trailing bytes");

    // Layer list must mirror the network built from the embedded config.
    QNet shell(m.config, 0);
    if (shell.layers().size() != m.layers.size()) r.fail("layer count differs from the network audit");
    for (size_t i = 0; i < m.layers.size(); ++i) {
        const QConvLayer& ref = shell.layers()[i];
        const PackedLayer& l = m.layers[i];
        if (ref.name != l.name || ref.weight.value.shape() != l.weight_shape()) {
            r.fail("layer '" + l.name + "' does not match the network layout");
        }
    }
    return m;
}

void save_packed(const std::string& path, const PackedModel& m) { write_file(path, encode_packed(m)); }

PackedModel load_packed(const std::string& path, int acc_bits) { return decode_packed(read_file(path), path, acc_bits); }

PackedModel load_packed(const std::string& path, const QNetConfig& expect) {
    PackedModel m = load_packed(path);
    if (m.fingerprint != expect.fingerprint()) {
        throw ConfigError("packed model '" + path + "' fingerprint does not match the requested network config");
    }
    return m;
}

// ---------------------------------------------------------------------------

Tensor infer_packed(const PackedModel& m, const Tensor& input) {
    QNet shell(m.config, 0);
    for (Parameter* p : shell.parameters()) {
        auto it = m.blobs.find(p->name);
        if (it != m.blobs.end()) p->value = it->second;
    }
    const LayerExecutor exec = [&](const QConvLayer& l, const Tensor& x) { return run_packed_layer(m.layer(l.name), x); };
    shell.set_executor(&exec);
    Tape tape(false);
    return shell.forward(tape, tape.constant(input)).value();
}

VideoClip infer_packed(const PackedModel& m, const Measurement& y, const MaskSet& masks) {
    Tensor out = infer_packed(m, initial_estimate(y, masks));
    return VideoClip{out.reshaped(Shape{out.dim(1), out.dim(2), out.dim(3)})};
}

// ---------------------------------------------------------------------------

std::vector<BenchRow> kernel_bench(const BenchGeometry& g, int bits, int repetitions, uint64_t seed) {
    if (repetitions <= 0) return {};
    if (bits == 32 || !BitWidth::valid(bits)) throw ConfigError("kernel_bench: bits must be 2, 3, 4 or 8");
    std::mt19937_64 rng(seed);
    const int pad = static_cast<int>(g.kernel / 2);
    const ConvGeom geom{{1, 1, 1}, {pad, pad, pad}};
    Tensor x(Shape{1, g.in_channels, g.t, g.h, g.w});
    for (auto& v : x.data()) v = static_cast<float>(2.0 * uniform01(rng) - 1.0);
    Tensor w(Shape{g.out_channels, g.in_channels, g.kernel, g.kernel, g.kernel});
    for (auto& v : w.data()) v = static_cast<float>((2.0 * uniform01(rng) - 1.0) * 0.1);
    const Tensor bias(Shape{g.out_channels});

    const BitWidth bw(bits);
    PackedLayer l;
    l.name = "bench";
    l.out_channels = g.out_channels;
    l.in_channels = g.in_channels;
    l.kt = l.kh = l.kw = g.kernel;
    l.geom = geom;
    l.w_bits = l.a_bits = bits;
    l.alpha_w = choose_weight_alpha(w, bw, g.in_channels * g.kernel * g.kernel * g.kernel);
    l.alpha_x = 2.0f / static_cast<float>(bw.qn() + bw.qp());
    l.zero = -1.0f + static_cast<float>(bw.qn()) * l.alpha_x;
    l.bias = bias.vec();
    const Tensor wc = fake_quant_raw(w, l.alpha_w, 0.0f, bw);
    Tensor codes(w.shape());
    for (size_t i = 0; i < w.numel(); ++i) codes[i] = quantize_value(w[i], l.alpha_w, 0.0f, bw);
    l.code_count = static_cast<int64_t>(codes.numel());
    l.words = pack_weights(codes, bits);
    l.prepare();
    Tensor xc(x.shape());
    for (size_t i = 0; i < x.numel(); ++i) xc[i] = quantize_value(x[i], l.alpha_x, l.zero, bw);

    const double flops =
        2.0 * static_cast<double>(g.out_channels * g.in_channels * g.kernel * g.kernel * g.kernel * g.t * g.h * g.w);

    auto time_it = [&](auto&& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        for (int i = 0; i < repetitions; ++i) fn();
        const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
        return dt.count() / repetitions;
    };
    std::vector<BenchRow> rows;
    BenchRow fr{"float", 32, flops, bit_adjusted_ops(flops, 32, 32), 0.0, 0.0};
    fr.seconds_per_call = time_it([&] { (void)conv3d_forward(x, wc, &bias, geom); });
    BenchRow ir{"int" + std::to_string(bits), bits, flops, bit_adjusted_ops(flops, bits, bits), 0.0, 0.0};
    ir.seconds_per_call = time_it([&] { (void)int_contract(xc, l); });
    for (BenchRow* r : {&fr, &ir}) r->ops_per_second = r->seconds_per_call > 0.0 ? r->theoretical_ops / r->seconds_per_call : 0.0;
    rows.push_back(fr);
    rows.push_back(ir);
    return rows;
}

}  // namespace qsci
