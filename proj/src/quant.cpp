#include "qsci/quant.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "qsci/conv.hpp"
#include "qsci/errors.hpp"

namespace qsci {

BitWidth::BitWidth(int bits) : bits_(bits) {
    if (!valid(bits)) throw ConfigError("unsupported bit-width " + std::to_string(bits) + " (expected 2,3,4,8,32)");
}

ActQuantizer::ActQuantizer(BitWidth b, const std::string& name)
    : bits(b), alpha{name + ".alpha", Tensor::scalar(1.0f), Tensor::scalar(0.0f)},
      zero{name + ".zero", Tensor::scalar(0.0f), Tensor::scalar(0.0f)} {}

void ActQuantizer::set(float alpha_v, float zero_v) {
    alpha.value[0] = std::max(alpha_v, kAlphaFloor);
    zero.value[0] = zero_v;
}

WeightQuantizer::WeightQuantizer(BitWidth b, const std::string& name)
    : bits(b), alpha{name + ".alpha", Tensor::scalar(1.0f), Tensor::scalar(0.0f)} {}

void WeightQuantizer::set(float alpha_v) { alpha.value[0] = std::max(alpha_v, kAlphaFloor); }

float round_half_even(float v) { return std::nearbyint(v); }

float quantize_value(float x, float alpha, float zero, BitWidth bits) {
    if (!std::isfinite(x)) throw NumericError("quantize: non-finite input");
    const float v = (x - zero) / alpha;
    return round_half_even(std::clamp(v, -static_cast<float>(bits.qn()), static_cast<float>(bits.qp())));
}

namespace {

void check_alpha(float alpha) {
    if (!(alpha > 0.0f)) throw ConfigError("quantizer scale must be positive");
}

Tensor quantize_tensor(const Tensor& x, float alpha, float zero, BitWidth bits) {
    if (bits.passthrough()) return x;
    check_alpha(alpha);
    Tensor out(x.shape());
    for (size_t i = 0; i < x.numel(); ++i) out[i] = quantize_value(x[i], alpha, zero, bits);
    return out;
}

Tensor dequantize_tensor(const Tensor& codes, float alpha, float zero, BitWidth bits) {
    if (bits.passthrough()) return codes;
    Tensor out(codes.shape());
    for (size_t i = 0; i < codes.numel(); ++i) out[i] = codes[i] * alpha + zero;
    return out;
}

struct SteGrads {
    Tensor gx;
    double galpha = 0.0;
    double gzero = 0.0;
};

/// Straight-through backward for x_hat = code(x) * alpha + zero.
SteGrads ste_backward(const Tensor& x, float alpha, float zero, BitWidth bits, const Tensor& g_hat, bool need_x) {
    SteGrads r;
    if (need_x) r.gx = Tensor(x.shape());
    const float lo = -static_cast<float>(bits.qn());
    const float hi = static_cast<float>(bits.qp());
    for (size_t i = 0; i < x.numel(); ++i) {
        const float v = (x[i] - zero) / alpha;
        const float g = g_hat[i];
        if (v >= lo && v <= hi) {
            if (need_x) r.gx[i] = g;
            r.galpha += static_cast<double>(g) * (round_half_even(v) - v);
        } else {
            r.galpha += static_cast<double>(g) * (v < lo ? lo : hi);
            r.gzero += g;
        }
    }
    return r;
}

Var fake_quant_impl(Var x, Parameter& alpha_p, Parameter* zero_p, BitWidth bits) {
    if (bits.passthrough()) return x;
    Tape& tape = x.tape();
    Var alpha = tape.param(alpha_p);
    const float a = alpha.value().item();
    const float z = zero_p ? zero_p->value.item() : 0.0f;
    check_alpha(a);
    std::vector<int> parents{x.id(), alpha.id()};
    int iz = -1;
    if (zero_p) {
        Var zv = tape.param(*zero_p);
        iz = zv.id();
        parents.push_back(iz);
    }
    Tensor out = fake_quant_raw(x.value(), a, z, bits);
    const int ix = x.id(), ia = alpha.id();
    return tape.record(std::move(out), parents, [=](Tape& t, const Tensor& g) {
        SteGrads s = ste_backward(t.value(ix), a, z, bits, g, t.requires_grad(ix));
        if (t.requires_grad(ix)) t.accumulate(ix, std::move(s.gx));
        t.accumulate(ia, Tensor::scalar(static_cast<float>(s.galpha)));
        if (iz >= 0) t.accumulate(iz, Tensor::scalar(static_cast<float>(s.gzero)));
    });
}

// Sums of |code| products above this are no longer exact in float.
constexpr double kExactFloatSum = 16777216.0;

using RowMatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// out[M,N] = a[M,K] * b[K,N] over integral floats, exact.
void exact_code_gemm(const float* a, const float* b, float* out, int64_t m, int64_t k, int64_t n, double bound) {
    if (bound < kExactFloatSum) {
        gemm(a, b, out, m, k, n);
        return;
    }
    using RowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    RowMatD ad = Eigen::Map<const RowMatF>(a, m, k).cast<double>();
    RowMatD bd = Eigen::Map<const RowMatF>(b, k, n).cast<double>();
    Eigen::Map<RowMatF>(out, m, n) = (ad * bd).cast<float>();
}

}  // namespace

Tensor act_quantize(const Tensor& x, const ActQuantizer& q) { return quantize_tensor(x, q.a(), q.z(), q.bits); }
Tensor act_dequantize(const Tensor& codes, const ActQuantizer& q) {
    return dequantize_tensor(codes, q.a(), q.z(), q.bits);
}
Tensor weight_quantize(const Tensor& w, const WeightQuantizer& q) { return quantize_tensor(w, q.a(), 0.0f, q.bits); }
Tensor weight_dequantize(const Tensor& codes, const WeightQuantizer& q) {
    return dequantize_tensor(codes, q.a(), 0.0f, q.bits);
}

Tensor fake_quant_raw(const Tensor& x, float alpha, float zero, BitWidth bits) {
    if (bits.passthrough()) return x;
    check_alpha(alpha);
    Tensor out(x.shape());
    for (size_t i = 0; i < x.numel(); ++i) out[i] = quantize_value(x[i], alpha, zero, bits) * alpha + zero;
    return out;
}

Var fake_quant(Var x, ActQuantizer& q) { return fake_quant_impl(x, q.alpha, &q.zero, q.bits); }
Var fake_quant(Var x, WeightQuantizer& q) { return fake_quant_impl(x, q.alpha, nullptr, q.bits); }

Var q_linear(Var x, Var w, ActQuantizer& aq, WeightQuantizer& wq) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.empty() || ws.size() != 2 || xs.back() != ws[1]) {
        throw ConfigError("q_linear: input " + shape_str(xs) + " incompatible with weight " + shape_str(ws));
    }
    const int64_t k = ws[1], n = ws[0];
    const int64_t m = static_cast<int64_t>(x.value().numel()) / k;
    Shape out_shape = xs;
    out_shape.back() = n;

    if (aq.bits.passthrough() || wq.bits.passthrough()) {
        Var xh = fake_quant(x, aq);
        Var wh = fake_quant(w, wq);
        Var flat = reshape(xh, Shape{m, k});
        Var out = matmul(flat, transpose(wh, {1, 0}));
        return reshape(out, out_shape);
    }

    Tape& tape = x.tape();
    Var alpha_x = tape.param(aq.alpha);
    Var zero_x = tape.param(aq.zero);
    Var alpha_w = tape.param(wq.alpha);
    const float ax = aq.a(), z = aq.z(), aw = wq.a();
    check_alpha(ax);
    check_alpha(aw);
    const Tensor xc = act_quantize(x.value(), aq);
    const Tensor wc = weight_quantize(w.value(), wq);
    Tensor wct(Shape{k, n});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < k; ++j) wct.ptr()[j * n + i] = wc.ptr()[i * k + j];
    Tensor acc(Shape{m, n});
    exact_code_gemm(xc.ptr(), wct.ptr(), acc.ptr(), m, k, n,
                    static_cast<double>(k) * aq.bits.qn() * wq.bits.qn());
    std::vector<float> corr(static_cast<size_t>(n), 0.0f);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < k; ++j) corr[static_cast<size_t>(i)] += wc.ptr()[i * k + j];
    Tensor out(out_shape);
    for (int64_t r = 0; r < m; ++r)
        for (int64_t i = 0; i < n; ++i) {
            out.ptr()[r * n + i] = rescale_accumulator(acc.ptr()[r * n + i], corr[static_cast<size_t>(i)], ax, z, aw);
        }

    const int ix = x.id(), iw = w.id(), iax = alpha_x.id(), iz = zero_x.id(), iaw = alpha_w.id();
    const BitWidth ab = aq.bits, wb = wq.bits;
    return tape.record(std::move(out), {ix, iw, iax, iz, iaw}, [=](Tape& t, const Tensor& g) {
        const Tensor xh = fake_quant_raw(t.value(ix), ax, z, ab);
        const Tensor wh = fake_quant_raw(t.value(iw), aw, 0.0f, wb);
        Tensor gxh(Shape{m, k}), gwh(Shape{n, k});
        gemm(g.ptr(), wh.ptr(), gxh.ptr(), m, n, k);
        gemm_atb(g.ptr(), xh.ptr(), gwh.ptr(), m, n, k);
        SteGrads sx = ste_backward(t.value(ix), ax, z, ab, gxh.reshaped(t.value(ix).shape()), t.requires_grad(ix));
        SteGrads sw = ste_backward(t.value(iw), aw, 0.0f, wb, gwh, t.requires_grad(iw));
        if (t.requires_grad(ix)) t.accumulate(ix, std::move(sx.gx));
        if (t.requires_grad(iw)) t.accumulate(iw, std::move(sw.gx));
        t.accumulate(iax, Tensor::scalar(static_cast<float>(sx.galpha)));
        t.accumulate(iz, Tensor::scalar(static_cast<float>(sx.gzero)));
        t.accumulate(iaw, Tensor::scalar(static_cast<float>(sw.galpha)));
    });
}

Var q_conv3d(Var x, Var w, const Var* bias, ActQuantizer& aq, WeightQuantizer& wq, const ConvGeom& geom) {
    if (aq.bits.passthrough() || wq.bits.passthrough()) {
        return conv3d(fake_quant(x, aq), fake_quant(w, wq), bias, geom);
    }
    const ConvDims d = conv_dims(x.shape(), w.shape(), geom);
    if (bias && bias->shape() != Shape{d.o}) throw ConfigError("q_conv3d: bias must be [O]");
    Tape& tape = x.tape();
    Var alpha_x = tape.param(aq.alpha);
    Var zero_x = tape.param(aq.zero);
    Var alpha_w = tape.param(wq.alpha);
    const float ax = aq.a(), z = aq.z(), aw = wq.a();
    check_alpha(ax);
    check_alpha(aw);

    const Tensor xc = act_quantize(x.value(), aq);
    const Tensor wc = weight_quantize(w.value(), wq);
    const int64_t k = d.k(), p = d.out_plane(), taps = d.taps();
    const bool pointwise = conv_is_pointwise(d, geom);
    const double bound = static_cast<double>(k) * aq.bits.qn() * wq.bits.qn();

    // corr[o, p] = sum of weight codes over taps that land inside the input.
    std::vector<float> wsum(static_cast<size_t>(d.o * taps), 0.0f);
    for (int64_t o = 0; o < d.o; ++o)
        for (int64_t c = 0; c < d.c; ++c)
            for (int64_t tp = 0; tp < taps; ++tp) wsum[static_cast<size_t>(o * taps + tp)] += wc.ptr()[(o * d.c + c) * taps + tp];
    std::vector<float> corr(static_cast<size_t>(d.o * p));
    {
        const std::vector<float> valid = conv_valid_mask(d, geom);
        gemm(wsum.data(), valid.data(), corr.data(), d.o, taps, p);
    }

    Tensor out(Shape{d.n, d.o, d.to, d.ho, d.wo});
    std::vector<float> cols(pointwise ? 0 : static_cast<size_t>(k * p));
    std::vector<float> acc(static_cast<size_t>(d.o * p));
    for (int64_t n = 0; n < d.n; ++n) {
        const float* src = xc.ptr() + n * d.c * d.in_plane();
        if (!pointwise) {
            im2col(src, d, geom, cols.data());
            src = cols.data();
        }
        exact_code_gemm(wc.ptr(), src, acc.data(), d.o, k, p, bound);
        float* dst = out.ptr() + n * d.o * p;
        for (int64_t o = 0; o < d.o; ++o) {
            const float bv = bias ? bias->value()[static_cast<size_t>(o)] : 0.0f;
            for (int64_t i = 0; i < p; ++i) {
                const size_t j = static_cast<size_t>(o * p + i);
                dst[j] = rescale_accumulator(acc[j], corr[j], ax, z, aw) + bv;
            }
        }
    }

    const int ix = x.id(), iw = w.id(), iax = alpha_x.id(), iz = zero_x.id(), iaw = alpha_w.id();
    const int ib = bias ? bias->id() : -1;
    std::vector<int> parents{ix, iw, iax, iz, iaw};
    if (ib >= 0) parents.push_back(ib);
    const BitWidth ab = aq.bits, wb = wq.bits;
    return tape.record(std::move(out), parents, [=](Tape& t, const Tensor& g) {
        const Tensor xh = fake_quant_raw(t.value(ix), ax, z, ab);
        const Tensor wh = fake_quant_raw(t.value(iw), aw, 0.0f, wb);
        Tensor gxh, gwh, gb;
        const bool need_b = ib >= 0 && t.requires_grad(ib);
        conv3d_backward(xh, wh, g, geom, &gxh, &gwh, need_b ? &gb : nullptr);
        SteGrads sx = ste_backward(t.value(ix), ax, z, ab, gxh, t.requires_grad(ix));
        SteGrads sw = ste_backward(t.value(iw), aw, 0.0f, wb, gwh, t.requires_grad(iw));
        if (t.requires_grad(ix)) t.accumulate(ix, std::move(sx.gx));
        if (t.requires_grad(iw)) t.accumulate(iw, std::move(sw.gx));
        t.accumulate(iax, Tensor::scalar(static_cast<float>(sx.galpha)));
        t.accumulate(iz, Tensor::scalar(static_cast<float>(sx.gzero)));
        t.accumulate(iaw, Tensor::scalar(static_cast<float>(sw.galpha)));
        if (need_b) t.accumulate(ib, std::move(gb));
    });
}

}  // namespace qsci
