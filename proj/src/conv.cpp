#include "qsci/conv.hpp"

#include <Eigen/Core>
#include <string>

#include "qsci/errors.hpp"

namespace qsci {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

const char* kAxisNames[3] = {"T", "H", "W"};

}  // namespace

ConvDims conv_dims(const Shape& input, const Shape& weight, const ConvGeom& geom) {
    if (input.size() != 5) throw ConfigError("conv3d: input must be [N,C,T,H,W], got " + shape_str(input));
    if (weight.size() != 5) throw ConfigError("conv3d: weight must be [O,C,kt,kh,kw], got " + shape_str(weight));
    if (input[1] != weight[1]) {
        throw ConfigError("conv3d: channel axis mismatch, input C=" + std::to_string(input[1]) +
                          " weight C=" + std::to_string(weight[1]));
    }
    ConvDims d;
    d.n = input[0];
    d.c = input[1];
    d.t = input[2];
    d.h = input[3];
    d.w = input[4];
    d.o = weight[0];
    d.kt = weight[2];
    d.kh = weight[3];
    d.kw = weight[4];
    const int64_t in_ext[3] = {d.t, d.h, d.w};
    const int64_t k_ext[3] = {d.kt, d.kh, d.kw};
    int64_t out_ext[3];
    for (int i = 0; i < 3; ++i) {
        if (geom.stride[i] < 1 || geom.padding[i] < 0) {
            throw ConfigError(std::string("conv3d: invalid stride/padding on axis ") + kAxisNames[i]);
        }
        const int64_t span = in_ext[i] + 2 * geom.padding[i] - k_ext[i];
        if (k_ext[i] < 1 || span < 0) {
            throw ConfigError(std::string("conv3d: kernel larger than padded input on axis ") + kAxisNames[i]);
        }
        out_ext[i] = span / geom.stride[i] + 1;
    }
    d.to = out_ext[0];
    d.ho = out_ext[1];
    d.wo = out_ext[2];
    return d;
}

bool conv_is_pointwise(const ConvDims& d, const ConvGeom& g) {
    return d.taps() == 1 && g.stride == std::array<int, 3>{1, 1, 1} && g.padding == std::array<int, 3>{0, 0, 0};
}

void col2im(const float* cols, const ConvDims& d, const ConvGeom& g, float* in_grad) {
    const int64_t p_out = d.out_plane();
    for (int64_t c = 0; c < d.c; ++c) {
        float* plane = in_grad + c * d.in_plane();
        for (int64_t a = 0; a < d.kt; ++a)
            for (int64_t b = 0; b < d.kh; ++b)
                for (int64_t e = 0; e < d.kw; ++e) {
                    const float* row = cols + ((c * d.kt + a) * d.kh * d.kw + b * d.kw + e) * p_out;
                    int64_t p = 0;
                    for (int64_t ot = 0; ot < d.to; ++ot) {
                        const int64_t it = ot * g.stride[0] - g.padding[0] + a;
                        const bool t_ok = it >= 0 && it < d.t;
                        for (int64_t oh = 0; oh < d.ho; ++oh) {
                            const int64_t ih = oh * g.stride[1] - g.padding[1] + b;
                            const bool h_ok = t_ok && ih >= 0 && ih < d.h;
                            for (int64_t ow = 0; ow < d.wo; ++ow, ++p) {
                                const int64_t iw = ow * g.stride[2] - g.padding[2] + e;
                                if (h_ok && iw >= 0 && iw < d.w) plane[(it * d.h + ih) * d.w + iw] += row[p];
                            }
                        }
                    }
                }
    }
}

std::vector<float> conv_valid_mask(const ConvDims& d, const ConvGeom& g) {
    ConvDims one = d;
    one.c = 1;
    std::vector<float> ones(static_cast<size_t>(d.in_plane()), 1.0f);
    std::vector<float> mask(static_cast<size_t>(d.taps() * d.out_plane()));
    im2col(ones.data(), one, g, mask.data());
    return mask;
}

void gemm(const float* a, const float* b, float* out, int64_t m, int64_t k, int64_t n) {
    MMap(out, m, n).noalias() = CMap(a, m, k) * CMap(b, k, n);
}

void gemm_abt_acc(const float* a, const float* b, float* out, int64_t m, int64_t k, int64_t n) {
    MMap(out, m, n).noalias() += CMap(a, m, k) * CMap(b, n, k).transpose();
}

void gemm_atb(const float* a, const float* b, float* out, int64_t m, int64_t k, int64_t n) {
    MMap(out, k, n).noalias() = CMap(a, m, k).transpose() * CMap(b, m, n);
}

Tensor conv3d_forward(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvGeom& geom) {
    const ConvDims d = conv_dims(x.shape(), w.shape(), geom);
    if (bias && (bias->rank() != 1 || bias->dim(0) != d.o)) {
        throw ConfigError("conv3d: bias must be [O], got " + shape_str(bias->shape()));
    }
    Tensor out(Shape{d.n, d.o, d.to, d.ho, d.wo});
    const int64_t k = d.k();
    const int64_t p = d.out_plane();
    const bool pointwise = conv_is_pointwise(d, geom);
    std::vector<float> cols(pointwise ? 0 : static_cast<size_t>(k * p));
    for (int64_t n = 0; n < d.n; ++n) {
        const float* src = x.ptr() + n * d.c * d.in_plane();
        if (!pointwise) {
            im2col(src, d, geom, cols.data());
            src = cols.data();
        }
        float* dst = out.ptr() + n * d.o * p;
        gemm(w.ptr(), src, dst, d.o, k, p);
        if (bias) {
            for (int64_t o = 0; o < d.o; ++o) {
                const float bv = (*bias)[static_cast<size_t>(o)];
                float* row = dst + o * p;
                for (int64_t i = 0; i < p; ++i) row[i] += bv;
            }
        }
    }
    return out;
}

void conv3d_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out, const ConvGeom& geom, Tensor* dx,
                     Tensor* dw, Tensor* db) {
    const ConvDims d = conv_dims(x.shape(), w.shape(), geom);
    const int64_t k = d.k();
    const int64_t p = d.out_plane();
    const bool pointwise = conv_is_pointwise(d, geom);
    std::vector<float> cols(pointwise ? 0 : static_cast<size_t>(k * p));
    std::vector<float> dcols(pointwise ? 0 : static_cast<size_t>(k * p));
    if (dx) *dx = Tensor::zeros(x.shape());
    if (dw) *dw = Tensor::zeros(w.shape());
    if (db) *db = Tensor::zeros(Shape{d.o});
    for (int64_t n = 0; n < d.n; ++n) {
        const float* g = grad_out.ptr() + n * d.o * p;
        const float* src = x.ptr() + n * d.c * d.in_plane();
        if (dw) {
            if (!pointwise) {
                im2col(src, d, geom, cols.data());
                src = cols.data();
            }
            gemm_abt_acc(g, src, dw->ptr(), d.o, p, k);
        }
        if (dx) {
            float* dst = dx->ptr() + n * d.c * d.in_plane();
            if (pointwise) {
                gemm_atb(w.ptr(), g, dst, d.o, k, p);
            } else {
                gemm_atb(w.ptr(), g, dcols.data(), d.o, k, p);
                col2im(dcols.data(), d, geom, dst);
            }
        }
        if (db) {
            for (int64_t o = 0; o < d.o; ++o) {
                double s = 0.0;
                for (int64_t i = 0; i < p; ++i) s += g[o * p + i];
                (*db)[static_cast<size_t>(o)] += static_cast<float>(s);
            }
        }
    }
}

}  // namespace qsci
