#pragma once

#include <cstdint>
#include <vector>

#include "qsci/autodiff.hpp"
#include "qsci/tensor.hpp"

namespace qsci {

/// Resolved extents of a 3-D convolution.
struct ConvDims {
    int64_t n = 0, c = 0, t = 0, h = 0, w = 0;
    int64_t o = 0, kt = 0, kh = 0, kw = 0;
    int64_t to = 0, ho = 0, wo = 0;

    int64_t taps() const { return kt * kh * kw; }
    int64_t k() const { return c * taps(); }
    int64_t in_plane() const { return t * h * w; }
    int64_t out_plane() const { return to * ho * wo; }
};

/// Validates shapes and computes output extents; errors name the offending axis.
ConvDims conv_dims(const Shape& input, const Shape& weight, const ConvGeom& geom);

bool conv_is_pointwise(const ConvDims& d, const ConvGeom& g);

/// Unfolds one sample [C, T, H, W] into cols [C*taps, To*Ho*Wo]; padding reads as 0.
template <class T>
void im2col(const T* in, const ConvDims& d, const ConvGeom& g, T* cols) {
    const int64_t p_out = d.out_plane();
    for (int64_t c = 0; c < d.c; ++c) {
        const T* plane = in + c * d.in_plane();
        for (int64_t a = 0; a < d.kt; ++a)
            for (int64_t b = 0; b < d.kh; ++b)
                for (int64_t e = 0; e < d.kw; ++e) {
                    T* row = cols + ((c * d.kt + a) * d.kh * d.kw + b * d.kw + e) * p_out;
                    int64_t p = 0;
                    for (int64_t ot = 0; ot < d.to; ++ot) {
                        const int64_t it = ot * g.stride[0] - g.padding[0] + a;
                        const bool t_ok = it >= 0 && it < d.t;
                        for (int64_t oh = 0; oh < d.ho; ++oh) {
                            const int64_t ih = oh * g.stride[1] - g.padding[1] + b;
                            const bool h_ok = t_ok && ih >= 0 && ih < d.h;
                            for (int64_t ow = 0; ow < d.wo; ++ow, ++p) {
                                const int64_t iw = ow * g.stride[2] - g.padding[2] + e;
                                row[p] = (h_ok && iw >= 0 && iw < d.w) ? plane[(it * d.h + ih) * d.w + iw] : T(0);
                            }
                        }
                    }
                }
    }
}

/// Accumulates cols back into a sample gradient (adjoint of im2col).
void col2im(const float* cols, const ConvDims& d, const ConvGeom& g, float* in_grad);

/// 0/1 indicator [taps, To*Ho*Wo] of kernel taps that land inside the input.
std::vector<float> conv_valid_mask(const ConvDims& d, const ConvGeom& g);

/// out[O, P] = a[O, K] * b[K, P] (row-major).
void gemm(const float* a, const float* b, float* out, int64_t m, int64_t k, int64_t n);
/// out[M, N] += a[M, K] * b[N, K]^T
void gemm_abt_acc(const float* a, const float* b, float* out, int64_t m, int64_t k, int64_t n);
/// out[K, N] = a[M, K]^T * b[M, N]
void gemm_atb(const float* a, const float* b, float* out, int64_t m, int64_t k, int64_t n);

Tensor conv3d_forward(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvGeom& geom);

/// Any of dx/dw/db may be null. dw/db are overwritten, not accumulated.
void conv3d_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out, const ConvGeom& geom, Tensor* dx,
                     Tensor* dw, Tensor* db);

}  // namespace qsci
