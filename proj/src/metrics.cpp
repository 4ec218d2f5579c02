#include "qsci/metrics.hpp"

#include <array>
#include <cmath>
#include <vector>

#include "qsci/errors.hpp"

namespace qsci {

namespace {

void check_same(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ConfigError(std::string(what) + ": shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    if (a.empty()) throw ConfigError(std::string(what) + ": empty input");
}

constexpr int kWin = 11;

std::array<double, kWin> gaussian_window() {
    std::array<double, kWin> g{};
    double s = 0.0;
    for (int i = 0; i < kWin; ++i) {
        const double d = i - kWin / 2;
        g[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        s += g[i];
    }
    for (auto& v : g) v /= s;
    return g;
}

/// Separable valid-region filter of an [h, w] plane.
std::vector<double> filter_valid(const std::vector<double>& x, int64_t h, int64_t w) {
    static const auto g = gaussian_window();
    const int64_t ho = h - kWin + 1, wo = w - kWin + 1;
    std::vector<double> tmp(static_cast<size_t>(h * wo));
    for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < wo; ++j) {
            double s = 0.0;
            for (int k = 0; k < kWin; ++k) s += g[k] * x[static_cast<size_t>(i * w + j + k)];
            tmp[static_cast<size_t>(i * wo + j)] = s;
        }
    std::vector<double> out(static_cast<size_t>(ho * wo));
    for (int64_t i = 0; i < ho; ++i)
        for (int64_t j = 0; j < wo; ++j) {
            double s = 0.0;
            for (int k = 0; k < kWin; ++k) s += g[k] * tmp[static_cast<size_t>((i + k) * wo + j)];
            out[static_cast<size_t>(i * wo + j)] = s;
        }
    return out;
}

}  // namespace

double mse(const Tensor& a, const Tensor& b) {
    check_same(a, b, "mse");
    double s = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        s += d * d;
    }
    return s / static_cast<double>(a.numel());
}

double psnr(const Tensor& a, const Tensor& b) {
    const double m = mse(a, b);
    if (m == 0.0) return kPsnrCap;
    return 10.0 * std::log10(1.0 / m);
}

double frame_psnr(const Tensor& a, const Tensor& b) {
    check_same(a, b, "psnr");
    if (a.rank() != 3) throw ConfigError("frame_psnr: expected [T,H,W]");
    const int64_t t = a.dim(0), hw = a.dim(1) * a.dim(2);
    double s = 0.0;
    for (int64_t f = 0; f < t; ++f) {
        Tensor fa(Shape{hw}, std::vector<float>(a.ptr() + f * hw, a.ptr() + (f + 1) * hw));
        Tensor fb(Shape{hw}, std::vector<float>(b.ptr() + f * hw, b.ptr() + (f + 1) * hw));
        s += psnr(fa, fb);
    }
    return s / static_cast<double>(t);
}

double ssim_frame(const Tensor& a, const Tensor& b) {
    check_same(a, b, "ssim");
    if (a.rank() != 2) throw ConfigError("ssim_frame: expected [H,W]");
    const int64_t h = a.dim(0), w = a.dim(1);
    if (h < kWin || w < kWin) throw ConfigError("ssim: frames must be at least 11x11");
    const size_t n = a.numel();
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (size_t i = 0; i < n; ++i) {
        x[i] = a[i];
        y[i] = b[i];
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w), my = filter_valid(y, h, w);
    const auto sxx = filter_valid(xx, h, w), syy = filter_valid(yy, h, w), sxy = filter_valid(xy, h, w);
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double total = 0.0;
    for (size_t i = 0; i < mx.size(); ++i) {
        const double vx = sxx[i] - mx[i] * mx[i];
        const double vy = syy[i] - my[i] * my[i];
        const double cxy = sxy[i] - mx[i] * my[i];
        total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) /
                 ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    return total / static_cast<double>(mx.size());
}

double ssim(const Tensor& a, const Tensor& b) {
    check_same(a, b, "ssim");
    if (a.rank() == 2) return ssim_frame(a, b);
    if (a.rank() != 3) throw ConfigError("ssim: expected [T,H,W] or [H,W]");
    const int64_t t = a.dim(0), hw = a.dim(1) * a.dim(2);
    const Shape fs{a.dim(1), a.dim(2)};
    double s = 0.0;
    for (int64_t f = 0; f < t; ++f) {
        Tensor fa(fs, std::vector<float>(a.ptr() + f * hw, a.ptr() + (f + 1) * hw));
        Tensor fb(fs, std::vector<float>(b.ptr() + f * hw, b.ptr() + (f + 1) * hw));
        s += ssim_frame(fa, fb);
    }
    return s / static_cast<double>(t);
}

}  // namespace qsci
