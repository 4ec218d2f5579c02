#include "qsci/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "qsci/conv.hpp"
#include "qsci/errors.hpp"

namespace qsci {

const Tensor& Var::value() const { return tape_->value(id_); }

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::leaf(Tensor value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = grad_enabled_;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(Parameter& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var(this, it->second);
    Var v = leaf(p.value);
    nodes_.back().param = &p;
    param_ids_.emplace(&p, v.id());
    return v;
}

Var Tape::record(Tensor value, std::vector<int> parents, BackwardFn backward) {
    if (!value.all_finite()) throw NumericError("non-finite value produced in forward pass");
    Node n;
    n.value = std::move(value);
    if (grad_enabled_) {
        n.requires_grad = std::any_of(parents.begin(), parents.end(), [&](int id) { return requires_grad(id); });
        if (n.requires_grad) {
            n.parents = std::move(parents);
            n.backward = std::move(backward);
        }
    }
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(int id, const Tensor& g) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
        n.grad = g;
        n.has_grad = true;
        return;
    }
    for (size_t i = 0; i < g.numel(); ++i) n.grad[i] += g[i];
}

void Tape::accumulate(int id, Tensor&& g) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
        n.grad = std::move(g);
        n.has_grad = true;
        return;
    }
    for (size_t i = 0; i < g.numel(); ++i) n.grad[i] += g[i];
}

void Tape::backward(Var loss) {
    if (consumed_) throw ConfigError("backward: tape already consumed");
    if (loss.valid() && &loss.tape() != this) throw ConfigError("backward: loss belongs to another tape");
    if (loss.value().numel() != 1) {
        throw ConfigError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    if (!requires_grad(loss.id())) throw ConfigError("backward: loss is detached from every trainable leaf");
    consumed_ = true;
    nodes_[static_cast<size_t>(loss.id())].grad = Tensor(loss.shape(), 1.0f);
    nodes_[static_cast<size_t>(loss.id())].has_grad = true;
    for (int id = loss.id(); id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.requires_grad || !n.has_grad) continue;
        if (n.backward) {
            n.backward(*this, n.grad);
        }
        if (n.param) {
            Parameter& p = *n.param;
            if (p.grad.shape() != p.value.shape()) p.grad = Tensor::zeros(p.value.shape());
            for (size_t i = 0; i < n.grad.numel(); ++i) p.grad[i] += n.grad[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

void require_same(const Var& a, const Var& b, const char* op) {
    if (&a.tape() != &b.tape()) throw ConfigError(std::string(op) + ": operands on different tapes");
    if (a.shape() != b.shape()) {
        throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    }
}

template <class F>
Tensor map(const Tensor& a, F f) {
    Tensor out(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
    return out;
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, F f) {
    Tensor out(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

constexpr float kInvSqrt2 = 0.70710678118654752f;
constexpr float kInvSqrt2Pi = 0.39894228040143268f;

}  // namespace

float gelu_value(float x) { return 0.5f * x * (1.0f + std::erf(x * kInvSqrt2)); }

Var add(Var a, Var b) {
    require_same(a, b, "add");
    const int ia = a.id(), ib = b.id();
    return a.tape().record(zip(a.value(), b.value(), std::plus<>()), {ia, ib}, [ia, ib](Tape& t, const Tensor& g) {
        t.accumulate(ia, g);
        t.accumulate(ib, g);
    });
}

Var sub(Var a, Var b) {
    require_same(a, b, "sub");
    const int ia = a.id(), ib = b.id();
    return a.tape().record(zip(a.value(), b.value(), std::minus<>()), {ia, ib}, [ia, ib](Tape& t, const Tensor& g) {
        t.accumulate(ia, g);
        t.accumulate(ib, map(g, [](float v) { return -v; }));
    });
}

Var mul(Var a, Var b) {
    require_same(a, b, "mul");
    const int ia = a.id(), ib = b.id();
    return a.tape().record(zip(a.value(), b.value(), std::multiplies<>()), {ia, ib},
                           [ia, ib](Tape& t, const Tensor& g) {
                               if (t.requires_grad(ia)) t.accumulate(ia, zip(g, t.value(ib), std::multiplies<>()));
                               if (t.requires_grad(ib)) t.accumulate(ib, zip(g, t.value(ia), std::multiplies<>()));
                           });
}

Var div(Var a, Var b) {
    require_same(a, b, "div");
    const int ia = a.id(), ib = b.id();
    return a.tape().record(zip(a.value(), b.value(), std::divides<>()), {ia, ib}, [ia, ib](Tape& t, const Tensor& g) {
        const Tensor& av = t.value(ia);
        const Tensor& bv = t.value(ib);
        if (t.requires_grad(ia)) t.accumulate(ia, zip(g, bv, std::divides<>()));
        if (t.requires_grad(ib)) {
            Tensor gb(bv.shape());
            for (size_t i = 0; i < gb.numel(); ++i) gb[i] = -g[i] * av[i] / (bv[i] * bv[i]);
            t.accumulate(ib, std::move(gb));
        }
    });
}

Var scale(Var a, float s) {
    const int ia = a.id();
    return a.tape().record(map(a.value(), [s](float v) { return v * s; }), {ia}, [ia, s](Tape& t, const Tensor& g) {
        t.accumulate(ia, map(g, [s](float v) { return v * s; }));
    });
}

Var leaky_relu(Var a, float slope) {
    const int ia = a.id();
    return a.tape().record(map(a.value(), [slope](float v) { return v > 0.0f ? v : v * slope; }), {ia},
                           [ia, slope](Tape& t, const Tensor& g) {
                               t.accumulate(ia, zip(g, t.value(ia), [slope](float gv, float x) {
                                                return x > 0.0f ? gv : gv * slope;
                                            }));
                           });
}

Var gelu(Var a) {
    const int ia = a.id();
    return a.tape().record(map(a.value(), gelu_value), {ia}, [ia](Tape& t, const Tensor& g) {
        t.accumulate(ia, zip(g, t.value(ia), [](float gv, float x) {
                         const float cdf = 0.5f * (1.0f + std::erf(x * kInvSqrt2));
                         const float pdf = kInvSqrt2Pi * std::exp(-0.5f * x * x);
                         return gv * (cdf + x * pdf);
                     }));
    });
}

Var clamp(Var a, float lo, float hi) {
    const int ia = a.id();
    return a.tape().record(map(a.value(), [lo, hi](float v) { return std::clamp(v, lo, hi); }), {ia},
                           [ia, lo, hi](Tape& t, const Tensor& g) {
                               t.accumulate(ia, zip(g, t.value(ia), [lo, hi](float gv, float x) {
                                                return (x > lo && x < hi) ? gv : 0.0f;
                                            }));
                           });
}

// ---------------------------------------------------------------------------
// Structural

Var reshape(Var a, Shape shape) {
    const int ia = a.id();
    Shape orig = a.shape();
    return a.tape().record(a.value().reshaped(std::move(shape)), {ia},
                           [ia, orig](Tape& t, const Tensor& g) { t.accumulate(ia, g.reshaped(orig)); });
}

namespace {

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    const int r = x.rank();
    if (static_cast<int>(perm.size()) != r) throw ConfigError("transpose: permutation rank mismatch");
    std::vector<int> seen(static_cast<size_t>(r), 0);
    for (int p : perm) {
        if (p < 0 || p >= r || seen[static_cast<size_t>(p)]++) throw ConfigError("transpose: invalid permutation");
    }
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = x.shape()[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    std::vector<int64_t> in_stride(static_cast<size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i) {
        in_stride[static_cast<size_t>(i)] = in_stride[static_cast<size_t>(i + 1)] * x.shape()[static_cast<size_t>(i + 1)];
    }
    Tensor out(out_shape);
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    for (size_t o = 0; o < out.numel(); ++o) {
        int64_t src = 0;
        for (int i = 0; i < r; ++i) src += idx[static_cast<size_t>(i)] * in_stride[static_cast<size_t>(perm[static_cast<size_t>(i)])];
        out[o] = x[static_cast<size_t>(src)];
        for (int i = r - 1; i >= 0; --i) {
            if (++idx[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
            idx[static_cast<size_t>(i)] = 0;
        }
    }
    return out;
}

}  // namespace

Var transpose(Var a, const std::vector<int>& perm) {
    const int ia = a.id();
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) {
        if (perm[i] < 0 || perm[i] >= static_cast<int>(perm.size())) throw ConfigError("transpose: invalid permutation");
        inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
    }
    return a.tape().record(permute(a.value(), perm), {ia},
                           [ia, inv](Tape& t, const Tensor& g) { t.accumulate(ia, permute(g, inv)); });
}

Var concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw ConfigError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    const int r = static_cast<int>(s0.size());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ConfigError("concat: axis out of range");
    Shape out_shape = s0;
    out_shape[static_cast<size_t>(axis)] = 0;
    std::vector<int> ids;
    std::vector<int64_t> widths;
    for (const Var& p : parts) {
        const Shape& s = p.shape();
        if (static_cast<int>(s.size()) != r) throw ConfigError("concat: rank mismatch");
        for (int i = 0; i < r; ++i) {
            if (i != axis && s[static_cast<size_t>(i)] != s0[static_cast<size_t>(i)]) {
                throw ConfigError("concat: extent mismatch on axis " + std::to_string(i));
            }
        }
        out_shape[static_cast<size_t>(axis)] += s[static_cast<size_t>(axis)];
        ids.push_back(p.id());
        widths.push_back(s[static_cast<size_t>(axis)]);
    }
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
    for (int i = axis + 1; i < r; ++i) inner *= s0[static_cast<size_t>(i)];
    const int64_t total = out_shape[static_cast<size_t>(axis)];
    Tensor out(out_shape);
    int64_t offset = 0;
    for (size_t k = 0; k < parts.size(); ++k) {
        const Tensor& v = parts[k].value();
        const int64_t w = widths[k] * inner;
        for (int64_t o = 0; o < outer; ++o) {
            std::copy_n(v.ptr() + o * w, w, out.ptr() + (o * total + offset) * inner);
        }
        offset += widths[k];
    }
    return parts[0].tape().record(std::move(out), ids, [ids, widths, outer, inner, total](Tape& t, const Tensor& g) {
        int64_t off = 0;
        for (size_t k = 0; k < ids.size(); ++k) {
            if (t.requires_grad(ids[k])) {
                Tensor gk(t.value(ids[k]).shape());
                const int64_t w = widths[k] * inner;
                for (int64_t o = 0; o < outer; ++o) {
                    std::copy_n(g.ptr() + (o * total + off) * inner, w, gk.ptr() + o * w);
                }
                t.accumulate(ids[k], std::move(gk));
            }
            off += widths[k];
        }
    });
}

Var sum(Var a) {
    const int ia = a.id();
    double s = 0.0;
    for (float v : a.value().data()) s += v;
    Shape shape = a.shape();
    return a.tape().record(Tensor::scalar(static_cast<float>(s)), {ia},
                           [ia, shape](Tape& t, const Tensor& g) { t.accumulate(ia, Tensor(shape, g.item())); });
}

Var mean(Var a) {
    const int ia = a.id();
    const size_t n = a.value().numel();
    if (n == 0) throw ConfigError("mean: empty tensor");
    double s = 0.0;
    for (float v : a.value().data()) s += v;
    Shape shape = a.shape();
    return a.tape().record(Tensor::scalar(static_cast<float>(s / static_cast<double>(n))), {ia},
                           [ia, shape, n](Tape& t, const Tensor& g) {
                               t.accumulate(ia, Tensor(shape, g.item() / static_cast<float>(n)));
                           });
}

namespace {

struct AxisSplit {
    int64_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, int& axis) {
    const int r = static_cast<int>(s.size());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ConfigError("axis out of range for shape " + shape_str(s));
    AxisSplit a;
    for (int i = 0; i < axis; ++i) a.outer *= s[static_cast<size_t>(i)];
    a.len = s[static_cast<size_t>(axis)];
    for (int i = axis + 1; i < r; ++i) a.inner *= s[static_cast<size_t>(i)];
    return a;
}

}  // namespace

Tensor softmax_raw(const Tensor& x, int axis) {
    const AxisSplit sp = split_axis(x.shape(), axis);
    Tensor out(x.shape());
    for (int64_t o = 0; o < sp.outer; ++o) {
        for (int64_t i = 0; i < sp.inner; ++i) {
            const float* src = x.ptr() + o * sp.len * sp.inner + i;
            float* dst = out.ptr() + o * sp.len * sp.inner + i;
            float mx = src[0];
            for (int64_t k = 1; k < sp.len; ++k) mx = std::max(mx, src[k * sp.inner]);
            float denom = 0.0f;
            for (int64_t k = 0; k < sp.len; ++k) {
                dst[k * sp.inner] = std::exp(src[k * sp.inner] - mx);
                denom += dst[k * sp.inner];
            }
            for (int64_t k = 0; k < sp.len; ++k) dst[k * sp.inner] /= denom;
        }
    }
    return out;
}

Var softmax(Var a, int axis) {
    const int ia = a.id();
    int ax = axis;
    const AxisSplit sp = split_axis(a.shape(), ax);
    const int out_id = a.tape().size();
    return a.tape().record(softmax_raw(a.value(), axis), {ia}, [ia, sp, out_id](Tape& t, const Tensor& g) {
        const Tensor& y = t.value(out_id);
        Tensor gx(y.shape());
        for (int64_t o = 0; o < sp.outer; ++o) {
            for (int64_t i = 0; i < sp.inner; ++i) {
                const int64_t base = o * sp.len * sp.inner + i;
                float dot = 0.0f;
                for (int64_t k = 0; k < sp.len; ++k) dot += g[static_cast<size_t>(base + k * sp.inner)] * y[static_cast<size_t>(base + k * sp.inner)];
                for (int64_t k = 0; k < sp.len; ++k) {
                    const size_t j = static_cast<size_t>(base + k * sp.inner);
                    gx[j] = y[j] * (g[j] - dot);
                }
            }
        }
        t.accumulate(ia, std::move(gx));
    });
}

Var matmul(Var a, Var b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) throw ConfigError("matmul: operands need rank >= 2");
    const int64_t m = sa[sa.size() - 2], k = sa.back();
    const int64_t kb = sb[sb.size() - 2], n = sb.back();
    if (k != kb) {
        throw ConfigError("matmul: inner extents differ (" + std::to_string(k) + " vs " + std::to_string(kb) + ")");
    }
    const bool shared_b = sb.size() == 2;
    if (!shared_b && !std::equal(sa.begin(), sa.end() - 2, sb.begin(), sb.end() - 2)) {
        throw ConfigError("matmul: batch dims differ " + shape_str(sa) + " vs " + shape_str(sb));
    }
    int64_t batch = 1;
    for (size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
    Shape out_shape(sa.begin(), sa.end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out(out_shape);
    for (int64_t bi = 0; bi < batch; ++bi) {
        gemm(a.value().ptr() + bi * m * k, b.value().ptr() + (shared_b ? 0 : bi * k * n), out.ptr() + bi * m * n, m,
             k, n);
    }
    const int ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {ia, ib}, [=](Tape& t, const Tensor& g) {
        const Tensor& av = t.value(ia);
        const Tensor& bv = t.value(ib);
        if (t.requires_grad(ia)) {
            Tensor ga(av.shape());
            for (int64_t bi = 0; bi < batch; ++bi) {
                gemm_abt_acc(g.ptr() + bi * m * n, bv.ptr() + (shared_b ? 0 : bi * k * n), ga.ptr() + bi * m * k, m,
                             n, k);
            }
            t.accumulate(ia, std::move(ga));
        }
        if (t.requires_grad(ib)) {
            Tensor gb(bv.shape());
            std::vector<float> tmp(static_cast<size_t>(k * n));
            for (int64_t bi = 0; bi < batch; ++bi) {
                float* dst = shared_b ? tmp.data() : gb.ptr() + bi * k * n;
                gemm_atb(av.ptr() + bi * m * k, g.ptr() + bi * m * n, dst, m, k, n);
                if (shared_b) {
                    for (size_t i = 0; i < tmp.size(); ++i) gb[i] += tmp[i];
                }
            }
            t.accumulate(ib, std::move(gb));
        }
    });
}

Var add_channel(Var x, Var bias) {
    const Shape& s = x.shape();
    if (s.size() < 2 || bias.shape() != Shape{s[1]}) {
        throw ConfigError("add_channel: bias " + shape_str(bias.shape()) + " does not match channels of " +
                          shape_str(s));
    }
    const int64_t n = s[0], c = s[1];
    const int64_t inner = static_cast<int64_t>(x.value().numel()) / (n * c);
    Tensor out = x.value();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            const float bv = bias.value()[static_cast<size_t>(ch)];
            float* row = out.ptr() + (i * c + ch) * inner;
            for (int64_t j = 0; j < inner; ++j) row[j] += bv;
        }
    const int ix = x.id(), ib = bias.id();
    return x.tape().record(std::move(out), {ix, ib}, [=](Tape& t, const Tensor& g) {
        t.accumulate(ix, g);
        if (t.requires_grad(ib)) {
            Tensor gb(Shape{c});
            for (int64_t i = 0; i < n; ++i)
                for (int64_t ch = 0; ch < c; ++ch) {
                    double acc = 0.0;
                    const float* row = g.ptr() + (i * c + ch) * inner;
                    for (int64_t j = 0; j < inner; ++j) acc += row[j];
                    gb[static_cast<size_t>(ch)] += static_cast<float>(acc);
                }
            t.accumulate(ib, std::move(gb));
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution

Var conv3d(Var x, Var w, const Var* bias, const ConvGeom& geom) {
    Tensor out = conv3d_forward(x.value(), w.value(), bias ? &bias->value() : nullptr, geom);
    const int ix = x.id(), iw = w.id();
    const int ib = bias ? bias->id() : -1;
    std::vector<int> parents{ix, iw};
    if (bias) parents.push_back(ib);
    return x.tape().record(std::move(out), parents, [=](Tape& t, const Tensor& g) {
        Tensor dx, dw, db;
        const bool need_b = ib >= 0 && t.requires_grad(ib);
        conv3d_backward(t.value(ix), t.value(iw), g, geom, t.requires_grad(ix) ? &dx : nullptr,
                        t.requires_grad(iw) ? &dw : nullptr, need_b ? &db : nullptr);
        if (t.requires_grad(ix)) t.accumulate(ix, std::move(dx));
        if (t.requires_grad(iw)) t.accumulate(iw, std::move(dw));
        if (need_b) t.accumulate(ib, std::move(db));
    });
}

// ---------------------------------------------------------------------------
// Pixel shuffle

Tensor pixel_shuffle_raw(const Tensor& x, int r) {
    if (x.rank() != 5) throw ConfigError("pixel_shuffle: expected [N,C,T,H,W], got " + shape_str(x.shape()));
    if (r < 1 || x.dim(1) % (r * r) != 0) {
        throw ConfigError("pixel_shuffle: channel axis " + std::to_string(x.dim(1)) + " not divisible by r^2");
    }
    const int64_t n = x.dim(0), c = x.dim(1) / (r * r), t = x.dim(2), h = x.dim(3), w = x.dim(4);
    Tensor out(Shape{n, c, t, h * r, w * r});
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < r; ++j) {
                    const int64_t src_c = ch * r * r + i * r + j;
                    for (int64_t tt = 0; tt < t; ++tt)
                        for (int64_t y = 0; y < h; ++y)
                            for (int64_t xx = 0; xx < w; ++xx) {
                                out.ptr()[(((b * c + ch) * t + tt) * h * r + y * r + i) * w * r + xx * r + j] =
                                    x.ptr()[(((b * c * r * r + src_c) * t + tt) * h + y) * w + xx];
                            }
                }
    return out;
}

Tensor pixel_unshuffle_raw(const Tensor& x, int r) {
    if (x.rank() != 5) throw ConfigError("pixel_unshuffle: expected [N,C,T,H,W], got " + shape_str(x.shape()));
    if (r < 1 || x.dim(3) % r != 0 || x.dim(4) % r != 0) {
        throw ConfigError("pixel_unshuffle: spatial axes H/W not divisible by r");
    }
    const int64_t n = x.dim(0), c = x.dim(1), t = x.dim(2), h = x.dim(3) / r, w = x.dim(4) / r;
    Tensor out(Shape{n, c * r * r, t, h, w});
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < r; ++j) {
                    const int64_t dst_c = ch * r * r + i * r + j;
                    for (int64_t tt = 0; tt < t; ++tt)
                        for (int64_t y = 0; y < h; ++y)
                            for (int64_t xx = 0; xx < w; ++xx) {
                                out.ptr()[(((b * c * r * r + dst_c) * t + tt) * h + y) * w + xx] =
                                    x.ptr()[(((b * c + ch) * t + tt) * h * r + y * r + i) * w * r + xx * r + j];
                            }
                }
    return out;
}

Var pixel_shuffle_spatial(Var x, int r) {
    const int ix = x.id();
    return x.tape().record(pixel_shuffle_raw(x.value(), r), {ix},
                           [ix, r](Tape& t, const Tensor& g) { t.accumulate(ix, pixel_unshuffle_raw(g, r)); });
}

Var pixel_unshuffle_spatial(Var x, int r) {
    const int ix = x.id();
    return x.tape().record(pixel_unshuffle_raw(x.value(), r), {ix},
                           [ix, r](Tape& t, const Tensor& g) { t.accumulate(ix, pixel_shuffle_raw(g, r)); });
}

// ---------------------------------------------------------------------------
// Temporal attention

namespace {

struct AttnDims {
    int64_t n, c, t, s, heads, d;
};

AttnDims attn_dims(const Shape& q, int heads) {
    if (q.size() != 5) throw ConfigError("temporal attention: expected [N,C,T,H,W], got " + shape_str(q));
    if (heads < 1 || q[1] % heads != 0) {
        throw ConfigError("temporal attention: channels " + std::to_string(q[1]) + " not divisible by heads " +
                          std::to_string(heads));
    }
    return {q[0], q[1], q[2], q[3] * q[4], heads, q[1] / heads};
}

}  // namespace

Tensor temporal_scores_raw(const Tensor& q, const Tensor& k, int heads, float scale) {
    if (q.shape() != k.shape()) throw ConfigError("temporal_scores: q/k shape mismatch");
    const AttnDims a = attn_dims(q.shape(), heads);
    Tensor out(Shape{a.n, a.heads, a.t, a.t, q.dim(3), q.dim(4)});
    for (int64_t b = 0; b < a.n; ++b)
        for (int64_t h = 0; h < a.heads; ++h)
            for (int64_t t1 = 0; t1 < a.t; ++t1)
                for (int64_t t2 = 0; t2 < a.t; ++t2) {
                    float* dst = out.ptr() + (((b * a.heads + h) * a.t + t1) * a.t + t2) * a.s;
                    for (int64_t c = 0; c < a.d; ++c) {
                        const int64_t ch = h * a.d + c;
                        const float* qp = q.ptr() + ((b * a.c + ch) * a.t + t1) * a.s;
                        const float* kp = k.ptr() + ((b * a.c + ch) * a.t + t2) * a.s;
                        for (int64_t s = 0; s < a.s; ++s) dst[s] += qp[s] * kp[s];
                    }
                    for (int64_t s = 0; s < a.s; ++s) dst[s] *= scale;
                }
    return out;
}

Tensor temporal_mix_raw(const Tensor& p, const Tensor& v, int heads) {
    const AttnDims a = attn_dims(v.shape(), heads);
    if (p.shape() != Shape{a.n, a.heads, a.t, a.t, v.dim(3), v.dim(4)}) {
        throw ConfigError("temporal_mix: probability shape " + shape_str(p.shape()) + " does not match values " +
                          shape_str(v.shape()));
    }
    Tensor out(v.shape());
    for (int64_t b = 0; b < a.n; ++b)
        for (int64_t h = 0; h < a.heads; ++h)
            for (int64_t t1 = 0; t1 < a.t; ++t1)
                for (int64_t t2 = 0; t2 < a.t; ++t2) {
                    const float* pp = p.ptr() + (((b * a.heads + h) * a.t + t1) * a.t + t2) * a.s;
                    for (int64_t c = 0; c < a.d; ++c) {
                        const int64_t ch = h * a.d + c;
                        float* dst = out.ptr() + ((b * a.c + ch) * a.t + t1) * a.s;
                        const float* vp = v.ptr() + ((b * a.c + ch) * a.t + t2) * a.s;
                        for (int64_t s = 0; s < a.s; ++s) dst[s] += pp[s] * vp[s];
                    }
                }
    return out;
}

Var temporal_scores(Var q, Var k, int heads, float scale) {
    const int iq = q.id(), ik = k.id();
    return q.tape().record(temporal_scores_raw(q.value(), k.value(), heads, scale), {iq, ik},
                           [=](Tape& t, const Tensor& g) {
                               const Tensor& qv = t.value(iq);
                               const Tensor& kv = t.value(ik);
                               const AttnDims a = attn_dims(qv.shape(), heads);
                               Tensor gq(qv.shape()), gk(kv.shape());
                               for (int64_t b = 0; b < a.n; ++b)
                                   for (int64_t h = 0; h < a.heads; ++h)
                                       for (int64_t t1 = 0; t1 < a.t; ++t1)
                                           for (int64_t t2 = 0; t2 < a.t; ++t2) {
                                               const float* gp =
                                                   g.ptr() + (((b * a.heads + h) * a.t + t1) * a.t + t2) * a.s;
                                               for (int64_t c = 0; c < a.d; ++c) {
                                                   const int64_t ch = h * a.d + c;
                                                   const int64_t o1 = ((b * a.c + ch) * a.t + t1) * a.s;
                                                   const int64_t o2 = ((b * a.c + ch) * a.t + t2) * a.s;
                                                   for (int64_t s = 0; s < a.s; ++s) {
                                                       gq.ptr()[o1 + s] += scale * gp[s] * kv.ptr()[o2 + s];
                                                       gk.ptr()[o2 + s] += scale * gp[s] * qv.ptr()[o1 + s];
                                                   }
                                               }
                                           }
                               t.accumulate(iq, std::move(gq));
                               t.accumulate(ik, std::move(gk));
                           });
}

Var temporal_mix(Var probs, Var v, int heads) {
    const int ip = probs.id(), iv = v.id();
    return v.tape().record(temporal_mix_raw(probs.value(), v.value(), heads), {ip, iv},
                           [=](Tape& t, const Tensor& g) {
                               const Tensor& pv = t.value(ip);
                               const Tensor& vv = t.value(iv);
                               const AttnDims a = attn_dims(vv.shape(), heads);
                               Tensor gp(pv.shape()), gv(vv.shape());
                               for (int64_t b = 0; b < a.n; ++b)
                                   for (int64_t h = 0; h < a.heads; ++h)
                                       for (int64_t t1 = 0; t1 < a.t; ++t1)
                                           for (int64_t t2 = 0; t2 < a.t; ++t2) {
                                               const int64_t po = (((b * a.heads + h) * a.t + t1) * a.t + t2) * a.s;
                                               for (int64_t c = 0; c < a.d; ++c) {
                                                   const int64_t ch = h * a.d + c;
                                                   const int64_t o1 = ((b * a.c + ch) * a.t + t1) * a.s;
                                                   const int64_t o2 = ((b * a.c + ch) * a.t + t2) * a.s;
                                                   for (int64_t s = 0; s < a.s; ++s) {
                                                       gp.ptr()[po + s] += g.ptr()[o1 + s] * vv.ptr()[o2 + s];
                                                       gv.ptr()[o2 + s] += pv.ptr()[po + s] * g.ptr()[o1 + s];
                                                   }
                                               }
                                           }
                               t.accumulate(ip, std::move(gp));
                               t.accumulate(iv, std::move(gv));
                           });
}

}  // namespace qsci
