#include "qsci/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "qsci/container.hpp"
#include "qsci/errors.hpp"
#include "qsci/metrics.hpp"
#include "qsci/parallel.hpp"

namespace qsci {

void TrainConfig::validate() const {
    if (!(lr_phase1 > 0.0) || !(lr_phase2 > 0.0)) throw ConfigError("learning rates must be positive");
    if (epochs_phase1 < 0 || epochs_phase2 < 0) throw ConfigError("epoch counts must be non-negative");
    if (batch < 1) throw ConfigError("train.batch must be >= 1");
    if (crop < 12 || crop % 2 != 0) throw ConfigError("train.crop must be even and >= 12");
    if (!(scale_min > 0.0) || scale_max < scale_min) throw ConfigError("train.scale_min/scale_max invalid");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0)) {
        throw ConfigError("Adam hyper-parameters out of range");
    }
    if (calib_clips < 1 || probe_clips < 1) throw ConfigError("train.calib_clips and train.probe_clips must be >= 1");
}

void DataConfig::validate() const {
    if (count < 0 || val_count < 0) throw ConfigError("data counts must be non-negative");
    if (source_size < 1) throw ConfigError("data.source_size must be positive");
    if (!(mask_density > 0.0 && mask_density < 1.0)) throw ConfigError("data.mask_density must lie in (0, 1)");
    if (noise_sigma < 0.0) throw ConfigError("data.noise_sigma must be non-negative");
    if (objects < 0) throw ConfigError("data.objects must be non-negative");
}

Dataset assemble_dataset(std::vector<VideoClip> train, std::vector<VideoClip> val, MaskSet masks, double noise_sigma,
                         uint64_t noise_seed, int probe_clips) {
    Dataset d;
    d.masks = std::move(masks);
    d.noise_sigma = noise_sigma;
    d.train = std::move(train);
    d.val = std::move(val);
    const int64_t crop = d.masks.height();
    for (size_t i = 0; i < d.val.size(); ++i) {
        d.val_meas.push_back(encode(d.val[i], d.masks, noise_sigma, noise_seed + 2 * i));
    }
    const size_t probes = std::min(d.train.size(), static_cast<size_t>(probe_clips));
    for (size_t i = 0; i < probes; ++i) {
        d.probe.push_back(center_crop(d.train[i], crop));
        d.probe_meas.push_back(encode(d.probe.back(), d.masks, noise_sigma, noise_seed + 2 * i + 1));
    }
    return d;
}

Dataset make_dataset(const DataConfig& data, int64_t frames, int crop, int probe_clips) {
    data.validate();
    if (data.source_size < crop) throw ConfigError("data.source_size must be >= train.crop");
    std::vector<VideoClip> train, val;
    for (int i = 0; i < data.count; ++i) {
        train.push_back(synth_video(data.seed * 1000003ull + static_cast<uint64_t>(i), frames, data.source_size,
                                    data.source_size, data.objects));
    }
    for (int i = 0; i < data.val_count; ++i) {
        val.push_back(synth_video(data.val_seed * 1000003ull + static_cast<uint64_t>(i), frames, crop, crop, data.objects));
    }
    return assemble_dataset(std::move(train), std::move(val), generate_masks(data.mask_seed, frames, crop, crop, data.mask_density),
                            data.noise_sigma, data.seed ^ 0x5eedull, probe_clips);
}

// ---------------------------------------------------------------------------

Var mse_loss(Var pred, Var target) {
    if (pred.shape() != target.shape()) {
        throw ConfigError("mse_loss: shapes differ " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    }
    Var d = sub(pred, target);
    return mean(mul(d, d));
}

double mse_loss(const VideoClip& pred, const VideoClip& gt) { return mse(pred.frames, gt.frames); }

void adam_step(const std::vector<Parameter*>& params, AdamState& state, double lr, const TrainConfig& cfg) {
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (Parameter* p : params) {
        if (p->grad.shape() != p->value.shape()) continue;
        auto [it, fresh] = state.moments.try_emplace(p->name);
        AdamMoments& mo = it->second;
        if (fresh) {
            mo.m = Tensor::zeros(p->value.shape());
            mo.v = Tensor::zeros(p->value.shape());
        }
        for (size_t i = 0; i < p->value.numel(); ++i) {
            const double g = p->grad[i];
            const double m = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * g;
            const double v = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * g * g;
            mo.m[i] = static_cast<float>(m);
            mo.v[i] = static_cast<float>(v);
            const double step = lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps);
            p->value[i] = static_cast<float>(p->value[i] - step);
        }
    }
}

// ---------------------------------------------------------------------------

VideoClip flip_clip(const VideoClip& clip, bool horizontal, bool vertical) {
    const int64_t t = clip.frames.dim(0), h = clip.frames.dim(1), w = clip.frames.dim(2);
    Tensor out(clip.frames.shape());
    for (int64_t f = 0; f < t; ++f)
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j) {
                const int64_t si = vertical ? h - 1 - i : i, sj = horizontal ? w - 1 - j : j;
                out.ptr()[(f * h + i) * w + j] = clip.frames.ptr()[(f * h + si) * w + sj];
            }
    return VideoClip{std::move(out)};
}

namespace {

VideoClip crop_at(const VideoClip& clip, int64_t top, int64_t left, int64_t size) {
    const int64_t t = clip.frames.dim(0), h = clip.frames.dim(1), w = clip.frames.dim(2);
    if (top < 0 || left < 0 || top + size > h || left + size > w) throw ConfigError("crop window outside the clip");
    Tensor out(Shape{t, size, size});
    for (int64_t f = 0; f < t; ++f)
        for (int64_t i = 0; i < size; ++i)
            for (int64_t j = 0; j < size; ++j)
                out.ptr()[(f * size + i) * size + j] = clip.frames.ptr()[(f * h + top + i) * w + left + j];
    return VideoClip{std::move(out)};
}

}  // namespace

VideoClip center_crop(const VideoClip& clip, int64_t size) {
    return crop_at(clip, (clip.frames.dim(1) - size) / 2, (clip.frames.dim(2) - size) / 2, size);
}

VideoClip rescale_clip(const VideoClip& clip, int64_t oh, int64_t ow) {
    const int64_t t = clip.frames.dim(0), h = clip.frames.dim(1), w = clip.frames.dim(2);
    Tensor out(Shape{t, oh, ow});
    const double sy = static_cast<double>(h) / static_cast<double>(oh);
    const double sx = static_cast<double>(w) / static_cast<double>(ow);
    for (int64_t i = 0; i < oh; ++i) {
        const double y = std::clamp((static_cast<double>(i) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
        const int64_t y0 = static_cast<int64_t>(y), y1 = std::min(y0 + 1, h - 1);
        const double fy = y - static_cast<double>(y0);
        for (int64_t j = 0; j < ow; ++j) {
            const double x = std::clamp((static_cast<double>(j) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
            const int64_t x0 = static_cast<int64_t>(x), x1 = std::min(x0 + 1, w - 1);
            const double fx = x - static_cast<double>(x0);
            for (int64_t f = 0; f < t; ++f) {
                const float* s = clip.frames.ptr() + f * h * w;
                const double v = (1 - fy) * ((1 - fx) * s[y0 * w + x0] + fx * s[y0 * w + x1]) +
                                 fy * ((1 - fx) * s[y1 * w + x0] + fx * s[y1 * w + x1]);
                out.ptr()[(f * oh + i) * ow + j] = std::clamp(static_cast<float>(v), 0.0f, 1.0f);
            }
        }
    }
    return VideoClip{std::move(out)};
}

VideoClip augment(const VideoClip& clip, const AugmentFlags& flags, std::mt19937_64& rng) {
    VideoClip out = clip;
    if (flags.scale) {
        const double s = flags.scale_min + (flags.scale_max - flags.scale_min) * uniform01(rng);
        const int64_t h = out.frames.dim(1), w = out.frames.dim(2);
        int64_t nh = std::llround(static_cast<double>(h) * s), nw = std::llround(static_cast<double>(w) * s);
        if (flags.crop) {
            nh = std::max<int64_t>(nh, flags.crop_size);
            nw = std::max<int64_t>(nw, flags.crop_size);
        }
        out = rescale_clip(out, std::max<int64_t>(nh, 1), std::max<int64_t>(nw, 1));
    }
    if (flags.crop) {
        const int64_t h = out.frames.dim(1), w = out.frames.dim(2);
        if (h < flags.crop_size || w < flags.crop_size) throw ConfigError("augment: clip smaller than crop size");
        const int64_t top = static_cast<int64_t>(uniform01(rng) * static_cast<double>(h - flags.crop_size + 1));
        const int64_t left = static_cast<int64_t>(uniform01(rng) * static_cast<double>(w - flags.crop_size + 1));
        out = crop_at(out, top, left, flags.crop_size);
    }
    if (flags.flip) {
        const bool hf = uniform01(rng) < 0.5;
        const bool vf = uniform01(rng) < 0.5;
        if (hf || vf) out = flip_clip(out, hf, vf);
    }
    return out;
}

// ---------------------------------------------------------------------------

EvalResult evaluate(QNet& net, const MaskSet& masks, const std::vector<VideoClip>& gt,
                    const std::vector<Measurement>& meas, bool keep_recon) {
    if (gt.size() != meas.size()) throw ConfigError("evaluate: clip and measurement counts differ");
    EvalResult r;
    r.clips.resize(gt.size());
    std::vector<VideoClip> recon(gt.size());
    parallel_for(static_cast<int64_t>(gt.size()), [&](int64_t b, int64_t e) {
        for (int64_t i = b; i < e; ++i) {
            const size_t k = static_cast<size_t>(i);
            recon[k] = net.reconstruct(meas[k], masks);
            r.clips[k] = {frame_psnr(recon[k].frames, gt[k].frames), ssim(recon[k].frames, gt[k].frames)};
        }
    });
    for (const auto& c : r.clips) {
        r.mean_psnr += c.psnr;
        r.mean_ssim += c.ssim;
    }
    if (!r.clips.empty()) {
        r.mean_psnr /= static_cast<double>(r.clips.size());
        r.mean_ssim /= static_cast<double>(r.clips.size());
    }
    if (keep_recon) r.recon = std::move(recon);
    return r;
}

double probe_loss(QNet& net, const Dataset& data) {
    if (data.probe.empty()) return 0.0;
    double s = 0.0;
    for (size_t i = 0; i < data.probe.size(); ++i) s += mse_loss(net.reconstruct(data.probe_meas[i], data.masks), data.probe[i]);
    return s / static_cast<double>(data.probe.size());
}

namespace {

EpochLog evaluate_epoch(QNet& net, const Dataset& data, int epoch, int phase, double lr, double train_loss) {
    EpochLog row;
    row.epoch = epoch;
    row.phase = phase;
    row.lr = lr;
    row.probe_loss = probe_loss(net, data);
    row.train_loss = epoch == 0 ? row.probe_loss : train_loss;
    if (!data.val.empty()) {
        const EvalResult ev = evaluate(net, data.masks, data.val, data.val_meas);
        row.val_psnr = ev.mean_psnr;
        row.val_ssim = ev.mean_ssim;
    }
    return row;
}

}  // namespace

TrainResult train(QNet& net, const TrainConfig& cfg, const Dataset& data,
                  const std::function<void(const EpochLog&)>& on_epoch) {
    cfg.validate();
    if (data.masks.frames() != net.config().cr) throw ConfigError("dataset frame count differs from net.cr");
    if (data.masks.height() != cfg.crop || data.masks.width() != cfg.crop) {
        throw ConfigError("dataset masks must be train.crop x train.crop");
    }
    TrainResult result;
    auto emit = [&](const EpochLog& row) {
        if (!std::isfinite(row.train_loss) || !std::isfinite(row.probe_loss)) {
            throw NumericError("non-finite loss at epoch " + std::to_string(row.epoch));
        }
        result.log.push_back(row);
        if (on_epoch) on_epoch(row);
    };
    emit(evaluate_epoch(net, data, 0, 0, 0.0, 0.0));
    if (data.train.empty()) return result;

    std::mt19937_64 rng(cfg.seed);
    AdamState adam;
    const AugmentFlags flags{cfg.aug_crop, cfg.aug_flip, cfg.aug_scale, cfg.crop, cfg.scale_min, cfg.scale_max};
    const std::vector<Parameter*> params = net.parameters();
    std::vector<size_t> order(data.train.size());
    int epoch = 0;
    for (int phase = 1; phase <= 2; ++phase) {
        const double lr = phase == 1 ? cfg.lr_phase1 : cfg.lr_phase2;
        const int epochs = phase == 1 ? cfg.epochs_phase1 : cfg.epochs_phase2;
        for (int e = 0; e < epochs; ++e) {
            ++epoch;
            std::iota(order.begin(), order.end(), size_t{0});
            std::shuffle(order.begin(), order.end(), rng);
            double loss_sum = 0.0;
            int steps = 0;
            for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg.batch)) {
                const size_t end = std::min(order.size(), b + static_cast<size_t>(cfg.batch));
                std::vector<Tensor> inputs;
                std::vector<float> targets;
                for (size_t i = b; i < end; ++i) {
                    VideoClip clip = augment(data.train[order[i]], flags, rng);
                    if (clip.frames.dim(1) != cfg.crop || clip.frames.dim(2) != cfg.crop) clip = center_crop(clip, cfg.crop);
                    const uint64_t noise_seed = rng();
                    inputs.push_back(initial_estimate(encode(clip, data.masks, data.noise_sigma, noise_seed), data.masks));
                    targets.insert(targets.end(), clip.frames.data().begin(), clip.frames.data().end());
                }
                const int64_t n = static_cast<int64_t>(inputs.size());
                Tape tape;
                Var pred = net.forward(tape, tape.constant(stack_batch(inputs)));
                Var target = tape.constant(Tensor(Shape{n, net.config().cr, cfg.crop, cfg.crop}, std::move(targets)));
                Var loss = mse_loss(pred, target);
                net.zero_grad();
                tape.backward(loss);
                adam_step(params, adam, lr, cfg);
                net.clamp_quantizers();
                loss_sum += loss.value().item();
                ++steps;
            }
            emit(evaluate_epoch(net, data, epoch, phase, lr, loss_sum / steps));
        }
    }
    return result;
}

std::string loss_csv(const std::vector<EpochLog>& log) {
    std::string out = "epoch,phase,lr,train_loss,probe_loss,val_psnr,val_ssim\n";
    char buf[256];
    for (const auto& r : log) {
        std::snprintf(buf, sizeof buf, "%d,%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.phase, r.lr, r.train_loss,
                      r.probe_loss, r.val_psnr, r.val_ssim);
        out += buf;
    }
    return out;
}

void init_quantized(QNet& net, const Archive& fp_ckpt, const Dataset& data, int calib_clips) {
    init_from_checkpoint(net, fp_ckpt);
    std::vector<Tensor> inputs;
    const size_t n = std::min(data.probe.size(), static_cast<size_t>(calib_clips));
    for (size_t i = 0; i < n; ++i) inputs.push_back(initial_estimate(data.probe_meas[i], data.masks));
    net.calibrate(inputs);
}

}  // namespace qsci
