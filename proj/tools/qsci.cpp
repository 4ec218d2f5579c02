// qsci: command-line front end for data generation, training, evaluation,
// ablation, integer packing and efficiency reports.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include "qsci/ablation.hpp"
#include "qsci/accounting.hpp"
#include "qsci/config.hpp"
#include "qsci/container.hpp"
#include "qsci/errors.hpp"
#include "qsci/metrics.hpp"
#include "qsci/packed.hpp"
#include "qsci/train.hpp"

namespace fs = std::filesystem;
using namespace qsci;

namespace {

struct Globals {
    std::string workdir = ".";
    std::string config_path;
    std::map<std::string, std::string> overrides;
};

std::string resolve(const Globals& g, const std::string& p) {
    if (p.empty()) return p;
    const fs::path path(p);
    return path.is_absolute() ? path.string() : (fs::path(g.workdir) / path).string();
}

ExperimentConfig load_config(const Globals& g) {
    ExperimentConfig c;
    if (!g.config_path.empty()) c = ExperimentConfig::parse(read_file(resolve(g, g.config_path)));
    for (const auto& [k, v] : g.overrides) c.set(k, v);
    c.validate();
    return c;
}

std::string out_path(const Globals& g, const ExperimentConfig& c, const std::string& name) {
    return (fs::path(resolve(g, c.run.out)) / name).string();
}

std::string hex64(uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string record_name(const char* prefix, size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s.%06zu", prefix, i);
    return buf;
}

// ---------------------------------------------------------------------------
// On-disk datasets written by gen-data.

struct DiskDataset {
    MaskSet masks;
    std::vector<VideoClip> clips;
    std::vector<Measurement> meas;
};

Archive data_archive(const std::string& config_text) {
    Archive a;
    a.magic = std::string(kDataMagic);
    a.fingerprint = fnv1a64(config_text);
    a.config_text = config_text;
    return a;
}

DiskDataset load_dataset_dir(const std::string& dir) {
    const Archive masks = load_archive((fs::path(dir) / "masks.qsci").string(), kDataMagic);
    const Archive clips = load_archive((fs::path(dir) / "clips.qsci").string(), kDataMagic);
    const Archive meas = load_archive((fs::path(dir) / "measurements.qsci").string(), kDataMagic);
    DiskDataset d;
    d.masks = MaskSet::from_tensor(masks.at("masks"));
    if (clips.records.size() != meas.records.size()) throw DataError("dataset clip and measurement counts differ");
    for (size_t i = 0; i < clips.records.size(); ++i) {
        d.clips.push_back(VideoClip{clips.records[i].value});
        d.meas.push_back(Measurement{meas.records[i].value, d.masks.frames()});
        if (d.clips.back().frames.shape() != d.masks.masks.shape()) throw DataError("dataset clip shape differs from masks");
    }
    return d;
}

void write_pgm(const std::string& path, const float* px, int64_t h, int64_t w) {
    std::string bytes = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (int64_t i = 0; i < h * w; ++i) {
        const float v = std::clamp(px[i], 0.0f, 1.0f);
        bytes.push_back(static_cast<char>(static_cast<uint8_t>(std::lround(v * 255.0f))));
    }
    write_file(path, bytes);
}

std::string metrics_csv(const std::vector<ClipMetrics>& rows) {
    std::string out = "clip,psnr,ssim\n";
    char buf[128];
    double sp = 0.0, ss = 0.0;
    for (size_t i = 0; i < rows.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", i, rows[i].psnr, rows[i].ssim);
        out += buf;
        sp += rows[i].psnr;
        ss += rows[i].ssim;
    }
    if (!rows.empty()) {
        const double n = static_cast<double>(rows.size());
        std::snprintf(buf, sizeof buf, "mean,%.9g,%.9g\n", sp / n, ss / n);
        out += buf;
    }
    return out;
}

/// Held-out data: a gen-data directory if given, otherwise the config's synthetic validation set.
DiskDataset eval_data(const Globals& g, const ExperimentConfig& c, const std::string& dataset_dir) {
    if (!dataset_dir.empty()) return load_dataset_dir(resolve(g, dataset_dir));
    DataConfig dc = c.data;
    dc.count = 0;
    Dataset d = make_dataset(dc, c.net.cr, c.train.crop, c.train.probe_clips);
    return DiskDataset{d.masks, d.val, d.val_meas};
}

Dataset training_data(const Globals& g, const ExperimentConfig& c) {
    if (c.run.dataset.empty()) return make_dataset(c.data, c.net.cr, c.train.crop, c.train.probe_clips);
    DiskDataset disk = load_dataset_dir(resolve(g, c.run.dataset));
    DataConfig dc = c.data;
    dc.count = 0;
    Dataset held = make_dataset(dc, c.net.cr, c.train.crop, c.train.probe_clips);
    return assemble_dataset(std::move(disk.clips), std::move(held.val), held.masks, c.data.noise_sigma,
                            c.data.seed ^ 0x5eedull, c.train.probe_clips);
}

void log_epoch(const std::string& tag, const EpochLog& r) {
    std::fprintf(stderr, "[%s] epoch %d phase %d loss %.6g probe %.6g val_psnr %.3f val_ssim %.4f\n", tag.c_str(),
                 r.epoch, r.phase, r.train_loss, r.probe_loss, r.val_psnr, r.val_ssim);
}

// ---------------------------------------------------------------------------
// Commands

struct GenDataArgs {
    int64_t height = 0, width = 0;
};

int cmd_gen_data(const Globals& g, const GenDataArgs& a) {
    const ExperimentConfig c = load_config(g);
    const int64_t t = c.net.cr;
    const int64_t h = a.height > 0 ? a.height : c.train.crop;
    const int64_t w = a.width > 0 ? a.width : c.train.crop;
    const std::string dir = resolve(g, c.run.out);
    const MaskSet masks = generate_masks(c.data.mask_seed, t, h, w, c.data.mask_density);
    const std::string text = c.canonical();
    Archive ma = data_archive(text), ca = data_archive(text), ya = data_archive(text);
    ma.records.push_back({"masks", masks.masks});
    std::string manifest = "index,clip,clip_checksum,measurement_checksum\n";
    for (int i = 0; i < c.data.count; ++i) {
        const VideoClip clip = synth_video(c.data.seed * 1000003ull + static_cast<uint64_t>(i), t, h, w, c.data.objects);
        const Measurement y = encode(clip, masks, c.data.noise_sigma, c.data.seed ^ (0x9e3779b97f4a7c15ull + i));
        const std::string name = record_name("clip", static_cast<size_t>(i));
        manifest += std::to_string(i) + "," + name + "," + hex64(tensor_checksum(clip.frames)) + "," +
                    hex64(tensor_checksum(y.y)) + "\n";
        ca.records.push_back({name, clip.frames});
        ya.records.push_back({record_name("meas", static_cast<size_t>(i)), y.y});
    }
    save_archive((fs::path(dir) / "masks.qsci").string(), ma);
    save_archive((fs::path(dir) / "clips.qsci").string(), ca);
    save_archive((fs::path(dir) / "measurements.qsci").string(), ya);
    write_file((fs::path(dir) / "manifest.csv").string(), manifest);
    write_file((fs::path(dir) / "config.txt").string(), text);
    std::printf("wrote %d clips to %s\n", c.data.count, dir.c_str());
    return 0;
}

int cmd_train(const Globals& g, const std::string& variant, const std::string& init) {
    ExperimentConfig c = load_config(g);
    if (!init.empty()) c.run.init = init;
    if (!variant.empty()) c.net = make_variant(variant, c.net);
    QNet net(c.net, c.train.init_seed);
    const Dataset data = training_data(g, c);
    if (c.net.quantized()) {
        if (c.run.init.empty()) {
            throw ConfigError("quantized network config requires --init with a full-precision checkpoint");
        }
        init_quantized(net, load_archive(resolve(g, c.run.init), kCheckpointMagic), data, c.train.calib_clips);
    } else if (!c.run.init.empty()) {
        init_from_checkpoint(net, load_archive(resolve(g, c.run.init), kCheckpointMagic));
    }
    write_file(out_path(g, c, "config.txt"), c.canonical());
    const TrainResult r = train(net, c.train, data, [](const EpochLog& row) { log_epoch("train", row); });
    write_file(out_path(g, c, "loss.csv"), loss_csv(r.log));
    save_archive(out_path(g, c, "checkpoint.qsci"), make_checkpoint(net));
    std::printf("final val_psnr %.4f val_ssim %.4f\n", r.log.back().val_psnr, r.log.back().val_ssim);
    return 0;
}

int cmd_eval(const Globals& g, const std::string& ckpt_path, const std::string& dataset, const std::string& dump) {
    const ExperimentConfig c = load_config(g);
    const Archive ckpt = load_archive(resolve(g, ckpt_path), kCheckpointMagic);
    QNet net(checkpoint_config(ckpt), 0);
    load_checkpoint(net, ckpt);
    const DiskDataset d = eval_data(g, c, dataset);
    std::vector<ClipMetrics> rows;
    Archive recon = data_archive(net.config().canonical());
    if (!d.clips.empty()) {
        const EvalResult ev = evaluate(net, d.masks, d.clips, d.meas, true);
        rows = ev.clips;
        for (size_t i = 0; i < ev.recon.size(); ++i) recon.records.push_back({record_name("recon", i), ev.recon[i].frames});
    }
    if (!dump.empty()) {
        for (size_t i = 0; i < recon.records.size(); ++i) {
            const Tensor& f = recon.records[i].value;
            for (int64_t t = 0; t < f.dim(0); ++t) {
                char name[64];
                std::snprintf(name, sizeof name, "clip%06zu_t%02lld.pgm", i, static_cast<long long>(t));
                write_pgm((fs::path(resolve(g, dump)) / name).string(), f.ptr() + t * f.dim(1) * f.dim(2), f.dim(1),
                          f.dim(2));
            }
        }
    }
    const std::string csv = metrics_csv(rows);
    write_file(out_path(g, c, "eval.csv"), csv);
    save_archive(out_path(g, c, "recon.qsci"), recon);
    write_file(out_path(g, c, "config.txt"), c.canonical());
    std::fputs(csv.c_str(), stdout);
    return 0;
}

int cmd_ablate(const Globals& g, const std::string& init) {
    ExperimentConfig c = load_config(g);
    if (!init.empty()) c.run.init = init;
    const Dataset data = training_data(g, c);
    write_file(out_path(g, c, "config.txt"), c.canonical());
    std::vector<VariantResult> rows;
    auto hook = [](const std::string& v, const EpochLog& r) { log_epoch(v, r); };
    Archive fp;
    if (c.run.init.empty()) {
        VariantResult base = train_full_precision(c, data, hook);
        fp = base.checkpoint;
        rows.push_back(std::move(base));
    } else {
        fp = load_archive(resolve(g, c.run.init), kCheckpointMagic);
    }
    auto run_group = [&](const std::string& group, const std::vector<std::string>& variants) {
        for (const auto& v : variants) {
            VariantResult r = train_variant(v, c, data, fp, hook);
            r.group = group;
            write_file(out_path(g, c, v + "/loss.csv"), loss_csv(r.log));
            save_archive(out_path(g, c, v + "/checkpoint.qsci"), r.checkpoint);
            rows.push_back(std::move(r));
        }
    };
    run_group("ladder", ladder_variants());
    run_group("modules", module_grid_variants());
    const std::string csv = ablation_csv(rows);
    write_file(out_path(g, c, "ablation.csv"), csv);
    std::fputs(csv.c_str(), stdout);
    return 0;
}

int cmd_pack(const Globals& g, const std::string& ckpt_path, const std::string& out) {
    const Archive ckpt = load_archive(resolve(g, ckpt_path), kCheckpointMagic);
    QNet net(checkpoint_config(ckpt), 0);
    load_checkpoint(net, ckpt);
    const PackedModel m = pack_model(net);
    save_packed(resolve(g, out), m);
    std::printf("packed %zu layers to %s\n", m.layers.size(), resolve(g, out).c_str());
    return 0;
}

int cmd_infer_int(const Globals& g, const std::string& packed_path, const std::string& dataset) {
    const ExperimentConfig c = load_config(g);
    const PackedModel m = load_packed(resolve(g, packed_path));
    const DiskDataset d = eval_data(g, c, dataset);
    Archive recon = data_archive(m.config.canonical());
    std::vector<ClipMetrics> rows;
    for (size_t i = 0; i < d.clips.size(); ++i) {
        const VideoClip out = infer_packed(m, d.meas[i], d.masks);
        rows.push_back({frame_psnr(out.frames, d.clips[i].frames), ssim(out.frames, d.clips[i].frames)});
        recon.records.push_back({record_name("recon", i), out.frames});
    }
    const std::string csv = metrics_csv(rows);
    write_file(out_path(g, c, "infer_int.csv"), csv);
    save_archive(out_path(g, c, "recon_int.qsci"), recon);
    std::fputs(csv.c_str(), stdout);
    return 0;
}

struct ReportArgs {
    std::string ckpt;
    int64_t frames = 0, height = 0, width = 0;
    double fp_params = 0.0, fp_gflops = 0.0;
    int bits = 0;
};

int cmd_report(const Globals& g, const ReportArgs& a) {
    const ExperimentConfig c = load_config(g);
    if (a.fp_params > 0.0 || a.fp_gflops > 0.0) {
        if (!BitWidth::valid(a.bits)) throw ConfigError("--bits must be one of 2, 3, 4, 8, 32");
        std::printf("bits,params_m,ops_g\n%d,%.9g,%.9g\n", a.bits, bit_adjusted_params(a.fp_params, a.bits) / 1e6,
                    bit_adjusted_ops(a.fp_gflops, a.bits, a.bits));
        return 0;
    }
    QNetConfig net = c.net;
    if (!a.ckpt.empty()) net = checkpoint_config(load_archive(resolve(g, a.ckpt), kCheckpointMagic));
    const int64_t t = a.frames > 0 ? a.frames : net.cr;
    const int64_t h = a.height > 0 ? a.height : c.train.crop;
    const int64_t w = a.width > 0 ? a.width : c.train.crop;
    const EffReport r = count_efficiency(net, t, h, w);
    const std::string csv = report_csv(r);
    write_file(out_path(g, c, "report.csv"), csv);
    std::fputs(csv.c_str(), stdout);
    std::printf("# params_m %.9g ops_g %.9g\n", r.params_m(), r.ops_g());
    return 0;
}

int cmd_bench(const Globals& g, const BenchGeometry& geo, int bits, int reps) {
    const ExperimentConfig c = load_config(g);
    const auto rows = kernel_bench(geo, bits, reps);
    std::string csv = "path,bits,flops,theoretical_ops,seconds_per_call,ops_per_second\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%d,%.9g,%.9g,%.9g,%.9g\n", r.path.c_str(), r.bits, r.flops, r.theoretical_ops,
                      r.seconds_per_call, r.ops_per_second);
        csv += buf;
    }
    write_file(out_path(g, c, "bench.csv"), csv);
    std::fputs(csv.c_str(), stdout);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Low-bit quantized snapshot compressive imaging toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--workdir", g.workdir, "Root for all relative paths");
    app.add_option("--config", g.config_path, "Experiment config file (section.key = value)");
    for (const auto& key : ExperimentConfig::keys()) {
        app.add_option_function<std::string>(
            "--" + key, [&g, key](const std::string& v) { g.overrides[key] = v; }, "Override " + key);
    }

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Write synthetic clips, masks and measurements");
    gen_cmd->add_option("--height", gen.height, "Frame height (default train.crop)");
    gen_cmd->add_option("--width", gen.width, "Frame width (default train.crop)");

    std::string variant, init;
    auto* train_cmd = app.add_subcommand("train", "Train a network and write checkpoint + loss curve");
    train_cmd->add_option("--variant", variant, "Named variant (fp32, q8, q4, q3, q2, q4_baseline, ...)");
    train_cmd->add_option("--init", init, "Full-precision checkpoint for quantized runs");

    std::string ckpt, dataset, dump;
    auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM of a checkpoint on a dataset");
    eval_cmd->add_option("--ckpt", ckpt)->required();
    eval_cmd->add_option("--dataset", dataset, "gen-data directory (default: synthetic validation set)");
    eval_cmd->add_option("--dump", dump, "Directory for 8-bit PGM frame dumps");

    std::string ablate_init;
    auto* ablate_cmd = app.add_subcommand("ablate", "Break-down ladder and per-module bit-width grid");
    ablate_cmd->add_option("--init", ablate_init, "Full-precision checkpoint (trained first when omitted)");

    std::string pack_out = "model.qpack";
    auto* pack_cmd = app.add_subcommand("pack", "Bit-pack a quantized checkpoint");
    pack_cmd->add_option("--ckpt", ckpt)->required();
    pack_cmd->add_option("--out", pack_out);

    std::string packed;
    auto* infer_cmd = app.add_subcommand("infer-int", "Integer-path reconstruction from a packed model");
    infer_cmd->add_option("--packed", packed)->required();
    infer_cmd->add_option("--dataset", dataset);

    ReportArgs rep;
    auto* report_cmd = app.add_subcommand("report", "Bit-adjusted parameter and operation counts");
    report_cmd->add_option("--ckpt", rep.ckpt);
    report_cmd->add_option("--frames", rep.frames);
    report_cmd->add_option("--height", rep.height);
    report_cmd->add_option("--width", rep.width);
    report_cmd->add_option("--fp-params", rep.fp_params, "Scale a full-precision parameter count instead");
    report_cmd->add_option("--fp-gflops", rep.fp_gflops, "Scale a full-precision GFLOPs count instead");
    report_cmd->add_option("--bits", rep.bits);

    BenchGeometry geo;
    int bench_bits = 8, reps = 10;
    auto* bench_cmd = app.add_subcommand("bench", "Time float vs integer kernels on one layer");
    bench_cmd->add_option("--in-channels", geo.in_channels);
    bench_cmd->add_option("--out-channels", geo.out_channels);
    bench_cmd->add_option("--kernel", geo.kernel);
    bench_cmd->add_option("--frames", geo.t);
    bench_cmd->add_option("--height", geo.h);
    bench_cmd->add_option("--width", geo.w);
    bench_cmd->add_option("--bits", bench_bits);
    bench_cmd->add_option("--reps", reps);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*gen_cmd) return cmd_gen_data(g, gen);
        if (*train_cmd) return cmd_train(g, variant, init);
        if (*eval_cmd) return cmd_eval(g, ckpt, dataset, dump);
        if (*ablate_cmd) return cmd_ablate(g, ablate_init);
        if (*pack_cmd) return cmd_pack(g, ckpt, pack_out);
        if (*infer_cmd) return cmd_infer_int(g, packed, dataset);
        if (*report_cmd) return cmd_report(g, rep);
        if (*bench_cmd) return cmd_bench(g, geo, bench_bits, reps);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 2;
}
