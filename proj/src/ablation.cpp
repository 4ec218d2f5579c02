#include "qsci/ablation.hpp"

#include <cstdio>

#include "qsci/accounting.hpp"

namespace qsci {

const std::vector<std::string>& ladder_variants() {
    static const std::vector<std::string> v{"q4_baseline", "q4_shift", "q4_shift_fem", "q4"};
    return v;
}

const std::vector<std::string>& module_grid_variants() {
    static const std::vector<std::string> v{"q8_fem4", "q8_resd4", "q8_vrm4", "q8_baseline"};
    return v;
}

namespace {

VariantResult finish(const std::string& variant, QNet& net, const ExperimentConfig& cfg, const Dataset& data,
                     const EpochHook& hook) {
    VariantResult r;
    r.variant = variant;
    r.net = net.config();
    const TrainResult tr = train(net, cfg.train, data, [&](const EpochLog& row) {
        if (hook) hook(variant, row);
    });
    r.log = tr.log;
    r.val_psnr = tr.log.back().val_psnr;
    r.val_ssim = tr.log.back().val_ssim;
    const EffReport eff = count_efficiency(net.audit(net.config().cr, cfg.train.crop, cfg.train.crop));
    r.params_m = eff.params_m();
    r.ops_g = eff.ops_g();
    r.checkpoint = make_checkpoint(net);
    return r;
}

}  // namespace

VariantResult train_full_precision(const ExperimentConfig& cfg, const Dataset& data, const EpochHook& hook) {
    QNet net(make_variant("fp32", cfg.net), cfg.train.init_seed);
    VariantResult r = finish("fp32", net, cfg, data, hook);
    r.group = "base";
    return r;
}

VariantResult train_variant(const std::string& variant, const ExperimentConfig& cfg, const Dataset& data,
                            const Archive& fp_ckpt, const EpochHook& hook) {
    QNet net(make_variant(variant, cfg.net), cfg.train.init_seed);
    if (net.config().quantized()) {
        init_quantized(net, fp_ckpt, data, cfg.train.calib_clips);
    } else {
        init_from_checkpoint(net, fp_ckpt);
    }
    return finish(variant, net, cfg, data, hook);
}

std::string ablation_csv(const std::vector<VariantResult>& rows) {
    std::string out = "group,variant,body_bits,shift,fem,vrm,val_psnr,val_ssim,params_m,ops_g\n";
    char buf[512];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%s,%d,%d,%d,%d,%.9g,%.9g,%.9g,%.9g\n", r.group.c_str(), r.variant.c_str(),
                      r.net.body_bits, r.net.use_qk_shift ? 1 : 0, r.net.use_fem_shortcuts ? 1 : 0,
                      r.net.use_vrm_shortcuts ? 1 : 0, r.val_psnr, r.val_ssim, r.params_m, r.ops_g);
        out += buf;
    }
    return out;
}

}  // namespace qsci
