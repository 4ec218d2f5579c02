#include "qsci/config.hpp"

#include <charconv>
#include <functional>
#include <sstream>

#include "qsci/errors.hpp"

namespace qsci {

namespace {

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value) {
    throw ConfigError("invalid value '" + std::string(value) + "' for " + std::string(key));
}

template <class T>
T parse_value(std::string_view key, std::string_view v) {
    if constexpr (std::is_same_v<T, bool>) {
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        bad_value(key, v);
    } else if constexpr (std::is_same_v<T, std::string>) {
        return std::string(v);
    } else {
        T out{};
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v);
        return out;
    }
}

template <class T>
std::string format_value(const T& v) {
    if constexpr (std::is_same_v<T, bool>) {
        return v ? "true" : "false";
    } else if constexpr (std::is_same_v<T, std::string>) {
        return v;
    } else {
        char buf[64];
        auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
        (void)ec;
        return std::string(buf, p);
    }
}

struct Field {
    std::string key;
    std::function<void(ExperimentConfig&, std::string_view)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

template <class Access>
Field field(std::string key, Access access) {
    Field f;
    f.key = key;
    f.set = [key, access](ExperimentConfig& c, std::string_view v) {
        auto& ref = access(c);
        ref = parse_value<std::remove_reference_t<decltype(ref)>>(key, v);
    };
    f.get = [access](const ExperimentConfig& c) { return format_value(access(const_cast<ExperimentConfig&>(c))); };
    return f;
}

#define QSCI_FIELD(key, member) field(key, [](ExperimentConfig& c) -> auto& { return c.member; })

const std::vector<Field>& fields() {
    static const std::vector<Field> all = {
        QSCI_FIELD("net.base_channels", net.base_channels),
        QSCI_FIELD("net.resdnet_blocks", net.resdnet_blocks),
        QSCI_FIELD("net.cformer_per_block", net.cformer_per_block),
        QSCI_FIELD("net.heads", net.heads),
        QSCI_FIELD("net.cr", net.cr),
        QSCI_FIELD("net.body_bits", net.body_bits),
        QSCI_FIELD("net.shortcut_bits", net.shortcut_bits),
        QSCI_FIELD("net.fem_bits", net.fem_bits),
        QSCI_FIELD("net.resd_bits", net.resd_bits),
        QSCI_FIELD("net.vrm_bits", net.vrm_bits),
        QSCI_FIELD("net.use_fem_shortcuts", net.use_fem_shortcuts),
        QSCI_FIELD("net.use_vrm_shortcuts", net.use_vrm_shortcuts),
        QSCI_FIELD("net.use_qk_shift", net.use_qk_shift),
        QSCI_FIELD("train.lr_phase1", train.lr_phase1),
        QSCI_FIELD("train.lr_phase2", train.lr_phase2),
        QSCI_FIELD("train.epochs_phase1", train.epochs_phase1),
        QSCI_FIELD("train.epochs_phase2", train.epochs_phase2),
        QSCI_FIELD("train.batch", train.batch),
        QSCI_FIELD("train.crop", train.crop),
        QSCI_FIELD("train.aug_crop", train.aug_crop),
        QSCI_FIELD("train.aug_flip", train.aug_flip),
        QSCI_FIELD("train.aug_scale", train.aug_scale),
        QSCI_FIELD("train.scale_min", train.scale_min),
        QSCI_FIELD("train.scale_max", train.scale_max),
        QSCI_FIELD("train.seed", train.seed),
        QSCI_FIELD("train.init_seed", train.init_seed),
        QSCI_FIELD("train.beta1", train.beta1),
        QSCI_FIELD("train.beta2", train.beta2),
        QSCI_FIELD("train.eps", train.eps),
        QSCI_FIELD("train.calib_clips", train.calib_clips),
        QSCI_FIELD("train.probe_clips", train.probe_clips),
        QSCI_FIELD("data.seed", data.seed),
        QSCI_FIELD("data.count", data.count),
        QSCI_FIELD("data.source_size", data.source_size),
        QSCI_FIELD("data.val_seed", data.val_seed),
        QSCI_FIELD("data.val_count", data.val_count),
        QSCI_FIELD("data.mask_seed", data.mask_seed),
        QSCI_FIELD("data.mask_density", data.mask_density),
        QSCI_FIELD("data.noise_sigma", data.noise_sigma),
        QSCI_FIELD("data.objects", data.objects),
        QSCI_FIELD("run.out", run.out),
        QSCI_FIELD("run.init", run.init),
        QSCI_FIELD("run.dataset", run.dataset),
    };
    return all;
}

#undef QSCI_FIELD

const Field& find_field(std::string_view key) {
    for (const auto& f : fields()) {
        if (f.key == key) return f;
    }
    throw ConfigError("unknown config key '" + std::string(key) + "'");
}

template <class Fn>
void for_each_line(std::string_view text, Fn fn) {
    int line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        fn(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

}  // namespace

void ExperimentConfig::set(std::string_view key, std::string_view value) { find_field(key).set(*this, value); }

std::string ExperimentConfig::get(std::string_view key) const { return find_field(key).get(*this); }

ExperimentConfig ExperimentConfig::parse(std::string_view text) {
    ExperimentConfig c;
    for_each_line(text, [&](std::string_view k, std::string_view v) { c.set(k, v); });
    return c;
}

std::string ExperimentConfig::canonical() const {
    std::string out;
    for (const auto& f : fields()) out += f.key + " = " + f.get(*this) + "\n";
    return out;
}

void ExperimentConfig::validate() const {
    net.validate();
    train.validate();
    data.validate();
    if (data.source_size < train.crop) throw ConfigError("data.source_size must be >= train.crop");
}

const std::vector<std::string>& ExperimentConfig::keys() {
    static const std::vector<std::string> k = [] {
        std::vector<std::string> out;
        for (const auto& f : fields()) out.push_back(f.key);
        return out;
    }();
    return k;
}

QNetConfig parse_net_config(std::string_view text) {
    ExperimentConfig c;
    for_each_line(text, [&](std::string_view k, std::string_view v) {
        if (k.substr(0, 4) != "net.") throw ConfigError("unexpected key '" + std::string(k) + "' in network config");
        c.set(k, v);
    });
    c.net.validate();
    return c.net;
}

}  // namespace qsci
