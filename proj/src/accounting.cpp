#include "qsci/accounting.hpp"

#include <algorithm>
#include <cstdio>

#include "qsci/errors.hpp"

namespace qsci {

double bit_adjusted_params(double raw, int bits) { return raw * static_cast<double>(bits) / 32.0; }

double bit_adjusted_ops(double flops, int w_bits, int a_bits) {
    return flops * static_cast<double>(std::max(w_bits, a_bits)) / 32.0;
}

double speedup(double fp_ops, double q_ops) {
    if (!(q_ops > 0.0)) throw ConfigError("speedup: quantized OPs must be positive");
    return fp_ops / q_ops;
}

EffReport count_efficiency(const std::vector<LayerAudit>& audit) {
    EffReport r;
    for (const auto& a : audit) {
        EffRow row;
        row.name = a.name;
        row.w_bits = a.w_bits;
        row.a_bits = a.a_bits;
        row.raw_params = static_cast<double>(a.params);
        row.flops = 2.0 * static_cast<double>(a.macs);
        row.params = bit_adjusted_params(row.raw_params, a.w_bits);
        row.ops = bit_adjusted_ops(row.flops, a.w_bits, a.a_bits);
        r.rows.push_back(row);
    }
    for (const auto& row : r.rows) {
        r.raw_params += row.raw_params;
        r.flops += row.flops;
        r.params += row.params;
        r.ops += row.ops;
    }
    return r;
}

EffReport count_efficiency(const QNetConfig& cfg, int64_t t, int64_t h, int64_t w) {
    QNet net(cfg, 0);
    return count_efficiency(net.audit(t, h, w));
}

std::string report_csv(const EffReport& r) {
    std::string out = "name,w_bits,a_bits,raw_params,flops,params,ops\n";
    char buf[256];
    for (const auto& row : r.rows) {
        std::snprintf(buf, sizeof buf, "%s,%d,%d,%.17g,%.17g,%.17g,%.17g\n", row.name.c_str(), row.w_bits, row.a_bits,
                      row.raw_params, row.flops, row.params, row.ops);
        out += buf;
    }
    std::snprintf(buf, sizeof buf, "TOTAL,,,%.17g,%.17g,%.17g,%.17g\n", r.raw_params, r.flops, r.params, r.ops);
    out += buf;
    return out;
}

}  // namespace qsci
