#pragma once

#include <string>
#include <vector>

#include "qsci/network.hpp"

namespace qsci {

struct EffRow {
    std::string name;
    int w_bits = 32, a_bits = 32;
    double raw_params = 0.0;
    double flops = 0.0;  ///< 2 x MACs
    double params = 0.0;  ///< bit-adjusted
    double ops = 0.0;     ///< bit-adjusted
};

struct EffReport {
    std::vector<EffRow> rows;
    double raw_params = 0.0;
    double flops = 0.0;
    double params = 0.0;
    double ops = 0.0;

    double params_m() const { return params / 1e6; }
    double ops_g() const { return ops / 1e9; }
};

/// raw x bits / 32
double bit_adjusted_params(double raw, int bits);
/// flops x max(w_bits, a_bits) / 32
double bit_adjusted_ops(double flops, int w_bits, int a_bits);
double speedup(double fp_ops, double q_ops);

/// One row per audit entry; totals are the in-order sums of the rows.
EffReport count_efficiency(const std::vector<LayerAudit>& audit);
EffReport count_efficiency(const QNetConfig& cfg, int64_t t, int64_t h, int64_t w);

/// CSV: name,w_bits,a_bits,raw_params,flops,params,ops then a TOTAL row.
std::string report_csv(const EffReport& r);

}  // namespace qsci
