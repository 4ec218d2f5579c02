#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "qsci/network.hpp"
#include "qsci/train.hpp"

namespace qsci {

struct RunConfig {
    std::string out = "run";
    std::string init;     ///< full-precision checkpoint for quantized runs
    std::string dataset;  ///< gen-data directory; empty generates in memory
};

/// Plain-text "section.key = value" configuration. '#' starts a comment.
struct ExperimentConfig {
    QNetConfig net;
    TrainConfig train;
    DataConfig data;
    RunConfig run;

    /// Throws ConfigError for unknown keys or malformed values.
    void set(std::string_view key, std::string_view value);
    std::string get(std::string_view key) const;
    static ExperimentConfig parse(std::string_view text);
    /// Every key in fixed order; parse(canonical()) reproduces the config.
    std::string canonical() const;
    void validate() const;

    static const std::vector<std::string>& keys();
};

/// Reads only the net.* lines of a canonical text.
QNetConfig parse_net_config(std::string_view text);

}  // namespace qsci
