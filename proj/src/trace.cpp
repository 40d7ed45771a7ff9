// SPDX-License-Identifier: Apache-2.0

#include "kvtrim/trace.hpp"

#include <cmath>
#include <cstdio>

#include "kvtrim/error.hpp"
#include "kvtrim/rng.hpp"

namespace kvtrim {

namespace {

std::size_t packed_size(std::size_t seq_len) {
    return seq_len * (seq_len + 1) / 2;
}

std::string entry_name(std::size_t layer, std::size_t head, std::size_t q, std::size_t k) {
    return "layer=" + std::to_string(layer) + " head=" + std::to_string(head) +
           " q=" + std::to_string(q) + " k=" + std::to_string(k);
}

}  // namespace

AttentionTrace::AttentionTrace(std::size_t n_layers, std::size_t n_heads, std::size_t seq_len,
                               std::string provenance)
    : n_layers_(n_layers),
      n_heads_(n_heads),
      seq_len_(seq_len),
      provenance_(std::move(provenance)),
      data_(n_layers * n_heads, std::vector<double>(packed_size(seq_len), 0.0)) {}

std::size_t AttentionTrace::head_slot(std::size_t layer, std::size_t head) const {
    if (layer >= n_layers_ || head >= n_heads_) {
        throw Error("ShapeMismatch", "layer/head out of range for trace");
    }
    return layer * n_heads_ + head;
}

std::span<const double> AttentionTrace::row(std::size_t layer, std::size_t head,
                                            std::size_t q) const {
    if (q < 1 || q > seq_len_) {
        throw Error("ShapeMismatch", "row index out of range for trace");
    }
    const auto& d = data_[head_slot(layer, head)];
    return {d.data() + q * (q - 1) / 2, q};
}

std::span<double> AttentionTrace::row(std::size_t layer, std::size_t head, std::size_t q) {
    if (q < 1 || q > seq_len_) {
        throw Error("ShapeMismatch", "row index out of range for trace");
    }
    auto& d = data_[head_slot(layer, head)];
    return {d.data() + q * (q - 1) / 2, q};
}

const std::vector<double>& AttentionTrace::head_data(std::size_t layer, std::size_t head) const {
    return data_[head_slot(layer, head)];
}

std::vector<double>& AttentionTrace::head_data(std::size_t layer, std::size_t head) {
    return data_[head_slot(layer, head)];
}

void AttentionTrace::validate(double row_sum_tol) const {
    for (std::size_t l = 0; l < n_layers_; ++l) {
        for (std::size_t h = 0; h < n_heads_; ++h) {
            for (std::size_t q = 1; q <= seq_len_; ++q) {
                const auto r = row(l, h, q);
                double sum = 0.0;
                for (std::size_t k = 1; k <= q; ++k) {
                    const double v = r[k - 1];
                    if (!std::isfinite(v) || v < 0.0) {
                        throw Error("InvariantViolation",
                                    "negative or non-finite score at " + entry_name(l, h, q, k));
                    }
                    sum += v;
                }
                if (std::abs(sum - 1.0) > row_sum_tol) {
                    throw Error("InvariantViolation",
                                "row sum " + std::to_string(sum) + " out of tolerance at " +
                                    entry_name(l, h, q, 0));
                }
            }
        }
    }
}

void TraceGenConfig::validate() const {
    if (seq_len < 2) {
        throw Error("BadConfig", "seq_len must be >= 2");
    }
    if (n_layers == 0 || n_heads == 0) {
        throw Error("BadConfig", "n_layers and n_heads must be >= 1");
    }
    if (!(noise_temperature > 0.0)) {
        throw Error("BadConfig", "noise_temperature must be > 0");
    }
    if (sink_strength < 0.0 || locality_strength < 0.0) {
        throw Error("BadConfig", "strengths must be nonnegative");
    }
    for (const auto& [idx, strength] : heavy_hitters) {
        if (idx < 1 || idx >= seq_len) {
            throw Error("BadConfig", "heavy-hitter index " + std::to_string(idx) +
                                         " outside 1.." + std::to_string(seq_len - 1));
        }
        if (strength < 0.0) {
            throw Error("BadConfig", "heavy-hitter strength must be nonnegative");
        }
    }
}

AttentionTrace generate_synthetic_trace(const TraceGenConfig& cfg) {
    cfg.validate();

    AttentionTrace trace(cfg.n_layers, cfg.n_heads, cfg.seq_len);
    DetRng rng(cfg.seed);

    std::vector<double> boost(cfg.seq_len + 1, 0.0);  // 1-based
    boost[1] += cfg.sink_strength;
    for (const auto& [idx, strength] : cfg.heavy_hitters) {
        boost[idx] += strength;
    }

    std::vector<double> logits;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            for (std::size_t q = 1; q <= cfg.seq_len; ++q) {
                logits.assign(q, 0.0);
                for (std::size_t k = 1; k <= q; ++k) {
                    double z = rng.normal() + boost[k];
                    if (cfg.locality_window > 0 && q - k < cfg.locality_window) {
                        z += cfg.locality_strength;
                    }
                    logits[k - 1] = z / cfg.noise_temperature;
                }
                // softmax with max subtraction
                double mx = logits[0];
                for (double z : logits) mx = std::max(mx, z);
                double sum = 0.0;
                auto out = trace.row(l, h, q);
                for (std::size_t k = 0; k < q; ++k) {
                    out[k] = std::exp(logits[k] - mx);
                    sum += out[k];
                }
                for (std::size_t k = 0; k < q; ++k) {
                    out[k] /= sum;
                }
            }
        }
    }

    return trace;
}

}  // namespace kvtrim
