// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace kvtrim {

/// Token positions are 1-based throughout: token k is the key written at
/// generation step k, and the score row of step q covers keys 1..q.
using TokenIndex = std::uint32_t;

/// Per-(layer, head) lower-triangular attention probability matrices.
///
/// Row q of a head is a length-q vector over keys 1..q; entries for k > q do
/// not exist (causal masking). Every row is row-stochastic. Rows are stored
/// packed per head: row q lives at offset q*(q-1)/2.
class AttentionTrace {
public:
    AttentionTrace() = default;
    AttentionTrace(std::size_t n_layers, std::size_t n_heads, std::size_t seq_len,
                   std::string provenance = {});

    std::size_t n_layers() const { return n_layers_; }
    std::size_t n_heads() const { return n_heads_; }
    std::size_t seq_len() const { return seq_len_; }
    std::size_t head_count() const { return n_layers_ * n_heads_; }

    const std::string& provenance() const { return provenance_; }
    void set_provenance(std::string p) { provenance_ = std::move(p); }

    std::span<const double> row(std::size_t layer, std::size_t head, std::size_t q) const;
    std::span<double> row(std::size_t layer, std::size_t head, std::size_t q);

    /// Packed per-head storage, length seq_len*(seq_len+1)/2. Used by trace I/O.
    const std::vector<double>& head_data(std::size_t layer, std::size_t head) const;
    std::vector<double>& head_data(std::size_t layer, std::size_t head);

    bool same_shape(const AttentionTrace& other) const {
        return n_layers_ == other.n_layers_ && n_heads_ == other.n_heads_ &&
               seq_len_ == other.seq_len_;
    }

    bool operator==(const AttentionTrace& other) const {
        return same_shape(other) && data_ == other.data_;
    }

    /// Throws Error("InvariantViolation") naming the first offending entry if
    /// any score is negative/non-finite or a row sum is off by more than tol.
    void validate(double row_sum_tol = 1e-6) const;

private:
    std::size_t head_slot(std::size_t layer, std::size_t head) const;

    std::size_t n_layers_ = 0;
    std::size_t n_heads_ = 0;
    std::size_t seq_len_ = 0;
    std::string provenance_;
    std::vector<std::vector<double>> data_;  // [layer*n_heads + head] packed rows
};

/// Knobs for structured synthetic traces: a boosted first token (attention
/// sink), a trailing locality window, and designated heavy-hitter tokens, on
/// top of seeded Gaussian noise.
struct TraceGenConfig {
    std::size_t seq_len = 0;
    std::size_t n_layers = 1;
    std::size_t n_heads = 1;
    double sink_strength = 0.0;
    std::size_t locality_window = 0;
    double locality_strength = 0.0;
    std::vector<std::pair<TokenIndex, double>> heavy_hitters;
    double noise_temperature = 1.0;
    std::uint64_t seed = 0;

    /// Throws Error on bad values (seq_len < 2, non-positive temperature,
    /// heavy-hitter index outside 1..seq_len-1, negative strengths).
    void validate() const;
};

/// Draws logits = N(0,1) + boosts per key, softmaxes each row at the given
/// temperature. Deterministic per seed; the result satisfies all
/// AttentionTrace invariants.
AttentionTrace generate_synthetic_trace(const TraceGenConfig& cfg);

}  // namespace kvtrim
