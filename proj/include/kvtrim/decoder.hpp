// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "kvtrim/trace.hpp"

namespace kvtrim {

struct DecoderConfig {
    std::size_t n_layers = 1;
    std::size_t n_heads = 1;
    std::size_t d_head = 8;
    std::size_t vocab_size = 64;
    std::uint64_t seed = 0;
};

/// Minimal attention-only decoder: token embedding, per-layer per-head Q/K/V
/// projections, residual connection. No FFN, no layernorm, no positional
/// encoding. Weights are drawn i.i.d. from uniform(-1/sqrt(d_head),
/// +1/sqrt(d_head)) in a fixed order, so equal (dims, seed) produce
/// bit-identical decoders.
class ToyDecoder {
public:
    explicit ToyDecoder(const DecoderConfig& cfg);

    const DecoderConfig& config() const { return cfg_; }
    std::size_t d_model() const { return cfg_.n_heads * cfg_.d_head; }

    std::span<const double> embedding(std::size_t token_id) const;
    // Projection matrices are row-major [d_head][d_model].
    std::span<const double> wq(std::size_t layer, std::size_t head) const;
    std::span<const double> wk(std::size_t layer, std::size_t head) const;
    std::span<const double> wv(std::size_t layer, std::size_t head) const;

private:
    DecoderConfig cfg_;
    std::vector<double> embeddings_;  // [vocab][d_model]
    std::vector<double> wq_, wk_, wv_;  // [layer][head][d_head][d_model]
};

/// One head's live cache: (token, key, value) entries with strictly
/// increasing token indices.
struct KVEntry {
    TokenIndex token = 0;
    std::vector<double> key;
    std::vector<double> value;
};

/// Per-(layer, head) key/value store that is physically shrunk on eviction.
/// capacity = 0 means unbounded (the full-cache baseline).
class KVCache {
public:
    KVCache() = default;
    KVCache(std::size_t n_layers, std::size_t n_heads, std::size_t capacity = 0);

    std::size_t n_layers() const { return n_layers_; }
    std::size_t n_heads() const { return n_heads_; }
    std::size_t capacity() const { return capacity_; }

    std::vector<KVEntry>& head(std::size_t layer, std::size_t head);
    const std::vector<KVEntry>& head(std::size_t layer, std::size_t head) const;

    /// Live token indices of one head, ascending.
    std::vector<TokenIndex> live_tokens(std::size_t layer, std::size_t head) const;

private:
    std::size_t n_layers_ = 0;
    std::size_t n_heads_ = 0;
    std::size_t capacity_ = 0;
    std::vector<std::vector<KVEntry>> heads_;
};

/// Softmax over the kept subset of a logit row. Entries outside `keep` come
/// out exactly 0; kept entries are exp-normalized with max subtraction.
/// `keep` holds 1-based positions into `logits`.
///
/// Errors: "EmptyKeepSet" if keep is empty, "NonFiniteInput" on non-finite
/// kept logits, "ShapeMismatch" if keep references a position beyond the row.
std::vector<double> softmax_masked_row(std::span<const double> logits,
                                       std::span<const TokenIndex> keep);

struct StepResult {
    // Per (layer*n_heads + head): dense length-n probability row. Positions of
    // evicted tokens hold exact zeros.
    std::vector<std::vector<double>> score_rows;
    std::vector<double> hidden_out;  // d_model, after the residual stack
};

/// Runs one generation step: appends the new token's K/V to every head's
/// cache and returns each head's attention row over the live tokens.
///
/// `expected_live`, when non-empty, is a per-(layer, head) list of the token
/// indices the caller believes are live; a mismatch with the actual cache
/// contents raises "CacheKeepsetMismatch". Deterministic given (decoder,
/// cache contents, token_id).
StepResult decoder_step(const ToyDecoder& decoder, KVCache& cache, std::size_t token_id,
                        const std::vector<std::vector<TokenIndex>>& expected_live = {});

}  // namespace kvtrim
