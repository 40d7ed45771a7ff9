// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "kvtrim/decoder.hpp"
#include "kvtrim/eviction.hpp"
#include "kvtrim/metrics.hpp"
#include "kvtrim/oracle.hpp"
#include "kvtrim/trace.hpp"

namespace kvtrim {

/// Resolves a budget against a concrete sequence length (ratio budgets pick
/// up `reference_len` here; absolute budgets ignore it).
std::size_t resolve_budget_for(BudgetConfig cfg, std::size_t reference_len);

/// Uniform token ids in [0, vocab).
std::vector<std::size_t> random_token_stream(std::size_t len, std::size_t vocab,
                                             std::uint64_t seed);

/// Token stream with long-range reuse: a leading reference block of ids
/// 0..3 (three copies each) that never recur afterwards, then uniform draws
/// over the remaining ids. Later queries keep attending to the block's keys,
/// which is what separates importance-ranked eviction from a recency window.
/// Needs vocab >= 8.
std::vector<std::size_t> structured_token_stream(std::size_t len, std::size_t vocab,
                                                 std::uint64_t seed);

/// One decoding pass: the attention rows it produced (zeros at evicted
/// positions), the keepset live after each step, and each step's hidden
/// output.
struct LiveRun {
    AttentionTrace trace;
    MaskSequence mask;
    std::vector<std::vector<double>> hidden;
};

/// Baseline pass with an unbounded cache.
LiveRun run_full_live(const DecoderConfig& cfg, std::span<const std::size_t> tokens);

/// Pass with physical eviction after every step; `budget` is the per-head
/// cache cap actually enforced. The cache and the score state are
/// cross-checked against each other every step.
LiveRun run_policy_live(const DecoderConfig& cfg, std::span<const std::size_t> tokens,
                        const PolicySpec& policy, std::size_t budget);

/// Prunes a recorded trace with `policy` and scores it against the ideal
/// mask at the same effective budget. `mask_out`, when given, receives the
/// policy's keepsets.
SimilarityReport run_replay_experiment(const AttentionTrace& trace, const PolicySpec& policy,
                                       const BudgetConfig& budget, bool renormalize = true,
                                       std::optional<std::uint64_t> seed = {},
                                       MaskSequence* mask_out = nullptr);

/// Runs the decoder twice on the same tokens — unbounded cache vs physical
/// eviction — and scores the evicting run against the ideal mask over the
/// full run's rows. Fills output_drift.
SimilarityReport run_live_experiment(const DecoderConfig& cfg, std::span<const std::size_t> tokens,
                                     const PolicySpec& policy, const BudgetConfig& budget,
                                     MaskSequence* mask_out = nullptr);

}  // namespace kvtrim
