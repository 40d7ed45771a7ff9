// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kvtrim/oracle.hpp"
#include "kvtrim/scoring.hpp"
#include "kvtrim/trace.hpp"

namespace kvtrim {

/// One experiment's similarity summary: per-head cosine to the ideal-pruned
/// scores, mask overlap with the ideal mask, and (live mode) output drift,
/// plus an echo of the configuration that produced it.
struct SimilarityReport {
    std::string policy;
    std::optional<double> alpha;
    std::size_t budget = 0;
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::vector<double> cosine_per_head;   // [layer*n_heads + head]
    double cosine_mean = 0.0;
    std::vector<double> overlap_per_head;  // same indexing
    double mask_overlap = 0.0;
    std::optional<double> output_drift;    // live mode only
    std::optional<std::uint64_t> seed;
};

/// Cosine between two pruned score matrices, per head: each head's
/// lower-triangular rows are flattened to one vector; returns per-head values
/// and fills `mean`. Raises "ZeroVector" if a head is entirely zero,
/// "ShapeMismatch" on differing shapes.
std::vector<double> cosine_similarity(const AttentionTrace& a, const AttentionTrace& b,
                                      double* mean = nullptr);

/// Mean over (layer, head, q) of |keep1 ∩ keep2| / |keep1|.
double mask_overlap(const MaskSequence& m1, const MaskSequence& m2);

/// Per-head companion of mask_overlap (mean over q only).
std::vector<double> mask_overlap_per_head(const MaskSequence& m1, const MaskSequence& m2);

struct TrajectoryPoint {
    std::size_t step = 0;   // generation step n, starting at the token's birth
    double raw = 0.0;       // S[n, k]
    double accumulator = 0.0;
};

/// The raw score and accumulator of one token across generation steps, on a
/// full (non-evicting) replay of one head. Policy must be A2S or A2SF.
std::vector<TrajectoryPoint> score_trajectory(const AttentionTrace& trace, TokenIndex token,
                                              const PolicyKind& policy, std::size_t layer = 0,
                                              std::size_t head = 0);

/// Mean per-step Euclidean distance between the two runs' hidden outputs,
/// normalized by the full run's mean hidden norm.
double output_drift(const std::vector<std::vector<double>>& full_hidden,
                    const std::vector<std::vector<double>>& pruned_hidden);

}  // namespace kvtrim
