// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "kvtrim/trace.hpp"

namespace kvtrim {

enum class PolicyType {
    Full,   // no eviction
    Local,  // trailing-window selection, positional
    A2S,    // accumulative attention score (sum over steps)
    A2SF,   // A2S with a forgetting factor alpha applied once per step
};

/// Scoring policy with its parameters. alpha applies to A2SF (0 <= alpha < 1;
/// alpha = 0 ranks by the latest row only), window to Local.
struct PolicyKind {
    PolicyType type = PolicyType::Full;
    double alpha = 0.0;
    std::size_t window = 0;

    static PolicyKind full() { return {PolicyType::Full, 0.0, 0}; }
    static PolicyKind local(std::size_t window) { return {PolicyType::Local, 0.0, window}; }
    static PolicyKind a2s() { return {PolicyType::A2S, 0.0, 0}; }
    static PolicyKind a2sf(double alpha) { return {PolicyType::A2SF, alpha, 0}; }
};

/// Per-(layer, head) importance accumulators over live tokens.
///
/// For A2S the accumulator of token k after step n is sum_{q=k..n} S[q,k];
/// for A2SF it is sum_{q=k..n} alpha^(n-q) * S[q,k], maintained by the
/// streaming recurrence A <- alpha*A + S. A token's accumulator starts at its
/// self-attention score S[k,k] and is discarded when the token is evicted.
class ScoreState {
public:
    ScoreState() = default;

    struct Slot {
        TokenIndex token = 0;
        double accumulator = 0.0;
    };

    PolicyKind policy() const { return policy_; }
    std::size_t n_layers() const { return n_layers_; }
    std::size_t n_heads() const { return n_heads_; }
    std::size_t step() const { return step_; }

    /// Live (token, accumulator) slots of one head, ascending by token.
    const std::vector<Slot>& head(std::size_t layer, std::size_t head) const;
    std::vector<TokenIndex> live_tokens(std::size_t layer, std::size_t head) const;

    friend ScoreState init_score_state(PolicyKind policy, std::size_t n_layers,
                                       std::size_t n_heads);
    friend void update_scores(ScoreState& state,
                              const std::vector<std::vector<double>>& rows);
    friend void drop_scores(ScoreState& state,
                            const std::vector<std::vector<TokenIndex>>& evicted);

private:
    PolicyKind policy_;
    std::size_t n_layers_ = 0;
    std::size_t n_heads_ = 0;
    std::size_t step_ = 0;
    std::vector<std::vector<Slot>> heads_;
};

/// Validates policy parameters ("BadAlpha" if alpha outside [0,1) for A2SF,
/// "BadWindow" if a Local window is 0) and returns an empty state at step 0.
ScoreState init_score_state(PolicyKind policy, std::size_t n_layers, std::size_t n_heads);

/// Consumes the score rows of the next step n (one dense length-n row per
/// head; entries are read only at live token positions plus n itself).
/// Raises "RowShapeMismatch" if the row count or row lengths are off.
void update_scores(ScoreState& state, const std::vector<std::vector<double>>& rows);

/// Removes the listed tokens' accumulators ("UnknownToken" if one is not live).
void drop_scores(ScoreState& state, const std::vector<std::vector<TokenIndex>>& evicted);

/// Live tokens of one head sorted by importance, descending; ties break
/// toward the more recent token. Raises "EmptyHead" on a head with no tokens.
std::vector<TokenIndex> rank_tokens(const ScoreState& state, std::size_t layer,
                                    std::size_t head);

/// Independent batch form of the accumulator: A[k] = sum_{q=k..n}
/// alpha^(n-q) * S[q,k] evaluated directly from one head's lower-triangular
/// rows. rows[q-1] must have length q. This is the oracle the streaming
/// update is checked against; alpha = 1 gives plain column sums (A2S) and
/// alpha = 0 reproduces the final row.
std::vector<double> batch_a2sf(const std::vector<std::vector<double>>& rows, double alpha);

}  // namespace kvtrim
