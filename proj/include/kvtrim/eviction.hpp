// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "kvtrim/decoder.hpp"
#include "kvtrim/scoring.hpp"
#include "kvtrim/trace.hpp"

namespace kvtrim {

/// Token budget, either as a fraction of a reference sequence length or as
/// an absolute count.
struct BudgetConfig {
    enum class Mode { Ratio, Absolute };
    Mode mode = Mode::Ratio;
    double cache_ratio = 1.0;      // Ratio mode, in (0, 1]
    std::size_t budget_count = 0;  // Absolute mode
    std::size_t reference_len = 0; // Ratio mode

    static BudgetConfig ratio(double r, std::size_t reference_len) {
        return {Mode::Ratio, r, 0, reference_len};
    }
    static BudgetConfig absolute(std::size_t count) { return {Mode::Absolute, 1.0, count, 0}; }
};

/// Ratio mode: max(1, floor(cache_ratio * reference_len)). Absolute mode:
/// budget_count. Errors: "ZeroBudget" when the budget resolves to 0,
/// "BadRatio" for a ratio outside (0, 1].
std::size_t resolve_budget(const BudgetConfig& cfg);

/// Per-(layer, head) sorted token index sets retained at one step.
struct KeepSet {
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::vector<std::vector<TokenIndex>> sets;  // [layer*n_heads + head], ascending

    KeepSet() = default;
    KeepSet(std::size_t layers, std::size_t heads)
        : n_layers(layers), n_heads(heads), sets(layers * heads) {}

    std::vector<TokenIndex>& at(std::size_t layer, std::size_t head) {
        return sets[layer * n_heads + head];
    }
    const std::vector<TokenIndex>& at(std::size_t layer, std::size_t head) const {
        return sets[layer * n_heads + head];
    }
};

/// Top-B tokens per head by accumulator rank; the current token n is always
/// kept (displacing the weakest pick if needed). Selection uses the full
/// budget, matching a selective-only cache split.
KeepSet select_keepset_a2sf(const ScoreState& state, std::size_t budget, TokenIndex n);

/// Trailing window {max(1, n-window+1) .. n}, identical for every head.
KeepSet select_keepset_local(TokenIndex n, std::size_t window, std::size_t n_layers,
                             std::size_t n_heads);

/// Hybrid split: floor(B/2) most recent live tokens plus (B - floor(B/2))
/// of the remaining live tokens by accumulator rank (a state driven by the
/// A2S policy). Raises "BudgetTooSmallForHybrid" for budgets below 2.
KeepSet select_keepset_h2o(const ScoreState& state, std::size_t budget, TokenIndex n);

/// Physically removes cache entries and score accumulators outside `keep`.
/// Runs after a step's scores are consumed, before the next decoder step.
/// Raises "UnknownToken" if keep references a token that is not live.
void evict(KVCache& cache, ScoreState& state, const KeepSet& keep);

/// An eviction policy as selected on the command line. H2O scores with A2S
/// and splits the budget between a recent window and rank-selected tokens;
/// A2SF spends the whole budget on rank selection.
enum class EvictionStrategy { Full, Local, H2O, A2SF };

struct PolicySpec {
    EvictionStrategy strategy = EvictionStrategy::Full;
    double alpha = 0.0;        // A2SF
    std::size_t window = 0;    // Local; 0 means "use the budget"

    /// The scoring policy backing this strategy.
    PolicyKind scoring() const;

    /// Budget actually retained per step: Full keeps everything, Local keeps
    /// its window, H2O/A2SF keep the resolved budget.
    std::size_t effective_budget(std::size_t resolved, std::size_t seq_len) const;

    std::string name() const;  // "full", "local", "h2o", "a2sf"

    static PolicySpec full() { return {EvictionStrategy::Full, 0.0, 0}; }
    static PolicySpec local(std::size_t window = 0) {
        return {EvictionStrategy::Local, 0.0, window};
    }
    static PolicySpec h2o() { return {EvictionStrategy::H2O, 0.0, 0}; }
    static PolicySpec a2sf(double alpha) { return {EvictionStrategy::A2SF, alpha, 0}; }
};

/// Keepset for one step under the given policy: keeps everything while the
/// live count is within budget, then applies the policy's selection rule.
KeepSet select_keepset(const PolicySpec& policy, const ScoreState& state, std::size_t budget,
                       TokenIndex n);

}  // namespace kvtrim
