// SPDX-License-Identifier: Apache-2.0

#include "kvtrim/eviction.hpp"

#include <algorithm>
#include <cmath>

#include "kvtrim/error.hpp"

namespace kvtrim {

std::size_t resolve_budget(const BudgetConfig& cfg) {
    if (cfg.mode == BudgetConfig::Mode::Absolute) {
        if (cfg.budget_count == 0) {
            throw Error("ZeroBudget", "absolute budget must be >= 1");
        }
        return cfg.budget_count;
    }
    if (!(cfg.cache_ratio > 0.0 && cfg.cache_ratio <= 1.0)) {
        throw Error("BadRatio", "cache ratio must lie in (0, 1], got " +
                                    std::to_string(cfg.cache_ratio));
    }
    if (cfg.reference_len == 0) {
        throw Error("ZeroBudget", "ratio budget needs a reference length");
    }
    const auto b = static_cast<std::size_t>(
        std::floor(cfg.cache_ratio * static_cast<double>(cfg.reference_len)));
    return std::max<std::size_t>(1, b);
}

KeepSet select_keepset_a2sf(const ScoreState& state, std::size_t budget, TokenIndex n) {
    KeepSet keep(state.n_layers(), state.n_heads());
    for (std::size_t l = 0; l < state.n_layers(); ++l) {
        for (std::size_t h = 0; h < state.n_heads(); ++h) {
            const auto order = rank_tokens(state, l, h);
            const std::size_t take = std::min(budget, order.size());
            auto& set = keep.at(l, h);
            set.assign(order.begin(), order.begin() + take);
            if (std::find(set.begin(), set.end(), n) == set.end()) {
                set.back() = n;  // current token displaces the weakest pick
            }
            std::sort(set.begin(), set.end());
        }
    }
    return keep;
}

KeepSet select_keepset_local(TokenIndex n, std::size_t window, std::size_t n_layers,
                             std::size_t n_heads) {
    if (window == 0) {
        throw Error("BadWindow", "Local window must be >= 1");
    }
    const TokenIndex lo = n >= window ? n - static_cast<TokenIndex>(window) + 1 : 1;
    std::vector<TokenIndex> set;
    set.reserve(n - lo + 1);
    for (TokenIndex t = lo; t <= n; ++t) set.push_back(t);

    KeepSet keep(n_layers, n_heads);
    for (auto& s : keep.sets) s = set;
    return keep;
}

KeepSet select_keepset_h2o(const ScoreState& state, std::size_t budget, TokenIndex n) {
    if (budget < 2) {
        throw Error("BudgetTooSmallForHybrid", "H2O needs a budget of at least 2");
    }
    const std::size_t local_half = budget / 2;
    KeepSet keep(state.n_layers(), state.n_heads());
    for (std::size_t l = 0; l < state.n_layers(); ++l) {
        for (std::size_t h = 0; h < state.n_heads(); ++h) {
            const auto live = state.live_tokens(l, h);  // ascending
            if (live.empty() || live.back() != n) {
                throw Error("UnknownToken", "current token " + std::to_string(n) +
                                                " is not the newest live token");
            }
            auto& set = keep.at(l, h);
            if (live.size() <= budget) {
                set = live;
                continue;
            }
            // Recent half: the trailing local_half live tokens (n included).
            set.assign(live.end() - static_cast<std::ptrdiff_t>(local_half), live.end());
            const TokenIndex recent_lo = set.front();
            // Selective half: best-ranked among the rest.
            std::size_t want = budget - local_half;
            for (TokenIndex t : rank_tokens(state, l, h)) {
                if (want == 0) break;
                if (t >= recent_lo) continue;
                set.push_back(t);
                --want;
            }
            std::sort(set.begin(), set.end());
        }
    }
    return keep;
}

PolicyKind PolicySpec::scoring() const {
    switch (strategy) {
        case EvictionStrategy::Full:
            return PolicyKind::full();
        case EvictionStrategy::Local:
            return PolicyKind::local(window == 0 ? 1 : window);
        case EvictionStrategy::H2O:
            return PolicyKind::a2s();
        case EvictionStrategy::A2SF:
            return PolicyKind::a2sf(alpha);
    }
    throw Error("BadConfig", "unknown eviction strategy");
}

std::size_t PolicySpec::effective_budget(std::size_t resolved, std::size_t seq_len) const {
    switch (strategy) {
        case EvictionStrategy::Full:
            return seq_len;
        case EvictionStrategy::Local:
            return window == 0 ? resolved : window;
        case EvictionStrategy::H2O:
        case EvictionStrategy::A2SF:
            return resolved;
    }
    throw Error("BadConfig", "unknown eviction strategy");
}

std::string PolicySpec::name() const {
    switch (strategy) {
        case EvictionStrategy::Full:
            return "full";
        case EvictionStrategy::Local:
            return "local";
        case EvictionStrategy::H2O:
            return "h2o";
        case EvictionStrategy::A2SF:
            return "a2sf";
    }
    return "?";
}

KeepSet select_keepset(const PolicySpec& policy, const ScoreState& state, std::size_t budget,
                       TokenIndex n) {
    // Under budget nothing is pruned, for any policy.
    bool under = true;
    for (std::size_t l = 0; l < state.n_layers() && under; ++l) {
        for (std::size_t h = 0; h < state.n_heads(); ++h) {
            if (state.live_tokens(l, h).size() > budget) {
                under = false;
                break;
            }
        }
    }
    if (under || policy.strategy == EvictionStrategy::Full) {
        KeepSet keep(state.n_layers(), state.n_heads());
        for (std::size_t l = 0; l < state.n_layers(); ++l) {
            for (std::size_t h = 0; h < state.n_heads(); ++h) {
                keep.at(l, h) = state.live_tokens(l, h);
            }
        }
        return keep;
    }
    switch (policy.strategy) {
        case EvictionStrategy::Local:
            return select_keepset_local(n, budget, state.n_layers(), state.n_heads());
        case EvictionStrategy::H2O:
            return select_keepset_h2o(state, budget, n);
        case EvictionStrategy::A2SF:
            return select_keepset_a2sf(state, budget, n);
        default:
            break;
    }
    throw Error("BadConfig", "unknown eviction strategy");
}

void evict(KVCache& cache, ScoreState& state, const KeepSet& keep) {
    if (keep.n_layers != cache.n_layers() || keep.n_heads != cache.n_heads()) {
        throw Error("ShapeMismatch", "keepset shape does not match cache");
    }

    std::vector<std::vector<TokenIndex>> evicted(keep.sets.size());
    for (std::size_t l = 0; l < keep.n_layers; ++l) {
        for (std::size_t h = 0; h < keep.n_heads; ++h) {
            const auto& set = keep.at(l, h);
            auto& entries = cache.head(l, h);
            for (TokenIndex t : set) {
                const bool live = std::any_of(entries.begin(), entries.end(),
                                              [t](const KVEntry& e) { return e.token == t; });
                if (!live) {
                    throw Error("UnknownToken", "keepset references token " + std::to_string(t) +
                                                    " that is not in the cache");
                }
            }
            auto& out = evicted[l * keep.n_heads + h];
            std::erase_if(entries, [&](const KVEntry& e) {
                if (std::binary_search(set.begin(), set.end(), e.token)) return false;
                out.push_back(e.token);
                return true;
            });
        }
    }
    drop_scores(state, evicted);
}

}  // namespace kvtrim
