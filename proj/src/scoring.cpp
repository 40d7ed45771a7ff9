// SPDX-License-Identifier: Apache-2.0

#include "kvtrim/scoring.hpp"

#include <algorithm>
#include <cmath>

#include "kvtrim/error.hpp"

namespace kvtrim {

const std::vector<ScoreState::Slot>& ScoreState::head(std::size_t layer, std::size_t head) const {
    if (layer >= n_layers_ || head >= n_heads_) {
        throw Error("ShapeMismatch", "layer/head out of range for score state");
    }
    return heads_[layer * n_heads_ + head];
}

std::vector<TokenIndex> ScoreState::live_tokens(std::size_t layer, std::size_t head) const {
    const auto& slots = this->head(layer, head);
    std::vector<TokenIndex> out;
    out.reserve(slots.size());
    for (const auto& s : slots) out.push_back(s.token);
    return out;
}

ScoreState init_score_state(PolicyKind policy, std::size_t n_layers, std::size_t n_heads) {
    if (policy.type == PolicyType::A2SF && !(policy.alpha >= 0.0 && policy.alpha < 1.0)) {
        throw Error("BadAlpha", "A2SF alpha must satisfy 0 <= alpha < 1, got " +
                                    std::to_string(policy.alpha));
    }
    if (policy.type == PolicyType::Local && policy.window == 0) {
        throw Error("BadWindow", "Local window must be >= 1");
    }
    if (n_layers == 0 || n_heads == 0) {
        throw Error("BadConfig", "score state needs n_layers, n_heads >= 1");
    }
    ScoreState state;
    state.policy_ = policy;
    state.n_layers_ = n_layers;
    state.n_heads_ = n_heads;
    state.step_ = 0;
    state.heads_.assign(n_layers * n_heads, {});
    return state;
}

void update_scores(ScoreState& state, const std::vector<std::vector<double>>& rows) {
    if (rows.size() != state.heads_.size()) {
        throw Error("RowShapeMismatch", "expected " + std::to_string(state.heads_.size()) +
                                            " rows, got " + std::to_string(rows.size()));
    }
    const std::size_t n = state.step_ + 1;
    for (const auto& row : rows) {
        if (row.size() != n) {
            throw Error("RowShapeMismatch", "row length " + std::to_string(row.size()) +
                                                " does not match step " + std::to_string(n));
        }
    }

    const PolicyType type = state.policy_.type;
    // A2S is the alpha = 1 limit of the A2SF recurrence; multiplying by 1.0
    // keeps it bit-exact against plain column summation.
    const double decay = type == PolicyType::A2SF ? state.policy_.alpha : 1.0;
    const bool accumulate = type == PolicyType::A2S || type == PolicyType::A2SF;

    for (std::size_t slot = 0; slot < rows.size(); ++slot) {
        auto& head = state.heads_[slot];
        const auto& row = rows[slot];
        if (accumulate) {
            for (auto& s : head) {
                s.accumulator = decay * s.accumulator + row[s.token - 1];
            }
        }
        // The new token enters with its self-attention score (the q = k term).
        head.push_back({static_cast<TokenIndex>(n), accumulate ? row[n - 1] : 0.0});
    }
    state.step_ = n;
}

void drop_scores(ScoreState& state, const std::vector<std::vector<TokenIndex>>& evicted) {
    if (evicted.size() != state.heads_.size()) {
        throw Error("RowShapeMismatch", "evicted set count does not match head count");
    }
    for (std::size_t slot = 0; slot < evicted.size(); ++slot) {
        auto& head = state.heads_[slot];
        for (TokenIndex t : evicted[slot]) {
            auto it = std::find_if(head.begin(), head.end(),
                                   [t](const ScoreState::Slot& s) { return s.token == t; });
            if (it == head.end()) {
                throw Error("UnknownToken",
                            "evicting token " + std::to_string(t) + " that is not live");
            }
            head.erase(it);
        }
    }
}

std::vector<TokenIndex> rank_tokens(const ScoreState& state, std::size_t layer,
                                    std::size_t head) {
    const auto& slots = state.head(layer, head);
    if (slots.empty()) {
        throw Error("EmptyHead", "no live tokens to rank");
    }
    std::vector<TokenIndex> order;
    order.reserve(slots.size());
    for (const auto& s : slots) order.push_back(s.token);

    // slots are ascending by token, so token lookup is positional
    auto acc = [&](TokenIndex t) {
        auto it = std::lower_bound(slots.begin(), slots.end(), t,
                                   [](const ScoreState::Slot& s, TokenIndex v) { return s.token < v; });
        return it->accumulator;
    };
    std::sort(order.begin(), order.end(), [&](TokenIndex a, TokenIndex b) {
        const double aa = acc(a);
        const double ab = acc(b);
        if (aa != ab) return aa > ab;
        return a > b;  // ties break toward recency
    });
    return order;
}

std::vector<double> batch_a2sf(const std::vector<std::vector<double>>& rows, double alpha) {
    const std::size_t n = rows.size();
    for (std::size_t q = 1; q <= n; ++q) {
        if (rows[q - 1].size() != q) {
            throw Error("RowShapeMismatch", "row " + std::to_string(q) + " has length " +
                                                std::to_string(rows[q - 1].size()));
        }
    }
    std::vector<double> acc(n, 0.0);
    for (std::size_t k = 1; k <= n; ++k) {
        double a = 0.0;
        for (std::size_t q = k; q <= n; ++q) {
            a += std::pow(alpha, static_cast<double>(n - q)) * rows[q - 1][k - 1];
        }
        acc[k - 1] = a;
    }
    return acc;
}

}  // namespace kvtrim
