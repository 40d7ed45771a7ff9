// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "kvtrim/eviction.hpp"
#include "kvtrim/trace.hpp"

namespace kvtrim {

/// Per-(layer, head, step) keep sets: keep(q) is a sorted subset of {1..q}
/// of size min(B, q). Ideal masks are not nested across steps — a token may
/// leave and re-enter; policy masks satisfy eviction permanence.
struct MaskSequence {
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::size_t seq_len = 0;
    // [step q - 1][layer*n_heads + head]
    std::vector<std::vector<std::vector<TokenIndex>>> keeps;

    MaskSequence() = default;
    MaskSequence(std::size_t layers, std::size_t heads, std::size_t len)
        : n_layers(layers),
          n_heads(heads),
          seq_len(len),
          keeps(len, std::vector<std::vector<TokenIndex>>(layers * heads)) {}

    std::vector<TokenIndex>& at(std::size_t q, std::size_t layer, std::size_t head) {
        return keeps[q - 1][layer * n_heads + head];
    }
    const std::vector<TokenIndex>& at(std::size_t q, std::size_t layer, std::size_t head) const {
        return keeps[q - 1][layer * n_heads + head];
    }

    bool same_shape(const MaskSequence& other) const {
        return n_layers == other.n_layers && n_heads == other.n_heads &&
               seq_len == other.seq_len;
    }
};

/// The non-realizable upper bound: for every row, keep the min(B, q) largest
/// scores of that row (ties toward recency), with no state carried between
/// steps.
MaskSequence ideal_mask(const AttentionTrace& trace, std::size_t budget);

/// Replays the recorded rows through scoring + eviction and records each
/// step's keepset. Rows are consumed as recorded (no renormalization) at the
/// positions that are still live.
MaskSequence policy_mask(const AttentionTrace& trace, const PolicySpec& policy,
                         std::size_t budget);

/// Zeroes each row outside its keep set; with renormalize the survivors are
/// rescaled to sum to 1, which is what a softmax over the surviving tokens
/// would have produced.
AttentionTrace replay_with_mask(const AttentionTrace& trace, const MaskSequence& mask,
                                bool renormalize = true);

}  // namespace kvtrim
