// SPDX-License-Identifier: Apache-2.0

#include "kvtrim/oracle.hpp"

#include <algorithm>
#include <numeric>

#include "kvtrim/error.hpp"

namespace kvtrim {

MaskSequence ideal_mask(const AttentionTrace& trace, std::size_t budget) {
    if (budget == 0) {
        throw Error("ZeroBudget", "ideal mask needs a budget of at least 1");
    }
    MaskSequence mask(trace.n_layers(), trace.n_heads(), trace.seq_len());
    std::vector<TokenIndex> order;
    for (std::size_t l = 0; l < trace.n_layers(); ++l) {
        for (std::size_t h = 0; h < trace.n_heads(); ++h) {
            for (std::size_t q = 1; q <= trace.seq_len(); ++q) {
                const auto row = trace.row(l, h, q);
                order.resize(q);
                std::iota(order.begin(), order.end(), TokenIndex{1});
                const std::size_t take = std::min(budget, q);
                std::partial_sort(order.begin(), order.begin() + take, order.end(),
                                  [&](TokenIndex a, TokenIndex b) {
                                      if (row[a - 1] != row[b - 1]) return row[a - 1] > row[b - 1];
                                      return a > b;  // ties toward recency
                                  });
                auto& keep = mask.at(q, l, h);
                keep.assign(order.begin(), order.begin() + take);
                std::sort(keep.begin(), keep.end());
            }
        }
    }
    return mask;
}

MaskSequence policy_mask(const AttentionTrace& trace, const PolicySpec& policy,
                         std::size_t budget) {
    const std::size_t L = trace.n_layers();
    const std::size_t H = trace.n_heads();
    const std::size_t T = trace.seq_len();
    const std::size_t b = policy.effective_budget(budget, T);

    ScoreState state = init_score_state(policy.scoring(), L, H);
    MaskSequence mask(L, H, T);

    std::vector<std::vector<double>> rows(L * H);
    for (std::size_t q = 1; q <= T; ++q) {
        for (std::size_t l = 0; l < L; ++l) {
            for (std::size_t h = 0; h < H; ++h) {
                const auto r = trace.row(l, h, q);
                rows[l * H + h].assign(r.begin(), r.end());
            }
        }
        update_scores(state, rows);
        KeepSet keep = select_keepset(policy, state, b, static_cast<TokenIndex>(q));

        std::vector<std::vector<TokenIndex>> evicted(L * H);
        for (std::size_t slot = 0; slot < L * H; ++slot) {
            const auto live = state.live_tokens(slot / H, slot % H);
            const auto& kept = keep.sets[slot];
            for (TokenIndex t : live) {
                if (!std::binary_search(kept.begin(), kept.end(), t)) {
                    evicted[slot].push_back(t);
                }
            }
            mask.keeps[q - 1][slot] = kept;
        }
        drop_scores(state, evicted);
    }
    return mask;
}

AttentionTrace replay_with_mask(const AttentionTrace& trace, const MaskSequence& mask,
                                bool renormalize) {
    if (mask.n_layers != trace.n_layers() || mask.n_heads != trace.n_heads() ||
        mask.seq_len != trace.seq_len()) {
        throw Error("ShapeMismatch", "mask shape does not match trace");
    }
    AttentionTrace out(trace.n_layers(), trace.n_heads(), trace.seq_len(), trace.provenance());
    for (std::size_t l = 0; l < trace.n_layers(); ++l) {
        for (std::size_t h = 0; h < trace.n_heads(); ++h) {
            for (std::size_t q = 1; q <= trace.seq_len(); ++q) {
                const auto src = trace.row(l, h, q);
                auto dst = out.row(l, h, q);
                const auto& keep = mask.at(q, l, h);
                if (keep.size() == q) {  // full keep: the row passes through bit-unchanged
                    std::copy(src.begin(), src.end(), dst.begin());
                    continue;
                }
                double kept_mass = 0.0;
                for (TokenIndex k : keep) {
                    if (k < 1 || k > q) {
                        throw Error("ShapeMismatch", "mask keeps token " + std::to_string(k) +
                                                         " outside row " + std::to_string(q));
                    }
                    dst[k - 1] = src[k - 1];
                    kept_mass += src[k - 1];
                }
                if (renormalize && kept_mass > 0.0) {
                    for (TokenIndex k : keep) dst[k - 1] /= kept_mass;
                }
            }
        }
    }
    return out;
}

}  // namespace kvtrim
