// SPDX-License-Identifier: Apache-2.0

#include "kvtrim/runner.hpp"

#include <algorithm>
#include <numeric>

#include "kvtrim/error.hpp"
#include "kvtrim/rng.hpp"
#include "kvtrim/scoring.hpp"

namespace kvtrim {

std::size_t resolve_budget_for(BudgetConfig cfg, std::size_t reference_len) {
    if (cfg.mode == BudgetConfig::Mode::Ratio) cfg.reference_len = reference_len;
    return resolve_budget(cfg);
}

std::vector<std::size_t> random_token_stream(std::size_t len, std::size_t vocab,
                                             std::uint64_t seed) {
    if (vocab == 0) throw Error("BadConfig", "token stream needs a nonempty vocabulary");
    DetRng rng(seed);
    std::vector<std::size_t> tokens(len);
    for (std::size_t& t : tokens) t = rng.below(vocab);
    return tokens;
}

std::vector<std::size_t> structured_token_stream(std::size_t len, std::size_t vocab,
                                                 std::uint64_t seed) {
    if (vocab < 8)
        throw Error("BadConfig", "structured stream needs vocab >= 8, got " +
                                     std::to_string(vocab));
    // A reference block of ids 0..3 that never recur afterwards, followed by
    // free generation over the remaining ids. Later queries keep being drawn
    // to the block's keys (id-to-id affinities are position-free in this
    // decoder), so a recency window loses mass that importance ranking keeps.
    constexpr std::size_t kPrefixIds = 4;
    constexpr std::size_t kPrefixCopies = 3;
    DetRng rng(seed);
    std::vector<std::size_t> tokens(len);
    for (std::size_t i = 0; i < len; ++i) {
        if (i < kPrefixIds * kPrefixCopies && i + 1 < len)
            tokens[i] = i % kPrefixIds;
        else
            tokens[i] = kPrefixIds + rng.below(vocab - kPrefixIds);
    }
    return tokens;
}

namespace {

/// Shared stepping loop. budget = 0 disables eviction (the full baseline).
LiveRun run_live(const DecoderConfig& cfg, std::span<const std::size_t> tokens,
                 const PolicySpec& policy, std::size_t budget) {
    if (tokens.empty()) throw Error("BadConfig", "live run needs at least one token");
    const std::size_t L = cfg.n_layers;
    const std::size_t H = cfg.n_heads;
    const std::size_t T = tokens.size();

    ToyDecoder decoder(cfg);
    KVCache cache(L, H, budget);
    ScoreState state = init_score_state(policy.scoring(), L, H);

    LiveRun run;
    run.trace = AttentionTrace(L, H, T, "live seed=" + std::to_string(cfg.seed));
    run.mask = MaskSequence(L, H, T);
    run.hidden.reserve(T);

    std::vector<std::vector<TokenIndex>> expected_live(L * H);
    for (std::size_t i = 0; i < T; ++i) {
        const TokenIndex n = static_cast<TokenIndex>(i + 1);
        for (std::size_t slot = 0; slot < L * H; ++slot)
            expected_live[slot] = state.live_tokens(slot / H, slot % H);

        StepResult step = decoder_step(decoder, cache, tokens[i], expected_live);
        update_scores(state, step.score_rows);

        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t h = 0; h < H; ++h) {
                const std::vector<double>& src = step.score_rows[l * H + h];
                std::span<double> dst = run.trace.row(l, h, n);
                std::copy(src.begin(), src.end(), dst.begin());
            }
        run.hidden.push_back(std::move(step.hidden_out));

        if (budget == 0) {
            for (std::size_t slot = 0; slot < L * H; ++slot) {
                std::vector<TokenIndex>& keep = run.mask.keeps[n - 1][slot];
                keep.resize(n);
                std::iota(keep.begin(), keep.end(), TokenIndex{1});
            }
        } else {
            KeepSet keep = select_keepset(policy, state, budget, n);
            evict(cache, state, keep);
            run.mask.keeps[n - 1] = std::move(keep.sets);
        }
    }
    return run;
}

}  // namespace

LiveRun run_full_live(const DecoderConfig& cfg, std::span<const std::size_t> tokens) {
    return run_live(cfg, tokens, PolicySpec::full(), 0);
}

LiveRun run_policy_live(const DecoderConfig& cfg, std::span<const std::size_t> tokens,
                        const PolicySpec& policy, std::size_t budget) {
    if (budget == 0) throw Error("ZeroBudget", "evicting run needs a budget of at least 1");
    return run_live(cfg, tokens, policy, budget);
}

namespace {

SimilarityReport score_against_ideal(const AttentionTrace& pruned, const MaskSequence& pruned_mask,
                                     const AttentionTrace& reference, std::size_t budget,
                                     bool renormalize, const PolicySpec& policy) {
    const MaskSequence ideal = ideal_mask(reference, budget);
    const AttentionTrace ideal_pruned = replay_with_mask(reference, ideal, renormalize);

    SimilarityReport report;
    report.policy = policy.name();
    if (policy.strategy == EvictionStrategy::A2SF) report.alpha = policy.alpha;
    report.budget = budget;
    report.n_layers = reference.n_layers();
    report.n_heads = reference.n_heads();
    report.cosine_per_head = cosine_similarity(pruned, ideal_pruned, &report.cosine_mean);
    report.overlap_per_head = mask_overlap_per_head(ideal, pruned_mask);
    report.mask_overlap = mask_overlap(ideal, pruned_mask);
    return report;
}

}  // namespace

SimilarityReport run_replay_experiment(const AttentionTrace& trace, const PolicySpec& policy,
                                       const BudgetConfig& budget, bool renormalize,
                                       std::optional<std::uint64_t> seed,
                                       MaskSequence* mask_out) {
    const std::size_t resolved = resolve_budget_for(budget, trace.seq_len());
    const std::size_t b = policy.effective_budget(resolved, trace.seq_len());

    MaskSequence mask = policy_mask(trace, policy, resolved);
    const AttentionTrace pruned = replay_with_mask(trace, mask, renormalize);

    SimilarityReport report = score_against_ideal(pruned, mask, trace, b, renormalize, policy);
    report.seed = seed;
    if (mask_out != nullptr) *mask_out = std::move(mask);
    return report;
}

SimilarityReport run_live_experiment(const DecoderConfig& cfg, std::span<const std::size_t> tokens,
                                     const PolicySpec& policy, const BudgetConfig& budget,
                                     MaskSequence* mask_out) {
    const std::size_t resolved = resolve_budget_for(budget, tokens.size());
    const std::size_t b = policy.effective_budget(resolved, tokens.size());

    const LiveRun full = run_full_live(cfg, tokens);
    LiveRun pruned = run_policy_live(cfg, tokens, policy, b);

    SimilarityReport report =
        score_against_ideal(pruned.trace, pruned.mask, full.trace, b, true, policy);
    report.output_drift = output_drift(full.hidden, pruned.hidden);
    report.seed = cfg.seed;
    if (mask_out != nullptr) *mask_out = std::move(pruned.mask);
    return report;
}

}  // namespace kvtrim
