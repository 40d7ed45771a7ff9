// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <vector>

#include "kvtrim/decoder.hpp"
#include "kvtrim/error.hpp"
#include "kvtrim/eviction.hpp"
#include "kvtrim/scoring.hpp"
#include "kvtrim/trace.hpp"

using namespace kvtrim;

#define CHECK_ERROR_CODE(expr, expected_code)                 \
    do {                                                      \
        bool threw_ = false;                                  \
        try {                                                 \
            expr;                                             \
        } catch (const Error& e_) {                           \
            threw_ = true;                                    \
            CHECK(e_.code() == expected_code);                \
        }                                                     \
        CHECK_MESSAGE(threw_, "expected error " expected_code); \
    } while (0)

namespace {

ScoreState feed(PolicyKind policy, const std::vector<std::vector<double>>& rows,
                std::size_t n_heads = 1) {
    ScoreState state = init_score_state(policy, 1, n_heads);
    for (const auto& row : rows) {
        std::vector<std::vector<double>> per_head(n_heads, row);
        update_scores(state, per_head);
    }
    return state;
}

using Tokens = std::vector<TokenIndex>;

}  // namespace

TEST_CASE("budget resolution: worked examples and error cases") {
    CHECK(resolve_budget(BudgetConfig::ratio(0.2, 100)) == 20);
    CHECK(resolve_budget(BudgetConfig::ratio(0.2, 4)) == 1);  // clamped up from 0
    CHECK(resolve_budget(BudgetConfig::ratio(1.0, 7)) == 7);
    CHECK(resolve_budget(BudgetConfig::absolute(12)) == 12);

    CHECK_ERROR_CODE(resolve_budget(BudgetConfig::absolute(0)), "ZeroBudget");
    CHECK_ERROR_CODE(resolve_budget(BudgetConfig::ratio(0.2, 0)), "ZeroBudget");
    CHECK_ERROR_CODE(resolve_budget(BudgetConfig::ratio(0.0, 10)), "BadRatio");
    CHECK_ERROR_CODE(resolve_budget(BudgetConfig::ratio(1.2, 10)), "BadRatio");
    CHECK_ERROR_CODE(resolve_budget(BudgetConfig::ratio(-0.5, 10)), "BadRatio");
}

TEST_CASE("rank selection keeps the top scorers and always the current token") {
    SUBCASE("worked example: decayed scores on three rows, budget 2") {
        // accumulators [0.70, 0.55, 0.50] -> top-2 {1,2}; token 3 displaces 2
        ScoreState s = feed(PolicyKind::a2sf(0.5), {{1.0}, {0.5, 0.5}, {0.2, 0.3, 0.5}});
        KeepSet keep = select_keepset_a2sf(s, 2, 3);
        CHECK(keep.at(0, 0) == Tokens{1, 3});
    }
    SUBCASE("worked example: uniform tie, budget 2 of 4") {
        // recency breaks the four-way tie, keeping the newest two
        ScoreState s = feed(PolicyKind::a2sf(0.0),
                            {{1.0}, {0.5, 0.5}, {1.0 / 3, 1.0 / 3, 1.0 / 3},
                             {0.25, 0.25, 0.25, 0.25}});
        KeepSet keep = select_keepset_a2sf(s, 2, 4);
        CHECK(keep.at(0, 0) == Tokens{3, 4});
    }
    SUBCASE("under budget keeps all live tokens") {
        ScoreState s = feed(PolicyKind::a2s(), {{1.0}, {0.5, 0.5}});
        KeepSet keep = select_keepset_a2sf(s, 8, 2);
        CHECK(keep.at(0, 0) == Tokens{1, 2});
    }
}

TEST_CASE("window selection is purely positional") {
    SUBCASE("worked example: token 10, window 4") {
        KeepSet keep = select_keepset_local(10, 4, 1, 1);
        CHECK(keep.at(0, 0) == Tokens{7, 8, 9, 10});
    }
    SUBCASE("short sequences keep everything") {
        CHECK(select_keepset_local(3, 4, 1, 1).at(0, 0) == Tokens{1, 2, 3});
        CHECK(select_keepset_local(1, 4, 1, 1).at(0, 0) == Tokens{1});
    }
    SUBCASE("all heads get the same window") {
        KeepSet keep = select_keepset_local(10, 4, 2, 3);
        for (std::size_t l = 0; l < 2; ++l)
            for (std::size_t h = 0; h < 3; ++h) CHECK(keep.at(l, h) == Tokens{7, 8, 9, 10});
    }
    SUBCASE("window 0 is rejected") {
        CHECK_ERROR_CODE(select_keepset_local(10, 0, 1, 1), "BadWindow");
    }
}

TEST_CASE("hybrid selection splits recency and rank") {
    // Column sums: t1=3.5, t2=0.7, t3=1.3, t4=0.2, t5=0.2, t6=0.1
    const std::vector<std::vector<double>> rows = {
        {1.0},
        {0.6, 0.4},
        {0.5, 0.1, 0.4},
        {0.5, 0.1, 0.3, 0.1},
        {0.5, 0.05, 0.3, 0.05, 0.1},
        {0.4, 0.05, 0.3, 0.05, 0.1, 0.1},
    };
    ScoreState s = feed(PolicyKind::a2s(), rows);

    SUBCASE("worked example: budget 4 of 6") {
        // recent half {5,6}; best two of the rest are 1 and 3
        KeepSet keep = select_keepset_h2o(s, 4, 6);
        CHECK(keep.at(0, 0) == Tokens{1, 3, 5, 6});
    }
    SUBCASE("odd budget gives the extra slot to the rank half") {
        // floor(5/2)=2 recent, 3 selective -> {1,2,3} by rank
        KeepSet keep = select_keepset_h2o(s, 5, 6);
        CHECK(keep.at(0, 0) == Tokens{1, 2, 3, 5, 6});
    }
    SUBCASE("budget 2 keeps the newest token plus the top scorer") {
        KeepSet keep = select_keepset_h2o(s, 2, 6);
        CHECK(keep.at(0, 0) == Tokens{1, 6});
    }
    SUBCASE("under budget keeps everything") {
        KeepSet keep = select_keepset_h2o(s, 6, 6);
        CHECK(keep.at(0, 0) == Tokens{1, 2, 3, 4, 5, 6});
    }
    SUBCASE("budgets below 2 cannot be split") {
        CHECK_ERROR_CODE(select_keepset_h2o(s, 1, 6), "BudgetTooSmallForHybrid");
    }
    SUBCASE("the query must be the newest live token") {
        CHECK_ERROR_CODE(select_keepset_h2o(s, 4, 9), "UnknownToken");
    }
}

TEST_CASE("hybrid keepsets retain the first column on a sinked stream") {
    // Feed a strong-sink trace through the full per-step protocol: at every
    // pruned step the keepset is the trailing window plus rank picks, and the
    // sink token never drops out.
    TraceGenConfig cfg;
    cfg.seq_len = 32;
    cfg.sink_strength = 8.0;
    cfg.seed = 11;
    AttentionTrace t = generate_synthetic_trace(cfg);

    const std::size_t budget = 6;
    ScoreState s = init_score_state(PolicyKind::a2s(), 1, 1);
    std::vector<std::vector<double>> rows(1);
    for (TokenIndex q = 1; q <= 32; ++q) {
        const auto r = t.row(0, 0, q);
        rows[0].assign(r.begin(), r.end());
        update_scores(s, rows);
        if (s.head(0, 0).size() <= budget) continue;
        KeepSet keep = select_keepset_h2o(s, budget, q);
        const auto& set = keep.at(0, 0);
        CHECK(set.size() == budget);
        CHECK(std::binary_search(set.begin(), set.end(), TokenIndex{1}));
        // trailing floor(B/2) positions are always present
        for (TokenIndex c = q - budget / 2 + 1; c <= q; ++c)
            CHECK(std::binary_search(set.begin(), set.end(), c));
        // prune the score state to the keepset before the next step
        std::vector<TokenIndex> gone;
        for (TokenIndex c : s.live_tokens(0, 0))
            if (!std::binary_search(set.begin(), set.end(), c)) gone.push_back(c);
        drop_scores(s, {gone});
    }
    CHECK(s.head(0, 0).size() == budget);
}

TEST_CASE("policy speccing: names, scoring backends, effective budgets") {
    CHECK(PolicySpec::full().name() == "full");
    CHECK(PolicySpec::local(16).name() == "local");
    CHECK(PolicySpec::h2o().name() == "h2o");
    CHECK(PolicySpec::a2sf(0.2).name() == "a2sf");

    CHECK(PolicySpec::h2o().scoring().type == PolicyType::A2S);
    CHECK(PolicySpec::a2sf(0.2).scoring().type == PolicyType::A2SF);
    CHECK(PolicySpec::a2sf(0.2).scoring().alpha == 0.2);
    CHECK(PolicySpec::local(16).scoring().type == PolicyType::Local);
    CHECK(PolicySpec::full().scoring().type == PolicyType::Full);

    CHECK(PolicySpec::full().effective_budget(20, 100) == 100);
    CHECK(PolicySpec::local(16).effective_budget(20, 100) == 16);
    CHECK(PolicySpec::local().effective_budget(20, 100) == 20);  // window <- budget
    CHECK(PolicySpec::h2o().effective_budget(20, 100) == 20);
    CHECK(PolicySpec::a2sf(0.2).effective_budget(20, 100) == 20);
}

TEST_CASE("the generic selector prunes only once the budget is exceeded") {
    ScoreState s = init_score_state(PolicyKind::a2sf(0.5), 1, 1);
    std::vector<std::vector<double>> rows(1);
    const std::vector<std::vector<double>> hand = {{1.0}, {0.5, 0.5}, {0.2, 0.3, 0.5}};
    for (TokenIndex q = 1; q <= 3; ++q) {
        rows[0] = hand[q - 1];
        update_scores(s, rows);
        KeepSet keep = select_keepset(PolicySpec::a2sf(0.5), s, 2, q);
        if (q <= 2) {
            CHECK(keep.at(0, 0).size() == q);  // under budget: identity
        } else {
            CHECK(keep.at(0, 0) == Tokens{1, 3});
        }
    }
    SUBCASE("full policy never prunes") {
        KeepSet keep = select_keepset(PolicySpec::full(), s, 2, 3);
        CHECK(keep.at(0, 0) == Tokens{1, 2, 3});
    }
    SUBCASE("window policy delegates to the positional rule") {
        KeepSet keep = select_keepset(PolicySpec::local(), s, 2, 3);
        CHECK(keep.at(0, 0) == Tokens{2, 3});
    }
}

TEST_CASE("physical eviction trims cache and scores together") {
    DecoderConfig dc;
    ToyDecoder dec(dc);
    KVCache cache(1, 1);
    ScoreState s = init_score_state(PolicyKind::a2s(), 1, 1);
    for (TokenIndex t = 1; t <= 4; ++t) {
        StepResult r = decoder_step(dec, cache, t % dc.vocab_size);
        update_scores(s, r.score_rows);
    }

    SUBCASE("keepset shape must match the cache") {
        KeepSet wrong(2, 1);
        CHECK_ERROR_CODE(evict(cache, s, wrong), "ShapeMismatch");
    }
    SUBCASE("keepset must reference live tokens") {
        KeepSet keep(1, 1);
        keep.at(0, 0) = {1, 7};
        CHECK_ERROR_CODE(evict(cache, s, keep), "UnknownToken");
    }
    SUBCASE("eviction leaves exactly the keepset, in cache and scores") {
        KeepSet keep(1, 1);
        keep.at(0, 0) = {1, 4};
        evict(cache, s, keep);
        CHECK(cache.live_tokens(0, 0) == Tokens{1, 4});
        CHECK(s.live_tokens(0, 0) == Tokens{1, 4});
    }
    SUBCASE("keeping everything is a no-op") {
        KeepSet keep(1, 1);
        keep.at(0, 0) = {1, 2, 3, 4};
        evict(cache, s, keep);
        CHECK(cache.live_tokens(0, 0) == Tokens{1, 2, 3, 4});
    }
}

TEST_CASE("protocol invariants: cache size stays at min(budget, n), evictions are permanent") {
    DecoderConfig dc;
    dc.n_layers = 2;
    dc.n_heads = 2;
    dc.vocab_size = 16;
    dc.seed = 5;
    ToyDecoder dec(dc);
    KVCache cache(dc.n_layers, dc.n_heads);
    const std::size_t budget = 4;
    ScoreState s = init_score_state(PolicyKind::a2sf(0.3), dc.n_layers, dc.n_heads);

    std::vector<std::vector<bool>> ever_evicted(dc.n_layers * dc.n_heads,
                                                std::vector<bool>(41, false));
    for (TokenIndex q = 1; q <= 40; ++q) {
        StepResult r = decoder_step(dec, cache, (q * 7) % 16);
        update_scores(s, r.score_rows);
        KeepSet keep = select_keepset(PolicySpec::a2sf(0.3), s, budget, q);
        evict(cache, s, keep);
        for (std::size_t l = 0; l < dc.n_layers; ++l) {
            for (std::size_t h = 0; h < dc.n_heads; ++h) {
                const auto live = cache.live_tokens(l, h);
                CHECK(live.size() == std::min<std::size_t>(budget, q));
                CHECK(live.back() == q);  // the current token is always kept
                auto& dead = ever_evicted[l * dc.n_heads + h];
                for (TokenIndex t : live) CHECK(!dead[t]);  // no resurrection
                std::vector<bool> is_live(41, false);
                for (TokenIndex t : live) is_live[t] = true;
                for (TokenIndex t = 1; t <= q; ++t)
                    if (!is_live[t]) dead[t] = true;
            }
        }
    }
}

TEST_CASE("heads are pruned independently when their scores differ") {
    // Two heads with opposite importance profiles must produce different
    // keepsets under rank selection.
    ScoreState s = init_score_state(PolicyKind::a2s(), 1, 2);
    const std::vector<std::vector<double>> head_a = {{1.0}, {0.9, 0.1}, {0.8, 0.1, 0.1}};
    const std::vector<std::vector<double>> head_b = {{1.0}, {0.1, 0.9}, {0.1, 0.8, 0.1}};
    for (std::size_t q = 0; q < 3; ++q) {
        update_scores(s, {head_a[q], head_b[q]});
    }
    KeepSet keep = select_keepset_a2sf(s, 2, 3);
    CHECK(keep.at(0, 0) == Tokens{1, 3});
    CHECK(keep.at(0, 1) == Tokens{2, 3});
}
