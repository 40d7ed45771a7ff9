// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <vector>

#include "kvtrim/error.hpp"
#include "kvtrim/oracle.hpp"
#include "kvtrim/runner.hpp"
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

using Tokens = std::vector<TokenIndex>;

/// Single-head trace from explicit lower-triangular rows.
AttentionTrace make_trace(const std::vector<std::vector<double>>& rows) {
    AttentionTrace t(1, 1, rows.size());
    for (std::size_t q = 1; q <= rows.size(); ++q) {
        REQUIRE(rows[q - 1].size() == q);
        auto dst = t.row(0, 0, q);
        std::copy(rows[q - 1].begin(), rows[q - 1].end(), dst.begin());
    }
    return t;
}

const std::vector<std::vector<double>> kHandRows = {{1.0}, {0.5, 0.5}, {0.2, 0.3, 0.5}};

}  // namespace

TEST_CASE("per-row oracle keeps the largest entries") {
    AttentionTrace t = make_trace(kHandRows);

    SUBCASE("worked example: [0.2, 0.3, 0.5] at budget 2") {
        MaskSequence m = ideal_mask(t, 2);
        CHECK(m.at(1, 0, 0) == Tokens{1});
        CHECK(m.at(2, 0, 0) == Tokens{1, 2});
        CHECK(m.at(3, 0, 0) == Tokens{2, 3});
    }
    SUBCASE("budget covering the whole row keeps it all") {
        MaskSequence m = ideal_mask(t, 3);
        CHECK(m.at(3, 0, 0) == Tokens{1, 2, 3});
    }
    SUBCASE("ties go to the newer token") {
        AttentionTrace u = make_trace({{1.0}, {0.5, 0.5}, {0.25, 0.5, 0.25}});
        MaskSequence m = ideal_mask(u, 1);
        CHECK(m.at(2, 0, 0) == Tokens{2});
        CHECK(m.at(3, 0, 0) == Tokens{2});
    }
    SUBCASE("a zero budget is rejected") {
        CHECK_ERROR_CODE(ideal_mask(t, 0), "ZeroBudget");
    }
}

TEST_CASE("the oracle is stateless: tokens can drop out and come back") {
    AttentionTrace t = make_trace({{1.0},
                                   {0.9, 0.1},
                                   {0.1, 0.1, 0.8},
                                   {0.7, 0.1, 0.1, 0.1}});
    MaskSequence m = ideal_mask(t, 1);
    CHECK(m.at(2, 0, 0) == Tokens{1});
    CHECK(m.at(3, 0, 0) == Tokens{3});  // token 1 drops out...
    CHECK(m.at(4, 0, 0) == Tokens{1});  // ...and re-enters, which no policy can do
}

TEST_CASE("oracle keepsets maximize kept mass over all same-size subsets") {
    for (std::uint64_t seed : {1, 2, 3}) {
        TraceGenConfig cfg;
        cfg.seq_len = 8;
        cfg.n_heads = 2;
        cfg.sink_strength = seed == 2 ? 4.0 : 0.0;
        cfg.seed = seed;
        AttentionTrace t = generate_synthetic_trace(cfg);
        for (std::size_t budget : {1, 2, 3}) {
            MaskSequence m = ideal_mask(t, budget);
            for (std::size_t h = 0; h < 2; ++h) {
                for (std::size_t q = 1; q <= 8; ++q) {
                    const auto row = t.row(0, h, q);
                    const auto& keep = m.at(q, 0, h);
                    const std::size_t take = std::min(budget, q);
                    REQUIRE(keep.size() == take);
                    double kept = 0.0;
                    for (TokenIndex k : keep) kept += row[k - 1];
                    // exhaustive scan of every subset of {1..q} of that size
                    for (unsigned bits = 0; bits < (1u << q); ++bits) {
                        if (std::popcount(bits) != static_cast<int>(take)) continue;
                        double mass = 0.0;
                        for (std::size_t k = 0; k < q; ++k)
                            if (bits & (1u << k)) mass += row[k];
                        CHECK(kept >= mass - 1e-12);
                    }
                }
            }
        }
    }
}

TEST_CASE("policy masks follow each policy's selection rule") {
    AttentionTrace t = make_trace(kHandRows);

    SUBCASE("full keeps every token at every step") {
        MaskSequence m = policy_mask(t, PolicySpec::full(), 2);
        for (std::size_t q = 1; q <= 3; ++q) {
            Tokens all(q);
            std::iota(all.begin(), all.end(), TokenIndex{1});
            CHECK(m.at(q, 0, 0) == all);
        }
    }
    SUBCASE("window policy slides a fixed window") {
        AttentionTrace u = make_trace({{1.0},
                                       {0.5, 0.5},
                                       {0.2, 0.3, 0.5},
                                       {0.1, 0.2, 0.3, 0.4}});
        MaskSequence m = policy_mask(u, PolicySpec::local(2), 10);
        CHECK(m.at(1, 0, 0) == Tokens{1});
        CHECK(m.at(2, 0, 0) == Tokens{1, 2});
        CHECK(m.at(3, 0, 0) == Tokens{2, 3});
        CHECK(m.at(4, 0, 0) == Tokens{3, 4});
    }
    SUBCASE("rank policy on the worked rows") {
        MaskSequence m = policy_mask(t, PolicySpec::a2sf(0.5), 2);
        CHECK(m.at(1, 0, 0) == Tokens{1});
        CHECK(m.at(2, 0, 0) == Tokens{1, 2});
        CHECK(m.at(3, 0, 0) == Tokens{1, 3});
    }
    SUBCASE("hybrid policy on the six-row example") {
        AttentionTrace u = make_trace({{1.0},
                                       {0.6, 0.4},
                                       {0.5, 0.1, 0.4},
                                       {0.5, 0.1, 0.3, 0.1},
                                       {0.5, 0.05, 0.3, 0.05, 0.1},
                                       {0.4, 0.05, 0.3, 0.05, 0.1, 0.1}});
        MaskSequence m = policy_mask(u, PolicySpec::h2o(), 4);
        CHECK(m.at(5, 0, 0) == Tokens{1, 3, 4, 5});
        CHECK(m.at(6, 0, 0) == Tokens{1, 3, 5, 6});
    }
}

TEST_CASE("policy masks satisfy eviction permanence; oracle masks need not") {
    TraceGenConfig cfg;
    cfg.seq_len = 48;
    cfg.n_heads = 2;
    cfg.seed = 9;
    AttentionTrace t = generate_synthetic_trace(cfg);

    auto permanent = [&](const MaskSequence& m) {
        for (std::size_t h = 0; h < m.n_heads; ++h) {
            for (std::size_t q = 2; q <= m.seq_len; ++q) {
                const auto& prev = m.at(q - 1, 0, h);
                for (TokenIndex k : m.at(q, 0, h)) {
                    if (k == q) continue;  // the newcomer
                    if (!std::binary_search(prev.begin(), prev.end(), k)) return false;
                }
            }
        }
        return true;
    };

    for (const PolicySpec& policy :
         {PolicySpec::a2sf(0.3), PolicySpec::h2o(), PolicySpec::local(6), PolicySpec::full()}) {
        MaskSequence m = policy_mask(t, policy, 6);
        CHECK_MESSAGE(permanent(m), policy.name());
        const std::size_t b = policy.effective_budget(6, 48);
        for (std::size_t q = 1; q <= 48; ++q)
            CHECK(m.at(q, 0, 0).size() == std::min(b, q));
    }
    // the per-row oracle on the same trace revokes evictions somewhere
    CHECK(!permanent(ideal_mask(t, 6)));
}

TEST_CASE("masked replay: zeroing, renormalization, and exact pass-through") {
    AttentionTrace t = make_trace(kHandRows);

    SUBCASE("full-budget oracle replay returns the trace bit-identically") {
        AttentionTrace out = replay_with_mask(t, ideal_mask(t, 3), true);
        CHECK(out == t);
    }
    SUBCASE("worked example: keep {2,3} of the last row, renormalized") {
        MaskSequence m = ideal_mask(t, 2);
        AttentionTrace out = replay_with_mask(t, m, true);
        const auto row = out.row(0, 0, 3);
        CHECK(row[0] == 0.0);
        CHECK(row[1] == doctest::Approx(0.375).epsilon(1e-15));
        CHECK(row[2] == doctest::Approx(0.625).epsilon(1e-15));
    }
    SUBCASE("a single survivor takes all the mass") {
        MaskSequence m(1, 1, 3);
        m.at(1, 0, 0) = {1};
        m.at(2, 0, 0) = {2};
        m.at(3, 0, 0) = {2};
        AttentionTrace out = replay_with_mask(t, m, true);
        CHECK(out.row(0, 0, 2)[0] == 0.0);
        CHECK(out.row(0, 0, 2)[1] == 1.0);
        const auto row = out.row(0, 0, 3);
        CHECK(row[0] == 0.0);
        CHECK(row[1] == 1.0);
        CHECK(row[2] == 0.0);
    }
    SUBCASE("without renormalization survivors keep their recorded values") {
        MaskSequence m = ideal_mask(t, 2);
        AttentionTrace out = replay_with_mask(t, m, false);
        const auto row = out.row(0, 0, 3);
        CHECK(row[0] == 0.0);
        CHECK(row[1] == 0.3);
        CHECK(row[2] == 0.5);
    }
    SUBCASE("a keepset with no mass is left as zeros") {
        AttentionTrace z = make_trace({{1.0}, {1.0, 0.0}});
        MaskSequence m(1, 1, 2);
        m.at(1, 0, 0) = {1};
        m.at(2, 0, 0) = {2};
        AttentionTrace out = replay_with_mask(z, m, true);
        CHECK(out.row(0, 0, 2)[0] == 0.0);
        CHECK(out.row(0, 0, 2)[1] == 0.0);
    }
    SUBCASE("mask shape must match the trace") {
        MaskSequence wrong(1, 1, 2);
        CHECK_ERROR_CODE(replay_with_mask(t, wrong, true), "ShapeMismatch");
    }
    SUBCASE("mask entries must lie inside the row") {
        MaskSequence m(1, 1, 3);
        m.at(1, 0, 0) = {1};
        m.at(2, 0, 0) = {5};
        m.at(3, 0, 0) = {1, 2, 3};
        CHECK_ERROR_CODE(replay_with_mask(t, m, true), "ShapeMismatch");
    }
}

TEST_CASE("renormalized replay restores row-stochastic rows") {
    TraceGenConfig cfg;
    cfg.seq_len = 40;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.sink_strength = 3.0;
    cfg.seed = 12;
    AttentionTrace t = generate_synthetic_trace(cfg);

    for (const PolicySpec& policy : {PolicySpec::a2sf(0.2), PolicySpec::h2o()}) {
        AttentionTrace out = replay_with_mask(t, policy_mask(t, policy, 8), true);
        out.validate(1e-9);  // nonneg, causal, sums back to 1 tightly
    }
    AttentionTrace raw = replay_with_mask(t, policy_mask(t, PolicySpec::a2sf(0.2), 8), false);
    // un-renormalized rows lose exactly the evicted mass: sums sit in (0, 1]
    for (std::size_t q = 1; q <= 40; ++q) {
        const auto row = raw.row(1, 1, q);
        double sum = 0.0;
        for (double v : row) sum += v;
        CHECK(sum > 0.0);
        CHECK(sum <= 1.0 + 1e-12);
    }
}

TEST_CASE("replaying a mask is not the same as running the decoder pruned") {
    // Same tokens, same keepsets: masking the full run's recorded rows still
    // differs from the rows a pruned decoder produces, because eviction feeds
    // back into later hidden states. The two must be compared, never conflated.
    DecoderConfig dc;
    dc.n_layers = 2;
    dc.n_heads = 2;
    dc.d_head = 8;
    dc.vocab_size = 16;
    dc.seed = 3;
    const std::vector<std::size_t> tokens = structured_token_stream(24, 16, 4);

    LiveRun full = run_full_live(dc, tokens);
    LiveRun pruned = run_policy_live(dc, tokens, PolicySpec::a2sf(0.3), 4);
    AttentionTrace replayed = replay_with_mask(full.trace, pruned.mask, true);

    REQUIRE(replayed.same_shape(pruned.trace));
    CHECK(!(replayed == pruned.trace));
    // Each run blanks what it ruled out, on its own schedule: the live row at
    // step q is computed before that step's eviction, so it can still score
    // the token evicted at q; the replayed row cannot.
    for (std::size_t q = 2; q <= 24; ++q) {
        const auto& keep_now = pruned.mask.at(q, 1, 0);
        const auto& keep_prev = pruned.mask.at(q - 1, 1, 0);
        const auto live_row = pruned.trace.row(1, 0, q);
        const auto replay_row = replayed.row(1, 0, q);
        for (TokenIndex k = 1; k <= q; ++k) {
            const bool live_during_step =
                k == q || std::binary_search(keep_prev.begin(), keep_prev.end(), k);
            if (!live_during_step) CHECK(live_row[k - 1] == 0.0);
            if (!std::binary_search(keep_now.begin(), keep_now.end(), k))
                CHECK(replay_row[k - 1] == 0.0);
        }
    }
}
