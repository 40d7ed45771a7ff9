// SPDX-License-Identifier: Apache-2.0

#include "kvtrim/decoder.hpp"

#include <algorithm>
#include <cmath>

#include "kvtrim/error.hpp"
#include "kvtrim/rng.hpp"

namespace kvtrim {

ToyDecoder::ToyDecoder(const DecoderConfig& cfg) : cfg_(cfg) {
    if (cfg.n_layers == 0 || cfg.n_heads == 0 || cfg.d_head == 0 || cfg.vocab_size == 0) {
        throw Error("BadConfig", "decoder dimensions must all be >= 1");
    }
    const std::size_t dm = d_model();
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
    DetRng rng(cfg.seed);

    // Fixed draw order: embeddings, then per layer, per head, Wq, Wk, Wv.
    embeddings_.resize(cfg.vocab_size * dm);
    for (auto& w : embeddings_) w = rng.uniform(-bound, bound);

    const std::size_t proj = cfg.n_layers * cfg.n_heads * cfg.d_head * dm;
    wq_.resize(proj);
    wk_.resize(proj);
    wv_.resize(proj);
    const std::size_t per_head = cfg.d_head * dm;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const std::size_t base = (l * cfg.n_heads + h) * per_head;
            for (std::size_t i = 0; i < per_head; ++i) wq_[base + i] = rng.uniform(-bound, bound);
            for (std::size_t i = 0; i < per_head; ++i) wk_[base + i] = rng.uniform(-bound, bound);
            for (std::size_t i = 0; i < per_head; ++i) wv_[base + i] = rng.uniform(-bound, bound);
        }
    }
}

std::span<const double> ToyDecoder::embedding(std::size_t token_id) const {
    if (token_id >= cfg_.vocab_size) {
        throw Error("BadToken", "token id " + std::to_string(token_id) + " >= vocab size " +
                                    std::to_string(cfg_.vocab_size));
    }
    return {embeddings_.data() + token_id * d_model(), d_model()};
}

std::span<const double> ToyDecoder::wq(std::size_t layer, std::size_t head) const {
    const std::size_t per_head = cfg_.d_head * d_model();
    return {wq_.data() + (layer * cfg_.n_heads + head) * per_head, per_head};
}

std::span<const double> ToyDecoder::wk(std::size_t layer, std::size_t head) const {
    const std::size_t per_head = cfg_.d_head * d_model();
    return {wk_.data() + (layer * cfg_.n_heads + head) * per_head, per_head};
}

std::span<const double> ToyDecoder::wv(std::size_t layer, std::size_t head) const {
    const std::size_t per_head = cfg_.d_head * d_model();
    return {wv_.data() + (layer * cfg_.n_heads + head) * per_head, per_head};
}

KVCache::KVCache(std::size_t n_layers, std::size_t n_heads, std::size_t capacity)
    : n_layers_(n_layers), n_heads_(n_heads), capacity_(capacity), heads_(n_layers * n_heads) {}

std::vector<KVEntry>& KVCache::head(std::size_t layer, std::size_t head) {
    return heads_[layer * n_heads_ + head];
}

const std::vector<KVEntry>& KVCache::head(std::size_t layer, std::size_t head) const {
    return heads_[layer * n_heads_ + head];
}

std::vector<TokenIndex> KVCache::live_tokens(std::size_t layer, std::size_t head) const {
    const auto& entries = heads_[layer * n_heads_ + head];
    std::vector<TokenIndex> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.token);
    return out;
}

std::vector<double> softmax_masked_row(std::span<const double> logits,
                                       std::span<const TokenIndex> keep) {
    if (keep.empty()) {
        throw Error("EmptyKeepSet", "softmax over an empty keep set");
    }
    for (TokenIndex k : keep) {
        if (k < 1 || k > logits.size()) {
            throw Error("ShapeMismatch", "keep index " + std::to_string(k) +
                                             " outside row of length " +
                                             std::to_string(logits.size()));
        }
        if (!std::isfinite(logits[k - 1])) {
            throw Error("NonFiniteInput", "non-finite logit at kept position " + std::to_string(k));
        }
    }

    double mx = logits[keep[0] - 1];
    for (TokenIndex k : keep) mx = std::max(mx, logits[k - 1]);

    std::vector<double> out(logits.size(), 0.0);
    double sum = 0.0;
    for (TokenIndex k : keep) {
        const double e = std::exp(logits[k - 1] - mx);
        out[k - 1] = e;
        sum += e;
    }
    for (TokenIndex k : keep) out[k - 1] /= sum;
    return out;
}

namespace {

// y = M x for row-major M [rows][cols]
void mat_vec(std::span<const double> m, std::span<const double> x, std::span<double> y) {
    const std::size_t rows = y.size();
    const std::size_t cols = x.size();
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        const double* mr = m.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) acc += mr[c] * x[c];
        y[r] = acc;
    }
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

}  // namespace

StepResult decoder_step(const ToyDecoder& decoder, KVCache& cache, std::size_t token_id,
                        const std::vector<std::vector<TokenIndex>>& expected_live) {
    const auto& cfg = decoder.config();
    if (token_id >= cfg.vocab_size) {
        throw Error("BadToken", "token id " + std::to_string(token_id) + " >= vocab size " +
                                    std::to_string(cfg.vocab_size));
    }
    if (!expected_live.empty()) {
        if (expected_live.size() != cfg.n_layers * cfg.n_heads) {
            throw Error("CacheKeepsetMismatch", "keepset count does not match decoder heads");
        }
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            for (std::size_t h = 0; h < cfg.n_heads; ++h) {
                if (cache.live_tokens(l, h) != expected_live[l * cfg.n_heads + h]) {
                    throw Error("CacheKeepsetMismatch",
                                "cache contents disagree with the caller's keepset");
                }
            }
        }
    }

    // The new token's index is one past the newest entry (heads advance in
    // lockstep, so any head's tail works).
    TokenIndex new_token = 1;
    {
        const auto& first = cache.head(0, 0);
        if (!first.empty()) new_token = first.back().token + 1;
    }

    const std::size_t dm = decoder.d_model();
    const std::size_t dh = cfg.d_head;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<double> hidden(decoder.embedding(token_id).begin(),
                               decoder.embedding(token_id).end());

    StepResult result;
    result.score_rows.resize(cfg.n_layers * cfg.n_heads);

    std::vector<double> q(dh), k(dh), v(dh);
    std::vector<double> attn_out(dm);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        std::fill(attn_out.begin(), attn_out.end(), 0.0);
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            mat_vec(decoder.wq(l, h), hidden, q);
            mat_vec(decoder.wk(l, h), hidden, k);
            mat_vec(decoder.wv(l, h), hidden, v);

            auto& entries = cache.head(l, h);
            entries.push_back({new_token, k, v});

            // Dense length-n logit row; only live positions are unmasked.
            std::vector<double> logits(new_token, 0.0);
            std::vector<TokenIndex> keep;
            keep.reserve(entries.size());
            for (const auto& e : entries) {
                logits[e.token - 1] = dot(q, e.key) * scale;
                keep.push_back(e.token);
            }
            std::vector<double> probs = softmax_masked_row(logits, keep);

            double* head_out = attn_out.data() + h * dh;
            for (const auto& e : entries) {
                const double p = probs[e.token - 1];
                for (std::size_t i = 0; i < dh; ++i) head_out[i] += p * e.value[i];
            }
            result.score_rows[l * cfg.n_heads + h] = std::move(probs);
        }
        for (std::size_t i = 0; i < dm; ++i) hidden[i] += attn_out[i];
    }

    result.hidden_out = std::move(hidden);
    return result;
}

}  // namespace kvtrim
