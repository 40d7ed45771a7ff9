// SPDX-License-Identifier: Apache-2.0

#include "kvtrim/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "kvtrim/error.hpp"

namespace kvtrim {

std::vector<double> cosine_similarity(const AttentionTrace& a, const AttentionTrace& b,
                                      double* mean) {
    if (!a.same_shape(b)) {
        throw Error("ShapeMismatch", "cosine inputs have different shapes");
    }
    std::vector<double> out;
    out.reserve(a.head_count());
    for (std::size_t l = 0; l < a.n_layers(); ++l) {
        for (std::size_t h = 0; h < a.n_heads(); ++h) {
            const auto& va = a.head_data(l, h);
            const auto& vb = b.head_data(l, h);
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (std::size_t i = 0; i < va.size(); ++i) {
                dot += va[i] * vb[i];
                na += va[i] * va[i];
                nb += vb[i] * vb[i];
            }
            if (na == 0.0 || nb == 0.0) {
                throw Error("ZeroVector", "cosine against an all-zero head");
            }
            // identical heads score exactly 1 (the full-policy identity)
            out.push_back(va == vb ? 1.0 : dot / (std::sqrt(na) * std::sqrt(nb)));
        }
    }
    if (mean) {
        double s = 0.0;
        for (double c : out) s += c;
        *mean = s / static_cast<double>(out.size());
    }
    return out;
}

std::vector<double> mask_overlap_per_head(const MaskSequence& m1, const MaskSequence& m2) {
    if (!m1.same_shape(m2)) {
        throw Error("ShapeMismatch", "mask overlaps need equal shapes");
    }
    const std::size_t slots = m1.n_layers * m1.n_heads;
    std::vector<double> out(slots, 0.0);
    for (std::size_t slot = 0; slot < slots; ++slot) {
        double acc = 0.0;
        for (std::size_t q = 1; q <= m1.seq_len; ++q) {
            const auto& k1 = m1.keeps[q - 1][slot];
            const auto& k2 = m2.keeps[q - 1][slot];
            if (k1.empty()) {
                throw Error("ShapeMismatch", "empty keep set in overlap");
            }
            std::size_t inter = 0;
            for (TokenIndex t : k1) {
                if (std::binary_search(k2.begin(), k2.end(), t)) ++inter;
            }
            acc += static_cast<double>(inter) / static_cast<double>(k1.size());
        }
        out[slot] = acc / static_cast<double>(m1.seq_len);
    }
    return out;
}

double mask_overlap(const MaskSequence& m1, const MaskSequence& m2) {
    const auto per_head = mask_overlap_per_head(m1, m2);
    double s = 0.0;
    for (double v : per_head) s += v;
    return s / static_cast<double>(per_head.size());
}

std::vector<TrajectoryPoint> score_trajectory(const AttentionTrace& trace, TokenIndex token,
                                              const PolicyKind& policy, std::size_t layer,
                                              std::size_t head) {
    if (token < 1 || token > trace.seq_len()) {
        throw Error("UnknownToken", "token " + std::to_string(token) + " not in trace");
    }
    double decay = 0.0;
    switch (policy.type) {
        case PolicyType::A2S:
            decay = 1.0;
            break;
        case PolicyType::A2SF:
            decay = policy.alpha;
            break;
        default:
            throw Error("BadConfig", "score trajectories are defined for A2S/A2SF only");
    }
    std::vector<TrajectoryPoint> out;
    out.reserve(trace.seq_len() - token + 1);
    double acc = 0.0;
    for (std::size_t n = token; n <= trace.seq_len(); ++n) {
        const double s = trace.row(layer, head, n)[token - 1];
        acc = n == token ? s : decay * acc + s;
        out.push_back({n, s, acc});
    }
    return out;
}

double output_drift(const std::vector<std::vector<double>>& full_hidden,
                    const std::vector<std::vector<double>>& pruned_hidden) {
    if (full_hidden.size() != pruned_hidden.size() || full_hidden.empty()) {
        throw Error("ShapeMismatch", "drift needs equal-length non-empty runs");
    }
    double dist_sum = 0.0;
    double norm_sum = 0.0;
    for (std::size_t t = 0; t < full_hidden.size(); ++t) {
        const auto& f = full_hidden[t];
        const auto& p = pruned_hidden[t];
        if (f.size() != p.size()) {
            throw Error("ShapeMismatch", "hidden dimensions differ between runs");
        }
        double d2 = 0.0, n2 = 0.0;
        for (std::size_t i = 0; i < f.size(); ++i) {
            const double diff = f[i] - p[i];
            d2 += diff * diff;
            n2 += f[i] * f[i];
        }
        dist_sum += std::sqrt(d2);
        norm_sum += std::sqrt(n2);
    }
    if (norm_sum == 0.0) {
        throw Error("ZeroVector", "full run has zero hidden norm");
    }
    return dist_sum / norm_sum;
}

}  // namespace kvtrim
