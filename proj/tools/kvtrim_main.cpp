// SPDX-License-Identifier: Apache-2.0

// kvtrim: generate attention traces, replay them under eviction policies,
// and report similarity to the per-step ideal mask.
//
// Exit codes: 0 success, 1 failed assertion (e.g. --assert-order) or internal
// inconsistency, 2 usage or input validation errors.

#include <cmath>
#include <cstdio>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "kvtrim/error.hpp"
#include "kvtrim/runner.hpp"
#include "kvtrim/trace_io.hpp"

namespace {

using namespace kvtrim;

constexpr int kExitOk = 0;
constexpr int kExitAssertion = 1;
constexpr int kExitUsage = 2;

/// Error codes that point at the user's input rather than at this program.
bool is_usage_code(const std::string& code) {
    static const std::set<std::string> usage = {
        "BadConfig",     "BadRatio",   "ZeroBudget",         "BadAlpha",
        "BadWindow",     "BadToken",   "IoFailure",          "BadMagic",
        "UnsupportedVersion", "Truncated", "ChecksumMismatch", "InvariantViolation",
        "NothingToWrite", "BudgetTooSmallForHybrid", "UnknownToken",
    };
    return usage.count(code) != 0;
}

std::string fmt_g6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

std::string fmt_hex64(std::uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// "W:S" -> (window, strength)
void parse_locality(const std::string& text, TraceGenConfig& cfg) {
    const std::size_t colon = text.find(':');
    if (colon == std::string::npos)
        throw Error("BadConfig", "--locality expects WINDOW:STRENGTH, got '" + text + "'");
    std::map<std::string, std::string> kv;
    kv["locality_window"] = text.substr(0, colon);
    kv["locality_strength"] = text.substr(colon + 1);
    kv["len"] = std::to_string(cfg.seq_len);
    TraceGenConfig parsed = trace_gen_config_from_kv(kv);
    cfg.locality_window = parsed.locality_window;
    cfg.locality_strength = parsed.locality_strength;
}

struct GenFlags {
    std::size_t len = 0, layers = 1, heads = 1;
    double sink = 0.0, temp = 1.0;
    std::string locality, hitters;
    std::uint64_t seed = 0;
    std::string out;
};

void add_gen_flags(CLI::App* cmd, GenFlags& f, bool require_len) {
    auto* len = cmd->add_option("--len", f.len, "Sequence length");
    if (require_len) len->required();
    cmd->add_option("--layers", f.layers, "Layers");
    cmd->add_option("--heads", f.heads, "Heads per layer");
    cmd->add_option("--sink", f.sink, "Logit boost for token 1");
    cmd->add_option("--locality", f.locality, "Trailing-window boost, WINDOW:STRENGTH");
    cmd->add_option("--hitters", f.hitters, "Heavy hitters, INDEX:STRENGTH[,INDEX:STRENGTH...]");
    cmd->add_option("--temp", f.temp, "Softmax temperature for the noise");
    cmd->add_option("--seed", f.seed, "RNG seed");
}

TraceGenConfig gen_config_from_flags(const GenFlags& f) {
    TraceGenConfig cfg;
    cfg.seq_len = f.len;
    cfg.n_layers = f.layers;
    cfg.n_heads = f.heads;
    cfg.sink_strength = f.sink;
    cfg.noise_temperature = f.temp;
    cfg.seed = f.seed;
    if (!f.locality.empty()) parse_locality(f.locality, cfg);
    if (!f.hitters.empty()) {
        std::map<std::string, std::string> kv;
        kv["len"] = std::to_string(cfg.seq_len);
        kv["hitters"] = f.hitters;
        cfg.heavy_hitters = trace_gen_config_from_kv(kv).heavy_hitters;
    }
    cfg.validate();
    return cfg;
}

/// Resolves --policy/--alpha/--window into a spec; warns when a parameter is
/// given that the chosen policy ignores.
PolicySpec build_policy(const std::string& name, std::optional<double> alpha,
                        std::optional<std::size_t> window) {
    PolicySpec spec = [&] {
        if (name == "a2sf" && !name.empty() && name.find(':') == std::string::npos) {
            if (!alpha) throw Error("BadConfig", "policy 'a2sf' needs --alpha");
            return PolicySpec::a2sf(*alpha);
        }
        return parse_policy_spec(name);
    }();

    if (alpha) {
        if (spec.strategy == EvictionStrategy::A2SF) spec.alpha = *alpha;
        else
            std::fprintf(stderr, "warning: --alpha has no effect for policy '%s'\n",
                         spec.name().c_str());
    }
    if (window) {
        if (spec.strategy == EvictionStrategy::Local) spec.window = *window;
        else
            std::fprintf(stderr, "warning: --window has no effect for policy '%s'\n",
                         spec.name().c_str());
    }
    return spec;
}

void print_report(const SimilarityReport& r) {
    std::string line = "policy=" + r.policy;
    if (r.alpha) line += " alpha=" + fmt_g6(*r.alpha);
    line += " budget=" + std::to_string(r.budget);
    line += " cosine=" + fmt_g6(r.cosine_mean);
    line += " overlap=" + fmt_g6(r.mask_overlap);
    if (r.output_drift) line += " drift=" + fmt_g6(*r.output_drift);
    if (r.seed) line += " seed=" + std::to_string(*r.seed);
    std::printf("%s\n", line.c_str());
}

/// "0.0:0.9:0.1" -> {0.0, 0.1, ..., 0.9}
std::vector<double> parse_range(const std::string& text) {
    double lo = 0, hi = 0, step = 0;
    if (std::sscanf(text.c_str(), "%lf:%lf:%lf", &lo, &hi, &step) != 3 || step <= 0)
        throw Error("BadConfig", "--alphas expects LO:HI:STEP with STEP > 0, got '" + text + "'");
    std::vector<double> out;
    // integer stepping avoids drift deciding whether hi itself is included
    const long n = std::lround((hi - lo) / step);
    for (long i = 0; i <= n; ++i) {
        const double v = lo + static_cast<double>(i) * step;
        if (v <= hi + 1e-12) out.push_back(v);
    }
    if (out.empty()) throw Error("BadConfig", "empty range '" + text + "'");
    return out;
}

std::vector<double> parse_list(const std::string& text, const char* flag) {
    std::vector<double> out;
    std::string item;
    std::istringstream in(text);
    while (std::getline(in, item, ',')) {
        if (item.empty()) continue;
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw Error("BadConfig", std::string(flag) + ": cannot parse '" + item + "'");
        }
    }
    if (out.empty()) throw Error("BadConfig", std::string(flag) + ": empty list");
    return out;
}

// ---------------------------------------------------------------- commands

int cmd_gen(const GenFlags& f) {
    const TraceGenConfig cfg = gen_config_from_flags(f);
    const AttentionTrace trace = generate_synthetic_trace(cfg);
    write_trace(trace, f.out);
    std::printf("wrote %s: layers=%zu heads=%zu len=%zu checksum=%s\n", f.out.c_str(),
                trace.n_layers(), trace.n_heads(), trace.seq_len(),
                fmt_hex64(trace_checksum(trace)).c_str());
    return kExitOk;
}

struct RunFlags {
    std::string config_path, trace_path;
    bool live = false;
    GenFlags gen;
    std::size_t d_head = 8, vocab = 64;
    std::string workload = "structured";
    std::string policy;
    std::optional<double> alpha;
    std::optional<std::size_t> window;
    std::optional<double> cache_ratio;
    std::optional<std::size_t> budget;
    std::string renormalize = "on";
    std::string out, dump_masks;
};

int cmd_run(const RunFlags& f, const CLI::App* cmd) {
    ExperimentConfig cfg;
    if (!f.config_path.empty()) cfg = experiment_config_from_kv(read_kv_file(f.config_path));

    auto given = [&](const char* flag) { return cmd->count(flag) > 0; };

    if (given("--trace")) cfg.trace_path = f.trace_path;
    if (given("--live")) cfg.live = f.live;
    if (given("--policy") || cfg.policies.empty()) {
        if (f.policy.empty()) throw Error("BadConfig", "run needs --policy or a config file");
        cfg.policies = {build_policy(f.policy, f.alpha, f.window)};
    }
    if (given("--cache-ratio") && given("--budget"))
        throw Error("BadConfig", "give either --cache-ratio or --budget, not both");
    if (given("--cache-ratio")) cfg.budget = BudgetConfig::ratio(*f.cache_ratio, 0);
    if (given("--budget")) cfg.budget = BudgetConfig::absolute(*f.budget);
    if (given("--renormalize")) {
        if (f.renormalize != "on" && f.renormalize != "off")
            throw Error("BadConfig", "--renormalize expects on or off");
        cfg.renormalize = f.renormalize == "on";
    }
    if (given("--out")) cfg.out_csv = f.out;
    if (given("--dump-masks")) cfg.mask_prefix = f.dump_masks;
    if (given("--seed")) cfg.seed = f.gen.seed;

    if (cfg.live) {
        if (given("--len")) cfg.live_len = f.gen.len;
        if (given("--layers")) cfg.decoder.n_layers = f.gen.layers;
        if (given("--heads")) cfg.decoder.n_heads = f.gen.heads;
        if (given("--d-head")) cfg.decoder.d_head = f.d_head;
        if (given("--vocab")) cfg.decoder.vocab_size = f.vocab;
        if (given("--workload")) cfg.workload = f.workload;
        if (cfg.seed) cfg.decoder.seed = *cfg.seed;
    } else if (cfg.trace_path.empty() && given("--len")) {
        cfg.generator = gen_config_from_flags(f.gen);
        if (cfg.seed) cfg.generator->seed = *cfg.seed;
    }
    cfg.validate();

    std::vector<SimilarityReport> reports;
    MaskSequence mask;
    for (const PolicySpec& policy : cfg.policies) {
        SimilarityReport r;
        if (cfg.live) {
            const std::vector<std::size_t> tokens =
                cfg.workload == "random"
                    ? random_token_stream(cfg.live_len, cfg.decoder.vocab_size,
                                          cfg.seed.value_or(0) + 1)
                    : structured_token_stream(cfg.live_len, cfg.decoder.vocab_size,
                                              cfg.seed.value_or(0) + 1);
            r = run_live_experiment(cfg.decoder, tokens, policy, cfg.budget, &mask);
        } else {
            const AttentionTrace trace = cfg.generator
                                             ? generate_synthetic_trace(*cfg.generator)
                                             : read_trace(cfg.trace_path);
            r = run_replay_experiment(trace, policy, cfg.budget, cfg.renormalize, cfg.seed,
                                      &mask);
        }
        print_report(r);
        reports.push_back(std::move(r));
    }

    if (!cfg.mask_prefix.empty()) {
        for (const std::string& path : write_mask_dump(mask, cfg.mask_prefix))
            std::printf("wrote %s\n", path.c_str());
    }
    if (!cfg.out_csv.empty()) {
        write_report_csv(reports, cfg.out_csv);
        std::printf("wrote %s\n", cfg.out_csv.c_str());
    }
    return kExitOk;
}

struct SweepFlags {
    std::string trace_path;
    std::string alphas, ratios, policies;
    std::optional<double> cache_ratio;
    std::optional<std::size_t> budget;
    std::string renormalize = "on";
    std::string out;
};

int cmd_sweep(const SweepFlags& f) {
    const AttentionTrace trace = read_trace(f.trace_path);
    const bool renorm = f.renormalize == "on";
    if (!renorm && f.renormalize != "off")
        throw Error("BadConfig", "--renormalize expects on or off");

    std::vector<BudgetConfig> budgets;
    if (!f.ratios.empty()) {
        for (double r : parse_list(f.ratios, "--ratios")) budgets.push_back(BudgetConfig::ratio(r, 0));
    } else if (f.cache_ratio) {
        budgets.push_back(BudgetConfig::ratio(*f.cache_ratio, 0));
    } else if (f.budget) {
        budgets.push_back(BudgetConfig::absolute(*f.budget));
    } else {
        throw Error("BadConfig", "sweep needs --ratios, --cache-ratio, or --budget");
    }

    std::vector<PolicySpec> policies;
    if (!f.alphas.empty())
        for (double a : parse_range(f.alphas)) policies.push_back(PolicySpec::a2sf(a));
    if (!f.policies.empty()) {
        std::istringstream in(f.policies);
        std::string item;
        while (std::getline(in, item, ','))
            if (!item.empty()) policies.push_back(parse_policy_spec(item));
    }
    if (policies.empty())
        throw Error("BadConfig", "sweep needs --alphas and/or --policies");

    std::vector<SimilarityReport> reports;
    for (const BudgetConfig& budget : budgets)
        for (const PolicySpec& policy : policies) {
            SimilarityReport r = run_replay_experiment(trace, policy, budget, renorm);
            print_report(r);
            reports.push_back(std::move(r));
        }
    if (!f.out.empty()) {
        write_report_csv(reports, f.out);
        std::printf("wrote %s\n", f.out.c_str());
    }
    return kExitOk;
}

struct CompareFlags {
    std::string trace_path;
    std::string policies;
    std::optional<double> cache_ratio;
    std::optional<std::size_t> budget;
    std::string renormalize = "on";
    std::string assert_order;
    std::string out;
};

int cmd_compare(const CompareFlags& f) {
    const AttentionTrace trace = read_trace(f.trace_path);
    const bool renorm = f.renormalize == "on";
    if (!renorm && f.renormalize != "off")
        throw Error("BadConfig", "--renormalize expects on or off");

    BudgetConfig budget;
    if (f.cache_ratio && f.budget)
        throw Error("BadConfig", "give either --cache-ratio or --budget, not both");
    if (f.cache_ratio) budget = BudgetConfig::ratio(*f.cache_ratio, 0);
    else if (f.budget) budget = BudgetConfig::absolute(*f.budget);
    else throw Error("BadConfig", "compare needs --cache-ratio or --budget");

    std::vector<PolicySpec> policies;
    std::istringstream in(f.policies);
    std::string item;
    while (std::getline(in, item, ','))
        if (!item.empty()) policies.push_back(parse_policy_spec(item));
    if (policies.empty()) throw Error("BadConfig", "compare needs --policies");

    std::vector<SimilarityReport> reports;
    for (const PolicySpec& policy : policies) {
        SimilarityReport r = run_replay_experiment(trace, policy, budget, renorm);
        print_report(r);
        reports.push_back(std::move(r));
    }
    if (!f.out.empty()) {
        write_report_csv(reports, f.out);
        std::printf("wrote %s\n", f.out.c_str());
    }

    if (!f.assert_order.empty()) {
        std::vector<std::string> names;
        std::istringstream order(f.assert_order);
        while (std::getline(order, item, '>'))
            if (!item.empty()) names.push_back(item);
        if (names.size() < 2)
            throw Error("BadConfig", "--assert-order expects NAME>NAME[>NAME...]");

        auto mean_for = [&](const std::string& name) {
            const SimilarityReport* found = nullptr;
            for (const SimilarityReport& r : reports)
                if (r.policy == name) {
                    if (found != nullptr)
                        throw Error("BadConfig",
                                    "--assert-order: several '" + name + "' runs; ambiguous");
                    found = &r;
                }
            if (found == nullptr)
                throw Error("BadConfig", "--assert-order names '" + name +
                                             "', which was not among --policies");
            return found->cosine_mean;
        };

        for (std::size_t i = 0; i + 1 < names.size(); ++i) {
            const double a = mean_for(names[i]);
            const double b = mean_for(names[i + 1]);
            if (!(a > b)) {
                std::fprintf(stderr, "order violated: %s (%s) !> %s (%s)\n", names[i].c_str(),
                             fmt_g6(a).c_str(), names[i + 1].c_str(), fmt_g6(b).c_str());
                return kExitAssertion;
            }
        }
        std::printf("order holds: %s\n", f.assert_order.c_str());
    }
    return kExitOk;
}

struct IdealFlags {
    std::string trace_path;
    std::optional<double> cache_ratio;
    std::optional<std::size_t> budget;
    std::string dump_masks;
};

int cmd_ideal(const IdealFlags& f) {
    const AttentionTrace trace = read_trace(f.trace_path);
    BudgetConfig budget;
    if (f.cache_ratio && f.budget)
        throw Error("BadConfig", "give either --cache-ratio or --budget, not both");
    if (f.cache_ratio) budget = BudgetConfig::ratio(*f.cache_ratio, 0);
    else if (f.budget) budget = BudgetConfig::absolute(*f.budget);
    else throw Error("BadConfig", "ideal needs --cache-ratio or --budget");

    const std::size_t b = resolve_budget_for(budget, trace.seq_len());
    const MaskSequence mask = ideal_mask(trace, b);

    // Mean attention mass the ideal keepsets capture, per head and overall.
    double total = 0.0;
    for (std::size_t l = 0; l < trace.n_layers(); ++l)
        for (std::size_t h = 0; h < trace.n_heads(); ++h) {
            double head_mass = 0.0;
            for (std::size_t q = 1; q <= trace.seq_len(); ++q) {
                const auto row = trace.row(l, h, q);
                double kept = 0.0;
                for (TokenIndex k : mask.at(q, l, h)) kept += row[k - 1];
                head_mass += kept;
            }
            head_mass /= static_cast<double>(trace.seq_len());
            total += head_mass;
            std::printf("layer=%zu head=%zu budget=%zu captured_mass=%s\n", l, h, b,
                        fmt_g6(head_mass).c_str());
        }
    std::printf("mean captured_mass=%s\n",
                fmt_g6(total / static_cast<double>(trace.head_count())).c_str());

    if (!f.dump_masks.empty())
        for (const std::string& path : write_mask_dump(mask, f.dump_masks))
            std::printf("wrote %s\n", path.c_str());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"KV-cache eviction policy workbench"};
    app.require_subcommand(1);

    GenFlags gen;
    CLI::App* gen_cmd = app.add_subcommand("gen", "Generate a synthetic attention trace");
    add_gen_flags(gen_cmd, gen, true);
    gen_cmd->add_option("--out", gen.out, "Output trace path")->required();

    RunFlags run;
    CLI::App* run_cmd =
        app.add_subcommand("run", "Replay a trace (or drive the toy decoder) under one policy");
    run_cmd->add_option("--config", run.config_path, "key=value experiment file");
    run_cmd->add_option("--trace", run.trace_path, "Trace file to replay");
    run_cmd->add_flag("--live", run.live, "Drive the toy decoder with physical eviction");
    add_gen_flags(run_cmd, run.gen, false);
    run_cmd->add_option("--d-head", run.d_head, "Per-head dimension (live)");
    run_cmd->add_option("--vocab", run.vocab, "Vocabulary size (live)");
    run_cmd->add_option("--workload", run.workload, "Live token stream: structured|random");
    run_cmd->add_option("--policy", run.policy, "full | local[:W] | h2o | a2sf[:ALPHA]");
    run_cmd->add_option("--alpha", run.alpha, "Forgetting factor for a2sf");
    run_cmd->add_option("--window", run.window, "Window for local");
    run_cmd->add_option("--cache-ratio", run.cache_ratio, "Budget as a fraction of length");
    run_cmd->add_option("--budget", run.budget, "Absolute per-head budget");
    run_cmd->add_option("--renormalize", run.renormalize, "Renormalize surviving rows: on|off");
    run_cmd->add_option("--out", run.out, "Write the report CSV here");
    run_cmd->add_option("--dump-masks", run.dump_masks, "Write 0/1 keep matrices, one per head");

    SweepFlags sweep;
    CLI::App* sweep_cmd = app.add_subcommand("sweep", "Sweep alphas and/or cache ratios");
    sweep_cmd->add_option("--trace", sweep.trace_path, "Trace file to replay")->required();
    sweep_cmd->add_option("--alphas", sweep.alphas, "a2sf alphas, LO:HI:STEP");
    sweep_cmd->add_option("--ratios", sweep.ratios, "Cache ratios, comma-separated");
    sweep_cmd->add_option("--policies", sweep.policies, "Extra policies, comma-separated");
    sweep_cmd->add_option("--cache-ratio", sweep.cache_ratio, "Fixed ratio for an alpha sweep");
    sweep_cmd->add_option("--budget", sweep.budget, "Fixed absolute budget for an alpha sweep");
    sweep_cmd->add_option("--renormalize", sweep.renormalize, "on|off");
    sweep_cmd->add_option("--out", sweep.out, "Write the report CSV here");

    CompareFlags cmp;
    CLI::App* cmp_cmd = app.add_subcommand("compare", "Run several policies on one trace");
    cmp_cmd->add_option("--trace", cmp.trace_path, "Trace file to replay")->required();
    cmp_cmd->add_option("--policies", cmp.policies, "Comma-separated policy list")->required();
    cmp_cmd->add_option("--cache-ratio", cmp.cache_ratio, "Budget as a fraction of length");
    cmp_cmd->add_option("--budget", cmp.budget, "Absolute per-head budget");
    cmp_cmd->add_option("--renormalize", cmp.renormalize, "on|off");
    cmp_cmd->add_option("--assert-order", cmp.assert_order,
                        "Fail (exit 1) unless mean cosines are strictly ordered, e.g. "
                        "a2sf>h2o>local");
    cmp_cmd->add_option("--out", cmp.out, "Write the report CSV here");

    IdealFlags ideal;
    CLI::App* ideal_cmd = app.add_subcommand("ideal", "Ideal-mask statistics for a trace");
    ideal_cmd->add_option("--trace", ideal.trace_path, "Trace file")->required();
    ideal_cmd->add_option("--cache-ratio", ideal.cache_ratio, "Budget as a fraction of length");
    ideal_cmd->add_option("--budget", ideal.budget, "Absolute per-head budget");
    ideal_cmd->add_option("--dump-masks", ideal.dump_masks, "Write 0/1 keep matrices");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (gen_cmd->parsed()) return cmd_gen(gen);
        if (run_cmd->parsed()) return cmd_run(run, run_cmd);
        if (sweep_cmd->parsed()) return cmd_sweep(sweep);
        if (cmp_cmd->parsed()) return cmd_compare(cmp);
        if (ideal_cmd->parsed()) return cmd_ideal(ideal);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return is_usage_code(e.code()) ? kExitUsage : kExitAssertion;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitAssertion;
    }
    return kExitUsage;
}
