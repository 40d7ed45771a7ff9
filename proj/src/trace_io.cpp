// SPDX-License-Identifier: Apache-2.0

#include "kvtrim/trace_io.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "kvtrim/error.hpp"

namespace kvtrim {
namespace {

void append_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void append_u64(std::vector<unsigned char>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

void append_f64(std::vector<unsigned char>& out, double v) {
    append_u64(out, std::bit_cast<std::uint64_t>(v));
}

std::uint64_t fnv1a(const unsigned char* data, std::size_t len) {
    std::uint64_t h = 14695981039346656037ull;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= data[i];
        h *= 1099511628211ull;
    }
    return h;
}

/// Sequential reader over an in-memory file image.
class Cursor {
  public:
    Cursor(const std::vector<unsigned char>& buf, std::string path)
        : buf_(buf), path_(std::move(path)) {}

    const unsigned char* need(std::size_t n) {
        if (pos_ + n > buf_.size())
            throw Error("Truncated", "unexpected end of trace file '" + path_ + "' at byte " +
                                          std::to_string(pos_));
        const unsigned char* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }

    std::uint32_t u32() {
        const unsigned char* p = need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
        return v;
    }

    std::uint64_t u64() {
        const unsigned char* p = need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }

    std::size_t pos() const { return pos_; }

  private:
    const std::vector<unsigned char>& buf_;
    std::string path_;
    std::size_t pos_ = 0;
};

std::vector<unsigned char> payload_bytes(const AttentionTrace& trace) {
    std::vector<unsigned char> payload;
    const std::size_t heads = trace.n_layers() * trace.n_heads();
    payload.reserve(heads * trace.seq_len() * (trace.seq_len() + 1) / 2 * 8);
    for (TokenIndex q = 1; q <= trace.seq_len(); ++q)
        for (std::size_t l = 0; l < trace.n_layers(); ++l)
            for (std::size_t h = 0; h < trace.n_heads(); ++h)
                for (double x : trace.row(l, h, q)) append_f64(payload, x);
    return payload;
}

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        std::size_t at = s.find(sep, start);
        if (at == std::string::npos) {
            parts.push_back(s.substr(start));
            return parts;
        }
        parts.push_back(s.substr(start, at - start));
        start = at + 1;
    }
}

double parse_double(const std::string& key, const std::string& text) {
    try {
        std::size_t used = 0;
        double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw Error("BadConfig", "key '" + key + "': cannot parse '" + text + "' as a number");
    }
}

std::uint64_t parse_uint(const std::string& key, const std::string& text) {
    try {
        std::size_t used = 0;
        unsigned long long v = std::stoull(text, &used);
        if (used != text.size() || text.empty() || text[0] == '-')
            throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw Error("BadConfig",
                    "key '" + key + "': cannot parse '" + text + "' as a nonnegative integer");
    }
}

bool parse_on_off(const std::string& key, const std::string& text) {
    if (text == "on" || text == "true" || text == "1") return true;
    if (text == "off" || text == "false" || text == "0") return false;
    throw Error("BadConfig", "key '" + key + "': expected on/off, got '" + text + "'");
}

std::string fmt_g6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

}  // namespace

std::uint64_t trace_checksum(const AttentionTrace& trace) {
    const std::vector<unsigned char> payload = payload_bytes(trace);
    return fnv1a(payload.data(), payload.size());
}

void write_trace(const AttentionTrace& trace, const std::string& path) {
    std::vector<unsigned char> out;
    out.insert(out.end(), kTraceMagic, kTraceMagic + 4);
    append_u32(out, kTraceVersion);
    append_u32(out, static_cast<std::uint32_t>(trace.n_layers()));
    append_u32(out, static_cast<std::uint32_t>(trace.n_heads()));
    append_u32(out, static_cast<std::uint32_t>(trace.seq_len()));
    append_u32(out, static_cast<std::uint32_t>(trace.provenance().size()));
    out.insert(out.end(), trace.provenance().begin(), trace.provenance().end());

    const std::vector<unsigned char> payload = payload_bytes(trace);
    out.insert(out.end(), payload.begin(), payload.end());
    append_u64(out, fnv1a(payload.data(), payload.size()));

    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw Error("IoFailure", "cannot open '" + path + "' for writing");
    file.write(reinterpret_cast<const char*>(out.data()),
               static_cast<std::streamsize>(out.size()));
    if (!file) throw Error("IoFailure", "short write to '" + path + "'");
}

AttentionTrace read_trace(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw Error("IoFailure", "cannot open '" + path + "' for reading");
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(file)),
                                   std::istreambuf_iterator<char>());

    Cursor cur(buf, path);
    const unsigned char* magic = cur.need(4);
    if (!std::equal(magic, magic + 4, kTraceMagic))
        throw Error("BadMagic", "'" + path + "' is not a trace file");
    const std::uint32_t version = cur.u32();
    if (version != kTraceVersion)
        throw Error("UnsupportedVersion", "trace format version " + std::to_string(version) +
                                              " (this build reads version " +
                                              std::to_string(kTraceVersion) + ")");

    const std::uint32_t n_layers = cur.u32();
    const std::uint32_t n_heads = cur.u32();
    const std::uint32_t seq_len = cur.u32();
    if (n_layers == 0 || n_heads == 0 || seq_len == 0)
        throw Error("Truncated", "'" + path + "' declares an empty trace");

    const std::uint32_t prov_len = cur.u32();
    const unsigned char* prov = cur.need(prov_len);
    std::string provenance(reinterpret_cast<const char*>(prov), prov_len);

    const std::size_t payload_start = cur.pos();
    AttentionTrace trace(n_layers, n_heads, seq_len, provenance);
    for (TokenIndex q = 1; q <= seq_len; ++q)
        for (std::size_t l = 0; l < n_layers; ++l)
            for (std::size_t h = 0; h < n_heads; ++h) {
                std::span<double> row = trace.row(l, h, q);
                for (double& x : row) x = cur.f64();
            }
    const std::size_t payload_len = cur.pos() - payload_start;

    const std::uint64_t stored = cur.u64();
    const std::uint64_t actual = fnv1a(buf.data() + payload_start, payload_len);
    if (stored != actual) {
        char want[32], got[32];
        std::snprintf(want, sizeof want, "%016llx", static_cast<unsigned long long>(stored));
        std::snprintf(got, sizeof got, "%016llx", static_cast<unsigned long long>(actual));
        throw Error("ChecksumMismatch",
                    "'" + path + "': stored " + want + ", computed " + got);
    }

    trace.validate();
    return trace;
}

void ExperimentConfig::validate() const {
    int sources = 0;
    if (!trace_path.empty()) ++sources;
    if (generator.has_value()) ++sources;
    if (live) ++sources;
    if (sources != 1)
        throw Error("BadConfig",
                    "exactly one input source required (trace file, generator, or live run)");
    if (policies.empty()) throw Error("BadConfig", "at least one policy required");
    if (generator.has_value()) generator->validate();
    if (live) {
        if (live_len < 2) throw Error("BadConfig", "live run needs a sequence length of at least 2");
        if (workload != "structured" && workload != "random")
            throw Error("BadConfig", "workload must be 'structured' or 'random', got '" +
                                         workload + "'");
    }
    if (budget.mode == BudgetConfig::Mode::Ratio) {
        if (!(budget.cache_ratio > 0.0) || budget.cache_ratio > 1.0)
            throw Error("BadRatio", "cache ratio must lie in (0, 1], got " +
                                        fmt_g6(budget.cache_ratio));
    } else if (budget.budget_count == 0) {
        throw Error("ZeroBudget", "absolute budget must be positive");
    }
}

PolicySpec parse_policy_spec(const std::string& text) {
    const std::vector<std::string> parts = split(trim(text), ':');
    const std::string& name = parts[0];
    if (name == "full") {
        if (parts.size() > 1) throw Error("BadConfig", "policy 'full' takes no parameter");
        return PolicySpec::full();
    }
    if (name == "local") {
        if (parts.size() == 1) return PolicySpec::local(0);  // window defaults to the budget
        return PolicySpec::local(parse_uint("local window", parts[1]));
    }
    if (name == "h2o") {
        if (parts.size() > 1) throw Error("BadConfig", "policy 'h2o' takes no parameter");
        return PolicySpec::h2o();
    }
    if (name == "a2sf") {
        if (parts.size() != 2)
            throw Error("BadConfig", "policy 'a2sf' needs a forgetting factor, e.g. a2sf:0.2");
        return PolicySpec::a2sf(parse_double("a2sf alpha", parts[1]));
    }
    throw Error("BadConfig", "unknown policy '" + name + "'");
}

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        const std::size_t eq = body.find('=');
        if (eq == std::string::npos)
            throw Error("BadConfig",
                        "line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(body.substr(0, eq));
        if (key.empty())
            throw Error("BadConfig", "line " + std::to_string(line_no) + ": empty key");
        kv[key] = trim(body.substr(eq + 1));
    }
    return kv;
}

std::map<std::string, std::string> read_kv_file(const std::string& path) {
    std::ifstream file(path);
    if (!file) throw Error("IoFailure", "cannot open '" + path + "' for reading");
    std::stringstream buf;
    buf << file.rdbuf();
    return parse_kv_text(buf.str());
}

namespace {

/// "40:3.0,64:2.5" -> [(40, 3.0), (64, 2.5)]
std::vector<std::pair<TokenIndex, double>> parse_hitters(const std::string& text) {
    std::vector<std::pair<TokenIndex, double>> hitters;
    if (trim(text).empty()) return hitters;
    for (const std::string& item : split(text, ',')) {
        const std::vector<std::string> halves = split(trim(item), ':');
        if (halves.size() != 2)
            throw Error("BadConfig", "heavy hitter '" + item + "': expected index:strength");
        hitters.emplace_back(static_cast<TokenIndex>(parse_uint("hitter index", halves[0])),
                             parse_double("hitter strength", halves[1]));
    }
    return hitters;
}

}  // namespace

TraceGenConfig trace_gen_config_from_kv(const std::map<std::string, std::string>& kv) {
    TraceGenConfig cfg;
    auto get = [&](const char* key) -> const std::string* {
        auto it = kv.find(key);
        return it == kv.end() ? nullptr : &it->second;
    };
    if (const std::string* v = get("len")) cfg.seq_len = parse_uint("len", *v);
    else throw Error("BadConfig", "generator config needs 'len'");
    if (const std::string* v = get("layers")) cfg.n_layers = parse_uint("layers", *v);
    if (const std::string* v = get("heads")) cfg.n_heads = parse_uint("heads", *v);
    if (const std::string* v = get("sink")) cfg.sink_strength = parse_double("sink", *v);
    if (const std::string* v = get("locality_window"))
        cfg.locality_window = parse_uint("locality_window", *v);
    if (const std::string* v = get("locality_strength"))
        cfg.locality_strength = parse_double("locality_strength", *v);
    if (const std::string* v = get("hitters")) cfg.heavy_hitters = parse_hitters(*v);
    if (const std::string* v = get("temp")) cfg.noise_temperature = parse_double("temp", *v);
    if (const std::string* v = get("seed")) cfg.seed = parse_uint("seed", *v);
    cfg.validate();
    return cfg;
}

ExperimentConfig experiment_config_from_kv(const std::map<std::string, std::string>& kv) {
    ExperimentConfig cfg;
    auto get = [&](const char* key) -> const std::string* {
        auto it = kv.find(key);
        return it == kv.end() ? nullptr : &it->second;
    };

    const std::string mode = get("mode") ? *get("mode") : "replay";
    if (mode == "live") cfg.live = true;
    else if (mode != "replay")
        throw Error("BadConfig", "mode must be 'replay' or 'live', got '" + mode + "'");

    if (const std::string* v = get("trace")) cfg.trace_path = *v;
    if (cfg.trace_path.empty() && !cfg.live && kv.count("len"))
        cfg.generator = trace_gen_config_from_kv(kv);

    if (cfg.live) {
        if (const std::string* v = get("len")) cfg.live_len = parse_uint("len", *v);
        if (const std::string* v = get("layers")) cfg.decoder.n_layers = parse_uint("layers", *v);
        if (const std::string* v = get("heads")) cfg.decoder.n_heads = parse_uint("heads", *v);
        if (const std::string* v = get("d_head")) cfg.decoder.d_head = parse_uint("d_head", *v);
        if (const std::string* v = get("vocab")) cfg.decoder.vocab_size = parse_uint("vocab", *v);
        if (const std::string* v = get("workload")) cfg.workload = *v;
        if (const std::string* v = get("seed")) cfg.decoder.seed = parse_uint("seed", *v);
    }
    if (const std::string* v = get("seed")) cfg.seed = parse_uint("seed", *v);

    if (const std::string* v = get("policies")) {
        for (const std::string& p : split(*v, ','))
            if (!trim(p).empty()) cfg.policies.push_back(parse_policy_spec(p));
    }

    const bool has_ratio = kv.count("cache_ratio") != 0;
    const bool has_abs = kv.count("budget") != 0;
    if (has_ratio && has_abs)
        throw Error("BadConfig", "give either 'cache_ratio' or 'budget', not both");
    if (has_abs) cfg.budget = BudgetConfig::absolute(parse_uint("budget", *get("budget")));
    else if (has_ratio)
        cfg.budget = BudgetConfig::ratio(parse_double("cache_ratio", *get("cache_ratio")), 0);

    if (const std::string* v = get("renormalize")) cfg.renormalize = parse_on_off("renormalize", *v);
    if (const std::string* v = get("out")) cfg.out_csv = *v;
    if (const std::string* v = get("masks")) cfg.mask_prefix = *v;

    cfg.validate();
    return cfg;
}

namespace {

struct CsvKey {
    std::string policy;
    double alpha;
    bool has_alpha;
    std::size_t budget;
    std::uint64_t seed;
    bool has_seed;

    explicit CsvKey(const SimilarityReport& r)
        : policy(r.policy),
          alpha(r.alpha.value_or(0.0)),
          has_alpha(r.alpha.has_value()),
          budget(r.budget),
          seed(r.seed.value_or(0)),
          has_seed(r.seed.has_value()) {}

    friend bool operator<(const CsvKey& a, const CsvKey& b) {
        return std::tie(a.policy, a.has_alpha, a.alpha, a.budget, a.has_seed, a.seed) <
               std::tie(b.policy, b.has_alpha, b.alpha, b.budget, b.has_seed, b.seed);
    }
};

}  // namespace

std::string format_report_csv(const std::vector<SimilarityReport>& reports) {
    if (reports.empty()) throw Error("NothingToWrite", "no report rows to format");

    std::vector<std::size_t> order(reports.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return CsvKey(reports[a]) < CsvKey(reports[b]);
    });

    std::string out = "policy,alpha,budget,layer,head,cosine,mask_overlap,output_drift,seed\n";
    for (std::size_t idx : order) {
        const SimilarityReport& r = reports[idx];
        const std::string alpha = r.alpha ? fmt_g6(*r.alpha) : "";
        const std::string seed = r.seed ? std::to_string(*r.seed) : "";
        const std::string budget = std::to_string(r.budget);
        for (std::size_t l = 0; l < r.n_layers; ++l)
            for (std::size_t h = 0; h < r.n_heads; ++h) {
                const std::size_t slot = l * r.n_heads + h;
                out += r.policy + ',' + alpha + ',' + budget + ',' + std::to_string(l) + ',' +
                       std::to_string(h) + ',' + fmt_g6(r.cosine_per_head[slot]) + ',' +
                       fmt_g6(r.overlap_per_head[slot]) + ",," + seed + '\n';
            }
        const std::string drift = r.output_drift ? fmt_g6(*r.output_drift) : "";
        out += r.policy + ',' + alpha + ',' + budget + ",AVERAGE,AVERAGE," +
               fmt_g6(r.cosine_mean) + ',' + fmt_g6(r.mask_overlap) + ',' + drift + ',' + seed +
               '\n';
    }
    return out;
}

void write_report_csv(const std::vector<SimilarityReport>& reports, const std::string& path) {
    const std::string text = format_report_csv(reports);
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw Error("IoFailure", "cannot open '" + path + "' for writing");
    file << text;
    if (!file) throw Error("IoFailure", "short write to '" + path + "'");
}

std::vector<std::string> write_mask_dump(const MaskSequence& mask, const std::string& prefix) {
    std::vector<std::string> paths;
    for (std::size_t l = 0; l < mask.n_layers; ++l)
        for (std::size_t h = 0; h < mask.n_heads; ++h) {
            std::string path =
                prefix + "_l" + std::to_string(l) + "_h" + std::to_string(h) + ".txt";
            std::ofstream file(path, std::ios::binary | std::ios::trunc);
            if (!file) throw Error("IoFailure", "cannot open '" + path + "' for writing");
            for (TokenIndex q = 1; q <= mask.seq_len; ++q) {
                const std::vector<TokenIndex>& keep = mask.at(q, l, h);
                std::size_t next = 0;
                for (TokenIndex k = 1; k <= mask.seq_len; ++k) {
                    const bool kept = next < keep.size() && keep[next] == k;
                    if (kept) ++next;
                    file << (kept ? '1' : '0');
                    file << (k == mask.seq_len ? '\n' : ' ');
                }
            }
            if (!file) throw Error("IoFailure", "short write to '" + path + "'");
            paths.push_back(std::move(path));
        }
    return paths;
}

}  // namespace kvtrim
