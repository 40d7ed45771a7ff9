// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kvtrim/decoder.hpp"
#include "kvtrim/eviction.hpp"
#include "kvtrim/metrics.hpp"
#include "kvtrim/oracle.hpp"
#include "kvtrim/trace.hpp"

namespace kvtrim {

/*
 * Trace container ("A2TR", version 1). All integers little-endian.
 *
 *   bytes 0..3   magic "A2TR"
 *   u32          format_version (currently 1)
 *   u32 x 3      n_layers, n_heads, seq_len
 *   u32 + bytes  provenance string, length-prefixed
 *   payload      for q = 1..seq_len, for each layer, for each head:
 *                q IEEE-754 doubles (row q of that head)
 *   u64          FNV-1a checksum over the payload bytes
 */

inline constexpr char kTraceMagic[4] = {'A', '2', 'T', 'R'};
inline constexpr std::uint32_t kTraceVersion = 1;

/// FNV-1a over the payload a write of this trace would produce; gen prints it
/// and the round-trip tests compare it.
std::uint64_t trace_checksum(const AttentionTrace& trace);

/// Writes the container; I/O failures carry the path in the message.
void write_trace(const AttentionTrace& trace, const std::string& path);

/// Reads and fully validates a container: magic, version, checksum, then the
/// trace invariants (nonnegative entries, row sums within 1e-6).
/// Errors: "BadMagic", "UnsupportedVersion", "Truncated", "ChecksumMismatch",
/// "InvariantViolation" (naming the first offending layer/head/row/entry).
AttentionTrace read_trace(const std::string& path);

/// Experiment description, either parsed from a flat key=value file or
/// assembled from command-line flags.
struct ExperimentConfig {
    std::string trace_path;                  // replay a stored trace...
    std::optional<TraceGenConfig> generator; // ...or a generated one
    bool live = false;                       // ...or drive the toy decoder
    DecoderConfig decoder;
    std::size_t live_len = 0;
    std::string workload = "structured";     // structured | random
    std::vector<PolicySpec> policies;
    BudgetConfig budget;
    bool renormalize = true;
    std::string out_csv;
    std::string mask_prefix;
    std::optional<std::uint64_t> seed;

    void validate() const;  // at least one policy, a source, a valid budget
};

/// "a2sf:0.1", "local", "local:16", "h2o", "full" -> PolicySpec.
PolicySpec parse_policy_spec(const std::string& text);

/// Flat `key = value` lines; '#' starts a comment. Duplicate keys keep the
/// last value.
std::map<std::string, std::string> parse_kv_text(const std::string& text);
std::map<std::string, std::string> read_kv_file(const std::string& path);

TraceGenConfig trace_gen_config_from_kv(const std::map<std::string, std::string>& kv);
ExperimentConfig experiment_config_from_kv(const std::map<std::string, std::string>& kv);

/// CSV schema: policy,alpha,budget,layer,head,cosine,mask_overlap,output_drift,seed
/// One row per (report, layer, head) plus an AVERAGE row per report; reals
/// are printed with 6 significant digits; rows are sorted by (policy, alpha,
/// budget, seed, layer, head) so identical inputs give byte-identical files.
/// Raises "NothingToWrite" on an empty report list.
void write_report_csv(const std::vector<SimilarityReport>& reports, const std::string& path);
std::string format_report_csv(const std::vector<SimilarityReport>& reports);

/// One file per (layer, head): `<prefix>_l<layer>_h<head>.txt`, a dense
/// seq_len x seq_len 0/1 matrix (row q marks keep(q)). Returns the paths.
std::vector<std::string> write_mask_dump(const MaskSequence& mask, const std::string& prefix);

}  // namespace kvtrim
