#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "modarb/attribution.hpp"
#include "modarb/metrics.hpp"
#include "modarb/model.hpp"
#include "modarb/testbed.hpp"

namespace modarb::harness {

// One experiment run, parsed from a single JSON config. Unknown keys are
// rejected so typos fail fast instead of silently running defaults.
struct RunConfig {
  model::ModelConfig model;
  testbed::PlantedCircuitSpec planted;
  std::string model_source = "planted";  // "planted" or "random"
  std::size_t samples = 200;
  std::uint64_t seed = 1;
  metrics::SignalConfig signal;
  std::vector<std::size_t> k_values = {3};
  std::vector<std::size_t> g_values = {0, 1, 2, 3, 4};
  std::vector<double> alpha_values = {1, 2, 4, 8, 16};
  // deep-layer window for the pathway-severing comparison; defaults to the
  // planted arbitration range, or the last three layers for random models.
  std::optional<std::pair<std::size_t, std::size_t>> deep_range;
  std::string samples_path;  // optional samples.jsonl override
  std::size_t jobs = 1;
  double max_skip = 0.05;
  std::string out_dir = ".";

  static RunConfig from_json_text(const std::string& text);
  std::string to_json() const;
  std::string hash() const;  // content hash of the canonical serialization

  std::pair<std::size_t, std::size_t> deep_layers() const;
};

struct ResultRow {
  std::vector<std::pair<std::string, std::string>> axes;  // same keys per experiment
  std::string metric;
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t n = 0;
  std::size_t skipped = 0;
};

struct SweepResult {
  std::string experiment;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<std::string> plan_ids;
  std::string signal_desc;   // top_k / aggregation / lens-norm flag
  std::vector<ResultRow> rows;
};

// Prepared model + sample population shared by the sweeps.
struct Workbench {
  model::Weights weights;
  testbed::Vocabulary vocab;
  std::vector<ConflictSample> samples;
  std::vector<std::vector<TokenId>> tokens;
  model::SegmentMap segmap;
};

Workbench prepare(const RunConfig& cfg);

// Mean knockout divergence per (pathway, center layer, k, task), with skip
// accounting per row.
SweepResult run_knockout_sweep(const RunConfig& cfg);

// Per-layer lens alignment and synchronization rates (filtered and
// unfiltered populations), plus the deep-range pathway-severing comparison.
SweepResult run_ldar_sweep(const RunConfig& cfg);

// Per-layer signal trajectories and sublayer attribution deltas.
SweepResult run_attribution_sweep(const RunConfig& cfg);

// Head attribution rankings per task plus the cross-task overlap; also
// writes ranking CSV/JSON files into cfg.out_dir.
SweepResult run_head_rank(const RunConfig& cfg);

// Blocking (on the following population) or amplification (on the failing
// population) of targeted / random / shared head selections.
SweepResult run_head_intervention(const RunConfig& cfg, bool amplify);

// Head blocking repeated under signal-extraction variants.
SweepResult run_phi_ablation(const RunConfig& cfg);

std::vector<model::ForwardTrace> import_traces(const std::vector<std::string>& paths);

// Writes <experiment>_<confighash>.csv and .json into dir. Byte-identical
// for identical (config, seed) regardless of worker count.
std::pair<std::string, std::string> export_results(const SweepResult& result,
                                                   const std::string& dir);

// Merge previously exported .json result files into one long-format CSV.
std::string merge_results_csv(const std::vector<std::string>& json_paths,
                              const std::string& out_path);

// True when any row's skipped fraction exceeds the configured budget.
bool over_skip_budget(const SweepResult& result, double max_skip, std::size_t population);

}  // namespace modarb::harness
