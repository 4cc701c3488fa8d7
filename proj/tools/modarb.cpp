#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "modarb/harness.hpp"
#include "modarb/trace_io.hpp"

using namespace modarb;

namespace {

struct GlobalOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> jobs;
  std::optional<double> max_skip;
};

harness::RunConfig load_config(const GlobalOpts& g) {
  std::string text = "{}";
  if (!g.config_path.empty()) {
    std::ifstream in(g.config_path);
    if (!in) throw Error("cannot open config file " + g.config_path);
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  harness::RunConfig cfg = harness::RunConfig::from_json_text(text);
  if (g.seed) cfg.seed = *g.seed;
  if (g.out) cfg.out_dir = *g.out;
  if (g.jobs) cfg.jobs = *g.jobs;
  if (g.max_skip) cfg.max_skip = *g.max_skip;
  return cfg;
}

int finish(const harness::SweepResult& res, const harness::RunConfig& cfg) {
  const auto [csv, js] = harness::export_results(res, cfg.out_dir);
  std::cout << "wrote " << csv << "\n" << "wrote " << js << "\n";
  if (harness::over_skip_budget(res, cfg.max_skip, cfg.samples)) {
    std::cerr << "error: skipped samples exceed --max-skip budget of " << cfg.max_skip << "\n";
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"modality-arbitration analysis toolkit"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags are accepted after the subcommand too

  GlobalOpts g;
  app.add_option("--config", g.config_path, "JSON experiment config");
  app.add_option("--seed", g.seed, "master seed override");
  app.add_option("--out", g.out, "output directory override");
  app.add_option("--jobs", g.jobs, "worker thread count");
  app.add_option("--max-skip", g.max_skip, "tolerated skipped-sample fraction");

  auto* gen = app.add_subcommand("gen", "generate the conflict sample set (samples.jsonl)");

  auto* sweep = app.add_subcommand("sweep", "run a population sweep");
  sweep->require_subcommand(1);
  auto* sw_knockout = sweep->add_subcommand("knockout", "pathway knockout divergence profile");
  auto* sw_ldar = sweep->add_subcommand("ldar", "lens alignment and synchronization profile");
  auto* sw_attr = sweep->add_subcommand("attribute", "sublayer attribution profile");

  auto* heads = app.add_subcommand("heads", "head-level analyses");
  heads->require_subcommand(1);
  auto* heads_rank = heads->add_subcommand("rank", "rank heads by margin attribution");

  auto* intervene = app.add_subcommand("intervene", "head blocking / amplification study");
  bool opt_block = false, opt_amplify = false;
  intervene->add_flag("--block", opt_block, "block head outputs (following population)");
  intervene->add_flag("--amplify", opt_amplify, "scale head outputs (failing population)");

  auto* ablate = app.add_subcommand("ablate", "signal-extraction ablations");
  ablate->require_subcommand(1);
  auto* ablate_phi = ablate->add_subcommand("phi", "repeat blocking under signal variants");

  auto* trace = app.add_subcommand("trace", "binary trace containers");
  trace->require_subcommand(1);
  auto* tr_export = trace->add_subcommand("export", "run one sample and export its trace");
  std::size_t tr_sample = 0;
  std::string tr_file;
  tr_export->add_option("--sample", tr_sample, "sample index");
  tr_export->add_option("--file", tr_file, "output path (.altr)")->required();
  auto* tr_import = trace->add_subcommand("import", "validate a trace container");
  std::string tr_in;
  tr_import->add_option("--file", tr_in, "input path (.altr)")->required();

  auto* report = app.add_subcommand("report", "merge result JSON files into one CSV");
  std::vector<std::string> report_files;
  report->add_option("files", report_files, "result .json files")->required();

  for (auto* sub : app.get_subcommands({})) {
    sub->fallthrough();
    for (auto* nested : sub->get_subcommands({})) nested->fallthrough();
  }

  CLI11_PARSE(app, argc, argv);

  harness::RunConfig cfg;
  try {
    cfg = load_config(g);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (gen->parsed()) {
      const auto wb = harness::prepare(cfg);
      std::filesystem::create_directories(cfg.out_dir);
      const std::string path = cfg.out_dir + "/samples.jsonl";
      testbed::write_samples_jsonl(path, wb.samples);
      std::cout << "wrote " << path << " (" << wb.samples.size() << " samples)\n";
      return 0;
    }
    if (sw_knockout->parsed()) return finish(harness::run_knockout_sweep(cfg), cfg);
    if (sw_ldar->parsed()) return finish(harness::run_ldar_sweep(cfg), cfg);
    if (sw_attr->parsed()) return finish(harness::run_attribution_sweep(cfg), cfg);
    if (heads_rank->parsed()) return finish(harness::run_head_rank(cfg), cfg);
    if (intervene->parsed()) {
      if (opt_block == opt_amplify) {
        std::cerr << "config error: pass exactly one of --block / --amplify\n";
        return 1;
      }
      return finish(harness::run_head_intervention(cfg, opt_amplify), cfg);
    }
    if (ablate_phi->parsed()) return finish(harness::run_phi_ablation(cfg), cfg);
    if (tr_export->parsed()) {
      const auto wb = harness::prepare(cfg);
      if (tr_sample >= wb.samples.size()) throw Error("trace export: sample index out of range");
      const auto tr = model::forward(wb.weights, wb.tokens[tr_sample], wb.segmap, {},
                                     model::TraceDetail::StatesOnly);
      trace_io::export_trace(tr_file, tr);
      std::cout << "wrote " << tr_file << "\n";
      return 0;
    }
    if (tr_import->parsed()) {
      const auto tr = trace_io::import_trace(tr_in);
      std::cout << "ok: layers=" << tr.layers << " seq_len=" << tr.seq_len
                << " model_dim=" << tr.model_dim << " vocab=" << tr.vocab_size
                << " plan_id=" << (tr.plan_id.empty() ? "-" : tr.plan_id) << "\n";
      return 0;
    }
    if (report->parsed()) {
      std::filesystem::create_directories(cfg.out_dir);
      const std::string out = harness::merge_results_csv(report_files, cfg.out_dir + "/report.csv");
      std::cout << "wrote " << out << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
