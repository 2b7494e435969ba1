#pragma once

// Experiment commands behind the dbp CLI. Each writes its artifacts under an
// output directory and returns what it wrote.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dbp/config.hpp"
#include "dbp/gradcheck_suite.hpp"
#include "dbp/metrics.hpp"
#include "dbp/train.hpp"

namespace dbp {

namespace fs = std::filesystem;

struct ResultRow {
  std::string experiment;
  std::string flags;         // flags_label of the model
  std::string perturbation;  // perturb_name
  std::string split;         // "all", "ST" or "LR"
  PlanMetrics metrics;
  double train_seconds = 0.0;
  std::uint64_t seed = 0;
};

// results.csv header, in column order.
std::string results_header();
std::string results_csv(const std::vector<ResultRow>& rows);
std::string results_json(const std::vector<ResultRow>& rows);
// Writes results.csv and results.json into dir.
void write_results(const std::vector<ResultRow>& rows, const fs::path& dir);

// Writes path through a sibling temp file and a rename.
void write_file_atomic(const fs::path& path, const std::string& content);

// ---- gen-data --------------------------------------------------------------

struct SplitManifest {
  std::string file;
  std::size_t count = 0;
  std::uint64_t first_seed = 0;
  std::uint64_t last_seed = 0;
  std::size_t straight = 0;
  std::size_t turn = 0;
};

struct DataManifest {
  SplitManifest train, val;
};

// Writes train.jsonl, val.jsonl and manifest.json into out_dir.
DataManifest cmd_gen_data(const RunConfig& cfg, const fs::path& out_dir);
std::vector<Scenario> load_split(const RunConfig& cfg, const fs::path& data_dir, const std::string& split);

// ---- train -----------------------------------------------------------------

struct TrainOutcome {
  TrainSummary summary;
  fs::path final_checkpoint, best_checkpoint, losses_csv;
  double seconds = 0.0;
};

std::string losses_header();
std::string losses_row(const EpochLog& e);

// Trains on data_dir/train.jsonl (validating on val.jsonl when present) and
// writes losses.csv, checkpoint_final.dbp and checkpoint_best.dbp. On a
// non-finite loss the NonFiniteLoss propagates after losses.csv holds the
// completed epochs; no checkpoint is written.
TrainOutcome cmd_train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir);

// ---- evaluation ------------------------------------------------------------

struct RowInfo {
  std::string experiment;
  std::string flags;
  PerturbMode perturbation = PerturbMode::None;
  double train_seconds = 0.0;
  std::uint64_t seed = 0;
};

// One "all" row, followed by ST and LR rows when split is set.
std::vector<ResultRow> evaluate_rows(const Planner& planner, const std::vector<Scenario>& scenarios, bool split,
                                     const RowInfo& info);

// Builds the configured model and loads the checkpoint into it; shape or
// name mismatches throw std::runtime_error.
void load_model(Model& model, const fs::path& checkpoint);

std::vector<ResultRow> cmd_eval(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& dataset,
                                bool split, const fs::path& out_dir);

// One row per configured perturbation mode, in configured order.
std::vector<ResultRow> cmd_perturb(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& dataset,
                                   bool split, const fs::path& out_dir, ForwardOptions opt = {});

// Trains every configured ladder rung from scratch with the shared seed and
// evaluates it on the validation split. Per-rung artifacts go to
// out_dir/ID-<rung+1>/; the ladder table to out_dir/results.csv.
std::vector<ResultRow> cmd_ablate(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir);

// Prints one line per op and a verdict to out.
GradcheckReport cmd_gradcheck(const RunConfig& cfg, std::ostream& out,
                              const std::vector<GradcheckCase>& cases = default_gradcheck_cases());

}  // namespace dbp
