#include "dbp/harness.hpp"

#include <charconv>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <ostream>

#include "json.hpp"

namespace dbp {

using json = nlohmann::ordered_json;

namespace {

std::string num(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

std::string seconds(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", x);
  return buf;
}

std::string rung_name(std::size_t rung) { return "ID-" + std::to_string(rung + 1); }

}  // namespace

void write_file_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error(tmp.string() + ": cannot open for writing");
    os << content;
    os.flush();
    if (!os) throw std::runtime_error(tmp.string() + ": write failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw std::runtime_error(path.string() + ": rename failed: " + ec.message());
}

// ---- results ---------------------------------------------------------------

std::string results_header() {
  return "experiment,flags,perturbation,split,count,l2_1s,l2_2s,l2_3s,l2_avg,cr_1s,cr_2s,cr_3s,cr_avg,train_seconds,"
         "seed";
}

std::string results_csv(const std::vector<ResultRow>& rows) {
  std::string out = results_header() + "\n";
  for (const auto& r : rows) {
    const PlanMetrics& m = r.metrics;
    out += r.experiment + "," + r.flags + "," + r.perturbation + "," + r.split + "," + std::to_string(m.count);
    for (double v : m.l2_at) out += "," + num(v);
    out += "," + num(m.l2_avg);
    for (double v : m.collision_at) out += "," + num(v);
    out += "," + num(m.collision_avg) + "," + seconds(r.train_seconds) + "," + std::to_string(r.seed) + "\n";
  }
  return out;
}

std::string results_json(const std::vector<ResultRow>& rows) {
  json arr = json::array();
  for (const auto& r : rows) {
    const PlanMetrics& m = r.metrics;
    arr.push_back({{"experiment", r.experiment},
                   {"flags", r.flags},
                   {"perturbation", r.perturbation},
                   {"split", r.split},
                   {"count", m.count},
                   {"l2", {{"1s", m.l2_at[0]}, {"2s", m.l2_at[1]}, {"3s", m.l2_at[2]}, {"avg", m.l2_avg}}},
                   {"collision",
                    {{"1s", m.collision_at[0]}, {"2s", m.collision_at[1]}, {"3s", m.collision_at[2]}, {"avg", m.collision_avg}}},
                   {"train_seconds", r.train_seconds},
                   {"seed", r.seed}});
  }
  return json{{"rows", arr}}.dump(2) + "\n";
}

void write_results(const std::vector<ResultRow>& rows, const fs::path& dir) {
  write_file_atomic(dir / "results.csv", results_csv(rows));
  write_file_atomic(dir / "results.json", results_json(rows));
}

// ---- gen-data --------------------------------------------------------------

DataManifest cmd_gen_data(const RunConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  auto split = [&](const std::string& name, std::uint64_t first, std::size_t n) {
    const auto ds = generate_dataset(first, n, cfg.data.turn_fraction, cfg.data.world);
    save_dataset(ds, out_dir / (name + ".jsonl"));
    SplitManifest m{name + ".jsonl", n, first, n ? first + n - 1 : first, 0, 0};
    for (const auto& s : ds) (is_turn(s.command) ? m.turn : m.straight) += 1;
    return m;
  };
  DataManifest man{split("train", cfg.data.train_seed, cfg.data.n_train),
                   split("val", cfg.data.val_seed, cfg.data.n_val)};
  auto entry = [](const SplitManifest& m) {
    return json{{"file", m.file},         {"count", m.count},       {"first_seed", m.first_seed},
                {"last_seed", m.last_seed}, {"straight", m.straight}, {"turn", m.turn}};
  };
  const BevSpec& s = cfg.model.spec;
  const json doc{{"schema", std::string(kDatasetSchema)},
                 {"turn_fraction", cfg.data.turn_fraction},
                 {"bev", {{"x_min", s.x_min}, {"x_max", s.x_max}, {"y_min", s.y_min}, {"y_max", s.y_max}, {"resolution", s.resolution}}},
                 {"train", entry(man.train)},
                 {"val", entry(man.val)}};
  write_file_atomic(out_dir / "manifest.json", doc.dump(2) + "\n");
  return man;
}

std::vector<Scenario> load_split(const RunConfig& cfg, const fs::path& data_dir, const std::string& split) {
  const fs::path p = data_dir / (split + ".jsonl");
  if (!fs::exists(p)) throw std::runtime_error(p.string() + ": dataset split not found (run gen-data first)");
  return load_dataset(p, cfg.model.spec);
}

// ---- train -----------------------------------------------------------------

std::string losses_header() {
  std::string h = "epoch";
  for (const char* c : kLossColumns) h += std::string(",") + c;
  return h + ",val_l2";
}

std::string losses_row(const EpochLog& e) {
  std::string r = std::to_string(e.epoch);
  for (double v : {e.total, e.det, e.map, e.mot, e.plan, e.distill, e.autoreg, e.lr}) r += "," + num(v);
  return r + "," + (e.val_l2 >= 0.0 ? num(e.val_l2) : std::string());
}

TrainOutcome cmd_train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir) {
  const auto train = load_split(cfg, data_dir, "train");
  const fs::path val_path = data_dir / "val.jsonl";
  const auto val = fs::exists(val_path) ? load_dataset(val_path, cfg.model.spec) : std::vector<Scenario>{};

  fs::create_directories(out_dir);
  TrainOutcome out;
  out.losses_csv = out_dir / "losses.csv";
  out.final_checkpoint = out_dir / "checkpoint_final.dbp";
  out.best_checkpoint = out_dir / "checkpoint_best.dbp";

  Model model(cfg.model, cfg.seed);
  OptimConfig opt = cfg.optim;
  opt.seed = cfg.seed;
  std::string csv = losses_header() + "\n";
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochLog& e) {
    csv += losses_row(e) + "\n";
    write_file_atomic(out.losses_csv, csv);
  };
  hooks.on_best = [&](const EpochLog&) { save_checkpoint(model.params(), out.best_checkpoint); };

  const auto t0 = std::chrono::steady_clock::now();
  try {
    out.summary = train_model(model, train, val, opt, cfg.losses, hooks);
  } catch (const NonFiniteLoss&) {
    write_file_atomic(out.losses_csv, csv);
    throw;
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_checkpoint(model.params(), out.final_checkpoint);
  if (out.summary.best_epoch == 0) save_checkpoint(model.params(), out.best_checkpoint);
  write_file_atomic(out_dir / "config.toml", format_config(cfg));
  return out;
}

// ---- evaluation ------------------------------------------------------------

std::vector<ResultRow> evaluate_rows(const Planner& planner, const std::vector<Scenario>& scenarios, bool split,
                                     const RowInfo& info) {
  const auto results = run_planner(planner, scenarios);
  auto row = [&](const std::string& name, const std::vector<ScenarioResult>& rs) {
    return ResultRow{info.experiment, info.flags,        std::string(perturb_name(info.perturbation)),
                     name,            summarize(rs),     info.train_seconds,
                     info.seed};
  };
  std::vector<ResultRow> rows{row("all", results)};
  if (split) {
    std::vector<ScenarioResult> st, lr;
    for (std::size_t i = 0; i < scenarios.size(); ++i) (is_turn(scenarios[i].command) ? lr : st).push_back(results[i]);
    rows.push_back(row("ST", st));
    rows.push_back(row("LR", lr));
  }
  return rows;
}

void load_model(Model& model, const fs::path& checkpoint) {
  if (!fs::exists(checkpoint)) throw std::runtime_error(checkpoint.string() + ": checkpoint not found");
  load_checkpoint(model.params(), checkpoint);
}

std::vector<ResultRow> cmd_eval(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& dataset, bool split,
                                const fs::path& out_dir) {
  Model model(cfg.model, cfg.seed);
  load_model(model, checkpoint);
  const auto scenarios = load_dataset(dataset, cfg.model.spec);
  const auto rows = evaluate_rows(model_planner(model), scenarios, split,
                                  {"eval", flags_label(cfg.model.flags), PerturbMode::None, 0.0, cfg.seed});
  write_results(rows, out_dir);
  return rows;
}

std::vector<ResultRow> cmd_perturb(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& dataset,
                                   bool split, const fs::path& out_dir, ForwardOptions opt) {
  Model model(cfg.model, cfg.seed);
  load_model(model, checkpoint);
  const auto scenarios = load_dataset(dataset, cfg.model.spec);
  std::vector<ResultRow> rows;
  for (PerturbMode mode : cfg.experiment.perturbations) {
    const auto r = evaluate_rows(model_planner(model, mode, opt), scenarios, split,
                                 {"perturb", flags_label(cfg.model.flags), mode, 0.0, cfg.seed});
    rows.insert(rows.end(), r.begin(), r.end());
  }
  write_results(rows, out_dir);
  return rows;
}

std::vector<ResultRow> cmd_ablate(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir) {
  const auto val = load_split(cfg, data_dir, "val");
  if (val.empty()) throw std::runtime_error((data_dir / "val.jsonl").string() + ": validation split is empty");
  std::vector<ResultRow> rows;
  for (std::size_t rung : cfg.experiment.ablation_rungs) {
    RunConfig rc = cfg;
    rc.model.flags = ladder_flags(rung);
    rc.model.flags.path_attention = cfg.model.flags.path_attention;
    rc.finalize();
    const fs::path dir = out_dir / rung_name(rung);
    const TrainOutcome t = cmd_train(rc, data_dir, dir);
    Model model(rc.model, rc.seed);
    load_model(model, t.final_checkpoint);
    const auto r = evaluate_rows(model_planner(model), val, false,
                                 {rung_name(rung), flags_label(rc.model.flags), PerturbMode::None, t.seconds, rc.seed});
    rows.insert(rows.end(), r.begin(), r.end());
    write_results(rows, out_dir);
  }
  return rows;
}

GradcheckReport cmd_gradcheck(const RunConfig& cfg, std::ostream& out, const std::vector<GradcheckCase>& cases) {
  GradCheckOptions opts;  // step 1e-4, tolerance 1e-5
  const GradcheckReport report = run_gradcheck(cases, cfg.seed, opts);
  for (const auto& e : report.entries) {
    char line[160];
    std::snprintf(line, sizeof line, "%-26s max_rel_error %.3e  entries %5zu  %s", e.op.c_str(), e.max_rel_error,
                  e.entries, e.passed ? "PASS" : "FAIL");
    out << line << "\n";
    if (!e.passed) out << "  worst: " << e.worst << "\n";
  }
  const auto failed = report.failures();
  if (failed.empty()) {
    out << "all " << report.entries.size() << " ops within " << report.tolerance << "\n";
  } else {
    out << failed.size() << " op(s) above " << report.tolerance << ":";
    for (const auto& f : failed) out << " " << f;
    out << "\n";
  }
  return report;
}

}  // namespace dbp
