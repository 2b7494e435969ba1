#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "dbp/harness.hpp"

using namespace dbp;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "dbp_harness_test" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

RunConfig tiny_config() {
  RunConfig c = parse_config(R"(
seed = 5
[bev]
resolution = 1.5
[optimizer]
epochs = 1
batch_size = 4
eval_every = 1
[data]
n_train = 5
n_val = 8
turn_fraction = 0.5
)");
  return c;
}

}  // namespace

// ---- configuration ---------------------------------------------------------

TEST_CASE("default configuration round trips through its text form") {
  const RunConfig d;
  const std::string text = format_config(d);
  CHECK(format_config(parse_config(text)) == text);
  CHECK(parse_config("").model.flags == AblationFlags{});
  CHECK(d.data.world.spec == d.model.spec);
}

TEST_CASE("configuration values are applied") {
  const RunConfig c = parse_config(R"(
seed = 9   # trailing comment
[model]
channels = 16
attention_heads = 2
[flags]
path_attention = false
[optimizer]
lr = 5e-4
[experiment]
perturbations = ["x0.0", "abs100"]
ablation_rungs = [0, 4]
[io]
out_dir = "runs/a#b"
)");
  CHECK(c.seed == 9);
  CHECK(c.model.channels == 16);
  CHECK_FALSE(c.model.flags.path_attention);
  CHECK(c.optim.lr == 5e-4);
  CHECK(c.experiment.perturbations == std::vector<PerturbMode>{PerturbMode::Zero, PerturbMode::Abs100});
  CHECK(c.experiment.ablation_rungs == std::vector<std::size_t>{0, 4});
  CHECK(c.io.out_dir == "runs/a#b");
  CHECK(format_config(parse_config(format_config(c))) == format_config(c));
}

TEST_CASE("configuration errors name the line") {
  auto error_of = [](const std::string& text) {
    try {
      parse_config(text, "cfg");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(error_of("[model]\nchanelz = 3\n").find("cfg:2: unknown key 'model.chanelz'") != std::string::npos);
  CHECK(error_of("[modle]\n").find("cfg:1: unknown section") != std::string::npos);
  CHECK(error_of("[model]\nchannels = 16\nchannels = 32\n").find("cfg:3: duplicate") != std::string::npos);
  CHECK(error_of("[model]\nchannels = 1.5\n").find("cfg:2:") != std::string::npos);
  CHECK(error_of("[flags]\ndistill = 1\n").find("true or false") != std::string::npos);
  CHECK(error_of("[io]\nout_dir = out\n").find("cfg:2:") != std::string::npos);
  CHECK(error_of("[experiment]\nperturbations = [\"x2.0\"]\n").find("cfg:2:") != std::string::npos);
  CHECK(error_of("seed\n").find("key = value") != std::string::npos);
  // Inconsistent flags are a configuration error.
  CHECK(error_of("[flags]\ndual_branch = false\nscene_aware_init = false\n").find("distillation requires") !=
        std::string::npos);
  CHECK(error_of("[model]\nhorizon = 4\n").find("3 s") != std::string::npos);
  CHECK_THROWS_AS(load_config("/nonexistent/dbp.toml"), ConfigError);
}

// ---- gen-data --------------------------------------------------------------

TEST_CASE("gen-data is deterministic and its manifest matches the files") {
  RunConfig c = tiny_config();
  c.data.n_train = 10;
  const fs::path a = fresh_dir("gen_a"), b = fresh_dir("gen_b");
  const DataManifest m = cmd_gen_data(c, a);
  cmd_gen_data(c, b);
  for (const char* f : {"train.jsonl", "val.jsonl", "manifest.json"}) CHECK(slurp(a / f) == slurp(b / f));

  CHECK(lines(slurp(a / "train.jsonl")).size() == m.train.count);
  CHECK(lines(slurp(a / "val.jsonl")).size() == m.val.count);
  CHECK(m.train.count == 10);
  CHECK(m.train.straight + m.train.turn == 10);
  CHECK(m.train.first_seed == c.data.train_seed);
  CHECK(m.train.last_seed == c.data.train_seed + 9);
  const std::string man = slurp(a / "manifest.json");
  CHECK(man.find("\"count\": 10") != std::string::npos);
  std::size_t turns = 0;
  for (const auto& s : load_split(c, a, "train")) turns += is_turn(s.command);
  CHECK(turns == m.train.turn);
}

TEST_CASE("gen-data command mix rounds turns down") {
  RunConfig c = tiny_config();
  c.data.n_train = 200;
  c.data.n_val = 0;
  c.data.turn_fraction = 0.25;
  const DataManifest m = cmd_gen_data(c, fresh_dir("mix"));
  CHECK(m.train.straight == 150);
  CHECK(m.train.turn == 50);
  c.data.n_train = 7;
  CHECK(cmd_gen_data(c, fresh_dir("mix7")).train.turn == 1);
}

// ---- train -----------------------------------------------------------------

TEST_CASE("one training epoch writes checkpoints and a finite loss row") {
  const RunConfig c = tiny_config();
  const fs::path data = fresh_dir("train_data"), out = fresh_dir("train_out");
  cmd_gen_data(c, data);
  const TrainOutcome t = cmd_train(c, data, out);
  CHECK(fs::exists(t.final_checkpoint));
  CHECK(fs::exists(t.best_checkpoint));
  const auto rows = lines(slurp(t.losses_csv));
  REQUIRE(rows.size() == 2);
  CHECK(rows[0] == "epoch,total,det,map,mot,plan,distill,autoreg,lr,val_l2");
  const auto cells = split_csv(rows[1]);
  REQUIRE(cells.size() == 10);
  for (std::size_t i = 1; i < cells.size(); ++i) CHECK(std::isfinite(std::stod(cells[i])));
  CHECK(std::stod(cells[6]) > 0.0);  // distill
  CHECK(std::stod(cells[7]) > 0.0);  // autoreg
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  RunConfig c = tiny_config();
  c.optim.lr = 0.0;
  c.optim.epochs = 2;
  const fs::path data = fresh_dir("lr0_data"), out = fresh_dir("lr0_out");
  cmd_gen_data(c, data);
  const Model init(c.model, c.seed);
  save_checkpoint(init.params(), out / "init.dbp");
  const TrainOutcome t = cmd_train(c, data, out);
  CHECK(slurp(out / "init.dbp") == slurp(t.final_checkpoint));
}

TEST_CASE("disabling the autoregressive map loss zeroes its column") {
  RunConfig c = tiny_config();
  c.model.flags.autoregressive_map = false;
  c.optim.epochs = 2;
  c.finalize();
  const fs::path data = fresh_dir("ar_data"), out = fresh_dir("ar_out");
  cmd_gen_data(c, data);
  const TrainOutcome t = cmd_train(c, data, out);
  const auto rows = lines(slurp(t.losses_csv));
  REQUIRE(rows.size() == 3);
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(split_csv(rows[i])[7] == "0");
}

TEST_CASE("training aborts on a non-finite loss naming epoch and component") {
  const RunConfig c = tiny_config();
  WorldConfig wc = c.data.world;
  auto train = generate_dataset(1, 4, 0.0, wc);
  train[2].ego.velocity.x = std::nan("");
  Model m(c.model, 1);
  OptimConfig opt = c.optim;
  opt.epochs = 3;
  try {
    train_model(m, train, {}, opt, c.losses);
    FAIL("expected NonFiniteLoss");
  } catch (const NonFiniteLoss& e) {
    CHECK(e.epoch == 1);
    CHECK(e.component == "plan");
    CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
  }
}

TEST_CASE("warmup is clamped to a tenth of the run") {
  CHECK(effective_warmup(500, 5000) == 500);
  CHECK(effective_warmup(500, 600) == 60);
  CHECK(effective_warmup(500, 6) == 0);
}

// ---- evaluation ------------------------------------------------------------

TEST_CASE("a ground-truth planner scores zero error and no collisions") {
  const RunConfig c = tiny_config();
  const auto scenarios = generate_dataset(40, 30, 0.5, c.data.world);
  const Planner oracle = [](const Scenario& s) { return s.gt_plan; };
  const auto rows = evaluate_rows(oracle, scenarios, true, {"oracle", "gt", PerturbMode::None, 0.0, 0});
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) {
    CHECK(r.metrics.l2_avg == 0.0);
    CHECK(r.metrics.collision_avg == 0.0);
  }
}

TEST_CASE("split rows recombine into the overall row") {
  const RunConfig c = tiny_config();
  const auto scenarios = generate_dataset(70, 24, 0.25, c.data.world);
  const Model m(c.model, 2);
  const auto rows = evaluate_rows(model_planner(m), scenarios, true, {"eval", "x", PerturbMode::None, 0.0, 0});
  REQUIRE(rows.size() == 3);
  CHECK(rows[1].split == "ST");
  CHECK(rows[2].split == "LR");
  const double n_st = static_cast<double>(rows[1].metrics.count), n_lr = static_cast<double>(rows[2].metrics.count);
  CHECK(n_st + n_lr == static_cast<double>(rows[0].metrics.count));
  for (std::size_t h = 0; h < 3; ++h) {
    const double w = (n_st * rows[1].metrics.l2_at[h] + n_lr * rows[2].metrics.l2_at[h]) / (n_st + n_lr);
    CHECK(std::fabs(w - rows[0].metrics.l2_at[h]) <= 1e-9);
  }
  const double wa = (n_st * rows[1].metrics.l2_avg + n_lr * rows[2].metrics.l2_avg) / (n_st + n_lr);
  CHECK(std::fabs(wa - rows[0].metrics.l2_avg) <= 1e-9);
}

TEST_CASE("parallel evaluation matches serial evaluation") {
  const RunConfig c = tiny_config();
  const auto scenarios = generate_dataset(90, 12, 0.25, c.data.world);
  const Model m(c.model, 4);
  const auto serial = run_planner(model_planner(m), scenarios, 1);
  const auto parallel = run_planner(model_planner(m), scenarios, 3);
  REQUIRE(serial.size() == parallel.size());
  for (std::size_t i = 0; i < serial.size(); ++i) {
    CHECK(serial[i].l2 == parallel[i].l2);
    CHECK(serial[i].collision == parallel[i].collision);
  }
}

TEST_CASE("eval and perturb commands") {
  const RunConfig c = tiny_config();
  const fs::path data = fresh_dir("eval_data"), out = fresh_dir("eval_out");
  cmd_gen_data(c, data);
  const TrainOutcome t = cmd_train(c, data, out / "train");

  const auto e1 = cmd_eval(c, t.final_checkpoint, data / "val.jsonl", true, out / "e1");
  const auto e2 = cmd_eval(c, t.final_checkpoint, data / "val.jsonl", true, out / "e2");
  CHECK(slurp(out / "e1" / "results.csv") == slurp(out / "e2" / "results.csv"));
  CHECK(slurp(out / "e1" / "results.json") == slurp(out / "e2" / "results.json"));
  CHECK(lines(slurp(out / "e1" / "results.csv")).front() == results_header());

  const auto p = cmd_perturb(c, t.final_checkpoint, data / "val.jsonl", false, out / "p");
  REQUIRE(p.size() == 5);
  const char* order[] = {"none", "x0.0", "x0.5", "x1.5", "abs100"};
  for (std::size_t i = 0; i < 5; ++i) CHECK(p[i].perturbation == order[i]);
  CHECK(p[0].metrics.l2_at == e1[0].metrics.l2_at);
  CHECK(p[0].metrics.collision_at == e1[0].metrics.collision_at);

  ForwardOptions sever;
  sever.sever_ego_branch = true;
  const auto s = cmd_perturb(c, t.final_checkpoint, data / "val.jsonl", false, out / "s", sever);
  for (const auto& r : s) {
    CHECK(r.metrics.l2_at == s[0].metrics.l2_at);
    CHECK(r.metrics.collision_at == s[0].metrics.collision_at);
  }

  // A checkpoint from a differently shaped model is rejected.
  RunConfig other = c;
  other.model.channels = 16;
  other.model.attention_heads = 2;
  other.finalize();
  CHECK_THROWS_AS(cmd_eval(other, t.final_checkpoint, data / "val.jsonl", false, out / "bad"), std::runtime_error);
  CHECK_THROWS_AS(cmd_eval(c, out / "missing.dbp", data / "val.jsonl", false, out / "bad"), std::runtime_error);
}

TEST_CASE("ablate emits the five-rung ladder") {
  RunConfig c = tiny_config();
  c.data.n_train = 4;
  c.data.n_val = 4;
  const fs::path data = fresh_dir("abl_data"), out = fresh_dir("abl_out");
  cmd_gen_data(c, data);
  const auto rows = cmd_ablate(c, data, out);
  REQUIRE(rows.size() == 5);
  const char* labels[] = {"baseline", "D", "D+B", "D+B+S", "D+B+S+A"};
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(rows[i].experiment == "ID-" + std::to_string(i + 1));
    CHECK(rows[i].flags == labels[i]);
    CHECK(std::isfinite(rows[i].metrics.l2_avg));
    CHECK(std::isfinite(rows[i].metrics.collision_avg));
    const auto loss_rows = lines(slurp(out / rows[i].experiment / "losses.csv"));
    CHECK(loss_rows.size() == 2);
    CHECK(loss_rows[0] == losses_header());
  }
  CHECK(lines(slurp(out / "results.csv")).size() == 6);
}

// ---- gradcheck -------------------------------------------------------------

TEST_CASE("gradcheck report lists every op once and passes") {
  std::ostringstream os;
  const auto report = cmd_gradcheck(RunConfig{}, os);
  CHECK(report.all_passed());
  std::set<std::string> names;
  for (const auto& e : report.entries) names.insert(e.op);
  CHECK(names.size() == report.entries.size());
  for (const char* op : {"bilinear_sample", "path_attention", "deformable_attention", "mhsa", "cross_attention",
                         "layer_norm", "gwd", "distill_df", "distill_ik", "distill_ic", "autoregressive_map_loss",
                         "autoregressive_gwd_loss", "planning_loss", "perception_losses", "conv2d"})
    CHECK(names.count(op) == 1);
  const std::string text = os.str();
  for (const auto& e : report.entries) CHECK(text.find(e.op + " ") != std::string::npos);
}

TEST_CASE("gradcheck detects a corrupted gradient") {
  auto cases = default_gradcheck_cases();
  // x * stop_gradient(x) drops half of d(x^2)/dx.
  cases.push_back({"corrupted_square", [](std::uint64_t, const GradCheckOptions& o) {
                     Tensor x = Tensor::from({3}, {0.7, -1.2, 2.0}, true);
                     return check_gradients([&](const std::vector<Tensor>&) { return sum(x * x.detach()); }, {x}, o);
                   }});
  std::ostringstream os;
  const auto report = cmd_gradcheck(RunConfig{}, os, cases);
  CHECK_FALSE(report.all_passed());
  CHECK(report.failures() == std::vector<std::string>{"corrupted_square"});
  CHECK(os.str().find("corrupted_square") != std::string::npos);
  CHECK(os.str().find("FAIL") != std::string::npos);
}
