#include "dbp/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace dbp {

RunConfig::RunConfig() {
  model.spec.resolution = 1.0;
  finalize();
}

void RunConfig::finalize() {
  data.world.spec = model.spec;
  data.world.horizon = model.horizon;
  data.world.dt = model.dt;
  data.world.n_map = model.n_map;
  data.world.n_point = model.n_point;
  model.validate();
  losses.validate();
  optim.validate();
  data.world.validate();
  if (data.n_train == 0) throw std::invalid_argument("data: n_train must be positive");
  if (!(data.turn_fraction >= 0.0 && data.turn_fraction <= 1.0)) {
    throw std::invalid_argument("data: turn_fraction must lie in [0, 1]");
  }
  for (std::size_t r : experiment.ablation_rungs) {
    if (r > 4) throw std::invalid_argument("experiment: ablation rung " + std::to_string(r) + " outside 0..4");
  }
  if (model.horizon * model.dt < 3.0 - 1e-9) {
    throw std::invalid_argument("model: horizon * dt must cover the 3 s metric horizon");
  }
}

namespace {

struct Value {
  enum Kind { Number, Bool, String, Array } kind = Number;
  double num = 0.0;
  bool flag = false;
  std::string str;
  std::vector<Value> items;
};

[[noreturn]] void fail(const std::string& where, const std::string& msg) { throw ConfigError(where + ": " + msg); }

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

Value parse_scalar(const std::string& s, const std::string& where) {
  Value v;
  if (s.empty()) fail(where, "missing value");
  if (s.front() == '"') {
    if (s.size() < 2 || s.back() != '"') fail(where, "unterminated string");
    v.kind = Value::String;
    v.str = s.substr(1, s.size() - 2);
    if (v.str.find('"') != std::string::npos) fail(where, "embedded quote in string");
    return v;
  }
  if (s == "true" || s == "false") {
    v.kind = Value::Bool;
    v.flag = s == "true";
    return v;
  }
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v.num);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v.num)) fail(where, "bad value '" + s + "'");
  return v;
}

Value parse_value(const std::string& s, const std::string& where) {
  if (s.empty() || s.front() != '[') return parse_scalar(s, where);
  if (s.back() != ']') fail(where, "unterminated array");
  Value v;
  v.kind = Value::Array;
  const std::string body = trim(std::string_view(s).substr(1, s.size() - 2));
  if (body.empty()) return v;
  std::size_t start = 0;
  bool quoted = false;
  for (std::size_t i = 0; i <= body.size(); ++i) {
    if (i < body.size() && body[i] == '"') quoted = !quoted;
    if (i == body.size() || (body[i] == ',' && !quoted)) {
      const std::string item = trim(std::string_view(body).substr(start, i - start));
      if (item.empty() && i == body.size() && !v.items.empty()) break;  // trailing comma
      if (!item.empty() && item.front() == '[') fail(where, "nested arrays are not supported");
      v.items.push_back(parse_scalar(item, where));
      start = i + 1;
    }
  }
  return v;
}

struct Field {
  std::string name;  // "section.key" or "key" at top level
  std::function<void(RunConfig&, const Value&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::string fmt_double(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  std::string s(buf, r.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

double as_double(const Value& v, const std::string& where) {
  if (v.kind != Value::Number) fail(where, "expected a number");
  return v.num;
}

std::uint64_t as_count(const Value& v, const std::string& where) {
  const double d = as_double(v, where);
  if (d < 0.0 || d != std::floor(d) || d > 9.0e15) fail(where, "expected a non-negative integer");
  return static_cast<std::uint64_t>(d);
}

template <class Ref>
Field real(std::string name, Ref ref) {
  return {std::move(name), [ref](RunConfig& c, const Value& v, const std::string& w) { ref(c) = as_double(v, w); },
          [ref](const RunConfig& c) { return fmt_double(ref(const_cast<RunConfig&>(c))); }};
}

template <class Ref>
Field count(std::string name, Ref ref) {
  return {std::move(name),
          [ref](RunConfig& c, const Value& v, const std::string& w) {
            ref(c) = static_cast<std::remove_reference_t<decltype(ref(c))>>(as_count(v, w));
          },
          [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }};
}

template <class Ref>
Field boolean(std::string name, Ref ref) {
  return {std::move(name),
          [ref](RunConfig& c, const Value& v, const std::string& w) {
            if (v.kind != Value::Bool) fail(w, "expected true or false");
            ref(c) = v.flag;
          },
          [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

template <class Ref>
Field text(std::string name, Ref ref) {
  return {std::move(name),
          [ref](RunConfig& c, const Value& v, const std::string& w) {
            if (v.kind != Value::String) fail(w, "expected a string");
            ref(c) = v.str;
          },
          [ref](const RunConfig& c) { return "\"" + ref(const_cast<RunConfig&>(c)) + "\""; }};
}

#define DBP_REF(expr) [](RunConfig& c) -> auto& { return c.expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(count("seed", DBP_REF(seed)));

    f.push_back(count("model.obs_channels", DBP_REF(model.obs_channels)));
    f.push_back(count("model.stem_channels", DBP_REF(model.stem_channels)));
    f.push_back(count("model.channels", DBP_REF(model.channels)));
    f.push_back(count("model.n_agent", DBP_REF(model.n_agent)));
    f.push_back(count("model.n_map", DBP_REF(model.n_map)));
    f.push_back(count("model.n_point", DBP_REF(model.n_point)));
    f.push_back(count("model.n_mode", DBP_REF(model.n_mode)));
    f.push_back(count("model.horizon", DBP_REF(model.horizon)));
    f.push_back(real("model.dt", DBP_REF(model.dt)));
    f.push_back(count("model.samples", DBP_REF(model.samples)));
    f.push_back(real("model.max_offset", DBP_REF(model.max_offset)));
    f.push_back(count("model.decoder_layers", DBP_REF(model.decoder_layers)));
    f.push_back(count("model.interaction_layers", DBP_REF(model.interaction_layers)));
    f.push_back(count("model.fusion_layers", DBP_REF(model.fusion_layers)));
    f.push_back(count("model.attention_heads", DBP_REF(model.attention_heads)));
    f.push_back(count("model.ffn_hidden", DBP_REF(model.ffn_hidden)));

    f.push_back(boolean("flags.dual_branch", DBP_REF(model.flags.dual_branch)));
    f.push_back(boolean("flags.distill", DBP_REF(model.flags.distill)));
    f.push_back(boolean("flags.scene_aware_init", DBP_REF(model.flags.scene_aware_init)));
    f.push_back(boolean("flags.autoregressive_map", DBP_REF(model.flags.autoregressive_map)));
    f.push_back(boolean("flags.ego_enhancement", DBP_REF(model.flags.ego_enhancement)));
    f.push_back(boolean("flags.path_attention", DBP_REF(model.flags.path_attention)));

    f.push_back(real("bev.x_min", DBP_REF(model.spec.x_min)));
    f.push_back(real("bev.x_max", DBP_REF(model.spec.x_max)));
    f.push_back(real("bev.y_min", DBP_REF(model.spec.y_min)));
    f.push_back(real("bev.y_max", DBP_REF(model.spec.y_max)));
    f.push_back(real("bev.resolution", DBP_REF(model.spec.resolution)));

    f.push_back(real("losses.alpha", DBP_REF(losses.alpha)));
    f.push_back(real("losses.beta", DBP_REF(losses.beta)));
    f.push_back(real("losses.gamma", DBP_REF(losses.gamma)));
    f.push_back(real("losses.delta", DBP_REF(losses.delta)));
    f.push_back(real("losses.lambda", DBP_REF(losses.lambda)));
    f.push_back(real("losses.det", DBP_REF(losses.det)));
    f.push_back(real("losses.map", DBP_REF(losses.map)));
    f.push_back(real("losses.mot", DBP_REF(losses.mot)));
    f.push_back(real("losses.plan", DBP_REF(losses.plan)));
    f.push_back(real("losses.aux", DBP_REF(losses.aux)));
    f.push_back(real("losses.eps", DBP_REF(losses.eps)));
    f.push_back(real("losses.background", DBP_REF(losses.background)));

    f.push_back(real("optimizer.lr", DBP_REF(optim.lr)));
    f.push_back(real("optimizer.weight_decay", DBP_REF(optim.weight_decay)));
    f.push_back(real("optimizer.beta1", DBP_REF(optim.beta1)));
    f.push_back(real("optimizer.beta2", DBP_REF(optim.beta2)));
    f.push_back(count("optimizer.warmup_steps", DBP_REF(optim.warmup_steps)));
    f.push_back(count("optimizer.epochs", DBP_REF(optim.epochs)));
    f.push_back(count("optimizer.batch_size", DBP_REF(optim.batch_size)));
    f.push_back(count("optimizer.eval_every", DBP_REF(optim.eval_every)));

    f.push_back(count("data.train_seed", DBP_REF(data.train_seed)));
    f.push_back(count("data.n_train", DBP_REF(data.n_train)));
    f.push_back(count("data.val_seed", DBP_REF(data.val_seed)));
    f.push_back(count("data.n_val", DBP_REF(data.n_val)));
    f.push_back(real("data.turn_fraction", DBP_REF(data.turn_fraction)));
    f.push_back(real("data.speed_min", DBP_REF(data.world.speed_min)));
    f.push_back(real("data.speed_max", DBP_REF(data.world.speed_max)));
    f.push_back(real("data.kappa_min", DBP_REF(data.world.kappa_min)));
    f.push_back(real("data.kappa_max", DBP_REF(data.world.kappa_max)));
    f.push_back(real("data.difficulty", DBP_REF(data.world.difficulty)));
    f.push_back(count("data.max_agents", DBP_REF(data.world.max_agents)));
    f.push_back(count("data.history_steps", DBP_REF(data.world.history_steps)));

    f.push_back({"experiment.perturbations",
                 [](RunConfig& c, const Value& v, const std::string& w) {
                   if (v.kind != Value::Array) fail(w, "expected an array of mode names");
                   c.experiment.perturbations.clear();
                   for (const Value& item : v.items) {
                     if (item.kind != Value::String) fail(w, "expected mode names");
                     try {
                       c.experiment.perturbations.push_back(parse_perturb(item.str));
                     } catch (const std::invalid_argument& e) {
                       fail(w, e.what());
                     }
                   }
                 },
                 [](const RunConfig& c) {
                   std::string s = "[";
                   for (std::size_t i = 0; i < c.experiment.perturbations.size(); ++i) {
                     if (i) s += ", ";
                     s += "\"" + std::string(perturb_name(c.experiment.perturbations[i])) + "\"";
                   }
                   return s + "]";
                 }});
    f.push_back({"experiment.ablation_rungs",
                 [](RunConfig& c, const Value& v, const std::string& w) {
                   if (v.kind != Value::Array) fail(w, "expected an array of rung indices");
                   c.experiment.ablation_rungs.clear();
                   for (const Value& item : v.items) c.experiment.ablation_rungs.push_back(as_count(item, w));
                 },
                 [](const RunConfig& c) {
                   std::string s = "[";
                   for (std::size_t i = 0; i < c.experiment.ablation_rungs.size(); ++i) {
                     if (i) s += ", ";
                     s += std::to_string(c.experiment.ablation_rungs[i]);
                   }
                   return s + "]";
                 }});
    f.push_back(boolean("experiment.split_by_command", DBP_REF(experiment.split_by_command)));

    f.push_back(text("io.data_dir", DBP_REF(io.data_dir)));
    f.push_back(text("io.out_dir", DBP_REF(io.out_dir)));
    return f;
  }();
  return table;
}

#undef DBP_REF

}  // namespace

RunConfig parse_config(std::string_view text, const std::string& origin) {
  std::map<std::string, const Field*> index;
  std::map<std::string, bool> sections{{"", true}};
  for (const Field& f : fields()) {
    index[f.name] = &f;
    const auto dot = f.name.find('.');
    if (dot != std::string::npos) sections[f.name.substr(0, dot)] = true;
  }

  RunConfig cfg;
  std::map<std::string, std::size_t> seen;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(where, "malformed section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (section.empty() || !sections.count(section)) fail(where, "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(where, "expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string name = section.empty() ? key : section + "." + key;
    const auto it = index.find(name);
    if (key.empty() || it == index.end()) fail(where, "unknown key '" + name + "'");
    if (seen.count(name)) fail(where, "duplicate key '" + name + "' (first on line " + std::to_string(seen[name]) + ")");
    seen[name] = lineno;
    it->second->set(cfg, parse_value(trim(std::string_view(line).substr(eq + 1)), where), where);
  }
  try {
    cfg.finalize();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(path.string() + ": cannot open config file");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string format_config(const RunConfig& cfg) {
  std::string out, section;
  for (const Field& f : fields()) {
    const auto dot = f.name.find('.');
    const std::string sec = dot == std::string::npos ? "" : f.name.substr(0, dot);
    const std::string key = dot == std::string::npos ? f.name : f.name.substr(dot + 1);
    if (sec != section) {
      out += "\n[" + sec + "]\n";
      section = sec;
    }
    out += key + " = " + f.get(cfg) + "\n";
  }
  return out;
}

}  // namespace dbp
