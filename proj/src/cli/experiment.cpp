#include "romae/experiment.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

namespace romae {

using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

double to_double(const std::string& v) {
  if (v == "inf") return std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  const double d = std::stod(v, &used);
  if (used != v.size()) throw std::invalid_argument("not a number");
  return d;
}

std::uint64_t to_u64(const std::string& v) {
  if (v.empty() || v[0] == '-') throw std::invalid_argument("not a non-negative integer");
  std::size_t used = 0;
  const auto n = std::stoull(v, &used);
  if (used != v.size()) throw std::invalid_argument("not a non-negative integer");
  return n;
}

std::size_t to_size(const std::string& v) { return static_cast<std::size_t>(to_u64(v)); }

bool to_bool(const std::string& v) {
  if (v == "true" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "no" || v == "0") return false;
  throw std::invalid_argument("expected true or false");
}

TargetKind to_target(const std::string& v) {
  if (v == "values") return TargetKind::Values;
  if (v == "time") return TargetKind::Time;
  if (v == "label") return TargetKind::Label;
  throw std::invalid_argument("expected values, time or label");
}

std::string target_name(TargetKind t) {
  switch (t) {
    case TargetKind::Values: return "values";
    case TargetKind::Time: return "time";
    case TargetKind::Label: return "label";
  }
  return "?";
}

// Model keys are collected first and applied after presets are chosen, so
// `model.use_cls` works whichever line comes first.
struct ModelKeys {
  std::string encoder = "tiny", decoder = "tiny-shallow";
  std::optional<bool> use_cls;
  std::optional<std::size_t> d_model;
  std::optional<double> rope_p, rope_base, dropout, stochastic_depth;
  std::optional<PositionalMode> positional;
};

using Setter = std::function<void(ExperimentConfig&, ModelKeys&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"name", [](auto& c, auto&, const auto& v) { c.name = v; }},
      {"data.generator",
       [](auto& c, auto&, const auto& v) {
         if (v != "position_recon" && v != "single_token" && v != "spirals" && v != "rbf" && v != "csv")
           throw std::invalid_argument("expected position_recon, single_token, spirals, rbf or csv");
         c.data.generator = v;
       }},
      {"data.seed", [](auto& c, auto&, const auto& v) { c.data.seed = to_u64(v); }},
      {"data.n_train",
       [](auto& c, auto&, const auto& v) {
         c.data.position.n_train = c.data.single.n_train = c.data.spirals.n_train = to_size(v);
       }},
      {"data.n_test", [](auto& c, auto&, const auto& v) { c.data.position.n_test = c.data.single.n_test = to_size(v); }},
      {"data.n", [](auto& c, auto&, const auto& v) { c.data.spirals.n = c.data.rbf.n = to_size(v); }},
      {"data.seq_len", [](auto& c, auto&, const auto& v) { c.data.position.seq_len = to_size(v); }},
      {"data.lo", [](auto& c, auto&, const auto& v) { c.data.position.lo = c.data.single.lo = to_double(v); }},
      {"data.hi", [](auto& c, auto&, const auto& v) { c.data.position.hi = c.data.single.hi = to_double(v); }},
      {"data.steps", [](auto& c, auto&, const auto& v) { c.data.spirals.steps = to_size(v); }},
      {"data.noise_beta", [](auto& c, auto&, const auto& v) { c.data.spirals.noise_beta = to_double(v); }},
      {"data.alpha", [](auto& c, auto&, const auto& v) { c.data.spirals.alpha = to_double(v); }},
      {"data.n_obs", [](auto& c, auto&, const auto& v) { c.data.spirals.n_obs = to_size(v); }},
      {"data.len", [](auto& c, auto&, const auto& v) { c.data.rbf.len = to_size(v); }},
      {"data.latents", [](auto& c, auto&, const auto& v) { c.data.rbf.latents = to_size(v); }},
      {"data.bandwidth", [](auto& c, auto&, const auto& v) { c.data.rbf.bandwidth = to_double(v); }},
      {"data.noise_var", [](auto& c, auto&, const auto& v) { c.data.rbf.noise_var = to_double(v); }},
      {"data.min_obs", [](auto& c, auto&, const auto& v) { c.data.rbf.min_obs = to_size(v); }},
      {"data.max_obs", [](auto& c, auto&, const auto& v) { c.data.rbf.max_obs = to_size(v); }},
      {"data.train_csv", [](auto& c, auto&, const auto& v) { c.data.train_csv = v; }},
      {"data.eval_csv", [](auto& c, auto&, const auto& v) { c.data.eval_csv = v; }},
      {"data.normalize_time", [](auto& c, auto&, const auto& v) { c.data.normalize_time = to_bool(v); }},
      {"data.time_scale",
       [](auto& c, auto&, const auto& v) {
         c.data.time_scale = to_double(v);
         if (!(c.data.time_scale > 0.0)) throw std::invalid_argument("must be positive");
       }},
      {"data.variate_axis", [](auto& c, auto&, const auto& v) { c.data.variate_axis = to_bool(v); }},
      {"data.target", [](auto& c, auto&, const auto& v) { c.data.target = to_target(v); }},
      {"data.classes", [](auto& c, auto&, const auto& v) { c.data.classes = to_size(v); }},
      {"data.eval_split",
       [](auto& c, auto&, const auto& v) {
         if (v != "test" && v != "val") throw std::invalid_argument("expected test or val");
         c.data.eval_split = v;
       }},
      {"model.encoder",
       [](auto&, auto& m, const auto& v) {
         ModelConfig::preset(v);
         m.encoder = v;
       }},
      {"model.decoder",
       [](auto&, auto& m, const auto& v) {
         ModelConfig::preset(v);
         m.decoder = v;
       }},
      {"model.d_model", [](auto&, auto& m, const auto& v) { m.d_model = to_size(v); }},
      {"model.use_cls", [](auto&, auto& m, const auto& v) { m.use_cls = to_bool(v); }},
      {"model.positional", [](auto&, auto& m, const auto& v) { m.positional = parse_positional_mode(v); }},
      {"model.rope_p", [](auto&, auto& m, const auto& v) { m.rope_p = to_double(v); }},
      {"model.rope_base", [](auto&, auto& m, const auto& v) { m.rope_base = to_double(v); }},
      {"model.dropout", [](auto&, auto& m, const auto& v) { m.dropout = to_double(v); }},
      {"model.stochastic_depth", [](auto&, auto& m, const auto& v) { m.stochastic_depth = to_double(v); }},
      {"model.with_decoder", [](auto& c, auto&, const auto& v) { c.model.with_decoder = to_bool(v); }},
      {"model.head", [](auto& c, auto&, const auto& v) { c.model.head = parse_head_kind(v); }},
      {"model.head_outputs", [](auto& c, auto&, const auto& v) { c.model.head_outputs = to_size(v); }},
      {"model.seed", [](auto& c, auto&, const auto& v) { c.model_seed = to_u64(v); }},
      {"run.phase", [](auto& c, auto&, const auto& v) { c.run.phase = parse_phase(v); }},
      {"run.task", [](auto& c, auto&, const auto& v) { c.run.task = parse_task(v); }},
      {"run.optimizer", [](auto& c, auto&, const auto& v) { c.run.optimizer.kind = parse_optimizer_kind(v); }},
      {"run.lr", [](auto& c, auto&, const auto& v) { c.run.optimizer.lr = to_double(v); }},
      {"run.beta1", [](auto& c, auto&, const auto& v) { c.run.optimizer.beta1 = to_double(v); }},
      {"run.beta2", [](auto& c, auto&, const auto& v) { c.run.optimizer.beta2 = to_double(v); }},
      {"run.eps", [](auto& c, auto&, const auto& v) { c.run.optimizer.eps = to_double(v); }},
      {"run.weight_decay", [](auto& c, auto&, const auto& v) { c.run.optimizer.weight_decay = to_double(v); }},
      {"run.momentum", [](auto& c, auto&, const auto& v) { c.run.optimizer.momentum = to_double(v); }},
      {"run.epochs", [](auto& c, auto&, const auto& v) { c.run.epochs = to_size(v); }},
      {"run.batch_size", [](auto& c, auto&, const auto& v) { c.run.batch_size = to_size(v); }},
      {"run.eval_batch_size", [](auto& c, auto&, const auto& v) { c.run.eval_batch_size = to_size(v); }},
      {"run.warmup_steps", [](auto& c, auto&, const auto& v) { c.run.warmup_steps = to_size(v); }},
      {"run.clip", [](auto& c, auto&, const auto& v) { c.run.clip = to_double(v); }},
      {"run.label_smoothing", [](auto& c, auto&, const auto& v) { c.run.label_smoothing = to_double(v); }},
      {"run.mask_ratio", [](auto& c, auto&, const auto& v) { c.run.mask_ratio = to_double(v); }},
      {"run.mask_source", [](auto& c, auto&, const auto& v) { c.run.mask_source = parse_mask_source(v); }},
      {"run.eval_mask_source", [](auto& c, auto&, const auto& v) { c.run.eval_mask_source = parse_mask_source(v); }},
      {"run.metric", [](auto& c, auto&, const auto& v) { c.run.eval_metric = parse_metric(v); }},
      {"run.seed", [](auto& c, auto&, const auto& v) { c.run.seed = to_u64(v); }},
      {"run.log_every", [](auto& c, auto&, const auto& v) { c.run.log_every = to_size(v); }},
      {"run.out_dir", [](auto& c, auto&, const auto& v) { c.run.out_dir = v; }},
      {"eval.buckets", [](auto& c, auto&, const auto& v) { c.eval_buckets = to_size(v); }},
  };
  return table;
}

void apply_model_keys(ExperimentConfig& c, const ModelKeys& m) {
  const auto head = c.model.head;
  const auto outputs = c.model.head_outputs;
  const bool with_decoder = c.model.with_decoder;
  c.model.encoder = ModelConfig::preset(m.encoder);
  c.model.decoder = ModelConfig::preset(m.decoder);
  if (m.d_model) c.model.encoder.d_model = *m.d_model;
  for (auto* s : {&c.model.encoder, &c.model.decoder}) {
    if (m.use_cls) s->use_cls = *m.use_cls;
    if (m.positional) s->positional = *m.positional;
    if (m.rope_p) s->rope.p = *m.rope_p;
    if (m.rope_base) s->rope.base = *m.rope_base;
    if (m.dropout) s->dropout = *m.dropout;
    if (m.stochastic_depth) s->stochastic_depth = *m.stochastic_depth;
    s->rope.head_dim = s->head_dim();
  }
  c.model.head = head;
  c.model.head_outputs = outputs;
  c.model.with_decoder = with_decoder;
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error([&] {
        std::string msg = "invalid experiment config (" + std::to_string(problems.size()) + " problem" +
                          (problems.size() == 1 ? "" : "s") + "):";
        for (const auto& p : problems) msg += "\n  " + p;
        return msg;
      }()),
      problems_(std::move(problems)) {}

std::vector<std::string> experiment_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, s] : setters()) keys.push_back(k);
  return keys;
}

ExperimentConfig parse_experiment(const std::string& text, const std::string& origin) {
  ExperimentConfig cfg;
  ModelKeys mk;
  std::vector<std::string> problems;
  std::map<std::string, std::size_t> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      problems.push_back(where + "expected `key = value`");
      continue;
    }
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) {
      problems.push_back(where + "unknown key '" + key + "'");
      continue;
    }
    if (auto s = seen.find(key); s != seen.end()) {
      problems.push_back(where + "'" + key + "' already set on line " + std::to_string(s->second));
      continue;
    }
    seen[key] = lineno;
    try {
      it->second(cfg, mk, value);
    } catch (const std::exception& e) {
      problems.push_back(where + key + " = '" + value + "': " + e.what());
    }
  }
  try {
    apply_model_keys(cfg, mk);
  } catch (const std::exception& e) {
    problems.push_back(origin + ": model: " + e.what());
  }
  if (problems.empty()) {
    try {
      cfg.run.validate();
    } catch (const ContractError& e) {
      std::istringstream lines(e.what());
      std::string l;
      std::getline(lines, l);  // headline
      while (std::getline(lines, l)) problems.push_back(origin + ": run: " + trim(l));
    }
    if (cfg.run.task == Task::Reconstruct && cfg.data.target != TargetKind::Values) {
      problems.push_back(origin + ": reconstruction needs data.target = values");
    }
    if (cfg.run.task == Task::Classification && (cfg.data.target != TargetKind::Label || cfg.data.classes < 2)) {
      problems.push_back(origin + ": classification needs data.target = label and data.classes >= 2");
    }
    if (cfg.run.phase == Phase::Finetune && cfg.model.head == HeadKind::None) {
      problems.push_back(origin + ": fine-tuning needs model.head");
    }
    if (cfg.model.head != HeadKind::None && cfg.model.head_outputs == 0) {
      problems.push_back(origin + ": model.head_outputs must be positive when a head is attached");
    }
    if (cfg.data.generator == "csv" && cfg.data.train_csv.empty()) {
      problems.push_back(origin + ": data.generator = csv needs data.train_csv");
    }
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return cfg;
}

std::string apply_overrides(const std::string& text, const std::vector<std::string>& overrides) {
  std::map<std::string, std::string> repl;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError({"override '" + o + "' is not key=value"});
    repl[trim(o.substr(0, eq))] = trim(o.substr(eq + 1));
  }
  std::istringstream in(text);
  std::string out, line;
  while (std::getline(in, line)) {
    std::string body = line.substr(0, line.find('#'));
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      const auto key = trim(body.substr(0, eq));
      if (auto it = repl.find(key); it != repl.end()) {
        out += key + " = " + it->second + "\n";
        repl.erase(it);
        continue;
      }
    }
    out += line + "\n";
  }
  for (const auto& [k, v] : repl) out += k + " = " + v + "\n";
  return out;
}

ExperimentConfig load_experiment(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot read config " + path.string()});
  std::stringstream ss;
  ss << in.rdbuf();
  auto cfg = parse_experiment(apply_overrides(ss.str(), overrides), path.string());
  cfg.source = path;
  // CSV paths are relative to the config file.
  for (auto* p : {&cfg.data.train_csv, &cfg.data.eval_csv}) {
    if (!p->empty() && p->is_relative()) *p = path.parent_path() / *p;
  }
  return cfg;
}

json ExperimentConfig::to_json() const {
  auto run_json = json{{"phase", romae::to_string(run.phase)},
                       {"task", romae::to_string(run.task)},
                       {"optimizer", romae::to_string(run.optimizer.kind)},
                       {"lr", run.optimizer.lr},
                       {"beta1", run.optimizer.beta1},
                       {"beta2", run.optimizer.beta2},
                       {"weight_decay", run.optimizer.weight_decay},
                       {"momentum", run.optimizer.momentum},
                       {"epochs", run.epochs},
                       {"batch_size", run.batch_size},
                       {"warmup_steps", run.warmup_steps},
                       {"clip", std::isfinite(run.clip) ? json(run.clip) : json("inf")},
                       {"label_smoothing", run.label_smoothing},
                       {"mask_ratio", run.mask_ratio},
                       {"mask_source", romae::to_string(run.mask_source)},
                       {"eval_mask_source", romae::to_string(run.eval_mask_source.value_or(run.mask_source))},
                       {"metric", romae::to_string(run.eval_metric)},
                       {"seed", run.seed}};
  return {{"name", name},
          {"data", generator_spec_json(data)},
          {"model", model_config_to_json(model)},
          {"model_seed", model_seed},
          {"run", run_json}};
}

Splits generate_splits(const DataConfig& d) {
  if (d.generator == "position_recon") {
    auto s = d.position;
    s.seed = d.seed;
    return gen_position_recon(s);
  }
  if (d.generator == "single_token") {
    auto s = d.single;
    s.seed = d.seed;
    return gen_single_token_range(s);
  }
  if (d.generator == "spirals") {
    auto s = d.spirals;
    s.seed = d.seed;
    return gen_spirals(s);
  }
  if (d.generator == "rbf") {
    auto s = d.rbf;
    s.seed = d.seed;
    return gen_rbf_synthetic(s);
  }
  throw std::invalid_argument("unknown generator '" + d.generator + "'");
}

json generator_spec_json(const DataConfig& d) {
  json j = {{"generator", d.generator}, {"seed", d.seed}};
  if (d.generator == "position_recon") {
    j["n_train"] = d.position.n_train, j["n_test"] = d.position.n_test, j["seq_len"] = d.position.seq_len;
    j["lo"] = d.position.lo, j["hi"] = d.position.hi;
  } else if (d.generator == "single_token") {
    j["n_train"] = d.single.n_train, j["n_test"] = d.single.n_test, j["lo"] = d.single.lo, j["hi"] = d.single.hi;
  } else if (d.generator == "spirals") {
    j["n"] = d.spirals.n, j["n_train"] = d.spirals.n_train, j["steps"] = d.spirals.steps;
    j["noise_beta"] = d.spirals.noise_beta, j["alpha"] = d.spirals.alpha, j["n_obs"] = d.spirals.n_obs;
  } else if (d.generator == "rbf") {
    j["n"] = d.rbf.n, j["len"] = d.rbf.len, j["latents"] = d.rbf.latents, j["bandwidth"] = d.rbf.bandwidth;
    j["noise_var"] = d.rbf.noise_var, j["min_obs"] = d.rbf.min_obs, j["max_obs"] = d.rbf.max_obs;
  } else {
    j["train_csv"] = d.train_csv.string(), j["eval_csv"] = d.eval_csv.string();
    j["normalize_time"] = d.normalize_time;
  }
  j["time_scale"] = d.time_scale;
  j["variate_axis"] = d.variate_axis;
  j["target"] = target_name(d.target);
  return j;
}

ExperimentData build_data(const ExperimentConfig& cfg) {
  ExperimentData out;
  const auto& d = cfg.data;
  if (d.generator == "csv") {
    out.train_records = load_irregular_csv(d.train_csv, {d.normalize_time});
    if (!d.eval_csv.empty()) out.eval_records = load_irregular_csv(d.eval_csv, {d.normalize_time});
  } else {
    auto s = generate_splits(d);
    out.train_records = std::move(s.train);
    out.eval_records = d.eval_split == "val" ? std::move(s.val) : std::move(s.test);
  }
  TokenizeOptions to;
  to.target = d.target;
  to.time_scale = d.time_scale;
  to.variate_axis = d.variate_axis;
  to.classes = d.classes;
  out.train = to_dataset(out.train_records, to);
  out.eval = to_dataset(out.eval_records, to);
  if (out.eval.size() > 0 && out.eval.patch_size != out.train.patch_size) {
    throw DimensionError("evaluation split has a different channel count from the training split");
  }
  return out;
}

Romae build_model(const ExperimentConfig& cfg, const Dataset& train) {
  RomaeConfig rc = cfg.model;
  rc.patch_size = train.patch_size;
  rc.axes = train.axes;
  rc.encoder.rope.reserve_variate_axis = rc.decoder.rope.reserve_variate_axis = cfg.data.variate_axis;
  return Romae(rc, cfg.model_seed);
}

std::filesystem::path resolve_output(const std::filesystem::path& p) {
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("ROMAE_OUTPUT_ROOT"); root && *root) return std::filesystem::path(root) / p;
  return p;
}

}  // namespace romae
