#include "romae/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "romae/experiment.hpp"
#include "romae/verify.hpp"

namespace romae {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Usage problems that surface after CLI11 has finished parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path output_dir(const ExperimentConfig& cfg) {
  fs::path p = cfg.run.out_dir;
  if (p.empty()) p = fs::path("runs") / (cfg.name.empty() ? "experiment" : cfg.name);
  return resolve_output(p);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

json run_summary(const std::string& command, const ExperimentConfig& cfg, const fs::path& dir,
                 const TrainResult& r) {
  json s = {{"command", command},
            {"experiment", cfg.name},
            {"out_dir", dir.string()},
            {"epochs", r.final.epoch},
            {"steps", r.final.step},
            {"metric", to_string(cfg.run.eval_metric)}};
  if (!r.history.empty()) {
    s["final_train_loss"] = r.history.back().train_loss;
    for (auto it = r.history.rbegin(); it != r.history.rend(); ++it) {
      if (it->eval) {
        s["final_eval"] = *it->eval;
        break;
      }
    }
  }
  return s;
}

std::string same_or(const std::string& what, double a, double b) {
  if (a == b) return "";
  char buf[96];
  std::snprintf(buf, sizeof buf, ": checkpoint %g, config %g", a, b);
  return what + buf;
}

TrainResult train(Romae& model, const ExperimentConfig& cfg, const ExperimentData& data, const fs::path& dir,
                  const Checkpoint* resume) {
  fs::create_directories(dir);
  write_text(dir / "config.json", cfg.to_json().dump(2) + "\n");
  RunConfig run = cfg.run;
  run.out_dir = dir;
  return train_loop(model, data.train, data.eval.size() ? &data.eval : nullptr, run, resume);
}

Checkpoint read_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw CheckpointError("checkpoint not found: " + path);
  return load_checkpoint(path);
}

int cmd_gendata(const std::string& generator, std::uint64_t seed, const std::string& out_arg,
                const std::vector<std::string>& sets, std::ostream& out) {
  if (generator == "csv") throw UsageError("gendata needs a generator, not csv");
  std::string text = "data.generator = " + generator + "\ndata.seed = " + std::to_string(seed) + "\n";
  std::vector<std::string> overrides;
  for (const auto& s : sets) overrides.push_back(s.rfind("data.", 0) == 0 ? s : "data." + s);
  const auto cfg = parse_experiment(apply_overrides(text, overrides), "gendata");

  const fs::path dir =
      resolve_output(out_arg.empty() ? fs::path("data") / (generator + "-seed" + std::to_string(seed)) : fs::path(out_arg));
  fs::create_directories(dir);
  const Splits s = generate_splits(cfg.data);
  json files = json::object();
  std::size_t total = 0;
  for (const auto& [name, recs] : {std::pair{"train", &s.train}, {"val", &s.val}, {"test", &s.test}}) {
    if (recs->empty()) continue;
    const std::string file = std::string(name) + ".csv";
    write_irregular_csv(dir / file, *recs);
    files[name] = {{"file", file}, {"series", recs->size()}};
    total += recs->size();
  }
  json manifest = {{"spec", generator_spec_json(cfg.data)}, {"seed", seed}, {"series", total}, {"splits", files}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  out << json{{"command", "gendata"}, {"out_dir", dir.string()}, {"series", total}}.dump() << "\n";
  return kExitOk;
}

int cmd_pretrain(const std::string& config, const std::string& resume, const std::vector<std::string>& sets,
                 std::ostream& out) {
  const auto cfg = load_experiment(config, sets);
  if (cfg.run.phase != Phase::Pretrain) throw UsageError(config + ": pretrain needs run.phase = pretrain");
  const auto data = build_data(cfg);
  const fs::path dir = output_dir(cfg);
  TrainResult r;
  if (!resume.empty()) {
    const Checkpoint ck = read_checkpoint(resume);
    Romae model = restore_model(ck);
    r = train(model, cfg, data, dir, &ck);
  } else {
    Romae model = build_model(cfg, data.train);
    r = train(model, cfg, data, dir, nullptr);
  }
  out << run_summary("pretrain", cfg, dir, r).dump() << "\n";
  return kExitOk;
}

int cmd_finetune(const std::string& config, const std::string& checkpoint, bool from_scratch,
                 const std::string& resume, const std::vector<std::string>& sets, std::ostream& out) {
  const auto cfg = load_experiment(config, sets);
  if (cfg.run.phase != Phase::Finetune) throw UsageError(config + ": finetune needs run.phase = finetune");
  const int sources = !checkpoint.empty() + from_scratch + !resume.empty();
  if (sources != 1) throw UsageError("finetune needs exactly one of --checkpoint, --from-scratch or --resume");
  const auto data = build_data(cfg);
  const fs::path dir = output_dir(cfg);
  TrainResult r;
  json transfer;
  if (!resume.empty()) {
    const Checkpoint ck = read_checkpoint(resume);
    Romae model = restore_model(ck);
    r = train(model, cfg, data, dir, &ck);
  } else {
    Romae model = build_model(cfg, data.train);
    if (!checkpoint.empty()) {
      const auto t = transfer_encoder(model, read_checkpoint(checkpoint));
      transfer = {{"loaded", t.loaded}, {"dropped", t.dropped.size()}};
    }
    r = train(model, cfg, data, dir, nullptr);
  }
  auto s = run_summary("finetune", cfg, dir, r);
  if (!transfer.is_null()) s["pretrained"] = transfer;
  out << s.dump() << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& config, const std::string& checkpoint, const std::vector<std::string>& sets,
             std::ostream& out) {
  const auto cfg = load_experiment(config, sets);
  const Checkpoint ck = read_checkpoint(checkpoint);
  const Romae model = restore_model(ck);
  const auto data = build_data(cfg);
  if (data.eval.size() == 0) throw UsageError(config + ": no evaluation split");
  const double value = evaluate(model, data.eval, cfg.run.task, cfg.run.eval_metric, cfg.run);
  const fs::path dir = output_dir(cfg);
  fs::create_directories(dir);
  json result = {{"command", "eval"},
                 {"checkpoint", checkpoint},
                 {"split", cfg.data.eval_split},
                 {"metric", to_string(cfg.run.eval_metric)},
                 {"value", value},
                 {"samples", data.eval.size()}};

  if (cfg.run.task == Task::TokenRegression && model.config().head_outputs == 1) {
    // Error against position, for plotting edge effects.
    const auto errs = token_errors(model, data.eval, cfg.run.eval_batch_size);
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& e : errs) lo = std::min(lo, e.position), hi = std::max(hi, e.position);
    if (cfg.data.generator == "single_token" || cfg.data.generator == "position_recon") {
      const auto& spec_lo = cfg.data.generator == "single_token" ? cfg.data.single.lo : cfg.data.position.lo;
      const auto& spec_hi = cfg.data.generator == "single_token" ? cfg.data.single.hi : cfg.data.position.hi;
      lo = spec_lo * cfg.data.time_scale, hi = spec_hi * cfg.data.time_scale;
    }
    const auto buckets = bucket_mse(errs, lo, hi, cfg.eval_buckets);
    std::string csv = "bucket,lo,hi,count,mse\n";
    char line[160];
    for (std::size_t i = 0; i < buckets.size(); ++i) {
      const auto& b = buckets[i];
      std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%zu,%.17g\n", i, b.lo, b.hi, b.count, b.mse);
      csv += line;
    }
    write_text(dir / "buckets.csv", csv);
    result["buckets_csv"] = (dir / "buckets.csv").string();
  }
  write_text(dir / "eval.json", result.dump(2) + "\n");
  out << result.dump() << "\n";
  return kExitOk;
}

int cmd_verify(const std::string& suite, std::uint64_t seed, std::ostream& out) {
  const auto names = verify_suites();
  if (std::find(names.begin(), names.end(), suite) == names.end()) {
    throw UsageError("unknown verify suite '" + suite + "'");
  }
  const auto results = run_verify(suite, seed);
  const auto j = to_json(results);
  out << j.dump(2) << "\n";
  return j["passed"].get<bool>() ? kExitOk : kExitFailure;
}

}  // namespace

EncoderTransfer transfer_encoder(Romae& target, const Checkpoint& ckpt) {
  std::vector<std::string> problems;
  const auto& want = target.config();
  const auto& have = ckpt.config;
  for (const auto& p : {same_or("patch size", have.patch_size, want.patch_size),
                        same_or("position axes", have.axes, want.axes),
                        same_or("encoder d_model", have.encoder.d_model, want.encoder.d_model),
                        same_or("encoder heads", have.encoder.n_head, want.encoder.n_head),
                        same_or("encoder depth", have.encoder.depth, want.encoder.depth),
                        same_or("encoder d_ff", have.encoder.d_ff, want.encoder.d_ff),
                        same_or("encoder CLS", have.encoder.use_cls, want.encoder.use_cls),
                        same_or("rope p", have.encoder.rope.p, want.encoder.rope.p),
                        same_or("rope base", have.encoder.rope.base, want.encoder.rope.base),
                        same_or("reserved variate axis", have.encoder.rope.reserve_variate_axis,
                                want.encoder.rope.reserve_variate_axis)}) {
    if (!p.empty()) problems.push_back(p);
  }
  if (have.encoder.positional != want.encoder.positional) {
    problems.push_back("positional mode: checkpoint " + to_string(have.encoder.positional) + ", config " +
                       to_string(want.encoder.positional));
  }

  auto is_encoder_side = [](const std::string& n) {
    return n == "cls" || n.rfind("embed.", 0) == 0 || n.rfind("encoder.", 0) == 0;
  };
  std::vector<NamedTensor> keep;
  EncoderTransfer t;
  for (const auto& p : ckpt.parameters) {
    if (is_encoder_side(p.name)) keep.push_back(p);
    else t.dropped.push_back(p.name);
  }
  for (const auto& p : target.named_parameters()) {
    if (!is_encoder_side(p.name)) continue;
    const auto it = std::find_if(keep.begin(), keep.end(), [&](const auto& k) { return k.name == p.name; });
    if (it == keep.end()) {
      problems.push_back("missing parameter " + p.name);
    } else if (it->tensor.shape() != p.tensor.shape()) {
      problems.push_back("shape of " + p.name + ": checkpoint " + to_string(it->tensor.shape()) + ", model " +
                         to_string(p.tensor.shape()));
    }
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint is incompatible with the configured model:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw CheckpointError(msg);
  }
  target.load_parameters(keep);
  t.loaded = keep.size();
  return t;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"RoMAE: rotary masked autoencoder experiments", "romae"};
  app.require_subcommand(1);

  std::string generator, out_dir, config, checkpoint, resume, suite = "all";
  std::uint64_t seed = 0, verify_seed = 1;
  bool from_scratch = false;
  std::vector<std::string> sets;
  const std::string set_help = "Override one config key, key=value (repeatable)";

  auto* gen = app.add_subcommand("gendata", "Write a synthetic dataset as CSV plus a manifest");
  gen->add_option("generator", generator, "position_recon, single_token, spirals or rbf")->required();
  gen->add_option("--seed", seed, "Generator seed");
  gen->add_option("--out", out_dir, "Output directory");
  gen->add_option("--set", sets, "Override a generator parameter, e.g. n_train=100 (repeatable)");

  auto* pre = app.add_subcommand("pretrain", "Masked-reconstruction pretraining");
  pre->add_option("config", config, "Experiment config file")->required();
  pre->add_option("--resume", resume, "Continue from this checkpoint");
  pre->add_option("--set", sets, set_help);

  auto* fin = app.add_subcommand("finetune", "Supervised training with a task head");
  fin->add_option("config", config, "Experiment config file")->required();
  fin->add_option("--checkpoint", checkpoint, "Pretrained checkpoint; its decoder is discarded");
  fin->add_flag("--from-scratch", from_scratch, "Train from a fresh initialisation");
  fin->add_option("--resume", resume, "Continue a fine-tuning run from its checkpoint");
  fin->add_option("--set", sets, set_help);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the configured split");
  ev->add_option("config", config, "Experiment config file")->required();
  ev->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required();
  ev->add_option("--set", sets, set_help);

  auto* ver = app.add_subcommand("verify", "Run the built-in property checks");
  ver->add_option("suite", suite, "all, rope, invariance, appendixB or gradients");
  ver->add_option("--seed", verify_seed, "Seed for the randomized checks");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return cmd_gendata(generator, seed, out_dir, sets, out);
    if (*pre) return cmd_pretrain(config, resume, sets, out);
    if (*fin) return cmd_finetune(config, checkpoint, from_scratch, resume, sets, out);
    if (*ev) return cmd_eval(config, checkpoint, sets, out);
    if (*ver) return cmd_verify(suite, verify_seed, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const CsvError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace romae
