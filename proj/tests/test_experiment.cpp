#include <cstdlib>
#include <fstream>

#include "doctest.h"
#include "romae/experiment.hpp"

using namespace romae;
namespace fs = std::filesystem;

namespace {

const fs::path kConfigs = fs::path(ROMAE_SOURCE_DIR) / "configs";

std::vector<std::string> problems_of(const std::string& text) {
  try {
    parse_experiment(text, "t.cfg");
  } catch (const ConfigError& e) {
    return e.problems();
  }
  return {};
}

bool mentions(const std::vector<std::string>& v, const std::string& needle) {
  for (const auto& s : v)
    if (s.find(needle) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST_CASE("every checked-in config parses and documents itself") {
  std::size_t seen = 0;
  for (const auto& entry : fs::directory_iterator(kConfigs)) {
    if (entry.path().extension() != ".cfg") continue;
    ++seen;
    CAPTURE(entry.path().string());
    const auto cfg = load_experiment(entry.path());
    CHECK(cfg.name == entry.path().stem().string());
    std::ifstream in(entry.path());
    std::string first;
    std::getline(in, first);
    CHECK(first.rfind("# ", 0) == 0);
  }
  CHECK(seen >= 10);
}

TEST_CASE("config values land in the right fields") {
  const auto c = load_experiment(kConfigs / "position_recon_cls.cfg");
  CHECK(c.data.generator == "position_recon");
  CHECK(c.data.position.n_train == 20000);
  CHECK(c.data.target == TargetKind::Time);
  CHECK(c.model.encoder.depth == 12);
  CHECK(c.model.encoder.d_model == 180);
  CHECK(c.model.encoder.use_cls);
  CHECK(c.model.head == HeadKind::Token);
  CHECK(c.run.phase == Phase::Finetune);
  CHECK(c.run.optimizer.lr == doctest::Approx(5e-4));
  CHECK(std::isinf(c.run.clip));
  CHECK(c.run.warmup_steps == 625);

  const auto sgd = load_experiment(kConfigs / "appendix_c_range1000.cfg");
  CHECK(sgd.run.optimizer.kind == OptimizerKind::Sgd);
  CHECK(sgd.run.optimizer.momentum == doctest::Approx(0.9));
  CHECK(sgd.data.single.hi == 1000.0);
}

TEST_CASE("unknown keys and bad values are all reported at once") {
  const auto p = problems_of("name = x\nmodel.colour = red\nrun.lr = fast\ndata.wibble = 1\nno equals sign\n");
  REQUIRE(p.size() == 4);
  CHECK(mentions(p, "t.cfg:2: unknown key 'model.colour'"));
  CHECK(mentions(p, "t.cfg:3: run.lr"));
  CHECK(mentions(p, "t.cfg:4: unknown key 'data.wibble'"));
  CHECK(mentions(p, "t.cfg:5:"));

  CHECK(mentions(problems_of("run.lr = 1\nrun.lr = 2\n"), "already set on line 1"));
  CHECK(mentions(problems_of("model.encoder = huge\n"), "model.encoder"));
  CHECK(mentions(problems_of("run.task = classification\nrun.phase = finetune\nmodel.head = sequence\n"
                             "model.head_outputs = 2\n"),
                 "classification needs data.target = label"));
  CHECK(mentions(problems_of("run.phase = finetune\nrun.task = token_regression\n"), "fine-tuning needs model.head"));
  CHECK(mentions(problems_of("data.generator = csv\n"), "needs data.train_csv"));
  // Run-level contract errors come through too.
  CHECK(mentions(problems_of("run.mask_ratio = 1.5\n"), "mask ratio"));
}

TEST_CASE("model keys apply whatever order they appear in") {
  const auto a = parse_experiment("model.use_cls = false\nmodel.encoder = small\n");
  const auto b = parse_experiment("model.encoder = small\nmodel.use_cls = false\n");
  CHECK(a.model.encoder.d_model == 432);
  CHECK_FALSE(a.model.encoder.use_cls);
  CHECK_FALSE(b.model.encoder.use_cls);
  CHECK_FALSE(a.model.decoder.use_cls);
  CHECK(a.model.encoder.rope.head_dim == 72);
}

TEST_CASE("overrides replace a key in place or append it") {
  const std::string text = "name = a   # trailing\nrun.lr = 1e-3\n";
  const auto out = apply_overrides(text, {"run.lr=5e-4", "run.epochs = 3"});
  const auto c = parse_experiment(out);
  CHECK(c.name == "a");
  CHECK(c.run.optimizer.lr == doctest::Approx(5e-4));
  CHECK(c.run.epochs == 3);
  CHECK(out.find("1e-3") == std::string::npos);
  CHECK_THROWS_AS(apply_overrides(text, {"run.lr"}), ConfigError);
  // Overriding an unknown key is still an unknown key.
  CHECK(mentions(problems_of(apply_overrides(text, {"run.colour=1"})), "unknown key 'run.colour'"));
}

TEST_CASE("build_data and build_model follow the data") {
  auto c = load_experiment(kConfigs / "spirals.cfg");
  const auto d = build_data(c);
  CHECK(d.train.size() == 200);
  CHECK(d.eval.size() == 100);
  CHECK(d.train.patch_size == 2);
  const Romae m = build_model(c, d.train);
  CHECK(m.config().patch_size == 2);
  CHECK(m.config().axes == 1);

  c.data.eval_split = "val";
  c.data.generator = "rbf";
  c.data.rbf.n = 100;
  const auto r = build_data(c);
  CHECK(r.train.size() == 80);
  CHECK(r.eval.size() == 10);
}

TEST_CASE("csv experiments resolve paths next to the config") {
  const auto dir = fs::temp_directory_path() / "romae_test_experiment";
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "toy.csv");
    f << "series_id,time,variate,value\na,0,0,1\na,1,0,2\na,2,0,3\nb,0,0,4\nb,3,0,5\n";
  }
  {
    std::ofstream f(dir / "toy.cfg");
    f << "# toy\nname = toy\ndata.generator = csv\ndata.train_csv = toy.csv\ndata.eval_csv = toy.csv\n"
         "model.encoder = tiny-shallow\n";
  }
  const auto c = load_experiment(dir / "toy.cfg");
  CHECK(c.data.train_csv == dir / "toy.csv");
  const auto d = build_data(c);
  CHECK(d.train.size() == 2);
  CHECK(d.eval.size() == 2);
  CHECK(d.train.samples[1].positions == std::vector<double>{0.0, 3.0});
}

TEST_CASE("output root environment variable") {
  ::setenv("ROMAE_OUTPUT_ROOT", "/tmp/romae_root", 1);
  CHECK(resolve_output("runs/x") == fs::path("/tmp/romae_root/runs/x"));
  CHECK(resolve_output("/abs/y") == fs::path("/abs/y"));
  ::unsetenv("ROMAE_OUTPUT_ROOT");
  CHECK(resolve_output("runs/x") == fs::path("runs/x"));
}

TEST_CASE("config json records what was run") {
  const auto c = load_experiment(kConfigs / "rbf_synthetic.cfg");
  const auto j = c.to_json();
  CHECK(j["data"]["generator"] == "rbf");
  CHECK(j["data"]["time_scale"] == 49.0);
  CHECK(j["run"]["mask_source"] == "observed");
  CHECK(j["model"].is_object());
  CHECK(experiment_keys().size() > 60);
}
