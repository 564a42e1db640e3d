#pragma once

// Experiment documents: a flat `key = value` file that pins the data
// generator, model, and run settings for one experiment.

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "romae/datasets.hpp"
#include "romae/model.hpp"
#include "romae/training.hpp"

namespace romae {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

struct DataConfig {
  std::string generator = "position_recon";  // position_recon, single_token, spirals, rbf, csv
  std::uint64_t seed = 0;
  PositionReconSpec position;
  SingleTokenSpec single;
  SpiralSpec spirals;
  RbfSpec rbf;
  std::filesystem::path train_csv;
  std::filesystem::path eval_csv;
  bool normalize_time = false;
  double time_scale = 1.0;
  bool variate_axis = false;
  TargetKind target = TargetKind::Values;
  std::size_t classes = 0;
  std::string eval_split = "test";  // test or val
};

struct ExperimentConfig {
  std::string name;
  DataConfig data;
  RomaeConfig model;
  std::uint64_t model_seed = 0;
  RunConfig run;
  std::size_t eval_buckets = 20;
  std::filesystem::path source;  // file the config came from, if any

  nlohmann::json to_json() const;
};

/// Parses the text of a config document. Collects every problem before
/// throwing ConfigError.
ExperimentConfig parse_experiment(const std::string& text, const std::string& origin = "<string>");
ExperimentConfig load_experiment(const std::filesystem::path& path,
                                 const std::vector<std::string>& overrides = {});
/// Applies `key=value` overrides on top of an existing document text.
std::string apply_overrides(const std::string& text, const std::vector<std::string>& overrides);
/// Every key the parser accepts.
std::vector<std::string> experiment_keys();

struct ExperimentData {
  std::vector<SeriesRecord> train_records;
  std::vector<SeriesRecord> eval_records;
  Dataset train;
  Dataset eval;
};

/// Generates (or loads) the experiment's splits and converts them to tokens.
ExperimentData build_data(const ExperimentConfig& cfg);
/// Fresh model whose patch size and axes follow the training split.
Romae build_model(const ExperimentConfig& cfg, const Dataset& train);
Splits generate_splits(const DataConfig& data);
nlohmann::json generator_spec_json(const DataConfig& data);

/// Output directory: the configured one, resolved under $ROMAE_OUTPUT_ROOT when relative.
std::filesystem::path resolve_output(const std::filesystem::path& p);

}  // namespace romae
