#pragma once

// Synthetic generators and the irregular-series CSV format.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "romae/training.hpp"

namespace romae {

struct SeriesPoint {
  double time = 0.0;
  std::size_t variate = 0;
  std::vector<double> channels;
  std::vector<double> truth;  // clean values when they differ from `channels`; empty otherwise
  bool observed = true;
};

struct SeriesRecord {
  std::string series_id;
  std::vector<SeriesPoint> points;
  std::optional<long> label;

  void check() const;
};

struct Splits {
  std::vector<SeriesRecord> train;
  std::vector<SeriesRecord> val;
  std::vector<SeriesRecord> test;
};

struct PositionReconSpec {
  std::size_t n_train = 20000;
  std::size_t n_test = 4000;
  std::size_t seq_len = 10;
  double lo = 0.0;
  double hi = 50.0;
  std::uint64_t seed = 0;
};

struct SingleTokenSpec {
  std::size_t n_train = 20000;
  std::size_t n_test = 4000;
  double lo = 0.0;
  double hi = 100.0;
  std::uint64_t seed = 0;
};

struct SpiralSpec {
  std::size_t n = 300;
  std::size_t n_train = 200;
  std::size_t steps = 75;  // timestamps kept per spiral
  double noise_beta = 0.1;
  double alpha = 0.02;
  std::size_t n_obs = 30;
  double max_angle = 18.84955592153876;  // 6 pi
  std::uint64_t seed = 0;
  // Test hooks for the closed-form check.
  std::optional<double> fixed_a;
  std::optional<double> fixed_b;
};

struct RbfSpec {
  std::size_t n = 2000;
  std::size_t len = 50;
  std::size_t latents = 10;
  double bandwidth = 120.0;
  double noise_var = 0.01;
  std::size_t min_obs = 3;
  std::size_t max_obs = 10;
  double train_frac = 0.8;
  double val_frac = 0.1;
  std::uint64_t seed = 0;
};

Splits gen_position_recon(const PositionReconSpec& spec);
Splits gen_single_token_range(const SingleTokenSpec& spec);
Splits gen_spirals(const SpiralSpec& spec);
Splits gen_rbf_synthetic(const RbfSpec& spec);

/// Latent reference times r_k.
std::vector<double> rbf_reference_times(std::size_t latents);
/// Kernel smoother: sum_k w_k(t) z_k / sum_k w_k(t), w_k(t) = exp(-bandwidth (t - r_k)^2).
double rbf_smooth(double t, const std::vector<double>& z, const std::vector<double>& r, double bandwidth);

/// Removes round(fraction * n) points per series, chosen uniformly.
std::vector<SeriesRecord> drop_observations(const std::vector<SeriesRecord>& data, double fraction,
                                            std::uint64_t seed);

class CsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CsvOptions {
  bool normalize_time = false;  // min-max over the whole file onto [0, 1]
};

/// Header: series_id,time,variate,value[,value2..][,truth[,truth2..]][,observed][,label]
std::vector<SeriesRecord> load_irregular_csv(const std::filesystem::path& path, const CsvOptions& opts = {});
void write_irregular_csv(const std::filesystem::path& path, const std::vector<SeriesRecord>& data);

enum class TargetKind {
  Values,      // reconstruct the channel values (truth when present)
  Time,        // regress each token's own time stamp
  Label,       // class label
};

struct TokenizeOptions {
  TargetKind target = TargetKind::Values;
  double time_scale = 1.0;
  bool variate_axis = false;  // append the variate id as a second position axis
  std::size_t classes = 0;
};

/// Converts records to model samples, one token per point.
Dataset to_dataset(const std::vector<SeriesRecord>& records, const TokenizeOptions& opts);

}  // namespace romae
