#include "romae/datasets.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "romae/rng.hpp"

namespace romae {

namespace {

enum : std::uint64_t { kTrain = 1, kVal = 2, kTest = 3 };

Rng series_rng(std::uint64_t seed, std::uint64_t split, std::size_t i) {
  return Rng::derive(seed, (split << 40) + i);
}

std::string id(const char* prefix, std::size_t i) { return std::string(prefix) + std::to_string(i); }

// Uniform n-subset of [0, k) as a sorted index list.
std::vector<std::size_t> choose(std::size_t k, std::size_t n, Rng& rng) {
  std::vector<std::size_t> all(k);
  std::iota(all.begin(), all.end(), 0);
  for (std::size_t i = 0; i < n; ++i) std::swap(all[i], all[i + rng.index(k - i)]);
  all.resize(n);
  std::sort(all.begin(), all.end());
  return all;
}

std::string fmt(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

void SeriesRecord::check() const {
  if (points.empty()) throw ContractError("series " + series_id + " has no observations");
  const std::size_t c = points.front().channels.size();
  for (const auto& p : points) {
    if (!std::isfinite(p.time)) throw ContractError("series " + series_id + " has a non-finite time");
    if (p.channels.size() != c || c == 0) throw ContractError("series " + series_id + " has ragged channels");
    if (!p.truth.empty() && p.truth.size() != c) throw ContractError("series " + series_id + " has ragged truth");
  }
}

Splits gen_position_recon(const PositionReconSpec& spec) {
  if (spec.seq_len == 0 || !(spec.hi > spec.lo)) throw ContractError("gen_position_recon: bad spec");
  auto make = [&](std::uint64_t split, std::size_t n, const char* prefix) {
    std::vector<SeriesRecord> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng = series_rng(spec.seed, split, i);
      const double value = rng.normal();
      out[i].series_id = id(prefix, i);
      for (std::size_t t = 0; t < spec.seq_len; ++t) {
        out[i].points.push_back({rng.uniform(spec.lo, spec.hi), 0, {value}, {}, true});
      }
    }
    return out;
  };
  return {make(kTrain, spec.n_train, "train-"), {}, make(kTest, spec.n_test, "test-")};
}

Splits gen_single_token_range(const SingleTokenSpec& spec) {
  if (!(spec.hi > spec.lo)) throw ContractError("gen_single_token_range: need hi > lo");
  auto make = [&](std::uint64_t split, std::size_t n, const char* prefix) {
    std::vector<SeriesRecord> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng = series_rng(spec.seed, split, i);
      const double value = rng.normal();
      out[i].series_id = id(prefix, i);
      out[i].points.push_back({rng.uniform(spec.lo, spec.hi), 0, {value}, {}, true});
    }
    return out;
  };
  return {make(kTrain, spec.n_train, "train-"), {}, make(kTest, spec.n_test, "test-")};
}

Splits gen_spirals(const SpiralSpec& spec) {
  if (spec.n_train > spec.n || spec.n_obs == 0 || spec.n_obs >= spec.steps) {
    throw ContractError("gen_spirals: bad spec");
  }
  // The spiral is discretised over [0, max_angle] on 2*steps points and only
  // the first half is kept: 30 of its stamps are observed, the rest are targets.
  const std::size_t full = 2 * spec.steps;
  Splits out;
  for (std::size_t i = 0; i < spec.n; ++i) {
    const bool train = i < spec.n_train;
    Rng rng = series_rng(spec.seed, kTrain, i);
    const double a = spec.fixed_a ? *spec.fixed_a : rng.normal(0.0, spec.alpha);
    const double b = spec.fixed_b ? *spec.fixed_b : rng.normal(0.3, spec.alpha);
    const double dir = rng.bernoulli(0.5) ? 1.0 : -1.0;
    const auto observed = choose(spec.steps, spec.n_obs, rng);
    SeriesRecord rec;
    rec.series_id = id(train ? "train-" : "test-", train ? i : i - spec.n_train);
    for (std::size_t s = 0; s < spec.steps; ++s) {
      const double theta = spec.max_angle * static_cast<double>(s) / static_cast<double>(full - 1);
      const double r = a + b * theta;
      const double x = r * std::cos(theta), y = dir * r * std::sin(theta);
      SeriesPoint p{theta, 0, {x, y}, {}, false};
      if (train && spec.noise_beta > 0.0) {
        p.channels = {x + rng.normal(0.0, spec.noise_beta), y + rng.normal(0.0, spec.noise_beta)};
      }
      rec.points.push_back(std::move(p));
    }
    for (auto s : observed) rec.points[s].observed = true;
    (train ? out.train : out.test).push_back(std::move(rec));
  }
  return out;
}

std::vector<double> rbf_reference_times(std::size_t latents) {
  std::vector<double> r(latents);
  for (std::size_t k = 0; k < latents; ++k) r[k] = 0.1 * static_cast<double>(k);
  return r;
}

double rbf_smooth(double t, const std::vector<double>& z, const std::vector<double>& r, double bandwidth) {
  // Shift exponents by their maximum so extreme bandwidths do not underflow to 0/0.
  double top = -std::numeric_limits<double>::infinity();
  for (double rk : r) top = std::max(top, -bandwidth * (t - rk) * (t - rk));
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double w = std::exp(-bandwidth * (t - r[k]) * (t - r[k]) - top);
    num += w * z[k];
    den += w;
  }
  return num / den;
}

Splits gen_rbf_synthetic(const RbfSpec& spec) {
  if (spec.len < 2 || spec.min_obs == 0 || spec.min_obs > spec.max_obs || spec.max_obs >= spec.len) {
    throw ContractError("gen_rbf_synthetic: bad spec");
  }
  const auto r = rbf_reference_times(spec.latents);
  const double noise_sd = std::sqrt(spec.noise_var);
  const auto n_train = static_cast<std::size_t>(std::llround(spec.train_frac * static_cast<double>(spec.n)));
  const auto n_val = static_cast<std::size_t>(std::llround(spec.val_frac * static_cast<double>(spec.n)));
  Splits out;
  for (std::size_t i = 0; i < spec.n; ++i) {
    Rng rng = series_rng(spec.seed, kTrain, i);
    std::vector<double> z(spec.latents);
    for (auto& v : z) v = rng.normal();
    const auto n_obs = static_cast<std::size_t>(rng.integer(static_cast<long>(spec.min_obs),
                                                            static_cast<long>(spec.max_obs)));
    const auto observed = choose(spec.len, n_obs, rng);
    SeriesRecord rec;
    for (std::size_t j = 0; j < spec.len; ++j) {
      const double t = static_cast<double>(j) / static_cast<double>(spec.len - 1);
      const double v = rbf_smooth(t, z, r, spec.bandwidth) + rng.normal(0.0, noise_sd);
      rec.points.push_back({t, 0, {v}, {}, false});
    }
    for (auto j : observed) rec.points[j].observed = true;
    if (i < n_train) {
      rec.series_id = id("train-", i);
      out.train.push_back(std::move(rec));
    } else if (i < n_train + n_val) {
      rec.series_id = id("val-", i - n_train);
      out.val.push_back(std::move(rec));
    } else {
      rec.series_id = id("test-", i - n_train - n_val);
      out.test.push_back(std::move(rec));
    }
  }
  return out;
}

std::vector<SeriesRecord> drop_observations(const std::vector<SeriesRecord>& data, double fraction,
                                            std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ContractError("drop_observations: fraction must lie in [0, 1)");
  std::vector<SeriesRecord> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& rec = data[i];
    const std::size_t n = rec.points.size();
    const auto drop = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5));
    Rng rng = Rng::derive(seed, i);
    const auto keep = choose(n, n - std::min(drop, n - 1), rng);
    SeriesRecord r{rec.series_id, {}, rec.label};
    for (auto j : keep) r.points.push_back(rec.points[j]);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<SeriesRecord> load_irregular_csv(const std::filesystem::path& path, const CsvOptions& opts) {
  std::ifstream in(path);
  if (!in) throw CsvError("cannot open " + path.string());
  std::string line;
  std::vector<SeriesRecord> out;
  if (!std::getline(in, line)) return out;
  const auto header = split_csv(line);
  const std::string where = path.string() + ":1: ";
  if (header.size() < 4 || header[0] != "series_id" || header[1] != "time" || header[2] != "variate" ||
      header[3] != "value") {
    throw CsvError(where + "header must start with series_id,time,variate,value");
  }
  std::vector<std::size_t> value_cols{3}, truth_cols;
  std::optional<std::size_t> observed_col, label_col;
  for (std::size_t c = 4; c < header.size(); ++c) {
    const auto& h = header[c];
    if (h == "value" + std::to_string(value_cols.size() + 1) && truth_cols.empty()) {
      value_cols.push_back(c);
    } else if (h == (truth_cols.empty() ? std::string("truth") : "truth" + std::to_string(truth_cols.size() + 1))) {
      truth_cols.push_back(c);
    } else if (h == "observed" && !observed_col) {
      observed_col = c;
    } else if (h == "label" && !label_col) {
      label_col = c;
    } else {
      throw CsvError(where + "unexpected column '" + h + "'");
    }
  }
  if (!truth_cols.empty() && truth_cols.size() != value_cols.size()) {
    throw CsvError(where + "truth columns must match the value columns one to one");
  }

  std::map<std::string, std::size_t> index;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv(line);
    const std::string at = path.string() + ":" + std::to_string(lineno) + ": ";
    if (cells.size() != header.size()) {
      throw CsvError(at + "expected " + std::to_string(header.size()) + " fields, found " +
                     std::to_string(cells.size()));
    }
    auto num = [&](std::size_t c) {
      double v = 0.0;
      const auto& s = cells[c];
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
        throw CsvError(at + "column '" + header[c] + "': '" + s + "' is not a number");
      }
      return v;
    };
    auto integer = [&](std::size_t c) {
      long v = 0;
      const auto& s = cells[c];
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
        throw CsvError(at + "column '" + header[c] + "': '" + s + "' is not an integer");
      }
      return v;
    };
    if (cells[0].empty()) throw CsvError(at + "empty series_id");
    SeriesPoint pt;
    pt.time = num(1);
    if (!std::isfinite(pt.time)) throw CsvError(at + "time is not finite");
    const long variate = integer(2);
    if (variate < 0) throw CsvError(at + "variate must be non-negative");
    pt.variate = static_cast<std::size_t>(variate);
    for (auto c : value_cols) pt.channels.push_back(num(c));
    for (auto c : truth_cols) pt.truth.push_back(num(c));
    if (observed_col) {
      const long o = integer(*observed_col);
      if (o != 0 && o != 1) throw CsvError(at + "observed must be 0 or 1");
      pt.observed = o == 1;
    }
    auto [it, fresh] = index.try_emplace(cells[0], out.size());
    if (fresh) out.push_back(SeriesRecord{cells[0], {}, std::nullopt});
    auto& rec = out[it->second];
    if (label_col && !cells[*label_col].empty()) {
      const long label = integer(*label_col);
      if (rec.label && *rec.label != label) throw CsvError(at + "label changes within series " + rec.series_id);
      rec.label = label;
    }
    rec.points.push_back(std::move(pt));
  }

  for (auto& rec : out) {
    std::stable_sort(rec.points.begin(), rec.points.end(),
                     [](const SeriesPoint& a, const SeriesPoint& b) { return a.time < b.time; });
  }
  if (opts.normalize_time && !out.empty()) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& rec : out)
      for (const auto& p : rec.points) {
        lo = std::min(lo, p.time);
        hi = std::max(hi, p.time);
      }
    const double span = hi - lo;
    for (auto& rec : out)
      for (auto& p : rec.points) p.time = span > 0.0 ? (p.time - lo) / span : 0.0;
  }
  return out;
}

void write_irregular_csv(const std::filesystem::path& path, const std::vector<SeriesRecord>& data) {
  std::size_t channels = 0;
  bool truth = false, observed = false, label = false;
  for (const auto& rec : data) {
    rec.check();
    if (channels == 0) channels = rec.points.front().channels.size();
    if (rec.points.front().channels.size() != channels) throw ContractError("write_irregular_csv: ragged channels");
    label = label || rec.label.has_value();
    for (const auto& p : rec.points) {
      truth = truth || !p.truth.empty();
      observed = observed || !p.observed;
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw CsvError("cannot write " + path.string());
  out << "series_id,time,variate,value";
  for (std::size_t c = 1; c < channels; ++c) out << ",value" << c + 1;
  if (truth) {
    out << ",truth";
    for (std::size_t c = 1; c < channels; ++c) out << ",truth" << c + 1;
  }
  if (observed) out << ",observed";
  if (label) out << ",label";
  out << "\n";
  for (const auto& rec : data) {
    for (const auto& p : rec.points) {
      out << rec.series_id << ',' << fmt(p.time) << ',' << p.variate;
      for (double v : p.channels) out << ',' << fmt(v);
      if (truth) {
        const auto& t = p.truth.empty() ? p.channels : p.truth;
        for (double v : t) out << ',' << fmt(v);
      }
      if (observed) out << ',' << (p.observed ? 1 : 0);
      if (label) out << ',' << (rec.label ? std::to_string(*rec.label) : "");
      out << "\n";
    }
  }
  if (!out) throw CsvError("write failed on " + path.string());
}

Dataset to_dataset(const std::vector<SeriesRecord>& records, const TokenizeOptions& opts) {
  Dataset d;
  d.axes = opts.variate_axis ? 2 : 1;
  d.classes = opts.target == TargetKind::Label ? opts.classes : 0;
  if (opts.target == TargetKind::Label && opts.classes == 0) throw ContractError("to_dataset: class count missing");
  if (!records.empty()) d.patch_size = records.front().points.front().channels.size();
  for (const auto& rec : records) {
    rec.check();
    if (rec.points.front().channels.size() != d.patch_size) throw DimensionError("to_dataset: ragged channels");
    Sample s;
    bool partial = false;
    for (const auto& p : rec.points) {
      s.values.insert(s.values.end(), p.channels.begin(), p.channels.end());
      s.positions.push_back(p.time * opts.time_scale);
      if (opts.variate_axis) s.positions.push_back(static_cast<double>(p.variate));
      s.observed.push_back(p.observed ? 1 : 0);
      partial = partial || !p.observed;
      if (opts.target == TargetKind::Values) {
        const auto& t = p.truth.empty() ? p.channels : p.truth;
        s.targets.insert(s.targets.end(), t.begin(), t.end());
      } else if (opts.target == TargetKind::Time) {
        s.targets.push_back(p.time);
      }
    }
    if (!partial) s.observed.clear();
    if (opts.target == TargetKind::Label) {
      if (!rec.label) throw ContractError("to_dataset: series " + rec.series_id + " has no label");
      s.label = *rec.label;
    }
    d.samples.push_back(std::move(s));
  }
  d.check();
  return d;
}

}  // namespace romae
