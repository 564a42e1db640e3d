#include <cmath>
#include <fstream>
#include <set>

#include "doctest.h"
#include "romae/datasets.hpp"

using namespace romae;

namespace {

std::filesystem::path tmp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "romae_test_datasets";
  std::filesystem::create_directories(dir);
  return dir / name;
}

bool same_records(const std::vector<SeriesRecord>& a, const std::vector<SeriesRecord>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].series_id != b[i].series_id || a[i].label != b[i].label || a[i].points.size() != b[i].points.size())
      return false;
    for (std::size_t j = 0; j < a[i].points.size(); ++j) {
      const auto &p = a[i].points[j], &q = b[i].points[j];
      const auto& pt = p.truth.empty() ? p.channels : p.truth;
      const auto& qt = q.truth.empty() ? q.channels : q.truth;
      if (p.time != q.time || p.variate != q.variate || p.channels != q.channels || pt != qt ||
          p.observed != q.observed)
        return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("position reconstruction data") {
  PositionReconSpec spec;
  spec.seed = 7;
  auto s = gen_position_recon(spec);
  CHECK(s.train.size() == 20000);
  CHECK(s.test.size() == 4000);
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : s.train) {
    REQUIRE(r.points.size() == 10);
    for (const auto& p : r.points) {
      CHECK(p.channels == r.points[0].channels);
      REQUIRE((p.time >= 0.0 && p.time <= 50.0));
      sum += p.time;
      ++n;
    }
  }
  CHECK(std::abs(sum / n - 25.0) < 0.5);

  TokenizeOptions to;
  to.target = TargetKind::Time;
  auto d = to_dataset(s.test, to);
  CHECK(d.samples[3].targets == d.samples[3].positions);
  CHECK(d.samples[3].observed.empty());
}

TEST_CASE("single-token range data") {
  for (double hi : {100.0, 1000.0}) {
    SingleTokenSpec spec;
    spec.hi = hi;
    spec.n_train = 500;
    spec.n_test = 100;
    auto s = gen_single_token_range(spec);
    CHECK(s.train.size() == 500);
    for (const auto& r : s.train) {
      REQUIRE(r.points.size() == 1);
      CHECK((r.points[0].time >= 0.0 && r.points[0].time <= hi));
    }
  }
  SingleTokenSpec bad;
  bad.hi = bad.lo;
  CHECK_THROWS_AS(gen_single_token_range(bad), ContractError);
}

TEST_CASE("spirals") {
  SpiralSpec spec;
  spec.seed = 3;
  auto s = gen_spirals(spec);
  CHECK(s.train.size() == 200);
  CHECK(s.test.size() == 100);
  const double half = spec.max_angle / 2;
  std::set<double> chirality;
  for (const auto* split : {&s.train, &s.test}) {
    for (const auto& r : *split) {
      REQUIRE(r.points.size() == 75);
      std::size_t obs = 0;
      for (const auto& p : r.points) {
        obs += p.observed;
        CHECK(p.time < half);
        CHECK(p.channels.size() == 2);
      }
      CHECK(obs == 30);
    }
  }
  // Test inputs are clean; training inputs carry noise.
  SpiralSpec clean = spec;
  clean.noise_beta = 0.0;
  auto c = gen_spirals(clean);
  CHECK(c.test[5].points[10].channels == s.test[5].points[10].channels);
  CHECK(c.train[5].points[10].channels != s.train[5].points[10].channels);

  // Closed form with no offset and no noise: radius = b * theta.
  SpiralSpec arch = clean;
  arch.fixed_a = 0.0;
  arch.fixed_b = 0.3;
  auto a = gen_spirals(arch);
  for (const auto& r : a.train) {
    for (const auto& p : r.points) {
      const double radius = std::hypot(p.channels[0], p.channels[1]);
      REQUIRE(std::abs(radius - 0.3 * p.time) < 1e-12);
    }
    // Chirality: the sign of the cross product between consecutive points.
    const auto &p1 = r.points[1].channels, &p2 = r.points[2].channels;
    chirality.insert(std::copysign(1.0, p1[0] * p2[1] - p1[1] * p2[0]));
  }
  CHECK(chirality.size() == 2);

  auto again = gen_spirals(spec);
  CHECK(same_records(again.train, s.train));
  spec.seed = 4;
  CHECK(!same_records(gen_spirals(spec).train, s.train));
}

TEST_CASE("rbf synthetic") {
  RbfSpec spec;
  spec.seed = 2;
  auto s = gen_rbf_synthetic(spec);
  CHECK(s.train.size() == 1600);
  CHECK(s.val.size() == 200);
  CHECK(s.test.size() == 200);
  for (const auto& r : s.train) {
    REQUIRE(r.points.size() == 50);
    std::size_t obs = 0;
    for (const auto& p : r.points) {
      obs += p.observed;
      CHECK((p.time >= 0.0 && p.time <= 1.0));
    }
    CHECK((obs >= 3 && obs <= 10));
  }

  // Direct weighted average, no stabilising shift.
  Rng rng(9);
  const auto ref = rbf_reference_times(10);
  CHECK(ref[3] == doctest::Approx(0.3));
  std::vector<double> z(10);
  for (auto& v : z) v = rng.normal();
  for (int i = 0; i <= 20; ++i) {
    const double t = i / 20.0;
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < 10; ++k) {
      const double w = std::exp(-120.0 * (t - ref[k]) * (t - ref[k]));
      num += w * z[k];
      den += w;
    }
    CHECK(std::abs(rbf_smooth(t, z, ref, 120.0) - num / den) < 1e-12);
  }
  // Extreme bandwidth collapses onto the nearest latent.
  for (std::size_t k = 0; k < 10; ++k) CHECK(std::abs(rbf_smooth(ref[k], z, ref, 1e9) - z[k]) < 1e-12);

  // Split sizes round per fraction; generation is repeatable.
  RbfSpec quiet = spec;
  quiet.noise_var = 0.0;
  quiet.n = 10;
  auto q = gen_rbf_synthetic(quiet);
  CHECK(q.train.size() == 8);
  CHECK(same_records(gen_rbf_synthetic(quiet).train, q.train));
}

TEST_CASE("dropping observations") {
  PositionReconSpec ps;
  ps.n_train = 20;
  ps.n_test = 1;
  auto data = gen_position_recon(ps).train;
  CHECK(same_records(drop_observations(data, 0.0, 1), data));
  auto dropped = drop_observations(data, 0.3, 1);
  for (std::size_t i = 0; i < data.size(); ++i) {
    REQUIRE(dropped[i].points.size() == 7);
    // Survivors keep their original timestamps, in order.
    std::size_t j = 0;
    for (const auto& p : dropped[i].points) {
      while (j < 10 && data[i].points[j].time != p.time) ++j;
      CHECK(j < 10);
    }
  }
  CHECK_THROWS_AS(drop_observations(data, 1.0, 1), ContractError);

  // Each index is removed with probability 0.3.
  std::vector<SeriesRecord> one{data[0]};
  for (std::size_t t = 0; t < 10; ++t) one[0].points[t].time = static_cast<double>(t);
  std::vector<double> removed(10);
  const int trials = 100000;
  for (int i = 0; i < trials; ++i) {
    auto kept = drop_observations(one, 0.3, static_cast<std::uint64_t>(i))[0].points;
    std::vector<bool> present(10);
    for (const auto& p : kept) present[static_cast<std::size_t>(p.time)] = true;
    for (std::size_t t = 0; t < 10; ++t) removed[t] += !present[t];
  }
  for (double r : removed) CHECK(std::abs(r / trials - 0.3) / 0.3 < 0.02);
}

TEST_CASE("csv ingest") {
  const auto empty = tmp_file("empty.csv");
  std::ofstream(empty).close();
  CHECK(load_irregular_csv(empty).empty());

  const auto two = tmp_file("two.csv");
  std::ofstream(two) << "series_id,time,variate,value,label\n"
                     << "a,0.5,0,1.0,1\nb,0.1,1,2.0,0\na,0.2,0,3.0,1\n"
                     << "b,0.3,0,4.0,0\na,0.9,2,5.0,1\nb,0.2,0,6.0,0\n";
  auto recs = load_irregular_csv(two);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].points.size() == 3);
  CHECK(recs[1].points.size() == 3);
  CHECK(recs[0].label == 1);
  // Sorted by time on load.
  CHECK(recs[0].points[0].time == 0.2);
  CHECK(recs[0].points[0].channels[0] == 3.0);
  CHECK(recs[0].points[2].variate == 2);

  auto norm = load_irregular_csv(two, {true});
  CHECK(norm[1].points[0].time == 0.0);
  CHECK(norm[0].points[2].time == 1.0);

  const auto bad = tmp_file("bad.csv");
  std::ofstream(bad) << "series_id,time,variate,value\na,0.1,0,1.0\na,zero,0,2.0\n";
  try {
    load_irregular_csv(bad);
    FAIL("expected a parse error");
  } catch (const CsvError& e) {
    CHECK(std::string(e.what()).find(":3:") != std::string::npos);
  }
  std::ofstream(bad) << "series_id,time,variate,value\na,0.1,-1,1.0\n";
  CHECK_THROWS_AS(load_irregular_csv(bad), CsvError);
  std::ofstream(bad) << "series_id,time,variate,value,colour\na,0.1,0,1.0,red\n";
  CHECK_THROWS_AS(load_irregular_csv(bad), CsvError);
  std::ofstream(bad) << "series_id,time,variate,value\na,0.1,0\n";
  CHECK_THROWS_AS(load_irregular_csv(bad), CsvError);
  CHECK_THROWS_AS(load_irregular_csv(tmp_file("missing.csv")), CsvError);
}

TEST_CASE("csv round trip is exact") {
  SpiralSpec spec;
  spec.n = 6;
  spec.n_train = 4;
  auto s = gen_spirals(spec);
  const auto path = tmp_file("spirals.csv");
  write_irregular_csv(path, s.train);
  CHECK(same_records(load_irregular_csv(path), s.train));

  RbfSpec rs;
  rs.n = 10;
  auto r = gen_rbf_synthetic(rs);
  write_irregular_csv(path, r.train);
  CHECK(same_records(load_irregular_csv(path), r.train));

  std::vector<SeriesRecord> labelled{{"x", {{0.25, 1, {1e-300, -2.5}, {}, true}}, 3},
                                     {"y", {{1.0 / 3.0, 0, {0.1, 0.2}, {}, true}}, std::nullopt}};
  write_irregular_csv(path, labelled);
  CHECK(same_records(load_irregular_csv(path), labelled));
}

TEST_CASE("token conversion") {
  SpiralSpec spec;
  spec.n = 3;
  spec.n_train = 2;
  auto s = gen_spirals(spec);
  TokenizeOptions to;
  to.time_scale = 2.0;
  auto d = to_dataset(s.train, to);
  CHECK(d.patch_size == 2);
  CHECK(d.axes == 1);
  REQUIRE(d.samples.size() == 2);
  CHECK(d.samples[0].values.size() == 150);
  CHECK(d.samples[0].observed.size() == 75);
  CHECK(d.samples[0].positions[4] == 2.0 * s.train[0].points[4].time);
  CHECK(d.samples[0].targets == d.samples[0].values);
  auto with_truth = s.train;
  with_truth[0].points[0].truth = {7.0, 8.0};
  CHECK(to_dataset(with_truth, to).samples[0].targets[1] == 8.0);

  std::vector<SeriesRecord> mv{{"m", {{0.1, 0, {1.0}, {}, true}, {0.1, 3, {2.0}, {}, true}}, 1}};
  to.variate_axis = true;
  to.target = TargetKind::Label;
  to.classes = 2;
  auto l = to_dataset(mv, to);
  CHECK(l.axes == 2);
  CHECK(l.samples[0].positions == std::vector<double>{0.2, 0.0, 0.2, 3.0});
  CHECK(l.samples[0].label == 1);
  to.classes = 1;
  CHECK_THROWS_AS(to_dataset(mv, to), ContractError);
}
