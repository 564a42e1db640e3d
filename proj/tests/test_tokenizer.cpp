#include <numeric>

#include "doctest.h"
#include "romae/ops.hpp"
#include "romae/tokenizer.hpp"
#include "test_util.hpp"

using namespace romae;

TEST_CASE("patch spec validation") {
  PatchSpec ok{{{8, 1, Regularity::Irregular}, {64, 16}, {64, 16}}};
  CHECK_NOTHROW(validate_patch_spec(ok));
  PatchSpec video{{{10, 1, Regularity::Irregular}, {32, 16}, {32, 16}}};
  CHECK_NOTHROW(validate_patch_spec(video));

  PatchSpec bad{{{8, 2, Regularity::Irregular}, {64, 16}}};
  try {
    validate_patch_spec(bad);
    FAIL("expected failure");
  } catch (const PatchSpecError& e) {
    CHECK(std::string(e.what()).find("dimension 0") != std::string::npos);
  }
  PatchSpec nodiv{{{10, 3}}};
  CHECK_THROWS_AS(validate_patch_spec(nodiv), PatchSpecError);
  PatchSpec zero{{{0, 1}}};
  CHECK_THROWS_AS(validate_patch_spec(zero), PatchSpecError);
}

TEST_CASE("patchify counts and round trip") {
  std::vector<double> img(64 * 64);
  std::iota(img.begin(), img.end(), 0.0);
  PatchSpec spec{{{64, 16}, {64, 16}}};
  auto b = patchify(img, spec);
  CHECK(b.tokens == 16);
  CHECK(b.patch_size == 256);
  CHECK(unpatchify(b, spec) == img);
  // Row-major grid: token 1 is the patch right of token 0, starting at column 16.
  CHECK(b.values[256] == 16.0);
  CHECK(b.positions[2] == 0.0);
  CHECK(b.positions[3] == 1.0);
  // Inside a patch the last axis runs fastest.
  CHECK(b.values[1] == 1.0);
  CHECK(b.values[16] == 64.0);

  std::vector<double> series(50, 1.0);
  auto s = patchify(series, PatchSpec{{{50, 1, Regularity::Irregular}}});
  CHECK(s.tokens == 50);
  CHECK(s.patch_size == 1);

  std::vector<double> pend(5 * 24 * 24, 0.5);
  auto p = patchify(pend, PatchSpec{{{5, 1, Regularity::Irregular}, {24, 24}, {24, 24}}});
  CHECK(p.tokens == 5);
  CHECK(p.patch_size == 576);

  CHECK_THROWS_AS(patchify(series, spec), DimensionError);
}

TEST_CASE("patch projection") {
  Rng rng(1);
  std::vector<double> x(12);
  for (auto& v : x) v = rng.normal();
  auto b = patchify(x, PatchSpec{{{6, 2}, {2, 1}}});
  REQUIRE(b.patch_size == 2);
  Tensor zero(Shape{2, 5}, 0.0);
  Tensor z = project_patches(b, zero);
  for (double v : z.data()) CHECK(v == 0.0);

  auto sc = patchify(x, PatchSpec{{{12, 1}}});
  Tensor col(Shape{1, 3}, std::vector<double>{2.0, 0.0, -1.0});
  Tensor e = project_patches(sc, col);
  for (std::size_t t = 0; t < 12; ++t) {
    CHECK(e[t * 3] == 2.0 * x[t]);
    CHECK(e[t * 3 + 2] == -x[t]);
  }

  Tensor w = test::random_tensor({2, 4}, rng);
  Tensor bias = test::random_tensor({4}, rng);
  Tensor out = project_patches(b, w, &bias);
  for (std::size_t t = 0; t < b.tokens; ++t)
    for (std::size_t c = 0; c < 4; ++c) {
      double acc = bias[c];
      for (std::size_t i = 0; i < 2; ++i) acc += b.values[t * 2 + i] * w[i * 4 + c];
      CHECK(std::abs(out[t * 4 + c] - acc) < 1e-14);
    }
  CHECK_THROWS_AS(project_patches(b, Tensor(Shape{3, 4})), DimensionError);
}

TEST_CASE("multivariate flattening") {
  std::vector<Observation> obs;
  for (std::size_t v = 0; v < 2; ++v)
    for (int t = 0; t < 3; ++t) obs.push_back({v, 0.1 * t, {double(v + t)}});
  auto b = flatten_multivariate(obs);
  CHECK(b.tokens == 6);
  CHECK(b.axes == 2);
  CHECK(b.positions[3 * 2 + 1] == 1.0);
  CHECK(b.positions[1] == 0.0);

  std::vector<Observation> one{{0, 4.0, {1.0}}};
  CHECK(flatten_multivariate(one).tokens == 1);

  std::vector<Observation> flux{{0, 1.0, {0.3, 0.01}}, {1, 1.5, {0.2, 0.02}}};
  CHECK(flatten_multivariate(flux).patch_size == 2);

  std::vector<Observation> ragged{{0, 1.0, {0.3, 0.01}}, {1, 1.5, {0.2}}};
  CHECK_THROWS_AS(flatten_multivariate(ragged), std::invalid_argument);
}

TEST_CASE("padding") {
  auto seq = [](std::size_t k) {
    std::vector<double> v(k, 1.0);
    return patchify(v, PatchSpec{{{k, 1}}});
  };
  std::vector<TokenBatch> eq{seq(4), seq(4)};
  auto a = pad_batch(eq);
  CHECK(std::all_of(a.pad.begin(), a.pad.end(), [](unsigned char p) { return p == 0; }));

  std::vector<TokenBatch> uneven{seq(3), seq(5)};
  auto b = pad_batch(uneven);
  CHECK(b.tokens == 5);
  CHECK(b.real_tokens(0) == 3);
  CHECK(b.pad[3] == 1);
  CHECK(b.pad[4] == 1);
  CHECK(b.real_tokens(1) == 5);
  CHECK_NOTHROW(b.check());
}
