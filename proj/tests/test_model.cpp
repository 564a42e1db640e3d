#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "romae/gradcheck.hpp"
#include "romae/model.hpp"
#include "romae/ops.hpp"
#include "romae/tape.hpp"
#include "test_util.hpp"

using namespace romae;
using romae::test::max_abs_diff;
using romae::test::small_model;
using romae::test::small_stack;

namespace {

TokenBatch random_batch(std::size_t B, std::size_t k, std::size_t np, std::size_t axes, Rng& rng,
                        double spread = 10.0) {
  TokenBatch b;
  b.batch = B, b.tokens = k, b.patch_size = np, b.axes = axes;
  b.values.resize(B * k * np);
  b.positions.resize(B * k * axes);
  b.pad.assign(B * k, 0);
  for (auto& v : b.values) v = rng.normal();
  for (auto& p : b.positions) p = rng.uniform(0.0, spread);
  return b;
}

std::vector<double> values_of(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("presets match the published sizes") {
  auto check = [](const char* name, std::size_t d, std::size_t h, std::size_t L, std::size_t ff) {
    auto c = ModelConfig::preset(name);
    CHECK(c.d_model == d);
    CHECK(c.n_head == h);
    CHECK(c.depth == L);
    CHECK(c.d_ff == ff);
    CHECK_NOTHROW(c.validate());
  };
  check("tiny-shallow", 180, 3, 2, 720);
  check("tiny", 180, 3, 12, 720);
  check("small", 432, 6, 12, 1728);
  check("base", 720, 12, 12, 2880);
  check("pendulum", 60, 2, 2, 30);
  CHECK_THROWS(ModelConfig::preset("huge"));

  auto bad = small_stack();
  bad.n_head = 3;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  auto odd = small_stack();
  odd.d_model = 18, odd.n_head = 2;  // head_dim 9
  CHECK_THROWS_AS(odd.validate(), ContractError);
}

TEST_CASE("construction is deterministic") {
  for (const char* size : {"tiny-shallow", "tiny"}) {
    RomaeConfig cfg;
    cfg.encoder = ModelConfig::preset(size);
    Romae a(cfg, 42), b(cfg, 42), c(cfg, 43);
    CHECK(a.parameter_count() == b.parameter_count());
    auto pa = a.named_parameters(), pb = b.named_parameters(), pc = c.named_parameters();
    REQUIRE(pa.size() == pb.size());
    bool differs = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i].name == pb[i].name);
      CHECK(max_abs_diff(pa[i].tensor.data(), pb[i].tensor.data()) == 0.0);
      differs = differs || max_abs_diff(pa[i].tensor.data(), pc[i].tensor.data()) > 0.0;
    }
    CHECK(differs);
  }
}

TEST_CASE("mha with all positions at zero is plain attention") {
  Rng rng(1);
  auto cfg = small_stack();
  cfg.validate();
  TransformerBlock blk(cfg, rng);
  Tensor x = test::random_tensor({2, 5, 16}, rng, 1.0, false);
  std::vector<double> pos(10, 0.0);
  auto st = make_position_state(cfg, pos, 10);
  Tensor got = mha_rope(blk, x, st, {}, cfg, {});
  Tensor plain = blk.o(attention(blk.q(x), blk.k(x), blk.v(x), 2, {}));
  CHECK(max_abs_diff(got.data(), plain.data()) < 1e-14);
}

TEST_CASE("mha rotates each head's queries and keys by the token position") {
  Rng rng(2);
  auto cfg = small_stack();
  cfg.validate();
  TransformerBlock blk(cfg, rng);
  const std::size_t T = 4;
  Tensor x = test::random_tensor({1, T, 16}, rng, 1.0, false);
  std::vector<double> pos{0.3, 2.0, 5.5, 1.1};
  Tensor q = blk.q(x), k = blk.k(x);
  AxialRope rope(cfg.rope);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t h = 0; h < 2; ++h) {
      std::vector<double> s{pos[t]};
      auto rq = rope.apply(std::span<const double>(q.data()).subspan(t * 16 + h * 8, 8), s);
      auto rk = rope.apply(std::span<const double>(k.data()).subspan(t * 16 + h * 8, 8), s);
      std::copy(rq.begin(), rq.end(), q.data().begin() + t * 16 + h * 8);
      std::copy(rk.begin(), rk.end(), k.data().begin() + t * 16 + h * 8);
    }
  Tensor want = blk.o(attention(q, k, blk.v(x), 2, {}));
  Tensor got = mha_rope(blk, x, make_position_state(cfg, pos, T), {}, cfg, {});
  CHECK(max_abs_diff(got.data(), want.data()) < 1e-12);
  CHECK_THROWS_AS(make_position_state(cfg, std::vector<double>(3), T), ContractError);
}

TEST_CASE("stochastic depth probabilities") {
  CHECK(stochastic_depth_probability(12, 12, 0.1) == 0.1);
  CHECK(stochastic_depth_probability(3, 12, 0.0) == 0.0);
  CHECK(stochastic_depth_probability(6, 12, 0.2) == doctest::Approx(0.1));
  CHECK_THROWS(stochastic_depth_probability(0, 12, 0.1));

  Rng rng(3);
  auto never = stochastic_depth_factors(0.0, 1000, rng);
  CHECK(std::all_of(never.begin(), never.end(), [](double f) { return f == 1.0; }));

  const double p = stochastic_depth_probability(9, 12, 0.4);
  auto f = stochastic_depth_factors(p, 100000, rng);
  const double dropped = std::count(f.begin(), f.end(), 0.0) / 100000.0;
  CHECK(std::abs(dropped - p) <= 0.01 * p);
  for (double v : f) CHECK((v == 0.0 || std::abs(v - 1.0 / (1.0 - p)) < 1e-15));
}

TEST_CASE("evaluation never drops residual branches") {
  Rng rng(4);
  auto cfg = small_stack();
  cfg.stochastic_depth = 0.5;
  cfg.dropout = 0.3;
  TransformerStack st(cfg, rng);
  Tensor x = test::random_tensor({2, 3, 16}, rng, 1.0, false);
  std::vector<double> pos(6, 1.0);
  Rng r1(5), r2(6);
  Tensor a = st.forward(x, pos, {}, {false, &r1});
  Tensor b = st.forward(x, pos, {}, {false, &r2});
  CHECK(max_abs_diff(a.data(), b.data()) == 0.0);
  Tensor c = st.forward(x, pos, {}, {true, &r1});
  CHECK(max_abs_diff(a.data(), c.data()) > 1e-6);
}

TEST_CASE("an empty encoder is the identity on embeddings") {
  auto cfg = small_model(false);
  cfg.encoder.depth = 0;
  Romae m(cfg, 7);
  Rng rng(8);
  auto b = random_batch(2, 4, 1, 1, rng);
  auto enc = m.encode(b, {}, {});
  Tensor emb = project_patches(b, m.named_parameters()[0].tensor, &m.named_parameters()[1].tensor);
  CHECK(max_abs_diff(enc.z.data(), emb.data()) == 0.0);
}

TEST_CASE("encoder invariances") {
  Rng rng(9);
  auto batch = random_batch(2, 6, 1, 1, rng);

  SUBCASE("global shift without CLS leaves outputs unchanged") {
    Romae m(small_model(false), 10);
    test::randomize_parameters(m, 98);
    auto shifted = batch;
    for (auto& p : shifted.positions) p += 7.0;
    auto a = m.encode(batch, {}, {}), b = m.encode(shifted, {}, {});
    CHECK(max_abs_diff(a.z.data(), b.z.data()) < 1e-10);
  }
  SUBCASE("with CLS a shift is visible") {
    Romae m(small_model(true), 10);
    test::randomize_parameters(m, 99);
    auto shifted = batch;
    for (auto& p : shifted.positions) p += 7.0;
    auto a = m.encode(batch, {}, {}), b = m.encode(shifted, {}, {});
    CHECK(max_abs_diff(a.z.data(), b.z.data()) > 1e-3);
  }
  SUBCASE("shift on one axis of a 2-axis layout") {
    Romae m(small_model(false, 2), 11);
    auto b2 = random_batch(1, 5, 1, 2, rng);
    auto shifted = b2;
    for (std::size_t t = 0; t < 5; ++t) shifted.positions[t * 2] -= 3.25;
    CHECK(max_abs_diff(m.encode(b2, {}, {}).z.data(), m.encode(shifted, {}, {}).z.data()) < 1e-10);
  }
  SUBCASE("jointly permuting tokens and positions permutes outputs") {
    for (bool cls : {false, true}) {
      Romae m(small_model(cls), 12);
      std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
      auto permuted = batch;
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t t = 0; t < 6; ++t) {
          permuted.values[b * 6 + t] = batch.values[b * 6 + perm[t]];
          permuted.positions[b * 6 + t] = batch.positions[b * 6 + perm[t]];
        }
      auto a = m.encode(batch, {}, {}), p = m.encode(permuted, {}, {});
      const std::size_t off = cls ? 1 : 0, T = a.slots, d = 16;
      for (std::size_t b = 0; b < 2; ++b) {
        if (cls) {
          CHECK(max_abs_diff(std::span<const double>(a.z.data()).subspan(b * T * d, d),
                             std::span<const double>(p.z.data()).subspan(b * T * d, d)) < 1e-10);
        }
        for (std::size_t t = 0; t < 6; ++t) {
          auto want = std::span<const double>(a.z.data()).subspan((b * T + off + perm[t]) * d, d);
          auto got = std::span<const double>(p.z.data()).subspan((b * T + off + t) * d, d);
          CHECK(max_abs_diff(want, got) < 1e-10);
        }
      }
    }
  }
  SUBCASE("padding never reaches real tokens") {
    for (bool cls : {false, true}) {
      Romae m(small_model(cls), 13);
      auto padded = batch;
      padded.tokens = 9;
      padded.values.assign(2 * 9, 0.0);
      padded.positions.assign(2 * 9, 0.0);
      padded.pad.assign(2 * 9, 1);
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t t = 0; t < 6; ++t) {
          padded.values[b * 9 + t] = batch.values[b * 6 + t];
          padded.positions[b * 9 + t] = batch.positions[b * 6 + t];
          padded.pad[b * 9 + t] = 0;
        }
      // Give the pad slots junk so any leak would show.
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t t = 6; t < 9; ++t) padded.values[b * 9 + t] = 100.0, padded.positions[b * 9 + t] = 3.0;
      std::vector<TokenBatch> parts{padded};
      auto a = m.encode(batch, {}, {}), p = m.encode(padded, {}, {});
      CHECK(a.slots == p.slots);
      CHECK(max_abs_diff(a.z.data(), p.z.data()) < 1e-10);

      // Same through the token head, with different lengths in one batch.
      m.attach_head(HeadKind::Token, 2, 1);
      TokenBatch one = random_batch(1, 3, 1, 1, rng), two = random_batch(1, 5, 1, 1, rng);
      std::vector<TokenBatch> seqs{one, two};
      Tensor joint = m.predict_tokens(pad_batch(seqs), {});
      Tensor alone = m.predict_tokens(one, {});
      CHECK(max_abs_diff(std::span<const double>(joint.data()).first(6), alone.data()) < 1e-10);
    }
  }
}

TEST_CASE("decoder contracts") {
  Rng rng(14);
  Romae m(small_model(true, 1, 3), 15);
  auto b = random_batch(2, 5, 3, 1, rng);
  MaskPlan none{0.0, std::vector<unsigned char>(10, 0), 0};
  CHECK_THROWS_AS(m.reconstruct(b, none, {}), ContractError);

  MaskPlan plan{0.4, {1, 0, 0, 1, 0, 0, 1, 0, 0, 0}, 0};
  auto rec = m.reconstruct(b, plan, {});
  CHECK(rec.values.shape() == Shape{2, 2, 3});
  CHECK(rec.token == std::vector<std::ptrdiff_t>{0, 3, 6, -1});

  // Hiding every real token with no CLS leaves the encoder nothing to read.
  Romae nocls(small_model(false, 1, 3), 15);
  MaskPlan all{1.0, std::vector<unsigned char>(10, 1), 0};
  CHECK_THROWS_AS(nocls.reconstruct(b, all, {}), ContractError);
}

TEST_CASE("reconstruction depends only on visible values") {
  Rng rng(16);
  Romae m(small_model(true), 17);
  auto b = random_batch(1, 6, 1, 1, rng);
  MaskPlan plan{0.5, {1, 0, 1, 0, 1, 0}, 0};
  auto changed = b;
  changed.values[0] += 5.0, changed.values[2] -= 3.0;
  auto r1 = m.reconstruct(b, plan, {}), r2 = m.reconstruct(changed, plan, {});
  CHECK(max_abs_diff(r1.values.data(), r2.values.data()) == 0.0);
}

TEST_CASE("gradients reach the encoder through the decoder") {
  Rng rng(18);
  Romae m(small_model(true, 1, 2), 19);
  auto b = random_batch(2, 4, 2, 1, rng);
  MaskPlan plan{0.5, {1, 0, 1, 0, 0, 1, 1, 0}, 0};
  std::vector<Tensor> probe;
  for (auto& p : m.named_parameters()) {
    if (p.name == "encoder.blocks.0.q.weight" || p.name == "encoder.blocks.1.fc1.weight" || p.name == "embed.weight" ||
        p.name == "cls" || p.name == "mask" || p.name == "adapter.weight")
      probe.push_back(p.tensor);
  }
  REQUIRE(probe.size() == 6);
  auto loss = [&] { return sum(m.reconstruct(b, plan, {}).values); };
  GradCheckOptions opt;
  opt.max_coords_per_param = 12;
  auto r = finite_diff_check(loss, probe, opt);
  CHECK(r.max_rel_error <= 1e-4);

  GradTape tape;
  TapeScope scope(tape);
  auto g = grad(tape, loss(), probe);
  double norm = 0.0;
  for (double v : g[0].data()) norm += v * v;
  CHECK(norm > 0.0);
}

TEST_CASE("a full transformer block matches finite differences") {
  Rng rng(20);
  auto cfg = small_stack(1);
  TransformerStack st(cfg, rng);
  Tensor x = test::random_tensor({2, 4, 16}, rng);
  std::vector<double> pos{0.0, 1.5, 2.0, 9.0, 3.0, 3.5, -1.0, 0.25};
  std::vector<unsigned char> pad{0, 0, 0, 1, 0, 0, 0, 0};
  std::vector<NamedTensor> named;
  st.collect(named, "s");
  std::vector<Tensor> params{x};
  for (auto& n : named) params.push_back(n.tensor);
  // Keeps the loss O(1) so finite-difference roundoff stays small.
  Tensor w = test::random_tensor({2, 4, 16}, rng, 1.0 / std::sqrt(128.0), false);
  auto loss = [&] { return sum(mul(st.forward(x, pos, pad, {}), w)); };
  GradCheckOptions opt;
  opt.max_coords_per_param = 20;
  auto r = finite_diff_check(loss, params, opt);
  INFO("worst " << r.max_rel_error << " in param " << r.worst_param << " tape " << r.tape_value << " fd " << r.fd_value);
  CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("classification head") {
  Rng rng(21);
  auto cfg = small_model(false);
  cfg.with_decoder = false;
  cfg.head = HeadKind::Sequence;
  cfg.head_outputs = 1;
  Romae m(cfg, 22);
  auto b = random_batch(3, 4, 1, 1, rng);
  Tensor y = m.predict_sequence(b, {});
  CHECK(y.shape() == Shape{3, 1});

  // Equal rows: the pooled mean equals any row, so logits match one row's head output.
  Encoded enc;
  enc.slots = 3;
  enc.used = {3};
  enc.pad = {0, 0, 0};
  auto row = test::random_tensor({16}, rng, 1.0, false);
  std::vector<double> z;
  for (int i = 0; i < 3; ++i) z.insert(z.end(), row.data().begin(), row.data().end());
  enc.z = Tensor(Shape{1, 3, 16}, z);
  auto params = m.named_parameters();
  auto find = [&](const std::string& n) {
    for (auto& p : params)
      if (p.name == n) return p.tensor;
    FAIL("missing " << n);
    return Tensor();
  };
  Tensor gain = find("task_head.norm"), W = find("task_head.proj.weight"), bias = find("task_head.proj.bias");
  for (auto& g : gain.data()) g = rng.normal();
  Tensor logits = m.classification_head(enc);
  double ms = 0.0;
  for (double v : row.data()) ms += v * v / 16.0;
  double want = bias[0];
  for (std::size_t c = 0; c < 16; ++c) want += row[c] / std::sqrt(ms + 1e-6) * gain[c] * W[c];
  CHECK(std::abs(logits[0] - want) < 1e-12);

  m.attach_head(HeadKind::Sequence, 2, 3);
  CHECK(m.predict_sequence(b, {}).shape() == Shape{3, 2});
}

TEST_CASE("absolute mode runs and is not shift invariant") {
  Rng rng(23);
  auto cfg = small_model(false);
  cfg.encoder.positional = PositionalMode::Absolute;
  Romae m(cfg, 24);
  auto b = random_batch(1, 5, 1, 1, rng);
  auto s = b;
  for (auto& p : s.positions) p += 7.0;
  CHECK(max_abs_diff(m.encode(b, {}, {}).z.data(), m.encode(s, {}, {}).z.data()) > 1e-3);
}

TEST_CASE("dropping the decoder and reloading parameters") {
  Romae a(small_model(true), 25), b(small_model(true), 26);
  auto missing = b.load_parameters(a.named_parameters());
  CHECK(missing.empty());
  auto pa = a.named_parameters(), pb = b.named_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(values_of(pa[i].tensor) == values_of(pb[i].tensor));
  const auto before = b.parameter_count();
  b.drop_decoder();
  CHECK(b.parameter_count() < before);
  for (auto& p : b.named_parameters()) {
    CHECK(p.name.rfind("decoder", 0) != 0);
    CHECK(p.name != "mask");
  }
}
