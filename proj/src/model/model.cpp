#include "romae/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "romae/ops.hpp"

namespace romae {

std::string to_string(PositionalMode mode) { return mode == PositionalMode::Rotary ? "rotary" : "absolute"; }

PositionalMode parse_positional_mode(const std::string& name) {
  if (name == "rotary") return PositionalMode::Rotary;
  if (name == "absolute") return PositionalMode::Absolute;
  throw std::invalid_argument("unknown positional mode '" + name + "' (expected rotary or absolute)");
}

std::string to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::None: return "none";
    case HeadKind::Sequence: return "sequence";
    case HeadKind::Token: return "token";
  }
  return "none";
}

HeadKind parse_head_kind(const std::string& name) {
  if (name == "none") return HeadKind::None;
  if (name == "sequence") return HeadKind::Sequence;
  if (name == "token") return HeadKind::Token;
  throw std::invalid_argument("unknown head kind '" + name + "' (expected none, sequence or token)");
}

void ModelConfig::validate() {
  if (d_model == 0 || n_head == 0 || d_model % n_head != 0) {
    throw ContractError("model: d_model " + std::to_string(d_model) + " is not divisible by n_head " +
                        std::to_string(n_head));
  }
  if (d_ff == 0) throw ContractError("model: d_ff must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractError("model: dropout must lie in [0, 1)");
  if (!(stochastic_depth >= 0.0 && stochastic_depth < 1.0)) {
    throw ContractError("model: stochastic depth must lie in [0, 1)");
  }
  rope.head_dim = head_dim();
  rope.validate();
  if (positional == PositionalMode::Absolute && d_model % (2 * rope.axes) != 0) {
    throw ContractError("model: absolute embeddings need d_model divisible by 2*axes");
  }
}

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig c;
  if (name == "tiny-shallow") {
    c.d_model = 180, c.n_head = 3, c.depth = 2, c.d_ff = 720;
  } else if (name == "tiny") {
    c.d_model = 180, c.n_head = 3, c.depth = 12, c.d_ff = 720;
  } else if (name == "small") {
    c.d_model = 432, c.n_head = 6, c.depth = 12, c.d_ff = 1728;
  } else if (name == "base") {
    c.d_model = 720, c.n_head = 12, c.depth = 12, c.d_ff = 2880;
  } else if (name == "pendulum") {
    c.d_model = 60, c.n_head = 2, c.depth = 2, c.d_ff = 30;
  } else {
    throw std::invalid_argument("unknown model size '" + name +
                                "' (expected tiny-shallow, tiny, small, base or pendulum)");
  }
  c.rope.head_dim = c.head_dim();
  return c;
}

namespace {

Tensor init_weight(Shape shape, Rng& rng) {
  std::vector<double> w(numel(shape));
  for (auto& x : w) x = rng.truncated_normal(0.02);
  return Tensor::parameter(std::move(shape), std::move(w));
}

Tensor ones(std::size_t n) { return Tensor::parameter(Shape{n}, std::vector<double>(n, 1.0)); }
Tensor zeros(std::size_t n) { return Tensor::parameter(Shape{n}, std::vector<double>(n, 0.0)); }

}  // namespace

Linear::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight(init_weight(Shape{in, out}, rng)), bias(zeros(out)) {}

Tensor Linear::operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }

void Linear::collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

Head::Head(std::size_t in, std::size_t out, Rng& rng) : gain(ones(in)), proj(in, out, rng) {}

Tensor Head::operator()(const Tensor& x) const { return proj(rmsnorm(x, gain)); }

void Head::collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
  out.push_back({prefix + ".norm", gain});
  proj.collect(out, prefix + ".proj");
}

double stochastic_depth_probability(std::size_t m, std::size_t n_layers, double lambda) {
  if (n_layers == 0 || m == 0 || m > n_layers) {
    throw ContractError("stochastic depth: layer " + std::to_string(m) + " outside 1.." +
                        std::to_string(n_layers));
  }
  return lambda * (static_cast<double>(m) / static_cast<double>(n_layers));
}

std::vector<double> stochastic_depth_factors(double p, std::size_t batch, Rng& rng) {
  std::vector<double> f(batch, 1.0);
  if (p <= 0.0) return f;
  for (auto& x : f) x = rng.bernoulli(p) ? 0.0 : 1.0 / (1.0 - p);
  return f;
}

TransformerBlock::TransformerBlock(const ModelConfig& cfg, Rng& rng)
    : attn_norm(ones(cfg.d_model)),
      q(cfg.d_model, cfg.d_model, rng),
      k(cfg.d_model, cfg.d_model, rng),
      v(cfg.d_model, cfg.d_model, rng),
      o(cfg.d_model, cfg.d_model, rng),
      mlp_norm(ones(cfg.d_model)),
      fc1(cfg.d_model, cfg.d_ff, rng),
      fc2(cfg.d_ff, cfg.d_model, rng) {}

void TransformerBlock::collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
  out.push_back({prefix + ".attn_norm", attn_norm});
  q.collect(out, prefix + ".q");
  k.collect(out, prefix + ".k");
  v.collect(out, prefix + ".v");
  o.collect(out, prefix + ".o");
  out.push_back({prefix + ".mlp_norm", mlp_norm});
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

PositionState make_position_state(const ModelConfig& cfg, std::span<const double> positions,
                                  std::size_t rows) {
  PositionState st;
  if (cfg.positional != PositionalMode::Rotary) return st;
  const AxialRope rope(cfg.rope);
  auto [c, s] = rope.tables(positions, rows);
  st.cos = std::move(c);
  st.sin = std::move(s);
  st.rotated.assign(rope.rotated().begin(), rope.rotated().end());
  st.period = cfg.rope.head_dim;
  return st;
}

Tensor mha_rope(const TransformerBlock& block, const Tensor& x, const PositionState& pos,
                std::span<const unsigned char> pad, const ModelConfig& cfg, const ForwardContext& ctx) {
  Tensor q = block.q(x);
  Tensor k = block.k(x);
  const Tensor v = block.v(x);
  if (pos.period != 0) {
    q = rotate_pairs(q, pos.cos, pos.sin, pos.rotated, pos.period);
    k = rotate_pairs(k, pos.cos, pos.sin, pos.rotated, pos.period);
  }
  Rng* rng = ctx.training && cfg.dropout > 0.0 ? ctx.rng : nullptr;
  return block.o(attention(q, k, v, cfg.n_head, pad, rng ? cfg.dropout : 0.0, rng));
}

Tensor transformer_block(const TransformerBlock& block, const Tensor& x, const PositionState& pos,
                         std::span<const unsigned char> pad, const ModelConfig& cfg, std::size_t m,
                         const ForwardContext& ctx) {
  const bool train = ctx.training && ctx.rng != nullptr;
  const double p_drop = train && cfg.stochastic_depth > 0.0
                            ? stochastic_depth_probability(m, cfg.depth, cfg.stochastic_depth)
                            : 0.0;
  auto branch = [&](Tensor y) {
    if (p_drop > 0.0) y = scale_rows(y, stochastic_depth_factors(p_drop, x.dim(0), *ctx.rng));
    return y;
  };
  Tensor z = add(x, branch(mha_rope(block, rmsnorm(x, block.attn_norm), pos, pad, cfg, ctx)));
  Tensor h = silu(block.fc1(rmsnorm(z, block.mlp_norm)));
  if (train && cfg.dropout > 0.0) h = dropout(h, cfg.dropout, *ctx.rng);
  return add(z, branch(block.fc2(h)));
}

TransformerStack::TransformerStack(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  blocks_.reserve(cfg_.depth);
  for (std::size_t i = 0; i < cfg_.depth; ++i) blocks_.emplace_back(cfg_, rng);
  final_norm_ = ones(cfg_.d_model);
}

Tensor TransformerStack::forward(const Tensor& x, std::span<const double> positions,
                                 std::span<const unsigned char> pad, const ForwardContext& ctx) const {
  if (x.rank() != 3 || x.dim(2) != cfg_.d_model) {
    throw DimensionError("transformer: input " + to_string(x.shape()) + " is not [B, T, " +
                         std::to_string(cfg_.d_model) + "]");
  }
  const std::size_t rows = x.dim(0) * x.dim(1);
  if (positions.size() != rows * cfg_.rope.axes) {
    throw ContractError("transformer: " + std::to_string(positions.size()) + " position coordinates for " +
                        std::to_string(rows) + " tokens of " + std::to_string(cfg_.rope.axes) + " axes");
  }
  // An empty stack is the identity, so the final norm only follows real layers.
  if (blocks_.empty()) return x;
  const PositionState pos = make_position_state(cfg_, positions, rows);
  Tensor z = x;
  for (std::size_t i = 0; i < blocks_.size(); ++i) z = transformer_block(blocks_[i], z, pos, pad, cfg_, i + 1, ctx);
  return rmsnorm(z, final_norm_);
}

void TransformerStack::collect(std::vector<NamedTensor>& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, prefix + ".blocks." + std::to_string(i));
  if (!blocks_.empty()) out.push_back({prefix + ".norm", final_norm_});
}

void RomaeConfig::validate() {
  if (patch_size == 0) throw ContractError("model: patch size must be positive");
  if (axes == 0) throw ContractError("model: at least one position axis is required");
  encoder.rope.axes = axes;
  decoder.rope.axes = axes;
  decoder.use_cls = encoder.use_cls;
  encoder.validate();
  if (with_decoder) decoder.validate();
  if (head != HeadKind::None && head_outputs == 0) throw ContractError("model: head needs at least one output");
}

namespace {

// Sinusoidal absolute embedding for [rows, axes] positions; each axis fills its
// own contiguous chunk of the model width. Rows flagged in `pad` stay zero.
Tensor absolute_embedding(std::span<const double> positions, std::span<const unsigned char> pad,
                          std::size_t rows, std::size_t axes, std::size_t width, std::size_t t_per_b) {
  const std::size_t chunk = width / axes;
  Tensor out(Shape{rows / t_per_b, t_per_b, width}, 0.0);
  std::vector<double> coord(rows);
  for (std::size_t a = 0; a < axes; ++a) {
    for (std::size_t r = 0; r < rows; ++r) coord[r] = positions[r * axes + a];
    const auto table = sinusoidal_ape(coord, chunk);
    for (std::size_t r = 0; r < rows; ++r) {
      if (pad[r]) continue;
      std::copy_n(table.begin() + static_cast<std::ptrdiff_t>(r * chunk), chunk,
                  out.data().begin() + static_cast<std::ptrdiff_t>(r * width + a * chunk));
    }
  }
  return out;
}

}  // namespace

Romae::Romae(RomaeConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  // Separate streams keep each component's initialization independent of the
  // others' sizes, so dropping or resizing one part leaves the rest unchanged.
  Rng embed_rng = Rng::derive(seed, 1);
  Rng enc_rng = Rng::derive(seed, 2);
  Rng dec_rng = Rng::derive(seed, 3);
  const std::size_t d = cfg_.encoder.d_model;
  patch_embed_ = Linear(cfg_.patch_size, d, embed_rng);
  if (cfg_.encoder.use_cls) cls_token_ = init_weight(Shape{d}, embed_rng);
  encoder_ = TransformerStack(cfg_.encoder, enc_rng);
  if (cfg_.with_decoder) {
    const std::size_t dd = cfg_.decoder.d_model;
    has_adapter_ = dd != d;
    if (has_adapter_) adapter_ = Linear(d, dd, dec_rng);
    mask_token_ = init_weight(Shape{dd}, dec_rng);
    decoder_ = TransformerStack(cfg_.decoder, dec_rng);
    recon_head_ = Head(dd, cfg_.patch_size, dec_rng);
  }
  if (cfg_.head != HeadKind::None) attach_head(cfg_.head, cfg_.head_outputs, Rng::derive(seed, 4).next());
}

std::vector<NamedTensor> Romae::named_parameters() const {
  std::vector<NamedTensor> out;
  patch_embed_.collect(out, "embed");
  if (cfg_.encoder.use_cls) out.push_back({"cls", cls_token_});
  encoder_.collect(out, "encoder");
  if (cfg_.with_decoder) {
    if (has_adapter_) adapter_.collect(out, "adapter");
    out.push_back({"mask", mask_token_});
    decoder_.collect(out, "decoder");
    recon_head_.collect(out, "recon_head");
  }
  if (cfg_.head != HeadKind::None) task_head_.collect(out, "task_head");
  return out;
}

std::vector<Tensor> Romae::parameters() const {
  std::vector<Tensor> out;
  for (auto& p : named_parameters()) out.push_back(p.tensor);
  return out;
}

std::size_t Romae::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : named_parameters()) n += p.tensor.size();
  return n;
}

Encoded Romae::encode(const TokenBatch& batch, std::span<const unsigned char> hide,
                      const ForwardContext& ctx) const {
  batch.check();
  if (batch.patch_size != cfg_.patch_size || batch.axes != cfg_.axes) {
    throw DimensionError("model expects patches of " + std::to_string(cfg_.patch_size) + " values with " +
                         std::to_string(cfg_.axes) + " position axes, got " + std::to_string(batch.patch_size) +
                         " and " + std::to_string(batch.axes));
  }
  if (!hide.empty() && hide.size() != batch.batch * batch.tokens) {
    throw DimensionError("encode: hide mask does not cover the batch");
  }
  const std::size_t B = batch.batch, k = batch.tokens, D = batch.axes;
  const bool cls = cfg_.encoder.use_cls;
  Encoded enc;
  enc.used.assign(B, 0);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t n = cls ? 1 : 0;
    for (std::size_t t = 0; t < k; ++t) {
      const std::size_t i = b * k + t;
      if (!batch.pad[i] && (hide.empty() || !hide[i])) ++n;
    }
    if (n == 0) throw ContractError("encode: sequence " + std::to_string(b) + " has no visible tokens");
    enc.used[b] = n;
  }
  const std::size_t Te = *std::max_element(enc.used.begin(), enc.used.end());
  enc.slots = Te;
  enc.positions.assign(B * Te * D, 0.0);
  enc.pad.assign(B * Te, 1);
  enc.source.assign(B * Te, -1);
  const auto cls_row = static_cast<std::ptrdiff_t>(B * k);
  std::vector<std::ptrdiff_t> index(B * Te, -1);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t slot = b * Te;
    if (cls) {
      index[slot] = cls_row;
      enc.pad[slot] = 0;
      ++slot;
    }
    for (std::size_t t = 0; t < k; ++t) {
      const std::size_t i = b * k + t;
      if (batch.pad[i] || (!hide.empty() && hide[i])) continue;
      index[slot] = static_cast<std::ptrdiff_t>(i);
      enc.source[slot] = static_cast<std::ptrdiff_t>(i);
      enc.pad[slot] = 0;
      std::copy_n(batch.positions.begin() + static_cast<std::ptrdiff_t>(i * D), D,
                  enc.positions.begin() + static_cast<std::ptrdiff_t>(slot * D));
      ++slot;
    }
  }
  const std::size_t d = cfg_.encoder.d_model;
  Tensor embedded = reshape(project_patches(batch, patch_embed_.weight, &patch_embed_.bias), Shape{B * k, d});
  Tensor table = cls ? concat_rows({embedded, reshape(cls_token_, Shape{1, d})}) : embedded;
  Tensor x = gather_rows(table, index, Shape{B, Te, d});
  if (cfg_.encoder.positional == PositionalMode::Absolute) {
    x = add(x, absolute_embedding(enc.positions, enc.pad, B * Te, D, d, Te));
  }
  enc.z = encoder_.forward(x, enc.positions, enc.pad, ctx);
  return enc;
}

Reconstruction Romae::decode(const TokenBatch& batch, const Encoded& enc, std::span<const unsigned char> hide,
                             const ForwardContext& ctx) const {
  if (!cfg_.with_decoder) throw ContractError("decode: this model has no decoder");
  if (hide.size() != batch.batch * batch.tokens) throw DimensionError("decode: hide mask does not cover the batch");
  const std::size_t B = batch.batch, k = batch.tokens, D = batch.axes, Te = enc.slots;
  std::vector<std::size_t> masked(B, 0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < k; ++t) masked[b] += (hide[b * k + t] && !batch.pad[b * k + t]) ? 1 : 0;
    if (masked[b] == 0) {
      throw ContractError("decode: sequence " + std::to_string(b) + " has no masked tokens to reconstruct");
    }
  }
  const std::size_t M = *std::max_element(masked.begin(), masked.end());
  std::size_t Td = 0;
  for (std::size_t b = 0; b < B; ++b) Td = std::max(Td, enc.used[b] + masked[b]);

  const std::size_t dd = cfg_.decoder.d_model;
  Tensor z = has_adapter_ ? adapter_(enc.z) : enc.z;
  Tensor table = concat_rows({reshape(z, Shape{B * Te, dd}), reshape(mask_token_, Shape{1, dd})});
  const auto mask_row = static_cast<std::ptrdiff_t>(B * Te);

  std::vector<std::ptrdiff_t> index(B * Td, -1);
  std::vector<double> positions(B * Td * D, 0.0);
  std::vector<unsigned char> pad(B * Td, 1);
  Reconstruction rec;
  rec.per_sequence = M;
  rec.token.assign(B * M, -1);
  std::vector<std::ptrdiff_t> pick(B * M, -1);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t slot = b * Td;
    for (std::size_t s = 0; s < enc.used[b]; ++s, ++slot) {
      index[slot] = static_cast<std::ptrdiff_t>(b * Te + s);
      pad[slot] = 0;
      std::copy_n(enc.positions.begin() + static_cast<std::ptrdiff_t>((b * Te + s) * D), D,
                  positions.begin() + static_cast<std::ptrdiff_t>(slot * D));
    }
    std::size_t r = 0;
    for (std::size_t t = 0; t < k; ++t) {
      const std::size_t i = b * k + t;
      if (!hide[i] || batch.pad[i]) continue;
      index[slot] = mask_row;
      pad[slot] = 0;
      std::copy_n(batch.positions.begin() + static_cast<std::ptrdiff_t>(i * D), D,
                  positions.begin() + static_cast<std::ptrdiff_t>(slot * D));
      pick[b * M + r] = static_cast<std::ptrdiff_t>(slot);
      rec.token[b * M + r] = static_cast<std::ptrdiff_t>(i);
      ++slot, ++r;
    }
  }
  Tensor x = gather_rows(table, index, Shape{B, Td, dd});
  if (cfg_.decoder.positional == PositionalMode::Absolute) {
    x = add(x, absolute_embedding(positions, pad, B * Td, D, dd, Td));
  }
  Tensor y = decoder_.forward(x, positions, pad, ctx);
  Tensor chosen = gather_rows(reshape(y, Shape{B * Td, dd}), pick, Shape{B, M, dd});
  rec.values = recon_head_(chosen);
  return rec;
}

Reconstruction Romae::reconstruct(const TokenBatch& batch, const MaskPlan& plan, const ForwardContext& ctx) const {
  if (plan.masked.size() != batch.batch * batch.tokens) {
    throw DimensionError("reconstruct: mask plan does not cover the batch");
  }
  const Encoded enc = encode(batch, plan.masked, ctx);
  return decode(batch, enc, plan.masked, ctx);
}

Tensor Romae::classification_head(const Encoded& enc) const {
  if (cfg_.head == HeadKind::None) throw ContractError("model has no task head");
  const std::size_t B = enc.used.size(), d = cfg_.encoder.d_model;
  Tensor pooled;
  if (cfg_.encoder.use_cls) {
    std::vector<std::ptrdiff_t> idx(B);
    for (std::size_t b = 0; b < B; ++b) idx[b] = static_cast<std::ptrdiff_t>(b * enc.slots);
    pooled = gather_rows(reshape(enc.z, Shape{B * enc.slots, d}), idx, Shape{B, d});
  } else {
    std::vector<unsigned char> keep(enc.pad.size());
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = enc.pad[i] ? 0 : 1;
    pooled = masked_mean_rows(enc.z, keep);
  }
  return task_head_(pooled);
}

Tensor Romae::predict_sequence(const TokenBatch& batch, const ForwardContext& ctx) const {
  return classification_head(encode(batch, {}, ctx));
}

Tensor Romae::predict_tokens(const TokenBatch& batch, const ForwardContext& ctx) const {
  if (cfg_.head == HeadKind::None) throw ContractError("model has no task head");
  const Encoded enc = encode(batch, {}, ctx);
  const std::size_t B = batch.batch, k = batch.tokens, d = cfg_.encoder.d_model;
  std::vector<std::ptrdiff_t> idx(B * k, -1);
  for (std::size_t s = 0; s < enc.source.size(); ++s) {
    if (enc.source[s] >= 0) idx[static_cast<std::size_t>(enc.source[s])] = static_cast<std::ptrdiff_t>(s);
  }
  Tensor rows = gather_rows(reshape(enc.z, Shape{B * enc.slots, d}), idx, Shape{B, k, d});
  return task_head_(rows);
}

void Romae::drop_decoder() {
  cfg_.with_decoder = false;
  has_adapter_ = false;
  adapter_ = Linear();
  mask_token_ = Tensor();
  decoder_ = TransformerStack();
  recon_head_ = Head();
}

void Romae::attach_head(HeadKind kind, std::size_t outputs, std::uint64_t seed) {
  if (kind == HeadKind::None) {
    cfg_.head = kind;
    cfg_.head_outputs = 0;
    task_head_ = Head();
    return;
  }
  if (outputs == 0) throw ContractError("model: head needs at least one output");
  Rng rng(seed);
  cfg_.head = kind;
  cfg_.head_outputs = outputs;
  task_head_ = Head(cfg_.encoder.d_model, outputs, rng);
}

std::vector<std::string> Romae::load_parameters(const std::vector<NamedTensor>& source) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& p : source) by_name[p.name] = &p.tensor;
  std::vector<std::string> missing;
  for (auto& p : named_parameters()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      missing.push_back(p.name);
      continue;
    }
    if (it->second->shape() != p.tensor.shape()) {
      throw DimensionError("parameter " + p.name + " has shape " + to_string(it->second->shape()) +
                           ", expected " + to_string(p.tensor.shape()));
    }
    std::copy(it->second->data().begin(), it->second->data().end(), p.tensor.data().begin());
  }
  return missing;
}

}  // namespace romae
