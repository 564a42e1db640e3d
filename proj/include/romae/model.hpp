#pragma once

// The RoMAE encoder/decoder transformer.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "romae/positional.hpp"
#include "romae/rng.hpp"
#include "romae/tensor.hpp"
#include "romae/tokenizer.hpp"

namespace romae {

enum class PositionalMode { Rotary, Absolute };

std::string to_string(PositionalMode mode);
PositionalMode parse_positional_mode(const std::string& name);

struct ModelConfig {
  std::size_t d_model = 180;
  std::size_t n_head = 3;
  std::size_t depth = 12;
  std::size_t d_ff = 720;
  bool use_cls = true;
  PositionalMode positional = PositionalMode::Rotary;
  RopeConfig rope;  // head_dim is derived from d_model / n_head
  double dropout = 0.0;
  double stochastic_depth = 0.0;

  std::size_t head_dim() const { return d_model / n_head; }
  /// Fills rope.head_dim and checks every invariant; throws ContractError.
  void validate();

  /// tiny-shallow, tiny, small, base, or pendulum (the 2-layer custom size).
  static ModelConfig preset(const std::string& name);
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Evaluation or training mode plus the randomness training needs.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(std::vector<NamedTensor>& out, const std::string& prefix) const;
};

/// RMSNorm followed by a linear map; used for reconstruction and task heads.
struct Head {
  Tensor gain;
  Linear proj;

  Head() = default;
  Head(std::size_t in, std::size_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(std::vector<NamedTensor>& out, const std::string& prefix) const;
};

/// Probability that the residual branches of layer m (1-based) are dropped.
double stochastic_depth_probability(std::size_t m, std::size_t n_layers, double lambda);

/// Per-sample branch multipliers: 0 with probability p, else 1/(1-p).
std::vector<double> stochastic_depth_factors(double p, std::size_t batch, Rng& rng);

/// Pre-norm transformer layer: z + Attn(RMSNorm(z)), then z + MLP(RMSNorm(z)).
struct TransformerBlock {
  Tensor attn_norm;
  Linear q, k, v, o;
  Tensor mlp_norm;
  Linear fc1, fc2;

  TransformerBlock() = default;
  TransformerBlock(const ModelConfig& cfg, Rng& rng);
  void collect(std::vector<NamedTensor>& out, const std::string& prefix) const;
};

/// Per-forward positional state shared by all layers of a stack.
struct PositionState {
  Tensor cos;  // [rows, head_dim/2]
  Tensor sin;
  std::vector<unsigned char> rotated;
  std::size_t period = 0;
};

PositionState make_position_state(const ModelConfig& cfg, std::span<const double> positions,
                                  std::size_t rows);

/// Multi-head attention with rotary queries and keys. x is [B, T, d].
Tensor mha_rope(const TransformerBlock& block, const Tensor& x, const PositionState& pos,
                std::span<const unsigned char> pad, const ModelConfig& cfg, const ForwardContext& ctx);

/// One block forward; `m` is the 1-based depth index used by stochastic depth.
Tensor transformer_block(const TransformerBlock& block, const Tensor& x, const PositionState& pos,
                         std::span<const unsigned char> pad, const ModelConfig& cfg, std::size_t m,
                         const ForwardContext& ctx);

/// A stack of blocks with a final RMSNorm.
class TransformerStack {
 public:
  TransformerStack() = default;
  TransformerStack(const ModelConfig& cfg, Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  /// x [B, T, d]; positions [B*T*axes]; pad [B*T].
  Tensor forward(const Tensor& x, std::span<const double> positions, std::span<const unsigned char> pad,
                 const ForwardContext& ctx) const;
  void collect(std::vector<NamedTensor>& out, const std::string& prefix) const;

 private:
  ModelConfig cfg_;
  std::vector<TransformerBlock> blocks_;
  Tensor final_norm_;
};

enum class HeadKind { None, Sequence, Token };

std::string to_string(HeadKind kind);
HeadKind parse_head_kind(const std::string& name);

struct RomaeConfig {
  ModelConfig encoder = ModelConfig::preset("tiny");
  ModelConfig decoder = ModelConfig::preset("tiny-shallow");
  std::size_t patch_size = 1;  // n_p
  std::size_t axes = 1;        // D
  bool with_decoder = true;
  HeadKind head = HeadKind::None;
  std::size_t head_outputs = 0;

  void validate();
};

/// Encoder output with the slot bookkeeping the decoder and heads need.
struct Encoded {
  Tensor z;                             // [B, Te, d]
  std::size_t slots = 0;                // Te
  std::vector<double> positions;        // [B*Te*axes]
  std::vector<unsigned char> pad;       // [B*Te]
  std::vector<std::ptrdiff_t> source;   // input token b*k+t per slot, -1 for CLS/pad
  std::vector<std::size_t> used;        // real slots per sequence (CLS included)
};

struct Reconstruction {
  Tensor values;                        // [B, M, n_p]; M = max masked per sequence
  std::size_t per_sequence = 0;         // M
  std::vector<std::ptrdiff_t> token;    // b*k+t for each of the B*M rows, -1 for padding
};

class Romae {
 public:
  Romae(RomaeConfig cfg, std::uint64_t seed);

  const RomaeConfig& config() const { return cfg_; }
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  /// Runs the encoder over every real token not hidden by `hide` (may be empty).
  Encoded encode(const TokenBatch& batch, std::span<const unsigned char> hide,
                 const ForwardContext& ctx) const;

  /// Decodes [MASK] tokens placed at the hidden tokens' true positions and
  /// predicts their n_p values.
  Reconstruction decode(const TokenBatch& batch, const Encoded& enc, std::span<const unsigned char> hide,
                        const ForwardContext& ctx) const;

  Reconstruction reconstruct(const TokenBatch& batch, const MaskPlan& plan, const ForwardContext& ctx) const;

  /// Sequence-level head on the CLS slot, or on the mean of real tokens without CLS. [B, outputs].
  Tensor predict_sequence(const TokenBatch& batch, const ForwardContext& ctx) const;
  /// Shared per-token head. [B, k, outputs]; padded slots produce zero-input rows.
  Tensor predict_tokens(const TokenBatch& batch, const ForwardContext& ctx) const;

  /// Applies the task head to encoder output (exposed for tests).
  Tensor classification_head(const Encoded& enc) const;

  /// Removes decoder-side parameters (used when fine-tuning a pretrained model).
  void drop_decoder();
  /// Adds or replaces the task head.
  void attach_head(HeadKind kind, std::size_t outputs, std::uint64_t seed);

  /// Copies values from `source` for every name present in both; returns names not found.
  std::vector<std::string> load_parameters(const std::vector<NamedTensor>& source);

 private:
  RomaeConfig cfg_;
  Linear patch_embed_;
  Tensor cls_token_;
  TransformerStack encoder_;
  bool has_adapter_ = false;
  Linear adapter_;
  Tensor mask_token_;
  TransformerStack decoder_;
  Head recon_head_;
  Head task_head_;
};

}  // namespace romae
