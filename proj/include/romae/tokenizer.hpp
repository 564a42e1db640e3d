#pragma once

// Turns raw arrays and irregular series into token batches.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "romae/tensor.hpp"

namespace romae {

enum class Regularity { Regular, Irregular };

struct PatchDim {
  std::size_t extent = 0;
  std::size_t patch = 1;
  Regularity regularity = Regularity::Regular;
};

struct PatchSpec {
  std::vector<PatchDim> dims;

  std::size_t patch_size() const;   // n_p = prod p_i
  std::size_t token_count() const;  // k = prod d_i / p_i
};

class PatchSpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Throws PatchSpecError if an irregular dimension has patch > 1, a regular
/// patch does not divide its extent, or any extent is zero.
void validate_patch_spec(const PatchSpec& spec);

/// Per-token masking decision for a batch. masked[b*k + t] == 1 hides token t
/// of sequence b from the encoder.
struct MaskPlan {
  double ratio = 0.0;
  std::vector<unsigned char> masked;
  std::uint64_t seed = 0;
};

/// The unit flowing through the model. Layouts are row-major:
/// values [batch, tokens, patch_size], positions [batch, tokens, axes],
/// pad [batch, tokens] (1 = padding slot).
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t tokens = 0;
  std::size_t patch_size = 0;
  std::size_t axes = 0;
  std::vector<double> values;
  std::vector<double> positions;
  std::vector<unsigned char> pad;
  std::optional<MaskPlan> mask_plan;

  std::size_t real_tokens(std::size_t b) const;
  void check() const;
};

/// Splits a dense array of shape (d_1..d_D) into non-overlapping patches.
/// Tokens are ordered row-major over the patch grid and the values inside a
/// patch row-major over the patch offsets. Positions are 0-based grid indices.
TokenBatch patchify(std::span<const double> x, const PatchSpec& spec);

/// Inverse of patchify for a single-sequence batch.
std::vector<double> unpatchify(const TokenBatch& batch, const PatchSpec& spec);

/// values [batch, tokens, n_p] x weight [n_p, d] (+ bias [d]) -> [batch, tokens, d].
Tensor project_patches(const TokenBatch& batch, const Tensor& weight, const Tensor* bias = nullptr);

struct Observation {
  std::size_t variate = 0;
  double time = 0.0;
  std::vector<double> channels;
};

/// One token per observation; positions are (time, variate) with the variate
/// index on the reserved last axis.
TokenBatch flatten_multivariate(std::span<const Observation> series);

/// Stacks sequences (each with batch == 1 or more) into one batch padded to
/// the longest sequence. Padding slots carry zero values and positions.
TokenBatch pad_batch(std::span<const TokenBatch> sequences);

}  // namespace romae
