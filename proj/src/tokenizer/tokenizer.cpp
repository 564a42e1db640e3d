#include "romae/tokenizer.hpp"

#include <algorithm>
#include <string>

#include "romae/ops.hpp"

namespace romae {

std::size_t PatchSpec::patch_size() const {
  std::size_t n = 1;
  for (const auto& d : dims) n *= d.patch;
  return n;
}

std::size_t PatchSpec::token_count() const {
  std::size_t n = 1;
  for (const auto& d : dims) n *= d.extent / d.patch;
  return n;
}

void validate_patch_spec(const PatchSpec& spec) {
  if (spec.dims.empty()) throw PatchSpecError("patch spec has no dimensions");
  for (std::size_t i = 0; i < spec.dims.size(); ++i) {
    const auto& d = spec.dims[i];
    if (d.extent == 0 || d.patch == 0) {
      throw PatchSpecError("dimension " + std::to_string(i) + ": extents and patch sizes must be positive");
    }
    if (d.regularity == Regularity::Irregular && d.patch != 1) {
      throw PatchSpecError("dimension " + std::to_string(i) + " is irregular and must use patch size 1, got " +
                           std::to_string(d.patch));
    }
    if (d.extent % d.patch != 0) {
      throw PatchSpecError("dimension " + std::to_string(i) + ": patch " + std::to_string(d.patch) +
                           " does not divide extent " + std::to_string(d.extent));
    }
  }
}

std::size_t TokenBatch::real_tokens(std::size_t b) const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < tokens; ++t) n += pad[b * tokens + t] ? 0 : 1;
  return n;
}

void TokenBatch::check() const {
  if (values.size() != batch * tokens * patch_size || positions.size() != batch * tokens * axes ||
      pad.size() != batch * tokens) {
    throw DimensionError("token batch buffers inconsistent with [" + std::to_string(batch) + ", " +
                         std::to_string(tokens) + "] x n_p " + std::to_string(patch_size) + " x axes " +
                         std::to_string(axes));
  }
  if (mask_plan && mask_plan->masked.size() != batch * tokens) {
    throw DimensionError("mask plan does not cover the batch");
  }
}

namespace {

// Row-major multi-index helpers over `extents`.
void unravel(std::size_t flat, const std::vector<std::size_t>& extents, std::vector<std::size_t>& idx) {
  for (std::size_t i = extents.size(); i-- > 0;) {
    idx[i] = flat % extents[i];
    flat /= extents[i];
  }
}

std::size_t element_offset(const PatchSpec& spec, const std::vector<std::size_t>& grid,
                           const std::vector<std::size_t>& inner) {
  std::size_t off = 0;
  for (std::size_t i = 0; i < spec.dims.size(); ++i) {
    off = off * spec.dims[i].extent + grid[i] * spec.dims[i].patch + inner[i];
  }
  return off;
}

}  // namespace

TokenBatch patchify(std::span<const double> x, const PatchSpec& spec) {
  validate_patch_spec(spec);
  std::size_t total = 1;
  for (const auto& d : spec.dims) total *= d.extent;
  if (x.size() != total) {
    throw DimensionError("patchify: input of " + std::to_string(x.size()) +
                         " values does not match the spec's " + std::to_string(total));
  }
  const std::size_t nd = spec.dims.size();
  std::vector<std::size_t> grid_ext(nd), patch_ext(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    grid_ext[i] = spec.dims[i].extent / spec.dims[i].patch;
    patch_ext[i] = spec.dims[i].patch;
  }
  TokenBatch out;
  out.batch = 1;
  out.tokens = spec.token_count();
  out.patch_size = spec.patch_size();
  out.axes = nd;
  out.values.resize(out.tokens * out.patch_size);
  out.positions.resize(out.tokens * nd);
  out.pad.assign(out.tokens, 0);
  std::vector<std::size_t> g(nd), in(nd);
  for (std::size_t t = 0; t < out.tokens; ++t) {
    unravel(t, grid_ext, g);
    for (std::size_t a = 0; a < nd; ++a) out.positions[t * nd + a] = static_cast<double>(g[a]);
    for (std::size_t e = 0; e < out.patch_size; ++e) {
      unravel(e, patch_ext, in);
      out.values[t * out.patch_size + e] = x[element_offset(spec, g, in)];
    }
  }
  return out;
}

std::vector<double> unpatchify(const TokenBatch& batch, const PatchSpec& spec) {
  validate_patch_spec(spec);
  if (batch.batch != 1 || batch.tokens != spec.token_count() || batch.patch_size != spec.patch_size()) {
    throw DimensionError("unpatchify: batch layout does not match the patch spec");
  }
  const std::size_t nd = spec.dims.size();
  std::vector<std::size_t> grid_ext(nd), patch_ext(nd);
  std::size_t total = 1;
  for (std::size_t i = 0; i < nd; ++i) {
    grid_ext[i] = spec.dims[i].extent / spec.dims[i].patch;
    patch_ext[i] = spec.dims[i].patch;
    total *= spec.dims[i].extent;
  }
  std::vector<double> x(total);
  std::vector<std::size_t> g(nd), in(nd);
  for (std::size_t t = 0; t < batch.tokens; ++t) {
    unravel(t, grid_ext, g);
    for (std::size_t e = 0; e < batch.patch_size; ++e) {
      unravel(e, patch_ext, in);
      x[element_offset(spec, g, in)] = batch.values[t * batch.patch_size + e];
    }
  }
  return x;
}

Tensor project_patches(const TokenBatch& batch, const Tensor& weight, const Tensor* bias) {
  batch.check();
  if (weight.rank() != 2 || weight.dim(0) != batch.patch_size) {
    throw DimensionError("project_patches: weight " + to_string(weight.shape()) +
                         " does not accept patches of " + std::to_string(batch.patch_size) + " values");
  }
  Tensor values(Shape{batch.batch, batch.tokens, batch.patch_size}, batch.values);
  Tensor out = matmul(values, weight);
  if (bias != nullptr) out = add(out, *bias);
  return out;
}

TokenBatch flatten_multivariate(std::span<const Observation> series) {
  TokenBatch out;
  out.batch = 1;
  out.tokens = series.size();
  out.axes = 2;
  out.patch_size = series.empty() ? 0 : series.front().channels.size();
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& o = series[i];
    if (o.channels.size() != out.patch_size) {
      throw std::invalid_argument("flatten_multivariate: observation " + std::to_string(i) + " has " +
                                  std::to_string(o.channels.size()) + " channels, expected " +
                                  std::to_string(out.patch_size));
    }
    out.values.insert(out.values.end(), o.channels.begin(), o.channels.end());
    out.positions.push_back(o.time);
    out.positions.push_back(static_cast<double>(o.variate));
  }
  out.pad.assign(out.tokens, 0);
  return out;
}

TokenBatch pad_batch(std::span<const TokenBatch> sequences) {
  TokenBatch out;
  if (sequences.empty()) return out;
  out.patch_size = sequences.front().patch_size;
  out.axes = sequences.front().axes;
  for (const auto& s : sequences) {
    s.check();
    if (s.patch_size != out.patch_size || s.axes != out.axes) {
      throw DimensionError("pad_batch: sequences disagree on patch size or position axes");
    }
    out.batch += s.batch;
    out.tokens = std::max(out.tokens, s.tokens);
  }
  const bool with_plan = std::all_of(sequences.begin(), sequences.end(),
                                     [](const TokenBatch& s) { return s.mask_plan.has_value(); });
  out.values.assign(out.batch * out.tokens * out.patch_size, 0.0);
  out.positions.assign(out.batch * out.tokens * out.axes, 0.0);
  out.pad.assign(out.batch * out.tokens, 1);
  if (with_plan) {
    out.mask_plan = MaskPlan{sequences.front().mask_plan->ratio, {}, sequences.front().mask_plan->seed};
    out.mask_plan->masked.assign(out.batch * out.tokens, 0);
  }
  std::size_t row = 0;
  for (const auto& s : sequences) {
    for (std::size_t b = 0; b < s.batch; ++b, ++row) {
      for (std::size_t t = 0; t < s.tokens; ++t) {
        const std::size_t src = b * s.tokens + t;
        const std::size_t dst = row * out.tokens + t;
        std::copy_n(s.values.begin() + static_cast<std::ptrdiff_t>(src * s.patch_size), s.patch_size,
                    out.values.begin() + static_cast<std::ptrdiff_t>(dst * out.patch_size));
        std::copy_n(s.positions.begin() + static_cast<std::ptrdiff_t>(src * s.axes), s.axes,
                    out.positions.begin() + static_cast<std::ptrdiff_t>(dst * out.axes));
        out.pad[dst] = s.pad[src];
        if (with_plan) out.mask_plan->masked[dst] = s.mask_plan->masked[src];
      }
    }
  }
  return out;
}

}  // namespace romae
