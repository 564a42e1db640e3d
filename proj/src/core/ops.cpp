#include "romae/ops.hpp"

#include <algorithm>
#include <cmath>

#include "romae/kernels.hpp"
#include "romae/tape.hpp"

namespace romae {
namespace {

using Impl = detail::TensorImpl;
using kernels::Trans;

// Masked attention logits use a finite sentinel so that exp() underflows to
// exactly zero without producing inf - inf.
constexpr double kMaskedLogit = -1e30;

void record(const Tensor& out, std::vector<Tensor> inputs, GradTape::Backward fn) {
  active_tape()->record(out, std::move(inputs), std::move(fn));
}

bool wants(const std::shared_ptr<Impl>& t) { return !t->grad.empty(); }

std::size_t suffix_repeats(const Tensor& a, const Tensor& b, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool ok = sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!ok) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(sb) + " onto " +
                         to_string(sa));
  }
  return a.size() / std::max<std::size_t>(b.size(), 1);
}

Shape batch_of(const Shape& s) { return Shape(s.begin(), s.end() - 2); }

Shape broadcast_batch(const Shape& a, const Shape& b, const Tensor& ta, const Tensor& tb) {
  const std::size_t n = std::max(a.size(), b.size());
  Shape out(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ea = i < n - a.size() ? 1 : a[i - (n - a.size())];
    const std::size_t eb = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError("matmul: batch extents of " + to_string(ta.shape()) + " and " +
                           to_string(tb.shape()) + " do not broadcast");
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Offset (in matrices) into a possibly broadcast operand for flat batch index.
std::size_t batch_offset(std::size_t flat, const Shape& out_batch, const Shape& src_batch) {
  std::size_t off = 0;
  std::size_t stride = 1;
  const std::size_t lead = out_batch.size() - src_batch.size();
  for (std::size_t i = out_batch.size(); i-- > 0;) {
    const std::size_t idx = flat % out_batch[i];
    flat /= out_batch[i];
    if (i >= lead) {
      const std::size_t e = src_batch[i - lead];
      if (e != 1) off += idx * stride;
      stride *= e;
    }
  }
  return off;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands must have rank >= 2, got " + to_string(a.shape()) +
                         " and " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2);
  const std::size_t n = b.dim(b.rank() - 1);
  if (k != kb) {
    throw DimensionError("matmul: inner extents differ for " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }

  if (b.rank() == 2) {
    // Shared right operand: one large product over all rows of a.
    const std::size_t rows = a.size() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    Tensor out(out_shape, 0.0);
    kernels::gemm(as_matrix(a.data(), rows, k), Trans::No, as_matrix(b.data(), k, n), Trans::No,
                  as_matrix(out.data(), rows, n));
    if (needs_grad({&a, &b})) {
      auto ai = a.impl(), bi = b.impl(), oi = out.impl();
      record(out, {a, b}, [ai, bi, oi, rows, k, n] {
        auto go = as_matrix(std::span<const double>(oi->grad), rows, n);
        if (wants(ai)) {
          kernels::gemm(go, Trans::No, as_matrix(std::span<const double>(bi->data), k, n), Trans::Yes,
                        as_matrix(std::span<double>(ai->grad), rows, k), 1.0, 1.0);
        }
        if (wants(bi)) {
          kernels::gemm(as_matrix(std::span<const double>(ai->data), rows, k), Trans::Yes, go,
                        Trans::No, as_matrix(std::span<double>(bi->grad), k, n), 1.0, 1.0);
        }
      });
    }
    return out;
  }

  const Shape ab = batch_of(a.shape());
  const Shape bb = batch_of(b.shape());
  const Shape ob = broadcast_batch(ab, bb, a, b);
  const std::size_t batches = numel(ob);
  Shape out_shape = ob;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out(out_shape, 0.0);
  for (std::size_t i = 0; i < batches; ++i) {
    const double* pa = a.data().data() + batch_offset(i, ob, ab) * m * k;
    const double* pb = b.data().data() + batch_offset(i, ob, bb) * k * n;
    kernels::gemm({pa, m, k, k}, Trans::No, {pb, k, n, n}, Trans::No,
                  {out.data().data() + i * m * n, m, n, n});
  }
  if (needs_grad({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record(out, {a, b}, [ai, bi, oi, ab, bb, ob, batches, m, k, n] {
      for (std::size_t i = 0; i < batches; ++i) {
        const std::size_t oa = batch_offset(i, ob, ab) * m * k;
        const std::size_t obf = batch_offset(i, ob, bb) * k * n;
        ConstMatrixView go{oi->grad.data() + i * m * n, m, n, n};
        if (wants(ai)) {
          kernels::gemm(go, Trans::No, {bi->data.data() + obf, k, n, n}, Trans::Yes,
                        {ai->grad.data() + oa, m, k, k}, 1.0, 1.0);
        }
        if (wants(bi)) {
          kernels::gemm({ai->data.data() + oa, m, k, k}, Trans::Yes, go, Trans::No,
                        {bi->grad.data() + obf, k, n, n}, 1.0, 1.0);
        }
      }
    });
  }
  return out;
}

namespace {

enum class Elementwise { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, Elementwise kind, const char* name) {
  const std::size_t reps = suffix_repeats(a, b, name);
  const std::size_t nb = b.size();
  Tensor out(a.shape(), 0.0);
  auto pa = a.data();
  auto pb = b.data();
  auto po = out.data();
  for (std::size_t r = 0; r < reps; ++r) {
    const std::size_t base = r * nb;
    for (std::size_t j = 0; j < nb; ++j) {
      const double x = pa[base + j];
      const double y = pb[j];
      po[base + j] = kind == Elementwise::Add ? x + y : kind == Elementwise::Sub ? x - y : x * y;
    }
  }
  if (needs_grad({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record(out, {a, b}, [ai, bi, oi, reps, nb, kind] {
      const auto& g = oi->grad;
      for (std::size_t r = 0; r < reps; ++r) {
        const std::size_t base = r * nb;
        for (std::size_t j = 0; j < nb; ++j) {
          const double gj = g[base + j];
          if (wants(ai)) ai->grad[base + j] += kind == Elementwise::Mul ? gj * bi->data[j] : gj;
          if (wants(bi)) {
            bi->grad[j] += kind == Elementwise::Add   ? gj
                           : kind == Elementwise::Sub ? -gj
                                                      : gj * ai->data[base + j];
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Elementwise::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Elementwise::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Elementwise::Mul, "mul"); }

Tensor scale(const Tensor& a, double factor) {
  Tensor out(a.shape(), 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * factor;
  if (needs_grad({&a})) {
    auto ai = a.impl(), oi = out.impl();
    record(out, {a}, [ai, oi, factor] {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += factor * oi->grad[i];
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (needs_grad({&a})) {
    auto ai = a.impl(), oi = out.impl();
    record(out, {a}, [ai, oi] {
      for (double& g : ai->grad) g += oi->grad[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor silu(const Tensor& x) {
  Tensor out(x.shape(), 0.0);
  kernels::silu(x.data(), out.data());
  if (needs_grad({&x})) {
    auto xi = x.impl(), oi = out.impl();
    record(out, {x}, [xi, oi] {
      for (std::size_t i = 0; i < xi->data.size(); ++i) {
        const double v = xi->data[i];
        const double s = 1.0 / (1.0 + std::exp(-v));
        xi->grad[i] += oi->grad[i] * (s + v * s * (1.0 - s));
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         to_string(x.shape()));
  }
  const std::size_t len = x.dim(axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t outer = x.size() / (len * inner);
  Tensor out = x.clone();
  out.set_requires_grad(false);
  if (inner == 1) {
    kernels::softmax_rows(as_matrix(out.data(), outer, len));
  } else {
    auto p = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double mx = p[base];
        for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, p[base + j * inner]);
        double s = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          p[base + j * inner] = std::exp(p[base + j * inner] - mx);
          s += p[base + j * inner];
        }
        for (std::size_t j = 0; j < len; ++j) p[base + j * inner] /= s;
      }
    }
  }
  if (needs_grad({&x})) {
    auto xi = x.impl(), oi = out.impl();
    record(out, {x}, [xi, oi, outer, len, inner] {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) {
            dot += oi->grad[base + j * inner] * oi->data[base + j * inner];
          }
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t idx = base + j * inner;
            xi->grad[idx] += oi->data[idx] * (oi->grad[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
  const std::size_t width = x.shape().empty() ? 1 : x.shape().back();
  if (gain.size() != width) {
    throw DimensionError("rmsnorm: gain " + to_string(gain.shape()) + " does not match " +
                         to_string(x.shape()));
  }
  const std::size_t rows = x.size() / width;
  Tensor out(x.shape(), 0.0);
  auto inv = std::make_shared<std::vector<double>>(rows);
  kernels::rmsnorm_rows(as_matrix(x.data(), rows, width), gain.data(), eps,
                        as_matrix(out.data(), rows, width), *inv);
  if (needs_grad({&x, &gain})) {
    auto xi = x.impl(), gi = gain.impl(), oi = out.impl();
    record(out, {x, gain}, [xi, gi, oi, inv, rows, width] {
      const double n = static_cast<double>(width);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xi->data.data() + r * width;
        const double* gr = oi->grad.data() + r * width;
        const double s = (*inv)[r];
        if (wants(gi)) {
          for (std::size_t c = 0; c < width; ++c) gi->grad[c] += gr[c] * xr[c] * s;
        }
        if (wants(xi)) {
          // y_c = g_c x_c s,  s = (mean(x^2)+eps)^-1/2
          double dot = 0.0;
          for (std::size_t c = 0; c < width; ++c) dot += gr[c] * gi->data[c] * xr[c];
          const double coef = dot * s * s * s / n;
          double* dx = xi->grad.data() + r * width;
          for (std::size_t c = 0; c < width; ++c) dx[c] += gr[c] * gi->data[c] * s - coef * xr[c];
        }
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (needs_grad({&x})) {
    auto xi = x.impl(), oi = out.impl();
    record(out, {x}, [xi, oi] {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& src, std::span<const std::ptrdiff_t> index, Shape out_shape) {
  const std::size_t width = src.shape().empty() ? 1 : src.shape().back();
  const std::size_t src_rows = width ? src.size() / width : 0;
  if (out_shape.empty() || out_shape.back() != width || numel(out_shape) != index.size() * width) {
    throw DimensionError("gather_rows: output shape " + to_string(out_shape) + " incompatible with " +
                         std::to_string(index.size()) + " rows of width " + std::to_string(width));
  }
  Tensor out(std::move(out_shape), 0.0);
  auto ps = src.data();
  auto po = out.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    const std::ptrdiff_t r = index[i];
    if (r < 0) continue;
    if (static_cast<std::size_t>(r) >= src_rows) {
      throw DimensionError("gather_rows: row " + std::to_string(r) + " out of range for " +
                           to_string(src.shape()));
    }
    std::copy_n(ps.begin() + r * static_cast<std::ptrdiff_t>(width), width,
                po.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  if (needs_grad({&src})) {
    auto si = src.impl(), oi = out.impl();
    std::vector<std::ptrdiff_t> idx(index.begin(), index.end());
    record(out, {src}, [si, oi, idx = std::move(idx), width] {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0) continue;
        double* d = si->grad.data() + static_cast<std::size_t>(idx[i]) * width;
        const double* g = oi->grad.data() + i * width;
        for (std::size_t c = 0; c < width; ++c) d[c] += g[c];
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t width = parts.front().shape().empty() ? 1 : parts.front().shape().back();
  std::size_t total = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape().empty() ? 1 : p.shape().back();
    if (w != width) {
      throw DimensionError("concat_rows: row width mismatch " + to_string(parts.front().shape()) +
                           " vs " + to_string(p.shape()));
    }
    total += p.size();
  }
  Tensor out(Shape{total / width, width}, 0.0);
  std::size_t off = 0;
  bool any = false;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += p.size();
    any = any || needs_grad({&p});
  }
  if (any) {
    std::vector<std::shared_ptr<Impl>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    auto oi = out.impl();
    record(out, parts, [impls, oi] {
      std::size_t o = 0;
      for (const auto& pi : impls) {
        if (wants(pi)) {
          for (std::size_t i = 0; i < pi->data.size(); ++i) pi->grad[i] += oi->grad[o + i];
        }
        o += pi->data.size();
      }
    });
  }
  return out;
}

Tensor rotate_pairs(const Tensor& x, const Tensor& cos, const Tensor& sin,
                    std::span<const unsigned char> active, std::size_t period) {
  const std::size_t width = x.shape().empty() ? 1 : x.shape().back();
  if (period == 0 || period % 2 != 0 || width % period != 0 || active.size() != period / 2) {
    throw DimensionError("rotate_pairs: row width " + std::to_string(width) +
                         " incompatible with rotation period " + std::to_string(period));
  }
  const std::size_t rows = x.size() / width;
  if (cos.size() != rows * (period / 2) || sin.size() != cos.size()) {
    throw DimensionError("rotate_pairs: angle tables " + to_string(cos.shape()) + " do not cover " +
                         std::to_string(rows) + " rows of " + to_string(x.shape()));
  }
  Tensor out(x.shape(), 0.0);
  const std::size_t half = period / 2;
  kernels::rotate_pairs(as_matrix(x.data(), rows, width), as_matrix(cos.data(), rows, half),
                        as_matrix(sin.data(), rows, half), active, period, 1.0,
                        as_matrix(out.data(), rows, width));
  if (needs_grad({&x})) {
    auto xi = x.impl(), oi = out.impl(), ci = cos.impl(), si = sin.impl();
    std::vector<unsigned char> act(active.begin(), active.end());
    record(out, {x}, [xi, oi, ci, si, act = std::move(act), rows, width, half, period] {
      // The transpose of a rotation is the rotation by the negated angle.
      std::vector<double> back(rows * width);
      kernels::rotate_pairs(as_matrix(std::span<const double>(oi->grad), rows, width),
                            as_matrix(std::span<const double>(ci->data), rows, half),
                            as_matrix(std::span<const double>(si->data), rows, half), act, period,
                            -1.0, as_matrix(std::span<double>(back), rows, width));
      for (std::size_t i = 0; i < back.size(); ++i) xi->grad[i] += back[i];
    });
  }
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::span<const unsigned char> key_pad, double dropout, Rng* rng) {
  if (q.rank() != 3 || k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("attention: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) +
                         ", v " + to_string(v.shape()) + " must be equal [batch, tokens, width]");
  }
  const std::size_t batch = q.dim(0), tokens = q.dim(1), width = q.dim(2);
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(width) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  if (!key_pad.empty() && key_pad.size() != batch * tokens) {
    throw DimensionError("attention: pad mask of length " + std::to_string(key_pad.size()) +
                         " does not match " + to_string(q.shape()));
  }
  const std::size_t dh = width / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool drop = rng != nullptr && dropout > 0.0;
  const std::size_t tt = tokens * tokens;
  auto probs = std::make_shared<std::vector<double>>(batch * heads * tt);
  // Post-dropout weights; only kept when dropout is active.
  auto dropped = std::make_shared<std::vector<double>>(drop ? probs->size() : 0);
  if (drop) {
    const double keep = 1.0 - dropout;
    for (double& m : *dropped) m = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
  }
  Tensor out(q.shape(), 0.0);
  const double* pq = q.data().data();
  const double* pk = k.data().data();
  const double* pv = v.data().data();
  double* po = out.data().data();
  const std::size_t pairs = batch * heads;
#pragma omp parallel for schedule(static) if (pairs * tt * dh > (1u << 15))
  for (std::ptrdiff_t bh = 0; bh < static_cast<std::ptrdiff_t>(pairs); ++bh) {
    const std::size_t b = static_cast<std::size_t>(bh) / heads;
    const std::size_t h = static_cast<std::size_t>(bh) % heads;
    const std::size_t off = b * tokens * width + h * dh;
    double* p = probs->data() + static_cast<std::size_t>(bh) * tt;
    kernels::gemm({pq + off, tokens, dh, width}, Trans::No, {pk + off, tokens, dh, width}, Trans::Yes,
                  {p, tokens, tokens, tokens}, scl);
    if (!key_pad.empty()) {
      for (std::size_t i = 0; i < tokens; ++i) {
        for (std::size_t j = 0; j < tokens; ++j) {
          if (key_pad[b * tokens + j]) p[i * tokens + j] = kMaskedLogit;
        }
      }
    }
    kernels::softmax_rows({p, tokens, tokens, tokens});
    const double* w = p;
    std::vector<double> tmp;
    if (drop) {
      tmp.resize(tt);
      const double* m = dropped->data() + static_cast<std::size_t>(bh) * tt;
      for (std::size_t i = 0; i < tt; ++i) tmp[i] = p[i] * m[i];
      w = tmp.data();
    }
    kernels::gemm({w, tokens, tokens, tokens}, Trans::No, {pv + off, tokens, dh, width}, Trans::No,
                  {po + off, tokens, dh, width});
  }
  if (needs_grad({&q, &k, &v})) {
    auto qi = q.impl(), ki = k.impl(), vi = v.impl(), oi = out.impl();
    record(out, {q, k, v},
           [qi, ki, vi, oi, probs, dropped, drop, batch, tokens, width, heads, dh, scl, tt] {
             const std::size_t pairs = batch * heads;
#pragma omp parallel for schedule(static) if (pairs * tt * dh > (1u << 15))
             for (std::ptrdiff_t bh = 0; bh < static_cast<std::ptrdiff_t>(pairs); ++bh) {
               const std::size_t b = static_cast<std::size_t>(bh) / heads;
               const std::size_t h = static_cast<std::size_t>(bh) % heads;
               const std::size_t off = b * tokens * width + h * dh;
               const double* p = probs->data() + static_cast<std::size_t>(bh) * tt;
               const double* m = drop ? dropped->data() + static_cast<std::size_t>(bh) * tt : nullptr;
               ConstMatrixView go{oi->grad.data() + off, tokens, dh, width};
               std::vector<double> w(tt), dw(tt);
               for (std::size_t i = 0; i < tt; ++i) w[i] = m ? p[i] * m[i] : p[i];
               if (wants(vi)) {
                 kernels::gemm({w.data(), tokens, tokens, tokens}, Trans::Yes, go, Trans::No,
                               {vi->grad.data() + off, tokens, dh, width}, 1.0, 1.0);
               }
               if (!wants(qi) && !wants(ki)) continue;
               kernels::gemm(go, Trans::No, {vi->data.data() + off, tokens, dh, width}, Trans::Yes,
                             {dw.data(), tokens, tokens, tokens});
               // dS = P * (dP - rowsum(dP * P)), with dP = dW * mask.
               for (std::size_t i = 0; i < tokens; ++i) {
                 double dot = 0.0;
                 for (std::size_t j = 0; j < tokens; ++j) {
                   double& d = dw[i * tokens + j];
                   if (m) d *= m[i * tokens + j];
                   dot += d * p[i * tokens + j];
                 }
                 for (std::size_t j = 0; j < tokens; ++j) {
                   dw[i * tokens + j] = p[i * tokens + j] * (dw[i * tokens + j] - dot);
                 }
               }
               if (wants(qi)) {
                 kernels::gemm({dw.data(), tokens, tokens, tokens}, Trans::No,
                               {ki->data.data() + off, tokens, dh, width}, Trans::No,
                               {qi->grad.data() + off, tokens, dh, width}, scl, 1.0);
               }
               if (wants(ki)) {
                 kernels::gemm({dw.data(), tokens, tokens, tokens}, Trans::Yes,
                               {qi->data.data() + off, tokens, dh, width}, Trans::No,
                               {ki->grad.data() + off, tokens, dh, width}, scl, 1.0);
               }
             }
           });
  }
  return out;
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ContractError("dropout probability must be < 1");
  auto keep = std::make_shared<std::vector<double>>(x.size());
  const double scale_kept = 1.0 / (1.0 - p);
  for (double& m : *keep) m = rng.bernoulli(1.0 - p) ? scale_kept : 0.0;
  Tensor out(x.shape(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * (*keep)[i];
  if (needs_grad({&x})) {
    auto xi = x.impl(), oi = out.impl();
    record(out, {x}, [xi, oi, keep] {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i] * (*keep)[i];
    });
  }
  return out;
}

Tensor scale_rows(const Tensor& x, std::span<const double> factors) {
  if (x.rank() == 0 || x.dim(0) != factors.size()) {
    throw DimensionError("scale_rows: " + std::to_string(factors.size()) + " factors for " +
                         to_string(x.shape()));
  }
  const std::size_t per = x.size() / factors.size();
  Tensor out(x.shape(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factors[i / per];
  if (needs_grad({&x})) {
    auto xi = x.impl(), oi = out.impl();
    std::vector<double> f(factors.begin(), factors.end());
    record(out, {x}, [xi, oi, f = std::move(f), per] {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i] * f[i / per];
    });
  }
  return out;
}

Tensor masked_mean_rows(const Tensor& x, std::span<const unsigned char> keep) {
  if (x.rank() != 3 || keep.size() != x.dim(0) * x.dim(1)) {
    throw DimensionError("masked_mean_rows: mask of length " + std::to_string(keep.size()) +
                         " does not match " + to_string(x.shape()));
  }
  const std::size_t batch = x.dim(0), tokens = x.dim(1), width = x.dim(2);
  std::vector<double> weight(batch * tokens, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t count = 0;
    for (std::size_t t = 0; t < tokens; ++t) count += keep[b * tokens + t] ? 1 : 0;
    if (count == 0) throw ContractError("masked_mean_rows: sequence with no kept tokens");
    for (std::size_t t = 0; t < tokens; ++t) {
      if (keep[b * tokens + t]) weight[b * tokens + t] = 1.0 / static_cast<double>(count);
    }
  }
  Tensor out(Shape{batch, width}, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < tokens; ++t) {
      const double w = weight[b * tokens + t];
      if (w == 0.0) continue;
      for (std::size_t c = 0; c < width; ++c) out[b * width + c] += w * x[(b * tokens + t) * width + c];
    }
  }
  if (needs_grad({&x})) {
    auto xi = x.impl(), oi = out.impl();
    record(out, {x}, [xi, oi, weight = std::move(weight), tokens, width] {
      for (std::size_t r = 0; r < weight.size(); ++r) {
        if (weight[r] == 0.0) continue;
        const std::size_t b = r / tokens;
        for (std::size_t c = 0; c < width; ++c) xi->grad[r * width + c] += weight[r] * oi->grad[b * width + c];
      }
    });
  }
  return out;
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  if (pred.size() != target.size()) {
    throw DimensionError("mse: prediction " + to_string(pred.shape()) + " vs target " +
                         to_string(target.shape()));
  }
  if (pred.size() == 0) throw ContractError("mse: empty prediction");
  const double n = static_cast<double>(pred.size());
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    s += d * d;
  }
  Tensor out = Tensor::scalar(s / n);
  if (needs_grad({&pred})) {
    auto pi = pred.impl(), ti = target.impl(), oi = out.impl();
    record(out, {pred}, [pi, ti, oi, n] {
      const double g = oi->grad[0] * 2.0 / n;
      for (std::size_t i = 0; i < pi->data.size(); ++i) pi->grad[i] += g * (pi->data[i] - ti->data[i]);
    });
  }
  return out;
}

Tensor soft_cross_entropy(const Tensor& logits, const Tensor& targets) {
  if (logits.rank() != 2 || targets.shape() != logits.shape()) {
    throw DimensionError("soft_cross_entropy: logits " + to_string(logits.shape()) + " vs targets " +
                         to_string(targets.shape()));
  }
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  auto logp = std::make_shared<std::vector<double>>(logits.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = logits.data().data() + r * classes;
    double mx = z[0];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, z[c]);
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) s += std::exp(z[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < classes; ++c) {
      (*logp)[r * classes + c] = z[c] - lse;
      total -= targets[r * classes + c] * (*logp)[r * classes + c];
    }
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(rows));
  if (needs_grad({&logits})) {
    auto li = logits.impl(), ti = targets.impl(), oi = out.impl();
    record(out, {logits}, [li, ti, oi, logp, rows, classes] {
      const double g = oi->grad[0] / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        double tsum = 0.0;
        for (std::size_t c = 0; c < classes; ++c) tsum += ti->data[r * classes + c];
        // d/dz of -sum_c t_c (z_c - lse) = softmax(z) * sum(t) - t
        for (std::size_t c = 0; c < classes; ++c) {
          const std::size_t i = r * classes + c;
          li->grad[i] += g * (std::exp((*logp)[i]) * tsum - ti->data[i]);
        }
      }
    });
  }
  return out;
}

}  // namespace romae
