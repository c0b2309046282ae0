#include "himtm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "himtm/errors.hpp"

namespace himtm {

namespace {

using detail::make_result;
using detail::Node;

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

struct Broadcast {
  Shape out;
  std::size_t n = 0, na = 0, nb = 0;
};

Broadcast plan_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  Broadcast p;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb || is_suffix(sb, sa)) {
    p.out = sa;
  } else if (is_suffix(sa, sb)) {
    p.out = sb;
  } else {
    throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(sa) + " with " +
                     to_string(sb));
  }
  p.n = numel(p.out);
  p.na = a.numel();
  p.nb = b.numel();
  return p;
}

Node& in(Node& self, std::size_t i) { return *self.inputs[i]; }

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* A, const double* B,
             double* C) {
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    const double* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[p];
      const double* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* A, const double* B,
             double* C) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* b = B + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[p] * b[p];
      C[i * n + j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* A, const double* B,
             double* C) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* a = A + p * m;
    const double* b = B + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a[i];
      double* c = C + i * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// Splits a shape around `axis` into (outer, axis length, inner).
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const Broadcast p = plan_broadcast(a, b, "add");
  std::vector<double> out(p.n);
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < p.n; ++i) out[i] = da[i % p.na] + db[i % p.nb];
  return make_result(p.out, std::move(out), {a, b}, [p](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node& x = in(self, k);
      if (!x.requires_grad) continue;
      const std::size_t nx = k == 0 ? p.na : p.nb;
      for (std::size_t i = 0; i < p.n; ++i) x.grad[i % nx] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const Broadcast p = plan_broadcast(a, b, "sub");
  std::vector<double> out(p.n);
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < p.n; ++i) out[i] = da[i % p.na] - db[i % p.nb];
  return make_result(p.out, std::move(out), {a, b}, [p](Node& self) {
    Node& x = in(self, 0);
    Node& y = in(self, 1);
    if (x.requires_grad)
      for (std::size_t i = 0; i < p.n; ++i) x.grad[i % p.na] += self.grad[i];
    if (y.requires_grad)
      for (std::size_t i = 0; i < p.n; ++i) y.grad[i % p.nb] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const Broadcast p = plan_broadcast(a, b, "mul");
  std::vector<double> out(p.n);
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < p.n; ++i) out[i] = da[i % p.na] * db[i % p.nb];
  return make_result(p.out, std::move(out), {a, b}, [p](Node& self) {
    Node& x = in(self, 0);
    Node& y = in(self, 1);
    if (x.requires_grad)
      for (std::size_t i = 0; i < p.n; ++i) x.grad[i % p.na] += self.grad[i] * y.data[i % p.nb];
    if (y.requires_grad)
      for (std::size_t i = 0; i < p.n; ++i) y.grad[i % p.nb] += self.grad[i] * x.data[i % p.na];
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v *= factor;
  return make_result(x.shape(), std::move(out), {x}, [factor](Node& self) {
    Node& a = in(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += factor * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& x, double value) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v += value;
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    Node& a = in(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += self.grad[i];
  });
}

Tensor gelu(const Tensor& x) {
  auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    out[i] = 0.5 * xs[i] * (1.0 + std::erf(xs[i] * std::numbers::sqrt2 / 2.0));
  }
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    Node& a = in(self, 0);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double v = a.data[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      a.grad[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result({}, {total}, {x}, [](Node& self) {
    Node& a = in(self, 0);
    for (double& g : a.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw ShapeError("mean_axis: axis out of range for " + to_string(s));
  if (s[axis] == 0) throw ContractError("mean_axis over an empty axis");
  const AxisSplit sp = split_at(s, axis);
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  auto xs = x.data();
  const double inv = 1.0 / static_cast<double>(sp.len);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += xs[(o * sp.len + l) * sp.inner + i] * inv;
  Shape os = s;
  os[axis] = 1;
  return make_result(os, std::move(out), {x}, [sp, inv](Node& self) {
    Node& a = in(self, 0);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < sp.len; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i)
          a.grad[(o * sp.len + l) * sp.inner + i] += self.grad[o * sp.inner + i] * inv;
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2 || sa[sa.size() - 1] != sb[sb.size() - 2]) {
    throw ShapeError("matmul: incompatible shapes " + to_string(sa) + " and " + to_string(sb));
  }
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa[sa.size() - 1];
  const std::size_t n = sb[sb.size() - 1];
  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);

  enum class Kind { kSharedRight, kSharedLeft, kBatched };
  Kind kind;
  Shape out_shape;
  if (batch_b.empty()) {
    kind = Kind::kSharedRight;
    out_shape = batch_a;
  } else if (batch_a.empty()) {
    kind = Kind::kSharedLeft;
    out_shape = batch_b;
  } else if (batch_a == batch_b) {
    kind = Kind::kBatched;
    out_shape = batch_a;
  } else {
    throw ShapeError("matmul: batch dimensions differ: " + to_string(sa) + " and " +
                     to_string(sb));
  }
  const std::size_t batches = numel(out_shape);
  out_shape.push_back(m);
  out_shape.push_back(n);

  std::vector<double> out(numel(out_shape), 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  switch (kind) {
    case Kind::kSharedRight:
      gemm_nn(batches * m, n, k, A, B, out.data());
      break;
    case Kind::kSharedLeft:
      for (std::size_t t = 0; t < batches; ++t)
        gemm_nn(m, n, k, A, B + t * k * n, out.data() + t * m * n);
      break;
    case Kind::kBatched:
      for (std::size_t t = 0; t < batches; ++t)
        gemm_nn(m, n, k, A + t * m * k, B + t * k * n, out.data() + t * m * n);
      break;
  }

  return make_result(std::move(out_shape), std::move(out), {a, b},
                     [kind, batches, m, n, k](Node& self) {
    Node& x = in(self, 0);
    Node& y = in(self, 1);
    const double* G = self.grad.data();
    const double* A = x.data.data();
    const double* B = y.data.data();
    switch (kind) {
      case Kind::kSharedRight:
        if (x.requires_grad) gemm_nt(batches * m, k, n, G, B, x.grad.data());
        if (y.requires_grad) gemm_tn(k, n, batches * m, A, G, y.grad.data());
        break;
      case Kind::kSharedLeft:
        for (std::size_t t = 0; t < batches; ++t) {
          const double* Gt = G + t * m * n;
          if (x.requires_grad) gemm_nt(m, k, n, Gt, B + t * k * n, x.grad.data());
          if (y.requires_grad) gemm_tn(k, n, m, A, Gt, y.grad.data() + t * k * n);
        }
        break;
      case Kind::kBatched:
        for (std::size_t t = 0; t < batches; ++t) {
          const double* Gt = G + t * m * n;
          if (x.requires_grad) gemm_nt(m, k, n, Gt, B + t * k * n, x.grad.data() + t * m * k);
          if (y.requires_grad) gemm_tn(k, n, m, A + t * m * k, Gt, y.grad.data() + t * k * n);
        }
        break;
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
    Node& a = in(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Shape& s = x.shape();
  const std::size_t r = s.size();
  if (axes.size() != r) throw ShapeError("permute: axis count does not match " + to_string(s));
  std::vector<bool> seen(r, false);
  for (std::size_t ax : axes) {
    if (ax >= r || seen[ax]) throw ShapeError("permute: invalid axis order for " + to_string(s));
    seen[ax] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = s[axes[i]];

  const std::size_t n = x.numel();
  std::vector<std::size_t> source(n);
  std::vector<std::size_t> counter(r, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += counter[i] * in_stride[axes[i]];
    source[flat] = src;
    for (std::size_t i = r; i-- > 0;) {
      if (++counter[i] < os[i]) break;
      counter[i] = 0;
    }
  }
  auto xs = x.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xs[source[i]];
  return make_result(std::move(os), std::move(out), {x},
                     [source = std::move(source)](Node& self) {
    Node& a = in(self, 0);
    for (std::size_t i = 0; i < source.size(); ++i) a.grad[source[i]] += self.grad[i];
  });
}

Tensor transpose_last2(const Tensor& x) {
  const std::size_t r = x.dim();
  if (r < 2) throw ShapeError("transpose_last2 needs rank >= 2, got " + to_string(x.shape()));
  std::vector<std::size_t> axes(r);
  for (std::size_t i = 0; i < r; ++i) axes[i] = i;
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(x, axes);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& s0 = parts.front().shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + to_string(s0));
  Shape os = s0;
  os[axis] = 0;
  std::vector<std::size_t> chunk(parts.size());
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Shape& sp = parts[p].shape();
    bool ok = sp.size() == s0.size();
    for (std::size_t i = 0; ok && i < sp.size(); ++i) ok = i == axis || sp[i] == s0[i];
    if (!ok) {
      throw ShapeError("concat: shape " + to_string(sp) + " incompatible with " + to_string(s0));
    }
    os[axis] += sp[axis];
    chunk[p] = split_at(sp, axis).len * split_at(sp, axis).inner;
  }
  const std::size_t outer = split_at(s0, axis).outer;
  std::vector<double> out;
  out.reserve(numel(os));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t p = 0; p < parts.size(); ++p) {
      auto d = parts[p].data();
      out.insert(out.end(), d.begin() + o * chunk[p], d.begin() + (o + 1) * chunk[p]);
    }
  return make_result(std::move(os), std::move(out), parts, [outer, chunk](Node& self) {
    std::size_t offset = 0;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t p = 0; p < chunk.size(); ++p) {
        Node& a = in(self, p);
        if (a.requires_grad)
          for (std::size_t i = 0; i < chunk[p]; ++i) a.grad[o * chunk[p] + i] += self.grad[offset + i];
        offset += chunk[p];
      }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (axis >= s.size() || begin > end || end > s[axis]) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " invalid for " + to_string(s));
  }
  const AxisSplit sp = split_at(s, axis);
  Shape os = s;
  os[axis] = end - begin;
  const std::size_t width = (end - begin) * sp.inner;
  std::vector<double> out;
  out.reserve(sp.outer * width);
  auto xs = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    auto first = xs.begin() + (o * sp.len + begin) * sp.inner;
    out.insert(out.end(), first, first + width);
  }
  return make_result(std::move(os), std::move(out), {x}, [sp, begin, width](Node& self) {
    Node& a = in(self, 0);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < width; ++i)
        a.grad[(o * sp.len + begin) * sp.inner + i] += self.grad[o * width + i];
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  if (table.dim() != 2) throw ShapeError("gather_rows: table must be 2-D, got " + to_string(table.shape()));
  const std::size_t rows = table.size(0);
  const std::size_t width = table.size(1);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  std::vector<double> out(idx.size() * width);
  auto ts = table.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows) {
      throw ConfigError("gather_rows: index " + std::to_string(idx[i]) + " outside table of " +
                        std::to_string(rows) + " rows");
    }
    std::copy_n(ts.begin() + idx[i] * width, width, out.begin() + i * width);
  }
  return make_result({idx.size(), width}, std::move(out), {table},
                     [idx = std::move(idx), width](Node& self) {
    Node& t = in(self, 0);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < width; ++j) t.grad[idx[i] * width + j] += self.grad[i * width + j];
  });
}

Tensor softmax_rows(const Tensor& x) {
  if (x.dim() == 0 || x.shape().back() == 0) {
    throw ContractError("softmax_rows: last dimension must be >= 1, got " + to_string(x.shape()));
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  auto xs = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xs.data() + r * n;
    double* y = out.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += (y[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= total;
  }
  return make_result(x.shape(), std::move(out), {x}, [n, rows](Node& self) {
    Node& a = in(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* g = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) a.grad[r * n + j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor smooth_l1(const Tensor& pred, const Tensor& target, double threshold) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("smooth_l1: prediction " + to_string(pred.shape()) + " vs target " +
                     to_string(target.shape()));
  }
  if (!(threshold > 0.0)) throw ContractError("smooth_l1: threshold must be positive");
  if (pred.numel() == 0) throw ContractError("smooth_l1: empty operands");
  auto p = pred.data(), t = target.data();
  const std::size_t n = p.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = p[i] - t[i];
    const double ad = std::abs(d);
    total += ad < threshold ? 0.5 * d * d / threshold : ad - 0.5 * threshold;
  }
  return make_result({}, {total / static_cast<double>(n)}, {pred, target},
                     [threshold, n](Node& self) {
    Node& a = in(self, 0);
    Node& b = in(self, 1);
    const double g = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = a.data[i] - b.data[i];
      const double slope = std::abs(d) < threshold ? d / threshold : (d > 0 ? 1.0 : -1.0);
      if (a.requires_grad) a.grad[i] += g * slope;
      if (b.requires_grad) b.grad[i] -= g * slope;
    }
  });
}

Tensor cosine_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dim() == 0) {
    throw ShapeError("cosine_distance: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t width = a.shape().back();
  const std::size_t rows = a.numel() / width;
  if (rows == 0 || width == 0) throw ContractError("cosine_distance: empty operands");
  constexpr double kTiny = 1e-12;
  auto as = a.data(), bs = b.data();
  std::vector<double> na(rows), nb(rows), cosv(rows);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double aa = 0, bb = 0, ab = 0;
    for (std::size_t j = 0; j < width; ++j) {
      const double x = as[r * width + j], y = bs[r * width + j];
      aa += x * x;
      bb += y * y;
      ab += x * y;
    }
    na[r] = std::max(std::sqrt(aa), kTiny);
    nb[r] = std::max(std::sqrt(bb), kTiny);
    cosv[r] = ab / (na[r] * nb[r]);
    total += 1.0 - cosv[r];
  }
  return make_result({}, {total / static_cast<double>(rows)}, {a, b},
                     [rows, width, na, nb, cosv](Node& self) {
    Node& x = in(self, 0);
    Node& y = in(self, 1);
    const double g = -self.grad[0] / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const double inv = 1.0 / (na[r] * nb[r]);
      for (std::size_t j = 0; j < width; ++j) {
        const std::size_t i = r * width + j;
        if (x.requires_grad)
          x.grad[i] += g * (y.data[i] * inv - cosv[r] * x.data[i] / (na[r] * na[r]));
        if (y.requires_grad)
          y.grad[i] += g * (x.data[i] * inv - cosv[r] * y.data[i] / (nb[r] * nb[r]));
      }
    }
  });
}

Tensor stop_gradient(const Tensor& x) {
  return Tensor::from_vector(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
}

Tensor dropout(const Tensor& x, double p, Mode mode, std::mt19937_64* rng) {
  if (mode == Mode::kEval || p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  if (!rng) throw ContractError("dropout in train mode needs an RNG");
  std::bernoulli_distribution keep(1.0 - p);
  const double kept = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = keep(*rng) ? kept : 0.0;
  return mul(x, Tensor::from_vector(x.shape(), std::move(mask)));
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormStats& stats, Mode mode, std::vector<double>* batch_mean,
                  std::vector<double>* batch_var) {
  if (x.dim() == 0) throw ShapeError("batch_norm: input must have a feature axis");
  const std::size_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c || stats.running_mean.numel() != c ||
      stats.running_var.numel() != c) {
    throw ShapeError("batch_norm: feature width " + std::to_string(c) +
                     " does not match gamma " + to_string(gamma.shape()) + " / beta " +
                     to_string(beta.shape()));
  }
  const std::size_t rows = x.numel() / c;
  if (rows == 0) throw ContractError("batch_norm: empty batch");
  auto xs = x.data();
  auto gs = gamma.data();
  auto bs = beta.data();

  std::vector<double> mu(c, 0.0), var(c, 0.0);
  if (mode == Mode::kTrain) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) mu[j] += xs[r * c + j];
    for (double& m : mu) m /= static_cast<double>(rows);
    // One refinement pass: a constant channel then yields its value exactly.
    std::vector<double> resid(c, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) resid[j] += xs[r * c + j] - mu[j];
    for (std::size_t j = 0; j < c; ++j) mu[j] += resid[j] / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const double d = xs[r * c + j] - mu[j];
        var[j] += d * d;
      }
    for (double& v : var) v /= static_cast<double>(rows);
    auto rm = stats.running_mean.mutable_data();
    auto rv = stats.running_var.mutable_data();
    const double unbias = rows > 1 ? static_cast<double>(rows) / static_cast<double>(rows - 1) : 1.0;
    for (std::size_t j = 0; j < c; ++j) {
      rm[j] = (1.0 - stats.momentum) * rm[j] + stats.momentum * mu[j];
      rv[j] = (1.0 - stats.momentum) * rv[j] + stats.momentum * var[j] * unbias;
    }
    if (batch_mean) *batch_mean = mu;
    if (batch_var) *batch_var = var;
  } else {
    auto rm = stats.running_mean.data();
    auto rv = stats.running_var.data();
    mu.assign(rm.begin(), rm.end());
    var.assign(rv.begin(), rv.end());
  }

  std::vector<double> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + stats.eps);
  std::vector<double> xhat(x.numel()), out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t i = r * c + j;
      xhat[i] = (xs[i] - mu[j]) * inv_std[j];
      out[i] = xhat[i] * gs[j] + bs[j];
    }

  const bool train = mode == Mode::kTrain;
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [rows, c, train, inv_std = std::move(inv_std),
                      xhat = std::move(xhat)](Node& self) {
    Node& xn = in(self, 0);
    Node& gn = in(self, 1);
    Node& bn = in(self, 2);
    std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const std::size_t i = r * c + j;
        sum_g[j] += self.grad[i];
        sum_gx[j] += self.grad[i] * xhat[i];
      }
    if (gn.requires_grad)
      for (std::size_t j = 0; j < c; ++j) gn.grad[j] += sum_gx[j];
    if (bn.requires_grad)
      for (std::size_t j = 0; j < c; ++j) bn.grad[j] += sum_g[j];
    if (!xn.requires_grad) return;
    const double inv_rows = 1.0 / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const std::size_t i = r * c + j;
        const double scale_j = gn.data[j] * inv_std[j];
        if (train) {
          xn.grad[i] += scale_j * (self.grad[i] - inv_rows * (sum_g[j] + xhat[i] * sum_gx[j]));
        } else {
          xn.grad[i] += scale_j * self.grad[i];
        }
      }
  });
}

}  // namespace himtm
