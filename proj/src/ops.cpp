#include "dhat/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dhat/error.hpp"

namespace dhat::ops {

using detail::make_result;
using detail::TensorImpl;
using Inputs = std::span<const std::shared_ptr<TensorImpl>>;
using Grads = std::span<Real* const>;
using Values = std::span<const Real>;

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
  }
}

// Rows of the last axis: (number of rows, row length).
std::pair<std::size_t, std::size_t> rows_of(const char* op, const Tensor& z) {
  if (z.rank() == 0 || z.shape().back() == 0) {
    throw DimensionError(std::string(op) + ": needs a non-empty last axis");
  }
  const auto c = z.shape().back();
  return {z.numel() / c, c};
}

Shape drop_last(const Shape& s) { return Shape(s.begin(), s.end() - 1); }

void check_labels(const char* op, std::span<const int> labels, std::size_t rows, std::size_t c) {
  if (labels.size() != rows) {
    throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(rows) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ArgumentError(std::string(op) + ": label " + std::to_string(y) + " out of range");
    }
  }
}

// log_softmax of one row into `out`.
void row_log_softmax(const Real* z, std::size_t c, Real* out) {
  Real m = z[0];
  for (std::size_t i = 1; i < c; ++i) m = std::max(m, z[i]);
  Real s = 0;
  for (std::size_t i = 0; i < c; ++i) s += std::exp(z[i] - m);
  const Real lse = m + std::log(s);
  for (std::size_t i = 0; i < c; ++i) out[i] = z[i] - lse;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return make_result("add", a.shape(), std::move(out), {a, b},
                     [](Inputs, Values, Values g, Grads gi) {
                       for (int k = 0; k < 2; ++k) {
                         if (!gi[k]) continue;
                         for (std::size_t i = 0; i < g.size(); ++i) gi[k][i] += g[i];
                       }
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return make_result("sub", a.shape(), std::move(out), {a, b},
                     [](Inputs, Values, Values g, Grads gi) {
                       if (gi[0]) {
                         for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                       }
                       if (gi[1]) {
                         for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] -= g[i];
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return make_result("mul", a.shape(), std::move(out), {a, b},
                     [](Inputs in, Values, Values g, Grads gi) {
                       const auto& x = in[0]->data;
                       const auto& y = in[1]->data;
                       if (gi[0]) {
                         for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * y[i];
                       }
                       if (gi[1]) {
                         for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] += g[i] * x[i];
                       }
                     });
}

Tensor scale(const Tensor& a, Real factor) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * factor;
  return make_result("scale", a.shape(), std::move(out), {a},
                     [factor](Inputs, Values, Values g, Grads gi) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * factor;
                     });
}

Tensor add_scalar(const Tensor& a, Real value) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + value;
  return make_result("add_scalar", a.shape(), std::move(out), {a},
                     [](Inputs, Values, Values g, Grads gi) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                     });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<Real> out(m * n, Real(0));
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * B[p * n + j];
    }
  }
  return make_result("matmul", {m, n}, std::move(out), {a, b},
                     [m, k, n](Inputs in, Values, Values g, Grads gi) {
                       const auto& A = in[0]->data;
                       const auto& B = in[1]->data;
                       if (gi[0]) {
                         for (std::size_t i = 0; i < m; ++i) {
                           for (std::size_t p = 0; p < k; ++p) {
                             Real s = 0;
                             for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B[p * n + j];
                             gi[0][i * k + p] += s;
                           }
                         }
                       }
                       if (gi[1]) {
                         for (std::size_t i = 0; i < m; ++i) {
                           for (std::size_t p = 0; p < k; ++p) {
                             const Real av = A[i * k + p];
                             for (std::size_t j = 0; j < n; ++j) gi[1][p * n + j] += av * g[i * n + j];
                           }
                         }
                       }
                     });
}

Tensor sign(const Tensor& a) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Real v = a.at(i);
    out[i] = v > 0 ? Real(1) : (v < 0 ? Real(-1) : Real(0));
  }
  return make_result("sign", a.shape(), std::move(out), {a}, [](Inputs, Values, Values, Grads) {});
}

Tensor clamp(const Tensor& a, Real lo, Real hi) {
  if (lo > hi) throw ArgumentError("clamp: lo > hi");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(a.at(i), lo, hi);
  return make_result("clamp", a.shape(), std::move(out), {a},
                     [lo, hi](Inputs in, Values, Values g, Grads gi) {
                       const auto& x = in[0]->data;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         if (x[i] >= lo && x[i] <= hi) gi[0][i] += g[i];
                       }
                     });
}

Tensor relu(const Tensor& a) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.at(i), Real(0));
  return make_result("relu", a.shape(), std::move(out), {a},
                     [](Inputs in, Values, Values g, Grads gi) {
                       const auto& x = in[0]->data;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         if (x[i] > 0) gi[0][i] += g[i];
                       }
                     });
}

Tensor log(const Tensor& a) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.at(i));
  return make_result("log", a.shape(), std::move(out), {a},
                     [](Inputs in, Values, Values g, Grads gi) {
                       const auto& x = in[0]->data;
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] / x[i];
                     });
}

Tensor sum(const Tensor& a) {
  Real s = 0;
  for (Real v : a.data()) s += v;
  return make_result("sum", {}, {s}, {a}, [](Inputs in, Values, Values g, Grads gi) {
    const auto n = in[0]->data.size();
    for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean of an empty tensor");
  Real s = 0;
  for (Real v : a.data()) s += v;
  const Real n = static_cast<Real>(a.numel());
  return make_result("mean", {}, {s / n}, {a}, [n](Inputs in, Values, Values g, Grads gi) {
    const Real d = g[0] / n;
    for (std::size_t i = 0; i < in[0]->data.size(); ++i) gi[0][i] += d;
  });
}

Tensor row_sum(const Tensor& a) {
  const auto [rows, c] = rows_of("row_sum", a);
  std::vector<Real> out(rows, Real(0));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < c; ++i) out[r] += a.at(r * c + i);
  }
  return make_result("row_sum", drop_last(a.shape()), std::move(out), {a},
                     [rows = rows, c = c](Inputs, Values, Values g, Grads gi) {
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t i = 0; i < c; ++i) gi[0][r * c + i] += g[r];
                       }
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<Real> out(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {a},
                     [](Inputs, Values, Values g, Grads gi) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                     });
}

Tensor flatten(const Tensor& a) {
  if (a.rank() < 1) throw DimensionError("flatten: needs a batch axis");
  const auto n = a.dim(0);
  return reshape(a, {n, n == 0 ? 0 : a.numel() / n});
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ArgumentError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == ref[d];
    if (!ok) {
      throw DimensionError("concat: incompatible shapes " + shape_str(ref) + " and " +
                           shape_str(s));
    }
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  Shape shape = ref;
  shape[axis] = total;
  std::vector<Real> out(outer * total * inner);
  std::vector<std::size_t> extents;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto e = p.shape()[axis];
    const auto src = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + o * e * inner, e * inner,
                  out.begin() + (o * total + offset) * inner);
    }
    extents.push_back(e);
    offset += e;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result("concat", std::move(shape), std::move(out), std::move(inputs),
                     [outer, inner, total, extents](Inputs, Values, Values g, Grads gi) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < extents.size(); ++k) {
                         const auto e = extents[k];
                         if (gi[k]) {
                           for (std::size_t o = 0; o < outer; ++o) {
                             const Real* src = g.data() + (o * total + off) * inner;
                             Real* dst = gi[k] + o * e * inner;
                             for (std::size_t i = 0; i < e * inner; ++i) dst[i] += src[i];
                           }
                         }
                         off += e;
                       }
                     });
}

Tensor gather(const Tensor& a, std::vector<std::size_t> indices, Shape out_shape) {
  if (shape_numel(out_shape) != indices.size()) {
    throw DimensionError("gather: " + std::to_string(indices.size()) + " indices for shape " +
                         shape_str(out_shape));
  }
  const auto src = a.data();
  std::vector<Real> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= src.size()) throw DimensionError("gather: index out of range");
    out[i] = src[indices[i]];
  }
  return make_result("gather", std::move(out_shape), std::move(out), {a},
                     [idx = std::move(indices)](Inputs, Values, Values g, Grads gi) {
                       for (std::size_t i = 0; i < idx.size(); ++i) gi[0][idx[i]] += g[i];
                     });
}

Tensor pick(const Tensor& a, std::span<const int> columns) {
  require_rank("pick", a, 2);
  const auto n = a.dim(0), c = a.dim(1);
  check_labels("pick", columns, n, c);
  std::vector<std::size_t> idx(n);
  for (std::size_t r = 0; r < n; ++r) idx[r] = r * c + static_cast<std::size_t>(columns[r]);
  return gather(a, std::move(idx), {n});
}

Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_rank("conv2d", input, 4);
  require_rank("conv2d", kernels, 4);
  if (stride == 0) throw ArgumentError("conv2d: stride must be positive");
  const auto N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const auto K = kernels.dim(0), KH = kernels.dim(2), KW = kernels.dim(3);
  if (kernels.dim(1) != C) {
    throw DimensionError("conv2d: kernel channels " + std::to_string(kernels.dim(1)) +
                         " vs input channels " + std::to_string(C));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != K)) {
    throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()));
  }
  if (H + 2 * padding < KH || W + 2 * padding < KW) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  const auto OH = (H + 2 * padding - KH) / stride + 1;
  const auto OW = (W + 2 * padding - KW) / stride + 1;
  const long P = static_cast<long>(padding);
  const long S = static_cast<long>(stride);

  // Valid output columns for kernel column j: 0 <= ow*S + j - P < W.
  auto col_range = [=](std::size_t j, std::size_t extent, std::size_t out_extent) {
    const long off = static_cast<long>(j) - P;
    long lo = off >= 0 ? 0 : (-off + S - 1) / S;
    long hi = (static_cast<long>(extent) - 1 - off);
    hi = hi < 0 ? -1 : hi / S;
    hi = std::min<long>(hi, static_cast<long>(out_extent) - 1);
    return std::pair<long, long>{lo, hi};
  };

  std::vector<Real> out(N * K * OH * OW, Real(0));
  const auto X = input.data();
  const auto Wt = kernels.data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t k = 0; k < K; ++k) {
      Real* o = out.data() + (n * K + k) * OH * OW;
      if (bias.defined()) std::fill(o, o + OH * OW, bias.at(k));
      for (std::size_t c = 0; c < C; ++c) {
        const Real* x = X.data() + (n * C + c) * H * W;
        for (std::size_t i = 0; i < KH; ++i) {
          const auto [oh_lo, oh_hi] = col_range(i, H, OH);
          for (std::size_t j = 0; j < KW; ++j) {
            const Real w = Wt[((k * C + c) * KH + i) * KW + j];
            const auto [ow_lo, ow_hi] = col_range(j, W, OW);
            for (long oh = oh_lo; oh <= oh_hi; ++oh) {
              const Real* xr = x + (oh * S + static_cast<long>(i) - P) * static_cast<long>(W);
              Real* orow = o + oh * static_cast<long>(OW);
              for (long ow = ow_lo; ow <= ow_hi; ++ow) {
                orow[ow] += w * xr[ow * S + static_cast<long>(j) - P];
              }
            }
          }
        }
      }
    }
  }

  std::vector<Tensor> inputs{input, kernels};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(
      "conv2d", {N, K, OH, OW}, std::move(out), std::move(inputs),
      [=](Inputs in, Values, Values g, Grads gi) {
        const auto& X = in[0]->data;
        const auto& Wt = in[1]->data;
        Real* gx = gi[0];
        Real* gw = gi[1];
        Real* gb = gi.size() > 2 ? gi[2] : nullptr;
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t k = 0; k < K; ++k) {
            const Real* go = g.data() + (n * K + k) * OH * OW;
            if (gb) {
              Real s = 0;
              for (std::size_t t = 0; t < OH * OW; ++t) s += go[t];
              gb[k] += s;
            }
            if (!gx && !gw) continue;
            for (std::size_t c = 0; c < C; ++c) {
              const Real* x = X.data() + (n * C + c) * H * W;
              Real* dx = gx ? gx + (n * C + c) * H * W : nullptr;
              for (std::size_t i = 0; i < KH; ++i) {
                const auto [oh_lo, oh_hi] = col_range(i, H, OH);
                for (std::size_t j = 0; j < KW; ++j) {
                  const std::size_t widx = ((k * C + c) * KH + i) * KW + j;
                  const Real w = Wt[widx];
                  const auto [ow_lo, ow_hi] = col_range(j, W, OW);
                  Real acc = 0;
                  for (long oh = oh_lo; oh <= oh_hi; ++oh) {
                    const long row = (oh * S + static_cast<long>(i) - P) * static_cast<long>(W);
                    const Real* gorow = go + oh * static_cast<long>(OW);
                    for (long ow = ow_lo; ow <= ow_hi; ++ow) {
                      const long col = ow * S + static_cast<long>(j) - P;
                      if (dx) dx[row + col] += w * gorow[ow];
                      acc += x[row + col] * gorow[ow];
                    }
                  }
                  if (gw) gw[widx] += acc;
                }
              }
            }
          }
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("linear", x, 2);
  require_rank("linear", weight, 2);
  const auto N = x.dim(0), I = x.dim(1), O = weight.dim(0);
  if (weight.dim(1) != I) {
    throw DimensionError("linear: input width " + std::to_string(I) + " vs weight " +
                         shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != O)) {
    throw DimensionError("linear: bias shape " + shape_str(bias.shape()));
  }
  std::vector<Real> out(N * O);
  const auto X = x.data();
  const auto Wt = weight.data();
  for (std::size_t n = 0; n < N; ++n) {
    const Real* xr = X.data() + n * I;
    for (std::size_t o = 0; o < O; ++o) {
      const Real* wr = Wt.data() + o * I;
      Real s = bias.defined() ? bias.at(o) : Real(0);
      for (std::size_t i = 0; i < I; ++i) s += xr[i] * wr[i];
      out[n * O + o] = s;
    }
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result("linear", {N, O}, std::move(out), std::move(inputs),
                     [N, I, O](Inputs in, Values, Values g, Grads gi) {
                       const auto& X = in[0]->data;
                       const auto& Wt = in[1]->data;
                       for (std::size_t n = 0; n < N; ++n) {
                         const Real* gr = g.data() + n * O;
                         for (std::size_t o = 0; o < O; ++o) {
                           const Real go = gr[o];
                           if (gi[0]) {
                             Real* dx = gi[0] + n * I;
                             const Real* wr = Wt.data() + o * I;
                             for (std::size_t i = 0; i < I; ++i) dx[i] += go * wr[i];
                           }
                           if (gi[1]) {
                             Real* dw = gi[1] + o * I;
                             const Real* xr = X.data() + n * I;
                             for (std::size_t i = 0; i < I; ++i) dw[i] += go * xr[i];
                           }
                           if (gi.size() > 2 && gi[2]) gi[2][o] += go;
                         }
                       }
                     });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, Real momentum, Real eps) {
  if (x.rank() < 2) throw DimensionError("batch_norm: needs [N, C, ...] input");
  const auto N = x.dim(0), C = x.dim(1);
  const auto inner = x.numel() / (N * C);
  for (const Tensor* t : {&gamma, &beta, static_cast<const Tensor*>(&running_mean),
                          static_cast<const Tensor*>(&running_var)}) {
    if (t->rank() != 1 || t->dim(0) != C) {
      throw DimensionError("batch_norm: per-channel tensor of shape " + shape_str(t->shape()) +
                           " for " + std::to_string(C) + " channels");
    }
  }
  if (training && N < 2) throw ArgumentError("batch_norm: training mode needs batch size >= 2");
  const Real m = static_cast<Real>(N * inner);
  const auto X = x.data();

  std::vector<Real> mu(C), inv_std(C);
  if (training) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t c = 0; c < C; ++c) {
      Real s = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const Real* p = X.data() + (n * C + c) * inner;
        for (std::size_t t = 0; t < inner; ++t) s += p[t];
      }
      const Real mean_c = s / m;
      Real v = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const Real* p = X.data() + (n * C + c) * inner;
        for (std::size_t t = 0; t < inner; ++t) v += (p[t] - mean_c) * (p[t] - mean_c);
      }
      const Real var_c = v / m;
      mu[c] = mean_c;
      inv_std[c] = Real(1) / std::sqrt(var_c + eps);
      rm[c] = (Real(1) - momentum) * rm[c] + momentum * mean_c;
      rv[c] = (Real(1) - momentum) * rv[c] + momentum * (v / (m - Real(1)));
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = running_mean.at(c);
      inv_std[c] = Real(1) / std::sqrt(running_var.at(c) + eps);
    }
  }

  std::vector<Real> out(x.numel());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * inner;
      const Real g = gamma.at(c), b = beta.at(c);
      for (std::size_t t = 0; t < inner; ++t) {
        out[base + t] = g * (X[base + t] - mu[c]) * inv_std[c] + b;
      }
    }
  }

  return make_result(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [N, C, inner, m, training, mu = std::move(mu), inv_std = std::move(inv_std)](
          Inputs in, Values, Values g, Grads gi) {
        const auto& X = in[0]->data;
        const auto& G = in[1]->data;
        for (std::size_t c = 0; c < C; ++c) {
          Real sum_g = 0, sum_gx = 0;
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t base = (n * C + c) * inner;
            for (std::size_t t = 0; t < inner; ++t) {
              const Real xhat = (X[base + t] - mu[c]) * inv_std[c];
              sum_g += g[base + t];
              sum_gx += g[base + t] * xhat;
            }
          }
          if (gi[1]) gi[1][c] += sum_gx;
          if (gi[2]) gi[2][c] += sum_g;
          if (!gi[0]) continue;
          const Real k = G[c] * inv_std[c];
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t base = (n * C + c) * inner;
            for (std::size_t t = 0; t < inner; ++t) {
              if (training) {
                const Real xhat = (X[base + t] - mu[c]) * inv_std[c];
                gi[0][base + t] += k * (g[base + t] - sum_g / m - xhat * sum_gx / m);
              } else {
                gi[0][base + t] += k * g[base + t];
              }
            }
          }
        }
      });
}

Tensor avg_pool(const Tensor& x, std::size_t axis, std::size_t window, std::size_t stride) {
  if (axis >= x.rank()) throw DimensionError("avg_pool: axis out of range");
  if (window == 0 || stride == 0) throw ArgumentError("avg_pool: window and stride must be positive");
  const auto E = x.dim(axis);
  if (window > E) {
    throw DimensionError("avg_pool: window " + std::to_string(window) + " exceeds extent " +
                         std::to_string(E));
  }
  const auto OE = (E - window) / stride + 1;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  Shape shape = x.shape();
  shape[axis] = OE;
  std::vector<Real> out(outer * OE * inner, Real(0));
  const auto X = x.data();
  const Real scale_w = Real(1) / static_cast<Real>(window);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t e = 0; e < OE; ++e) {
      Real* dst = out.data() + (o * OE + e) * inner;
      for (std::size_t w = 0; w < window; ++w) {
        const Real* src = X.data() + (o * E + e * stride + w) * inner;
        for (std::size_t t = 0; t < inner; ++t) dst[t] += src[t];
      }
      for (std::size_t t = 0; t < inner; ++t) dst[t] *= scale_w;
    }
  }
  return make_result("avg_pool", std::move(shape), std::move(out), {x},
                     [=](Inputs, Values, Values g, Grads gi) {
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t e = 0; e < OE; ++e) {
                           const Real* src = g.data() + (o * OE + e) * inner;
                           for (std::size_t w = 0; w < window; ++w) {
                             Real* dst = gi[0] + (o * E + e * stride + w) * inner;
                             for (std::size_t t = 0; t < inner; ++t) dst[t] += src[t] * scale_w;
                           }
                         }
                       }
                     });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank("global_avg_pool", x, 4);
  const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<Real> out(N * C);
  for (std::size_t i = 0; i < N * C; ++i) {
    Real s = 0;
    for (std::size_t t = 0; t < HW; ++t) s += x.at(i * HW + t);
    out[i] = s / static_cast<Real>(HW);
  }
  return make_result("global_avg_pool", {N, C}, std::move(out), {x},
                     [N, C, HW](Inputs, Values, Values g, Grads gi) {
                       const Real inv = Real(1) / static_cast<Real>(HW);
                       for (std::size_t i = 0; i < N * C; ++i) {
                         for (std::size_t t = 0; t < HW; ++t) gi[0][i * HW + t] += g[i] * inv;
                       }
                     });
}

Tensor softmax(const Tensor& z) {
  const auto [rows, c] = rows_of("softmax", z);
  std::vector<Real> out(z.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    row_log_softmax(z.data().data() + r * c, c, out.data() + r * c);
    for (std::size_t i = 0; i < c; ++i) out[r * c + i] = std::exp(out[r * c + i]);
  }
  return make_result("softmax", z.shape(), std::move(out), {z},
                     [rows = rows, c = c](Inputs, Values y, Values g, Grads gi) {
                       for (std::size_t r = 0; r < rows; ++r) {
                         Real dot = 0;
                         for (std::size_t i = 0; i < c; ++i) dot += g[r * c + i] * y[r * c + i];
                         for (std::size_t i = 0; i < c; ++i) {
                           gi[0][r * c + i] += y[r * c + i] * (g[r * c + i] - dot);
                         }
                       }
                     });
}

Tensor log_softmax(const Tensor& z) {
  const auto [rows, c] = rows_of("log_softmax", z);
  std::vector<Real> out(z.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    row_log_softmax(z.data().data() + r * c, c, out.data() + r * c);
  }
  return make_result("log_softmax", z.shape(), std::move(out), {z},
                     [rows = rows, c = c](Inputs, Values y, Values g, Grads gi) {
                       for (std::size_t r = 0; r < rows; ++r) {
                         Real s = 0;
                         for (std::size_t i = 0; i < c; ++i) s += g[r * c + i];
                         for (std::size_t i = 0; i < c; ++i) {
                           gi[0][r * c + i] += g[r * c + i] - std::exp(y[r * c + i]) * s;
                         }
                       }
                     });
}

Tensor cross_entropy_per_sample(const Tensor& logits, std::span<const int> labels) {
  const auto [rows, c] = rows_of("cross_entropy", logits);
  check_labels("cross_entropy", labels, rows, c);
  std::vector<Real> lsm(logits.numel());
  std::vector<Real> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    row_log_softmax(logits.data().data() + r * c, c, lsm.data() + r * c);
    out[r] = -lsm[r * c + static_cast<std::size_t>(labels[r])];
  }
  Shape shape = drop_last(logits.shape());
  return make_result("cross_entropy", std::move(shape), std::move(out), {logits},
                     [rows = rows, c = c, lsm = std::move(lsm),
                      y = std::vector<int>(labels.begin(), labels.end())](Inputs, Values, Values g,
                                                                         Grads gi) {
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t i = 0; i < c; ++i) {
                           const Real onehot = static_cast<int>(i) == y[r] ? Real(1) : Real(0);
                           gi[0][r * c + i] += g[r] * (std::exp(lsm[r * c + i]) - onehot);
                         }
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  return mean(cross_entropy_per_sample(logits, labels));
}

Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  require_same_shape("kl_divergence", p, q);
  const auto [rows, c] = rows_of("kl_divergence", p);
  for (const Tensor* t : {&p, &q}) {
    for (std::size_t r = 0; r < rows; ++r) {
      Real s = 0;
      for (std::size_t i = 0; i < c; ++i) {
        const Real v = t->at(r * c + i);
        if (!(v > 0)) throw ArgumentError("kl_divergence: probabilities must be strictly positive");
        s += v;
      }
      if (std::abs(s - Real(1)) > Real(1e-6)) {
        throw ArgumentError("kl_divergence: row sums to " + std::to_string(s) + ", not 1");
      }
    }
  }
  std::vector<Real> out(rows, Real(0));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < c; ++i) {
      const Real pi = p.at(r * c + i), qi = q.at(r * c + i);
      out[r] += pi * (std::log(pi) - std::log(qi));
    }
  }
  return make_result("kl_divergence", drop_last(p.shape()), std::move(out), {p, q},
                     [rows = rows, c = c](Inputs in, Values, Values g, Grads gi) {
                       const auto& P = in[0]->data;
                       const auto& Q = in[1]->data;
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t i = 0; i < c; ++i) {
                           const std::size_t k = r * c + i;
                           if (gi[0]) gi[0][k] += g[r] * (std::log(P[k]) - std::log(Q[k]) + Real(1));
                           if (gi[1]) gi[1][k] -= g[r] * P[k] / Q[k];
                         }
                       }
                     });
}

Tensor kl_divergence_logits(const Tensor& zp, const Tensor& zq) {
  require_same_shape("kl_divergence_logits", zp, zq);
  const auto [rows, c] = rows_of("kl_divergence_logits", zp);
  std::vector<Real> lp(zp.numel()), lq(zq.numel());
  std::vector<Real> out(rows, Real(0));
  for (std::size_t r = 0; r < rows; ++r) {
    row_log_softmax(zp.data().data() + r * c, c, lp.data() + r * c);
    row_log_softmax(zq.data().data() + r * c, c, lq.data() + r * c);
    for (std::size_t i = 0; i < c; ++i) {
      const std::size_t k = r * c + i;
      out[r] += std::exp(lp[k]) * (lp[k] - lq[k]);
    }
  }
  Shape shape = drop_last(zp.shape());
  return make_result(
      "kl_divergence_logits", std::move(shape), std::move(out), {zp, zq},
      [rows = rows, c = c, lp = std::move(lp), lq = std::move(lq)](Inputs, Values kl, Values g,
                                                                   Grads gi) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t i = 0; i < c; ++i) {
            const std::size_t k = r * c + i;
            const Real p = std::exp(lp[k]);
            if (gi[0]) gi[0][k] += g[r] * p * (lp[k] - lq[k] - kl[r]);
            if (gi[1]) gi[1][k] += g[r] * (std::exp(lq[k]) - p);
          }
        }
      });
}

}  // namespace dhat::ops
