#include "m2s/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "m2s/errors.hpp"

namespace m2s::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

constexpr double kSeluScale = 1.0507009873554804934193349852946;
constexpr double kSeluAlpha = 1.6732632423543772848170429916717;

// Upper bound on im2col buffer entries per chunk.
constexpr std::int64_t kColBudget = 1 << 21;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const Tensor& a, int rank, const char* op) {
  if (a.ndim() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
  std::vector<double> out(a.vec().size());
  const auto& x = a.vec();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return Tensor::make_result(a.shape(), std::move(out), {&a},
                             [a, df](const std::vector<double>& g) mutable {
                               auto ga = a.mutable_grad();
                               const auto& x = a.vec();
                               for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * df(x[i]);
                             });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.vec());
  const auto& y = b.vec();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  return Tensor::make_result(a.shape(), std::move(out), {&a, &b},
                             [a, b](const std::vector<double>& g) mutable {
                               for (const Tensor* t : {&a, &b}) {
                                 if (!t->requires_grad()) continue;
                                 auto gt = t->mutable_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
                               }
                             });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.vec());
  const auto& y = b.vec();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  return Tensor::make_result(a.shape(), std::move(out), {&a, &b},
                             [a, b](const std::vector<double>& g) mutable {
                               if (a.requires_grad()) {
                                 auto ga = a.mutable_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                               }
                               if (b.requires_grad()) {
                                 auto gb = b.mutable_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                               }
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.vec());
  const auto& y = b.vec();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  return Tensor::make_result(a.shape(), std::move(out), {&a, &b},
                             [a, b](const std::vector<double>& g) mutable {
                               if (a.requires_grad()) {
                                 auto ga = a.mutable_grad();
                                 const auto& y = b.vec();
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
                               }
                               if (b.requires_grad()) {
                                 auto gb = b.mutable_grad();
                                 const auto& x = a.vec();
                                 for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
                               }
                             });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double) { return 1.0; });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, [](double x) { return std::fabs(x); },
      [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor selu(const Tensor& a) {
  return unary(
      a,
      [](double x) { return x > 0.0 ? kSeluScale * x : kSeluScale * kSeluAlpha * std::expm1(x); },
      [](double x) { return x > 0.0 ? kSeluScale : kSeluScale * kSeluAlpha * std::exp(x); });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](double x) { return std::tanh(x); },
      [](double x) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      });
}

Tensor sigmoid(const Tensor& a) {
  auto sig = [](double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  };
  return unary(a, sig, [sig](double x) {
    const double s = sig(x);
    return s * (1.0 - s);
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.vec()) s += v;
  return Tensor::make_result(Shape{}, {s}, {&a}, [a](const std::vector<double>& g) mutable {
    auto ga = a.mutable_grad();
    for (double& v : ga) v += g[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return Tensor::make_result(std::move(shape), a.vec(), {&a},
                             [a](const std::vector<double>& g) mutable {
                               auto ga = a.mutable_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                             });
}

Tensor transpose_last2(const Tensor& a) {
  if (a.ndim() < 2) throw ShapeError("transpose_last2 needs rank >= 2, got " + shape_str(a.shape()));
  const std::int64_t n = a.size(-2), m = a.size(-1);
  const std::int64_t batch = a.numel() / std::max<std::int64_t>(1, n * m);
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  std::vector<double> out(a.vec().size());
  for (std::int64_t b = 0; b < batch; ++b) {
    MatMap(out.data() + b * n * m, m, n) = ConstMatMap(a.vec().data() + b * n * m, n, m).transpose();
  }
  return Tensor::make_result(std::move(shape), std::move(out), {&a},
                             [a, batch, n, m](const std::vector<double>& g) mutable {
                               auto ga = a.mutable_grad();
                               for (std::int64_t b = 0; b < batch; ++b) {
                                 MatMap(ga.data() + b * n * m, n, m) +=
                                     ConstMatMap(g.data() + b * n * m, m, n).transpose();
                               }
                             });
}

Tensor select_channel(const Tensor& a, std::int64_t channel) {
  if (a.ndim() < 2) throw ShapeError("select_channel needs rank >= 2, got " + shape_str(a.shape()));
  const std::int64_t batch = a.size(0), channels = a.size(1);
  if (channel < 0 || channel >= channels) {
    throw ShapeError("select_channel: channel " + std::to_string(channel) + " of " + shape_str(a.shape()));
  }
  const std::int64_t inner = a.numel() / std::max<std::int64_t>(1, batch * channels);
  Shape shape = a.shape();
  shape[1] = 1;
  std::vector<double> out(static_cast<std::size_t>(batch * inner));
  for (std::int64_t b = 0; b < batch; ++b) {
    std::copy_n(a.vec().begin() + (b * channels + channel) * inner, inner, out.begin() + b * inner);
  }
  return Tensor::make_result(std::move(shape), std::move(out), {&a},
                             [a, batch, channels, channel, inner](const std::vector<double>& g) mutable {
                               auto ga = a.mutable_grad();
                               for (std::int64_t b = 0; b < batch; ++b) {
                                 for (std::int64_t i = 0; i < inner; ++i) {
                                   ga[(b * channels + channel) * inner + i] += g[b * inner + i];
                                 }
                               }
                             });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const std::int64_t B = a.size(0), N = a.size(1), K = a.size(2), M = b.size(2);
  if (b.size(0) != B || b.size(1) != K) {
    throw ShapeError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(B * N * M));
  for (std::int64_t i = 0; i < B; ++i) {
    MatMap(out.data() + i * N * M, N, M).noalias() =
        ConstMatMap(a.vec().data() + i * N * K, N, K) * ConstMatMap(b.vec().data() + i * K * M, K, M);
  }
  return Tensor::make_result(
      Shape{B, N, M}, std::move(out), {&a, &b}, [a, b, B, N, K, M](const std::vector<double>& g) mutable {
        for (std::int64_t i = 0; i < B; ++i) {
          ConstMatMap gm(g.data() + i * N * M, N, M);
          if (a.requires_grad()) {
            MatMap(a.mutable_grad().data() + i * N * K, N, K).noalias() +=
                gm * ConstMatMap(b.vec().data() + i * K * M, K, M).transpose();
          }
          if (b.requires_grad()) {
            MatMap(b.mutable_grad().data() + i * K * M, K, M).noalias() +=
                ConstMatMap(a.vec().data() + i * N * K, N, K).transpose() * gm;
          }
        }
      });
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "bmm_nt");
  require_rank(b, 3, "bmm_nt");
  const std::int64_t B = a.size(0), N = a.size(1), K = a.size(2), M = b.size(1);
  if (b.size(0) != B || b.size(2) != K) {
    throw ShapeError("bmm_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(static_cast<std::size_t>(B * N * M));
  for (std::int64_t i = 0; i < B; ++i) {
    MatMap(out.data() + i * N * M, N, M).noalias() =
        ConstMatMap(a.vec().data() + i * N * K, N, K) *
        ConstMatMap(b.vec().data() + i * M * K, M, K).transpose();
  }
  return Tensor::make_result(
      Shape{B, N, M}, std::move(out), {&a, &b}, [a, b, B, N, K, M](const std::vector<double>& g) mutable {
        for (std::int64_t i = 0; i < B; ++i) {
          ConstMatMap gm(g.data() + i * N * M, N, M);
          if (a.requires_grad()) {
            MatMap(a.mutable_grad().data() + i * N * K, N, K).noalias() +=
                gm * ConstMatMap(b.vec().data() + i * M * K, M, K);
          }
          if (b.requires_grad()) {
            MatMap(b.mutable_grad().data() + i * M * K, M, K).noalias() +=
                gm.transpose() * ConstMatMap(a.vec().data() + i * N * K, N, K);
          }
        }
      });
}

Tensor softmax_last(const Tensor& a) {
  if (a.ndim() < 1) throw ShapeError("softmax_last on scalar");
  const std::int64_t n = a.size(-1);
  const std::int64_t rows = n ? a.numel() / n : 0;
  std::vector<double> out(a.vec().size());
  const auto& x = a.vec();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * n;
    double* yr = out.data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::int64_t j = 0; j < n; ++j) z += (yr[j] = std::exp(xr[j] - mx));
    for (std::int64_t j = 0; j < n; ++j) yr[j] /= z;
  }
  std::vector<double> y = out;
  return Tensor::make_result(a.shape(), std::move(out), {&a},
                             [a, y = std::move(y), rows, n](const std::vector<double>& g) mutable {
                               auto ga = a.mutable_grad();
                               for (std::int64_t r = 0; r < rows; ++r) {
                                 double dot = 0.0;
                                 for (std::int64_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
                                 for (std::int64_t j = 0; j < n; ++j) {
                                   ga[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
                                 }
                               }
                             });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(weight, 2, "linear weight");
  const std::int64_t out_f = weight.size(0), in_f = weight.size(1);
  if (x.ndim() < 1 || x.size(-1) != in_f) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.ndim() != 1 || bias.size(0) != out_f)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " for " + std::to_string(out_f) + " outputs");
  }
  const std::int64_t rows = x.numel() / in_f;
  Shape shape = x.shape();
  shape.back() = out_f;
  std::vector<double> out(static_cast<std::size_t>(rows * out_f));
  MatMap ym(out.data(), rows, out_f);
  ym.noalias() = ConstMatMap(x.vec().data(), rows, in_f) * ConstMatMap(weight.vec().data(), out_f, in_f).transpose();
  if (bias.defined()) {
    ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.vec().data(), out_f);
  }
  return Tensor::make_result(
      std::move(shape), std::move(out), {&x, &weight, &bias},
      [x, weight, bias, rows, in_f, out_f](const std::vector<double>& g) mutable {
        ConstMatMap gm(g.data(), rows, out_f);
        if (x.requires_grad()) {
          MatMap(x.mutable_grad().data(), rows, in_f).noalias() +=
              gm * ConstMatMap(weight.vec().data(), out_f, in_f);
        }
        if (weight.requires_grad()) {
          MatMap(weight.mutable_grad().data(), out_f, in_f).noalias() +=
              gm.transpose() * ConstMatMap(x.vec().data(), rows, in_f);
        }
        if (bias.defined() && bias.requires_grad()) {
          Eigen::Map<Eigen::RowVectorXd>(bias.mutable_grad().data(), out_f) += gm.colwise().sum();
        }
      });
}

Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv1dOptions opt) {
  require_rank(x, 3, "conv1d input");
  require_rank(weight, 3, "conv1d weight");
  const std::int64_t B = x.size(0), Ci = x.size(1), T = x.size(2);
  const std::int64_t Co = weight.size(0), K = weight.size(2);
  if (weight.size(1) != Ci) {
    throw ShapeError("conv1d: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.ndim() != 1 || bias.size(0) != Co)) {
    throw ShapeError("conv1d: bias " + shape_str(bias.shape()));
  }
  const std::int64_t dil = opt.dilation, pl = opt.pad_left;
  const std::int64_t To = T + opt.pad_left + opt.pad_right - dil * (K - 1);
  if (To < 1) {
    throw ShapeError("conv1d: input length " + std::to_string(T) + " too short for kernel " +
                     std::to_string(K) + " (dilation " + std::to_string(dil) + ")");
  }
  const std::int64_t rows = Ci * K;
  const std::int64_t chunk = std::max<std::int64_t>(1, std::min(To, kColBudget / rows));

  // col[(ci, k), j] = x[ci, t0 + j + k * dil - pl], zero outside [0, T).
  auto fill_col = [=](const double* xb, std::int64_t t0, std::int64_t len, double* col) {
    for (std::int64_t ci = 0; ci < Ci; ++ci) {
      for (std::int64_t k = 0; k < K; ++k) {
        double* row = col + (ci * K + k) * len;
        const std::int64_t s0 = t0 + k * dil - pl;
        const std::int64_t lo = std::clamp<std::int64_t>(-s0, 0, len);
        const std::int64_t hi = std::clamp<std::int64_t>(T - s0, 0, len);
        std::fill(row, row + lo, 0.0);
        if (hi > lo) std::copy(xb + ci * T + s0 + lo, xb + ci * T + s0 + hi, row + lo);
        std::fill(row + std::max(lo, hi), row + len, 0.0);
      }
    }
  };

  std::vector<double> out(static_cast<std::size_t>(B * Co * To));
  std::vector<double> col(static_cast<std::size_t>(rows * chunk));
  ConstMatMap wm(weight.vec().data(), Co, rows);
  for (std::int64_t b = 0; b < B; ++b) {
    const double* xb = x.vec().data() + b * Ci * T;
    double* yb = out.data() + b * Co * To;
    for (std::int64_t t0 = 0; t0 < To; t0 += chunk) {
      const std::int64_t len = std::min(chunk, To - t0);
      fill_col(xb, t0, len, col.data());
      StridedMap(yb + t0, Co, len, Eigen::OuterStride<>(To)).noalias() =
          wm * ConstMatMap(col.data(), rows, len);
    }
    if (bias.defined()) {
      for (std::int64_t co = 0; co < Co; ++co) {
        const double bv = bias.vec()[static_cast<std::size_t>(co)];
        for (std::int64_t t = 0; t < To; ++t) yb[co * To + t] += bv;
      }
    }
  }

  return Tensor::make_result(
      Shape{B, Co, To}, std::move(out), {&x, &weight, &bias},
      [=](const std::vector<double>& g) mutable {
        std::vector<double> col(static_cast<std::size_t>(rows * chunk));
        std::vector<double> dcol(static_cast<std::size_t>(rows * chunk));
        ConstMatMap wm(weight.vec().data(), Co, rows);
        for (std::int64_t b = 0; b < B; ++b) {
          const double* xb = x.vec().data() + b * Ci * T;
          const double* gb = g.data() + b * Co * To;
          for (std::int64_t t0 = 0; t0 < To; t0 += chunk) {
            const std::int64_t len = std::min(chunk, To - t0);
            ConstStridedMap gm(gb + t0, Co, len, Eigen::OuterStride<>(To));
            if (weight.requires_grad()) {
              fill_col(xb, t0, len, col.data());
              MatMap(weight.mutable_grad().data(), Co, rows).noalias() +=
                  gm * ConstMatMap(col.data(), rows, len).transpose();
            }
            if (x.requires_grad()) {
              MatMap dm(dcol.data(), rows, len);
              dm.noalias() = wm.transpose() * gm;
              double* dx = x.mutable_grad().data() + b * Ci * T;
              for (std::int64_t ci = 0; ci < Ci; ++ci) {
                for (std::int64_t k = 0; k < K; ++k) {
                  const double* row = dcol.data() + (ci * K + k) * len;
                  const std::int64_t s0 = t0 + k * dil - pl;
                  const std::int64_t lo = std::clamp<std::int64_t>(-s0, 0, len);
                  const std::int64_t hi = std::clamp<std::int64_t>(T - s0, 0, len);
                  for (std::int64_t j = lo; j < hi; ++j) dx[ci * T + s0 + j] += row[j];
                }
              }
            }
          }
          if (bias.defined() && bias.requires_grad()) {
            auto gbias = bias.mutable_grad();
            for (std::int64_t co = 0; co < Co; ++co) {
              double s = 0.0;
              for (std::int64_t t = 0; t < To; ++t) s += gb[co * To + t];
              gbias[static_cast<std::size_t>(co)] += s;
            }
          }
        }
      });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opt) {
  require_rank(x, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  const std::int64_t B = x.size(0), Ci = x.size(1), H = x.size(2), W = x.size(3);
  const std::int64_t Co = weight.size(0), KH = weight.size(2), KW = weight.size(3);
  if (weight.size(1) != Ci) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.ndim() != 1 || bias.size(0) != Co)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()));
  }
  const std::int64_t pt = opt.pad_top, pl = opt.pad_left;
  const std::int64_t Ho = H + opt.pad_top + opt.pad_bottom - KH + 1;
  const std::int64_t Wo = W + opt.pad_left + opt.pad_right - KW + 1;
  if (Ho < 1 || Wo < 1) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " too small for kernel " +
                     shape_str(weight.shape()));
  }
  const std::int64_t rows = Ci * KH * KW;
  const std::int64_t rows_per_chunk =
      std::clamp<std::int64_t>(kColBudget / std::max<std::int64_t>(1, rows * Wo), 1, Ho);

  // col[(ci, kh, kw), (r, wo)] = x[ci, h0 + r + kh - pt, wo + kw - pl]
  auto fill_col = [=](const double* xb, std::int64_t h0, std::int64_t nr, double* col) {
    const std::int64_t len = nr * Wo;
    for (std::int64_t ci = 0; ci < Ci; ++ci) {
      for (std::int64_t kh = 0; kh < KH; ++kh) {
        for (std::int64_t kw = 0; kw < KW; ++kw) {
          double* row = col + ((ci * KH + kh) * KW + kw) * len;
          const std::int64_t s0 = kw - pl;
          const std::int64_t lo = std::clamp<std::int64_t>(-s0, 0, Wo);
          const std::int64_t hi = std::clamp<std::int64_t>(W - s0, 0, Wo);
          for (std::int64_t r = 0; r < nr; ++r) {
            double* dst = row + r * Wo;
            const std::int64_t hi_row = h0 + r + kh - pt;
            if (hi_row < 0 || hi_row >= H || hi <= lo) {
              std::fill(dst, dst + Wo, 0.0);
              continue;
            }
            const double* src = xb + (ci * H + hi_row) * W + s0;
            std::fill(dst, dst + lo, 0.0);
            std::copy(src + lo, src + hi, dst + lo);
            std::fill(dst + hi, dst + Wo, 0.0);
          }
        }
      }
    }
  };

  std::vector<double> out(static_cast<std::size_t>(B * Co * Ho * Wo));
  std::vector<double> col(static_cast<std::size_t>(rows * rows_per_chunk * Wo));
  ConstMatMap wm(weight.vec().data(), Co, rows);
  for (std::int64_t b = 0; b < B; ++b) {
    const double* xb = x.vec().data() + b * Ci * H * W;
    double* yb = out.data() + b * Co * Ho * Wo;
    for (std::int64_t h0 = 0; h0 < Ho; h0 += rows_per_chunk) {
      const std::int64_t nr = std::min(rows_per_chunk, Ho - h0);
      fill_col(xb, h0, nr, col.data());
      StridedMap(yb + h0 * Wo, Co, nr * Wo, Eigen::OuterStride<>(Ho * Wo)).noalias() =
          wm * ConstMatMap(col.data(), rows, nr * Wo);
    }
    if (bias.defined()) {
      for (std::int64_t co = 0; co < Co; ++co) {
        const double bv = bias.vec()[static_cast<std::size_t>(co)];
        double* p = yb + co * Ho * Wo;
        for (std::int64_t i = 0; i < Ho * Wo; ++i) p[i] += bv;
      }
    }
  }

  return Tensor::make_result(
      Shape{B, Co, Ho, Wo}, std::move(out), {&x, &weight, &bias},
      [=](const std::vector<double>& g) mutable {
        std::vector<double> col(static_cast<std::size_t>(rows * rows_per_chunk * Wo));
        std::vector<double> dcol(col.size());
        ConstMatMap wm(weight.vec().data(), Co, rows);
        for (std::int64_t b = 0; b < B; ++b) {
          const double* xb = x.vec().data() + b * Ci * H * W;
          const double* gb = g.data() + b * Co * Ho * Wo;
          for (std::int64_t h0 = 0; h0 < Ho; h0 += rows_per_chunk) {
            const std::int64_t nr = std::min(rows_per_chunk, Ho - h0);
            const std::int64_t len = nr * Wo;
            ConstStridedMap gm(gb + h0 * Wo, Co, len, Eigen::OuterStride<>(Ho * Wo));
            if (weight.requires_grad()) {
              fill_col(xb, h0, nr, col.data());
              MatMap(weight.mutable_grad().data(), Co, rows).noalias() +=
                  gm * ConstMatMap(col.data(), rows, len).transpose();
            }
            if (x.requires_grad()) {
              MatMap dm(dcol.data(), rows, len);
              dm.noalias() = wm.transpose() * gm;
              double* dx = x.mutable_grad().data() + b * Ci * H * W;
              for (std::int64_t ci = 0; ci < Ci; ++ci) {
                for (std::int64_t kh = 0; kh < KH; ++kh) {
                  for (std::int64_t kw = 0; kw < KW; ++kw) {
                    const double* row = dcol.data() + ((ci * KH + kh) * KW + kw) * len;
                    const std::int64_t s0 = kw - pl;
                    const std::int64_t lo = std::clamp<std::int64_t>(-s0, 0, Wo);
                    const std::int64_t hi = std::clamp<std::int64_t>(W - s0, 0, Wo);
                    for (std::int64_t r = 0; r < nr; ++r) {
                      const std::int64_t hi_row = h0 + r + kh - pt;
                      if (hi_row < 0 || hi_row >= H) continue;
                      double* dst = dx + (ci * H + hi_row) * W + s0;
                      const double* src = row + r * Wo;
                      for (std::int64_t j = lo; j < hi; ++j) dst[j] += src[j];
                    }
                  }
                }
              }
            }
          }
          if (bias.defined() && bias.requires_grad()) {
            auto gbias = bias.mutable_grad();
            for (std::int64_t co = 0; co < Co; ++co) {
              double s = 0.0;
              const double* p = gb + co * Ho * Wo;
              for (std::int64_t i = 0; i < Ho * Wo; ++i) s += p[i];
              gbias[static_cast<std::size_t>(co)] += s;
            }
          }
        }
      });
}

Tensor max_pool2d(const Tensor& x, int kernel_h, int kernel_w) {
  require_rank(x, 4, "max_pool2d");
  const std::int64_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const std::int64_t Ho = H / kernel_h, Wo = W / kernel_w;
  if (Ho < 1 || Wo < 1) {
    throw ShapeError("max_pool2d: input " + shape_str(x.shape()) + " smaller than window (" +
                     std::to_string(kernel_h) + "," + std::to_string(kernel_w) + ")");
  }
  std::vector<double> out(static_cast<std::size_t>(B * C * Ho * Wo));
  std::vector<std::int64_t> arg(out.size());
  const auto& xv = x.vec();
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const std::int64_t base = bc * H * W;
    for (std::int64_t i = 0; i < Ho; ++i) {
      for (std::int64_t j = 0; j < Wo; ++j) {
        std::int64_t best = base + (i * kernel_h) * W + j * kernel_w;
        for (std::int64_t a = 0; a < kernel_h; ++a) {
          const std::int64_t rowbase = base + (i * kernel_h + a) * W + j * kernel_w;
          for (std::int64_t c = 0; c < kernel_w; ++c) {
            if (xv[static_cast<std::size_t>(rowbase + c)] > xv[static_cast<std::size_t>(best)]) best = rowbase + c;
          }
        }
        const std::size_t o = static_cast<std::size_t>((bc * Ho + i) * Wo + j);
        out[o] = xv[static_cast<std::size_t>(best)];
        arg[o] = best;
      }
    }
  }
  return Tensor::make_result(Shape{B, C, Ho, Wo}, std::move(out), {&x},
                             [x, arg = std::move(arg)](const std::vector<double>& g) mutable {
                               auto gx = x.mutable_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) gx[static_cast<std::size_t>(arg[i])] += g[i];
                             });
}

Tensor batch_norm(const Tensor& x, int channel_axis, BatchNormState& st, bool training) {
  const int nd = x.ndim();
  const int ax = channel_axis < 0 ? channel_axis + nd : channel_axis;
  if (ax < 0 || ax >= nd) throw ShapeError("batch_norm: bad channel axis for " + shape_str(x.shape()));
  const std::int64_t C = x.size(ax);
  if (st.gamma.numel() != C || st.beta.numel() != C ||
      static_cast<std::int64_t>(st.running_mean.size()) != C ||
      static_cast<std::int64_t>(st.running_var.size()) != C) {
    throw ShapeError("batch_norm: " + std::to_string(C) + " channels in " + shape_str(x.shape()) +
                     " but state holds " + std::to_string(st.gamma.numel()));
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= x.size(i);
  for (int i = ax + 1; i < nd; ++i) inner *= x.size(i);
  const std::int64_t count = outer * inner;
  if (count == 0) throw ShapeError("batch_norm on empty tensor");

  const auto& xv = x.vec();
  std::vector<double> mean_c(static_cast<std::size_t>(C)), inv_std(static_cast<std::size_t>(C));
  for (std::int64_t c = 0; c < C; ++c) {
    if (training) {
      double s = 0.0;
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) s += xv[static_cast<std::size_t>((o * C + c) * inner + i)];
      const double mu = s / static_cast<double>(count);
      double v = 0.0;
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
          const double d = xv[static_cast<std::size_t>((o * C + c) * inner + i)] - mu;
          v += d * d;
        }
      const double var = v / static_cast<double>(count);
      mean_c[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + st.eps);
      const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : var;
      st.running_mean[c] = (1.0 - st.momentum) * st.running_mean[c] + st.momentum * mu;
      st.running_var[c] = (1.0 - st.momentum) * st.running_var[c] + st.momentum * unbiased;
    } else {
      mean_c[c] = st.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(st.running_var[c] + st.eps);
    }
  }

  std::vector<double> xhat(xv.size()), out(xv.size());
  const auto& gv = st.gamma.vec();
  const auto& bv = st.beta.vec();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::size_t k = static_cast<std::size_t>((o * C + c) * inner + i);
        xhat[k] = (xv[k] - mean_c[c]) * inv_std[c];
        out[k] = gv[c] * xhat[k] + bv[c];
      }

  Tensor gamma = st.gamma, beta = st.beta;
  return Tensor::make_result(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), outer, C, inner, count,
       training](const std::vector<double>& g) mutable {
        std::vector<double> sum_g(static_cast<std::size_t>(C), 0.0), sum_gx(static_cast<std::size_t>(C), 0.0);
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t i = 0; i < inner; ++i) {
              const std::size_t k = static_cast<std::size_t>((o * C + c) * inner + i);
              sum_g[c] += g[k];
              sum_gx[c] += g[k] * xhat[k];
            }
        if (gamma.requires_grad()) {
          auto gg = gamma.mutable_grad();
          for (std::int64_t c = 0; c < C; ++c) gg[c] += sum_gx[c];
        }
        if (beta.requires_grad()) {
          auto gb = beta.mutable_grad();
          for (std::int64_t c = 0; c < C; ++c) gb[c] += sum_g[c];
        }
        if (!x.requires_grad()) return;
        auto gx = x.mutable_grad();
        const auto& gv = gamma.vec();
        const double n = static_cast<double>(count);
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t i = 0; i < inner; ++i) {
              const std::size_t k = static_cast<std::size_t>((o * C + c) * inner + i);
              if (training) {
                gx[k] += gv[c] * inv_std[c] * (g[k] - sum_g[c] / n - xhat[k] * sum_gx[c] / n);
              } else {
                gx[k] += gv[c] * inv_std[c] * g[k];
              }
            }
      });
}

Tensor graph_from_feature_map(const Tensor& fm, GraphAxis axis) {
  require_rank(fm, 4, "graph_from_feature_map");
  const std::int64_t B = fm.size(0), C = fm.size(1), H = fm.size(2), W = fm.size(3);
  const bool spectral = axis == GraphAxis::Spectral;
  const std::int64_t N = spectral ? H : W;
  const double inv = 1.0 / static_cast<double>(spectral ? W : H);
  std::vector<double> out(static_cast<std::size_t>(B * N * C), 0.0);
  const auto& xv = fm.vec();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w) {
          const double v = std::fabs(xv[static_cast<std::size_t>(((b * C + c) * H + h) * W + w)]);
          const std::int64_t n = spectral ? h : w;
          out[static_cast<std::size_t>((b * N + n) * C + c)] += v * inv;
        }
  return Tensor::make_result(
      Shape{B, N, C}, std::move(out), {&fm}, [fm, B, C, H, W, N, spectral, inv](const std::vector<double>& g) mutable {
        auto gx = fm.mutable_grad();
        const auto& xv = fm.vec();
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t h = 0; h < H; ++h)
              for (std::int64_t w = 0; w < W; ++w) {
                const std::size_t k = static_cast<std::size_t>(((b * C + c) * H + h) * W + w);
                const std::int64_t n = spectral ? h : w;
                const double s = xv[k] > 0.0 ? 1.0 : (xv[k] < 0.0 ? -1.0 : 0.0);
                gx[k] += s * inv * g[static_cast<std::size_t>((b * N + n) * C + c)];
              }
      });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::vector<std::int64_t>>& index) {
  require_rank(x, 3, "gather_rows");
  const std::int64_t B = x.size(0), N = x.size(1), D = x.size(2);
  if (static_cast<std::int64_t>(index.size()) != B) throw ShapeError("gather_rows: index batch mismatch");
  const std::int64_t k = index.empty() ? 0 : static_cast<std::int64_t>(index[0].size());
  std::vector<double> out(static_cast<std::size_t>(B * k * D));
  for (std::int64_t b = 0; b < B; ++b) {
    if (static_cast<std::int64_t>(index[b].size()) != k) throw ShapeError("gather_rows: ragged index");
    for (std::int64_t j = 0; j < k; ++j) {
      const std::int64_t n = index[b][j];
      if (n < 0 || n >= N) throw ShapeError("gather_rows: index out of range");
      std::copy_n(x.vec().begin() + (b * N + n) * D, D, out.begin() + (b * k + j) * D);
    }
  }
  return Tensor::make_result(Shape{B, k, D}, std::move(out), {&x},
                             [x, index, B, N, D, k](const std::vector<double>& g) mutable {
                               auto gx = x.mutable_grad();
                               for (std::int64_t b = 0; b < B; ++b)
                                 for (std::int64_t j = 0; j < k; ++j)
                                   for (std::int64_t d = 0; d < D; ++d)
                                     gx[(b * N + index[b][j]) * D + d] += g[(b * k + j) * D + d];
                             });
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  require_rank(x, 3, "scale_rows");
  const std::int64_t B = x.size(0), N = x.size(1), D = x.size(2);
  if (s.numel() != B * N) {
    throw ShapeError("scale_rows: scale " + shape_str(s.shape()) + " for " + shape_str(x.shape()));
  }
  std::vector<double> out(x.vec());
  for (std::int64_t r = 0; r < B * N; ++r)
    for (std::int64_t d = 0; d < D; ++d) out[r * D + d] *= s.vec()[r];
  return Tensor::make_result(x.shape(), std::move(out), {&x, &s},
                             [x, s, B, N, D](const std::vector<double>& g) mutable {
                               if (x.requires_grad()) {
                                 auto gx = x.mutable_grad();
                                 for (std::int64_t r = 0; r < B * N; ++r)
                                   for (std::int64_t d = 0; d < D; ++d) gx[r * D + d] += g[r * D + d] * s.vec()[r];
                               }
                               if (s.requires_grad()) {
                                 auto gs = s.mutable_grad();
                                 for (std::int64_t r = 0; r < B * N; ++r) {
                                   double acc = 0.0;
                                   for (std::int64_t d = 0; d < D; ++d) acc += g[r * D + d] * x.vec()[r * D + d];
                                   gs[r] += acc;
                                 }
                               }
                             });
}

Tensor scale_last(const Tensor& x, const Tensor& w) {
  if (x.ndim() < 1 || w.ndim() != 1 || w.size(0) != x.size(-1)) {
    throw ShapeError("scale_last: " + shape_str(x.shape()) + " by " + shape_str(w.shape()));
  }
  const std::int64_t D = w.size(0);
  const std::int64_t rows = x.numel() / D;
  std::vector<double> out(x.vec());
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t d = 0; d < D; ++d) out[r * D + d] *= w.vec()[d];
  return Tensor::make_result(x.shape(), std::move(out), {&x, &w},
                             [x, w, rows, D](const std::vector<double>& g) mutable {
                               if (x.requires_grad()) {
                                 auto gx = x.mutable_grad();
                                 for (std::int64_t r = 0; r < rows; ++r)
                                   for (std::int64_t d = 0; d < D; ++d) gx[r * D + d] += g[r * D + d] * w.vec()[d];
                               }
                               if (w.requires_grad()) {
                                 auto gw = w.mutable_grad();
                                 for (std::int64_t r = 0; r < rows; ++r)
                                   for (std::int64_t d = 0; d < D; ++d) gw[d] += g[r * D + d] * x.vec()[r * D + d];
                               }
                             });
}

Tensor mse(const Tensor& prediction, const Tensor& target) {
  require_same_shape(prediction, target, "mse");
  const double n = static_cast<double>(prediction.numel());
  double s = 0.0;
  for (std::size_t i = 0; i < prediction.vec().size(); ++i) {
    const double d = prediction.vec()[i] - target.vec()[i];
    s += d * d;
  }
  return Tensor::make_result(Shape{}, {s / n}, {&prediction, &target},
                             [prediction, target, n](const std::vector<double>& g) mutable {
                               const double k = 2.0 * g[0] / n;
                               if (prediction.requires_grad()) {
                                 auto gp = prediction.mutable_grad();
                                 for (std::size_t i = 0; i < gp.size(); ++i)
                                   gp[i] += k * (prediction.vec()[i] - target.vec()[i]);
                               }
                               if (target.requires_grad()) {
                                 auto gt = target.mutable_grad();
                                 for (std::size_t i = 0; i < gt.size(); ++i)
                                   gt[i] -= k * (prediction.vec()[i] - target.vec()[i]);
                               }
                             });
}

Tensor weighted_cross_entropy(const Tensor& logits, std::span<const int> labels,
                              std::array<double, 2> w) {
  require_rank(logits, 2, "weighted_cross_entropy");
  const std::int64_t B = logits.size(0);
  if (logits.size(1) != 2) throw ShapeError("weighted_cross_entropy expects 2 logits per row");
  if (static_cast<std::int64_t>(labels.size()) != B) {
    throw ShapeError("weighted_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(B) + " rows");
  }
  std::vector<double> probs(static_cast<std::size_t>(2 * B));
  double total = 0.0;
  for (std::int64_t b = 0; b < B; ++b) {
    const double z0 = logits.vec()[2 * b], z1 = logits.vec()[2 * b + 1];
    if (!std::isfinite(z0) || !std::isfinite(z1)) throw ValidationError("weighted_cross_entropy: non-finite logits");
    const int y = labels[b];
    if (y != 0 && y != 1) throw ValidationError("weighted_cross_entropy: label must be 0 or 1");
    const double mx = std::max(z0, z1);
    const double lse = mx + std::log(std::exp(z0 - mx) + std::exp(z1 - mx));
    probs[2 * b] = std::exp(z0 - lse);
    probs[2 * b + 1] = std::exp(z1 - lse);
    total += -w[y] * ((y == 0 ? z0 : z1) - lse);
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return Tensor::make_result(Shape{}, {total / static_cast<double>(B)}, {&logits},
                             [logits, probs = std::move(probs), lab = std::move(lab), w, B](const std::vector<double>& g) mutable {
                               auto gl = logits.mutable_grad();
                               const double k = g[0] / static_cast<double>(B);
                               for (std::int64_t b = 0; b < B; ++b) {
                                 const int y = lab[b];
                                 for (int j = 0; j < 2; ++j) {
                                   gl[2 * b + j] += k * w[y] * (probs[2 * b + j] - (j == y ? 1.0 : 0.0));
                                 }
                               }
                             });
}

Tensor stft_phase_loss(const Tensor& prediction, const Tensor& target, int n_fft, int hop) {
  require_same_shape(prediction, target, "stft_phase_loss");
  require_rank(prediction, 3, "stft_phase_loss");
  const std::int64_t rows = prediction.size(0) * prediction.size(1), T = prediction.size(2);
  if (n_fft < 4 || hop < 1 || T < n_fft) {
    throw ShapeError("stft_phase_loss: length " + std::to_string(T) + " shorter than n_fft " + std::to_string(n_fft));
  }
  const std::int64_t frames = 1 + (T - n_fft) / hop;
  const int bins = n_fft / 2;
  std::vector<double> win(static_cast<std::size_t>(n_fft)), cs(static_cast<std::size_t>(n_fft * bins)),
      sn(cs.size());
  for (int n = 0; n < n_fft; ++n) {
    win[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / n_fft);
    for (int k = 1; k < bins; ++k) {
      const double th = 2.0 * std::numbers::pi * k * n / n_fft;
      cs[n * bins + k] = std::cos(th);
      sn[n * bins + k] = std::sin(th);
    }
  }
  constexpr double kFloor = 1e-12;
  // Per (row, frame, bin): d loss / d (Re, Im) of the prediction spectrum.
  std::vector<double> d_re(static_cast<std::size_t>(rows * frames * bins), 0.0), d_im(d_re.size(), 0.0);
  double total = 0.0;
  std::int64_t count = 0;
  const auto& pv = prediction.vec();
  const auto& tv = target.vec();
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t f = 0; f < frames; ++f) {
      const std::int64_t off = r * T + f * hop;
      for (int k = 1; k < bins; ++k) {
        double pr = 0, pi = 0, tr = 0, ti = 0;
        for (int n = 0; n < n_fft; ++n) {
          const double wc = win[n] * cs[n * bins + k], ws = win[n] * sn[n * bins + k];
          pr += pv[off + n] * wc;
          pi -= pv[off + n] * ws;
          tr += tv[off + n] * wc;
          ti -= tv[off + n] * ws;
        }
        const double pp = pr * pr + pi * pi, tt = tr * tr + ti * ti;
        if (pp < kFloor || tt < kFloor) continue;
        const double np = std::sqrt(pp), nt = std::sqrt(tt);
        const double dot = pr * tr + pi * ti;
        total += 1.0 - dot / (np * nt);
        ++count;
        const std::size_t idx = static_cast<std::size_t>((r * frames + f) * bins + k);
        d_re[idx] = -(tr / (np * nt) - dot * pr / (pp * np * nt));
        d_im[idx] = -(ti / (np * nt) - dot * pi / (pp * np * nt));
      }
    }
  }
  const double value = count ? total / static_cast<double>(count) : 0.0;
  return Tensor::make_result(
      Shape{}, {value}, {&prediction},
      [=, d_re = std::move(d_re), d_im = std::move(d_im)](const std::vector<double>& g) mutable {
        if (count == 0) return;
        auto gp = prediction.mutable_grad();
        const double k0 = g[0] / static_cast<double>(count);
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t f = 0; f < frames; ++f) {
            const std::int64_t off = r * T + f * hop;
            for (int k = 1; k < bins; ++k) {
              const std::size_t idx = static_cast<std::size_t>((r * frames + f) * bins + k);
              if (d_re[idx] == 0.0 && d_im[idx] == 0.0) continue;
              for (int n = 0; n < n_fft; ++n) {
                gp[off + n] += k0 * win[n] * (d_re[idx] * cs[n * bins + k] - d_im[idx] * sn[n * bins + k]);
              }
            }
          }
      });
}

}  // namespace m2s::ops
