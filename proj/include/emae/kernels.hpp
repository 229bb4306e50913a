#pragma once

// Raw forward/backward loops shared by the pure Tensor API below and the
// differentiable ops in autograd.hpp. All loops are serial with a fixed
// reduction order, so results are bitwise reproducible.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "emae/errors.hpp"
#include "emae/tensor.hpp"

namespace emae {

namespace kernels {

// C[p x s] += A[p x q] * B[q x s]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t p, std::size_t q, std::size_t s) {
  for (std::size_t i = 0; i < p; ++i) {
    double* ci = c + i * s;
    const double* ai = a + i * q;
    for (std::size_t k = 0; k < q; ++k) {
      const double aik = ai[k];
      const double* bk = b + k * s;
      for (std::size_t j = 0; j < s; ++j) ci[j] += aik * bk[j];
    }
  }
}

// C[q x s] += A[p x q]^T * B[p x s]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t p, std::size_t q, std::size_t s) {
  for (std::size_t i = 0; i < p; ++i) {
    const double* ai = a + i * q;
    const double* bi = b + i * s;
    for (std::size_t k = 0; k < q; ++k) {
      const double aik = ai[k];
      double* ck = c + k * s;
      for (std::size_t j = 0; j < s; ++j) ck[j] += aik * bi[j];
    }
  }
}

// C[p x q] += A[p x s] * B[q x s]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t p, std::size_t q, std::size_t s) {
  for (std::size_t i = 0; i < p; ++i) {
    const double* ai = a + i * s;
    double* ci = c + i * q;
    for (std::size_t j = 0; j < q; ++j) {
      const double* bj = b + j * s;
      double acc = 0.0;
      for (std::size_t k = 0; k < s; ++k) acc += ai[k] * bj[k];
      ci[j] += acc;
    }
  }
}

struct Conv2dGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel_h, kernel_w;
  std::size_t stride_h, stride_w, groups;
  std::size_t out_h, out_w;

  std::size_t group_in() const { return in_channels / groups; }
  std::size_t group_out() const { return out_channels / groups; }
};

inline Conv2dGeometry conv2d_geometry(const Shape& input, const Shape& kernel, std::size_t stride_h,
                                      std::size_t stride_w, std::size_t groups) {
  if (input.size() != 4 || kernel.size() != 4) {
    throw ShapeError("conv2d expects 4-D input and kernel, got " + shape_str(input) + " and " + shape_str(kernel));
  }
  if (groups == 0 || stride_h == 0 || stride_w == 0) throw ContractError("conv2d stride and groups must be positive");
  Conv2dGeometry g{};
  g.batch = input[0];
  g.in_channels = input[1];
  g.height = input[2];
  g.width = input[3];
  g.out_channels = kernel[0];
  g.kernel_h = kernel[2];
  g.kernel_w = kernel[3];
  g.stride_h = stride_h;
  g.stride_w = stride_w;
  g.groups = groups;
  if (g.in_channels % groups != 0 || g.out_channels % groups != 0) {
    throw ShapeError("conv2d channels not divisible by groups=" + std::to_string(groups) + ": input " +
                     shape_str(input) + ", kernel " + shape_str(kernel));
  }
  if (kernel[1] != g.group_in()) {
    throw ShapeError("conv2d kernel " + shape_str(kernel) + " expects " + std::to_string(kernel[1]) +
                     " input channels per group, input " + shape_str(input) + " provides " +
                     std::to_string(g.group_in()));
  }
  if (g.kernel_h > g.height || g.kernel_w > g.width) {
    throw ShapeError("conv2d kernel " + shape_str(kernel) + " larger than input " + shape_str(input));
  }
  g.out_h = (g.height - g.kernel_h) / stride_h + 1;
  g.out_w = (g.width - g.kernel_w) / stride_w + 1;
  return g;
}

inline void conv2d_forward(const Conv2dGeometry& g, const double* in, const double* w, const double* bias,
                           double* out) {
  const std::size_t gi = g.group_in();
  const std::size_t go = g.group_out();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      const std::size_t c0 = (o / go) * gi;
      double* out_plane = out + ((b * g.out_channels + o) * g.out_h) * g.out_w;
      for (std::size_t y = 0; y < g.out_h; ++y) {
        for (std::size_t x = 0; x < g.out_w; ++x) {
          double acc = bias ? bias[o] : 0.0;
          for (std::size_t c = 0; c < gi; ++c) {
            const double* in_plane = in + ((b * g.in_channels + c0 + c) * g.height) * g.width;
            const double* w_plane = w + ((o * gi + c) * g.kernel_h) * g.kernel_w;
            for (std::size_t i = 0; i < g.kernel_h; ++i) {
              const double* in_row = in_plane + (y * g.stride_h + i) * g.width + x * g.stride_w;
              const double* w_row = w_plane + i * g.kernel_w;
              for (std::size_t j = 0; j < g.kernel_w; ++j) acc += in_row[j] * w_row[j];
            }
          }
          out_plane[y * g.out_w + x] = acc;
        }
      }
    }
  }
}

// Accumulates gradients; any output pointer may be null.
inline void conv2d_backward(const Conv2dGeometry& g, const double* in, const double* w, const double* gout,
                            double* gin, double* gw, double* gbias) {
  const std::size_t gi = g.group_in();
  const std::size_t go = g.group_out();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      const std::size_t c0 = (o / go) * gi;
      const double* gplane = gout + ((b * g.out_channels + o) * g.out_h) * g.out_w;
      for (std::size_t y = 0; y < g.out_h; ++y) {
        for (std::size_t x = 0; x < g.out_w; ++x) {
          const double d = gplane[y * g.out_w + x];
          if (gbias) gbias[o] += d;
          for (std::size_t c = 0; c < gi; ++c) {
            const std::size_t in_off = ((b * g.in_channels + c0 + c) * g.height) * g.width;
            const std::size_t w_off = ((o * gi + c) * g.kernel_h) * g.kernel_w;
            for (std::size_t i = 0; i < g.kernel_h; ++i) {
              const std::size_t row = in_off + (y * g.stride_h + i) * g.width + x * g.stride_w;
              const std::size_t wrow = w_off + i * g.kernel_w;
              for (std::size_t j = 0; j < g.kernel_w; ++j) {
                if (gw) gw[wrow + j] += d * in[row + j];
                if (gin) gin[row + j] += d * w[wrow + j];
              }
            }
          }
        }
      }
    }
  }
}

// Normalizes `rows` rows of width d. mean/rstd receive per-row statistics.
inline void layer_norm_forward(const double* x, const double* gamma, const double* beta, double eps,
                               std::size_t rows, std::size_t d, double* y, double* mean, double* rstd) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * d;
    double m = 0.0;
    for (std::size_t k = 0; k < d; ++k) m += xr[k];
    m /= static_cast<double>(d);
    double v = 0.0;
    for (std::size_t k = 0; k < d; ++k) v += (xr[k] - m) * (xr[k] - m);
    v /= static_cast<double>(d);
    const double s = 1.0 / std::sqrt(v + eps);
    double* yr = y + r * d;
    for (std::size_t k = 0; k < d; ++k) yr[k] = (xr[k] - m) * s * gamma[k] + beta[k];
    if (mean) mean[r] = m;
    if (rstd) rstd[r] = s;
  }
}

inline void layer_norm_backward(const double* x, const double* gamma, const double* mean, const double* rstd,
                                const double* gy, std::size_t rows, std::size_t d, double* gx, double* ggamma,
                                double* gbeta) {
  std::vector<double> dxhat(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * d;
    const double* gr = gy + r * d;
    const double m = mean[r];
    const double s = rstd[r];
    double sum_d = 0.0;
    double sum_dx = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double xhat = (xr[k] - m) * s;
      dxhat[k] = gr[k] * gamma[k];
      sum_d += dxhat[k];
      sum_dx += dxhat[k] * xhat;
      if (ggamma) ggamma[k] += gr[k] * xhat;
      if (gbeta) gbeta[k] += gr[k];
    }
    if (!gx) continue;
    const double inv_d = 1.0 / static_cast<double>(d);
    double* gxr = gx + r * d;
    for (std::size_t k = 0; k < d; ++k) {
      const double xhat = (xr[k] - m) * s;
      gxr[k] += s * (dxhat[k] - sum_d * inv_d - xhat * sum_dx * inv_d);
    }
  }
}

inline void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t d) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * d;
    double* yr = y + r * d;
    const double mx = *std::max_element(xr, xr + d);
    double sum = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      yr[k] = std::exp(xr[k] - mx);
      sum += yr[k];
    }
    const double inv = 1.0 / sum;
    for (std::size_t k = 0; k < d; ++k) yr[k] *= inv;
  }
}

// gx += y * (gy - <gy, y>) row-wise.
inline void softmax_rows_backward(const double* y, const double* gy, double* gx, std::size_t rows, std::size_t d) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* yr = y + r * d;
    const double* gr = gy + r * d;
    double dot = 0.0;
    for (std::size_t k = 0; k < d; ++k) dot += gr[k] * yr[k];
    double* gxr = gx + r * d;
    for (std::size_t k = 0; k < d; ++k) gxr[k] += yr[k] * (gr[k] - dot);
  }
}

inline constexpr double kGeluCubic = 0.044715;
inline const double kGeluScale = std::sqrt(2.0 / std::numbers::pi);

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluScale * (x + kGeluCubic * x * x * x)));
}

inline double gelu_grad(double x) {
  const double t = std::tanh(kGeluScale * (x + kGeluCubic * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluScale * (1.0 + 3.0 * kGeluCubic * x * x);
}

// Multi-head self-attention over packed qkv [batch x len x 3d]. probs receives
// [batch x heads x len x len].
inline void attention_forward(const double* qkv, std::size_t batch, std::size_t len, std::size_t d,
                              std::size_t heads, double* out, double* probs) {
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t stride = 3 * d;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* base = qkv + b * len * stride;
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs + ((b * heads + h) * len) * len;
      for (std::size_t i = 0; i < len; ++i) {
        const double* qi = base + i * stride + h * dh;
        for (std::size_t j = 0; j < len; ++j) {
          const double* kj = base + j * stride + d + h * dh;
          double acc = 0.0;
          for (std::size_t k = 0; k < dh; ++k) acc += qi[k] * kj[k];
          p[i * len + j] = acc * scale;
        }
      }
      softmax_rows(p, p, len, len);
      for (std::size_t i = 0; i < len; ++i) {
        double* oi = out + (b * len + i) * d + h * dh;
        std::fill(oi, oi + dh, 0.0);
        for (std::size_t j = 0; j < len; ++j) {
          const double pij = p[i * len + j];
          const double* vj = base + j * stride + 2 * d + h * dh;
          for (std::size_t k = 0; k < dh; ++k) oi[k] += pij * vj[k];
        }
      }
    }
  }
}

inline void attention_backward(const double* qkv, const double* probs, const double* gout, std::size_t batch,
                               std::size_t len, std::size_t d, std::size_t heads, double* gqkv) {
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t stride = 3 * d;
  std::vector<double> gp(len * len);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* base = qkv + b * len * stride;
    double* gbase = gqkv + b * len * stride;
    for (std::size_t h = 0; h < heads; ++h) {
      const double* p = probs + ((b * heads + h) * len) * len;
      // dP = dO V^T, dV = P^T dO
      for (std::size_t i = 0; i < len; ++i) {
        const double* goi = gout + (b * len + i) * d + h * dh;
        for (std::size_t j = 0; j < len; ++j) {
          const double* vj = base + j * stride + 2 * d + h * dh;
          double* gvj = gbase + j * stride + 2 * d + h * dh;
          double acc = 0.0;
          const double pij = p[i * len + j];
          for (std::size_t k = 0; k < dh; ++k) {
            acc += goi[k] * vj[k];
            gvj[k] += pij * goi[k];
          }
          gp[i * len + j] = acc;
        }
      }
      // dS = P * (dP - rowdot(dP, P)), scaled by 1/sqrt(dh)
      for (std::size_t i = 0; i < len; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += gp[i * len + j] * p[i * len + j];
        for (std::size_t j = 0; j < len; ++j) gp[i * len + j] = p[i * len + j] * (gp[i * len + j] - dot) * scale;
      }
      for (std::size_t i = 0; i < len; ++i) {
        const double* qi = base + i * stride + h * dh;
        double* gqi = gbase + i * stride + h * dh;
        for (std::size_t j = 0; j < len; ++j) {
          const double gs = gp[i * len + j];
          const double* kj = base + j * stride + d + h * dh;
          double* gkj = gbase + j * stride + d + h * dh;
          for (std::size_t k = 0; k < dh; ++k) {
            gqi[k] += gs * kj[k];
            gkj[k] += gs * qi[k];
          }
        }
      }
    }
  }
}

// Strides of a row-major shape.
inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> st(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
  return st;
}

// out[permuted index] = in[index]; out shape is shape permuted by perm.
inline void permute_copy(const double* in, const Shape& shape, const std::vector<std::size_t>& perm, double* out,
                         bool accumulate) {
  const std::size_t rank = shape.size();
  const auto in_strides = strides_of(shape);
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = shape[perm[i]];
  const std::size_t n = shape_numel(shape);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < rank; ++i) src += idx[i] * in_strides[perm[i]];
    if (accumulate)
      out[o] += in[src];
    else
      out[o] = in[src];
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Pure forward operations on tensors.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul dimension mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor c(Shape{a.dim(0), b.dim(1)});
  kernels::gemm_nn(a.data().data(), b.data().data(), c.data().data(), a.dim(0), a.dim(1), b.dim(1));
  return c;
}

struct Stride2 {
  std::size_t h = 1;
  std::size_t w = 1;
};

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, Stride2 stride = {}, std::size_t groups = 1) {
  const auto g = kernels::conv2d_geometry(input.shape(), kernel.shape(), stride.h, stride.w, groups);
  Tensor out(Shape{g.batch, g.out_channels, g.out_h, g.out_w});
  kernels::conv2d_forward(g, input.data().data(), kernel.data().data(), nullptr, out.data().data());
  return out;
}

/// Zero-pads the last two dimensions of a 4-D tensor.
inline Tensor pad2d(const Tensor& input, std::size_t pad_h, std::size_t pad_w) {
  if (input.rank() != 4) throw ShapeError("pad2d expects a 4-D tensor, got " + shape_str(input.shape()));
  const std::size_t n = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t oh = h + 2 * pad_h, ow = w + 2 * pad_w;
  Tensor out(Shape{input.dim(0), input.dim(1), oh, ow});
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(p * oh + y + pad_h) * ow + x + pad_w] = input[(p * h + y) * w + x];
  return out;
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  if (x.empty()) throw ShapeError("layer_norm on empty tensor");
  const std::size_t d = x.shape().back();
  if (d == 0 || gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm last dimension " + std::to_string(d) + " vs gamma " + shape_str(gamma.shape()) +
                     " beta " + shape_str(beta.shape()));
  }
  Tensor y(x.shape());
  kernels::layer_norm_forward(x.data().data(), gamma.data().data(), beta.data().data(), eps, x.numel() / d, d,
                              y.data().data(), nullptr, nullptr);
  return y;
}

inline Tensor softmax(const Tensor& x) {
  if (x.empty()) throw ShapeError("softmax on empty tensor");
  if (!x.all_finite()) throw ContractError("softmax requires finite input");
  const std::size_t d = x.shape().back();
  Tensor y(x.shape());
  kernels::softmax_rows(x.data().data(), y.data().data(), x.numel() / d, d);
  return y;
}

inline Tensor gelu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = kernels::gelu(x[i]);
  return y;
}

}  // namespace emae
