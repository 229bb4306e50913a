#pragma once

#include <cmath>
#include <span>
#include <string>

#include "emae/autograd.hpp"
#include "emae/masking.hpp"
#include "emae/tensor.hpp"

namespace emae {

enum class LossKind { Similarity, MSE, RMSEmm };

struct LossValue {
  double value = 0.0;
  LossKind kind = LossKind::Similarity;
};

/// Guard added to the norm product of the cosine denominator.
inline constexpr double kCosineEpsilon = 1e-12;

namespace detail {

struct CosineParts {
  double dot = 0.0;
  double norm_hat = 0.0;
  double norm_target = 0.0;
};

// Reversed mask on both operands, then flatten the whole batch into one pair
// of vectors.
inline CosineParts reversed_mask_cosine(const Tensor& x_hat, const Tensor& x, const Mask& mask) {
  if (x_hat.shape() != x.shape()) {
    throw ShapeError("reconstruction " + shape_str(x_hat.shape()) + " vs target " + shape_str(x.shape()));
  }
  if (mask.empty()) throw DegenerateLossError("similarity loss is undefined for an empty mask");
  const Tensor a = apply_reversed_mask(x_hat, mask);
  const Tensor b = apply_reversed_mask(x, mask);
  CosineParts p;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    p.dot += a[i] * b[i];
    p.norm_hat += a[i] * a[i];
    p.norm_target += b[i] * b[i];
  }
  p.norm_hat = std::sqrt(p.norm_hat);
  p.norm_target = std::sqrt(p.norm_target);
  if (p.norm_target == 0.0) throw DegenerateLossError("similarity loss target is all zero at masked positions");
  return p;
}

}  // namespace detail

/// 1 - cos(x_hat, x) restricted to masked positions.
inline LossValue similarity_loss(const Tensor& x_hat, const Tensor& x, const Mask& mask) {
  const auto p = emae::detail::reversed_mask_cosine(x_hat, x, mask);
  return {1.0 - p.dot / (p.norm_hat * p.norm_target + kCosineEpsilon), LossKind::Similarity};
}

/// Mean squared error over masked positions of every sample in the batch.
inline LossValue mse_loss(const Tensor& x_hat, const Tensor& x, const Mask& mask) {
  if (x_hat.shape() != x.shape()) {
    throw ShapeError("reconstruction " + shape_str(x_hat.shape()) + " vs target " + shape_str(x.shape()));
  }
  if (mask.empty()) throw DegenerateLossError("mse loss is undefined for an empty mask");
  detail::check_mask_dims(x, mask);
  const std::size_t plane = mask.rows * mask.cols;
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t base = 0; base < x.numel(); base += plane) {
    for (std::size_t i : mask.flat_indices) {
      const double diff = x_hat[base + i] - x[base + i];
      acc += diff * diff;
      ++count;
    }
  }
  return {acc / static_cast<double>(count), LossKind::MSE};
}

/// sqrt of the mean squared Euclidean distance between paired 2-D points,
/// given as interleaved (x, y) coordinates.
inline LossValue rmse_mm(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size() || pred.size() % 2 != 0) {
    throw ShapeError("rmse_mm expects equal-length interleaved (x, y) arrays");
  }
  if (pred.empty()) throw ContractError("rmse_mm requires at least one sample");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double diff = pred[i] - target[i];
    acc += diff * diff;
  }
  return {std::sqrt(acc / static_cast<double>(pred.size() / 2)), LossKind::RMSEmm};
}

inline LossValue rmse_mm(const Tensor& pred, const Tensor& target) {
  if (pred.rank() != 2 || pred.dim(1) != 2 || pred.shape() != target.shape()) {
    throw ShapeError("rmse_mm expects matching [N x 2] tensors, got " + shape_str(pred.shape()) + " and " +
                     shape_str(target.shape()));
  }
  return rmse_mm(pred.data(), target.data());
}

namespace ad {

/// Differentiable similarity loss; the target carries no gradient.
inline Var similarity_loss(Var x_hat, const Tensor& x, const Mask& mask) {
  const auto p = emae::detail::reversed_mask_cosine(x_hat.value(), x, mask);
  const double denom = p.norm_hat * p.norm_target + kCosineEpsilon;
  const double value = 1.0 - p.dot / denom;
  const std::size_t ih = x_hat.id;
  auto target = std::make_shared<const Tensor>(x);
  auto indices = std::make_shared<const std::vector<std::size_t>>(mask.flat_indices);
  const std::size_t plane = mask.rows * mask.cols;
  return x_hat.graph->record(
      "similarity_loss", {x_hat.id}, Tensor::scalar(value),
      [ih, target, indices, plane, p, denom](const Graph& gr, const Tensor& go, std::span<Tensor* const> gi) {
        const Tensor& a = gr.value(ih);
        const Tensor& b = *target;
        // d/da [1 - a.b / (|a||b| + eps)]
        const double c1 = 1.0 / denom;
        const double c2 = p.norm_hat > 0.0 ? p.dot * p.norm_target / (p.norm_hat * denom * denom) : 0.0;
        for (std::size_t base = 0; base < a.numel(); base += plane) {
          for (std::size_t i : *indices) {
            const std::size_t k = base + i;
            (*gi[0])[k] += go[0] * -(b[k] * c1 - a[k] * c2);
          }
        }
      });
}

/// Differentiable masked MSE.
inline Var mse_loss(Var x_hat, const Tensor& x, const Mask& mask) {
  const double value = emae::mse_loss(x_hat.value(), x, mask).value;
  const std::size_t ih = x_hat.id;
  auto target = std::make_shared<const Tensor>(x);
  auto indices = std::make_shared<const std::vector<std::size_t>>(mask.flat_indices);
  const std::size_t plane = mask.rows * mask.cols;
  const double count = static_cast<double>(x.numel() / plane * indices->size());
  return x_hat.graph->record(
      "mse_loss", {x_hat.id}, Tensor::scalar(value),
      [ih, target, indices, plane, count](const Graph& gr, const Tensor& go, std::span<Tensor* const> gi) {
        const Tensor& a = gr.value(ih);
        for (std::size_t base = 0; base < a.numel(); base += plane)
          for (std::size_t i : *indices) (*gi[0])[base + i] += go[0] * 2.0 * (a[base + i] - (*target)[base + i]) / count;
      });
}

/// Mean squared Euclidean distance between pred[N x 2] and target[N x 2].
inline Var mean_squared_distance(Var pred, const Tensor& target) {
  const Tensor& pv = pred.value();
  if (pv.shape() != target.shape() || pv.rank() != 2) {
    throw ShapeError("mean_squared_distance " + shape_str(pv.shape()) + " vs " + shape_str(target.shape()));
  }
  const double n = static_cast<double>(pv.dim(0));
  double acc = 0.0;
  for (std::size_t i = 0; i < pv.numel(); ++i) acc += (pv[i] - target[i]) * (pv[i] - target[i]);
  const std::size_t ip = pred.id;
  auto tgt = std::make_shared<const Tensor>(target);
  return pred.graph->record("mean_squared_distance", {pred.id}, Tensor::scalar(acc / n),
                            [ip, tgt, n](const Graph& gr, const Tensor& go, std::span<Tensor* const> gi) {
                              const Tensor& pv = gr.value(ip);
                              for (std::size_t i = 0; i < pv.numel(); ++i)
                                (*gi[0])[i] += go[0] * 2.0 * (pv[i] - (*tgt)[i]) / n;
                            });
}

}  // namespace ad

}  // namespace emae
