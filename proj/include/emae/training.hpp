#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "emae/autograd.hpp"
#include "emae/data.hpp"
#include "emae/loss.hpp"
#include "emae/masking.hpp"
#include "emae/model.hpp"
#include "emae/optim.hpp"
#include "emae/rng.hpp"

namespace emae {

enum class ReconstructionLoss { Similarity, MSE };

struct TrainConfig {
  double base_lr = 1e-4;
  std::size_t batch_size = 64;
  std::size_t lr_step_size = 10;
  double lr_decay_factor = 0.1;
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
  /// Pretraining only.
  double mask_ratio = 0.5;
  ReconstructionLoss loss = ReconstructionLoss::Similarity;

  static TrainConfig pretrain_defaults() { return {1e-4, 64, 10, 0.1, 30, 0, 0.5, ReconstructionLoss::Similarity}; }
  static TrainConfig finetune_defaults() { return {1e-4, 64, 6, 0.1, 15, 0, 0.5, ReconstructionLoss::Similarity}; }

  double lr(std::size_t epoch) const { return lr_at_epoch(base_lr, lr_step_size, lr_decay_factor, epoch); }

  void validate() const {
    if (!(base_lr > 0.0)) throw ContractError("base learning rate must be positive");
    if (batch_size == 0) throw ContractError("batch size must be positive");
    if (lr_step_size == 0) throw ContractError("lr step size must be >= 1");
    if (epochs == 0) throw ContractError("epochs must be positive");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  /// NaN when no validation split was supplied.
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double wall_ms = 0.0;
};

struct RunLog {
  std::string label;
  std::vector<EpochRecord> epochs;
  std::optional<double> test_metric;
  /// Masks drawn by the training loop (validation masks are not counted).
  std::uint64_t mask_draws = 0;
  /// Label rows read by the training loop.
  std::uint64_t label_reads = 0;

  std::size_t best_val_epoch() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < epochs.size(); ++i)
      if (epochs[i].val_loss < epochs[best].val_loss) best = i;
    return best;
  }
};

/// Assembles batches from a dataset and counts what it hands out.
class BatchLoader {
 public:
  explicit BatchLoader(const SignalDataset& data) : data_(data) {}

  Tensor samples(std::span<const std::size_t> idx) {
    const std::size_t c = data_.channels(), t = data_.time_len();
    std::vector<double> buf;
    buf.reserve(idx.size() * c * t);
    for (std::size_t i : idx) {
      auto s = data_.sample(i);
      buf.insert(buf.end(), s.begin(), s.end());
    }
    return Tensor(Shape{idx.size(), c, t}, std::move(buf));
  }

  Tensor labels(std::span<const std::size_t> idx) {
    std::vector<double> buf;
    buf.reserve(idx.size() * 2);
    for (std::size_t i : idx) {
      buf.push_back(data_.label(i).x);
      buf.push_back(data_.label(i).y);
    }
    label_reads_ += idx.size();
    return Tensor(Shape{idx.size(), 2}, std::move(buf));
  }

  std::uint64_t label_reads() const noexcept { return label_reads_; }
  std::size_t size() const noexcept { return data_.size(); }

 private:
  const SignalDataset& data_;
  std::uint64_t label_reads_ = 0;
};

/// Seeded Fisher-Yates permutation of 0..n-1.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed, std::uint64_t stream) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  CounterRng rng(seed, stream);
  for (std::size_t i = n; i-- > 1;) std::swap(idx[i], idx[static_cast<std::size_t>(rng.below(i + 1))]);
  return idx;
}

/// Consecutive batches of `batch` indices; the last may be partial.
inline std::vector<std::span<const std::size_t>> batches_of(const std::vector<std::size_t>& order, std::size_t batch) {
  std::vector<std::span<const std::size_t>> out;
  for (std::size_t s = 0; s < order.size(); s += batch)
    out.emplace_back(order.data() + s, std::min(batch, order.size() - s));
  return out;
}

struct DatasetSplit {
  SignalDataset train;
  SignalDataset val;
  SignalDataset test;
  std::vector<std::size_t> train_idx, val_idx, test_idx;
};

/// Split sizes floor(0.7 N), floor(0.15 N) and the remainder.
inline std::array<std::size_t, 3> split_sizes(std::size_t n) {
  if (n < 3) throw ContractError("split_dataset requires at least 3 samples, got " + std::to_string(n));
  const std::size_t train = n * 7 / 10;
  const std::size_t val = n * 3 / 20;
  return {train, val, n - train - val};
}

inline DatasetSplit split_dataset(const SignalDataset& data, std::uint64_t seed) {
  const auto sizes = split_sizes(data.size());
  const auto order = shuffled_indices(data.size(), seed, streams::kSplit);
  DatasetSplit s;
  s.train_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(sizes[0]));
  s.val_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(sizes[0]),
                   order.begin() + static_cast<std::ptrdiff_t>(sizes[0] + sizes[1]));
  s.test_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(sizes[0] + sizes[1]), order.end());
  s.train = data.subset(s.train_idx);
  if (sizes[1] > 0) s.val = data.subset(s.val_idx);
  if (sizes[2] > 0) s.test = data.subset(s.test_idx);
  return s;
}

namespace detail {

inline void check_data_dims(const ModelBundle& b, const SignalDataset& d) {
  if (d.channels() != b.encoder.channels || d.time_len() != b.encoder.time_len) {
    throw FormatError("dataset is " + std::to_string(d.channels()) + "x" + std::to_string(d.time_len()) +
                          " but the model expects " + std::to_string(b.encoder.channels) + "x" +
                          std::to_string(b.encoder.time_len),
                      0);
  }
}

inline double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

inline Var reconstruction_loss(ReconstructionLoss kind, Var x_hat, const Tensor& x, const Mask& mask) {
  return kind == ReconstructionLoss::Similarity ? ad::similarity_loss(x_hat, x, mask) : ad::mse_loss(x_hat, x, mask);
}

inline std::uint64_t validation_mask_seed(std::uint64_t seed) { return mix64(seed ^ streams::kValidationMask); }

}  // namespace detail

/// Masked reconstruction loss on a dataset using a fixed set of masks (one
/// per batch, identical across calls), averaged per sample.
inline double reconstruction_eval(const ModelBundle& bundle, const SignalDataset& data, const TrainConfig& cfg) {
  detail::check_data_dims(bundle, data);
  BatchLoader loader(data);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  MaskGenerator masks({data.channels(), data.time_len(), cfg.mask_ratio, detail::validation_mask_seed(cfg.seed), 0});
  double total = 0.0;
  for (auto batch : batches_of(order, cfg.batch_size)) {
    const Tensor x = loader.samples(batch);
    const Mask mask = masks.next();
    Graph g;
    ModelGraph m(g, bundle, false);
    Var loss = detail::reconstruction_loss(cfg.loss, m.decode(m.encode(g.constant(apply_mask(x, mask)))), x, mask);
    total += loss.value().item() * static_cast<double>(batch.size());
  }
  return total / static_cast<double>(data.size());
}

struct PretrainResult {
  ModelBundle bundle;
  RunLog log;
};

/// Masked-reconstruction pretraining. One fresh mask per batch per epoch,
/// shared by the samples of the batch. Labels are never read.
inline PretrainResult pretrain(const SignalDataset& train, const SignalDataset* val, ModelBundle bundle,
                               const TrainConfig& cfg) {
  cfg.validate();
  if (bundle.mode() != ModelMode::Pretrain) throw ModeError("pretrain requires a model with a decoder");
  detail::check_data_dims(bundle, train);
  if (val) detail::check_data_dims(bundle, *val);
  BatchLoader loader(train);
  MaskGenerator masks({train.channels(), train.time_len(), cfg.mask_ratio, cfg.seed, 0});
  AdamState adam;
  RunLog log;
  log.label = "pretrain";
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const double lr = cfg.lr(epoch);
    const auto order = shuffled_indices(train.size(), cfg.seed, streams::kShuffle + epoch);
    double total = 0.0;
    std::size_t batch_id = 0;
    for (auto batch : batches_of(order, cfg.batch_size)) {
      const Tensor x = loader.samples(batch);
      const Mask mask = masks.next();
      Graph g;
      ModelGraph m(g, bundle);
      try {
        Var loss = detail::reconstruction_loss(cfg.loss, m.decode(m.encode(g.constant(apply_mask(x, mask)))), x, mask);
        total += loss.value().item() * static_cast<double>(batch.size());
        adam_step(bundle.params, g.backward(loss).named(), adam, lr);
      } catch (const DegenerateLossError& e) {
        throw DegenerateLossError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch " +
                                  std::to_string(batch_id) + ")");
      }
      ++batch_id;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = total / static_cast<double>(train.size());
    if (val) rec.val_loss = reconstruction_eval(bundle, *val, cfg);
    rec.wall_ms = detail::elapsed_ms(start);
    log.epochs.push_back(rec);
  }
  log.mask_draws = masks.draws();
  log.label_reads = loader.label_reads();
  return {std::move(bundle), std::move(log)};
}

/// Head output affine from training labels: centroid and per-axis spread.
inline HeadConfig head_config_for(const SignalDataset& train) {
  const Label m = label_mean(train);
  const Label s = label_std(train);
  return {{m.x, m.y}, {s.x > 0.0 ? s.x : 1.0, s.y > 0.0 ? s.y : 1.0}};
}

/// RMSE in mm of a fine-tune model over a dataset. No gradients are recorded.
inline LossValue evaluate(const ModelBundle& bundle, const SignalDataset& data, std::size_t batch_size = 64) {
  if (bundle.mode() != ModelMode::Finetune) throw ModeError("evaluate requires a fine-tune model");
  if (data.size() == 0) throw ContractError("evaluate requires a non-empty dataset");
  if (batch_size == 0) throw ContractError("batch size must be positive");
  detail::check_data_dims(bundle, data);
  BatchLoader loader(data);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> pred, target;
  pred.reserve(2 * data.size());
  target.reserve(2 * data.size());
  for (auto batch : batches_of(order, batch_size)) {
    Graph g;
    ModelGraph m(g, bundle, false);
    const Tensor p = m.predict(m.encode(g.constant(loader.samples(batch)))).value();
    const Tensor t = loader.labels(batch);
    pred.insert(pred.end(), p.data().begin(), p.data().end());
    target.insert(target.end(), t.data().begin(), t.data().end());
  }
  return rmse_mm(pred, target);
}

struct FinetuneResult {
  ModelBundle bundle;
  RunLog log;
};

/// Supervised fine-tuning of every parameter on unmasked inputs, minimizing
/// mean squared Euclidean distance. train_loss is the RMSE (mm) over the
/// epoch's training batches; val_loss is the validation RMSE after the epoch.
inline FinetuneResult finetune(ModelBundle bundle, const SignalDataset& train, const SignalDataset* val,
                               const TrainConfig& cfg) {
  cfg.validate();
  if (bundle.mode() != ModelMode::Finetune) throw ModeError("finetune requires a model with a regression head");
  detail::check_data_dims(bundle, train);
  if (val) detail::check_data_dims(bundle, *val);
  BatchLoader loader(train);
  AdamState adam;
  RunLog log;
  log.label = "finetune";
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const double lr = cfg.lr(epoch);
    const auto order = shuffled_indices(train.size(), cfg.seed, streams::kShuffle + epoch);
    double total = 0.0;
    for (auto batch : batches_of(order, cfg.batch_size)) {
      const Tensor x = loader.samples(batch);
      const Tensor y = loader.labels(batch);
      Graph g;
      ModelGraph m(g, bundle);
      Var loss = ad::mean_squared_distance(m.predict(m.encode(g.constant(x))), y);
      total += loss.value().item() * static_cast<double>(batch.size());
      adam_step(bundle.params, g.backward(loss).named(), adam, lr);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = std::sqrt(total / static_cast<double>(train.size()));
    if (val) rec.val_loss = evaluate(bundle, *val, cfg.batch_size).value;
    rec.wall_ms = detail::elapsed_ms(start);
    log.epochs.push_back(rec);
  }
  log.label_reads = loader.label_reads();
  return {std::move(bundle), std::move(log)};
}

}  // namespace emae
