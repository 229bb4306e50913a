#pragma once

// .eegd container (all integers little-endian):
//   "EEGD" | version u32 | N u64 | C u32 | T u32
//   | samples: N*C*T f64, sample-major then (channel, time) row-major
//   | labels: N pairs of f64 (x mm, y mm)

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "emae/binary_io.hpp"
#include "emae/errors.hpp"
#include "emae/rng.hpp"
#include "emae/tensor.hpp"

namespace emae {

inline constexpr std::string_view kDatasetMagic = "EEGD";
inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 4 + 4 + 8 + 4 + 4;

struct Label {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Label&, const Label&) = default;
};

/// N signal matrices of shape C x T with gaze labels in millimeters.
class SignalDataset {
 public:
  SignalDataset() = default;

  SignalDataset(std::size_t channels, std::size_t time_len, std::vector<double> samples, std::vector<Label> labels,
                std::string source = "memory")
      : channels_(channels), time_len_(time_len), samples_(std::move(samples)), labels_(std::move(labels)),
        source_(std::move(source)) {
    validate();
  }

  std::size_t size() const noexcept { return labels_.size(); }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t time_len() const noexcept { return time_len_; }
  std::size_t sample_numel() const noexcept { return channels_ * time_len_; }
  const std::string& source() const noexcept { return source_; }

  std::span<const double> sample(std::size_t i) const {
    return std::span<const double>(samples_).subspan(i * sample_numel(), sample_numel());
  }
  const Label& label(std::size_t i) const { return labels_.at(i); }
  const std::vector<double>& all_samples() const noexcept { return samples_; }
  const std::vector<Label>& labels() const noexcept { return labels_; }

  Tensor sample_tensor(std::size_t i) const {
    auto s = sample(i);
    return Tensor(Shape{channels_, time_len_}, std::vector<double>(s.begin(), s.end()));
  }

  SignalDataset subset(std::span<const std::size_t> indices) const {
    std::vector<double> samples;
    samples.reserve(indices.size() * sample_numel());
    std::vector<Label> labels;
    labels.reserve(indices.size());
    for (std::size_t i : indices) {
      auto s = sample(i);
      samples.insert(samples.end(), s.begin(), s.end());
      labels.push_back(labels_.at(i));
    }
    SignalDataset d;
    d.channels_ = channels_;
    d.time_len_ = time_len_;
    d.samples_ = std::move(samples);
    d.labels_ = std::move(labels);
    d.source_ = source_;
    return d;
  }

  void validate() const {
    if (channels_ == 0 || time_len_ == 0) throw ContractError("dataset C and T must be positive");
    if (labels_.empty()) throw ContractError("dataset must hold at least one sample");
    if (samples_.size() != labels_.size() * sample_numel()) {
      throw ContractError("dataset sample payload does not match N x C x T");
    }
    for (const auto& l : labels_)
      if (!std::isfinite(l.x) || !std::isfinite(l.y)) throw ContractError("dataset labels must be finite");
  }

  friend bool operator==(const SignalDataset& a, const SignalDataset& b) {
    if (a.channels_ != b.channels_ || a.time_len_ != b.time_len_ || a.labels_.size() != b.labels_.size()) return false;
    for (std::size_t i = 0; i < a.samples_.size(); ++i)
      if (std::bit_cast<std::uint64_t>(a.samples_[i]) != std::bit_cast<std::uint64_t>(b.samples_[i])) return false;
    for (std::size_t i = 0; i < a.labels_.size(); ++i) {
      if (std::bit_cast<std::uint64_t>(a.labels_[i].x) != std::bit_cast<std::uint64_t>(b.labels_[i].x) ||
          std::bit_cast<std::uint64_t>(a.labels_[i].y) != std::bit_cast<std::uint64_t>(b.labels_[i].y))
        return false;
    }
    return true;
  }

 private:
  std::size_t channels_ = 0;
  std::size_t time_len_ = 0;
  std::vector<double> samples_;
  std::vector<Label> labels_;
  std::string source_;
};

inline std::vector<char> serialize_dataset(const SignalDataset& d) {
  io::ByteWriter w;
  w.bytes(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.u64(d.size());
  w.u32(static_cast<std::uint32_t>(d.channels()));
  w.u32(static_cast<std::uint32_t>(d.time_len()));
  for (double v : d.all_samples()) w.f64(v);
  for (const auto& l : d.labels()) {
    w.f64(l.x);
    w.f64(l.y);
  }
  return w.buffer();
}

inline void save_dataset(const SignalDataset& d, const std::filesystem::path& path) {
  d.validate();
  io::write_file(path, serialize_dataset(d));
}

inline SignalDataset deserialize_dataset(std::vector<char> bytes, std::string source = "memory") {
  io::ByteReader r(std::move(bytes));
  if (r.bytes(std::min<std::uint64_t>(4, r.remaining()), "magic") != kDatasetMagic) {
    throw FormatError("bad dataset magic (expected \"EEGD\")", 0);
  }
  const auto version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kDatasetVersion) throw FormatError("unsupported dataset version " + std::to_string(version), version_at);
  const auto n_at = r.offset();
  const std::uint64_t n = r.u64("sample count");
  const std::uint32_t c = r.u32("channel count");
  const std::uint32_t t = r.u32("time length");
  if (n == 0) throw FormatError("dataset declares zero samples", n_at);
  if (c == 0 || t == 0) throw FormatError("dataset declares zero channels or time length", n_at + 8);
  const std::uint64_t payload = n * c * t;
  r.need(payload * 8 + n * 16, "dataset payload");
  std::vector<double> samples(payload);
  for (auto& v : samples) {
    const auto at = r.offset();
    v = r.f64("sample value");
    if (!std::isfinite(v)) throw FormatError("non-finite sample value", at);
  }
  std::vector<Label> labels(n);
  for (auto& l : labels) {
    const auto at = r.offset();
    l.x = r.f64("label x");
    l.y = r.f64("label y");
    if (!std::isfinite(l.x) || !std::isfinite(l.y)) throw FormatError("non-finite label", at);
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after labels", r.offset());
  return SignalDataset(c, t, std::move(samples), std::move(labels), std::move(source));
}

inline SignalDataset load_dataset(const std::filesystem::path& path) {
  return deserialize_dataset(io::read_file(path), path.filename().string());
}

/// Per-channel z-scoring across all samples and time steps. Off by default
/// everywhere; constant channels are only centered.
inline SignalDataset zscore_channels(const SignalDataset& d) {
  std::vector<double> samples = d.all_samples();
  const std::size_t c = d.channels(), t = d.time_len(), n = d.size();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < t; ++k) mean += samples[(i * c + ch) * t + k];
    mean /= static_cast<double>(n * t);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < t; ++k) sq += std::pow(samples[(i * c + ch) * t + k] - mean, 2);
    const double sd = std::sqrt(sq / static_cast<double>(n * t));
    const double inv = sd > 0.0 ? 1.0 / sd : 1.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < t; ++k) samples[(i * c + ch) * t + k] = (samples[(i * c + ch) * t + k] - mean) * inv;
  }
  return SignalDataset(c, t, std::move(samples), d.labels(), d.source());
}

struct SynthConfig {
  std::size_t n = 2000;
  std::size_t channels = 128;
  std::size_t time_len = 500;
  double noise_scale = 1.0;
  std::vector<std::size_t> signal_channels{0, 1, 2, 3};
  std::array<double, 2> label_bounds{800.0, 600.0};
  std::uint64_t seed = 0;
  /// Peak amplitude of a planted sinusoid at the far edge of the label range.
  double signal_gain = 2.0;
  /// Oscillation cycles per trial on the first signal channel; channel j
  /// (in signal_channels order) oscillates at base_cycles + j.
  double base_cycles = 4.0;

  void validate() const {
    if (n == 0 || channels == 0 || time_len == 0) throw ContractError("synth N, C and T must be positive");
    if (!(label_bounds[0] > 0.0) || !(label_bounds[1] > 0.0)) throw ContractError("label bounds must be positive");
    if (noise_scale < 0.0) throw ContractError("noise_scale must be non-negative");
    for (std::size_t ch : signal_channels)
      if (ch >= channels) throw ContractError("signal channel " + std::to_string(ch) + " out of range");
  }
};

/// Planted-structure generator. Labels are uniform on [0, x_max] x [0, y_max].
/// Signal channel j carries gain * u_a * sin(2 pi f_j t / T + pi * u_b) where
/// (u_a, u_b) = (x/x_max, y/y_max) for even j and swapped for odd j. Every
/// channel gets pink-like noise: a sum of four AR(1) processes with unit total
/// stationary variance, scaled by noise_scale.
inline SignalDataset synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t c = cfg.channels, t = cfg.time_len;
  std::vector<double> samples(cfg.n * c * t, 0.0);
  std::vector<Label> labels(cfg.n);
  CounterRng label_rng(cfg.seed, streams::kSynth);
  constexpr std::array<double, 4> kPoles{0.5, 0.8, 0.95, 0.99};
  for (std::size_t i = 0; i < cfg.n; ++i) {
    const double u = label_rng.uniform();
    const double v = label_rng.uniform();
    labels[i] = {u * cfg.label_bounds[0], v * cfg.label_bounds[1]};
    double* s = samples.data() + i * c * t;
    if (cfg.noise_scale > 0.0) {
      CounterRng noise_rng(cfg.seed, streams::kSynth + 1 + i);
      const double comp_sd = cfg.noise_scale / std::sqrt(static_cast<double>(kPoles.size()));
      for (std::size_t ch = 0; ch < c; ++ch) {
        double* row = s + ch * t;
        for (double a : kPoles) {
          const double drive = comp_sd * std::sqrt(1.0 - a * a);
          double state = comp_sd * noise_rng.normal();
          for (std::size_t k = 0; k < t; ++k) {
            row[k] += state;
            state = a * state + drive * noise_rng.normal();
          }
        }
      }
    }
    for (std::size_t j = 0; j < cfg.signal_channels.size(); ++j) {
      const double ua = j % 2 == 0 ? u : v;
      const double ub = j % 2 == 0 ? v : u;
      const double freq = cfg.base_cycles + static_cast<double>(j);
      double* row = s + cfg.signal_channels[j] * t;
      for (std::size_t k = 0; k < t; ++k) {
        const double phase = 2.0 * std::numbers::pi * freq * static_cast<double>(k) / static_cast<double>(t);
        row[k] += cfg.signal_gain * ua * std::sin(phase + std::numbers::pi * ub);
      }
    }
  }
  return SignalDataset(c, t, std::move(samples), std::move(labels), "synth");
}

/// Centroid of the labels.
inline Label label_mean(const SignalDataset& d) {
  Label m;
  for (const auto& l : d.labels()) {
    m.x += l.x;
    m.y += l.y;
  }
  m.x /= static_cast<double>(d.size());
  m.y /= static_cast<double>(d.size());
  return m;
}

/// Population standard deviation of each label axis.
inline Label label_std(const SignalDataset& d) {
  const Label m = label_mean(d);
  Label s;
  for (const auto& l : d.labels()) {
    s.x += (l.x - m.x) * (l.x - m.x);
    s.y += (l.y - m.y) * (l.y - m.y);
  }
  s.x = std::sqrt(s.x / static_cast<double>(d.size()));
  s.y = std::sqrt(s.y / static_cast<double>(d.size()));
  return s;
}

}  // namespace emae
