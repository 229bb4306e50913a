#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "emae/curves.hpp"
#include "emae/text.hpp"
#include "emae/training.hpp"

namespace emae {

/// Everything needed to run one pretrain + fine-tune cell.
struct ExperimentSetup {
  EncoderConfig encoder;
  TrainConfig pretrain = TrainConfig::pretrain_defaults();
  TrainConfig finetune = TrainConfig::finetune_defaults();
};

struct CellResult {
  double rmse_mm = std::numeric_limits<double>::quiet_NaN();
  RunLog pretrain_log;
  RunLog finetune_log;
  ModelBundle model;
};

/// MAE pretraining on the train split, fine-tuning on the train split with
/// validation curves, test RMSE on the test split. `seed` drives every
/// random choice of the cell.
inline CellResult run_mae_cell(const DatasetSplit& split, const ExperimentSetup& setup, double ratio,
                               const DecoderConfig& decoder, std::uint64_t seed) {
  TrainConfig pc = setup.pretrain;
  pc.mask_ratio = ratio;
  pc.seed = seed;
  TrainConfig fc = setup.finetune;
  fc.seed = seed;
  auto pre = pretrain(split.train, &split.val, make_pretrain_bundle(setup.encoder, decoder, seed), pc);
  auto ft = finetune(to_finetune(std::move(pre.bundle), head_config_for(split.train), seed), split.train, &split.val,
                     fc);
  CellResult r;
  r.rmse_mm = evaluate(ft.bundle, split.test, fc.batch_size).value;
  ft.log.test_metric = r.rmse_mm;
  r.pretrain_log = std::move(pre.log);
  r.finetune_log = std::move(ft.log);
  r.model = std::move(ft.bundle);
  return r;
}

/// Scratch baseline: same encoder, no pretraining.
inline CellResult run_scratch_cell(const DatasetSplit& split, const ExperimentSetup& setup, std::uint64_t seed) {
  TrainConfig fc = setup.finetune;
  fc.seed = seed;
  auto ft = finetune(make_scratch_bundle(setup.encoder, head_config_for(split.train), seed), split.train, &split.val,
                     fc);
  CellResult r;
  r.rmse_mm = evaluate(ft.bundle, split.test, fc.batch_size).value;
  ft.log.test_metric = r.rmse_mm;
  r.finetune_log = std::move(ft.log);
  r.model = std::move(ft.bundle);
  return r;
}

struct SweepConfig {
  std::vector<double> ratios{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  std::vector<std::string> decoders{"mlp", "tb1", "tb2"};
  std::size_t runs = 5;
  std::uint64_t seed_base = 0;
  std::size_t jobs = 1;
  ExperimentSetup setup;
};

struct SweepRow {
  double ratio = 0.0;
  std::string decoder;
  std::size_t run = 0;
  std::uint64_t seed = 0;
  double rmse_mm = std::numeric_limits<double>::quiet_NaN();
  std::string error;
  std::exception_ptr failure;
  RunLog finetune_log;

  bool ok() const { return error.empty(); }
};

struct SweepSummary {
  double ratio = 0.0;
  std::string decoder;
  std::size_t n = 0;
  double mean = std::numeric_limits<double>::quiet_NaN();
  /// Sample standard deviation (n - 1); NaN when n < 2.
  double stddev = std::numeric_limits<double>::quiet_NaN();
};

/// Runs every (ratio, decoder, run) cell. Rows come back in that nesting
/// order regardless of `jobs`. A failing cell records its error and the
/// sweep continues.
inline std::vector<SweepRow> run_sweep(const DatasetSplit& split, const SweepConfig& cfg) {
  for (const auto& tag : cfg.decoders) DecoderConfig::from_tag(tag);
  std::vector<SweepRow> rows;
  for (double r : cfg.ratios)
    for (const auto& dec : cfg.decoders)
      for (std::size_t run = 0; run < cfg.runs; ++run) {
        SweepRow row;
        row.ratio = r;
        row.decoder = dec;
        row.run = run;
        row.seed = cfg.seed_base + run;
        rows.push_back(std::move(row));
      }
  auto work = [&](SweepRow& row) {
    try {
      const auto res = run_mae_cell(split, cfg.setup, row.ratio, DecoderConfig::from_tag(row.decoder), row.seed);
      row.rmse_mm = res.rmse_mm;
      row.finetune_log = res.finetune_log;
    } catch (const std::exception& e) {
      row.error = e.what();
      row.failure = std::current_exception();
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(cfg.jobs, rows.size()));
  if (jobs == 1) {
    for (auto& row : rows) work(row);
    return rows;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < jobs; ++j) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < rows.size(); i = next++) work(rows[i]);
    });
  }
  for (auto& t : pool) t.join();
  return rows;
}

inline std::vector<SweepSummary> summarize_sweep(const std::vector<SweepRow>& rows) {
  std::vector<SweepSummary> out;
  std::map<std::pair<double, std::string>, std::size_t> where;
  std::vector<std::vector<double>> values;
  for (const auto& row : rows) {
    const auto key = std::make_pair(row.ratio, row.decoder);
    auto it = where.find(key);
    if (it == where.end()) {
      it = where.emplace(key, out.size()).first;
      out.push_back({row.ratio, row.decoder, 0, 0.0, 0.0});
      values.emplace_back();
    }
    if (row.ok()) values[it->second].push_back(row.rmse_mm);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& v = values[i];
    SweepSummary& s = out[i];
    s.n = v.size();
    s.mean = std::numeric_limits<double>::quiet_NaN();
    s.stddev = std::numeric_limits<double>::quiet_NaN();
    if (v.empty()) continue;
    double sum = 0.0;
    for (double x : v) sum += x;
    s.mean = sum / static_cast<double>(v.size());
    if (v.size() < 2) continue;
    double sq = 0.0;
    for (double x : v) sq += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(v.size() - 1));
  }
  return out;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "ratio,decoder,run,seed,rmse_mm\n";
  for (const auto& r : rows) {
    out += text::format_double(r.ratio) + ',' + r.decoder + ',' + std::to_string(r.run) + ',' +
           std::to_string(r.seed) + ',' + detail::csv_number(r.rmse_mm) + '\n';
  }
  return out;
}

inline std::string sweep_summary_csv(const std::vector<SweepSummary>& cells) {
  std::string out = "ratio,decoder,n,mean_rmse_mm,std_rmse_mm\n";
  for (const auto& c : cells) {
    out += text::format_double(c.ratio) + ',' + c.decoder + ',' + std::to_string(c.n) + ',' +
           detail::csv_number(c.mean) + ',' + detail::csv_number(c.stddev) + '\n';
  }
  return out;
}

}  // namespace emae
