#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "emae/checkpoint.hpp"
#include "emae/curves.hpp"
#include "emae/data.hpp"
#include "emae/masking.hpp"
#include "emae/sweep.hpp"
#include "emae/text.hpp"
#include "emae/training.hpp"

namespace emae::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kFormat = 3, kDegenerate = 4 };

class UsageError : public Error {
 public:
  using Error::Error;
};

/// Maps an in-flight exception to an exit code and prints it.
inline int report_exception(std::exception_ptr ep, std::ostream& err) {
  try {
    std::rethrow_exception(ep);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ModeError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kFormat;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kFormat;
  } catch (const ImportError& e) {
    err << "import error: " << e.what() << "\n";
    return kFormat;
  } catch (const DegenerateLossError& e) {
    err << "degenerate loss: " << e.what() << "\n";
    return kDegenerate;
  } catch (const NumericError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kDegenerate;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

/// True when EMAE_SERIAL=1 is set in the environment.
inline bool serial_from_env() {
  const char* v = std::getenv("EMAE_SERIAL");
  return v != nullptr && std::string_view(v) == "1";
}

struct Common {
  std::string config;
  bool serial = false;
  std::uint64_t split_seed = 0;
};

inline void add_train_options(CLI::App* sub, TrainConfig& cfg) {
  sub->add_option("--epochs", cfg.epochs, "Training epochs")->capture_default_str();
  sub->add_option("--batch-size", cfg.batch_size, "Mini-batch size")->capture_default_str();
  sub->add_option("--lr", cfg.base_lr, "Base learning rate")->capture_default_str();
  sub->add_option("--lr-step", cfg.lr_step_size, "Epochs between learning-rate decays")->capture_default_str();
  sub->add_option("--lr-factor", cfg.lr_decay_factor, "Learning-rate decay factor")->capture_default_str();
  sub->add_option("--seed", cfg.seed, "Seed for initialization, shuffling and masks")->capture_default_str();
}

inline void add_encoder_options(CLI::App* sub, EncoderConfig& enc) {
  sub->add_option("--temporal-kernel", enc.temporal_kernel, "Temporal convolution width")->capture_default_str();
  sub->add_option("--temporal-stride", enc.temporal_stride, "Temporal convolution stride")->capture_default_str();
  sub->add_option("--filters", enc.filters, "Temporal filters")->capture_default_str();
  sub->add_option("--embed-dim", enc.embed_dim, "Token embedding width")->capture_default_str();
  sub->add_option("--layers", enc.num_layers, "Encoder transformer blocks")->capture_default_str();
  sub->add_option("--heads", enc.num_heads, "Attention heads")->capture_default_str();
  sub->add_option("--mlp-ratio", enc.mlp_ratio, "Block MLP width relative to the embedding")->capture_default_str();
}

inline void add_common_options(CLI::App* sub, Common& c, bool with_split = true) {
  sub->add_option("--config", c.config, "key=value file; flags given on the command line win");
  sub->add_flag("--serial", c.serial, "Serial mode (also EMAE_SERIAL=1): zero wall_ms, single job");
  if (with_split) sub->add_option("--split-seed", c.split_seed, "Seed of the 70/15/15 split")->capture_default_str();
}

inline std::filesystem::path sibling(const std::string& out, const std::string& name) {
  return std::filesystem::path(out).parent_path() / name;
}

inline void check_mask_ratio(double r) {
  if (!(r > 0.0 && r <= 1.0)) throw UsageError("--mask-ratio must be in (0, 1], got " + text::format_double(r));
}

inline EncoderConfig encoder_for(EncoderConfig enc, const SignalDataset& d) {
  enc.channels = d.channels();
  enc.time_len = d.time_len();
  enc.validate();
  return enc;
}

/// Expands `--config <path>` into flags placed before the command-line ones.
/// Keys must name options of the chosen subcommand.
inline std::vector<std::string> expand_config(const std::vector<std::string>& args, const CLI::App& app) {
  if (args.empty()) return args;
  std::optional<std::string> path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (!path) return args;
  const CLI::App* sub = nullptr;
  for (const CLI::App* s : app.get_subcommands({}))
    if (s->get_name() == args[0]) sub = s;
  if (!sub) return args;
  const auto bytes = io::read_file(*path);
  std::size_t bad = 0;
  const auto lines = text::parse_key_values(std::string_view(bytes.data(), bytes.size()), &bad);
  if (bad) throw UsageError("malformed line " + std::to_string(bad) + " in config file " + *path);
  std::vector<std::string> out{args[0]};
  for (const auto& kv : lines) {
    if (kv.key == "config" || sub->get_option_no_throw("--" + kv.key) == nullptr) {
      throw UsageError("unknown config key '" + kv.key + "' (line " + std::to_string(kv.line_no) + " of " + *path +
                       ")");
    }
    out.push_back("--" + kv.key + "=" + kv.value);
  }
  out.insert(out.end(), args.begin() + 1, args.end());
  return out;
}

inline std::string describe_split(const DatasetSplit& s) {
  return "split train=" + std::to_string(s.train.size()) + " val=" + std::to_string(s.val.size()) +
         " test=" + std::to_string(s.test.size());
}

inline void require_full_split(const DatasetSplit& s) {
  if (s.val.size() == 0 || s.test.size() == 0) {
    throw UsageError("dataset too small for a train/val/test split (need at least 7 samples)");
  }
}

/// In-process entry point. `args` excludes the program name.
inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Masked-autoencoder pretraining and fine-tuning for multichannel signal matrices", "emae"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.failure_message(CLI::FailureMessage::help);

  Common common;

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Masked-reconstruction pretraining; writes a checkpoint and loss CSV");
  std::string pre_data, pre_out, pre_log, pre_curves, pre_decoder = "tb2", pre_loss = "similarity";
  TrainConfig pre_cfg = TrainConfig::pretrain_defaults();
  pre_cfg.mask_ratio = 0.4;
  EncoderConfig pre_enc;
  pre->add_option("--data", pre_data, "Dataset (.eegd)")->required();
  pre->add_option("--out", pre_out, "Checkpoint to write (.emae)")->required();
  pre->add_option("--mask-ratio", pre_cfg.mask_ratio, "Fraction of elements masked, in (0, 1]")->capture_default_str();
  pre->add_option("--decoder", pre_decoder, "Decoder: mlp, tb1 or tb2")->capture_default_str();
  pre->add_option("--loss", pre_loss, "Reconstruction loss: similarity or mse")->capture_default_str();
  pre->add_option("--log", pre_log, "Loss CSV (default: pretrain_loss.csv next to --out)");
  pre->add_option("--curves", pre_curves, "Optional SVG of the loss curve");
  add_train_options(pre, pre_cfg);
  add_encoder_options(pre, pre_enc);
  add_common_options(pre, common);

  // finetune
  auto* fin = app.add_subcommand("finetune", "Fine-tune a pretrained encoder (or a scratch one) for gaze regression");
  std::string fin_ckpt, fin_data, fin_out, fin_log, fin_curves, fin_import, fin_name_map;
  bool fin_scratch = false;
  TrainConfig fin_cfg = TrainConfig::finetune_defaults();
  EncoderConfig fin_enc;
  fin->add_option("--ckpt", fin_ckpt, "Pretrain checkpoint (.emae)");
  fin->add_flag("--scratch", fin_scratch, "Train a freshly initialized encoder instead of --ckpt");
  fin->add_option("--data", fin_data, "Dataset (.eegd)")->required();
  fin->add_option("--out", fin_out, "Fine-tuned model to write (.emae)")->required();
  fin->add_option("--log", fin_log, "Loss CSV (default: finetune_loss.csv next to --out)");
  fin->add_option("--curves", fin_curves, "Optional SVG of the validation curve");
  fin->add_option("--import-weights", fin_import, "External checkpoint to copy tensors from");
  fin->add_option("--name-map", fin_name_map, "external=internal tensor name pairs for --import-weights");
  add_train_options(fin, fin_cfg);
  add_encoder_options(fin, fin_enc);
  add_common_options(fin, common);

  // eval
  auto* ev = app.add_subcommand("eval", "RMSE (mm) of a fine-tuned model or a baseline on a dataset split");
  std::string ev_model, ev_data, ev_split = "test", ev_baseline;
  std::size_t ev_batch = 64;
  ev->add_option("--model", ev_model, "Fine-tuned model (.emae)");
  ev->add_option("--baseline", ev_baseline, "Baseline instead of a model: mean")
      ->check(CLI::IsMember({"mean"}));
  ev->add_option("--data", ev_data, "Dataset (.eegd)")->required();
  ev->add_option("--split", ev_split, "all, train, val or test")
      ->check(CLI::IsMember({"all", "train", "val", "test"}))
      ->capture_default_str();
  ev->add_option("--batch-size", ev_batch, "Evaluation batch size")->capture_default_str();
  add_common_options(ev, common);

  // sweep
  auto* sw = app.add_subcommand("sweep", "Masking-ratio x decoder grid of pretrain + fine-tune runs");
  std::string sw_data, sw_out_dir;
  SweepConfig sw_cfg;
  sw->add_option("--data", sw_data, "Dataset (.eegd)")->required();
  sw->add_option("--out-dir", sw_out_dir, "Directory for sweep.csv, sweep_summary.csv and curves.svg")->required();
  sw->add_option("--ratios", sw_cfg.ratios, "Masking ratios")->delimiter(',')->capture_default_str();
  sw->add_option("--decoders", sw_cfg.decoders, "Decoders")->delimiter(',')->capture_default_str();
  sw->add_option("--runs", sw_cfg.runs, "Runs per cell")->capture_default_str();
  sw->add_option("--seed", sw_cfg.seed_base, "Seed of run 0; run i uses seed + i")->capture_default_str();
  sw->add_option("--jobs", sw_cfg.jobs, "Cells run in parallel")->capture_default_str();
  sw->add_option("--pretrain-epochs", sw_cfg.setup.pretrain.epochs, "Pretraining epochs")->capture_default_str();
  sw->add_option("--pretrain-lr", sw_cfg.setup.pretrain.base_lr, "Pretraining base lr")->capture_default_str();
  sw->add_option("--finetune-epochs", sw_cfg.setup.finetune.epochs, "Fine-tuning epochs")->capture_default_str();
  sw->add_option("--finetune-lr", sw_cfg.setup.finetune.base_lr, "Fine-tuning base lr")->capture_default_str();
  std::size_t sw_batch = 64;
  sw->add_option("--batch-size", sw_batch, "Mini-batch size (both phases)")->capture_default_str();
  add_encoder_options(sw, sw_cfg.setup.encoder);
  add_common_options(sw, common);

  // synth
  auto* sy = app.add_subcommand("synth", "Write a synthetic dataset with planted gaze structure");
  SynthConfig sy_cfg;
  std::string sy_out;
  bool sy_zscore = false;
  std::vector<std::size_t> sy_signal;
  sy->add_option("--n", sy_cfg.n, "Samples")->capture_default_str();
  sy->add_option("--channels", sy_cfg.channels, "Channels (C)")->capture_default_str();
  sy->add_option("--time", sy_cfg.time_len, "Time steps (T)")->capture_default_str();
  sy->add_option("--seed", sy_cfg.seed, "Generator seed")->capture_default_str();
  sy->add_option("--noise", sy_cfg.noise_scale, "Pink-like noise scale")->capture_default_str();
  sy->add_option("--gain", sy_cfg.signal_gain, "Planted sinusoid amplitude")->capture_default_str();
  sy->add_option("--base-cycles", sy_cfg.base_cycles, "Cycles per trial on the first signal channel")
      ->capture_default_str();
  sy->add_option("--signal-channels", sy_signal, "Channels carrying the planted signal [default: 0,1,2,3]")
      ->delimiter(',');
  sy->add_option("--x-max", sy_cfg.label_bounds[0], "Label x range in mm")->capture_default_str();
  sy->add_option("--y-max", sy_cfg.label_bounds[1], "Label y range in mm")->capture_default_str();
  sy->add_flag("--zscore", sy_zscore, "Per-channel z-score normalization");
  sy->add_option("--out", sy_out, "Dataset to write (.eegd)")->required();
  add_common_options(sy, common, false);

  // mask-demo
  auto* md = app.add_subcommand("mask-demo", "Print one random mask as a 0/1 grid");
  MaskSpec md_spec{4, 4, 0.5, 0, 0};
  md->add_option("--rows", md_spec.rows, "Rows (m)")->capture_default_str();
  md->add_option("--cols", md_spec.cols, "Columns (n)")->capture_default_str();
  md->add_option("--ratio", md_spec.ratio, "Masking ratio in (0, 1]")->capture_default_str();
  md->add_option("--seed", md_spec.rng_seed, "Mask seed")->capture_default_str();
  md->add_option("--counter", md_spec.draw_counter, "Draw counter")->capture_default_str();
  add_common_options(md, common, false);

  try {
    args = expand_config(args, app);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\nRun with --help for more information.\n";
    return kUsage;
  } catch (...) {
    return report_exception(std::current_exception(), err);
  }

  const bool serial = common.serial || serial_from_env();

  try {
    if (pre->parsed()) {
      check_mask_ratio(pre_cfg.mask_ratio);
      if (pre_loss != "similarity" && pre_loss != "mse") throw UsageError("--loss must be similarity or mse");
      pre_cfg.loss = pre_loss == "mse" ? ReconstructionLoss::MSE : ReconstructionLoss::Similarity;
      const DecoderConfig dec = DecoderConfig::from_tag(pre_decoder);
      const SignalDataset data = load_dataset(pre_data);
      const DatasetSplit split = split_dataset(data, common.split_seed);
      err << describe_split(split) << "\n";
      auto res = pretrain(split.train, split.val.size() ? &split.val : nullptr,
                          make_pretrain_bundle(encoder_for(pre_enc, data), dec, pre_cfg.seed), pre_cfg);
      save_checkpoint(res.bundle, pre_out);
      write_text(pre_log.empty() ? sibling(pre_out, "pretrain_loss.csv") : std::filesystem::path(pre_log),
                 runlog_csv(res.log, !serial));
      if (!pre_curves.empty())
        emit_curves({curve_from_log(res.log, curve_label(pre_cfg.mask_ratio, dec.tag()))}, pre_curves);
      out << "final_train_loss=" << text::format_double(res.log.epochs.back().train_loss) << "\n";
      return kOk;
    }

    if (fin->parsed()) {
      if (fin_scratch == !fin_ckpt.empty()) throw UsageError("give exactly one of --ckpt or --scratch");
      if (fin_import.empty() != fin_name_map.empty())
        throw UsageError("--import-weights and --name-map go together");
      const SignalDataset data = load_dataset(fin_data);
      const DatasetSplit split = split_dataset(data, common.split_seed);
      require_full_split(split);
      err << describe_split(split) << "\n";
      const HeadConfig head = head_config_for(split.train);
      ModelBundle bundle = fin_scratch ? make_scratch_bundle(encoder_for(fin_enc, data), head, fin_cfg.seed)
                                       : to_finetune(load_checkpoint(fin_ckpt), head, fin_cfg.seed);
      if (!fin_import.empty()) {
        const auto report = import_external_weights(bundle, fin_import, load_name_map(fin_name_map));
        err << "imported " << report.matched.size() << " tensors, " << report.unmatched.size() << " unmatched\n";
        for (const auto& u : report.unmatched) err << "  unmatched " << u << "\n";
      }
      auto res = finetune(std::move(bundle), split.train, &split.val, fin_cfg);
      const double rmse = evaluate(res.bundle, split.test, fin_cfg.batch_size).value;
      res.log.test_metric = rmse;
      save_checkpoint(res.bundle, fin_out);
      write_text(fin_log.empty() ? sibling(fin_out, "finetune_loss.csv") : std::filesystem::path(fin_log),
                 runlog_csv(res.log, !serial));
      if (!fin_curves.empty())
        emit_curves({curve_from_log(res.log, fin_scratch ? "scratch" : "pretrained")}, fin_curves);
      out << "best_val_epoch=" << res.log.best_val_epoch() << "\n";
      out << "rmse_mm=" << text::format_double(rmse) << "\n";
      return kOk;
    }

    if (ev->parsed()) {
      if (ev_model.empty() == ev_baseline.empty()) throw UsageError("give exactly one of --model or --baseline");
      const SignalDataset data = load_dataset(ev_data);
      std::optional<DatasetSplit> split;
      if (ev_split != "all") split = split_dataset(data, common.split_seed);
      const SignalDataset* target = &data;
      if (split) target = ev_split == "train" ? &split->train : ev_split == "val" ? &split->val : &split->test;
      if (target->size() == 0) throw UsageError("split '" + ev_split + "' is empty");
      double rmse = 0.0;
      if (!ev_baseline.empty()) {
        const Label c = label_mean(split ? split->train : data);
        std::vector<double> pred, truth;
        for (std::size_t i = 0; i < target->size(); ++i) {
          pred.insert(pred.end(), {c.x, c.y});
          truth.insert(truth.end(), {target->label(i).x, target->label(i).y});
        }
        rmse = rmse_mm(pred, truth).value;
      } else {
        rmse = evaluate(load_checkpoint(ev_model), *target, ev_batch).value;
      }
      out << "rmse_mm=" << text::format_double(rmse) << "\n";
      return kOk;
    }

    if (sw->parsed()) {
      for (double r : sw_cfg.ratios) check_mask_ratio(r);
      if (sw_cfg.runs == 0) throw UsageError("--runs must be positive");
      for (const auto& d : sw_cfg.decoders) DecoderConfig::from_tag(d);
      sw_cfg.setup.pretrain.batch_size = sw_cfg.setup.finetune.batch_size = sw_batch;
      if (serial) sw_cfg.jobs = 1;
      const SignalDataset data = load_dataset(sw_data);
      const DatasetSplit split = split_dataset(data, common.split_seed);
      require_full_split(split);
      sw_cfg.setup.encoder = encoder_for(sw_cfg.setup.encoder, data);
      const auto rows = run_sweep(split, sw_cfg);
      const auto summary = summarize_sweep(rows);
      const std::filesystem::path dir(sw_out_dir);
      std::filesystem::create_directories(dir);
      write_text(dir / "sweep.csv", sweep_csv(rows));
      write_text(dir / "sweep_summary.csv", sweep_summary_csv(summary));
      std::vector<CurveSeries> curves;
      for (const auto& r : rows)
        if (r.ok() && r.run == 0) curves.push_back(curve_from_log(r.finetune_log, curve_label(r.ratio, r.decoder)));
      if (!curves.empty()) emit_curves(curves, dir / "curves.svg");
      for (const auto& s : summary) {
        out << curve_label(s.ratio, s.decoder) << " n=" << s.n << " rmse_mm=" << detail::csv_number(s.mean)
            << " +- " << detail::csv_number(s.stddev) << "\n";
      }
      int code = kOk;
      for (const auto& r : rows) {
        if (r.ok()) continue;
        err << "cell " << curve_label(r.ratio, r.decoder) << " run " << r.run << " failed\n";
        code = std::max(code, report_exception(r.failure, err));
      }
      return code;
    }

    if (sy->parsed()) {
      if (!sy_signal.empty()) {
        sy_cfg.signal_channels = sy_signal;
      } else {
        sy_cfg.signal_channels.clear();
        for (std::size_t c = 0; c < std::min<std::size_t>(4, sy_cfg.channels); ++c) sy_cfg.signal_channels.push_back(c);
      }
      SignalDataset d = synth_generate(sy_cfg);
      if (sy_zscore) d = zscore_channels(d);
      save_dataset(d, sy_out);
      out << "wrote " << d.size() << " samples of " << d.channels() << "x" << d.time_len() << " to " << sy_out
          << "\n";
      return kOk;
    }

    if (md->parsed()) {
      check_mask_ratio(md_spec.ratio);
      const Mask mask = generate_mask(md_spec);
      const auto ind = mask.indicator();
      for (std::size_t i = 0; i < md_spec.rows; ++i) {
        for (std::size_t j = 0; j < md_spec.cols; ++j) out << (j ? " " : "") << int{ind[i * md_spec.cols + j]};
        out << "\n";
      }
      out << "masked_count=" << mask.size() << "\n";
      return kOk;
    }
  } catch (...) {
    return report_exception(std::current_exception(), err);
  }
  return kUsage;
}

inline int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(std::move(args), std::cout, std::cerr);
}

}  // namespace emae::cli
