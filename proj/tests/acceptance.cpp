#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "emae/cli.hpp"
#include "test_util.hpp"

using namespace emae;
using emae::testing::random_tensor;
using emae::testing::scratch_dir;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) { return text::format_double(v); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

EncoderConfig tiny(std::size_t channels, std::size_t time_len) {
  EncoderConfig c;
  c.channels = channels;
  c.time_len = time_len;
  c.temporal_kernel = 4;
  c.temporal_stride = 4;
  c.filters = 2;
  c.embed_dim = 8;
  c.num_layers = 1;
  c.num_heads = 2;
  return c;
}

const DecoderConfig kDecoders[] = {DecoderConfig::mlp(), DecoderConfig::blocks(1), DecoderConfig::blocks(2)};

Outcome gradients() {
  const Tensor x = random_tensor({2, 8, 32}, 1);
  const Mask mask = generate_mask({8, 32, 0.5, 2, 0});
  const Tensor xm = apply_mask(x, mask);
  double worst = 0;
  std::string where;
  for (const auto& dec : kDecoders) {
    auto b = make_pretrain_bundle(tiny(8, 32), dec, 3);
    const auto r = emae::testing::check_bundle_gradients(b, [&](Graph& g, ModelGraph& m) {
      return ad::similarity_loss(m.decode(m.encode(g.constant(xm))), x, mask);
    });
    if (r.worst >= worst) {
      worst = r.worst;
      where = dec.tag() + ":" + r.where;
    }
  }
  return {worst <= 1e-4, "max relative error " + fmt(worst) + " at " + where + " (limit 1e-4)"};
}

Outcome masking() {
  for (std::size_t m = 1; m <= 8; ++m)
    for (std::size_t n = 1; n <= 8; ++n)
      for (int k = 1; k <= 9; ++k) {
        const auto got = generate_mask({m, n, k / 10.0, 17, m * 100 + n}).size();
        if (got != m * n * k / 10)
          return {false, "count " + std::to_string(got) + " for " + std::to_string(m) + "x" + std::to_string(n)};
      }
  MaskGenerator gen({4, 4, 0.5, 5, 0});
  std::vector<double> freq(16, 0.0);
  const int draws = 10000;
  for (int d = 0; d < draws; ++d)
    for (std::size_t i : gen.next().flat_indices) freq[i] += 1.0 / draws;
  double dev = 0;
  for (double f : freq) dev = std::max(dev, std::abs(f - 0.5));
  if (dev > 0.02) return {false, "position frequency deviates by " + fmt(dev)};
  for (std::uint64_t c = 0; c < 1000; ++c) {
    const Mask mask = generate_mask({6, 10, 0.1 + 0.1 * static_cast<double>(c % 9), 9, c});
    const Tensor x = random_tensor({3, 6, 10}, c);
    const Tensor a = apply_mask(x, mask), b = apply_reversed_mask(x, mask);
    for (std::size_t i = 0; i < x.numel(); ++i)
      if (a[i] + b[i] != x[i] || (a[i] != 0.0 && b[i] != 0.0))
        return {false, "complementarity broken in case " + std::to_string(c)};
  }
  return {true, "counts exact on 576 cells, max frequency deviation " + fmt(dev) + " (limit 0.02), 1000 complement cases"};
}

Outcome loss_semantics() {
  const Mask first_two{{0, 1}, 1, 4};
  const double zero = similarity_loss(Tensor(Shape{1, 1, 4}, {1, 2, -5, 100}), Tensor(Shape{1, 1, 4}, {1, 2, 9, 9}),
                                      first_two).value;
  const double fifth = similarity_loss(Tensor(Shape{1, 1, 4}, {2, 1, 7, 7}), Tensor(Shape{1, 1, 4}, {1, 2, 0, 0}),
                                       first_two).value;
  const double two = similarity_loss(Tensor(Shape{1, 1, 4}, {-1, -2, 3, 3}), Tensor(Shape{1, 1, 4}, {1, 2, 9, 9}),
                                     first_two).value;
  const double hand_err = std::max({std::abs(zero), std::abs(fifth - 0.2), std::abs(two - 2.0)});
  if (hand_err > 1e-12) return {false, "hand values off by " + fmt(hand_err)};
  double worst = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const Mask m = generate_mask({5, 7, 0.4, s, 0});
    const Tensor x = random_tensor({3, 5, 7}, s), x_hat = random_tensor({3, 5, 7}, s + 500);
    const double l = similarity_loss(x_hat, x, m).value;
    if (!(l >= 0.0 && l <= 2.0)) return {false, "loss " + fmt(l) + " outside [0,2]"};
    double dot = 0, na = 0, nb = 0;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t i : m.flat_indices) {
        dot += x_hat[b * 35 + i] * x[b * 35 + i];
        na += x_hat[b * 35 + i] * x_hat[b * 35 + i];
        nb += x[b * 35 + i] * x[b * 35 + i];
      }
    worst = std::max(worst, std::abs(l - (1.0 - dot / (std::sqrt(na) * std::sqrt(nb) + 1e-12))));
    Tensor perturbed = x_hat, scaled = x_hat;
    const auto bits = m.indicator();
    CounterRng rng(s, 3);
    for (std::size_t i = 0; i < perturbed.numel(); ++i) {
      if (!bits[i % 35]) perturbed[i] += 10.0 * rng.normal();
      scaled[i] *= 0.01 + static_cast<double>(s);
    }
    worst = std::max(worst, std::abs(similarity_loss(perturbed, x, m).value - l));
    worst = std::max(worst, std::abs(similarity_loss(scaled, x, m).value - l));
  }
  return {worst <= 1e-12, "hand values within " + fmt(hand_err) + ", oracle/invariance max deviation " + fmt(worst) +
                              " (limit 1e-12)"};
}

SignalDataset small_data(std::size_t n, std::size_t channels, std::size_t time_len, std::uint64_t seed) {
  SynthConfig s;
  s.n = n;
  s.channels = channels;
  s.time_len = time_len;
  s.base_cycles = 2;
  s.seed = seed;
  return synth_generate(s);
}

Outcome schedule() {
  const auto data = small_data(8, 4, 16, 1);
  auto pc = TrainConfig::pretrain_defaults();
  pc.batch_size = 8;
  const auto pre = pretrain(data, nullptr, make_pretrain_bundle(tiny(4, 16), DecoderConfig::blocks(2), 0), pc);
  auto fc = TrainConfig::finetune_defaults();
  fc.batch_size = 8;
  const auto fin = finetune(make_scratch_bundle(tiny(4, 16), head_config_for(data), 0), data, nullptr, fc);
  if (pre.log.epochs.size() != 30 || fin.log.epochs.size() != 15) return {false, "wrong epoch counts"};
  auto expected = [](double base, std::size_t e, std::size_t step) {
    const std::size_t k = e / step;
    return k == 0 ? base : k == 1 ? base / 10 : base / 100;
  };
  double worst = 0;
  for (const auto& r : pre.log.epochs)
    worst = std::max(worst, std::abs(r.lr - expected(1e-4, r.epoch, 10)) / expected(1e-4, r.epoch, 10));
  for (const auto& r : fin.log.epochs)
    worst = std::max(worst, std::abs(r.lr - expected(1e-4, r.epoch, 6)) / expected(1e-4, r.epoch, 6));
  return {worst <= 1e-15, "pretrain 30 epochs, fine-tune 15 epochs, max relative lr deviation " + fmt(worst)};
}

Outcome overfit() {
  const auto batch = small_data(2, 4, 16, 8);
  EncoderConfig enc = tiny(4, 16);
  enc.filters = 4;
  enc.embed_dim = 16;
  TrainConfig pc;
  pc.epochs = 500;
  pc.base_lr = 3e-3;
  pc.lr_step_size = 1000;
  pc.batch_size = 2;
  pc.mask_ratio = 0.5;
  double worst_pre = 0;
  for (const auto& dec : kDecoders) {
    const auto r = pretrain(batch, nullptr, make_pretrain_bundle(enc, dec, 2), pc);
    worst_pre = std::max(worst_pre, r.log.epochs.back().train_loss);
  }
  const auto fbatch = small_data(4, 4, 16, 8);
  TrainConfig fc = pc;
  fc.base_lr = 1e-2;
  fc.batch_size = 4;
  const auto ft = finetune(make_scratch_bundle(tiny(4, 16), head_config_for(fbatch), 2), fbatch, nullptr, fc);
  const double rmse = evaluate(ft.bundle, fbatch).value;
  return {worst_pre < 0.01 && rmse < 1.0,
          "worst final similarity loss " + fmt(worst_pre) + " (limit 0.01), fine-tune RMSE " + fmt(rmse) +
              " mm (limit 1)"};
}

Outcome mae_benefit() {
  SynthConfig s;
  s.n = 2000;
  s.channels = 16;
  s.time_len = 128;
  s.seed = 2024;
  const auto split = split_dataset(synth_generate(s), 0);
  ExperimentSetup setup;
  setup.encoder.channels = 16;
  setup.encoder.time_len = 128;
  setup.pretrain.base_lr = 1e-3;
  setup.finetune.base_lr = 1e-3;
  std::vector<double> mae_half, mae_final, scratch_full;
  std::ostringstream per_seed;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto mae = run_mae_cell(split, setup, 0.4, DecoderConfig::blocks(2), seed);
    const auto scratch = run_scratch_cell(split, setup, seed);
    const auto& me = mae.finetune_log.epochs;
    const auto& se = scratch.finetune_log.epochs;
    mae_half.push_back(me[7].val_loss);
    mae_final.push_back(me.back().val_loss);
    scratch_full.push_back(se.back().val_loss);
    per_seed << " seed" << seed << "[mae@8=" << text::format_fixed(me[7].val_loss, 2)
             << " mae@15=" << text::format_fixed(me.back().val_loss, 2)
             << " scratch@15=" << text::format_fixed(se.back().val_loss, 2) << "]";
  }
  const double a = median(mae_half), b = median(scratch_full), c = median(mae_final);
  return {a <= b && c <= b, "median val RMSE mm: mae@8=" + text::format_fixed(a, 2) + " mae@15=" +
                                text::format_fixed(c, 2) + " scratch@15=" + text::format_fixed(b, 2) + ";" +
                                per_seed.str()};
}

int run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  return cli::run(std::move(args), out, err);
}

Outcome determinism() {
  const auto root = scratch_dir("acceptance_determinism");
  const std::vector<std::string> enc{"--temporal-kernel", "4", "--temporal-stride", "4", "--filters", "2",
                                     "--embed-dim", "8", "--layers", "1", "--heads", "2"};
  auto with = [&](std::vector<std::string> a) {
    a.insert(a.end(), enc.begin(), enc.end());
    return a;
  };
  for (const char* tag : {"a", "b"}) {
    const auto d = (root / tag).string();
    std::filesystem::create_directories(d);
    const std::string data = d + "/d.eegd";
    int code = run_cli({"synth", "--n", "80", "--channels", "4", "--time", "16", "--seed", "5", "--out", data});
    code |= run_cli(with({"pretrain", "--serial", "--data", data, "--out", d + "/pre.emae", "--epochs", "3",
                          "--batch-size", "16", "--curves", d + "/pre.svg"}));
    code |= run_cli({"finetune", "--serial", "--ckpt", d + "/pre.emae", "--data", data, "--out", d + "/ft.emae",
                     "--epochs", "3", "--batch-size", "16", "--curves", d + "/ft.svg"});
    code |= run_cli(with({"sweep", "--serial", "--data", data, "--out-dir", d + "/sweep", "--ratios", "0.3,0.6",
                          "--decoders", "mlp,tb2", "--runs", "2", "--pretrain-epochs", "1", "--finetune-epochs", "2",
                          "--batch-size", "16", "--jobs", "4"}));
    if (code != 0) return {false, "a command failed in run " + std::string(tag)};
  }
  std::size_t compared = 0;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(root / "a")) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), root / "a");
    if (io::read_file(entry.path()) != io::read_file(root / "b" / rel)) return {false, rel.string() + " differs"};
    ++compared;
  }
  return {compared >= 10, std::to_string(compared) + " output files byte-identical across two serial runs"};
}

template <class F>
bool throws_format(F&& f) {
  try {
    f();
  } catch (const FormatError&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

Outcome round_trips() {
  const auto dir = scratch_dir("acceptance_roundtrip");
  for (const auto& dec : kDecoders) {
    save_checkpoint(make_pretrain_bundle(tiny(8, 32), dec, 4), dir / "a.emae");
    save_checkpoint(load_checkpoint(dir / "a.emae"), dir / "b.emae");
    if (io::read_file(dir / "a.emae") != io::read_file(dir / "b.emae")) return {false, dec.tag() + " checkpoint"};
  }
  save_checkpoint(make_scratch_bundle(tiny(8, 32), {{400, 300}, {230, 170}}, 4), dir / "a.emae");
  save_checkpoint(load_checkpoint(dir / "a.emae"), dir / "b.emae");
  if (io::read_file(dir / "a.emae") != io::read_file(dir / "b.emae")) return {false, "fine-tune checkpoint"};
  save_dataset(small_data(30, 8, 32, 4), dir / "a.eegd");
  save_dataset(load_dataset(dir / "a.eegd"), dir / "b.eegd");
  if (io::read_file(dir / "a.eegd") != io::read_file(dir / "b.eegd")) return {false, "dataset"};

  const auto ck = io::read_file(dir / "a.emae"), ds = io::read_file(dir / "a.eegd");
  auto bad_magic = [](std::vector<char> b) {
    b[1] ^= 0x20;
    return b;
  };
  auto cut = [](const std::vector<char>& b, std::size_t n) { return std::vector<char>(b.begin(), b.end() - n); };
  const bool ok = throws_format([&] { deserialize_checkpoint(bad_magic(ck)); }) &&
                  throws_format([&] { deserialize_checkpoint(cut(ck, 1)); }) &&
                  throws_format([&] { deserialize_checkpoint(cut(ck, ck.size() / 2)); }) &&
                  throws_format([&] { deserialize_dataset(bad_magic(ds)); }) &&
                  throws_format([&] { deserialize_dataset(cut(ds, 1)); }) &&
                  throws_format([&] { deserialize_dataset(cut(ds, ds.size() / 2)); });
  return {ok, ok ? "save/load/save byte-identical; bad magic and truncation raise FormatError"
                 : "corruption not rejected as FormatError"};
}

Outcome split_protocol() {
  const std::size_t n = 21464;
  SignalDataset d(1, 1, std::vector<double>(n, 0.0), std::vector<Label>(n, Label{1, 1}));
  const auto s = split_dataset(d, 0);
  std::vector<std::size_t> all;
  for (const auto* v : {&s.train_idx, &s.val_idx, &s.test_idx}) all.insert(all.end(), v->begin(), v->end());
  std::sort(all.begin(), all.end());
  bool exhaustive = all.size() == n;
  for (std::size_t i = 0; exhaustive && i < n; ++i) exhaustive = all[i] == i;
  const bool sizes = s.train.size() == 15024 && s.val.size() == 3219 && s.test.size() == 3221;
  return {sizes && exhaustive, "sizes " + std::to_string(s.train.size()) + "/" + std::to_string(s.val.size()) + "/" +
                                   std::to_string(s.test.size()) + (exhaustive ? ", disjoint and exhaustive" : ", overlap")};
}

struct Criterion {
  const char* name;
  Outcome (*run)();
};

const Criterion kCriteria[] = {
    {"gradient correctness", gradients},   {"masking exactness", masking},
    {"loss semantics", loss_semantics},    {"schedule fidelity", schedule},
    {"overfit sanity", overfit},           {"directional MAE benefit", mae_benefit},
    {"determinism", determinism},          {"format round-trips", round_trips},
    {"split protocol", split_protocol},
};

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> which;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--criterion" && i + 1 < argc) which.push_back(std::atoi(argv[++i]));
  }
  if (which.empty())
    for (int i = 1; i <= 9; ++i) which.push_back(i);
  int failed = 0;
  for (int id : which) {
    if (id < 1 || id > 9) {
      std::cerr << "unknown criterion " << id << "\n";
      return 2;
    }
    const auto& c = kCriteria[id - 1];
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << "criterion " << id << " [" << c.name << "]: " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail
              << " (" << text::format_fixed(secs, 1) << " s)" << std::endl;
    if (!o.pass) ++failed;
  }
  return failed ? 1 : 0;
}
