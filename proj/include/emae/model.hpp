#pragma once

// Encoder: temporal convolution -> depthwise spatial convolution -> per-time
// token projection -> readout token + positional table -> pre-norm
// transformer layers -> final layer norm.
//
// Decoders (pretraining only): an MLP over the flattened token sequence, or
// 1-2 transformer blocks followed by a per-token linear patch projection.
// The regression head (fine-tuning only) maps the readout token to (x, y) mm.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "emae/autograd.hpp"
#include "emae/errors.hpp"
#include "emae/rng.hpp"
#include "emae/tensor.hpp"

namespace emae {

struct EncoderConfig {
  std::size_t channels = 128;
  std::size_t time_len = 500;
  std::size_t temporal_kernel = 8;
  std::size_t temporal_stride = 8;
  std::size_t filters = 8;
  std::size_t embed_dim = 32;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  double mlp_ratio = 2.0;

  /// Number of signal tokens L produced by the convolution block.
  std::size_t token_count() const { return (time_len - temporal_kernel) / temporal_stride + 1; }
  std::size_t mlp_hidden() const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(mlp_ratio * static_cast<double>(embed_dim)));
  }

  void validate() const {
    if (channels == 0 || time_len == 0 || temporal_kernel == 0 || temporal_stride == 0 || filters == 0 ||
        embed_dim == 0 || num_heads == 0) {
      throw ContractError("encoder config sizes must be positive");
    }
    if (temporal_kernel > time_len) {
      throw ContractError("temporal_kernel " + std::to_string(temporal_kernel) + " exceeds time_len " +
                          std::to_string(time_len));
    }
    if (embed_dim % num_heads != 0) {
      throw ContractError("embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                          std::to_string(num_heads));
    }
    if (!(mlp_ratio > 0.0)) throw ContractError("mlp_ratio must be positive");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

enum class DecoderKind { MLP, TransformerBlocks };

struct DecoderConfig {
  DecoderKind kind = DecoderKind::TransformerBlocks;
  /// Number of transformer blocks (1 or 2); unused for the MLP decoder.
  std::size_t depth = 2;
  /// MLP hidden width; 0 selects 4 * embed_dim.
  std::size_t hidden = 0;

  static DecoderConfig mlp(std::size_t hidden = 0) { return {DecoderKind::MLP, 0, hidden}; }
  static DecoderConfig blocks(std::size_t depth) { return {DecoderKind::TransformerBlocks, depth, 0}; }

  void validate() const {
    if (kind == DecoderKind::TransformerBlocks && depth != 1 && depth != 2) {
      throw ContractError("transformer-block decoder depth must be 1 or 2, got " + std::to_string(depth));
    }
  }

  /// Short tag used in CLI flags and CSV output: mlp, tb1, tb2.
  std::string tag() const { return kind == DecoderKind::MLP ? "mlp" : "tb" + std::to_string(depth); }

  static DecoderConfig from_tag(const std::string& tag) {
    if (tag == "mlp") return mlp();
    if (tag == "tb1") return blocks(1);
    if (tag == "tb2") return blocks(2);
    throw ContractError("unknown decoder '" + tag + "' (expected mlp, tb1 or tb2)");
  }

  friend bool operator==(const DecoderConfig&, const DecoderConfig&) = default;
};

/// Output affine of the regression head. The trainable layer predicts
/// standardized coordinates; offset/scale map them to millimeters.
struct HeadConfig {
  std::array<double, 2> offset{0.0, 0.0};
  std::array<double, 2> scale{1.0, 1.0};

  friend bool operator==(const HeadConfig&, const HeadConfig&) = default;
};

using ParameterMap = std::map<std::string, Tensor>;

enum class ModelMode { Pretrain, Finetune };

struct ModelBundle {
  EncoderConfig encoder;
  std::optional<DecoderConfig> decoder;
  std::optional<HeadConfig> head;
  ParameterMap params;

  ModelMode mode() const {
    if (decoder.has_value() == head.has_value()) throw ModeError("model must have exactly one of decoder or head");
    return decoder ? ModelMode::Pretrain : ModelMode::Finetune;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
  }
};

inline constexpr double kInitStd = 0.02;
inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

enum class Init { Normal, Zeros, Ones };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
};

inline void block_specs(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t d, std::size_t hidden) {
  out.push_back({prefix + "ln1.gamma", {d}, Init::Ones});
  out.push_back({prefix + "ln1.beta", {d}, Init::Zeros});
  out.push_back({prefix + "attn.qkv.weight", {d, 3 * d}, Init::Normal});
  out.push_back({prefix + "attn.qkv.bias", {3 * d}, Init::Zeros});
  out.push_back({prefix + "attn.proj.weight", {d, d}, Init::Normal});
  out.push_back({prefix + "attn.proj.bias", {d}, Init::Zeros});
  out.push_back({prefix + "ln2.gamma", {d}, Init::Ones});
  out.push_back({prefix + "ln2.beta", {d}, Init::Zeros});
  out.push_back({prefix + "mlp.fc1.weight", {d, hidden}, Init::Normal});
  out.push_back({prefix + "mlp.fc1.bias", {hidden}, Init::Zeros});
  out.push_back({prefix + "mlp.fc2.weight", {hidden, d}, Init::Normal});
  out.push_back({prefix + "mlp.fc2.bias", {d}, Init::Zeros});
}

inline std::vector<ParamSpec> encoder_specs(const EncoderConfig& c) {
  const std::size_t d = c.embed_dim, f = c.filters, l = c.token_count();
  std::vector<ParamSpec> s;
  s.push_back({"encoder.conv_temporal.weight", {f, 1, 1, c.temporal_kernel}, Init::Normal});
  s.push_back({"encoder.conv_temporal.bias", {f}, Init::Zeros});
  s.push_back({"encoder.conv_spatial.weight", {f, 1, c.channels, 1}, Init::Normal});
  s.push_back({"encoder.conv_spatial.bias", {f}, Init::Zeros});
  s.push_back({"encoder.token_proj.weight", {f, d}, Init::Normal});
  s.push_back({"encoder.token_proj.bias", {d}, Init::Zeros});
  s.push_back({"encoder.readout", {d}, Init::Normal});
  s.push_back({"encoder.pos_embed", {l + 1, d}, Init::Normal});
  for (std::size_t i = 0; i < c.num_layers; ++i)
    block_specs(s, "encoder.layers." + std::to_string(i) + ".", d, c.mlp_hidden());
  s.push_back({"encoder.norm.gamma", {d}, Init::Ones});
  s.push_back({"encoder.norm.beta", {d}, Init::Zeros});
  return s;
}

inline std::size_t patch_width(const EncoderConfig& c) {
  const std::size_t l = c.token_count();
  return (c.time_len + l - 1) / l;
}

inline std::vector<ParamSpec> decoder_specs(const EncoderConfig& c, const DecoderConfig& dc) {
  const std::size_t d = c.embed_dim, l = c.token_count();
  std::vector<ParamSpec> s;
  if (dc.kind == DecoderKind::MLP) {
    const std::size_t h = dc.hidden ? dc.hidden : 4 * d;
    s.push_back({"decoder.fc1.weight", {l * d, h}, Init::Normal});
    s.push_back({"decoder.fc1.bias", {h}, Init::Zeros});
    s.push_back({"decoder.fc2.weight", {h, c.channels * c.time_len}, Init::Normal});
    s.push_back({"decoder.fc2.bias", {c.channels * c.time_len}, Init::Zeros});
  } else {
    for (std::size_t i = 0; i < dc.depth; ++i)
      block_specs(s, "decoder.layers." + std::to_string(i) + ".", d, c.mlp_hidden());
    s.push_back({"decoder.norm.gamma", {d}, Init::Ones});
    s.push_back({"decoder.norm.beta", {d}, Init::Zeros});
    s.push_back({"decoder.pred.weight", {d, c.channels * patch_width(c)}, Init::Normal});
    s.push_back({"decoder.pred.bias", {c.channels * patch_width(c)}, Init::Zeros});
  }
  return s;
}

inline std::vector<ParamSpec> head_specs(const EncoderConfig& c) {
  return {{"head.weight", {c.embed_dim, 2}, Init::Normal}, {"head.bias", {2}, Init::Zeros}};
}

// Specs are initialized in list order from one stream, so the values are a
// pure function of (config, seed, stream).
inline void initialize(ParameterMap& params, const std::vector<ParamSpec>& specs, std::uint64_t seed,
                       std::uint64_t stream) {
  CounterRng rng(seed, stream);
  for (const auto& spec : specs) {
    Tensor t(spec.shape, spec.init == Init::Ones ? 1.0 : 0.0);
    if (spec.init == Init::Normal)
      for (double& v : t.data()) v = rng.truncated_normal(kInitStd);
    params[spec.name] = std::move(t);
  }
}

}  // namespace detail

inline ModelBundle make_pretrain_bundle(const EncoderConfig& enc, const DecoderConfig& dec, std::uint64_t seed) {
  enc.validate();
  dec.validate();
  ModelBundle b;
  b.encoder = enc;
  b.decoder = dec;
  detail::initialize(b.params, detail::encoder_specs(enc), seed, streams::kInit);
  detail::initialize(b.params, detail::decoder_specs(enc, dec), seed, streams::kInit + 1);
  return b;
}

/// Fine-tune-mode bundle with a freshly initialized encoder: the no-pretraining
/// baseline. The encoder matches the one make_pretrain_bundle would draw for
/// the same seed.
inline ModelBundle make_scratch_bundle(const EncoderConfig& enc, const HeadConfig& head, std::uint64_t seed) {
  enc.validate();
  ModelBundle b;
  b.encoder = enc;
  b.head = head;
  detail::initialize(b.params, detail::encoder_specs(enc), seed, streams::kInit);
  detail::initialize(b.params, detail::head_specs(enc), seed, streams::kHeadInit);
  return b;
}

/// Drops the decoder and attaches a freshly initialized regression head.
/// Encoder parameters are carried over untouched.
inline ModelBundle to_finetune(ModelBundle bundle, const HeadConfig& head, std::uint64_t seed) {
  if (!bundle.decoder) throw ModeError("to_finetune requires a model with a decoder");
  for (auto it = bundle.params.begin(); it != bundle.params.end();) {
    if (it->first.starts_with("decoder."))
      it = bundle.params.erase(it);
    else
      ++it;
  }
  bundle.decoder.reset();
  bundle.head = head;
  detail::initialize(bundle.params, detail::head_specs(bundle.encoder), seed, streams::kHeadInit);
  return bundle;
}

/// Expected parameter names and shapes for a bundle's configuration.
inline std::vector<std::pair<std::string, Shape>> expected_parameters(const ModelBundle& b) {
  std::vector<detail::ParamSpec> specs = detail::encoder_specs(b.encoder);
  if (b.decoder) {
    auto d = detail::decoder_specs(b.encoder, *b.decoder);
    specs.insert(specs.end(), d.begin(), d.end());
  }
  if (b.head) {
    auto h = detail::head_specs(b.encoder);
    specs.insert(specs.end(), h.begin(), h.end());
  }
  std::vector<std::pair<std::string, Shape>> out;
  for (auto& s : specs) out.emplace_back(std::move(s.name), std::move(s.shape));
  return out;
}

/// Latent representation: the L signal tokens and the readout token.
struct Latents {
  Var tokens;   // [B x L x d]
  Var readout;  // [B x d]
};

/// A bundle's parameters bound into a Graph, plus the forward passes.
class ModelGraph {
 public:
  /// With `trainable` false no backward closures are recorded.
  ModelGraph(Graph& graph, const ModelBundle& bundle, bool trainable = true) : graph_(graph), bundle_(bundle) {
    bundle.mode();
    for (const auto& [name, t] : bundle.params) vars_.emplace(name, graph.parameter(name, t, trainable));
  }

  Var param(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ContractError("model has no parameter '" + name + "'");
    return it->second;
  }

  Latents encode(Var x) const {
    const EncoderConfig& c = bundle_.encoder;
    const Shape& s = x.shape();
    if (s.size() != 3 || s[1] != c.channels || s[2] != c.time_len) {
      throw ShapeError("encoder expects [B x " + std::to_string(c.channels) + " x " + std::to_string(c.time_len) +
                       "], got " + shape_str(s));
    }
    const std::size_t batch = s[0], l = c.token_count(), d = c.embed_dim;
    Var h = ad::reshape(x, {batch, 1, c.channels, c.time_len});
    h = ad::conv2d(h, param("encoder.conv_temporal.weight"), param("encoder.conv_temporal.bias"),
                   {1, c.temporal_stride}, 1);
    h = ad::conv2d(h, param("encoder.conv_spatial.weight"), param("encoder.conv_spatial.bias"), {1, 1}, c.filters);
    h = ad::gelu(h);
    h = ad::permute(ad::reshape(h, {batch, c.filters, l}), {0, 2, 1});
    h = ad::linear(h, param("encoder.token_proj.weight"), param("encoder.token_proj.bias"));
    h = ad::prepend_token(param("encoder.readout"), h);
    h = ad::add_broadcast(h, param("encoder.pos_embed"));
    for (std::size_t i = 0; i < c.num_layers; ++i) h = block(h, "encoder.layers." + std::to_string(i) + ".");
    h = ad::layer_norm(h, param("encoder.norm.gamma"), param("encoder.norm.beta"), kLayerNormEps);
    return {ad::narrow(h, 1, 1, l), ad::reshape(ad::narrow(h, 1, 0, 1), {batch, d})};
  }

  Var decode(const Latents& z) const {
    if (!bundle_.decoder) throw ModeError("decoder_forward called on a fine-tune model");
    const EncoderConfig& c = bundle_.encoder;
    check_tokens(z.tokens);
    const std::size_t batch = z.tokens.shape()[0], l = c.token_count(), d = c.embed_dim;
    if (bundle_.decoder->kind == DecoderKind::MLP) {
      Var h = ad::reshape(z.tokens, {batch, l * d});
      h = ad::gelu(ad::linear(h, param("decoder.fc1.weight"), param("decoder.fc1.bias")));
      h = ad::linear(h, param("decoder.fc2.weight"), param("decoder.fc2.bias"));
      return ad::reshape(h, {batch, c.channels, c.time_len});
    }
    Var h = z.tokens;
    for (std::size_t i = 0; i < bundle_.decoder->depth; ++i) h = block(h, "decoder.layers." + std::to_string(i) + ".");
    h = ad::layer_norm(h, param("decoder.norm.gamma"), param("decoder.norm.beta"), kLayerNormEps);
    h = ad::linear(h, param("decoder.pred.weight"), param("decoder.pred.bias"));
    const std::size_t p = detail::patch_width(c);
    h = ad::reshape(h, {batch, l, c.channels, p});
    h = ad::permute(h, {0, 2, 1, 3});
    h = ad::reshape(h, {batch, c.channels, l * p});
    if (l * p != c.time_len) h = ad::narrow(h, 2, 0, c.time_len);
    return h;
  }

  Var predict(const Latents& z) const {
    if (!bundle_.head) throw ModeError("head_forward called on a pretraining model");
    const Shape& s = z.readout.shape();
    if (s.size() != 2 || s[1] != bundle_.encoder.embed_dim) {
      throw ShapeError("head expects readout [B x " + std::to_string(bundle_.encoder.embed_dim) + "], got " +
                       shape_str(s));
    }
    Var y = ad::linear(z.readout, param("head.weight"), param("head.bias"));
    const HeadConfig& h = *bundle_.head;
    y = ad::mul_broadcast(y, graph_.constant(Tensor(Shape{2}, {h.scale[0], h.scale[1]})));
    return ad::add_broadcast(y, graph_.constant(Tensor(Shape{2}, {h.offset[0], h.offset[1]})));
  }

 private:
  Var block(Var x, const std::string& p) const {
    Var h = ad::layer_norm(x, param(p + "ln1.gamma"), param(p + "ln1.beta"), kLayerNormEps);
    h = ad::linear(h, param(p + "attn.qkv.weight"), param(p + "attn.qkv.bias"));
    h = ad::attention(h, bundle_.encoder.num_heads);
    h = ad::linear(h, param(p + "attn.proj.weight"), param(p + "attn.proj.bias"));
    x = ad::add(x, h);
    h = ad::layer_norm(x, param(p + "ln2.gamma"), param(p + "ln2.beta"), kLayerNormEps);
    h = ad::gelu(ad::linear(h, param(p + "mlp.fc1.weight"), param(p + "mlp.fc1.bias")));
    h = ad::linear(h, param(p + "mlp.fc2.weight"), param(p + "mlp.fc2.bias"));
    return ad::add(x, h);
  }

  void check_tokens(Var tokens) const {
    const Shape& s = tokens.shape();
    const EncoderConfig& c = bundle_.encoder;
    if (s.size() != 3 || s[1] != c.token_count() || s[2] != c.embed_dim) {
      throw ShapeError("decoder expects latents [B x " + std::to_string(c.token_count()) + " x " +
                       std::to_string(c.embed_dim) + "], got " + shape_str(s));
    }
  }

  Graph& graph_;
  const ModelBundle& bundle_;
  std::map<std::string, Var> vars_;
};

/// Tensor-valued latents for callers outside a training graph.
struct EncodedTensors {
  Tensor tokens;
  Tensor readout;
};

inline EncodedTensors encoder_forward(const ModelBundle& bundle, const Tensor& x) {
  Graph g;
  ModelGraph m(g, bundle, false);
  Latents z = m.encode(g.constant(x));
  return {z.tokens.value(), z.readout.value()};
}

inline Tensor decoder_forward(const ModelBundle& bundle, const EncodedTensors& latents) {
  if (!bundle.decoder) throw ModeError("decoder_forward called on a fine-tune model");
  Graph g;
  ModelGraph m(g, bundle, false);
  return m.decode({g.constant(latents.tokens), g.constant(latents.readout)}).value();
}

inline Tensor head_forward(const ModelBundle& bundle, const EncodedTensors& latents) {
  if (!bundle.head) throw ModeError("head_forward called on a pretraining model");
  Graph g;
  ModelGraph m(g, bundle, false);
  return m.predict({g.constant(latents.tokens), g.constant(latents.readout)}).value();
}

/// Reconstruction of x (pretrain mode) or predictions in mm (fine-tune mode).
inline Tensor model_forward(const ModelBundle& bundle, const Tensor& x) {
  Graph g;
  ModelGraph m(g, bundle, false);
  Latents z = m.encode(g.constant(x));
  return (bundle.mode() == ModelMode::Pretrain ? m.decode(z) : m.predict(z)).value();
}

}  // namespace emae
