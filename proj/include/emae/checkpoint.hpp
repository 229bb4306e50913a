#pragma once

// .emae checkpoint layout (all integers little-endian):
//   "EMAE" | version u32 | config length u32 | config (UTF-8 key=value lines)
//   | tensor count u32 | per tensor: name length u16, name, rank u8,
//   dims u64 x rank, payload f64 x numel

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "emae/binary_io.hpp"
#include "emae/model.hpp"
#include "emae/text.hpp"

namespace emae {

inline constexpr std::string_view kCheckpointMagic = "EMAE";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline std::string bundle_config_text(const ModelBundle& b) {
  const EncoderConfig& e = b.encoder;
  std::string s;
  auto put = [&s](const std::string& k, const std::string& v) { s += k + "=" + v + "\n"; };
  put("mode", b.mode() == ModelMode::Pretrain ? "pretrain" : "finetune");
  put("encoder.channels", std::to_string(e.channels));
  put("encoder.time_len", std::to_string(e.time_len));
  put("encoder.temporal_kernel", std::to_string(e.temporal_kernel));
  put("encoder.temporal_stride", std::to_string(e.temporal_stride));
  put("encoder.filters", std::to_string(e.filters));
  put("encoder.embed_dim", std::to_string(e.embed_dim));
  put("encoder.num_layers", std::to_string(e.num_layers));
  put("encoder.num_heads", std::to_string(e.num_heads));
  put("encoder.mlp_ratio", text::format_double(e.mlp_ratio));
  if (b.decoder) {
    put("decoder.kind", b.decoder->kind == DecoderKind::MLP ? "mlp" : "blocks");
    put("decoder.depth", std::to_string(b.decoder->depth));
    put("decoder.hidden", std::to_string(b.decoder->hidden));
  }
  if (b.head) {
    put("head.offset_x", text::format_double(b.head->offset[0]));
    put("head.offset_y", text::format_double(b.head->offset[1]));
    put("head.scale_x", text::format_double(b.head->scale[0]));
    put("head.scale_y", text::format_double(b.head->scale[1]));
  }
  return s;
}

inline ModelBundle bundle_from_config(const std::string& cfg, std::uint64_t offset) {
  std::size_t bad = 0;
  const auto lines = text::parse_key_values(cfg, &bad);
  if (bad) throw FormatError("malformed config line " + std::to_string(bad), offset);
  std::map<std::string, std::string> kv;
  for (const auto& l : lines) kv[l.key] = l.value;
  auto take = [&](const std::string& k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError("checkpoint config missing key '" + k + "'", offset);
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  auto take_uint = [&](const std::string& k) {
    const std::string v = take(k);
    auto u = text::parse_uint(v);
    if (!u) throw FormatError("checkpoint config '" + k + "' is not an unsigned integer: " + v, offset);
    return static_cast<std::size_t>(*u);
  };
  auto take_double = [&](const std::string& k) {
    const std::string v = take(k);
    auto d = text::parse_double(v);
    if (!d) throw FormatError("checkpoint config '" + k + "' is not a number: " + v, offset);
    return *d;
  };
  ModelBundle b;
  const std::string mode = take("mode");
  b.encoder.channels = take_uint("encoder.channels");
  b.encoder.time_len = take_uint("encoder.time_len");
  b.encoder.temporal_kernel = take_uint("encoder.temporal_kernel");
  b.encoder.temporal_stride = take_uint("encoder.temporal_stride");
  b.encoder.filters = take_uint("encoder.filters");
  b.encoder.embed_dim = take_uint("encoder.embed_dim");
  b.encoder.num_layers = take_uint("encoder.num_layers");
  b.encoder.num_heads = take_uint("encoder.num_heads");
  b.encoder.mlp_ratio = take_double("encoder.mlp_ratio");
  if (mode == "pretrain") {
    DecoderConfig d;
    const std::string kind = take("decoder.kind");
    if (kind != "mlp" && kind != "blocks") throw FormatError("unknown decoder kind '" + kind + "'", offset);
    d.kind = kind == "mlp" ? DecoderKind::MLP : DecoderKind::TransformerBlocks;
    d.depth = take_uint("decoder.depth");
    d.hidden = take_uint("decoder.hidden");
    b.decoder = d;
  } else if (mode == "finetune") {
    HeadConfig h;
    h.offset = {take_double("head.offset_x"), take_double("head.offset_y")};
    h.scale = {take_double("head.scale_x"), take_double("head.scale_y")};
    b.head = h;
  } else {
    throw FormatError("unknown model mode '" + mode + "'", offset);
  }
  if (!kv.empty()) throw FormatError("unknown checkpoint config key '" + kv.begin()->first + "'", offset);
  try {
    b.encoder.validate();
    if (b.decoder) b.decoder->validate();
  } catch (const ContractError& e) {
    throw FormatError(std::string("invalid model config: ") + e.what(), offset);
  }
  return b;
}

struct RawCheckpoint {
  std::string config;
  std::uint64_t config_offset = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::vector<std::uint64_t> tensor_offsets;
};

inline RawCheckpoint parse_checkpoint(std::vector<char> bytes) {
  io::ByteReader r(std::move(bytes));
  RawCheckpoint raw;
  if (r.bytes(std::min<std::uint64_t>(4, r.remaining()), "magic") != kCheckpointMagic) {
    throw FormatError("bad checkpoint magic (expected \"EMAE\")", 0);
  }
  const auto version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  const std::uint32_t cfg_len = r.u32("config length");
  raw.config_offset = r.offset();
  raw.config = r.bytes(cfg_len, "config block");
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    raw.tensor_offsets.push_back(r.offset());
    const std::uint16_t name_len = r.u16("tensor name length");
    std::string name = r.bytes(name_len, "tensor name");
    const auto rank_at = r.offset();
    const std::uint8_t rank = r.u8("tensor rank");
    if (rank == 0) throw FormatError("tensor '" + name + "' has rank 0", rank_at);
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      const auto dim_at = r.offset();
      const std::uint64_t dim = r.u64("tensor dimension");
      if (dim == 0) throw FormatError("tensor '" + name + "' has a zero dimension", dim_at);
      d = static_cast<std::size_t>(dim);
      numel *= dim;
    }
    r.need(numel * 8, "tensor payload");
    std::vector<double> data(numel);
    for (auto& v : data) v = r.f64("tensor payload");
    raw.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last tensor", r.offset());
  return raw;
}

}  // namespace detail

inline std::vector<char> serialize_checkpoint(const ModelBundle& bundle) {
  io::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  const std::string cfg = detail::bundle_config_text(bundle);
  w.u32(static_cast<std::uint32_t>(cfg.size()));
  w.bytes(cfg);
  w.u32(static_cast<std::uint32_t>(bundle.params.size()));
  for (const auto& [name, t] : bundle.params) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    for (double v : t.data()) w.f64(v);
  }
  return w.buffer();
}

inline void save_checkpoint(const ModelBundle& bundle, const std::filesystem::path& path) {
  io::write_file(path, serialize_checkpoint(bundle));
}

inline ModelBundle deserialize_checkpoint(std::vector<char> bytes) {
  detail::RawCheckpoint raw = detail::parse_checkpoint(std::move(bytes));
  ModelBundle b = detail::bundle_from_config(raw.config, raw.config_offset);
  for (std::size_t i = 0; i < raw.tensors.size(); ++i) {
    auto& [name, t] = raw.tensors[i];
    if (!b.params.emplace(name, std::move(t)).second) {
      throw FormatError("duplicate tensor '" + name + "'", raw.tensor_offsets[i]);
    }
  }
  const std::uint64_t end = raw.tensor_offsets.empty() ? raw.config_offset : raw.tensor_offsets.back();
  const auto expected = expected_parameters(b);
  if (expected.size() != b.params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(b.params.size()) + " tensors, config implies " +
                          std::to_string(expected.size()),
                      end);
  }
  for (const auto& [name, shape] : expected) {
    auto it = b.params.find(name);
    if (it == b.params.end()) throw FormatError("checkpoint missing tensor '" + name + "'", end);
    if (it->second.shape() != shape) {
      throw FormatError("tensor '" + name + "' has shape " + shape_str(it->second.shape()) + ", config implies " +
                            shape_str(shape),
                        end);
    }
  }
  return b;
}

inline ModelBundle load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(io::read_file(path));
}

struct ImportReport {
  std::vector<std::string> matched;
  std::vector<std::string> unmatched;
};

using NameMap = std::vector<std::pair<std::string, std::string>>;

/// Copies tensors from an external checkpoint into `bundle` following
/// (external name, internal name) pairs. Pairs whose names are absent on
/// either side are reported as unmatched and leave the bundle unchanged.
inline ImportReport import_external_weights(ModelBundle& bundle, const std::filesystem::path& path,
                                            const NameMap& name_map) {
  detail::RawCheckpoint raw = detail::parse_checkpoint(io::read_file(path));
  std::map<std::string, const Tensor*> external;
  for (const auto& [name, t] : raw.tensors) external.emplace(name, &t);
  ImportReport report;
  for (const auto& [ext, internal] : name_map) {
    auto src = external.find(ext);
    auto dst = bundle.params.find(internal);
    if (src == external.end() || dst == bundle.params.end()) {
      report.unmatched.push_back(ext + "->" + internal);
      continue;
    }
    if (src->second->shape() != dst->second.shape()) {
      throw ImportError("shape conflict importing '" + ext + "' " + shape_str(src->second->shape()) + " into '" +
                        internal + "' " + shape_str(dst->second.shape()));
    }
    report.matched.push_back(ext + "->" + internal);
  }
  for (const auto& [ext, internal] : name_map) {
    auto src = external.find(ext);
    auto dst = bundle.params.find(internal);
    if (src != external.end() && dst != bundle.params.end()) dst->second = *src->second;
  }
  return report;
}

/// Reads `external=internal` lines.
inline NameMap load_name_map(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  std::size_t bad = 0;
  const auto lines = text::parse_key_values(std::string_view(bytes.data(), bytes.size()), &bad);
  if (bad) throw FormatError("malformed name map line " + std::to_string(bad), 0);
  NameMap out;
  for (const auto& l : lines) out.emplace_back(l.key, l.value);
  return out;
}

}  // namespace emae
