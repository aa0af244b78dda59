#pragma once

// Checkpoint files: a text header listing the model configuration, optimizer
// scalars, free-form hyperparameters and every stored tensor with its shape,
// then "end", then the tensors as raw little-endian float32 in header order.
// The header records the payload size and its CRC-32.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <cstdio>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "prnet/adam.hpp"
#include "prnet/model.hpp"

namespace prnet {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  PrNetWeights<float> weights;
  AdamState<float> adam;
  std::uint64_t epoch = 0;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> hyperparameters;  // values must not contain newlines
};

namespace detail {

inline void append_floats(std::string& out, std::span<const float> values) {
  static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
  for (float v : values) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
  }
}

inline float read_float(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
  return std::bit_cast<float>(bits);
}

inline std::uint32_t crc32_of(const std::string& bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + done), chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

template <typename C>
std::string join_numbers(const C& values) {
  std::string s;
  for (auto v : values) {
    if (!s.empty()) s += ' ';
    s += std::to_string(v);
  }
  return s;
}

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float>* target;  // load destination
  std::span<const float> source;
};

// Every tensor a checkpoint carries, in file order.
inline std::vector<StoredTensor> stored_tensors(PrNetWeights<float>& w, AdamState<float>& adam) {
  std::vector<StoredTensor> out;
  auto params = w.parameters();
  auto names = w.parameter_names();
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.push_back({names[i], params[i]->shape(), nullptr, params[i]->data()});
  }
  std::size_t layer = 0;
  for (auto* s : w.norm_states()) {
    const std::string prefix = "norm" + std::to_string(layer++);
    out.push_back({prefix + ".running_mean", {s->running_mean.size()}, &s->running_mean, s->running_mean});
    out.push_back({prefix + ".running_var", {s->running_var.size()}, &s->running_var, s->running_var});
  }
  for (std::size_t i = 0; i < adam.first_moment.size(); ++i) {
    out.push_back({"adam.m." + names.at(i), params.at(i)->shape(), &adam.first_moment[i], adam.first_moment[i]});
    out.push_back({"adam.v." + names.at(i), params.at(i)->shape(), &adam.second_moment[i], adam.second_moment[i]});
  }
  return out;
}

inline std::vector<std::size_t> parse_sizes(std::istringstream& in) {
  std::vector<std::size_t> v;
  for (std::size_t x; in >> x;) v.push_back(x);
  return v;
}

}  // namespace detail

/// Serializes a checkpoint to bytes. Saving the same checkpoint always gives
/// the same bytes.
inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  Checkpoint copy{ckpt.weights.clone(), ckpt.adam, ckpt.epoch, ckpt.seed, ckpt.hyperparameters};
  const auto& cfg = copy.weights.config;
  const auto& a = copy.adam;
  std::string payload;
  auto tensors = detail::stored_tensors(copy.weights, copy.adam);
  for (const auto& t : tensors) detail::append_floats(payload, t.source);

  std::ostringstream h;
  h << "prnet-checkpoint " << kCheckpointVersion << '\n';
  h << "dim " << cfg.dim << '\n';
  h << "grid_resolution " << detail::join_numbers(cfg.grid_resolution) << '\n';
  h << "mlp_widths " << detail::join_numbers(cfg.mlp_widths) << '\n';
  h << "conv_channels " << detail::join_numbers(cfg.conv_channels) << '\n';
  h << "conv_kernels " << detail::join_numbers(cfg.conv_kernels) << '\n';
  h << "fc_widths " << detail::join_numbers(cfg.fc_widths) << '\n';
  h << "leaky_slope " << format_double(cfg.leaky_slope) << '\n';
  h << "seed " << copy.seed << '\n';
  h << "epoch " << copy.epoch << '\n';
  h << "adam " << a.step_count << ' ' << a.epoch << ' ' << format_double(a.learning_rate) << ' '
    << format_double(a.decay) << ' ' << format_double(a.beta1) << ' ' << format_double(a.beta2) << ' '
    << format_double(a.epsilon) << ' ' << (a.first_moment.empty() ? 0 : 1) << '\n';
  for (const auto& [k, v] : copy.hyperparameters) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ContractError("checkpoint: hyperparameter '" + k + "' has whitespace in its key or a newline in its value");
    }
    h << "hp " << k << ' ' << v << '\n';
  }
  for (const auto& t : tensors) h << "tensor " << t.name << ' ' << detail::join_numbers(t.shape) << '\n';
  char crc[9];
  std::snprintf(crc, sizeof crc, "%08x", detail::crc32_of(payload));
  h << "payload_bytes " << payload.size() << '\n';
  h << "crc32 " << crc << '\n';
  h << "end\n";
  return h.str() + payload;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& source = "checkpoint") {
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw FormatError(source + ": truncated header");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  auto expect_key = [&](const std::string& key) {
    std::string line = next_line();
    auto in = std::make_unique<std::istringstream>(line);
    std::string k;
    *in >> k;
    if (k != key) throw FormatError(source + ": expected '" + key + "', found '" + line + "'");
    return in;
  };

  {
    auto in = expect_key("prnet-checkpoint");
    int version = 0;
    *in >> version;
    if (version != kCheckpointVersion) {
      throw FormatError(source + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    }
  }
  ModelConfig cfg;
  *expect_key("dim") >> cfg.dim;
  cfg.grid_resolution = detail::parse_sizes(*expect_key("grid_resolution"));
  cfg.mlp_widths = detail::parse_sizes(*expect_key("mlp_widths"));
  cfg.conv_channels = detail::parse_sizes(*expect_key("conv_channels"));
  cfg.conv_kernels = detail::parse_sizes(*expect_key("conv_kernels"));
  cfg.fc_widths = detail::parse_sizes(*expect_key("fc_widths"));
  *expect_key("leaky_slope") >> cfg.leaky_slope;
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw FormatError(source + ": invalid model configuration: " + e.what());
  }

  Checkpoint ckpt;
  ckpt.weights = allocate_weights<float>(cfg);
  *expect_key("seed") >> ckpt.seed;
  *expect_key("epoch") >> ckpt.epoch;
  int has_moments = 0;
  {
    auto in = expect_key("adam");
    auto& a = ckpt.adam;
    *in >> a.step_count >> a.epoch >> a.learning_rate >> a.decay >> a.beta1 >> a.beta2 >> a.epsilon >> has_moments;
    if (!*in) throw FormatError(source + ": malformed optimizer line");
  }
  if (has_moments) {
    for (const auto* p : ckpt.weights.parameters()) {
      ckpt.adam.first_moment.emplace_back(p->size(), 0.0f);
      ckpt.adam.second_moment.emplace_back(p->size(), 0.0f);
    }
  }

  std::string line = next_line();
  while (line.rfind("hp ", 0) == 0) {
    const auto space = line.find(' ', 3);
    if (space == std::string::npos) throw FormatError(source + ": malformed hyperparameter line '" + line + "'");
    ckpt.hyperparameters[line.substr(3, space - 3)] = line.substr(space + 1);
    line = next_line();
  }

  auto tensors = detail::stored_tensors(ckpt.weights, ckpt.adam);
  for (const auto& t : tensors) {
    std::istringstream in(line);
    std::string key, name;
    in >> key >> name;
    if (key != "tensor" || name != t.name || detail::parse_sizes(in) != t.shape) {
      throw FormatError(source + ": expected tensor " + t.name + " " + detail::shape_string(t.shape) + ", found '" +
                        line + "'");
    }
    line = next_line();
  }
  std::size_t payload_bytes = 0;
  {
    std::istringstream in(line);
    std::string key;
    in >> key >> payload_bytes;
    if (key != "payload_bytes") throw FormatError(source + ": expected payload_bytes, found '" + line + "'");
  }
  std::string crc_text;
  *expect_key("crc32") >> crc_text;
  if (next_line() != "end") throw FormatError(source + ": missing end of header");

  std::size_t expected = 0;
  for (const auto& t : tensors) expected += element_count(t.shape) * 4;
  if (payload_bytes != expected) {
    throw FormatError(source + ": header declares " + std::to_string(payload_bytes) + " payload bytes, layout needs " +
                      std::to_string(expected));
  }
  if (bytes.size() - pos != payload_bytes) {
    throw FormatError(source + ": payload is " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                      std::to_string(payload_bytes) + " (truncated or trailing data)");
  }
  const std::string payload = bytes.substr(pos);
  char crc[9];
  std::snprintf(crc, sizeof crc, "%08x", detail::crc32_of(payload));
  if (crc_text != crc) throw FormatError(source + ": checksum mismatch (stored " + crc_text + ", computed " + crc + ")");

  const auto* p = reinterpret_cast<const unsigned char*>(payload.data());
  auto params = ckpt.weights.parameters();
  std::size_t pi = 0;
  for (auto& t : tensors) {
    const std::size_t n = element_count(t.shape);
    std::span<float> dst = t.target ? std::span<float>(*t.target) : params[pi++]->mutable_data();
    for (std::size_t i = 0; i < n; ++i, p += 4) dst[i] = detail::read_float(p);
  }
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot move checkpoint into place at " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_checkpoint(buf.str(), path);
}

}  // namespace prnet
