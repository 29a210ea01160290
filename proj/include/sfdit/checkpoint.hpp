#pragma once

// Checkpoint file layout (little-endian):
//   "DITCKPT1", u32 version (=1)
//   u32 JSON length, JSON {"config": DitConfig, "provenance": {...}}
//   tensor records until the trailer:
//     u32 name length, name bytes, u32 rank, u32 dims[rank], f32 data[prod(dims)]
//   u32 CRC-32 of every preceding byte
//
// Model parameters come first (sorted by name), followed by auxiliary tensors
// whose names start with "aux." (optimizer moments when saved by the trainer).

#include <nlohmann/json.hpp>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <utility>

#include "sfdit/binary_io.hpp"
#include "sfdit/dit.hpp"

namespace sfdit {

inline constexpr char kCheckpointMagic[9] = "DITCKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kAuxPrefix = "aux.";

struct Checkpoint {
  DitConfig config;
  DitParams<float> params;
  std::map<std::string, Tensor<float>> aux;
  nlohmann::json provenance = nlohmann::json::object();
};

namespace detail {
inline void write_record(ByteWriter& w, const std::string& name, const Tensor<float>& t) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (float v : t.values()) w.f32(v);
}
}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  ByteWriter w;
  w.bytes(kCheckpointMagic, 8);
  w.u32(kCheckpointVersion);
  const std::string js = nlohmann::json{{"config", ck.config}, {"provenance", ck.provenance}}.dump();
  w.u32(static_cast<std::uint32_t>(js.size()));
  w.str(js);
  for (const auto& [name, t] : ck.params) detail::write_record(w, name, t);
  for (const auto& [name, t] : ck.aux) detail::write_record(w, kAuxPrefix + name, t);
  w.u32(crc32_of(w.buffer().data(), w.size()));
  return w.buffer();
}

inline Checkpoint decode_checkpoint(ByteReader r) {
  r.expect_magic(kCheckpointMagic);
  const std::size_t version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " at offset " +
                      std::to_string(version_at));
  }
  const std::size_t js_len = r.u32("JSON length");
  const std::size_t js_at = r.offset();
  Checkpoint ck;
  try {
    const auto j = nlohmann::json::parse(r.str(js_len, "JSON header"));
    ck.config = j.at("config").get<DitConfig>();
    ck.provenance = j.value("provenance", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint JSON at offset " + std::to_string(js_at) + " is invalid: " + e.what());
  }
  try {
    ck.config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint carries an invalid config: ") + e.what());
  }
  std::map<std::string, Shape> expected;
  for (auto& [name, shape] : parameter_shapes(ck.config)) expected.emplace(name, shape);

  while (r.remaining() > 4) {
    const std::size_t rec_at = r.offset();
    const std::size_t name_len = r.u32("tensor name length");
    const std::string name = r.str(name_len, "tensor name");
    const std::size_t rank = r.u32("tensor rank");
    if (rank == 0 || rank > 8) {
      throw FormatError("tensor '" + name + "' at offset " + std::to_string(rec_at) + " has invalid rank " +
                        std::to_string(rank));
    }
    Shape shape(rank);
    for (auto& d : shape) d = r.u32("tensor dims");
    const bool is_aux = name.rfind(kAuxPrefix, 0) == 0;
    if (!is_aux) {
      auto it = expected.find(name);
      if (it == expected.end()) throw FormatError("unexpected tensor '" + name + "' at offset " + std::to_string(rec_at));
      if (it->second != shape) {
        throw FormatError("tensor '" + name + "' has shape " + shape_str(shape) + ", config implies " +
                          shape_str(it->second));
      }
    }
    const std::size_t n = shape_numel(shape);
    if (r.remaining() < n * 4 + 4) {
      throw FormatError("tensor '" + name + "' at offset " + std::to_string(rec_at) + " is truncated: needs " +
                        std::to_string(n * 4) + " data bytes");
    }
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32("tensor data");
    Tensor<float> t(std::move(shape), std::move(data));
    if (is_aux) {
      ck.aux.emplace(name.substr(std::string(kAuxPrefix).size()), std::move(t));
    } else {
      ck.params.emplace(name, std::move(t));
    }
  }
  for (const auto& [name, shape] : expected) {
    if (!ck.params.count(name)) throw FormatError("checkpoint lacks tensor '" + name + "'");
  }
  const std::size_t crc_at = r.offset();
  const std::uint32_t stored = r.u32("checksum");
  if (stored != crc32_of(r.at(0), crc_at)) throw FormatError("checkpoint checksum mismatch at offset " + std::to_string(crc_at));
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  ByteWriter w;
  const auto buf = encode_checkpoint(ck);
  w.bytes(buf.data(), buf.size());
  w.save(path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(ByteReader::from_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

template <class T>
void save_model(const std::filesystem::path& path, const DitConfig& cfg, const DitParams<T>& params,
                const nlohmann::json& provenance = nlohmann::json::object()) {
  Checkpoint ck{cfg, {}, {}, provenance};
  for (const auto& [name, t] : params) ck.params.emplace(name, t.template cast<float>());
  save_checkpoint(path, ck);
}

template <class T>
DitModel<T> load_model(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  DitParams<T> p;
  for (const auto& [name, t] : ck.params) p.emplace(name, t.template cast<T>());
  return DitModel<T>(ck.config, std::move(p));
}

// Hex FNV-1a of the file bytes, used for provenance.
inline std::string file_hash(const std::filesystem::path& path) {
  ByteReader r = ByteReader::from_file(path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < r.size(); ++i) h = (h ^ *r.at(i)) * 0x100000001b3ull;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace sfdit
