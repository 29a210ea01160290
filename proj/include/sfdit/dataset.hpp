#pragma once

// Dataset file layout (little-endian):
//   "MIMODS01"
//   u32 version (=1), u32 n_items, u32 rows, u32 cols
//   u32 metadata length, metadata JSON bytes
//   n_items * rows * cols complex entries as (re, im) f64 pairs,
//     row-major within an item, items consecutive
//   u32 CRC-32 of the entry payload

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

#include "sfdit/binary_io.hpp"
#include "sfdit/complex_matrix.hpp"

namespace sfdit {

inline constexpr char kDatasetMagic[9] = "MIMODS01";
inline constexpr std::uint32_t kDatasetVersion = 1;

struct Dataset {
  std::vector<ComplexMatrix> channels;
  nlohmann::json meta = nlohmann::json::object();
};

inline std::vector<std::uint8_t> encode_dataset(const std::vector<ComplexMatrix>& channels,
                                                const nlohmann::json& meta) {
  if (channels.empty()) throw ContractError("write_dataset: empty channel list");
  const auto rows = channels[0].rows(), cols = channels[0].cols();
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (channels[i].rows() != rows || channels[i].cols() != cols) {
      throw DimensionError("write_dataset: item " + std::to_string(i) + " is " + dims_str(channels[i]) +
                           ", expected " + dims_str(channels[0]));
    }
  }
  ByteWriter w;
  w.bytes(kDatasetMagic, 8);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(channels.size()));
  w.u32(static_cast<std::uint32_t>(rows));
  w.u32(static_cast<std::uint32_t>(cols));
  const std::string js = meta.dump();
  w.u32(static_cast<std::uint32_t>(js.size()));
  w.str(js);
  const std::size_t payload_start = w.size();
  for (const auto& h : channels) {
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) {
        w.f64(h(r, c).real());
        w.f64(h(r, c).imag());
      }
  }
  const auto& buf = w.buffer();
  w.u32(crc32_of(buf.data() + payload_start, buf.size() - payload_start));
  return w.buffer();
}

inline Dataset decode_dataset(ByteReader r) {
  r.expect_magic(kDatasetMagic);
  const std::size_t version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kDatasetVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(version) + " at offset " +
                      std::to_string(version_at));
  }
  const std::size_t n_items = r.u32("n_items");
  const std::size_t rows = r.u32("rows");
  const std::size_t cols = r.u32("cols");
  if (n_items == 0 || rows == 0 || cols == 0) {
    throw FormatError("dataset header declares an empty shape at offset 12");
  }
  const std::size_t meta_len = r.u32("metadata length");
  const std::size_t meta_at = r.offset();
  Dataset ds;
  try {
    ds.meta = nlohmann::json::parse(r.str(meta_len, "metadata"));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("metadata JSON at offset " + std::to_string(meta_at) + " is invalid: " + e.what());
  }
  const std::size_t payload_bytes = n_items * rows * cols * 16;
  const std::size_t payload_at = r.offset();
  r.need(payload_bytes + 4, "channel payload and checksum");
  const std::uint32_t crc = crc32_of(r.at(payload_at), payload_bytes);
  ds.channels.reserve(n_items);
  for (std::size_t i = 0; i < n_items; ++i) {
    ComplexMatrix h(rows, cols);
    for (std::size_t a = 0; a < rows; ++a)
      for (std::size_t b = 0; b < cols; ++b) {
        const double re = r.f64("entry");
        h(a, b) = cdouble(re, r.f64("entry"));
      }
    ds.channels.push_back(std::move(h));
  }
  const std::size_t crc_at = r.offset();
  const std::uint32_t stored = r.u32("checksum");
  if (stored != crc) throw FormatError("payload checksum mismatch at offset " + std::to_string(crc_at));
  if (r.remaining() != 0) {
    throw FormatError("trailing bytes after checksum at offset " + std::to_string(r.offset()));
  }
  return ds;
}

inline void write_dataset(const std::filesystem::path& path, const std::vector<ComplexMatrix>& channels,
                          const nlohmann::json& meta) {
  ByteWriter w;
  const auto buf = encode_dataset(channels, meta);
  w.bytes(buf.data(), buf.size());
  w.save(path);
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  try {
    return decode_dataset(ByteReader::from_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace sfdit
