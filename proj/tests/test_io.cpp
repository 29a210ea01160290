#include <gmock/gmock.h>
#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>

#include "sfdit/channel.hpp"
#include "sfdit/checkpoint.hpp"
#include "sfdit/dataset.hpp"
#include "sfdit/grad_suite.hpp"

using namespace sfdit;
using ::testing::HasSubstr;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "sfdit_test_io";
  fs::create_directories(dir);
  return dir / name;
}

template <class F>
std::string error_of(F&& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

std::size_t find_bytes(const std::vector<std::uint8_t>& buf, const std::string& s) {
  auto it = std::search(buf.begin(), buf.end(), s.begin(), s.end());
  return static_cast<std::size_t>(it - buf.begin());
}

DitConfig io_cfg() {
  DitConfig c = detail::tiny_dit_config(2);
  return c;
}

}  // namespace

TEST(Crc, KnownValue) {
  const std::string s = "123456789";
  EXPECT_EQ(crc32_of(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()), 0xcbf43926u);
}

TEST(Dataset, RoundTripIsBitExact) {
  const auto ch = generate_channels({16, 8}, profile_synth_d(), 3, 3);
  const fs::path p = temp_path("rt.bin");
  write_dataset(p, ch, {{"profile", "synthD"}, {"seed", 3}});
  const auto ds = read_dataset(p);
  ASSERT_EQ(ds.channels.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(std::memcmp(ds.channels[i].data(), ch[i].data(), 16 * 8 * 16), 0);
  EXPECT_EQ(ds.meta.at("profile"), "synthD");
}

TEST(Dataset, SizeArithmetic) {
  const auto ch = generate_channels({64, 16}, profile_synth_c(), 1, 3);
  const nlohmann::json meta = {{"k", 1}};
  const auto buf = encode_dataset(ch, meta);
  const std::size_t header = 8 + 4 * 4 + 4 + meta.dump().size();
  EXPECT_EQ(buf.size(), header + 3 * std::size_t{2 * 8 * 64 * 16} + 4);
  EXPECT_EQ(std::size_t{2 * 8 * 64 * 16} * 10000, 163840000u);
}

TEST(Dataset, CorruptMagicNamesExpected) {
  auto buf = encode_dataset(generate_channels({4, 2}, profile_synth_c(), 1, 2), {});
  buf[0] = 'X';
  EXPECT_THAT(error_of([&] { decode_dataset(ByteReader(buf)); }), HasSubstr("MIMODS01"));
}

TEST(Dataset, TruncationAndChecksum) {
  const auto good = encode_dataset(generate_channels({4, 2}, profile_synth_c(), 1, 2), {});
  auto cut = good;
  cut.resize(cut.size() - 10);
  EXPECT_THAT(error_of([&] { decode_dataset(ByteReader(cut)); }), HasSubstr("offset"));
  auto flip = good;
  flip[flip.size() - 20] ^= 0x01;
  EXPECT_THAT(error_of([&] { decode_dataset(ByteReader(flip)); }), HasSubstr("checksum"));
  auto ver = good;
  ver[8] = 2;
  EXPECT_THAT(error_of([&] { decode_dataset(ByteReader(ver)); }), HasSubstr("version"));
}

TEST(Dataset, RejectsBadInput) {
  EXPECT_THROW(encode_dataset({}, {}), ContractError);
  std::vector<ComplexMatrix> mixed = {ComplexMatrix::Zero(4, 2), ComplexMatrix::Zero(4, 4)};
  EXPECT_THROW(encode_dataset(mixed, {}), DimensionError);
  EXPECT_THROW(read_dataset(temp_path("missing.bin")), std::runtime_error);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const DitConfig c = io_cfg();
  const auto params = detail::random_params(c, 1);
  const fs::path a = temp_path("a.ckpt"), b = temp_path("b.ckpt");
  save_model(a, c, params, {{"note", "x"}});
  const auto ck = load_checkpoint(a);
  save_checkpoint(b, ck);
  EXPECT_EQ(ByteReader::from_file(a).size(), ByteReader::from_file(b).size());
  EXPECT_EQ(file_hash(a), file_hash(b));
  EXPECT_EQ(ck.provenance.at("note"), "x");
  EXPECT_EQ(ck.config, c);

  const auto m = load_model<float>(a);
  for (const auto& [name, t] : params) EXPECT_EQ(m.params().at(name), t.cast<float>()) << name;
}

TEST(Checkpoint, AuxTensorsRoundTrip) {
  const DitConfig c = io_cfg();
  Checkpoint ck{c, {}, {}, {}};
  for (const auto& [name, t] : init_params<float>(c, 2)) ck.params.emplace(name, t);
  ck.aux.emplace("adam.m.final_proj.bias", Tensor<float>({c.patch_dim()}, 0.5f));
  const auto back = decode_checkpoint(ByteReader(encode_checkpoint(ck)));
  EXPECT_EQ(back.aux.at("adam.m.final_proj.bias"), ck.aux.at("adam.m.final_proj.bias"));
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ck));
}

TEST(Checkpoint, TamperedTensorLengthNamesTensor) {
  const DitConfig c = io_cfg();
  Checkpoint ck{c, {}, {}, {}};
  for (const auto& [name, t] : init_params<float>(c, 3)) ck.params.emplace(name, t);
  const auto buf = encode_checkpoint(ck);

  // Grow the first dim of one record: the shape no longer matches the config.
  const std::string name = "blocks.1.mlp_in.weight";
  const std::size_t at = find_bytes(buf, name);
  ASSERT_LT(at, buf.size());
  auto grown = buf;
  grown[at + name.size() + 4] += 1;
  EXPECT_THAT(error_of([&] { decode_checkpoint(ByteReader(grown)); }), HasSubstr(name));

  // Truncate inside the same record's data.
  auto cut = buf;
  cut.resize(at + name.size() + 4 + 8 + 16);
  EXPECT_THAT(error_of([&] { decode_checkpoint(ByteReader(cut)); }), HasSubstr(name));
}

TEST(Checkpoint, MagicAndChecksum) {
  const DitConfig c = io_cfg();
  Checkpoint ck{c, {}, {}, {}};
  for (const auto& [name, t] : init_params<float>(c, 4)) ck.params.emplace(name, t);
  auto buf = encode_checkpoint(ck);
  auto bad = buf;
  bad[3] = '?';
  EXPECT_THAT(error_of([&] { decode_checkpoint(ByteReader(bad)); }), HasSubstr("DITCKPT1"));
  auto flip = buf;
  flip[flip.size() - 8] ^= 0x40;
  EXPECT_THAT(error_of([&] { decode_checkpoint(ByteReader(flip)); }), HasSubstr("checksum"));
}

TEST(Checkpoint, MissingTensorIsReported) {
  const DitConfig c = io_cfg();
  Checkpoint ck{c, {}, {}, {}};
  for (const auto& [name, t] : init_params<float>(c, 5)) ck.params.emplace(name, t);
  ck.params.erase("cond_mlp.1.bias");
  EXPECT_THAT(error_of([&] { decode_checkpoint(ByteReader(encode_checkpoint(ck))); }), HasSubstr("cond_mlp.1.bias"));
}
