#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "poselab/io_util.hpp"
#include "poselab/synthdata.hpp"

namespace poselab {

// Dataset file layout (all integers little-endian):
//   magic "DCPD" | u16 version=1 | u32 header_len | header JSON
//   per record: u16 category | u32 record seed | pose 15 x f64 (R,t,s)
//               | canonical N*3 f32 | observed N*3 f32
//   u32 CRC32 over every preceding byte
namespace dcpd {

constexpr char kMagic[4] = {'D', 'C', 'P', 'D'};
constexpr std::uint16_t kVersion = 1;

inline nlohmann::json spec_to_json(const CategorySpec& s) {
  return {{"id", s.id},         {"e1_lo", s.e1_lo},
          {"e1_hi", s.e1_hi},   {"e2_lo", s.e2_lo},
          {"e2_hi", s.e2_hi},   {"bump_amp", s.bump_amp},
          {"bump_freq", s.bump_freq}, {"difficulty_rank", s.difficulty_rank}};
}

inline CategorySpec spec_from_json(const nlohmann::json& j) {
  CategorySpec s;
  s.id = j.at("id").get<int>();
  s.e1_lo = j.at("e1_lo").get<double>();
  s.e1_hi = j.at("e1_hi").get<double>();
  s.e2_lo = j.at("e2_lo").get<double>();
  s.e2_hi = j.at("e2_hi").get<double>();
  s.bump_amp = j.at("bump_amp").get<double>();
  s.bump_freq = j.at("bump_freq").get<int>();
  s.difficulty_rank = j.at("difficulty_rank").get<int>();
  return s;
}

}  // namespace dcpd

inline std::string serialize_dataset(const Dataset& d) {
  nlohmann::json h = {
      {"k", d.header.k},       {"g_default", d.header.g_default},
      {"n", d.header.n},       {"seed", d.header.seed},
      {"sigma", d.header.sigma}, {"split", d.header.split},
      {"profile", d.header.profile}, {"count", d.instances.size()},
  };
  h["specs"] = nlohmann::json::array();
  for (const auto& s : d.header.specs) h["specs"].push_back(dcpd::spec_to_json(s));
  const std::string hj = h.dump();

  std::string b;
  b.append(dcpd::kMagic, 4);
  wire::put_u16(b, dcpd::kVersion);
  wire::put_u32(b, static_cast<std::uint32_t>(hj.size()));
  b.append(hj);
  for (const auto& inst : d.instances) {
    wire::put_u16(b, static_cast<std::uint16_t>(inst.category));
    wire::put_u32(b, inst.record_seed);
    for (int i = 0; i < 9; ++i) wire::put_f64(b, inst.pose.R.m[i]);
    for (int i = 0; i < 3; ++i) wire::put_f64(b, inst.pose.t[i]);
    for (int i = 0; i < 3; ++i) wire::put_f64(b, inst.pose.s[i]);
    for (double v : inst.canonical.data) wire::put_f32(b, static_cast<float>(v));
    for (double v : inst.observed.data) wire::put_f32(b, static_cast<float>(v));
  }
  wire::put_u32(b, crc32_of(b));
  return b;
}

inline void write_dataset(const Dataset& d, const std::string& path) {
  atomic_write_file(path, serialize_dataset(d));
}

inline Dataset parse_dataset(const std::string& bytes) {
  if (bytes.size() < 10)
    throw DataError(DataErrorCode::kTruncated, "file shorter than fixed prefix");
  if (bytes.compare(0, 4, dcpd::kMagic, 4) != 0)
    throw DataError(DataErrorCode::kMagicMismatch, "not a DCPD file");
  wire::Cursor cur{bytes, 4};
  const std::uint16_t version = cur.u16();
  if (version != dcpd::kVersion)
    throw DataError(DataErrorCode::kVersionMismatch,
                    "version " + std::to_string(version) + ", expected " +
                        std::to_string(dcpd::kVersion));
  if (bytes.size() < 4 + 2 + 4 + 4)
    throw DataError(DataErrorCode::kTruncated, "no room for header and checksum");
  const std::uint32_t stored_crc = [&] {
    wire::Cursor tail{bytes, bytes.size() - 4};
    return tail.u32();
  }();
  const std::uint32_t actual_crc = crc32_of(bytes.substr(0, bytes.size() - 4));
  if (stored_crc != actual_crc)
    throw DataError(DataErrorCode::kChecksumMismatch,
                    "stored " + std::to_string(stored_crc) + ", computed " +
                        std::to_string(actual_crc));

  Dataset d;
  try {
    const std::uint32_t hlen = cur.u32();
    const std::string hj = cur.bytes(hlen);
    nlohmann::json h = nlohmann::json::parse(hj);
    d.header.k = h.at("k").get<int>();
    d.header.g_default = h.at("g_default").get<int>();
    d.header.n = h.at("n").get<int>();
    d.header.seed = h.at("seed").get<std::uint64_t>();
    d.header.sigma = h.at("sigma").get<double>();
    d.header.split = h.at("split").get<std::string>();
    d.header.profile = h.at("profile").get<std::string>();
    for (const auto& js : h.at("specs"))
      d.header.specs.push_back(dcpd::spec_from_json(js));
    const auto count = h.at("count").get<std::uint64_t>();
    if (d.header.k < 1 || d.header.n < 1 ||
        d.header.specs.size() != static_cast<size_t>(d.header.k))
      throw DataError(DataErrorCode::kBadHeader, "inconsistent header fields");

    const int n = d.header.n;
    d.instances.reserve(count);
    for (std::uint64_t r = 0; r < count; ++r) {
      Instance inst;
      inst.category = cur.u16();
      inst.record_seed = cur.u32();
      for (int i = 0; i < 9; ++i) inst.pose.R.m[i] = cur.f64();
      for (int i = 0; i < 3; ++i) inst.pose.t[i] = cur.f64();
      for (int i = 0; i < 3; ++i) inst.pose.s[i] = cur.f64();
      inst.canonical = Tensor::zeros({n, 3});
      inst.observed = Tensor::zeros({n, 3});
      for (auto* t : {&inst.canonical, &inst.observed})
        for (std::int64_t i = 0; i < t->size(); ++i)
          (*t)[i] = static_cast<double>(cur.f32());
      inst.sigma = d.header.sigma;
      if (inst.category >= d.header.k)
        throw DataError(DataErrorCode::kBadHeader,
                        "record category " + std::to_string(inst.category) +
                            " out of range");
      d.instances.push_back(std::move(inst));
    }
    if (cur.pos != bytes.size() - 4)
      throw DataError(DataErrorCode::kTruncated, "trailing bytes after records");
  } catch (const IoError& e) {
    throw DataError(DataErrorCode::kTruncated, e.what());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrorCode::kBadHeader, e.what());
  }
  return d;
}

inline Dataset read_dataset(const std::string& path) {
  return parse_dataset(read_file(path));
}

}  // namespace poselab
