#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "poselab/io_util.hpp"
#include "poselab/model.hpp"
#include "poselab/param_store.hpp"

namespace poselab {

// Checkpoint layout: u32 manifest_len | manifest JSON | f32 LE blob | u32 CRC32
// (CRC over manifest length, manifest, and blob). The manifest carries epoch,
// config hash, the full model config and routing table (so evaluate/diagnose
// are self-contained), and a tensor table with byte offsets into the blob.
struct Checkpoint {
  int epoch = 0;
  ModelConfig model_config;
  nlohmann::json routing;  // routing table JSON, or null for unrouted runs
  ParamStore params;       // values only; optimizer moments are not persisted
};

inline std::string serialize_checkpoint(int epoch, const ModelConfig& cfg,
                                        const nlohmann::json& routing,
                                        const ParamStore& params) {
  nlohmann::json table = nlohmann::json::array();
  std::string blob;
  for (const auto& [name, e] : params) {
    table.push_back({{"name", name},
                     {"block", e.block},
                     {"shape", e.value.shape},
                     {"dtype", "f32"},
                     {"offset", blob.size()}});
    for (std::int64_t k = 0; k < e.value.size(); ++k)
      wire::put_f32(blob, static_cast<float>(e.value[k]));
  }
  nlohmann::json manifest = {{"epoch", epoch},
                             {"config_hash", cfg.hash()},
                             {"model_config", cfg.to_json()},
                             {"routing", routing},
                             {"tensors", table},
                             {"blob_bytes", blob.size()}};
  const std::string mj = manifest.dump();
  std::string out;
  wire::put_u32(out, static_cast<std::uint32_t>(mj.size()));
  out.append(mj);
  out.append(blob);
  wire::put_u32(out, crc32_of(out));
  return out;
}

inline void save_checkpoint(const std::string& path, int epoch,
                            const ModelConfig& cfg, const nlohmann::json& routing,
                            const ParamStore& params) {
  atomic_write_file(path, serialize_checkpoint(epoch, cfg, routing, params));
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8)
    throw DataError(DataErrorCode::kTruncated, "checkpoint smaller than framing");
  const std::uint32_t stored_crc = [&] {
    wire::Cursor tail{bytes, bytes.size() - 4};
    return tail.u32();
  }();
  if (stored_crc != crc32_of(bytes.substr(0, bytes.size() - 4)))
    throw DataError(DataErrorCode::kChecksumMismatch, "checkpoint CRC mismatch");

  wire::Cursor cur{bytes, 0};
  Checkpoint ck;
  try {
    const std::uint32_t mlen = cur.u32();
    nlohmann::json manifest = nlohmann::json::parse(cur.bytes(mlen));
    ck.epoch = manifest.at("epoch").get<int>();
    ck.model_config = ModelConfig::from_json(manifest.at("model_config"));
    ck.routing = manifest.value("routing", nlohmann::json());
    if (manifest.at("config_hash").get<std::uint32_t>() != ck.model_config.hash())
      throw DataError(DataErrorCode::kBadHeader, "config hash mismatch");
    const size_t blob_off = cur.pos;
    const auto blob_bytes = manifest.at("blob_bytes").get<std::uint64_t>();
    if (blob_off + blob_bytes + 4 != bytes.size())
      throw DataError(DataErrorCode::kTruncated, "blob size mismatch");
    for (const auto& jt : manifest.at("tensors")) {
      const auto name = jt.at("name").get<std::string>();
      const auto block = jt.at("block").get<std::string>();
      const auto shape = jt.at("shape").get<Shape>();
      const auto offset = jt.at("offset").get<std::uint64_t>();
      if (jt.at("dtype").get<std::string>() != "f32")
        throw DataError(DataErrorCode::kBadHeader, "unsupported dtype");
      Tensor t = Tensor::zeros(shape);
      wire::Cursor tc{bytes, blob_off + offset};
      if (blob_off + offset + 4 * static_cast<size_t>(t.size()) >
          bytes.size() - 4)
        throw DataError(DataErrorCode::kTruncated,
                        "tensor " + name + " extends past blob");
      for (std::int64_t k = 0; k < t.size(); ++k)
        t[k] = static_cast<double>(tc.f32());
      ck.params.add(name, block, std::move(t));
    }
  } catch (const IoError& e) {
    throw DataError(DataErrorCode::kTruncated, e.what());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrorCode::kBadHeader, e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(DataErrorCode::kBadHeader, e.what());
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return parse_checkpoint(read_file(path));
}

}  // namespace poselab
