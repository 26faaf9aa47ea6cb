#pragma once

#include <bit>
#include <cstring>
#include <string>

#include <json.hpp>

#include "pke/model.hpp"

namespace pke {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{
      {"vocab_size", cfg.vocab_size}, {"d_model", cfg.d_model},
      {"n_layers", cfg.n_layers},     {"n_heads", cfg.n_heads},
      {"d_ff", cfg.d_ff},             {"max_seq", cfg.max_seq},
      {"seed", cfg.seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  try {
    cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
    cfg.d_model = j.at("d_model").get<std::size_t>();
    cfg.n_layers = j.at("n_layers").get<std::size_t>();
    cfg.n_heads = j.at("n_heads").get<std::size_t>();
    cfg.d_ff = j.at("d_ff").get<std::size_t>();
    cfg.max_seq = j.at("max_seq").get<std::size_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

// Checkpoint layout, little-endian throughout:
//   magic "PKE1"
//   u64 manifest byte length
//   manifest: UTF-8 JSON {config, dtype:"f64", tensors:{name->shape}, checksum}
//   raw f64 payloads in manifest (sorted-name) order
//   trailing u32 CRC32 over the payload bytes (same value as the manifest's
//   checksum field, so truncation is caught from either end)

inline std::string encode_checkpoint(const ModelConfig& cfg,
                                     const ParameterStore& store) {
  std::string payload;
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, tensor] : store) {
    tensors[name] = tensor.shape();
    const char* bytes = reinterpret_cast<const char*>(tensor.data().data());
    payload.append(bytes, tensor.numel() * sizeof(double));
  }
  const std::uint32_t checksum = crc32(payload.data(), payload.size());

  nlohmann::json manifest{{"config", config_to_json(cfg)},
                          {"dtype", "f64"},
                          {"tensors", tensors},
                          {"checksum", checksum}};
  const std::string manifest_str = manifest.dump();

  std::string out = "PKE1";
  const std::uint64_t mlen = manifest_str.size();
  out.append(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  out += manifest_str;
  out += payload;
  out.append(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
  return out;
}

inline void save_checkpoint(const ModelConfig& cfg, const ParameterStore& store,
                            const std::string& path) {
  write_file_atomic(path, encode_checkpoint(cfg, store));
}

struct Checkpoint {
  ModelConfig config;
  ParameterStore params;
};

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  std::size_t off = 0;
  auto need = [&](std::size_t n, const char* what) {
    if (bytes.size() - off < n)
      throw IoError(std::string("checkpoint: truncated while reading ") + what);
  };
  need(4, "magic");
  if (bytes.compare(0, 4, "PKE1") != 0)
    throw IoError("checkpoint: bad magic bytes");
  off = 4;
  need(sizeof(std::uint64_t), "manifest length");
  std::uint64_t mlen = 0;
  std::memcpy(&mlen, bytes.data() + off, sizeof(mlen));
  off += sizeof(mlen);
  need(mlen, "manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(off, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: manifest parse error: ") + e.what());
  }
  off += mlen;

  Checkpoint ckpt;
  std::uint32_t declared = 0;
  nlohmann::json tensors;
  try {
    ckpt.config = config_from_json(manifest.at("config"));
    if (manifest.at("dtype").get<std::string>() != "f64")
      throw IoError("checkpoint: unsupported dtype");
    declared = manifest.at("checksum").get<std::uint32_t>();
    tensors = manifest.at("tensors");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: bad manifest: ") + e.what());
  }

  const std::size_t payload_start = off;
  for (auto it = tensors.begin(); it != tensors.end(); ++it) {
    std::vector<std::size_t> shape = it.value().get<std::vector<std::size_t>>();
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    need(n * sizeof(double), it.key().c_str());
    std::vector<double> data(n);
    std::memcpy(data.data(), bytes.data() + off, n * sizeof(double));
    off += n * sizeof(double);
    ckpt.params[it.key()] = Tensor(std::move(shape), std::move(data));
  }
  const std::uint32_t actual =
      crc32(bytes.data() + payload_start, off - payload_start);

  need(sizeof(std::uint32_t), "trailing checksum");
  std::uint32_t trailing = 0;
  std::memcpy(&trailing, bytes.data() + off, sizeof(trailing));
  if (actual != declared || actual != trailing)
    throw IoError("checkpoint: checksum mismatch (file corrupt or truncated)");
  return ckpt;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file(path));
}

/// Load and verify the store matches an expected config; mismatches throw
/// ShapeError naming the offending parameter.
inline Checkpoint load_checkpoint(const std::string& path,
                                  const ModelConfig& expected) {
  Checkpoint ckpt = load_checkpoint(path);
  validate_store_shapes(expected, ckpt.params);
  return ckpt;
}

}  // namespace pke
