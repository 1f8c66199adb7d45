#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pulse/errors.hpp"
#include "pulse/hash.hpp"
#include "pulse/model.hpp"

namespace pulse {

// Checkpoint file layout:
//
//   PULSE_CKPT v1\n
//   <one-line JSON header>\n
//   <raw float32 little-endian blob>
//
// The header carries the model config, the parameter manifest (name, shape,
// byte offset into the blob) and a content hash of the blob. Bytes are
// written explicitly least-significant first, so the file is identical on
// any platform and load -> forward is bit-stable.

inline constexpr std::string_view kCheckpointMagic = "PULSE_CKPT v1";

namespace detail {

inline void put_f32_le(std::string& out, float f) {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
  out.push_back(static_cast<char>(bits & 0xff));
  out.push_back(static_cast<char>((bits >> 8) & 0xff));
  out.push_back(static_cast<char>((bits >> 16) & 0xff));
  out.push_back(static_cast<char>((bits >> 24) & 0xff));
}

inline float get_f32_le(const std::string& blob, std::size_t byte_off) {
  std::uint32_t bits = 0;
  for (int i = 3; i >= 0; --i) {
    bits <<= 8;
    bits |= static_cast<unsigned char>(blob[byte_off + static_cast<std::size_t>(i)]);
  }
  return std::bit_cast<float>(bits);
}

}  // namespace detail

inline void save_checkpoint(const TransformerClassifier<float>& model,
                            const std::filesystem::path& path) {
  std::string blob;
  blob.reserve(model.n_params() * 4);
  for (float f : model.params()) detail::put_f32_le(blob, f);

  nlohmann::json params = nlohmann::json::array();
  for (const ParamView& v : model.layout()) {
    params.push_back({{"name", v.name},
                      {"rows", v.rows},
                      {"cols", v.cols},
                      {"offset_bytes", v.offset * 4}});
  }
  nlohmann::json header = {{"config", model.config().to_json()},
                           {"params", std::move(params)},
                           {"blob_bytes", blob.size()},
                           {"blob_hash", hash_hex(fnv1a64(blob))}};

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path.string());
  out << kCheckpointMagic << '\n' << header.dump() << '\n' << blob;
  if (!out) throw DataError("checkpoint write failed: " + path.string());
}

inline TransformerClassifier<float> load_checkpoint(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  std::string magic, header_line;
  if (!std::getline(in, magic) || magic != kCheckpointMagic)
    throw DataError("not a checkpoint file: " + path.string());
  if (!std::getline(in, header_line))
    throw DataError("checkpoint header missing: " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint header is not valid JSON: " +
                    std::string(e.what()));
  }

  const ModelConfig cfg = ModelConfig::from_json(header.at("config"));
  TransformerClassifier<float> model(cfg,
                                     TransformerClassifier<float>::NoInit{});

  const std::size_t blob_bytes = header.at("blob_bytes").get<std::size_t>();
  if (blob_bytes != model.n_params() * 4)
    throw DataError("checkpoint blob size disagrees with config");
  std::string blob(blob_bytes, '\0');
  in.read(blob.data(), static_cast<std::streamsize>(blob_bytes));
  if (static_cast<std::size_t>(in.gcount()) != blob_bytes)
    throw DataError("checkpoint blob truncated: " + path.string());
  if (hash_hex(fnv1a64(blob)) != header.at("blob_hash").get<std::string>())
    throw DataError("checkpoint blob hash mismatch: " + path.string());

  // Cross-check the stored manifest against this build's layout.
  const auto& params_json = header.at("params");
  const auto& layout = model.layout();
  if (params_json.size() != layout.size())
    throw DataError("checkpoint parameter manifest disagrees with layout");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& pj = params_json[i];
    if (pj.at("name").get<std::string>() != layout[i].name ||
        pj.at("rows").get<std::size_t>() != layout[i].rows ||
        pj.at("cols").get<std::size_t>() != layout[i].cols ||
        pj.at("offset_bytes").get<std::size_t>() != layout[i].offset * 4)
      throw DataError("checkpoint parameter manifest mismatch at " +
                      layout[i].name);
  }

  for (std::size_t i = 0; i < model.n_params(); ++i)
    model.params()[i] = detail::get_f32_le(blob, i * 4);
  return model;
}

}  // namespace pulse
