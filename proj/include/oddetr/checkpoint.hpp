// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint files:
//
//   8 bytes   magic "ODDETRCK"
//   8 bytes   little-endian uint64 length of the JSON header
//   N bytes   JSON header: role, seed, stage count, resolved config (INI
//             text) and the tensor list with shapes, in declaration order
//   ...       float32 little-endian tensor data, row-major, same order
//
// The header carries no epoch or timestamp, so two checkpoints of identical
// parameters are byte-identical.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oddetr/config.hpp"
#include "oddetr/network.hpp"

namespace oddetr {

inline constexpr char kCheckpointMagic[8] = {'O', 'D', 'D', 'E', 'T', 'R', 'C', 'K'};

struct Checkpoint {
  std::string role;  ///< "student" or "ema"
  TrainConfig config;
  ModelParams params;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const ModelParams& params, const TrainConfig& cfg, const std::string& role) {
  nlohmann::json header;
  header["role"] = role;
  header["seed"] = cfg.seed;
  header["num_stages"] = params.config().num_stages;
  header["config"] = to_ini(cfg);
  auto& tensors = header["tensors"] = nlohmann::json::array();
  for (const auto& t : params.layout().tensors()) tensors.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}});
  const std::string h = header.dump();

  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u64(out, h.size());
  out += h;
  const auto data = params.data();
  out.reserve(out.size() + 4 * data.size());
  for (double v : data) {
    const float f = static_cast<float>(v);
    char b[4];
    std::memcpy(b, &f, 4);
    out.append(b, 4);
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint (bad magic)");
  const std::uint64_t hlen = detail::get_u64(bytes.data() + 8);
  if (hlen > bytes.size() - 16) throw std::runtime_error("checkpoint header truncated");
  const auto header = nlohmann::json::parse(bytes.substr(16, hlen));
  Checkpoint ck;
  ck.role = header.at("role").get<std::string>();
  ck.config = parse_config_string(header.at("config").get<std::string>());
  ck.params = ModelParams(ck.config.resolved_model());
  const auto& tensors = header.at("tensors");
  const auto& layout = ck.params.layout().tensors();
  if (tensors.size() != layout.size()) throw std::runtime_error("checkpoint tensor list does not match its config");
  for (std::size_t i = 0; i < layout.size(); ++i)
    if (tensors[i].at("name").get<std::string>() != layout[i].name ||
        tensors[i].at("shape")[0].get<int>() != layout[i].rows || tensors[i].at("shape")[1].get<int>() != layout[i].cols)
      throw std::runtime_error("checkpoint tensor " + layout[i].name + " does not match its config");
  auto data = ck.params.data();
  if (bytes.size() != 16 + hlen + 4 * data.size()) throw std::runtime_error("checkpoint payload size mismatch");
  const char* p = bytes.data() + 16 + hlen;
  for (std::size_t i = 0; i < data.size(); ++i) {
    float f;
    std::memcpy(&f, p + 4 * i, 4);
    data[i] = f;
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const ModelParams& params, const TrainConfig& cfg,
                            const std::string& role) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  const auto bytes = encode_checkpoint(params, cfg, role);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str());
}

}  // namespace oddetr
