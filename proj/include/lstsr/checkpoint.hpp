#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lstsr/error.hpp"
#include "lstsr/mrunet.hpp"

namespace lstsr {

// Layout: "MRUC" | u32 version | u32 manifest length | JSON manifest | f32le payload.
inline constexpr std::array<char, 4> kCheckpointMagic{'M', 'R', 'U', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

template <std::floating_point T>
std::string serialize_checkpoint(const MruNet<T>& net) {
  nlohmann::json manifest;
  manifest["config"] = net.config();
  manifest["norm_max"] = net.norm_max;
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  const auto state = net.state();
  for (const auto& p : state) {
    const auto s = p.tensor.shape();
    tensors.push_back({{"name", p.name},
                       {"shape", {s.n, s.c, s.h, s.w}},
                       {"offset", offset},
                       {"count", p.tensor.numel()}});
    offset += p.tensor.numel() * sizeof(float);
  }
  manifest["tensors"] = tensors;
  manifest["payload_bytes"] = offset;
  const std::string text = manifest.dump();

  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& p : state)
    for (T v : p.tensor.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

template <std::floating_point T = float>
MruNet<T> deserialize_checkpoint(const std::string& bytes, const MruNetConfig* expected = nullptr) {
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic.data(), 4) != 0)
    throw FormatError("checkpoint: bad magic");
  const std::uint32_t version = detail::get_u32(raw + 4);
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const std::size_t mlen = detail::get_u32(raw + 8);
  if (12 + mlen > bytes.size()) throw FormatError("checkpoint: manifest truncated");

  nlohmann::json manifest;
  MruNetConfig cfg;
  double norm_max = 1.0;
  std::size_t payload_bytes = 0;
  try {
    manifest = nlohmann::json::parse(bytes.substr(12, mlen));
    cfg = manifest.at("config").get<MruNetConfig>();
    norm_max = manifest.at("norm_max").get<double>();
    payload_bytes = manifest.at("payload_bytes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: corrupt manifest: ") + e.what());
  }
  if (expected && !(*expected == cfg)) throw InvalidArgument("checkpoint: config mismatch on strict load");
  const std::size_t base = 12 + mlen;
  if (bytes.size() != base + payload_bytes)
    throw FormatError("checkpoint: payload is " + std::to_string(bytes.size() - base) +
                      " bytes, manifest declares " + std::to_string(payload_bytes));

  MruNet<T> net = MruNet<T>::build(cfg, 0);
  net.norm_max = norm_max;
  auto state = net.state();
  const auto& entries = manifest.at("tensors");
  if (!entries.is_array() || entries.size() != state.size())
    throw FormatError("checkpoint: tensor manifest does not match the architecture");
  for (std::size_t i = 0; i < state.size(); ++i) {
    const auto& e = entries[i];
    const auto s = state[i].tensor.shape();
    try {
      if (e.at("name").get<std::string>() != state[i].name)
        throw FormatError("checkpoint: expected tensor " + state[i].name + ", found " +
                          e.at("name").get<std::string>());
      if (e.at("shape") != nlohmann::json{s.n, s.c, s.h, s.w})
        throw FormatError("checkpoint: shape mismatch for " + state[i].name);
      const auto off = e.at("offset").get<std::size_t>();
      const auto count = e.at("count").get<std::size_t>();
      if (count != state[i].tensor.numel() || off + count * sizeof(float) > payload_bytes)
        throw FormatError("checkpoint: manifest entry for " + state[i].name + " exceeds payload");
      auto dst = state[i].tensor.data();
      for (std::size_t j = 0; j < count; ++j)
        dst[j] = static_cast<T>(std::bit_cast<float>(detail::get_u32(raw + base + off + 4 * j)));
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(std::string("checkpoint: corrupt tensor entry: ") + ex.what());
    }
  }
  return net;
}

template <std::floating_point T>
void save_checkpoint(const MruNet<T>& net, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(net);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

template <std::floating_point T = float>
MruNet<T> load_checkpoint(const std::filesystem::path& path, const MruNetConfig* expected = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint<T>(bytes, expected);
}

}  // namespace lstsr
