#pragma once

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "drseg/config_json.hpp"
#include "drseg/network.hpp"

namespace drseg {

// Checkpoint archive: magic "DRSEG1\n", a length-prefixed JSON header with
// the NetConfig, step count and tensor shapes, then the raw little-endian
// doubles of every tensor in name order. Round-trips are bit exact.

struct Checkpoint {
  NetConfig config;
  ModelParams params;
  long step = 0;
};

namespace detail {
constexpr char kCkptMagic[] = "DRSEG1\n";
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);

  nlohmann::json header;
  header["config"] = to_json(ckpt.config);
  header["step"] = ckpt.step;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.params)
    tensors.push_back({{"name", name}, {"h", t.h}, {"w", t.w}, {"c", t.c}});
  header["tensors"] = tensors;
  const std::string hs = header.dump();

  os.write(detail::kCkptMagic, sizeof(detail::kCkptMagic) - 1);
  const uint64_t len = hs.size();
  os.write(reinterpret_cast<const char*>(&len), sizeof(len));
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : ckpt.params)
    os.write(reinterpret_cast<const char*>(t.v.data()),
             static_cast<std::streamsize>(t.v.size() * sizeof(double)));
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[sizeof(detail::kCkptMagic) - 1];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0)
    throw std::runtime_error("load_checkpoint: " + path + " is not a DRSEG1 checkpoint");
  uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string hs(len, '\0');
  is.read(hs.data(), static_cast<std::streamsize>(len));
  if (!is) throw std::runtime_error("load_checkpoint: truncated header in " + path);

  nlohmann::json header = nlohmann::json::parse(hs);
  Checkpoint ckpt;
  ckpt.config = net_config_from_json(header.at("config"));
  ckpt.step = header.at("step").get<long>();
  for (const auto& tj : header.at("tensors")) {
    const std::string name = tj.at("name").get<std::string>();
    Tensor t(tj.at("h").get<int>(), tj.at("w").get<int>(), tj.at("c").get<int>());
    is.read(reinterpret_cast<char*>(t.v.data()),
            static_cast<std::streamsize>(t.v.size() * sizeof(double)));
    if (!is) throw std::runtime_error("load_checkpoint: truncated tensor " + name + " in " + path);
    ckpt.params.emplace(name, std::move(t));
  }
  // shape consistency with the stored config
  ModelParams ref = init_params(ckpt.config, 0);
  if (ref.size() != ckpt.params.size())
    throw std::runtime_error("load_checkpoint: parameter set does not match the stored config");
  for (const auto& [name, t] : ref) {
    auto it = ckpt.params.find(name);
    if (it == ckpt.params.end() || it->second.h != t.h || it->second.w != t.w ||
        it->second.c != t.c)
      throw std::runtime_error("load_checkpoint: tensor " + name +
                               " missing or mis-shaped for the stored config");
  }
  return ckpt;
}

}  // namespace drseg
