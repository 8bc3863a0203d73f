#pragma once

// Versioned binary checkpoint container: magic, version, embedded JSON header
// (architecture tag, dims, seed, array directory), then raw little-endian
// float32 arrays in declared order.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "unseg/core/optim.hpp"

namespace unseg::model {

namespace fs = std::filesystem;
using json = nlohmann::json;

constexpr char kCkptMagic[8] = {'U', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

struct NamedArray {
  std::string name;
  const Tensor<float>* tensor;
};

inline void save_checkpoint(const fs::path& path, json header, const std::vector<NamedArray>& arrays) {
  json dir = json::array();
  for (const auto& a : arrays) {
    json e;
    e["name"] = a.name;
    e["shape"] = a.tensor->dims;
    dir.push_back(e);
  }
  header["arrays"] = dir;
  const std::string htext = header.dump();

  std::vector<unsigned char> buf;
  auto put = [&buf](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    buf.insert(buf.end(), b, b + n);
  };
  put(kCkptMagic, sizeof(kCkptMagic));
  const std::uint32_t ver = kCkptVersion;
  put(&ver, sizeof(ver));
  const std::uint64_t hlen = htext.size();
  put(&hlen, sizeof(hlen));
  put(htext.data(), htext.size());
  for (const auto& a : arrays) put(a.tensor->data(), sizeof(float) * static_cast<std::size_t>(a.tensor->numel()));

  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    check(out.good(), "checkpoint: cannot open " + tmp.string());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    check(out.good(), "checkpoint: write failed " + tmp.string());
  }
  fs::rename(tmp, path);
}

struct LoadedCheckpoint {
  json header;
  std::vector<std::pair<std::string, Tensor<float>>> arrays;

  const Tensor<float>& get(const std::string& name) const {
    for (const auto& [n, t] : arrays)
      if (n == name) return t;
    throw Error("checkpoint: missing array " + name);
  }
};

inline LoadedCheckpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "checkpoint: cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  check(in.good() && std::memcmp(magic, kCkptMagic, 8) == 0, "checkpoint: bad magic in " + path.string());
  std::uint32_t ver = 0;
  in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  check(ver == kCkptVersion, "checkpoint: unsupported version");
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  check(in.good(), "checkpoint: truncated header");

  LoadedCheckpoint out;
  out.header = json::parse(htext);
  for (const auto& e : out.header.at("arrays")) {
    const std::string name = e.at("name").get<std::string>();
    const std::vector<std::int64_t> shape = e.at("shape").get<std::vector<std::int64_t>>();
    Tensor<float> t(shape);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(sizeof(float) * t.numel()));
    check(in.good(), "checkpoint: truncated array " + name);
    out.arrays.emplace_back(name, std::move(t));
  }
  return out;
}

/// Save every parameter of a registry (declared order) plus the header.
inline void save_registry(const fs::path& path, json header, const ParamRegistry<float>& reg) {
  std::vector<NamedArray> arrays;
  for (std::size_t i = 0; i < reg.size(); ++i) arrays.push_back({reg.at(i).name, &reg.at(i).value});
  save_checkpoint(path, std::move(header), arrays);
}

/// Restore registry parameters by name, validating shapes.
inline json load_registry(const fs::path& path, ParamRegistry<float>& reg) {
  LoadedCheckpoint ck = load_checkpoint(path);
  for (std::size_t i = 0; i < reg.size(); ++i) {
    Param<float>& p = reg.at(i);
    const Tensor<float>& t = ck.get(p.name);
    check(t.dims == p.value.dims, "checkpoint: shape mismatch for " + p.name);
    p.value = t;
  }
  return ck.header;
}

}  // namespace unseg::model
