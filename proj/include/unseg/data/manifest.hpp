#pragma once

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "unseg/data/image_io.hpp"
#include "unseg/data/types.hpp"

namespace unseg::data {

using json = nlohmann::json;

struct Record {
  std::string id;
  std::string image;   // path relative to the dataset root
  std::string label;
  std::string prompt;
  PromptKind prompt_kind = PromptKind::mask;
};

/// Describes a dataset on disk: images/*.png, labels/*.png, prompts/*.png and
/// a manifest.json with the schema written by `save`.
struct DatasetManifest {
  fs::path root;
  int version = 1;
  std::string kind;  // "iis" or "downstream"
  int num_classes = 2;
  int size = 64;
  std::vector<std::string> class_names;
  std::vector<Record> train;
  std::vector<Record> val;

  static constexpr const char* kFileName = "manifest.json";

  void save(const std::string& filename = kFileName) const {
    json j;
    j["version"] = version;
    j["kind"] = kind;
    j["num_classes"] = num_classes;
    j["size"] = size;
    j["class_names"] = class_names;
    auto dump_split = [](const std::vector<Record>& rs) {
      json a = json::array();
      for (const auto& r : rs)
        a.push_back({{"id", r.id},
                     {"image", r.image},
                     {"label", r.label},
                     {"prompt", r.prompt},
                     {"prompt_kind", to_string(r.prompt_kind)}});
      return a;
    };
    j["train"] = dump_split(train);
    j["val"] = dump_split(val);
    const std::string text = j.dump(2) + "\n";
    atomic_write(root / filename, std::vector<unsigned char>(text.begin(), text.end()));
  }

  static DatasetManifest load(const fs::path& manifest_path) {
    std::ifstream in(manifest_path);
    check(in.good(), "cannot open manifest: " + manifest_path.string());
    json j = json::parse(in);
    DatasetManifest m;
    m.root = manifest_path.parent_path();
    m.version = j.at("version").get<int>();
    m.kind = j.at("kind").get<std::string>();
    m.num_classes = j.at("num_classes").get<int>();
    m.size = j.at("size").get<int>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    auto parse_split = [](const json& a) {
      std::vector<Record> rs;
      for (const auto& e : a) {
        Record r;
        r.id = e.at("id").get<std::string>();
        r.image = e.at("image").get<std::string>();
        r.label = e.at("label").get<std::string>();
        r.prompt = e.at("prompt").get<std::string>();
        r.prompt_kind = prompt_kind_from_string(e.at("prompt_kind").get<std::string>());
        rs.push_back(std::move(r));
      }
      return rs;
    };
    m.train = parse_split(j.at("train"));
    m.val = parse_split(j.at("val"));
    return m;
  }

  Image load_image(const Record& r) const { return read_image_png(root / r.image); }
  LabelMask load_label(const Record& r) const { return read_label_png(root / r.label, num_classes); }
  MaskPrompt load_prompt(const Record& r) const {
    MaskPrompt p;
    p.mask = read_mask_png(root / r.prompt);
    p.kind = r.prompt_kind;
    return p;
  }
  SegSample load_sample(const Record& r) const { return {load_image(r), load_prompt(r), load_label(r)}; }

  /// Full scan: every file exists, decodes, and has consistent shapes.
  void validate() const {
    for (const auto* split : {&train, &val})
      for (const auto& r : *split) {
        SegSample s = load_sample(r);
        check(s.image.height() == size && s.image.width() == size, "image shape mismatch: " + r.id);
        check(s.label.height() == size && s.label.width() == size, "label shape mismatch: " + r.id);
        check(s.prompt.mask.dim(0) == size && s.prompt.mask.dim(1) == size, "prompt shape mismatch: " + r.id);
        check(s.label.in_range(), "label out of range: " + r.id);
      }
  }
};

/// FNV-1a digest over the manifest file and every referenced file's bytes, in
/// manifest order. Used as a dataset provenance fingerprint.
inline std::uint64_t dataset_digest(const DatasetManifest& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto eat_bytes = [&h](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    check(in.good(), "digest: cannot open " + p.string());
    char buf[4096];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
      for (std::streamsize i = 0; i < in.gcount(); ++i) {
        h ^= static_cast<unsigned char>(buf[i]);
        h *= 0x100000001b3ULL;
      }
    }
  };
  eat_bytes(m.root / DatasetManifest::kFileName);
  for (const auto* split : {&m.train, &m.val})
    for (const auto& r : *split) {
      eat_bytes(m.root / r.image);
      eat_bytes(m.root / r.label);
      eat_bytes(m.root / r.prompt);
    }
  return h;
}

inline std::string digest_hex(std::uint64_t d) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(d));
  return std::string(buf);
}

}  // namespace unseg::data
