#pragma once

// Save/load for the concrete model types on top of the checkpoint container.

#include "unseg/model/checkpoint.hpp"
#include "unseg/model/victim.hpp"

namespace unseg::model {

inline json to_json(const SegModelConfig& c) {
  return json{{"image_size", c.image_size},   {"embed_dim", c.embed_dim},
              {"patch", c.patch},             {"encoder_blocks", c.encoder_blocks},
              {"decoder_blocks", c.decoder_blocks}, {"heads", c.heads},
              {"mlp_ratio", c.mlp_ratio},     {"with_noise_tokens", c.with_noise_tokens},
              {"num_output_tokens", c.num_output_tokens}};
}

inline SegModelConfig segmodel_config_from_json(const json& j) {
  SegModelConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.patch = j.at("patch").get<int>();
  c.encoder_blocks = j.at("encoder_blocks").get<int>();
  c.decoder_blocks = j.at("decoder_blocks").get<int>();
  c.heads = j.at("heads").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<int>();
  c.with_noise_tokens = j.at("with_noise_tokens").get<bool>();
  c.num_output_tokens = j.at("num_output_tokens").get<int>();
  return c;
}

template <typename Model>
std::vector<NamedArray> enumerate_params(Model& m, const std::string& prefix = "") {
  ParamList<float> list;
  m.collect_all(list);
  std::vector<NamedArray> out;
  for (auto* p : list.items) out.push_back({prefix + p->name, &p->value});
  return out;
}

inline void save_segmodel(const fs::path& path, PromptableSegModel<float>& m, json extra = {},
                          std::uint64_t seed = 0, std::int64_t step = 0) {
  json header;
  header["arch"] = "promptable_seg";
  header["config"] = to_json(m.cfg);
  header["seed"] = seed;
  header["step"] = step;
  if (!extra.is_null()) header["extra"] = extra;
  save_checkpoint(path, header, enumerate_params(m));
}

inline PromptableSegModel<float> load_segmodel(const fs::path& path, json* header_out = nullptr) {
  LoadedCheckpoint ck = load_checkpoint(path);
  check(ck.header.at("arch") == "promptable_seg", "not a promptable_seg checkpoint: " + path.string());
  SegModelConfig cfg = segmodel_config_from_json(ck.header.at("config"));
  PromptableSegModel<float> m(cfg, 0);
  ParamList<float> list;
  m.collect_all(list);
  for (auto* p : list.items) {
    const Tensor<float>& t = ck.get(p->name);
    check(t.dims == p->value.dims, "checkpoint: shape mismatch for " + p->name);
    p->value = t;
  }
  if (header_out) *header_out = ck.header;
  return m;
}

inline void save_victim(const fs::path& path, VictimModel<float>& m, json extra = {}, std::uint64_t seed = 0,
                        std::int64_t step = 0) {
  json header;
  header["arch"] = to_string(m.arch);
  header["image_size"] = m.image_size;
  header["num_classes"] = m.num_classes;
  header["seed"] = seed;
  header["step"] = step;
  if (!extra.is_null()) header["extra"] = extra;
  ParamList<float> list;
  m.collect(list);
  std::vector<NamedArray> arrays;
  for (auto* p : list.items) arrays.push_back({p->name, &p->value});
  save_checkpoint(path, header, arrays);
}

inline VictimModel<float> load_victim(const fs::path& path, json* header_out = nullptr) {
  LoadedCheckpoint ck = load_checkpoint(path);
  const VictimArch arch = victim_arch_from_string(ck.header.at("arch").get<std::string>());
  VictimModel<float> m = VictimModel<float>::make(arch, ck.header.at("image_size").get<int>(),
                                                  ck.header.at("num_classes").get<int>(), 0);
  ParamList<float> list;
  m.collect(list);
  for (auto* p : list.items) {
    const Tensor<float>& t = ck.get(p->name);
    check(t.dims == p->value.dims, "checkpoint: shape mismatch for " + p->name);
    p->value = t;
  }
  if (header_out) *header_out = ck.header;
  return m;
}

}  // namespace unseg::model
