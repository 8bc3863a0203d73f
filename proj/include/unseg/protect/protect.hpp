#pragma once

// Turn a downstream dataset into its protected (unlearnable) version, or a
// baseline-protected variant. Labels and prompts are copied byte-for-byte;
// only training images change. The validation split is always copied clean.

#include <filesystem>
#include <fstream>
#include <set>

#include "unseg/core/parallel.hpp"
#include "unseg/data/datagen.hpp"
#include "unseg/noise/noisegen.hpp"

namespace unseg::protect {

namespace fs = std::filesystem;
using data::DatasetManifest;
using data::Image;
using data::LabelMask;
using data::MaskPrompt;
using data::PromptKind;
using data::Record;
using noise::NoiseBudget;
using noise::NoiseField;
using json = nlohmann::json;

enum class Method { unseg, random_samplewise, random_classwise, synper };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::unseg: return "unseg";
    case Method::random_samplewise: return "random_samplewise";
    case Method::random_classwise: return "random_classwise";
    default: return "synper";
  }
}

inline Method method_from_string(const std::string& s) {
  if (s == "unseg") return Method::unseg;
  if (s == "random_samplewise") return Method::random_samplewise;
  if (s == "random_classwise") return Method::random_classwise;
  if (s == "synper") return Method::synper;
  throw Error("unknown protection method: " + s);
}

struct ProtectionPlan {
  fs::path source_manifest;
  bool all_classes = true;
  std::vector<int> target_classes;  // used when all_classes is false
  PromptKind prompt_kind = PromptKind::mask;
  NoiseBudget budget;
  Method method = Method::unseg;
  float clean_fraction = 0.0f;
  std::uint64_t seed = 0;
  int synper_patch = 8;

  void validate(int num_classes) const {
    budget.validate();
    check(clean_fraction >= 0.0f && clean_fraction <= 1.0f, "plan: clean_fraction must be in [0, 1]");
    if (!all_classes) {
      check(!target_classes.empty(), "plan: empty target class set");
      for (int c : target_classes)
        check(c >= 1 && c < num_classes, "plan: target class " + std::to_string(c) + " not in dataset");
    }
  }

  std::vector<int> resolve_targets(int num_classes) const {
    if (!all_classes) return target_classes;
    std::vector<int> all;
    for (int c = 1; c < num_classes; ++c) all.push_back(c);
    return all;
  }

  json to_json() const {
    json j;
    j["source"] = source_manifest.string();
    if (all_classes)
      j["target_classes"] = "all";
    else
      j["target_classes"] = target_classes;
    j["prompt_kind"] = data::to_string(prompt_kind);
    j["method"] = to_string(method);
    j["eps_target"] = budget.eps_target;
    j["eps_unrelated"] = budget.eps_unrelated;
    j["train_scale"] = budget.train_scale;
    j["clean_fraction"] = clean_fraction;
    j["seed"] = seed;
    j["synper_patch"] = synper_patch;
    return j;
  }

  static ProtectionPlan from_json(const json& j) {
    ProtectionPlan p;
    p.source_manifest = j.at("source").get<std::string>();
    if (j.at("target_classes").is_string()) {
      check(j.at("target_classes") == "all", "plan: target_classes must be a list or \"all\"");
      p.all_classes = true;
    } else {
      p.all_classes = false;
      p.target_classes = j.at("target_classes").get<std::vector<int>>();
    }
    if (j.contains("prompt_kind")) p.prompt_kind = data::prompt_kind_from_string(j.at("prompt_kind"));
    p.method = method_from_string(j.at("method").get<std::string>());
    if (j.contains("eps_target")) p.budget.eps_target = j.at("eps_target").get<float>();
    if (j.contains("eps_unrelated")) p.budget.eps_unrelated = j.at("eps_unrelated").get<float>();
    if (j.contains("train_scale")) p.budget.train_scale = j.at("train_scale").get<int>();
    if (j.contains("clean_fraction")) p.clean_fraction = j.at("clean_fraction").get<float>();
    if (j.contains("seed")) p.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("synper_patch")) p.synper_patch = j.at("synper_patch").get<int>();
    return p;
  }

  static ProtectionPlan load(const fs::path& path) {
    std::ifstream in(path);
    check(in.good(), "cannot open plan: " + path.string());
    return from_json(json::parse(in));
  }
};

// ---------------------------------------------------------------------------
// Baseline noise patterns
// ---------------------------------------------------------------------------

/// Uniform [-1, 1] pattern, seeded by (seed, tag, index).
inline Tensor<float> uniform_pattern(std::uint64_t seed, const std::string& tag, std::uint64_t index,
                                     std::int64_t h, std::int64_t w) {
  auto rng = substream(seed, tag, index);
  return Tensor<float>::rand_uniform({h, w, 3}, -1.0f, 1.0f, rng);
}

/// Per-class synthetic fields: a patch of entries drawn uniformly from
/// {-eps, +eps} tiled over the image.
inline std::vector<Tensor<float>> synper_patterns(int num_classes, int patch_size, float eps, std::int64_t h,
                                                  std::int64_t w, std::uint64_t seed) {
  check(patch_size > 0 && h % patch_size == 0 && w % patch_size == 0,
        "synper: patch size must divide the image size");
  std::vector<Tensor<float>> fields;
  for (int c = 0; c < num_classes; ++c) {
    auto rng = substream(seed, "synper-class", static_cast<std::uint64_t>(c));
    std::bernoulli_distribution coin(0.5);
    Tensor<float> patch({patch_size, patch_size, 3});
    for (auto& v : patch.v) v = coin(rng) ? eps : -eps;
    Tensor<float> field({h, w, 3});
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        for (int ch = 0; ch < 3; ++ch)
          field.at(y, x, ch) = patch.at(y % patch_size, x % patch_size, ch);
    fields.push_back(std::move(field));
  }
  return fields;
}

/// Per-pixel budget from label + target set: eps_target on pixels of target
/// classes, eps_unrelated elsewhere.
inline Tensor<float> label_eps_map(const LabelMask& label, const std::vector<int>& targets,
                                   const NoiseBudget& budget) {
  const std::int64_t h = label.height(), w = label.width();
  std::set<int> tset(targets.begin(), targets.end());
  Tensor<float> m({h, w, 3});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const float e = tset.count(label.labels.at(y, x)) ? budget.eps_target : budget.eps_unrelated;
      m.at(y, x, 0) = e;
      m.at(y, x, 1) = e;
      m.at(y, x, 2) = e;
    }
  return m;
}

/// Random-noise baselines. Sample-wise: one pattern per image; class-wise:
/// one pattern per class, indexed by each pixel's own class. Both are scaled
/// by the label-derived epsilon map.
inline NoiseField random_noise(const ProtectionPlan& plan, const LabelMask& label, std::uint64_t image_index) {
  check(plan.method == Method::random_samplewise || plan.method == Method::random_classwise,
        "random_noise: wrong method");
  const std::int64_t h = label.height(), w = label.width();
  const auto targets = plan.resolve_targets(label.num_classes);
  const Tensor<float> eps = label_eps_map(label, targets, plan.budget);
  NoiseField f;
  f.delta = Tensor<float>({h, w, 3});
  if (plan.method == Method::random_samplewise) {
    Tensor<float> pat = uniform_pattern(plan.seed, "samplewise", image_index, h, w);
    for (std::int64_t i = 0; i < f.delta.numel(); ++i) f.delta[i] = pat[i] * eps[i];
  } else {
    std::vector<Tensor<float>> pats;
    for (int c = 0; c < label.num_classes; ++c)
      pats.push_back(uniform_pattern(plan.seed, "classwise", static_cast<std::uint64_t>(c), h, w));
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const auto& pat = pats[label.labels.at(y, x)];
        for (int ch = 0; ch < 3; ++ch) f.delta.at(y, x, ch) = pat.at(y, x, ch) * eps.at(y, x, ch);
      }
  }
  return f;
}

/// SynPer baseline: each pixel takes its own class's tiled pattern, rescaled
/// from eps_target to the pixel's budget.
inline NoiseField synper_noise(const ProtectionPlan& plan, const LabelMask& label) {
  check(plan.method == Method::synper, "synper_noise: wrong method");
  const std::int64_t h = label.height(), w = label.width();
  const auto targets = plan.resolve_targets(label.num_classes);
  const Tensor<float> eps = label_eps_map(label, targets, plan.budget);
  auto pats = synper_patterns(label.num_classes, plan.synper_patch, plan.budget.eps_target, h, w, plan.seed);
  NoiseField f;
  f.delta = Tensor<float>({h, w, 3});
  const float inv_t = 1.0f / plan.budget.eps_target;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const auto& pat = pats[label.labels.at(y, x)];
      for (int ch = 0; ch < 3; ++ch)
        f.delta.at(y, x, ch) = pat.at(y, x, ch) * inv_t * eps.at(y, x, ch);
    }
  return f;
}

// ---------------------------------------------------------------------------
// Dataset protection
// ---------------------------------------------------------------------------

namespace detail {

inline void copy_file_bytes(const fs::path& from, const fs::path& to) {
  fs::create_directories(to.parent_path());
  fs::copy_file(from, to, fs::copy_options::overwrite_existing);
}

/// Per-class fields are summed, then re-projected to the per-pixel budget:
/// a pixel's bound is eps_target when it lies in ANY protected prompt region.
inline NoiseField unseg_noise(model::PromptableSegModel<float>& generator, const Image& img,
                              const LabelMask& label, const std::vector<int>& present_targets,
                              PromptKind kind, const NoiseBudget& budget) {
  const std::int64_t h = img.height(), w = img.width();
  NoiseField sum;
  sum.delta = Tensor<float>({h, w, 3});
  Tensor<std::uint8_t> region_union({h, w});
  for (int c : present_targets) {
    MaskPrompt prompt = data::prompt_from_label(label, c, kind);
    NoiseField f = noise::generate_noise(generator, img, prompt, budget, noise::NoiseMode::infer);
    sum.delta.add_scaled(f.delta, 1.0f);
    Tensor<std::uint8_t> region = noise::eps_region(prompt);
    for (std::int64_t i = 0; i < region.numel(); ++i) region_union[i] |= region[i];
  }
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const float bound = region_union.at(y, x) ? budget.eps_target : budget.eps_unrelated;
      for (int ch = 0; ch < 3; ++ch) {
        float& d = sum.delta.at(y, x, ch);
        d = std::min(bound, std::max(-bound, d));
      }
    }
  return sum;
}

}  // namespace detail

struct ProtectResult {
  DatasetManifest manifest;          // the protected dataset
  fs::path provenance_path;
  fs::path clean_subset_manifest;    // empty when clean_fraction == 0
};

/// Protect the train split of a dataset according to the plan. A seeded
/// shuffle selects the clean fraction; those images are copied byte-for-byte.
inline ProtectResult protect_dataset(const ProtectionPlan& plan, model::PromptableSegModel<float>* generator,
                                     const fs::path& out_dir, int workers = 1) {
  DatasetManifest src = DatasetManifest::load(plan.source_manifest);
  plan.validate(src.num_classes);
  if (plan.method == Method::unseg) {
    check(generator != nullptr, "protect: method=unseg requires a generator checkpoint");
    check(generator->cfg.with_noise_tokens, "protect: generator has no noise tokens");
    check(generator->cfg.image_size == src.size, "protect: generator image size != dataset size");
  }

  DatasetManifest out = src;
  out.root = out_dir;
  fs::create_directories(out_dir);

  // deterministic clean subset
  std::vector<std::size_t> order(src.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  {
    auto rng = substream(plan.seed, "clean-subset");
    std::shuffle(order.begin(), order.end(), rng);
  }
  const auto n_clean = static_cast<std::size_t>(
      std::lround(static_cast<double>(plan.clean_fraction) * static_cast<double>(src.train.size())));
  std::vector<bool> is_clean(src.train.size(), false);
  for (std::size_t i = 0; i < n_clean && i < order.size(); ++i) is_clean[order[i]] = true;

  const auto targets = plan.resolve_targets(src.num_classes);
  std::vector<json> image_provenance(src.train.size());

  parallel_for(static_cast<std::int64_t>(src.train.size()), workers, [&](std::int64_t i) {
    const Record& r = src.train[static_cast<std::size_t>(i)];
    detail::copy_file_bytes(src.root / r.label, out.root / r.label);
    detail::copy_file_bytes(src.root / r.prompt, out.root / r.prompt);

    LabelMask label = src.load_label(r);
    std::vector<int> present;
    for (int c : targets)
      if (data::visible_area(label.labels, static_cast<std::uint8_t>(c)) > 0) present.push_back(c);

    json prov;
    prov["id"] = r.id;
    prov["method"] = to_string(plan.method);
    prov["clean"] = static_cast<bool>(is_clean[static_cast<std::size_t>(i)]);
    prov["protected_classes"] = json::array();

    if (is_clean[static_cast<std::size_t>(i)] || present.empty()) {
      detail::copy_file_bytes(src.root / r.image, out.root / r.image);
      image_provenance[static_cast<std::size_t>(i)] = std::move(prov);
      return;
    }

    Image img = src.load_image(r);
    NoiseField field;
    switch (plan.method) {
      case Method::unseg:
        field = detail::unseg_noise(*generator, img, label, present, plan.prompt_kind, plan.budget);
        break;
      case Method::random_samplewise:
      case Method::random_classwise:
        field = random_noise(plan, label, static_cast<std::uint64_t>(i));
        break;
      case Method::synper:
        field = synper_noise(plan, label);
        break;
    }
    Image protected_img = noise::apply_noise(img, field);
    data::write_image_png(out.root / r.image, protected_img);
    prov["protected_classes"] = present;
    image_provenance[static_cast<std::size_t>(i)] = std::move(prov);
  });

  // validation split: untouched copies (protection targets training data only)
  for (const Record& r : src.val) {
    detail::copy_file_bytes(src.root / r.image, out.root / r.image);
    detail::copy_file_bytes(src.root / r.label, out.root / r.label);
    detail::copy_file_bytes(src.root / r.prompt, out.root / r.prompt);
  }
  out.save();

  ProtectResult result;
  result.manifest = out;

  json prov;
  prov["plan"] = plan.to_json();
  prov["source_manifest"] = plan.source_manifest.string();
  prov["images"] = image_provenance;
  prov["val_clean"] = true;
  const std::string text = prov.dump(2) + "\n";
  result.provenance_path = out_dir / "provenance.json";
  data::atomic_write(result.provenance_path, std::vector<unsigned char>(text.begin(), text.end()));

  if (n_clean > 0) {
    // Companion manifest listing only the clean train images (same files), so
    // mixed-data experiments can compare against the clean subset alone.
    DatasetManifest sub = out;
    sub.train.clear();
    for (std::size_t i = 0; i < src.train.size(); ++i)
      if (is_clean[i]) sub.train.push_back(src.train[i]);
    sub.save("clean_subset.json");
    result.clean_subset_manifest = out_dir / "clean_subset.json";
  }
  return result;
}

}  // namespace unseg::protect
