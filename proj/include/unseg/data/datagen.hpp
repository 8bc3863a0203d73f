#pragma once

// Procedural segmentation corpora. Two flavors share the same shape and
// texture machinery:
//   - a binary interactive-segmentation corpus (one prompted object per
//     sample) used to train the noise generator, and
//   - a multi-class corpus where every class is a fixed (shape family,
//     texture family) pair, so small victim models can reach high clean mIoU.
// Color tints are drawn from a shared palette and carry no class information;
// classes are distinguished by luminance pattern and shape.

#include <array>
#include <cmath>
#include <random>
#include <vector>

#include "unseg/core/parallel.hpp"
#include "unseg/core/rng.hpp"
#include "unseg/data/manifest.hpp"

namespace unseg::data {

// ---------------------------------------------------------------------------
// Shapes
// ---------------------------------------------------------------------------

enum class ShapeFamily { ellipse, rectangle, triangle, ring, plus, diamond, pentagon, star, polygon };

struct ShapeSpec {
  ShapeFamily family = ShapeFamily::ellipse;
  double cx = 0, cy = 0;     // center, pixels
  double r1 = 8, r2 = 8;     // radii / half-extents
  double angle = 0;          // rotation, radians
  double inner = 0.5;        // ring hole / star inner radius, fraction of r1
  std::vector<std::array<double, 2>> verts;  // for ShapeFamily::polygon
};

namespace detail {

inline bool point_in_polygon(const std::vector<std::array<double, 2>>& poly, double x, double y) {
  bool in = false;
  const std::size_t n = poly.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const double xi = poly[i][0], yi = poly[i][1];
    const double xj = poly[j][0], yj = poly[j][1];
    if ((yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi) in = !in;
  }
  return in;
}

inline std::vector<std::array<double, 2>> regular_verts(double cx, double cy, double r, int n, double angle,
                                                        double inner = -1.0) {
  std::vector<std::array<double, 2>> vs;
  const int total = inner > 0 ? 2 * n : n;
  for (int i = 0; i < total; ++i) {
    const double rr = (inner > 0 && (i % 2 == 1)) ? r * inner : r;
    const double a = angle + 2.0 * M_PI * i / total - M_PI / 2.0;
    vs.push_back({cx + rr * std::cos(a), cy + rr * std::sin(a)});
  }
  return vs;
}

}  // namespace detail

inline bool shape_contains(const ShapeSpec& s, double px, double py) {
  const double dx0 = px - s.cx, dy0 = py - s.cy;
  const double ca = std::cos(-s.angle), sa = std::sin(-s.angle);
  const double dx = dx0 * ca - dy0 * sa;
  const double dy = dx0 * sa + dy0 * ca;
  switch (s.family) {
    case ShapeFamily::ellipse: {
      const double q = dx * dx / (s.r1 * s.r1) + dy * dy / (s.r2 * s.r2);
      return q <= 1.0;
    }
    case ShapeFamily::rectangle:
      return std::abs(dx) <= s.r1 && std::abs(dy) <= s.r2;
    case ShapeFamily::ring: {
      const double q = dx * dx / (s.r1 * s.r1) + dy * dy / (s.r2 * s.r2);
      const double in = s.inner * s.inner;
      return q <= 1.0 && q >= in;
    }
    case ShapeFamily::plus:
      return (std::abs(dx) <= s.r1 && std::abs(dy) <= s.r2 * 0.4) ||
             (std::abs(dy) <= s.r2 && std::abs(dx) <= s.r1 * 0.4);
    case ShapeFamily::diamond:
      return std::abs(dx) / s.r1 + std::abs(dy) / s.r2 <= 1.0;
    case ShapeFamily::triangle: {
      auto vs = detail::regular_verts(0, 0, s.r1, 3, 0.0);
      return detail::point_in_polygon(vs, dx, dy);
    }
    case ShapeFamily::pentagon: {
      auto vs = detail::regular_verts(0, 0, s.r1, 5, 0.0);
      return detail::point_in_polygon(vs, dx, dy);
    }
    case ShapeFamily::star: {
      auto vs = detail::regular_verts(0, 0, s.r1, 5, 0.0, std::max(0.35, s.inner));
      return detail::point_in_polygon(vs, dx, dy);
    }
    case ShapeFamily::polygon:
      return detail::point_in_polygon(s.verts, dx, dy);
  }
  return false;
}

// ---------------------------------------------------------------------------
// Textures
// ---------------------------------------------------------------------------

// Luminance pattern families. 0 is the smooth background family.
enum class TextureFamily : int {
  smooth = 0,
  grating_h = 1,
  grating_v = 2,
  checker = 3,
  grating_diag = 4,
  dots = 5,
  rings = 6,
  stripes = 7,
  speckle = 8,
};
constexpr int kNumObjectTextures = 8;  // families 1..8

struct TextureParams {
  TextureFamily family = TextureFamily::smooth;
  double freq = 0.18;        // cycles per pixel for gratings
  double phase = 0;
  double cell = 5;           // checker cell / dot spacing / stripe period
  double cx = 0, cy = 0;     // centers for ring textures
  double lo = 0.25, hi = 0.85;
  std::array<float, 3> tint{1.f, 1.f, 1.f};
  // value-noise grid for smooth/speckle modulation
  std::array<double, 36> grid{};
  std::uint32_t speckle_salt = 0;
};

namespace detail {

inline double value_noise(const std::array<double, 36>& grid, double u, double v) {
  // 6x6 grid bilinear interpolation over [0,1)^2
  const double gu = u * 5.0, gv = v * 5.0;
  const int iu = std::min(4, static_cast<int>(gu)), iv = std::min(4, static_cast<int>(gv));
  const double fu = gu - iu, fv = gv - iv;
  const double a = grid[static_cast<std::size_t>(iv * 6 + iu)];
  const double b = grid[static_cast<std::size_t>(iv * 6 + iu + 1)];
  const double c = grid[static_cast<std::size_t>((iv + 1) * 6 + iu)];
  const double d = grid[static_cast<std::size_t>((iv + 1) * 6 + iu + 1)];
  return (a * (1 - fu) + b * fu) * (1 - fv) + (c * (1 - fu) + d * fu) * fv;
}

inline std::uint32_t hash2d(std::uint32_t salt, int x, int y) {
  std::uint32_t h = salt;
  h ^= 0x9e3779b9u + static_cast<std::uint32_t>(x) * 0x85ebca6bu;
  h ^= (h >> 13);
  h ^= 0xc2b2ae35u + static_cast<std::uint32_t>(y) * 0x27d4eb2fu;
  h *= 0x165667b1u;
  h ^= (h >> 16);
  return h;
}

}  // namespace detail

inline double texture_luma(const TextureParams& t, double x, double y, double inv_size) {
  const double two_pi = 2.0 * M_PI;
  auto wave = [&](double coord) { return 0.5 + 0.5 * std::sin(two_pi * t.freq * coord + t.phase); };
  double p = 0.5;
  switch (t.family) {
    case TextureFamily::smooth:
      p = detail::value_noise(t.grid, x * inv_size, y * inv_size);
      break;
    case TextureFamily::grating_h: p = wave(y); break;
    case TextureFamily::grating_v: p = wave(x); break;
    case TextureFamily::grating_diag: p = wave((x + y) * 0.7071067811865476); break;
    case TextureFamily::checker: {
      const int cx = static_cast<int>(std::floor((x + t.phase) / t.cell));
      const int cy = static_cast<int>(std::floor((y + t.phase) / t.cell));
      p = ((cx + cy) & 1) ? 1.0 : 0.0;
      break;
    }
    case TextureFamily::dots: {
      const double mx = std::fmod(std::fmod(x + t.phase, t.cell) + t.cell, t.cell) - t.cell / 2;
      const double my = std::fmod(std::fmod(y + t.phase, t.cell) + t.cell, t.cell) - t.cell / 2;
      p = (mx * mx + my * my <= t.cell * t.cell * 0.09) ? 1.0 : 0.0;
      break;
    }
    case TextureFamily::rings: {
      const double r = std::hypot(x - t.cx, y - t.cy);
      p = wave(r);
      break;
    }
    case TextureFamily::stripes: {
      const double m = std::fmod(std::fmod(x - y + t.phase, t.cell) + t.cell, t.cell);
      p = m < t.cell / 2 ? 1.0 : 0.0;
      break;
    }
    case TextureFamily::speckle: {
      const int ix = static_cast<int>(std::floor(x)), iy = static_cast<int>(std::floor(y));
      p = (detail::hash2d(t.speckle_salt, ix, iy) & 0xffffu) / 65535.0;
      break;
    }
  }
  return t.lo + (t.hi - t.lo) * p;
}

inline std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h, 1.0) * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

inline TextureParams random_texture(TextureFamily family, std::mt19937_64& rng, int size) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  TextureParams t;
  t.family = family;
  t.freq = 0.14 + 0.10 * uni(rng);
  t.phase = uni(rng) * 2.0 * M_PI;
  t.cell = 4.0 + 4.0 * uni(rng);
  t.cx = uni(rng) * size;
  t.cy = uni(rng) * size;
  t.lo = 0.15 + 0.15 * uni(rng);
  t.hi = 0.75 + 0.2 * uni(rng);
  t.tint = hsv_to_rgb(uni(rng), 0.25 + 0.45 * uni(rng), 0.85 + 0.15 * uni(rng));
  for (auto& g : t.grid) g = uni(rng);
  t.speckle_salt = static_cast<std::uint32_t>(rng());
  return t;
}

// ---------------------------------------------------------------------------
// Sample composition
// ---------------------------------------------------------------------------

struct GenOptions {
  int size = 64;
  float jitter = 0.012f;     // per-pixel uniform intensity noise, in [0,1] units
  int min_visible_area = 24; // pixels
};

struct PaintedObject {
  ShapeSpec shape;
  TextureParams texture;
  std::uint8_t class_id = 1;
};

/// Paint background + objects (later objects occlude earlier ones), then add
/// per-pixel jitter. Returns the image and per-pixel class ids.
inline void compose_scene(const TextureParams& bg, const std::vector<PaintedObject>& objs, const GenOptions& opt,
                          std::mt19937_64& rng, Image& out_img, Tensor<std::uint8_t>& out_label) {
  const int n = opt.size;
  const double inv_size = 1.0 / n;
  out_img.pixels = Tensor<float>({n, n, 3});
  out_label = Tensor<std::uint8_t>({n, n});
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const TextureParams* tex = &bg;
      std::uint8_t cls = 0;
      for (const auto& o : objs)
        if (shape_contains(o.shape, x + 0.5, y + 0.5)) {
          tex = &o.texture;
          cls = o.class_id;
        }
      const double luma = texture_luma(*tex, x + 0.5, y + 0.5, inv_size);
      for (int c = 0; c < 3; ++c)
        out_img.pixels.at(y, x, c) = std::min(1.0f, std::max(0.0f, static_cast<float>(luma) * tex->tint[static_cast<std::size_t>(c)]));
      out_label.at(y, x) = cls;
    }
  if (opt.jitter > 0) {
    std::uniform_real_distribution<float> jt(-opt.jitter, opt.jitter);
    for (auto& v : out_img.pixels.v) v = std::min(1.0f, std::max(0.0f, v + jt(rng)));
  }
}

inline std::int64_t visible_area(const Tensor<std::uint8_t>& label, std::uint8_t cls) {
  std::int64_t a = 0;
  for (auto v : label.v) a += (v == cls) ? 1 : 0;
  return a;
}

inline ShapeSpec random_shape(ShapeFamily family, std::mt19937_64& rng, int size) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  ShapeSpec s;
  s.family = family;
  const double margin = size * 0.16;
  s.cx = margin + uni(rng) * (size - 2 * margin);
  s.cy = margin + uni(rng) * (size - 2 * margin);
  const double base = size * (0.11 + 0.10 * uni(rng));
  s.r1 = base;
  s.r2 = base * (0.6 + 0.8 * uni(rng));
  s.angle = uni(rng) * 2.0 * M_PI;
  s.inner = 0.45 + 0.2 * uni(rng);
  if (family == ShapeFamily::polygon) {
    const int nv = 3 + static_cast<int>(uni(rng) * 5);
    s.verts.clear();
    for (int i = 0; i < nv; ++i) {
      const double a = 2.0 * M_PI * i / nv + uni(rng) * 0.8 / nv;
      const double r = s.r1 * (0.55 + 0.45 * uni(rng));
      s.verts.push_back({r * std::cos(a), r * std::sin(a)});
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// prompt_from_label
// ---------------------------------------------------------------------------

/// Build a prompt for one class region of a label map.
///   mask  -> the exact class region
///   box   -> tight bounding box of the region, filled
///   point -> one pixel: region centroid snapped to the nearest in-region pixel
inline MaskPrompt prompt_from_label(const LabelMask& label, int class_id, PromptKind kind) {
  const std::int64_t h = label.height(), w = label.width();
  MaskPrompt p;
  p.kind = kind;
  p.mask = Tensor<std::uint8_t>({h, w});
  std::int64_t count = 0, min_x = w, max_x = -1, min_y = h, max_y = -1;
  double sum_x = 0, sum_y = 0;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      if (label.labels.at(y, x) == class_id) {
        ++count;
        sum_x += static_cast<double>(x);
        sum_y += static_cast<double>(y);
        min_x = std::min(min_x, x);
        max_x = std::max(max_x, x);
        min_y = std::min(min_y, y);
        max_y = std::max(max_y, y);
        if (kind == PromptKind::mask) p.mask.at(y, x) = 1;
      }
  check(count > 0, "prompt_from_label: class " + std::to_string(class_id) + " absent from label");
  if (kind == PromptKind::box) {
    for (std::int64_t y = min_y; y <= max_y; ++y)
      for (std::int64_t x = min_x; x <= max_x; ++x) p.mask.at(y, x) = 1;
  } else if (kind == PromptKind::point) {
    const double cx = sum_x / count, cy = sum_y / count;
    std::int64_t best_x = -1, best_y = -1;
    double best_d = 1e30;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        if (label.labels.at(y, x) == class_id) {
          const double d = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          if (d < best_d) {
            best_d = d;
            best_x = x;
            best_y = y;
          }
        }
    p.mask.at(best_y, best_x) = 1;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Corpus generators
// ---------------------------------------------------------------------------

namespace detail {

inline void write_sample(const DatasetManifest& m, const Record& r, const Image& img, const LabelMask& label,
                         const MaskPrompt& prompt) {
  write_image_png(m.root / r.image, img);
  write_label_png(m.root / r.label, label);
  write_mask_png(m.root / r.prompt, prompt.mask);
}

inline Record make_record(const std::string& id, PromptKind kind) {
  Record r;
  r.id = id;
  r.image = "images/" + id + ".png";
  r.label = "labels/" + id + ".png";
  r.prompt = "prompts/" + id + ".png";
  r.prompt_kind = kind;
  return r;
}

}  // namespace detail

/// Binary interactive-segmentation corpus: 1-4 textured shapes over a
/// textured background; the label is the visible mask of one selected shape
/// and the prompt is derived from it.
inline DatasetManifest gen_iis_dataset(std::uint64_t seed, int n_train, int n_val, int size, const fs::path& root,
                                       const GenOptions& base_opt = {}, int workers = 1) {
  check(n_train > 0 && n_val > 0, "gen_iis_dataset: split sizes must be positive");
  check(size >= 32, "gen_iis_dataset: size must be >= 32");
  GenOptions opt = base_opt;
  opt.size = size;

  DatasetManifest m;
  m.root = root;
  m.kind = "iis";
  m.num_classes = 2;
  m.size = size;
  m.class_names = {"background", "object"};
  const int total = n_train + n_val;
  for (int i = 0; i < total; ++i) {
    const bool is_val = i >= n_train;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "iis-%s-%05d", is_val ? "val" : "train", is_val ? i - n_train : i);
    auto r = detail::make_record(buf, PromptKind::mask);
    (is_val ? m.val : m.train).push_back(r);
  }

  const std::array<ShapeFamily, 3> families{ShapeFamily::ellipse, ShapeFamily::polygon, ShapeFamily::ring};
  parallel_for(total, workers, [&](std::int64_t i) {
    auto rng = substream(seed, "iis-sample", static_cast<std::uint64_t>(i));
    std::uniform_int_distribution<int> n_obj_dist(1, 4);
    std::uniform_int_distribution<int> fam_dist(0, 2);
    std::uniform_int_distribution<int> tex_dist(1, kNumObjectTextures);
    std::uniform_int_distribution<int> bg_tex_dist(0, kNumObjectTextures);

    Image img;
    Tensor<std::uint8_t> raw_label;
    int target = -1;
    for (int attempt = 0; attempt < 16 && target < 0; ++attempt) {
      const int k = n_obj_dist(rng);
      // Backgrounds are mostly smooth but sometimes textured, so the prompt
      // stays informative rather than "the textured region".
      const int bg_family = bg_tex_dist(rng) <= 4 ? 0 : bg_tex_dist(rng);
      TextureParams bg = random_texture(static_cast<TextureFamily>(bg_family), rng, size);
      std::vector<PaintedObject> objs;
      for (int j = 0; j < k; ++j) {
        PaintedObject o;
        o.shape = random_shape(families[static_cast<std::size_t>(fam_dist(rng))], rng, size);
        o.texture = random_texture(static_cast<TextureFamily>(tex_dist(rng)), rng, size);
        o.class_id = static_cast<std::uint8_t>(j + 1);
        objs.push_back(std::move(o));
      }
      compose_scene(bg, objs, opt, rng, img, raw_label);
      // pick the first sufficiently visible object, preferring a random start
      std::uniform_int_distribution<int> start_dist(0, k - 1);
      const int start = start_dist(rng);
      for (int j = 0; j < k; ++j) {
        const int cand = 1 + (start + j) % k;
        if (visible_area(raw_label, static_cast<std::uint8_t>(cand)) >= opt.min_visible_area) {
          target = cand;
          break;
        }
      }
    }
    check(target >= 1, "gen_iis_dataset: could not place a visible shape (size too small?)");

    LabelMask label;
    label.num_classes = 2;
    label.labels = Tensor<std::uint8_t>({size, size});
    for (std::int64_t px = 0; px < label.labels.numel(); ++px)
      label.labels[px] = raw_label[px] == target ? 1 : 0;
    MaskPrompt prompt = prompt_from_label(label, 1, PromptKind::mask);
    const Record& r = i < n_train ? m.train[static_cast<std::size_t>(i)]
                                  : m.val[static_cast<std::size_t>(i - n_train)];
    detail::write_sample(m, r, img, label, prompt);
  });

  m.save();
  return m;
}

/// Multi-class corpus: class c is a fixed (shape family, texture family)
/// pair. The first object's class cycles deterministically with the sample
/// index so every class appears in a known fraction of images.
inline DatasetManifest gen_downstream_dataset(std::uint64_t seed, int n_train, int n_val, int size, int num_classes,
                                              const fs::path& root, const GenOptions& base_opt = {},
                                              int workers = 1) {
  check(n_train > 0 && n_val > 0, "gen_downstream_dataset: split sizes must be positive");
  check(size >= 32, "gen_downstream_dataset: size must be >= 32");
  check(num_classes >= 3 && num_classes <= 16, "gen_downstream_dataset: num_classes must be in [3, 16]");
  GenOptions opt = base_opt;
  opt.size = size;

  static const std::array<ShapeFamily, 8> kShapeByClass{
      ShapeFamily::ellipse, ShapeFamily::rectangle, ShapeFamily::triangle, ShapeFamily::ring,
      ShapeFamily::plus,    ShapeFamily::diamond,   ShapeFamily::pentagon, ShapeFamily::star};
  static const std::array<TextureFamily, 8> kTextureByClass{
      TextureFamily::grating_h, TextureFamily::grating_v, TextureFamily::checker, TextureFamily::grating_diag,
      TextureFamily::dots,      TextureFamily::rings,     TextureFamily::stripes, TextureFamily::speckle};

  DatasetManifest m;
  m.root = root;
  m.kind = "downstream";
  m.num_classes = num_classes;
  m.size = size;
  m.class_names = {"background"};
  for (int c = 1; c < num_classes; ++c) m.class_names.push_back("class" + std::to_string(c));

  const int total = n_train + n_val;
  for (int i = 0; i < total; ++i) {
    const bool is_val = i >= n_train;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ds-%s-%05d", is_val ? "val" : "train", is_val ? i - n_train : i);
    auto r = detail::make_record(buf, PromptKind::mask);
    (is_val ? m.val : m.train).push_back(r);
  }

  const int n_obj_classes = num_classes - 1;
  parallel_for(total, workers, [&](std::int64_t i) {
    auto rng = substream(seed, "ds-sample", static_cast<std::uint64_t>(i));
    std::uniform_int_distribution<int> n_obj_dist(2, 4);
    std::uniform_real_distribution<double> uni(0.0, 1.0);

    Image img;
    Tensor<std::uint8_t> raw_label;
    bool ok = false;
    std::vector<std::uint8_t> classes;
    for (int attempt = 0; attempt < 16 && !ok; ++attempt) {
      const int k = n_obj_dist(rng);
      classes.clear();
      classes.push_back(static_cast<std::uint8_t>(1 + (i % n_obj_classes)));  // guaranteed coverage
      std::vector<int> others;
      for (int c = 1; c <= n_obj_classes; ++c)
        if (c != classes[0]) others.push_back(c);
      std::shuffle(others.begin(), others.end(), rng);
      for (int j = 1; j < k && j - 1 < static_cast<int>(others.size()); ++j)
        classes.push_back(static_cast<std::uint8_t>(others[static_cast<std::size_t>(j - 1)]));

      TextureParams bg = random_texture(TextureFamily::smooth, rng, size);
      std::vector<PaintedObject> objs;
      for (std::uint8_t c : classes) {
        PaintedObject o;
        o.shape = random_shape(kShapeByClass[static_cast<std::size_t>((c - 1) % 8)], rng, size);
        o.texture = random_texture(kTextureByClass[static_cast<std::size_t>((c - 1) % 8)], rng, size);
        o.texture.cx = o.shape.cx;  // ring textures centered on their shape
        o.texture.cy = o.shape.cy;
        o.class_id = c;
        objs.push_back(std::move(o));
      }
      compose_scene(bg, objs, opt, rng, img, raw_label);
      ok = true;
      for (std::uint8_t c : classes)
        if (visible_area(raw_label, c) < opt.min_visible_area) ok = false;
      if (visible_area(raw_label, 0) < static_cast<std::int64_t>(size) * size / 4) ok = false;
    }
    check(ok, "gen_downstream_dataset: could not compose a balanced scene");

    LabelMask label;
    label.num_classes = num_classes;
    label.labels = raw_label;
    MaskPrompt prompt = prompt_from_label(label, classes[0], PromptKind::mask);
    const Record& r = i < n_train ? m.train[static_cast<std::size_t>(i)]
                                  : m.val[static_cast<std::size_t>(i - n_train)];
    detail::write_sample(m, r, img, label, prompt);
  });

  m.save();
  return m;
}

}  // namespace unseg::data
