#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "unseg/data/datagen.hpp"

using namespace unseg;
using namespace unseg::data;
namespace fs = std::filesystem;

namespace {

std::vector<unsigned char> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("gen_iis_dataset: record count, binary labels, prompt overlap") {
  TempDir dir("unseg_iis_small");
  auto m = gen_iis_dataset(0, 4, 2, 64, dir.path);
  REQUIRE(m.train.size() == 4);
  REQUIRE(m.val.size() == 2);
  REQUIRE(m.num_classes == 2);
  m.validate();

  for (const auto* split : {&m.train, &m.val})
    for (const auto& r : *split) {
      auto s = m.load_sample(r);
      REQUIRE(s.label.is_binary());
      REQUIRE(s.image.valid_range());
      // prompt mask intersects the label foreground
      std::int64_t overlap = 0, fg = 0, prompt_outside = 0;
      for (std::int64_t i = 0; i < s.label.labels.numel(); ++i) {
        fg += s.label.labels[i];
        overlap += (s.label.labels[i] && s.prompt.mask[i]) ? 1 : 0;
        prompt_outside += (!s.label.labels[i] && s.prompt.mask[i]) ? 1 : 0;
      }
      REQUIRE(fg > 0);
      REQUIRE(overlap > 0);
      // for generated IIS data the prompt is a subset of the foreground
      REQUIRE(prompt_outside == 0);
    }
}

TEST_CASE("gen_iis_dataset: same seed twice gives byte-identical files") {
  TempDir d1("unseg_iis_det1"), d2("unseg_iis_det2");
  auto m1 = gen_iis_dataset(42, 3, 1, 64, d1.path, {}, 2);
  auto m2 = gen_iis_dataset(42, 3, 1, 64, d2.path, {}, 1);  // worker count must not matter
  for (std::size_t i = 0; i < m1.train.size(); ++i) {
    REQUIRE(file_bytes(d1.path / m1.train[i].image) == file_bytes(d2.path / m2.train[i].image));
    REQUIRE(file_bytes(d1.path / m1.train[i].label) == file_bytes(d2.path / m2.train[i].label));
    REQUIRE(file_bytes(d1.path / m1.train[i].prompt) == file_bytes(d2.path / m2.train[i].prompt));
  }
}

TEST_CASE("gen_iis_dataset rejects bad sizes") {
  TempDir dir("unseg_iis_bad");
  REQUIRE_THROWS_AS(gen_iis_dataset(0, 0, 2, 64, dir.path), Error);
  REQUIRE_THROWS_AS(gen_iis_dataset(0, 2, 2, 16, dir.path), Error);
}

TEST_CASE("gen_downstream_dataset: label range, determinism, class balance") {
  TempDir dir("unseg_ds_small");
  const int n_train = 64, k = 9;
  auto m = gen_downstream_dataset(7, n_train, 8, 64, k, dir.path, {}, 2);
  REQUIRE(m.num_classes == k);

  std::vector<int> appears(static_cast<std::size_t>(k), 0);
  for (const auto& r : m.train) {
    auto lab = m.load_label(r);
    REQUIRE(lab.in_range());
    std::vector<bool> present(static_cast<std::size_t>(k), false);
    std::int64_t bg = 0;
    for (std::int64_t i = 0; i < lab.labels.numel(); ++i) {
      present[lab.labels[i]] = true;
      bg += lab.labels[i] == 0 ? 1 : 0;
    }
    REQUIRE(bg > 0);  // background pixels exist in every image
    for (int c = 0; c < k; ++c) appears[static_cast<std::size_t>(c)] += present[static_cast<std::size_t>(c)] ? 1 : 0;
  }
  // every class appears in at least 5% of train images
  for (int c = 1; c < k; ++c)
    REQUIRE(appears[static_cast<std::size_t>(c)] >= static_cast<int>(0.05 * n_train));

  TempDir dir2("unseg_ds_small2");
  auto m2 = gen_downstream_dataset(7, n_train, 8, 64, k, dir2.path, {}, 1);
  REQUIRE(file_bytes(dir.path / m.train[5].image) == file_bytes(dir2.path / m2.train[5].image));
}

TEST_CASE("gen_downstream_dataset validates num_classes") {
  TempDir dir("unseg_ds_bad");
  REQUIRE_THROWS_AS(gen_downstream_dataset(0, 4, 2, 64, 2, dir.path), Error);
  REQUIRE_THROWS_AS(gen_downstream_dataset(0, 4, 2, 64, 17, dir.path), Error);
}

TEST_CASE("prompt_from_label: box, mask, point geometry") {
  LabelMask label;
  label.num_classes = 5;
  label.labels = Tensor<std::uint8_t>({32, 32});
  for (int y = 10; y < 20; ++y)
    for (int x = 6; x < 16; ++x) label.labels.at(y, x) = 3;

  auto box = prompt_from_label(label, 3, PromptKind::box);
  REQUIRE(box.set_count() == 100);
  for (int y = 10; y < 20; ++y)
    for (int x = 6; x < 16; ++x) REQUIRE(box.mask.at(y, x) == 1);

  auto mask = prompt_from_label(label, 3, PromptKind::mask);
  for (std::int64_t i = 0; i < mask.mask.numel(); ++i)
    REQUIRE(mask.mask[i] == (label.labels[i] == 3 ? 1 : 0));

  auto point = prompt_from_label(label, 3, PromptKind::point);
  REQUIRE(point.set_count() == 1);
  for (std::int64_t y = 0; y < 32; ++y)
    for (std::int64_t x = 0; x < 32; ++x)
      if (point.mask.at(y, x)) REQUIRE(label.labels.at(y, x) == 3);  // the pixel has the class label

  REQUIRE_THROWS_AS(prompt_from_label(label, 4, PromptKind::mask), Error);
}

TEST_CASE("point prompt snaps the centroid into the region") {
  // C-shaped region whose centroid falls outside the set
  LabelMask label;
  label.num_classes = 2;
  label.labels = Tensor<std::uint8_t>({16, 16});
  for (int y = 2; y < 14; ++y)
    for (int x = 2; x < 14; ++x)
      if (!(y > 4 && y < 12 && x > 4)) label.labels.at(y, x) = 1;
  auto p = prompt_from_label(label, 1, PromptKind::point);
  REQUIRE(p.set_count() == 1);
  for (std::int64_t y = 0; y < 16; ++y)
    for (std::int64_t x = 0; x < 16; ++x)
      if (p.mask.at(y, x)) REQUIRE(label.labels.at(y, x) == 1);
}

TEST_CASE("PNG round trip is lossless for 8-bit data") {
  TempDir dir("unseg_pngrt");
  auto rng = substream(3, "png");
  Image img;
  img.pixels = Tensor<float>::rand_uniform({32, 32, 3}, 0.0f, 1.0f, rng);
  write_image_png(dir.path / "a.png", img);
  Image back = read_image_png(dir.path / "a.png");
  float max_diff = 0;
  for (std::int64_t i = 0; i < img.pixels.numel(); ++i)
    max_diff = std::max(max_diff, std::abs(img.pixels[i] - back.pixels[i]));
  REQUIRE(max_diff <= 0.5f / 255.0f + 1e-6f);  // quantization only

  // second round trip is exact
  write_image_png(dir.path / "b.png", back);
  Image back2 = read_image_png(dir.path / "b.png");
  for (std::int64_t i = 0; i < back.pixels.numel(); ++i) REQUIRE(back.pixels[i] == back2.pixels[i]);
}

TEST_CASE("manifest save/load round trip") {
  TempDir dir("unseg_manifest");
  auto m = gen_iis_dataset(5, 2, 1, 64, dir.path);
  auto loaded = DatasetManifest::load(dir.path / DatasetManifest::kFileName);
  REQUIRE(loaded.kind == "iis");
  REQUIRE(loaded.train.size() == 2);
  REQUIRE(loaded.val.size() == 1);
  REQUIRE(loaded.num_classes == 2);
  REQUIRE(dataset_digest(loaded) == dataset_digest(m));
}
