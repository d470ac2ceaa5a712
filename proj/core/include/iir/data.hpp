#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "iir/grammar.hpp"
#include "iir/image.hpp"
#include "iir/vocab.hpp"

namespace iir {

// Everything needed to rasterise one synthetic example.
struct SceneSpec {
  std::uint64_t seed = 0;
  int size = 64;
  Shape shape = Shape::kCircle;
  int color = 0;  // index into kShapeColors
  Texture texture = Texture::kSolid;
  int texture_color_a = 0;  // indices into kTextureColors
  int texture_color_b = 0;
  int orientation = 0;      // stripes: 0 rows, 1 columns, 2 diagonal, 3 anti-diagonal
  int half_period = 4;
  int phase_x = 0;
  int phase_y = 0;
  double center_x = 0.0;
  double center_y = 0.0;
  double radius = 0.0;
};

SceneSpec scene_from_seed(std::uint64_t seed, int size);
std::string caption_of(const SceneSpec& spec);

struct Scene {
  Image image;
  RoIMask mask;  // exact shape support
};
Scene render_scene(const SceneSpec& spec);
Image render_background(const SceneSpec& spec);

struct DatasetRecord {
  int id = 0;
  std::string image;  // paths relative to the dataset root
  std::string mask;
  std::string caption;
  std::uint64_t seed = 0;
};

struct DatasetManifest {
  static constexpr int kVersion = 1;

  std::filesystem::path root;
  int version = kVersion;
  int image_size = 64;
  std::uint64_t seed = 0;
  std::vector<DatasetRecord> records;
};

struct GenerateOptions {
  int count = 2000;
  int size = 64;
  std::uint64_t seed = 0;
  int workers = 1;
};

// Writes images/NNNNNN.png, masks/NNNNNN.png and manifest.json (last).
DatasetManifest gen_dataset(const std::filesystem::path& out_dir, const GenerateOptions& options);
DatasetManifest load_manifest(const std::filesystem::path& dir);
std::string manifest_json(const DatasetManifest& manifest);

struct Example {
  int id = 0;
  Image image;
  RoIMask mask;
  std::string caption;
  Prompt prompt;
  SceneSpec spec;
};

std::vector<Example> load_examples(const DatasetManifest& manifest);

enum class PromptSlot { kColor, kTexture };

// Substitute one attribute word of a grammar caption.
std::string edit_caption(std::string_view caption, PromptSlot slot, std::string_view value);
Prompt edit_prompt(std::string_view caption, PromptSlot slot, std::string_view value);

}  // namespace iir
