#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "iir/data.hpp"
#include "iir/grammar.hpp"
#include "iir/image.hpp"
#include "iir/model.hpp"

namespace iir {

struct EditScore {
  bool success = false;
  double score = 0.0;
};

// score = |mean RoI color - target|; success iff target is the nearest of the
// dataset colors and score < tol.
EditScore edit_success_color(const Image& img, const RoIMask& roi, const std::array<float, 3>& target,
                             double tol = 0.25);

struct TextureFeatures {
  double band_energy = 0.0;     // non-DC spectral power per region pixel, summed over channels
  double dominance = 0.0;       // gradient-orientation mass in the strongest 3 of 8 bins
  std::array<double, 3> class_scores{};  // solid, stripes, checker; sums to 1
};

// Texture class of the pixels where region == 1.
Texture classify_texture(const Image& img, const RoIMask& region, TextureFeatures* features = nullptr);

// score = class score of the target; success iff target is the argmax.
EditScore edit_success_texture(const Image& img, const RoIMask& region, Texture target);

// RMSE over the pixels (all channels) where roi == 0.
double fidelity_outside_roi(const Image& orig, const Image& edited, const RoIMask& roi);
double rmse(const Image& a, const Image& b);
// Peak 1.0; identical images report kPsnrCap.
inline constexpr double kPsnrCap = 100.0;
double psnr(const Image& a, const Image& b);

enum class EvalMode { kColor, kTexture, kReconstruct };
const char* eval_mode_name(EvalMode mode);
EvalMode eval_mode_from_name(const std::string& name);

struct EvalProtocol {
  EvalMode mode = EvalMode::kColor;
  int k = 0;
  int count = 150;
  double cfg_scale = 9.0;
  int ddim_steps = 20;
  std::uint64_t seed = 0;
  int workers = 1;
};

std::string to_json_string(const EvalProtocol& protocol);

struct EvalRecord {
  int example_id = 0;
  std::string prompt;
  int k = 0;
  bool success = false;
  double score = 0.0;
  double rmse_outside = 0.0;
  double rmse_full = 0.0;
  double psnr = 0.0;
  std::uint64_t seed = 0;
};

struct EvalReport {
  std::vector<EvalRecord> records;
  double success_rate = 0.0;
  double mean_rmse = 0.0;       // mean rmse_outside
  double mean_rmse_full = 0.0;
  double mean_psnr = 0.0;
  std::string config_json = "{}";
  bool complete = true;

  void recompute();
};

// The edit issued for test example `index`: one attribute slot substituted,
// round-robin over the values that differ from the original.
struct ProtocolEdit {
  Prompt prompt;
  RoIMask roi;  // region handed to the editor
  int target_color = 0;  // scored in color and reconstruct modes
  Texture target_texture = Texture::kSolid;
};
ProtocolEdit protocol_edit(const Example& ex, int index, EvalMode mode);

// Runs the protocol over the first `count` test examples. When out_dir is
// given, report.json and report.csv are written there, including partial
// results if an edit throws (the error is rethrown).
EvalReport evaluate(const ModelState& state, const std::vector<Example>& testset, const EvalProtocol& protocol,
                    const std::filesystem::path* out_dir = nullptr);

std::string report_json(const EvalReport& report);
std::string report_csv(const EvalReport& report);
void write_report(const EvalReport& report, const std::filesystem::path& dir);

}  // namespace iir
