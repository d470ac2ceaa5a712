#include "iir/eval.hpp"

#include <json.hpp>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <thread>

#include "iir/error.hpp"
#include "iir/rng.hpp"
#include "iir/sample.hpp"

namespace iir {

namespace fs = std::filesystem;
using nlohmann::json;

EditScore edit_success_color(const Image& img, const RoIMask& roi, const std::array<float, 3>& target, double tol) {
  require(roi.matches(img), "RoI does not match the image size");
  require(img.channels() == 3, "color scoring needs an RGB image");
  const std::size_t n = roi.count();
  require(n > 0, "edit_success_color: empty RoI");
  std::array<double, 3> mean{};
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      if (!roi.at(y, x)) continue;
      for (int c = 0; c < 3; ++c) mean[c] += img.at(y, x, c);
    }
  }
  for (double& m : mean) m /= static_cast<double>(n);
  auto dist = [&](const std::array<float, 3>& rgb) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) s += (mean[c] - rgb[c]) * (mean[c] - rgb[c]);
    return std::sqrt(s);
  };
  std::size_t nearest = 0;
  for (std::size_t i = 1; i < kShapeColors.size(); ++i) {
    if (dist(kShapeColors[i].rgb) < dist(kShapeColors[nearest].rgb)) nearest = i;
  }
  const double score = dist(target);
  return {kShapeColors[nearest].rgb == target && score < tol, score};
}

double fidelity_outside_roi(const Image& orig, const Image& edited, const RoIMask& roi) {
  require(orig.same_shape(edited), "fidelity_outside_roi: image shapes differ");
  require(roi.matches(orig), "fidelity_outside_roi: mask size differs");
  const std::size_t outside = static_cast<std::size_t>(roi.height()) * roi.width() - roi.count();
  require(outside > 0, "fidelity_outside_roi: mask covers the whole image");
  double acc = 0.0;
  for (int y = 0; y < orig.height(); ++y) {
    for (int x = 0; x < orig.width(); ++x) {
      if (roi.at(y, x)) continue;
      for (int c = 0; c < orig.channels(); ++c) {
        const double d = static_cast<double>(orig.at(y, x, c)) - edited.at(y, x, c);
        acc += d * d;
      }
    }
  }
  return std::sqrt(acc / static_cast<double>(outside * orig.channels()));
}

double rmse(const Image& a, const Image& b) {
  require(a.same_shape(b), "rmse: image shapes differ");
  auto sa = a.span(), sb = b.span();
  require(!sa.empty(), "rmse: empty images");
  double acc = 0.0;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    const double d = static_cast<double>(sa[i]) - sb[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(sa.size()));
}

double psnr(const Image& a, const Image& b) {
  const double e = rmse(a, b);
  if (e == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -20.0 * std::log10(e));
}

const char* eval_mode_name(EvalMode mode) {
  switch (mode) {
    case EvalMode::kColor: return "color";
    case EvalMode::kTexture: return "texture";
    case EvalMode::kReconstruct: return "reconstruct";
  }
  return "?";
}

EvalMode eval_mode_from_name(const std::string& name) {
  for (EvalMode m : {EvalMode::kColor, EvalMode::kTexture, EvalMode::kReconstruct}) {
    if (name == eval_mode_name(m)) return m;
  }
  throw ValidationError("unknown eval mode '" + name + "' (expected color, texture or reconstruct)");
}

std::string to_json_string(const EvalProtocol& p) {
  json j;
  j["mode"] = eval_mode_name(p.mode);
  j["k"] = p.k;
  j["count"] = p.count;
  j["cfg_scale"] = p.cfg_scale;
  j["ddim_steps"] = p.ddim_steps;
  j["seed"] = p.seed;
  j["workers"] = p.workers;
  return j.dump(2);
}

void EvalReport::recompute() {
  success_rate = mean_rmse = mean_rmse_full = mean_psnr = 0.0;
  if (records.empty()) return;
  for (const auto& r : records) {
    success_rate += r.success ? 1.0 : 0.0;
    mean_rmse += r.rmse_outside;
    mean_rmse_full += r.rmse_full;
    mean_psnr += r.psnr;
  }
  const double n = static_cast<double>(records.size());
  success_rate /= n;
  mean_rmse /= n;
  mean_rmse_full /= n;
  mean_psnr /= n;
}

ProtocolEdit protocol_edit(const Example& ex, int index, EvalMode mode) {
  const int ncol = static_cast<int>(kShapeColors.size());
  ProtocolEdit pe{ex.prompt, ex.mask, ex.spec.color, ex.spec.texture};
  if (mode == EvalMode::kColor) {
    pe.target_color = (ex.spec.color + 1 + index % (ncol - 1)) % ncol;
    pe.prompt = edit_prompt(ex.caption, PromptSlot::kColor, kShapeColors[pe.target_color].name);
  } else if (mode == EvalMode::kTexture) {
    const int target = (static_cast<int>(ex.spec.texture) + 1 + index % 2) % 3;
    pe.target_texture = static_cast<Texture>(target);
    pe.prompt = edit_prompt(ex.caption, PromptSlot::kTexture, kTextureNames[target]);
    pe.roi = ex.mask.complement();
  }
  return pe;
}

namespace {

EvalRecord evaluate_one(const ModelState& state, const Example& ex, int index, const EvalProtocol& p) {
  const ProtocolEdit pe = protocol_edit(ex, index, p.mode);
  EditRequest req;
  req.image = ex.image;
  req.roi = pe.roi;
  req.prompt = pe.prompt;
  req.k = p.k;
  req.cfg_scale = p.cfg_scale;
  req.ddim_steps = p.ddim_steps;
  req.seed = derive_seed(p.seed, {static_cast<std::uint64_t>(ex.id)});
  const Image out = edit(req, state);

  EvalRecord r;
  r.example_id = ex.id;
  r.prompt = pe.prompt.raw;
  r.k = p.k;
  r.seed = req.seed;
  r.rmse_full = rmse(ex.image, out);
  r.psnr = psnr(ex.image, out);
  // Texture edits are scored on the background RoI; the untouched region is the shape.
  const EditScore s = p.mode == EvalMode::kTexture ? edit_success_texture(out, pe.roi, pe.target_texture)
                                                   : edit_success_color(out, pe.roi, kShapeColors[pe.target_color].rgb);
  r.success = s.success;
  r.score = s.score;
  r.rmse_outside = fidelity_outside_roi(ex.image, out, pe.roi);
  return r;
}

}  // namespace

EvalReport evaluate(const ModelState& state, const std::vector<Example>& testset, const EvalProtocol& p,
                    const fs::path* out_dir) {
  require(!testset.empty(), "evaluation test set is empty");
  require(p.count >= 1, "eval count must be at least 1");
  require(p.workers >= 1, "eval workers must be at least 1");
  const int n = std::min<int>(p.count, static_cast<int>(testset.size()));

  std::vector<EvalRecord> records(n);
  std::vector<std::uint8_t> done(n, 0);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<int> next{0};
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (int i = next++; i < n && !failed; i = next++) {
      try {
        records[i] = evaluate_one(state, testset[i], i, p);
        done[i] = 1;
      } catch (...) {
        errors[i] = std::current_exception();
        failed = true;
      }
    }
  };
  if (p.workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < p.workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  EvalReport report;
  json cfg = json::parse(to_json_string(p));
  cfg["examples"] = n;
  cfg["model"] = json::parse(to_json_string(state.config()));
  cfg["model_step"] = state.step;
  report.config_json = cfg.dump();
  for (int i = 0; i < n; ++i) {
    if (done[i]) report.records.push_back(records[i]);
  }
  report.complete = static_cast<int>(report.records.size()) == n;
  report.recompute();
  if (out_dir) write_report(report, *out_dir);
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return report;
}

std::string report_json(const EvalReport& r) {
  json j;
  j["config"] = json::parse(r.config_json);
  j["complete"] = r.complete;
  j["count"] = r.records.size();
  j["success_rate"] = r.success_rate;
  j["mean_rmse_outside"] = r.mean_rmse;
  j["mean_rmse_full"] = r.mean_rmse_full;
  j["mean_psnr"] = r.mean_psnr;
  json recs = json::array();
  for (const auto& e : r.records) {
    recs.push_back({{"example_id", e.example_id},
                    {"prompt", e.prompt},
                    {"k", e.k},
                    {"success", e.success},
                    {"score", e.score},
                    {"rmse_outside", e.rmse_outside},
                    {"rmse_full", e.rmse_full},
                    {"psnr", e.psnr},
                    {"seed", e.seed}});
  }
  j["records"] = recs;
  return j.dump(2);
}

std::string report_csv(const EvalReport& r) {
  std::string out = "example_id,prompt,k,success,score,rmse_outside,psnr\n";
  char buf[256];
  for (const auto& e : r.records) {
    std::snprintf(buf, sizeof buf, ",%d,%d,%.9g,%.9g,%.9g\n", e.k, e.success ? 1 : 0, e.score, e.rmse_outside,
                  e.psnr);
    out += std::to_string(e.example_id) + ",\"" + e.prompt + "\"" + buf;
  }
  return out;
}

void write_report(const EvalReport& r, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create report directory '" + dir.string() + "': " + ec.message());
  for (auto [name, text] : {std::pair{"report.json", report_json(r) + "\n"}, std::pair{"report.csv", report_csv(r)}}) {
    const fs::path path = dir / name;
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write '" + path.string() + "'");
    os << text;
    if (!os) throw IoError("write failed for '" + path.string() + "'");
  }
}

}  // namespace iir
