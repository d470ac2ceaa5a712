#include "iir/data.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include "iir/error.hpp"
#include "iir/rng.hpp"

namespace iir {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

float texture_luma(int idx) {
  const auto& c = kTextureColors[idx].rgb;
  return 0.299f * c[0] + 0.587f * c[1] + 0.114f * c[2];
}

std::string file_stem(int id) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", id);
  return buf;
}

bool inside_triangle(double px, double py, const SceneSpec& s) {
  const double pi = 3.14159265358979323846;
  double vx[3], vy[3];
  for (int i = 0; i < 3; ++i) {
    const double a = -pi / 2.0 + 2.0 * pi * i / 3.0;
    vx[i] = s.center_x + s.radius * std::cos(a);
    vy[i] = s.center_y + s.radius * std::sin(a);
  }
  auto edge = [&](int i, int j) { return (vx[j] - vx[i]) * (py - vy[i]) - (vy[j] - vy[i]) * (px - vx[i]); };
  const double d0 = edge(0, 1), d1 = edge(1, 2), d2 = edge(2, 0);
  const bool neg = d0 < 0 || d1 < 0 || d2 < 0;
  const bool pos = d0 > 0 || d1 > 0 || d2 > 0;
  return !(neg && pos);
}

bool inside_shape(int x, int y, const SceneSpec& s) {
  const double px = x + 0.5, py = y + 0.5;
  const double dx = px - s.center_x, dy = py - s.center_y;
  switch (s.shape) {
    case Shape::kCircle: return dx * dx + dy * dy <= s.radius * s.radius;
    case Shape::kSquare: {
      const double half = 0.8 * s.radius;
      return std::abs(dx) <= half && std::abs(dy) <= half;
    }
    case Shape::kTriangle: return inside_triangle(px, py, s);
  }
  return false;
}

}  // namespace

SceneSpec scene_from_seed(std::uint64_t seed, int size) {
  require(size >= 16, "scene size must be at least 16 pixels");
  Rng rng(seed);
  SceneSpec s;
  s.seed = seed;
  s.size = size;
  s.shape = static_cast<Shape>(uniform_int(rng, 0, 2));
  s.color = uniform_int(rng, 0, static_cast<int>(kShapeColors.size()) - 1);
  s.texture = static_cast<Texture>(uniform_int(rng, 0, 2));
  const int ncol = static_cast<int>(kTextureColors.size());
  s.texture_color_a = uniform_int(rng, 0, ncol - 1);
  do {
    s.texture_color_b = uniform_int(rng, 0, ncol - 1);
  } while (std::abs(texture_luma(s.texture_color_a) - texture_luma(s.texture_color_b)) < 0.15f);
  s.orientation = uniform_int(rng, 0, 3);
  s.half_period = std::max(2, static_cast<int>(std::lround(size * (uniform_int(rng, 0, 1) ? 4.0 : 3.0) / 32.0)));
  s.phase_x = uniform_int(rng, 0, 2 * s.half_period - 1);
  s.phase_y = uniform_int(rng, 0, 2 * s.half_period - 1);
  s.radius = size * uniform_real(rng, 0.22, 0.32);
  const double margin = s.radius + 1.0;
  s.center_x = uniform_real(rng, margin, size - margin);
  s.center_y = uniform_real(rng, margin, size - margin);
  return s;
}

std::string caption_of(const SceneSpec& spec) { return make_caption(spec.color, spec.shape, spec.texture); }

Image render_background(const SceneSpec& s) {
  Image img(s.size, s.size, 3);
  const auto& a = kTextureColors[s.texture_color_a].rgb;
  const auto& b = kTextureColors[s.texture_color_b].rgb;
  const int hp = s.half_period;
  for (int y = 0; y < s.size; ++y) {
    for (int x = 0; x < s.size; ++x) {
      bool second = false;
      if (s.texture == Texture::kStripes) {
        int u = 0;
        switch (s.orientation) {
          case 0: u = y + s.phase_y; break;
          case 1: u = x + s.phase_x; break;
          case 2: u = x + y + s.phase_x; break;
          default: u = x - y + s.size + s.phase_x; break;
        }
        second = (u / hp) % 2 == 1;
      } else if (s.texture == Texture::kChecker) {
        second = ((x + s.phase_x) / hp + (y + s.phase_y) / hp) % 2 == 1;
      }
      const auto& c = second ? b : a;
      for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = c[ch];
    }
  }
  return img;
}

Scene render_scene(const SceneSpec& spec) {
  Scene scene{render_background(spec), RoIMask(spec.size, spec.size)};
  const auto& c = kShapeColors[spec.color].rgb;
  for (int y = 0; y < spec.size; ++y) {
    for (int x = 0; x < spec.size; ++x) {
      if (!inside_shape(x, y, spec)) continue;
      scene.mask.set(y, x, true);
      for (int ch = 0; ch < 3; ++ch) scene.image.at(y, x, ch) = c[ch];
    }
  }
  return scene;
}

std::string manifest_json(const DatasetManifest& m) {
  json j;
  j["version"] = m.version;
  j["image_size"] = m.image_size;
  j["seed"] = m.seed;
  j["count"] = m.records.size();
  j["caption_grammar"] = std::string(kCaptionGrammar);
  json colors = json::object();
  for (const auto& c : kShapeColors) colors[std::string(c.name)] = c.rgb;
  j["colors"] = colors;
  j["shapes"] = kShapeNames;
  j["textures"] = kTextureNames;
  json recs = json::array();
  for (const auto& r : m.records) {
    recs.push_back({{"id", r.id}, {"image", r.image}, {"mask", r.mask}, {"caption", r.caption}, {"seed", r.seed}});
  }
  j["records"] = recs;
  return j.dump(2);
}

DatasetManifest gen_dataset(const fs::path& out_dir, const GenerateOptions& options) {
  require(options.count >= 1, "gen_dataset: count must be at least 1");
  require(options.workers >= 1, "gen_dataset: workers must be at least 1");
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (!ec) fs::create_directories(out_dir / "masks", ec);
  if (ec) throw IoError("cannot create dataset directory '" + out_dir.string() + "': " + ec.message());

  DatasetManifest m;
  m.root = out_dir;
  m.image_size = options.size;
  m.seed = options.seed;
  m.records.resize(options.count);

  auto work = [&](int first, int stride) {
    for (int i = first; i < options.count; i += stride) {
      DatasetRecord& r = m.records[i];
      r.id = i;
      r.seed = derive_seed(options.seed, {static_cast<std::uint64_t>(i)});
      const SceneSpec spec = scene_from_seed(r.seed, options.size);
      const Scene scene = render_scene(spec);
      r.caption = caption_of(spec);
      r.image = "images/" + file_stem(i) + ".png";
      r.mask = "masks/" + file_stem(i) + ".png";
      write_png(out_dir / r.image, scene.image);
      write_mask_png(out_dir / r.mask, scene.mask);
    }
  };
  if (options.workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::exception_ptr> errors(options.workers);
    std::vector<std::thread> pool;
    for (int w = 0; w < options.workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          work(w, options.workers);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  const auto path = out_dir / "manifest.json";
  std::ofstream os(path);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << manifest_json(m) << '\n';
  return m;
}

DatasetManifest load_manifest(const fs::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream is(path);
  if (!is) throw IoError("cannot open dataset manifest '" + path.string() + "'");
  DatasetManifest m;
  m.root = dir;
  try {
    const json j = json::parse(is);
    m.version = j.at("version");
    if (m.version != DatasetManifest::kVersion) {
      throw IoError(path.string() + ": unsupported manifest version " + std::to_string(m.version));
    }
    m.image_size = j.at("image_size");
    m.seed = j.at("seed");
    for (const auto& r : j.at("records")) {
      DatasetRecord rec;
      rec.id = r.at("id");
      rec.image = r.at("image");
      rec.mask = r.at("mask");
      rec.caption = r.at("caption");
      rec.seed = r.at("seed");
      for (const auto* rel : {&rec.image, &rec.mask}) {
        if (!fs::exists(dir / *rel)) throw IoError(path.string() + ": referenced file '" + *rel + "' is missing");
      }
      m.records.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": malformed manifest: " + e.what());
  }
  return m;
}

std::vector<Example> load_examples(const DatasetManifest& m) {
  std::vector<Example> out;
  out.reserve(m.records.size());
  for (const auto& r : m.records) {
    Example ex;
    ex.id = r.id;
    ex.image = read_png(m.root / r.image);
    ex.mask = read_mask_png(m.root / r.mask);
    require(ex.mask.matches(ex.image), "mask/image size mismatch for record " + std::to_string(r.id));
    ex.caption = r.caption;
    ex.prompt = tokenize(r.caption);
    ex.spec = scene_from_seed(r.seed, m.image_size);
    out.push_back(std::move(ex));
  }
  return out;
}

std::string edit_caption(std::string_view caption, PromptSlot slot, std::string_view value) {
  std::istringstream is{std::string(caption)};
  std::vector<std::string> words;
  for (std::string w; is >> w;) words.push_back(w);
  if (words.size() != 6 || words[0] != "a" || words[3] != "on" || words[5] != "background") {
    throw ValidationError("caption '" + std::string(caption) + "' does not follow the grammar " +
                          std::string(kCaptionGrammar));
  }
  if (slot == PromptSlot::kColor) {
    if (!color_index(value)) throw ValidationError("unknown color '" + std::string(value) + "'");
    words[1] = std::string(value);
  } else {
    if (!texture_from_name(value)) throw ValidationError("unknown texture '" + std::string(value) + "'");
    words[4] = std::string(value);
  }
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) out += (i ? " " : "") + words[i];
  return out;
}

Prompt edit_prompt(std::string_view caption, PromptSlot slot, std::string_view value) {
  return tokenize(edit_caption(caption, slot, value));
}

}  // namespace iir
