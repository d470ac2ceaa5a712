#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <Eigen/Core>

#include <cstdlib>
#include <fstream>
#include <memory>
#include <ostream>
#include <sstream>

#include "iir/checkpoint.hpp"
#include "iir/data.hpp"
#include "iir/error.hpp"
#include "iir/eval.hpp"
#include "iir/sample.hpp"
#include "iir/tensor_io.hpp"
#include "iir/train.hpp"

#ifndef IIR_VERSION
#define IIR_VERSION "unknown"
#endif

namespace iir::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// One flag bound to a dotted key of the effective config.
struct Binding {
  std::string key;
  CLI::Option* option = nullptr;
  std::string text;
  bool is_flag = false;
  json flag_value;
};

struct Command {
  std::string name;
  CLI::App* app = nullptr;
  json defaults;
  std::vector<std::unique_ptr<Binding>> bindings;
  std::string config_path;
  std::vector<std::string> overrides;
  int verbose = 0;
};

json* lookup(json& root, const std::string& dotted) {
  json* node = &root;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string part = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) return nullptr;
    node = &(*node)[part];
    if (dot == std::string::npos) return node;
    start = dot + 1;
  }
}

bool compatible(const json& like, const json& v) {
  if (like.is_boolean()) return v.is_boolean();
  if (like.is_number_integer()) return v.is_number_integer();
  if (like.is_number_float()) return v.is_number();
  if (like.is_string()) return v.is_string();
  if (like.is_array()) return v.is_array();
  if (like.is_object()) return v.is_object();
  return true;
}

json assign_like(const json& like, const json& v, const std::string& what) {
  if (!compatible(like, v)) {
    throw ValidationError(what + ": expected a " + std::string(like.type_name()) + ", got " + v.dump());
  }
  if (like.is_number_unsigned() && v.is_number_integer() && v.get<std::int64_t>() < 0) {
    throw ValidationError(what + ": must be non-negative, got " + v.dump());
  }
  // Keep floats printed as floats so echoed configs are stable.
  if (like.is_number_float()) return v.get<double>();
  return v;
}

json parse_value(const json& like, const std::string& text, const std::string& what) {
  if (like.is_string()) return text;
  std::string src = text;
  if (like.is_array() && (src.empty() || src.front() != '[')) src = "[" + src + "]";
  json v;
  try {
    v = json::parse(src);
  } catch (const json::exception&) {
    throw ValidationError(what + ": cannot parse value '" + text + "'");
  }
  return assign_like(like, v, what);
}

void merge(json& base, const json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ValidationError("config " + (prefix.empty() ? "file" : prefix) + " must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ValidationError("unknown config key '" + path + "'");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      merge(slot, it.value(), path);
    } else {
      slot = assign_like(slot, it.value(), "config key '" + path + "'");
    }
  }
}

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read '" + path.string() + "'");
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << text << '\n';
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

void make_dirs(const fs::path& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

// Defaults, then the config file, then --set, then explicit flags.
json effective_config(const Command& c) {
  json cfg = c.defaults;
  if (!c.config_path.empty()) {
    json file;
    try {
      file = json::parse(slurp(c.config_path));
    } catch (const json::exception& e) {
      throw ValidationError("config file '" + c.config_path + "' is not valid JSON: " + e.what());
    }
    // A run.json from an earlier invocation replays its effective config.
    if (file.is_object() && file.contains("command") && file.contains("config")) {
      if (file["command"] != c.name) {
        throw ValidationError("config file '" + c.config_path + "' records a '" + file["command"].dump() +
                              "' run, not '" + c.name + "'");
      }
      file = file["config"];
    }
    merge(cfg, file, "");
  }
  for (const auto& o : c.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("--set expects key=value, got '" + o + "'");
    const std::string key = o.substr(0, eq);
    json* slot = lookup(cfg, key);
    if (!slot) throw ValidationError("unknown config key '" + key + "' in --set");
    const json like = *slot;
    if (like.is_object()) throw ValidationError("--set " + key + ": cannot replace a whole section");
    *slot = parse_value(like, o.substr(eq + 1), "--set " + key);
  }
  for (const auto& b : c.bindings) {
    if (b->option->count() == 0) continue;
    json* slot = lookup(cfg, b->key);
    *slot = b->is_flag ? b->flag_value : parse_value(*slot, b->text, b->option->get_name());
  }
  return cfg;
}

void bind(Command& c, const std::string& key, const std::string& names, const std::string& help) {
  auto b = std::make_unique<Binding>();
  b->key = key;
  b->option = c.app->add_option(names, b->text, help);
  c.bindings.push_back(std::move(b));
}

void bind_flag(Command& c, const std::string& key, const std::string& names, json value, const std::string& help) {
  auto b = std::make_unique<Binding>();
  b->key = key;
  b->is_flag = true;
  b->flag_value = std::move(value);
  b->option = c.app->add_flag(names, help);
  c.bindings.push_back(std::move(b));
}

Command& add_command(std::vector<std::unique_ptr<Command>>& cmds, CLI::App& app, const std::string& name,
                     const std::string& help, json defaults) {
  auto c = std::make_unique<Command>();
  c->name = name;
  c->app = app.add_subcommand(name, help);
  c->defaults = std::move(defaults);
  c->app->add_option("--config", c->config_path, "JSON config file (or a run.json to replay)");
  c->app->add_option("--set", c->overrides, "Override a config key: dotted.key=value")->take_all();
  c->app->add_flag("-v,--verbose", c->verbose, "Progress output on stderr");
  cmds.push_back(std::move(c));
  return *cmds.back();
}

std::string need(const json& cfg, const std::string& key, const std::string& flag) {
  const std::string v = cfg.at(key);
  if (v.empty()) throw ValidationError(flag + " is required");
  return v;
}

// Empty `out` falls back to $IIR_EDIT_HOME (or the working directory) / name.
void resolve_out(json& cfg, const fs::path& leaf) {
  if (!cfg.at("out").get<std::string>().empty()) return;
  const char* home = std::getenv("IIR_EDIT_HOME");
  const fs::path base = home && *home ? fs::path(home) : fs::current_path();
  cfg["out"] = (base / leaf).string();
}

json versions() {
  return {{"iir_edit", IIR_VERSION},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"checkpoint_format", kCheckpointVersion},
          {"tensor_format", kTensorVersion},
          {"manifest_version", DatasetManifest::kVersion},
          {"compiler", __VERSION__}};
}

void write_run_json(const fs::path& dir, const std::string& command, const json& cfg, const json& seeds) {
  make_dirs(dir);
  const json run = {{"command", command}, {"config", cfg}, {"seeds", seeds}, {"versions", versions()}};
  write_text(dir / "run.json", run.dump(2));
}

fs::path checkpoint_path(const std::string& ckpt) {
  const fs::path p(ckpt);
  return fs::is_directory(p) ? p / kCheckpointName : p;
}

RoIMask load_mask(const std::string& spec, const Image& img) {
  if (spec == "all") return RoIMask::full(img.height(), img.width());
  RoIMask m = read_mask_png(spec);
  require(m.matches(img), "mask '" + spec + "' is " + std::to_string(m.width()) + "x" + std::to_string(m.height()) +
                              " but the image is " + std::to_string(img.width()) + "x" +
                              std::to_string(img.height()));
  return m;
}

struct Streams {
  std::ostream& out;
  std::ostream& err;
  int verbose;
};

// ---- subcommands ----

json gen_data_defaults() {
  const GenerateOptions d;
  return {{"count", d.count}, {"size", d.size}, {"seed", d.seed}, {"workers", d.workers}, {"out", ""}};
}

void cmd_gen_data(json cfg, const Streams& io) {
  resolve_out(cfg, "data");
  GenerateOptions o;
  o.count = cfg["count"];
  o.size = cfg["size"];
  o.seed = cfg["seed"];
  o.workers = cfg["workers"];
  require(o.count >= 1, "--n must be at least 1");
  require(o.size >= 16, "--size must be at least 16");
  require(o.workers >= 1, "--workers must be at least 1");
  const fs::path out = cfg["out"].get<std::string>();
  write_run_json(out, "gen-data", cfg, {{"seed", o.seed}});
  const DatasetManifest m = gen_dataset(out, o);
  io.out << "wrote " << m.records.size() << " examples to " << out.string() << '\n';
}

json train_defaults() {
  json j = json::parse(to_json_string(TrainConfig{}));
  j["out"] = "";
  return j;
}

void cmd_train(json cfg, const Streams& io) {
  resolve_out(cfg, "train");
  json tc = cfg;
  tc.erase("out");
  const TrainConfig config = train_config_from_json(tc.dump());
  require(!config.dataset.empty(), "--dataset is required");
  const DatasetManifest manifest = load_manifest(config.dataset);
  require(manifest.image_size == config.model.image_size,
          "dataset images are " + std::to_string(manifest.image_size) + "px but model.image_size is " +
              std::to_string(config.model.image_size));
  const auto examples = load_examples(manifest);
  const fs::path out = cfg["out"].get<std::string>();
  write_run_json(out, "train", cfg, {{"seed", config.seed}, {"init_seed", config.model.init_seed}});
  const std::int64_t every = std::max<std::int64_t>(1, config.total_steps / 100);
  TrainObserver observer;
  if (io.verbose > 0) {
    observer = [&](std::int64_t step, double loss) {
      if (step % every == 0 || step == config.total_steps) io.err << "step " << step << " loss " << loss << '\n';
    };
  }
  const TrainOutcome r = train(config, examples, out, observer);
  io.out << "checkpoint " << r.checkpoint.string() << " loss " << r.last_loss << '\n';
}

json edit_defaults(bool grid) {
  const EditRequest d;
  json j = {{"image", ""},
            {"mask", ""},
            {"prompt", ""},
            {"cfg_scale", d.cfg_scale},
            {"ddim_steps", d.ddim_steps},
            {"seed", d.seed},
            {"ckpt", ""},
            {"noise_roi_only", false},
            {"out", ""}};
  if (grid) {
    j["ks"] = json::array();
  } else {
    j["k"] = d.k;
  }
  return j;
}

void bind_edit_flags(Command& c, bool grid) {
  bind(c, "image", "--image", "Input PNG");
  bind(c, "mask", "--mask", "RoI mask PNG, or 'all' for the whole image");
  bind(c, "prompt", "--prompt", "Target caption");
  if (grid) {
    bind(c, "ks", "--ks", "Comma-separated noise levels (default 0,K/4,K/2,K)");
  } else {
    bind(c, "k", "-k,--k", "Condition noise level");
  }
  bind(c, "cfg_scale", "--cfg,--cfg-scale", "Guidance scale");
  bind(c, "ddim_steps", "--steps,--ddim-steps", "DDIM steps");
  bind(c, "seed", "--seed", "Sampling seed");
  bind(c, "ckpt", "--ckpt", "Checkpoint file or training directory");
  bind_flag(c, "noise_roi_only", "--noise-roi-only", true, "Noise the condition inside the RoI only");
}

struct LoadedEdit {
  std::unique_ptr<ModelState> state;
  EditRequest req;
  IirmOptions iirm;
};

LoadedEdit load_edit(const json& cfg) {
  LoadedEdit e;
  const std::string image = need(cfg, "image", "--image");
  const std::string mask = need(cfg, "mask", "--mask");
  const std::string prompt = need(cfg, "prompt", "--prompt");
  const std::string ckpt = need(cfg, "ckpt", "--ckpt");
  e.req.image = read_png(image);
  e.req.roi = load_mask(mask, e.req.image);
  e.req.prompt = tokenize(prompt);
  e.req.cfg_scale = cfg["cfg_scale"];
  e.req.ddim_steps = cfg["ddim_steps"];
  e.req.seed = cfg["seed"];
  if (cfg.contains("k")) e.req.k = cfg["k"];
  e.state = load_checkpoint(checkpoint_path(ckpt)).state;
  e.iirm = e.state->config().iirm;
  if (cfg["noise_roi_only"].get<bool>()) e.iirm.noise_roi_only = true;
  return e;
}

Image run_edit(const EditRequest& req, const ModelState& state, const IirmOptions& iirm) {
  req.validate(state.config());
  const ConditionTensor cond = assemble_condition(req.image, req.roi, req.k, state.config().schedule.make(),
                                                  edit_condition_seed(req.seed), iirm);
  return edit_with_condition(req, cond, state);
}

json edit_seeds(std::uint64_t seed) {
  return {{"seed", seed}, {"noise_seed", edit_noise_seed(seed)}, {"condition_seed", edit_condition_seed(seed)}};
}

void cmd_edit(json cfg, const Streams& io) {
  resolve_out(cfg, fs::path("edit") / "edited.png");
  const LoadedEdit e = load_edit(cfg);
  e.req.validate(e.state->config());
  const fs::path out = cfg["out"].get<std::string>();
  write_run_json(out.parent_path(), "edit", cfg, edit_seeds(e.req.seed));
  write_png(out, run_edit(e.req, *e.state, e.iirm));
  io.out << "wrote " << out.string() << '\n';
}

// Input followed by each result, separated by 2-pixel white gutters.
Image contact_sheet(const Image& input, const std::vector<Image>& tiles) {
  const int gap = 2, h = input.height(), w = input.width();
  const int n = static_cast<int>(tiles.size()) + 1;
  Image sheet(h, n * w + (n - 1) * gap, 3, 1.0f);
  for (int i = 0; i < n; ++i) {
    const Image& t = i == 0 ? input : tiles[i - 1];
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < 3; ++c) sheet.at(y, i * (w + gap) + x, c) = t.at(y, x, c);
      }
    }
  }
  return sheet;
}

void cmd_ablate(json cfg, const Streams& io) {
  resolve_out(cfg, "ablate");
  LoadedEdit e = load_edit(cfg);
  std::vector<int> ks = cfg["ks"].get<std::vector<int>>();
  if (ks.empty()) ks = default_noise_grid(e.state->config().cond_noise_max);
  for (int k : ks) {
    EditRequest r = e.req;
    r.k = k;
    r.validate(e.state->config());
  }
  const fs::path out = cfg["out"].get<std::string>();
  write_run_json(out, "ablate", cfg, edit_seeds(e.req.seed));
  std::vector<Image> tiles;
  json entries = json::array();
  for (int k : ks) {
    EditRequest r = e.req;
    r.k = k;
    tiles.push_back(run_edit(r, *e.state, e.iirm));
    char name[32];
    std::snprintf(name, sizeof name, "k_%04d.png", k);
    write_png(out / name, tiles.back());
    entries.push_back({{"k", k}, {"file", name}});
    if (io.verbose > 0) io.err << "k " << k << " done\n";
  }
  write_png(out / "sheet.png", contact_sheet(e.req.image, tiles));
  const json manifest = {{"prompt", cfg["prompt"]}, {"sheet", "sheet.png"}, {"edits", entries}};
  write_text(out / "ablate.json", manifest.dump(2));
  io.out << "wrote " << ks.size() << " edits to " << out.string() << '\n';
}

json eval_defaults() {
  const EvalProtocol d;
  return {{"ckpt", ""},
          {"data", ""},
          {"mode", eval_mode_name(d.mode)},
          {"k", d.k},
          {"count", d.count},
          {"cfg_scale", d.cfg_scale},
          {"ddim_steps", d.ddim_steps},
          {"seed", d.seed},
          {"workers", d.workers},
          {"out", ""}};
}

void cmd_eval(json cfg, const Streams& io) {
  resolve_out(cfg, "eval");
  EvalProtocol p;
  p.mode = eval_mode_from_name(cfg["mode"]);
  p.k = cfg["k"];
  p.count = cfg["count"];
  p.cfg_scale = cfg["cfg_scale"];
  p.ddim_steps = cfg["ddim_steps"];
  p.seed = cfg["seed"];
  p.workers = cfg["workers"];
  require(p.workers >= 1, "--workers must be at least 1");
  const auto state = load_checkpoint(checkpoint_path(need(cfg, "ckpt", "--ckpt"))).state;
  const auto test = load_examples(load_manifest(need(cfg, "data", "--data")));
  const fs::path out = cfg["out"].get<std::string>();
  write_run_json(out, "eval", cfg, {{"seed", p.seed}});
  const EvalReport r = evaluate(*state, test, p, &out);
  io.out << eval_mode_name(p.mode) << " k=" << p.k << " success " << r.success_rate << " rmse_outside " << r.mean_rmse
         << " psnr " << r.mean_psnr << '\n';
}

json inspect_defaults() {
  return {{"image", ""}, {"mask", ""},           {"k", 0},    {"seed", 0},
          {"ckpt", ""},  {"removal_enabled", true}, {"noise_roi_only", false}, {"out", ""}};
}

// Noised color-removed RGB planes and the edge map, one grayscale PNG each.
void cmd_inspect(json cfg, const Streams& io) {
  resolve_out(cfg, "inspect");
  const Image img = read_png(need(cfg, "image", "--image"));
  const RoIMask roi = load_mask(need(cfg, "mask", "--mask"), img);
  ModelConfig model;
  if (!cfg["ckpt"].get<std::string>().empty()) model = load_checkpoint(checkpoint_path(cfg["ckpt"])).state->config();
  IirmOptions opt = model.iirm;
  opt.removal_enabled = cfg["removal_enabled"];
  opt.noise_roi_only = cfg["noise_roi_only"];
  const int k = cfg["k"];
  require(k >= 0 && k <= model.cond_noise_max,
          "k must lie in [0, " + std::to_string(model.cond_noise_max) + "], got " + std::to_string(k));
  const std::uint64_t seed = cfg["seed"];
  const fs::path out = cfg["out"].get<std::string>();
  write_run_json(out, "inspect-condition", cfg, {{"seed", seed}, {"condition_seed", edit_condition_seed(seed)}});
  const ConditionTensor cond = assemble_condition(img, roi, k, model.schedule.make(), edit_condition_seed(seed), opt);
  const char* names[ConditionTensor::kChannels] = {"cond_r.png", "cond_g.png", "cond_b.png", "cond_edges.png"};
  for (int c = 0; c < ConditionTensor::kChannels; ++c) write_png_channel(out / names[c], cond.image(), c);
  io.out << "wrote condition planes to " << out.string() << '\n';
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Text-driven image editing with condition information removal", "iir-edit"};
  app.require_subcommand(1);
  std::vector<std::unique_ptr<Command>> cmds;

  Command& gen = add_command(cmds, app, "gen-data", "Render a captioned shapes dataset", gen_data_defaults());
  bind(gen, "count", "--n,--count", "Number of examples");
  bind(gen, "size", "--size", "Image side in pixels");
  bind(gen, "seed", "--seed", "Dataset seed");
  bind(gen, "workers", "--workers", "Parallel render workers");
  bind(gen, "out", "--out", "Output directory");

  Command& tr = add_command(cmds, app, "train", "Train a model, resuming from out/checkpoint.iirc", train_defaults());
  bind(tr, "dataset", "--dataset,--data", "Dataset directory");
  bind(tr, "total_steps", "--total-steps,--steps", "Optimizer steps");
  bind(tr, "batch_size", "--batch-size", "Examples per step");
  bind(tr, "learning_rate", "--learning-rate,--lr", "Adam learning rate");
  bind(tr, "seed", "--seed", "Training seed");
  bind(tr, "checkpoint_every", "--checkpoint-every", "Checkpoint interval in steps");
  bind(tr, "text_dropout", "--text-dropout", "Probability of the null prompt");
  bind(tr, "grad_clip", "--grad-clip", "Global gradient-norm clip");
  bind(tr, "model.image_size", "--image-size", "Model resolution");
  bind(tr, "model.cond_noise_max", "--cond-noise-max", "Largest condition noise level K");
  bind_flag(tr, "model.iirm.removal_enabled", "--disable-removal", false, "Train on [x0, edges] conditions");
  bind_flag(tr, "model.iirm.noise_roi_only", "--noise-roi-only", true, "Noise the condition inside the RoI only");
  bind(tr, "out", "--out", "Output directory");

  Command& ed = add_command(cmds, app, "edit", "Edit one image", edit_defaults(false));
  bind_edit_flags(ed, false);
  bind(ed, "out", "--out", "Output PNG");

  Command& ab = add_command(cmds, app, "ablate", "Edit one image over a grid of noise levels", edit_defaults(true));
  bind_edit_flags(ab, true);
  bind(ab, "out", "--out", "Output directory");

  Command& ev = add_command(cmds, app, "eval", "Score a checkpoint on a test set", eval_defaults());
  bind(ev, "ckpt", "--ckpt", "Checkpoint file or training directory");
  bind(ev, "data", "--data,--dataset", "Test dataset directory");
  bind(ev, "mode", "--mode", "color, texture or reconstruct");
  bind(ev, "k", "-k,--k", "Condition noise level");
  bind(ev, "count", "--n,--count", "Number of test examples");
  bind(ev, "cfg_scale", "--cfg,--cfg-scale", "Guidance scale");
  bind(ev, "ddim_steps", "--steps,--ddim-steps", "DDIM steps");
  bind(ev, "seed", "--seed", "Protocol seed");
  bind(ev, "workers", "--workers", "Parallel edit workers");
  bind(ev, "out", "--out", "Report directory");

  Command& in = add_command(cmds, app, "inspect-condition", "Write the condition planes for an image",
                            inspect_defaults());
  bind(in, "image", "--image", "Input PNG");
  bind(in, "mask", "--mask", "RoI mask PNG, or 'all'");
  bind(in, "k", "-k,--k", "Condition noise level");
  bind(in, "seed", "--seed", "Seed (same stream as edit)");
  bind(in, "ckpt", "--ckpt", "Take schedule and edge settings from a checkpoint");
  bind_flag(in, "removal_enabled", "--disable-removal", false, "Raw image instead of gray + noise");
  bind_flag(in, "noise_roi_only", "--noise-roi-only", true, "Noise inside the RoI only");
  bind(in, "out", "--out", "Output directory");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  const Command* chosen = nullptr;
  for (const auto& c : cmds) {
    if (c->app->parsed()) chosen = c.get();
  }
  try {
    json cfg = effective_config(*chosen);
    const Streams io{out, err, chosen->verbose};
    if (chosen->name == "gen-data") cmd_gen_data(std::move(cfg), io);
    else if (chosen->name == "train") cmd_train(std::move(cfg), io);
    else if (chosen->name == "edit") cmd_edit(std::move(cfg), io);
    else if (chosen->name == "ablate") cmd_ablate(std::move(cfg), io);
    else if (chosen->name == "eval") cmd_eval(std::move(cfg), io);
    else cmd_inspect(std::move(cfg), io);
  } catch (const ValidationError& e) {
    err << "iir-edit " << chosen->name << ": " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "iir-edit " << chosen->name << ": " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace iir::cli
