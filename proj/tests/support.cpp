#include "support.hpp"
#include "desk.hpp"

#include <atomic>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "iir/rng.hpp"

namespace iir::testing {

ModelConfig tiny_config(int image_size) {
  ModelConfig c;
  c.image_size = image_size;
  c.base_width = 8;
  c.channel_mult = {1, 2};
  c.groups = 4;
  c.heads = 2;
  c.text_dim = 16;
  c.text_layers = 1;
  c.text_heads = 2;
  c.init_seed = 11;
  return c;
}

std::vector<Example> synthetic_examples(int count, int size, std::uint64_t seed) {
  std::vector<Example> out;
  for (int i = 0; i < count; ++i) {
    Example ex;
    ex.id = i;
    ex.spec = scene_from_seed(derive_seed(seed, {static_cast<std::uint64_t>(i)}), size);
    Scene scene = render_scene(ex.spec);
    ex.image = std::move(scene.image);
    ex.mask = std::move(scene.mask);
    ex.caption = caption_of(ex.spec);
    ex.prompt = tokenize(ex.caption);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<const Example*> pointers(const std::vector<Example>& examples) {
  std::vector<const Example*> out;
  for (const auto& e : examples) out.push_back(&e);
  return out;
}

template <typename T>
void randomize_injection(Network<T>& net, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (auto* conv : net.injection_projections()) {
    for (auto* p : {&conv->weight(), &conv->bias()}) {
      for (auto& v : p->value.values()) v = static_cast<T>(uniform_real(rng, -scale, scale));
    }
  }
}

template void randomize_injection<float>(Network<float>&, std::uint64_t, double);
template void randomize_injection<double>(Network<double>&, std::uint64_t, double);

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          ("iir_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

TrainConfig desk_train_config(const DeskSetup& desk, bool removal_enabled, const std::filesystem::path& dataset) {
  TrainConfig c;
  c.model.image_size = desk.image_size;
  c.model.base_width = 32;
  c.model.channel_mult = {1, 2, 4};
  c.model.groups = 8;
  c.model.heads = 4;
  c.model.text_dim = 64;
  c.model.text_layers = 2;
  c.model.text_heads = 4;
  c.model.init_seed = 1;
  c.model.iirm.removal_enabled = removal_enabled;
  c.batch_size = 8;
  c.learning_rate = desk.learning_rate;
  c.total_steps = desk.steps;
  c.checkpoint_every = 500;
  c.seed = 2024;
  c.dataset = dataset.string();
  return c;
}

}  // namespace iir::testing
