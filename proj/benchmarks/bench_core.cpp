#include <benchmark/benchmark.h>

#include "iir/data.hpp"
#include "iir/iirm.hpp"
#include "iir/model.hpp"
#include "iir/sample.hpp"

namespace {

using namespace iir;

Scene scene(int size) { return render_scene(scene_from_seed(3, size)); }

ModelConfig desk_model(int size) {
  ModelConfig c;
  c.image_size = size;
  c.base_width = 32;
  c.channel_mult = {1, 2, 4};
  c.text_dim = 64;
  c.init_seed = 1;
  return c;
}

void BM_Canny(benchmark::State& st) {
  const Scene s = scene(static_cast<int>(st.range(0)));
  for (auto _ : st) benchmark::DoNotOptimize(canny_edges(s.image));
}
BENCHMARK(BM_Canny)->Arg(32)->Arg(64)->Unit(benchmark::kMicrosecond);

void BM_AssembleCondition(benchmark::State& st) {
  const Scene s = scene(static_cast<int>(st.range(0)));
  const BetaSchedule sched = BetaSchedule::standard();
  std::uint64_t seed = 0;
  for (auto _ : st) benchmark::DoNotOptimize(assemble_condition(s.image, s.mask, 250, sched, ++seed));
}
BENCHMARK(BM_AssembleCondition)->Arg(32)->Arg(64)->Unit(benchmark::kMicrosecond);

// One guided denoiser evaluation: two forward passes sharing the condition.
void BM_PredictNoiseCfg(benchmark::State& st) {
  const int size = static_cast<int>(st.range(0));
  const ModelState state(desk_model(size));
  const Scene s = scene(size);
  const ConditionTensor cond = assemble_condition(s.image, s.mask, 0, BetaSchedule::standard(), 1);
  const Prompt p = tokenize("a blue circle on stripes background");
  for (auto _ : st) benchmark::DoNotOptimize(predict_noise_cfg(s.image, 500, p, cond, state, 9.0));
}
BENCHMARK(BM_PredictNoiseCfg)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_Edit20Steps(benchmark::State& st) {
  const int size = static_cast<int>(st.range(0));
  const ModelState state(desk_model(size));
  const Scene s = scene(size);
  EditRequest req;
  req.image = s.image;
  req.roi = s.mask;
  req.prompt = tokenize("a blue circle on stripes background");
  for (auto _ : st) benchmark::DoNotOptimize(edit(req, state));
}
BENCHMARK(BM_Edit20Steps)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond)->Iterations(3);

}  // namespace
BENCHMARK_MAIN();
