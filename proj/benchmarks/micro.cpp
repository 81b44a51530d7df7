#include <benchmark/benchmark.h>

#include <random>

#include "detkit/config.hpp"
#include "detkit/experiment.hpp"
#include "detkit/geometry.hpp"
#include "detkit/model/layers.hpp"

using namespace detkit;

namespace {

void BM_HungarianMatch(benchmark::State& state) {
  const int64_t n = state.range(0);
  std::mt19937_64 rng(1);
  const Tensor cost = Tensor::uniform({n, n / 4 + 1}, rng, 0.0, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(geometry::hungarian_match(cost));
  state.SetComplexityN(n);
}
BENCHMARK(BM_HungarianMatch)->RangeMultiplier(2)->Range(16, 512)->Complexity();

void BM_Nms(benchmark::State& state) {
  const int64_t n = state.range(0);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<std::array<double, 4>> boxes;
  std::vector<double> scores;
  for (int64_t i = 0; i < n; ++i) {
    const double x = 600 * u(rng), y = 600 * u(rng);
    boxes.push_back({x, y, x + 20 + 80 * u(rng), y + 20 + 80 * u(rng)});
    scores.push_back(u(rng));
  }
  const auto arr = geometry::BoxArray::xyxy(boxes);
  for (auto _ : state) benchmark::DoNotOptimize(geometry::nms(arr, scores, 0.5));
  state.SetComplexityN(n);
}
BENCHMARK(BM_Nms)->RangeMultiplier(4)->Range(64, 4096)->Complexity();

void BM_DeformableAttention(benchmark::State& state) {
  const int64_t queries = state.range(0);
  const std::vector<ops::LevelShape> shapes = {{32, 32}, {16, 16}, {8, 8}, {4, 4}};
  int64_t tokens = 0;
  for (const auto& s : shapes) tokens += s.height * s.width;
  nn::seed_init_rng(3);
  model::DeformableAttention att(64, 8, 4, 4);
  std::mt19937_64 rng(3);
  const Var q(Tensor::normal({queries, 64}, rng));
  const Var ref(Tensor::uniform({queries, 4 * 2}, rng, 0.05, 0.95));
  const Var value(Tensor::normal({tokens, 64}, rng));
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(att.forward(q, ref, value, shapes, nullptr));
  state.SetItemsProcessed(state.iterations() * queries);
}
BENCHMARK(BM_DeformableAttention)->Arg(100)->Arg(300)->Arg(900)->Unit(benchmark::kMillisecond);

// End-to-end inference on the toy profile, one batch of two 64x64 images.
void BM_DetectorForward(benchmark::State& state, const char* rel) {
  const auto cfg = config::load_config(std::string(DETKIT_SOURCE_DIR) + "/projects/" + rel);
  auto e = experiment::build_experiment(cfg);
  const auto batch = e.train_loader->batch_at(0);
  NoGradGuard ng;
  e.model->train(false);
  for (auto _ : state)
    benchmark::DoNotOptimize(model::forward_detector(*e.model, batch.images, batch.masks, model::Mode::kEval));
}
BENCHMARK_CAPTURE(BM_DetectorForward, detr, "detr/configs/detr_toy.cfg")->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_DetectorForward, dab_detr, "dab_detr/configs/dab_detr_toy.cfg")->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_DetectorForward, deformable_detr, "deformable_detr/configs/deformable_detr_toy.cfg")
    ->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_DetectorForward, dino, "dino/configs/dino_4scale_toy.cfg")->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
