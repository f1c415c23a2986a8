// Serial reference against the OpenMP path of each parallel kernel.
// The argument selects the path: 0 = serial, 1 = parallel.
#include <benchmark/benchmark.h>

#include <numeric>

#include "supportaff/data.hpp"
#include "supportaff/learning.hpp"
#include "supportaff/policy.hpp"

using namespace supportaff;

namespace {

Exec exec_of(const benchmark::State& s) { return s.range(0) ? Exec::Parallel : Exec::Serial; }

struct Setup {
  ModelWeights w = make_model(ModelConfig{}, {1, 1});
  Dataset d;
  FeatureCache cache;
  Setup() {
    CollectConfig c;
    c.n = 128;
    d = collect_offline(TaskType::Screw, EnvConfig{}, c, 1);
    cache = build_feature_cache(w, d);
  }
};

const Setup& setup() {
  static const Setup s;
  return s;
}

void BM_EvaluateCandidates(benchmark::State& state) {
  const Setup& s = setup();
  const SceneInstance& scene = s.d.scenes[0];
  const HierarchyPlan plan = plan_hierarchy(scene.cloud, s.w.config.encoder);
  std::vector<int> points(10);
  std::iota(points.begin(), points.end(), 0);
  const PairFeatures f = pair_features(s.w, plan, scene.p_op, points);
  const nn::Vec f_I = s.w.context.no_context.col(0);
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_candidates(s.w, f, f_I, 100, {1, 2}, exec_of(state)));
}

void BM_CollectOffline(benchmark::State& state) {
  CollectConfig c;
  c.n = 64;
  c.exec = exec_of(state);
  for (auto _ : state) benchmark::DoNotOptimize(collect_offline(TaskType::Pull, EnvConfig{}, c, 3));
}

void BM_FeatureCache(benchmark::State& state) {
  const Setup& s = setup();
  for (auto _ : state) benchmark::DoNotOptimize(build_feature_cache(s.w, s.d, exec_of(state)));
}

void BM_GenerateLabels(benchmark::State& state) {
  const Setup& s = setup();
  Dataset small = s.d;
  small.records.resize(16);
  TrainConfig t;
  t.exec = exec_of(state);
  for (auto _ : state) benchmark::DoNotOptimize(generate_labels(s.w, small, t));
}

void BM_Stage1Gradient(benchmark::State& state) {
  const Setup& s = setup();
  TrainConfig t;
  t.exec = exec_of(state);
  std::vector<std::size_t> score(64), proposal;
  for (std::size_t i = 0; i < score.size(); ++i) score[i] = i;
  for (std::size_t i = 0; i < s.d.records.size() && proposal.size() < 32; ++i)
    if (s.d.records[i].success) proposal.push_back(i);
  ModelWeights grad = zeros_like(s.w);
  for (auto _ : state)
    benchmark::DoNotOptimize(stage1_batch_loss(s.w, s.d, s.cache, score, proposal, t, {1, 3}, false, &grad));
}

}  // namespace

BENCHMARK(BM_EvaluateCandidates)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_CollectOffline)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_FeatureCache)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GenerateLabels)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Stage1Gradient)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
