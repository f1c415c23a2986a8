#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "supportaff/data.hpp"
#include "supportaff/learning.hpp"

namespace supportaff {

enum class Method : std::uint8_t { Ours, Random, Heuristic, NoTopK, NoAdapt };

inline constexpr Method kAllMethods[] = {Method::Ours, Method::Random, Method::Heuristic, Method::NoTopK,
                                         Method::NoAdapt};

std::string_view to_string(Method m);
Method parse_method(std::string_view name);  // throws InvalidArgument
bool is_learned(Method m);

/// What a learned method needs: trained weights plus the offline store that
/// adaptation mixes into its batches.
struct PolicyAssets {
  const ModelWeights* weights = nullptr;
  const Dataset* offline = nullptr;
  const FeatureCache* offline_cache = nullptr;  // build_feature_cache(*weights, *offline)
};

struct LoopConfig {
  Method method = Method::Ours;
  int max_rounds = 3;
  int top_k = 10;
  int n_dirs = 100;
  bool adapt = true;  // Ours and NoTopK call adapt_update between rounds when set
  EnvConfig env;       // baseline perturbation caps
  TrainConfig train;   // adaptation batch sizes and rate
  void validate() const;
};

struct RoundLog {
  SupportAction action;
  double m = 0.0;   // displacement of the round's final step
  bool success = false;
  double score = 0.0;  // predicted score of the chosen action; 0 for baselines
};

struct EpisodeRun {
  EpisodeResult result;        // of the last round
  std::vector<RoundLog> rounds;
  Dataset records;             // one record per round, source Policy for learned methods
  std::vector<nn::Vec> f_I;    // context feature used in each round (learned methods)
  std::vector<nn::Vec> affordance;  // per-point map each round selected from (learned methods)
  std::vector<AdaptStats> adapt_stats;
  std::uint64_t scene_hash = 0;  // of the initial scene
};

/// Closed loop: predict, execute one round, and on failure append
/// the frame (observation, action, displacement) and re-predict on the new
/// observation. Stops at success or after max_rounds.
EpisodeRun run_episode_closed_loop(const PolicyAssets& assets, const SceneInstance& scene, const LoopConfig& config,
                                   SeedState seed);

/// Episodes driven by the learned policy until exactly n records exist.
Dataset collect_online(const PolicyAssets& assets, TaskType task, const LoopConfig& config, int n,
                       std::uint64_t seed);

// ---------------------------------------------------------------------------
// Evaluation

/// Initial scene of a paired evaluation episode; every method sees it.
SceneInstance eval_scene(TaskType task, std::uint64_t seed, int episode, const EnvConfig& env);

struct EvalRequest {
  std::vector<Method> methods;
  std::vector<TaskType> tasks;
  int episodes = 100;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  LoopConfig loop;  // method is overridden per row
  Exec exec = Exec::Serial;
  void validate() const;
};

struct EvalRow {
  TaskType task = TaskType::Screw;
  Method method = Method::Ours;
  int episodes = 0;
  int successes = 0;
  double success_rate = 0.0;  // successes / episodes
  double mean_rounds = 0.0;
  std::vector<std::uint64_t> seeds;
};

struct EpisodeLine {
  TaskType task = TaskType::Screw;
  Method method = Method::Ours;
  std::uint64_t seed = 0;
  int episode = 0;
  std::uint64_t scene_hash = 0;
  bool success = false;
  std::vector<double> m;  // per round
};

struct EvalReport {
  std::vector<EvalRow> rows;  // tasks outer, methods inner
  std::vector<EpisodeLine> episodes;
  const EvalRow& row(TaskType task, Method method) const;
};

/// Assets per task for the learned methods; may be left empty for baselines.
struct TaskAssets {
  TaskType task = TaskType::Screw;
  PolicyAssets assets;
};

/// Throws InvalidState when a learned method lacks assets for a task.
EvalReport run_eval(const EvalRequest& request, std::span<const TaskAssets> assets);

std::string report_json(const EvalReport& report);
std::string results_jsonl(const EvalReport& report);

// ---------------------------------------------------------------------------
// Heatmaps

/// Affordance of every point; context frames, when given, condition it.
nn::Vec heatmap_scores(const ModelWeights& w, const SceneInstance& scene, std::span<const ContextFrame> context);

/// ASCII PLY: x y z nx ny nz affordance per point. Throws IoError.
void export_heatmap(const ModelWeights& w, const SceneInstance& scene, std::span<const ContextFrame> context,
                    const std::filesystem::path& path);

/// Entropy of the scores normalized to a distribution, divided by log N; in
/// [0, 1], lower means more concentrated.
double normalized_entropy(std::span<const double> scores);

}  // namespace supportaff
