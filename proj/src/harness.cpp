#include "supportaff/harness.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "json.hpp"
#include "supportaff/errors.hpp"

namespace supportaff {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

}  // namespace

std::string_view to_string(Method m) {
  switch (m) {
    case Method::Ours: return "ours";
    case Method::Random: return "random";
    case Method::Heuristic: return "heuristic";
    case Method::NoTopK: return "ours-notopk";
    case Method::NoAdapt: return "ours-noadapt";
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  for (Method m : kAllMethods)
    if (to_string(m) == name) return m;
  throw InvalidArgument("unknown method: " + std::string(name));
}

bool is_learned(Method m) { return m != Method::Random && m != Method::Heuristic; }

void LoopConfig::validate() const {
  if (max_rounds < 1) throw InvalidArgument("loop: max_rounds must be >= 1");
  if (top_k < 1 || n_dirs < 1) throw InvalidArgument("loop: top_k and n_dirs must be >= 1");
  train.validate();
}

// ---------------------------------------------------------------------------
// Closed loop

EpisodeRun run_episode_closed_loop(const PolicyAssets& assets, const SceneInstance& initial, const LoopConfig& config,
                                   SeedState seed) {
  config.validate();
  const bool learned = is_learned(config.method);
  if (learned && !assets.weights) throw InvalidState("closed loop: a learned method needs weights");
  // NoTopK is Ours with a single candidate point.
  const int K = config.method == Method::NoTopK ? 1 : config.top_k;
  const bool adapt = config.adapt && (config.method == Method::Ours || config.method == Method::NoTopK);
  if (adapt && (!assets.offline || !assets.offline_cache))
    throw InvalidState("closed loop: adaptation needs the offline store and its feature cache");

  EpisodeRun run;
  run.scene_hash = scene_hash(initial);
  run.records.manifest.task = initial.task;
  run.records.manifest.alpha = quantize(config.train.alpha);
  run.records.manifest.beta = quantize(config.train.beta);
  run.records.manifest.epsilon = initial.physics.epsilon;

  // Adapted weights live only for this episode.
  std::optional<ModelWeights> adapted;
  OnlineStore online;
  std::vector<ContextFrame> frames;
  std::vector<std::uint32_t> frame_records;
  SceneInstance scene = initial;

  for (int round = 0; round < config.max_rounds; ++round) {
    const SeedState rs = seed.child(static_cast<std::uint64_t>(round));
    SupportAction action;
    double score = 0.0;
    std::optional<HierarchyPlan> plan;
    if (learned) {
      const ModelWeights& w = adapted ? *adapted : *assets.weights;
      plan = plan_hierarchy(scene.cloud, w.config.encoder);
      const nn::Vec f_I =
          config.method == Method::NoAdapt ? nn::Vec(w.context.no_context.col(0)) : context_feature(w, frames);
      const nn::Vec aff = predict_affordance(w, *plan, scene.p_op, f_I);
      const Selection sel =
          select_best(w, *plan, scene.p_op, f_I, std::span<const double>(aff.data(), static_cast<std::size_t>(aff.size())),
                      K, config.n_dirs, rs.child(0));
      action = sel.action;
      score = sel.score;
      run.f_I.push_back(f_I);
      run.affordance.push_back(aff);
    } else if (config.method == Method::Random) {
      action = random_support(scene, rs.child(0), config.env.random_perturb_deg * kDeg);
    } else {
      action = heuristic_support(scene, rs.child(0), config.env.heuristic_perturb_deg * kDeg);
    }

    const RoundOutcome out = run_round(scene, action);
    const StepOutcome& last = out.last;
    run.rounds.push_back({action, last.displacement.m, out.result.success, score});
    run.result = out.result;

    InteractionRecord rec;
    rec.scene_id = static_cast<std::uint32_t>(run.records.scenes.size());
    rec.p_op = scene.p_op;
    rec.action = action;
    rec.displacement = last.displacement;
    rec.g_d = last.displacement.m / (2.0 * scene.physics.epsilon);
    rec.g_c = 1.0 - last.goal_delta;
    rec.success = out.result.success;
    rec.step = round;
    rec.source = learned ? Source::Policy : (config.method == Method::Random ? Source::Random : Source::Heuristic);
    rec.context = frame_records;
    run.records.scenes.push_back(scene);
    run.records.records.push_back(rec);
    if (out.result.success) break;

    // Only unsupported attempts become context frames.
    if (last.displacement.m >= scene.physics.epsilon) {
      frames.push_back({scene.cloud, action, last.displacement});
      frame_records.push_back(static_cast<std::uint32_t>(run.records.records.size() - 1));
    }
    if (adapt && round + 1 < config.max_rounds) {
      // Cloud encoders never adapt, so features from the trained weights stay valid.
      online.data.manifest = run.records.manifest;
      online.data.scenes = run.records.scenes;
      online.data.records = run.records.records;
      finalize_dataset(online.data);
      online.cache.records.push_back(record_features(*assets.weights, *plan, rec.p_op, rec.action.p_sp, true));
      AdaptStats stats;
      adapted = adapt_update(adapted ? *adapted : *assets.weights, online, *assets.offline, *assets.offline_cache,
                             config.train, rs.child(1), &stats);
      run.adapt_stats.push_back(std::move(stats));
    }
    if (!config.env.restore_after_failure) scene = out.scene;
  }
  finalize_dataset(run.records);
  return run;
}

Dataset collect_online(const PolicyAssets& assets, TaskType task, const LoopConfig& config, int n,
                       std::uint64_t seed) {
  if (n < 1) throw InvalidArgument("collect_online: n must be >= 1");
  if (!is_learned(config.method)) throw InvalidArgument("collect_online: needs a learned method");
  const SeedState ns{seed, 0x0A11};
  Dataset d;
  d.manifest.task = task;
  d.manifest.seed = seed;
  d.manifest.alpha = quantize(config.train.alpha);
  d.manifest.beta = quantize(config.train.beta);
  d.manifest.epsilon = quantize(config.env.physics.epsilon);
  for (std::uint32_t e = 0; d.records.size() < static_cast<std::size_t>(n); ++e) {
    const SeedState es = ns.child(e);
    const SceneInstance scene = quantize(generate_scene(task, es.child(0), config.env.n_points, config.env));
    EpisodeRun run = run_episode_closed_loop(assets, scene, config, es.child(1));
    // Round the rollout through float like offline collection so files round-trip.
    for (auto& s : run.records.scenes) s = quantize(s);
    for (auto& r : run.records.records) {
      for (int i = 0; i < 3; ++i) {
        r.action.direction[i] = quantize(r.action.direction[i]);
        r.displacement.translation[i] = quantize(r.displacement.translation[i]);
        r.displacement.rotation[i] = quantize(r.displacement.rotation[i]);
      }
      r.displacement.m = quantize(r.displacement.m);
      r.g_d = quantize(r.g_d);
      r.g_c = quantize(r.g_c);
    }
    const auto scene_base = static_cast<std::uint32_t>(d.scenes.size());
    const auto record_base = static_cast<std::uint32_t>(d.records.size());
    for (auto& s : run.records.scenes) d.scenes.push_back(std::move(s));
    for (auto& r : run.records.records) {
      if (d.records.size() == static_cast<std::size_t>(n)) break;
      r.scene_id += scene_base;
      r.episode = e;
      for (auto& c : r.context) c += record_base;
      d.records.push_back(std::move(r));
    }
  }
  finalize_dataset(d);
  validate_dataset(d);
  return d;
}

// ---------------------------------------------------------------------------
// Evaluation

SceneInstance eval_scene(TaskType task, std::uint64_t seed, int episode, const EnvConfig& env) {
  const SeedState s = SeedState{seed, 0xE7A1}.child(static_cast<std::uint64_t>(task)).child(static_cast<std::uint64_t>(episode));
  return quantize(generate_scene(task, s.child(0), env.n_points, env));
}

void EvalRequest::validate() const {
  if (methods.empty() || tasks.empty()) throw InvalidArgument("eval: need at least one method and one task");
  if (episodes < 1) throw InvalidArgument("eval: episodes must be >= 1");
  if (seeds.empty()) throw InvalidArgument("eval: need at least one seed");
  loop.validate();
}

const EvalRow& EvalReport::row(TaskType task, Method method) const {
  for (const EvalRow& r : rows)
    if (r.task == task && r.method == method) return r;
  throw InvalidArgument("eval report has no row for " + std::string(to_string(task)) + "/" +
                        std::string(to_string(method)));
}

EvalReport run_eval(const EvalRequest& request, std::span<const TaskAssets> assets) {
  request.validate();
  const auto find_assets = [&](TaskType t) -> const PolicyAssets* {
    for (const TaskAssets& a : assets)
      if (a.task == t) return &a.assets;
    return nullptr;
  };
  for (TaskType t : request.tasks)
    for (Method m : request.methods)
      if (is_learned(m)) {
        const PolicyAssets* a = find_assets(t);
        if (!a || !a->weights) throw InvalidState("eval: no checkpoint for " + std::string(to_string(t)));
      }

  EvalReport report;
  const int per_seed = request.episodes;
  const int total = per_seed * static_cast<int>(request.seeds.size());
  for (TaskType task : request.tasks) {
    // Scenes are built once so every method sees identical ones.
    std::vector<SceneInstance> scenes(static_cast<std::size_t>(total));
    for (int i = 0; i < total; ++i)
      scenes[static_cast<std::size_t>(i)] =
          eval_scene(task, request.seeds[static_cast<std::size_t>(i / per_seed)], i % per_seed, request.loop.env);
    const PolicyAssets* pa = find_assets(task);
    for (Method method : request.methods) {
      LoopConfig loop = request.loop;
      loop.method = method;
      loop.train.exec = Exec::Serial;  // parallelism lives at the episode level
      std::vector<EpisodeRun> runs(static_cast<std::size_t>(total));
#pragma omp parallel for schedule(dynamic, 1) if (request.exec == Exec::Parallel)
      for (int i = 0; i < total; ++i) {
        const std::uint64_t seed = request.seeds[static_cast<std::size_t>(i / per_seed)];
        const SeedState rs = SeedState{seed, 0xE7A1}
                                 .child(static_cast<std::uint64_t>(task))
                                 .child(static_cast<std::uint64_t>(i % per_seed))
                                 .child(1);
        runs[static_cast<std::size_t>(i)] =
            run_episode_closed_loop(pa ? *pa : PolicyAssets{}, scenes[static_cast<std::size_t>(i)], loop, rs);
      }
      EvalRow row{task, method, total, 0, 0.0, 0.0, request.seeds};
      long rounds = 0;
      for (int i = 0; i < total; ++i) {
        const EpisodeRun& r = runs[static_cast<std::size_t>(i)];
        row.successes += r.result.success;
        rounds += static_cast<long>(r.rounds.size());
        EpisodeLine line{task, method, request.seeds[static_cast<std::size_t>(i / per_seed)], i % per_seed,
                         r.scene_hash, r.result.success, {}};
        for (const RoundLog& l : r.rounds) line.m.push_back(l.m);
        report.episodes.push_back(std::move(line));
      }
      row.success_rate = static_cast<double>(row.successes) / total;
      row.mean_rounds = static_cast<double>(rounds) / total;
      report.rows.push_back(row);
    }
  }
  return report;
}

std::string report_json(const EvalReport& report) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const EvalRow& r : report.rows) {
    nlohmann::ordered_json j;
    j["task"] = to_string(r.task);
    j["method"] = to_string(r.method);
    j["episodes"] = r.episodes;
    j["successes"] = r.successes;
    j["success_rate"] = r.success_rate;
    j["mean_rounds"] = r.mean_rounds;
    j["seeds"] = r.seeds;
    rows.push_back(std::move(j));
  }
  nlohmann::ordered_json out;
  out["rows"] = std::move(rows);
  return out.dump(2) + "\n";
}

std::string results_jsonl(const EvalReport& report) {
  std::string out;
  for (const EpisodeLine& e : report.episodes) {
    nlohmann::ordered_json j;
    j["method"] = to_string(e.method);
    j["task"] = to_string(e.task);
    j["seed"] = e.seed;
    j["episode"] = e.episode;
    j["scene_hash"] = e.scene_hash;
    j["success"] = e.success;
    j["rounds"] = e.m.size();
    j["m"] = e.m;
    out += j.dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Heatmaps

nn::Vec heatmap_scores(const ModelWeights& w, const SceneInstance& scene, std::span<const ContextFrame> context) {
  const HierarchyPlan plan = plan_hierarchy(scene.cloud, w.config.encoder);
  return predict_affordance(w, plan, scene.p_op, context_feature(w, context));
}

void export_heatmap(const ModelWeights& w, const SceneInstance& scene, std::span<const ContextFrame> context,
                    const std::filesystem::path& path) {
  const nn::Vec a = heatmap_scores(w, scene, context);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write heatmap: " + path.string());
  const int n = scene.cloud.size();
  out << "ply\nformat ascii 1.0\nelement vertex " << n
      << "\nproperty float x\nproperty float y\nproperty float z\n"
         "property float nx\nproperty float ny\nproperty float nz\n"
         "property float affordance\nend_header\n";
  out.precision(7);
  for (int i = 0; i < n; ++i) {
    const Vec3 p = scene.cloud.positions.col(i), q = scene.cloud.normals.col(i);
    out << p.x() << ' ' << p.y() << ' ' << p.z() << ' ' << q.x() << ' ' << q.y() << ' ' << q.z() << ' ' << a(i)
        << '\n';
  }
  out.flush();
  if (!out) throw IoError("failed writing heatmap: " + path.string());
}

double normalized_entropy(std::span<const double> scores) {
  if (scores.size() < 2) throw InvalidArgument("normalized_entropy: need at least two scores");
  double sum = 0.0;
  for (double s : scores) {
    if (!(s >= 0.0)) throw InvalidArgument("normalized_entropy: scores must be non-negative");
    sum += s;
  }
  if (sum <= 0.0) return 1.0;  // all-zero maps carry no preference
  double h = 0.0;
  for (double s : scores)
    if (s > 0.0) h -= (s / sum) * std::log(s / sum);
  return h / std::log(static_cast<double>(scores.size()));
}

}  // namespace supportaff
