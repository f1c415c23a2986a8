#include "supportaff/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "supportaff/config.hpp"
#include "supportaff/errors.hpp"

namespace supportaff {

namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string hex(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<TaskType> parse_tasks(const std::string& s) {
  if (s == "all") return {std::begin(kAllTasks), std::end(kAllTasks)};
  std::vector<TaskType> out;
  for (const auto& t : split(s)) out.push_back(parse_task(t));
  return out;
}

std::vector<Method> parse_methods(const std::string& s) {
  if (s == "all") return {std::begin(kAllMethods), std::end(kAllMethods)};
  std::vector<Method> out;
  for (const auto& m : split(s)) out.push_back(parse_method(m));
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

fs::path checkpoint_path(const fs::path& dir, TaskType t) { return dir / (std::string(to_string(t)) + ".ckpt"); }
fs::path dataset_path(const fs::path& dir, TaskType t) { return dir / (std::string(to_string(t)) + ".dataset"); }

/// Loaded weights, offline store and cache of one task.
struct LoadedTask {
  ModelWeights weights;
  Dataset offline;
  FeatureCache cache;
  PolicyAssets assets() const { return {&weights, &offline, &cache}; }
};

std::unique_ptr<LoadedTask> load_task(const fs::path& dir, TaskType t, Exec exec) {
  if (!fs::exists(checkpoint_path(dir, t)))
    throw InvalidState("missing checkpoint " + checkpoint_path(dir, t).string());
  auto lt = std::make_unique<LoadedTask>();
  lt->weights = load_checkpoint(checkpoint_path(dir, t));
  lt->offline = load_dataset(dataset_path(dir, t));
  lt->cache = build_feature_cache(lt->weights, lt->offline, exec);
  return lt;
}

/// Options every subcommand shares.
struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  bool parallel = false;

  void add(CLI::App* app) {
    app->add_option("--config", config_file, "flat key = value config file");
    app->add_option("--set", sets, "override one key, e.g. --set train.lr=0.0005")->take_all();
    app->add_flag("--parallel", parallel, "use every OpenMP thread (results are then not bit-exact)");
  }

  RunConfig resolve(std::ostream& out) const {
    RunConfig c;
    c.sync();
    if (!config_file.empty()) apply_config_file(c, config_file);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
      apply_setting(c, s.substr(0, eq), s.substr(eq + 1));
    }
    c.train.exec = c.collect.exec = exec();
    c.sync();
    c.validate();
    out << "config_hash " << hex(config_hash(c)) << "\n";
    return c;
  }
  Exec exec() const { return parallel ? Exec::Parallel : Exec::Serial; }
};

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Support-affordance learning on a synthetic assembly micro-world"};
  app.require_subcommand(1);

  // collect
  Common collect_common;
  std::string collect_task, collect_out, collect_model_dir;
  std::uint64_t collect_seed = 0;
  std::optional<int> collect_n;
  bool collect_online_flag = false;
  auto* collect = app.add_subcommand("collect", "collect an offline (or, with --online, policy) dataset");
  collect->add_option("--task", collect_task, "screw, push, pull or pick")->required();
  collect->add_option("--out", collect_out, "dataset file to write")->required();
  collect->add_option("--n", collect_n, "number of records (collect.n)");
  collect->add_option("--seed", collect_seed, "collection seed");
  collect->add_flag("--online", collect_online_flag, "drive episodes with the trained policy");
  collect->add_option("--model-dir", collect_model_dir, "directory with <task>.ckpt and <task>.dataset (for --online)");
  collect_common.add(collect);

  // train
  Common train_common;
  std::string train_dataset, train_out, train_log;
  auto* train_cmd = app.add_subcommand("train", "train a model on one dataset");
  train_cmd->add_option("--dataset", train_dataset, "dataset file")->required();
  train_cmd->add_option("--out", train_out, "checkpoint to write")->required();
  train_cmd->add_option("--log", train_log, "training log (one JSON object per line)");
  train_common.add(train_cmd);

  // eval
  Common eval_common;
  std::string eval_methods = "all", eval_tasks = "all", eval_model_dir, eval_report, eval_results, eval_seeds;
  std::optional<int> eval_episodes;
  auto* eval = app.add_subcommand("eval", "paired closed-loop evaluation");
  eval->add_option("--methods", eval_methods, "comma list or 'all'");
  eval->add_option("--tasks", eval_tasks, "comma list or 'all'");
  eval->add_option("--episodes", eval_episodes, "episodes per seed (eval.episodes)");
  eval->add_option("--seeds", eval_seeds, "comma list (eval.seeds)");
  eval->add_option("--model-dir", eval_model_dir, "directory with <task>.ckpt and <task>.dataset");
  eval->add_option("--report", eval_report, "report file (JSON)")->required();
  eval->add_option("--results", eval_results, "per-episode results (JSON lines)");
  eval_common.add(eval);

  // adapt-demo
  Common demo_common;
  std::string demo_task, demo_model_dir;
  std::uint64_t demo_seed = 0;
  int demo_episode = 0;
  auto* demo = app.add_subcommand("adapt-demo", "one closed-loop episode with per-round logging");
  demo->add_option("--task", demo_task, "task type")->required();
  demo->add_option("--model-dir", demo_model_dir, "directory with <task>.ckpt and <task>.dataset")->required();
  demo->add_option("--scene-seed", demo_seed, "evaluation seed of the scene");
  demo->add_option("--episode", demo_episode, "episode index within the seed");
  demo_common.add(demo);

  // heatmap
  Common heat_common;
  std::string heat_ckpt, heat_task = "screw", heat_out, heat_context = "off";
  std::uint64_t heat_seed = 0;
  int heat_episode = 0;
  auto* heat = app.add_subcommand("heatmap", "export a per-point affordance heatmap as ASCII PLY");
  heat->add_option("--checkpoint", heat_ckpt, "checkpoint file")->required();
  heat->add_option("--task", heat_task, "task type");
  heat->add_option("--scene-seed", heat_seed, "evaluation seed of the scene");
  heat->add_option("--episode", heat_episode, "episode index within the seed");
  heat->add_option("--context", heat_context, "on: condition on the frame of one failed policy round")
      ->check(CLI::IsMember({"on", "off"}));
  heat->add_option("--out", heat_out, "PLY file to write")->required();
  heat_common.add(heat);

  std::vector<std::string> args;
  for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    if (collect->parsed()) {
      RunConfig c = collect_common.resolve(out);
      if (collect_n) c.collect.n = *collect_n;
      const TaskType task = parse_task(collect_task);
      Dataset d;
      if (collect_online_flag) {
        if (collect_model_dir.empty()) throw UsageError("--online needs --model-dir");
        const auto lt = load_task(collect_model_dir, task, c.collect.exec);
        d = collect_online(lt->assets(), task, c.loop, c.collect.n, collect_seed);
      } else {
        d = collect_offline(task, c.env, c.collect, collect_seed, config_hash(c));
      }
      d.manifest.config_hash = config_hash(c);
      const std::uint64_t h = save_dataset(d, collect_out);
      out << "records " << d.records.size() << " positives " << d.positives() << " content_hash " << hex(h) << "\n";
    } else if (train_cmd->parsed()) {
      const RunConfig c = train_common.resolve(out);
      const Dataset d = load_dataset(train_dataset);
      std::ofstream log;
      if (!train_log.empty()) {
        log.open(train_log);
        if (!log) throw IoError("cannot write " + train_log);
      }
      const TrainResult r = train(d, ModelConfig{}, c.train, [&](const LogEntry& e) {
        if (log.is_open()) log << to_json_line(e) << "\n";
      });
      save_checkpoint(r.weights, train_out);
      out << "steps " << r.log.size() << " final_loss " << (r.log.empty() ? 0.0 : r.log.back().loss) << "\n";
    } else if (eval->parsed()) {
      RunConfig c = eval_common.resolve(out);
      EvalRequest req;
      req.methods = parse_methods(eval_methods);
      req.tasks = parse_tasks(eval_tasks);
      req.episodes = eval_episodes.value_or(c.eval_episodes);
      req.seeds = c.eval_seeds;
      if (!eval_seeds.empty()) {
        req.seeds.clear();
        for (const auto& s : split(eval_seeds)) req.seeds.push_back(std::stoull(s));
      }
      req.loop = c.loop;
      req.exec = eval_common.exec();
      std::vector<std::unique_ptr<LoadedTask>> loaded;
      std::vector<TaskAssets> assets;
      bool needs_model = false;
      for (Method m : req.methods) needs_model = needs_model || is_learned(m);
      if (needs_model) {
        if (eval_model_dir.empty()) throw InvalidState("learned methods need --model-dir");
        for (TaskType t : req.tasks) {
          loaded.push_back(load_task(eval_model_dir, t, eval_common.exec()));
          assets.push_back({t, loaded.back()->assets()});
        }
      }
      const EvalReport report = run_eval(req, assets);
      const std::string json = report_json(report);
      write_text(eval_report, json);
      if (!eval_results.empty()) write_text(eval_results, results_jsonl(report));
      for (const EvalRow& r : report.rows)
        out << to_string(r.task) << " " << to_string(r.method) << " " << r.successes << "/" << r.episodes << " "
            << r.success_rate << " rounds " << r.mean_rounds << "\n";
      out << "report_hash " << hex(fnv1a(json.data(), json.size())) << "\n";
    } else if (demo->parsed()) {
      RunConfig c = demo_common.resolve(out);
      const TaskType task = parse_task(demo_task);
      const auto lt = load_task(demo_model_dir, task, demo_common.exec());
      const SceneInstance scene = eval_scene(task, demo_seed, demo_episode, c.env);
      LoopConfig loop = c.loop;
      loop.method = Method::Ours;
      const SeedState rs =
          SeedState{demo_seed, 0xE7A1}.child(static_cast<std::uint64_t>(task)).child(static_cast<std::uint64_t>(demo_episode)).child(1);
      const EpisodeRun run = run_episode_closed_loop(lt->assets(), scene, loop, rs);
      for (std::size_t k = 0; k < run.rounds.size(); ++k) {
        const RoundLog& l = run.rounds[k];
        out << "round " << k + 1 << " p_sp " << l.action.p_sp << " d " << l.action.direction.transpose() << " score "
            << l.score << " m " << l.m << (l.success ? " success" : " fail");
        if (k < run.adapt_stats.size()) out << " adapt_steps " << run.adapt_stats[k].steps;
        out << "\n";
      }
      out << (run.result.success ? "episode succeeded" : "episode failed") << " after " << run.rounds.size()
          << " rounds\n";
    } else if (heat->parsed()) {
      RunConfig c = heat_common.resolve(out);
      const TaskType task = parse_task(heat_task);
      const ModelWeights w = load_checkpoint(heat_ckpt);
      SceneInstance scene = eval_scene(task, heat_seed, heat_episode, c.env);
      std::vector<ContextFrame> frames;
      if (heat_context == "on") {
        // One policy round without adaptation supplies the frame.
        LoopConfig loop = c.loop;
        loop.method = Method::Ours;
        loop.adapt = false;
        loop.max_rounds = 1;
        const EpisodeRun run = run_episode_closed_loop({&w, nullptr, nullptr}, scene, loop, SeedState{heat_seed, 0x4EA7});
        if (run.result.success || run.rounds[0].m < scene.physics.epsilon) {
          out << "first round succeeded; no context frame to condition on\n";
        } else {
          const RoundOutcome round = run_round(scene, run.rounds[0].action);
          frames.push_back({scene.cloud, run.rounds[0].action, round.last.displacement});
          if (!c.env.restore_after_failure) scene = round.scene;
        }
      }
      export_heatmap(w, scene, frames, heat_out);
      const nn::Vec a = heatmap_scores(w, scene, frames);
      out << "points " << a.size() << " entropy "
          << normalized_entropy(std::span<const double>(a.data(), static_cast<std::size_t>(a.size()))) << "\n";
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const InvalidArgument& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace supportaff
