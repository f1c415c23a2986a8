#include "supportaff/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "supportaff/errors.hpp"

namespace supportaff {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(std::string_view key, std::string_view text) {
  const std::string t = trim(text);
  T v{};
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty())
    throw InvalidArgument("config: bad value for " + std::string(key) + ": '" + std::string(text) + "'");
  return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1" || t == "on") return true;
  if (t == "false" || t == "0" || t == "off") return false;
  throw InvalidArgument("config: bad boolean for " + std::string(key) + ": '" + t + "'");
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Entry {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

template <class T, class F>
Entry number(std::string key, F field) {
  return {key,
          [field](const RunConfig& c) {
            const T v = field(const_cast<RunConfig&>(c));
            if constexpr (std::is_floating_point_v<T>)
              return format_double(v);
            else
              return std::to_string(v);
          },
          [field, key](RunConfig& c, std::string_view text) { field(c) = parse_number<T>(key, text); }};
}

const std::vector<Entry>& table() {
  static const std::vector<Entry> entries = [] {
    std::vector<Entry> e;
    e.push_back(number<int>("env.n_points", [](RunConfig& c) -> int& { return c.env.n_points; }));
    e.push_back(number<int>("env.steps_to_goal", [](RunConfig& c) -> int& { return c.env.steps_to_goal; }));
    e.push_back(number<double>("env.random_perturb_deg", [](RunConfig& c) -> double& { return c.env.random_perturb_deg; }));
    e.push_back(number<double>("env.heuristic_perturb_deg",
                               [](RunConfig& c) -> double& { return c.env.heuristic_perturb_deg; }));
    e.push_back(number<int>("env.feasibility_retries", [](RunConfig& c) -> int& { return c.env.feasibility_retries; }));
    e.push_back({"env.restore_after_failure",
                 [](const RunConfig& c) { return std::string(c.env.restore_after_failure ? "true" : "false"); },
                 [](RunConfig& c, std::string_view v) {
                   c.env.restore_after_failure = parse_bool("env.restore_after_failure", v);
                 }});

    e.push_back(number<double>("physics.resist_force", [](RunConfig& c) -> double& { return c.env.physics.resist_force; }));
    e.push_back(number<double>("physics.resist_torque", [](RunConfig& c) -> double& { return c.env.physics.resist_torque; }));
    e.push_back(number<double>("physics.support_force", [](RunConfig& c) -> double& { return c.env.physics.support_force; }));
    e.push_back(number<double>("physics.cone_angle", [](RunConfig& c) -> double& { return c.env.physics.cone_angle; }));
    e.push_back(number<double>("physics.gain_force", [](RunConfig& c) -> double& { return c.env.physics.gain_force; }));
    e.push_back(number<double>("physics.gain_torque", [](RunConfig& c) -> double& { return c.env.physics.gain_torque; }));
    e.push_back(number<double>("physics.epsilon", [](RunConfig& c) -> double& { return c.env.physics.epsilon; }));
    e.push_back(number<double>("physics.rot_weight", [](RunConfig& c) -> double& { return c.env.physics.rot_weight; }));

    e.push_back(number<double>("train.alpha", [](RunConfig& c) -> double& { return c.train.alpha; }));
    e.push_back(number<double>("train.beta", [](RunConfig& c) -> double& { return c.train.beta; }));
    e.push_back(number<double>("train.lambda_dir", [](RunConfig& c) -> double& { return c.train.lambda_dir; }));
    e.push_back(number<double>("train.lambda_kl", [](RunConfig& c) -> double& { return c.train.lambda_kl; }));
    e.push_back(number<double>("train.lr", [](RunConfig& c) -> double& { return c.train.lr; }));
    e.push_back(number<double>("train.weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; }));
    e.push_back(number<double>("train.decay", [](RunConfig& c) -> double& { return c.train.decay; }));
    e.push_back(number<int>("train.decay_every", [](RunConfig& c) -> int& { return c.train.decay_every; }));
    e.push_back(number<int>("train.batch", [](RunConfig& c) -> int& { return c.train.batch; }));
    e.push_back(number<double>("train.lr_floor", [](RunConfig& c) -> double& { return c.train.lr_floor; }));
    e.push_back(number<int>("train.n_dirs", [](RunConfig& c) -> int& { return c.train.n_dirs; }));
    e.push_back(number<int>("train.k_avg", [](RunConfig& c) -> int& { return c.train.k_avg; }));
    e.push_back(number<int>("train.stage1_steps", [](RunConfig& c) -> int& { return c.train.stage1_steps; }));
    e.push_back(number<int>("train.stage2_steps", [](RunConfig& c) -> int& { return c.train.stage2_steps; }));
    e.push_back(number<int>("train.proposal_batch", [](RunConfig& c) -> int& { return c.train.proposal_batch; }));
    e.push_back(number<double>("train.positive_fraction", [](RunConfig& c) -> double& { return c.train.positive_fraction; }));
    e.push_back({"train.affordance_balanced",
                 [](const RunConfig& c) { return std::string(c.train.affordance_balanced ? "true" : "false"); },
                 [](RunConfig& c, std::string_view v) {
                   c.train.affordance_balanced = parse_bool("train.affordance_balanced", v);
                 }});
    e.push_back({"train.proposal_positives_only",
                 [](const RunConfig& c) { return std::string(c.train.proposal_positives_only ? "true" : "false"); },
                 [](RunConfig& c, std::string_view v) {
                   c.train.proposal_positives_only = parse_bool("train.proposal_positives_only", v);
                 }});
    e.push_back(number<int>("train.label_points", [](RunConfig& c) -> int& { return c.train.label_points; }));
    e.push_back(number<int>("train.adapt_steps", [](RunConfig& c) -> int& { return c.train.adapt_steps; }));
    e.push_back(number<int>("train.adapt_online", [](RunConfig& c) -> int& { return c.train.adapt_online; }));
    e.push_back(number<int>("train.adapt_offline", [](RunConfig& c) -> int& { return c.train.adapt_offline; }));
    e.push_back(number<double>("train.adapt_lr", [](RunConfig& c) -> double& { return c.train.adapt_lr; }));
    e.push_back(number<std::uint64_t>("train.seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; }));

    e.push_back(number<int>("collect.n", [](RunConfig& c) -> int& { return c.collect.n; }));
    e.push_back(number<double>("collect.mix", [](RunConfig& c) -> double& { return c.collect.mix; }));
    e.push_back(number<int>("collect.k_max", [](RunConfig& c) -> int& { return c.collect.k_max; }));

    e.push_back(number<int>("eval.max_rounds", [](RunConfig& c) -> int& { return c.loop.max_rounds; }));
    e.push_back(number<int>("eval.top_k", [](RunConfig& c) -> int& { return c.loop.top_k; }));
    e.push_back(number<int>("eval.n_dirs", [](RunConfig& c) -> int& { return c.loop.n_dirs; }));
    e.push_back(number<int>("eval.episodes", [](RunConfig& c) -> int& { return c.eval_episodes; }));
    e.push_back({"eval.adapt", [](const RunConfig& c) { return std::string(c.loop.adapt ? "true" : "false"); },
                 [](RunConfig& c, std::string_view v) { c.loop.adapt = parse_bool("eval.adapt", v); }});
    e.push_back({"eval.seeds",
                 [](const RunConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.eval_seeds.size(); ++i) s += (i ? "," : "") + std::to_string(c.eval_seeds[i]);
                   return s;
                 },
                 [](RunConfig& c, std::string_view v) {
                   std::vector<std::uint64_t> seeds;
                   std::string item;
                   std::istringstream in{std::string(v)};
                   while (std::getline(in, item, ',')) seeds.push_back(parse_number<std::uint64_t>("eval.seeds", item));
                   if (seeds.empty()) throw InvalidArgument("config: eval.seeds is empty");
                   c.eval_seeds = std::move(seeds);
                 }});
    std::sort(e.begin(), e.end(), [](const Entry& a, const Entry& b) { return a.key < b.key; });
    return e;
  }();
  return entries;
}

}  // namespace

void RunConfig::sync() {
  loop.env = env;
  loop.train = train;
  collect.alpha = train.alpha;
  collect.beta = train.beta;
}

void RunConfig::validate() const {
  env.physics.validate();
  if (env.n_points < 1 || env.steps_to_goal < 1) throw InvalidArgument("config: env sizes must be positive");
  train.validate();
  collect.validate();
  loop.validate();
  if (eval_episodes < 1) throw InvalidArgument("config: eval.episodes must be >= 1");
}

void apply_setting(RunConfig& config, std::string_view key, std::string_view value) {
  const std::string k = trim(key);
  for (const Entry& e : table()) {
    if (e.key == k) {
      e.set(config, value);
      config.sync();
      return;
    }
  }
  throw InvalidArgument("config: unknown key '" + k + "'");
}

void apply_config_text(RunConfig& config, std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw InvalidArgument("config line " + std::to_string(number) + ": expected key = value");
    apply_setting(config, t.substr(0, eq), t.substr(eq + 1));
  }
}

void apply_config_file(RunConfig& config, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(config, ss.str());
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const Entry& e : table()) keys.push_back(e.key);
  return keys;
}

std::string canonical_config(const RunConfig& config) {
  std::string out;
  for (const Entry& e : table()) out += e.key + "=" + e.get(config) + "\n";
  return out;
}

std::uint64_t config_hash(const RunConfig& config) {
  const std::string s = canonical_config(config);
  return fnv1a(s.data(), s.size());
}

}  // namespace supportaff
