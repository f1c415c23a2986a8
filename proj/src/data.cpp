#include "supportaff/data.hpp"

#include <omp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <string>

#include "supportaff/errors.hpp"

namespace supportaff {

namespace fs = std::filesystem;

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a(bytes.data(), bytes.size());
}

double gt_score(double g_d, double g_c, double alpha, double beta) {
  return std::clamp(1.0 - (alpha * g_d + beta * g_c), 0.0, 1.0);
}

// The volatile keeps GCC 11's SLP vectorizer from folding the
// double -> float -> double pair into a no-op.
double quantize(double x) {
  volatile float f = static_cast<float>(x);
  return f;
}

namespace {

Vec3 quantize3(const Vec3& v) { return Vec3(quantize(v.x()), quantize(v.y()), quantize(v.z())); }

void quantize_matrix(Eigen::Matrix3Xd& m) {
  for (double& x : m.reshaped()) x = quantize(x);
}

}  // namespace

SceneInstance quantize(const SceneInstance& scene) {
  SceneInstance q = scene;
  quantize_matrix(q.cloud.positions);
  quantize_matrix(q.cloud.normals);
  for (Vec3* v : {&q.base_pose.translation, &q.op_wrench.force, &q.op_wrench.torque})
    for (int i = 0; i < 3; ++i) (*v)[i] = quantize((*v)[i]);
  for (int i = 0; i < 4; ++i) q.base_pose.rotation.coeffs()[i] = quantize(q.base_pose.rotation.coeffs()[i]);
  PhysicsParams& ph = q.physics;
  for (double* v : {&ph.resist_force, &ph.resist_torque, &ph.support_force, &ph.cone_angle, &ph.gain_force,
                    &ph.gain_torque, &ph.epsilon, &ph.rot_weight})
    *v = quantize(*v);
  q.goal_progress = quantize(q.goal_progress);
  return q;
}

std::size_t Dataset::positives() const {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [](const auto& r) { return r.positive(); }));
}

void CollectConfig::validate() const {
  if (n < 1) throw InvalidArgument("collect: n must be >= 1");
  if (!(mix >= 0.0 && mix <= 1.0)) throw InvalidArgument("collect: mix must lie in [0, 1]");
  if (k_max < 1) throw InvalidArgument("collect: k_max must be >= 1");
  if (!(alpha >= 0.0 && beta >= 0.0)) throw InvalidArgument("collect: alpha and beta must be non-negative");
}

void finalize_dataset(Dataset& d) {
  d.manifest.counts = {};
  for (InteractionRecord& r : d.records) {
    r.r = gt_score(r.g_d, r.g_c, d.manifest.alpha, d.manifest.beta);
    ++d.manifest.counts[static_cast<std::size_t>(r.source)];
  }
}

void validate_dataset(const Dataset& d) {
  std::array<std::uint64_t, 3> counts{};
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    const InteractionRecord& r = d.records[i];
    if (r.scene_id >= d.scenes.size()) throw CorruptData("record references a missing scene");
    const SceneInstance& s = d.scenes[r.scene_id];
    if (r.p_op < 0 || r.p_op >= s.cloud.size() || r.action.p_sp < 0 || r.action.p_sp >= s.cloud.size())
      throw CorruptData("record point index out of range");
    std::int64_t prev = -1;
    for (std::uint32_t c : r.context) {
      if (c >= i || static_cast<std::int64_t>(c) <= prev || d.records[c].episode != r.episode ||
          d.records[c].step >= r.step)
        throw CorruptData("context frames must be earlier records of the same episode, oldest first");
      prev = c;
    }
    if (static_cast<std::size_t>(r.source) > 2) throw CorruptData("unknown sampling source");
    ++counts[static_cast<std::size_t>(r.source)];
  }
  if (counts != d.manifest.counts) throw CorruptData("manifest counts disagree with the records");
}

// ---------------------------------------------------------------------------
// Collection

Dataset collect_offline(TaskType task, const EnvConfig& env, const CollectConfig& config, std::uint64_t seed,
                        std::uint64_t config_hash) {
  config.validate();
  Dataset d;
  d.manifest.task = task;
  d.manifest.seed = seed;
  d.manifest.config_hash = config_hash;
  d.manifest.alpha = quantize(config.alpha);
  d.manifest.beta = quantize(config.beta);
  d.manifest.epsilon = quantize(env.physics.epsilon);

  const SeedState ns{seed, 0xC011};
  const double random_cap = env.random_perturb_deg * std::numbers::pi / 180.0;
  const double heuristic_cap = env.heuristic_perturb_deg * std::numbers::pi / 180.0;
  struct Episode {
    std::vector<SceneInstance> scenes;
    std::vector<InteractionRecord> records;
  };
  const auto run = [&](std::uint32_t e) {
    const SeedState es = ns.child(e);
    Episode ep;
    SceneInstance scene = quantize(generate_scene(task, es.child(0), env.n_points, env));
    std::vector<std::uint32_t> frames;
    for (int k = 0; k < config.k_max; ++k) {
      Rng pick(es.child(1).child(static_cast<std::uint64_t>(k)));
      const bool heuristic = pick.bernoulli(config.mix);
      const SeedState as = es.child(2).child(static_cast<std::uint64_t>(k));
      SupportAction u = heuristic ? heuristic_support(scene, as, heuristic_cap) : random_support(scene, as, random_cap);
      u.direction = quantize3(u.direction);
      const RoundOutcome round = run_round(scene, u);

      InteractionRecord rec;
      rec.scene_id = static_cast<std::uint32_t>(k);
      rec.p_op = scene.p_op;
      rec.action = u;
      // The round's final step decides it, so its displacement is the outcome.
      const StepOutcome& last = round.last;
      rec.displacement = {quantize(last.displacement.m), quantize3(last.displacement.translation),
                          quantize3(last.displacement.rotation)};
      rec.g_d = quantize(rec.displacement.m / (2.0 * scene.physics.epsilon));
      rec.g_c = quantize(1.0 - last.goal_delta);
      rec.success = round.result.success;
      rec.step = k;
      rec.episode = e;
      rec.source = heuristic ? Source::Heuristic : Source::Random;
      rec.context = frames;
      ep.scenes.push_back(scene);
      ep.records.push_back(std::move(rec));
      if (round.result.success) break;
      if (ep.records.back().displacement.m >= scene.physics.epsilon) frames.push_back(static_cast<std::uint32_t>(k));
      if (!env.restore_after_failure) scene = quantize(round.scene);
    }
    return ep;
  };

  const bool parallel = config.exec == Exec::Parallel;
  // Episodes past the n-th record are discarded, so blocks stay small.
  const int block = parallel ? 4 * omp_get_max_threads() : 1;
  std::uint32_t next = 0;
  while (d.records.size() < static_cast<std::size_t>(config.n)) {
    std::vector<Episode> eps(static_cast<std::size_t>(block));
#pragma omp parallel for schedule(dynamic) if (parallel)
    for (int b = 0; b < block; ++b) eps[static_cast<std::size_t>(b)] = run(next + static_cast<std::uint32_t>(b));
    next += static_cast<std::uint32_t>(block);
    for (Episode& ep : eps) {
      const auto scene_base = static_cast<std::uint32_t>(d.scenes.size());
      const auto record_base = static_cast<std::uint32_t>(d.records.size());
      const std::size_t keep = std::min(ep.records.size(), static_cast<std::size_t>(config.n) - d.records.size());
      for (std::size_t k = 0; k < keep; ++k) {
        InteractionRecord rec = std::move(ep.records[k]);
        rec.scene_id += scene_base;
        for (std::uint32_t& c : rec.context) c += record_base;
        d.scenes.push_back(std::move(ep.scenes[k]));
        d.records.push_back(std::move(rec));
      }
      if (d.records.size() == static_cast<std::size_t>(config.n)) break;
    }
  }
  finalize_dataset(d);
  return d;
}

// ---------------------------------------------------------------------------
// Binary framing

namespace {

constexpr std::uint32_t kDatasetVersion = 1;
constexpr std::uint32_t kSceneVersion = 1;
constexpr std::uint32_t kCheckpointVersion = 1;

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(int v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void vec3(const Vec3& v) {
    for (int i = 0; i < 3; ++i) f32(v[i]);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_ += s;
  }
  void ints(const std::vector<int>& v) {
    u32(static_cast<std::uint32_t>(v.size()));
    for (int x : v) i32(x);
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(const std::string& data) : data_(data) {}
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_++])) << (8 * i);
    return v;
  }
  int i32() { return static_cast<int>(u32()); }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  double f64() { return std::bit_cast<double>(u64()); }
  Vec3 vec3() {
    Vec3 v;
    for (int i = 0; i < 3; ++i) v[i] = f32();
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<int> ints() {
    const std::uint32_t n = count(4);
    std::vector<int> v(n);
    for (auto& x : v) x = i32();
    return v;
  }
  /// Element count whose payload must still fit in the buffer.
  std::uint32_t count(std::size_t element_bytes) {
    const std::uint32_t n = u32();
    if (element_bytes > 0 && n > (data_.size() - pos_) / element_bytes) throw CorruptData("length field exceeds file");
    return n;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw CorruptData("unexpected end of data");
  }
  const std::string& data_;
  std::size_t pos_ = 0;
};

constexpr std::size_t kHeaderBytes = 8 + 4 + 8 + 8;

void write_file(const fs::path& path, const char (&magic)[9], std::uint32_t version, const std::string& body) {
  Writer header;
  for (int i = 0; i < 8; ++i) header.u8(static_cast<std::uint8_t>(magic[i]));
  header.u32(version);
  header.u64(body.size());
  header.u64(fnv1a(body.data(), body.size()));
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(header.bytes().data(), static_cast<std::streamsize>(header.bytes().size()));
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot rename into " + path.string());
  }
}

/// Returns the verified body and its hash.
std::pair<std::string, std::uint64_t> read_file(const fs::path& path, const char (&magic)[9],
                                                std::uint32_t version) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw CorruptData("file too short: " + path.string());
  if (bytes.compare(0, 8, magic, 8) != 0) throw UnsupportedFormat("unrecognised file type: " + path.string());
  if (bytes.size() < kHeaderBytes) throw CorruptData("truncated header: " + path.string());
  const std::string header = bytes.substr(8, kHeaderBytes - 8);
  Reader r(header);
  const std::uint32_t v = r.u32();
  if (v != version)
    throw UnsupportedFormat("format version " + std::to_string(v) + " is not supported (expected " +
                            std::to_string(version) + ")");
  const std::uint64_t size = r.u64();
  const std::uint64_t hash = r.u64();
  if (bytes.size() - kHeaderBytes != size) throw CorruptData("body size mismatch: " + path.string());
  std::string body = bytes.substr(kHeaderBytes);
  if (fnv1a(body.data(), body.size()) != hash) throw CorruptData("content hash mismatch: " + path.string());
  return {std::move(body), hash};
}

constexpr char kDatasetMagic[9] = "SAFFDATA";
constexpr char kSceneMagic[9] = "SAFFSCEN";
constexpr char kCheckpointMagic[9] = "SAFFCKPT";

void write_scene(Writer& w, const SceneInstance& s) {
  const int n = s.cloud.size();
  w.u32(static_cast<std::uint32_t>(n));
  for (int i = 0; i < n; ++i) w.vec3(s.cloud.positions.col(i));
  for (int i = 0; i < n; ++i) w.vec3(s.cloud.normals.col(i));
  for (int i = 0; i < n; ++i) w.i32(s.cloud.part_label[static_cast<std::size_t>(i)]);
  w.vec3(s.base_pose.translation);
  for (int i = 0; i < 4; ++i) w.f32(s.base_pose.rotation.coeffs()[i]);
  w.u8(static_cast<std::uint8_t>(s.task));
  w.i32(s.p_op);
  w.vec3(s.op_wrench.force);
  w.vec3(s.op_wrench.torque);
  const PhysicsParams& ph = s.physics;
  for (double v : {ph.resist_force, ph.resist_torque, ph.support_force, ph.cone_angle, ph.gain_force, ph.gain_torque,
                   ph.epsilon, ph.rot_weight})
    w.f32(v);
  w.ints(s.heuristic_region);
  w.f32(s.goal_progress);
  w.i32(s.steps_to_goal);
  w.u64(s.variant_id);
}

SceneInstance read_scene(Reader& r) {
  SceneInstance s;
  const std::uint32_t n = r.count(3 * 4 + 3 * 4 + 4);
  s.cloud.positions.resize(3, n);
  s.cloud.normals.resize(3, n);
  s.cloud.part_label.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) s.cloud.positions.col(i) = r.vec3();
  for (std::uint32_t i = 0; i < n; ++i) s.cloud.normals.col(i) = r.vec3();
  for (std::uint32_t i = 0; i < n; ++i) s.cloud.part_label[i] = r.i32();
  s.base_pose.translation = r.vec3();
  for (int i = 0; i < 4; ++i) s.base_pose.rotation.coeffs()[i] = r.f32();
  const std::uint8_t task = r.u8();
  if (task > 3) throw CorruptData("unknown task type");
  s.task = static_cast<TaskType>(task);
  s.p_op = r.i32();
  s.op_wrench.force = r.vec3();
  s.op_wrench.torque = r.vec3();
  PhysicsParams& ph = s.physics;
  for (double* v : {&ph.resist_force, &ph.resist_torque, &ph.support_force, &ph.cone_angle, &ph.gain_force,
                    &ph.gain_torque, &ph.epsilon, &ph.rot_weight})
    *v = r.f32();
  s.heuristic_region = r.ints();
  s.goal_progress = r.f32();
  s.steps_to_goal = r.i32();
  s.variant_id = r.u64();
  if (s.p_op < 0 || s.p_op >= static_cast<int>(n)) throw CorruptData("operation point out of range");
  for (int h : s.heuristic_region)
    if (h < 0 || h >= static_cast<int>(n)) throw CorruptData("heuristic index out of range");
  return s;
}

std::string dataset_body(const Dataset& d) {
  Writer w;
  const DatasetManifest& m = d.manifest;
  w.u8(static_cast<std::uint8_t>(m.task));
  for (std::uint64_t c : m.counts) w.u64(c);
  w.u64(m.seed);
  w.u64(m.config_hash);
  w.f32(m.alpha);
  w.f32(m.beta);
  w.f32(m.epsilon);
  w.u32(static_cast<std::uint32_t>(d.scenes.size()));
  for (const SceneInstance& s : d.scenes) write_scene(w, s);
  w.u32(static_cast<std::uint32_t>(d.records.size()));
  for (const InteractionRecord& r : d.records) {
    w.u32(r.scene_id);
    w.i32(r.p_op);
    w.i32(r.action.p_sp);
    w.vec3(r.action.direction);
    w.f32(r.displacement.m);
    w.vec3(r.displacement.translation);
    w.vec3(r.displacement.rotation);
    w.f32(r.g_d);
    w.f32(r.g_c);
    w.u8(r.success ? 1 : 0);
    w.i32(r.step);
    w.u32(r.episode);
    w.u8(static_cast<std::uint8_t>(r.source));
    w.u32(static_cast<std::uint32_t>(r.context.size()));
    for (std::uint32_t c : r.context) w.u32(c);
  }
  return w.bytes();
}

void write_ints(Writer& w, const std::vector<int>& v) { w.ints(v); }

void write_config(Writer& w, const ModelConfig& c) {
  const EncoderConfig& e = c.encoder;
  w.i32(e.min_points);
  for (int v : e.sample_divisor) w.i32(v);
  for (double v : e.radius) w.f64(v);
  w.i32(e.group_size);
  for (const auto& l : e.sa_widths) write_ints(w, l);
  for (const auto& l : e.fp_widths) write_ints(w, l);
  w.i32(e.small_hidden);
  w.i32(e.small_dim);
  w.f64(e.disp_scale);
  w.u64(e.plan_seed);
  w.i32(c.context_dim);
  w.i32(c.latent_dim);
  for (const auto* l : {&c.affordance_hidden, &c.scoring_hidden, &c.posterior_hidden, &c.decoder_hidden,
                        &c.context_hidden, &c.attention_hidden})
    write_ints(w, *l);
}

ModelConfig read_config(Reader& r) {
  ModelConfig c;
  EncoderConfig& e = c.encoder;
  e.min_points = r.i32();
  for (int& v : e.sample_divisor) v = r.i32();
  for (double& v : e.radius) v = r.f64();
  e.group_size = r.i32();
  for (auto& l : e.sa_widths) l = r.ints();
  for (auto& l : e.fp_widths) l = r.ints();
  e.small_hidden = r.i32();
  e.small_dim = r.i32();
  e.disp_scale = r.f64();
  e.plan_seed = r.u64();
  c.context_dim = r.i32();
  c.latent_dim = r.i32();
  for (auto* l : {&c.affordance_hidden, &c.scoring_hidden, &c.posterior_hidden, &c.decoder_hidden,
                  &c.context_hidden, &c.attention_hidden})
    *l = r.ints();
  return c;
}

}  // namespace

std::uint64_t dataset_content_hash(const Dataset& d) {
  const std::string body = dataset_body(d);
  return fnv1a(body.data(), body.size());
}

std::uint64_t save_dataset(const Dataset& d, const fs::path& path) {
  const std::string body = dataset_body(d);
  write_file(path, kDatasetMagic, kDatasetVersion, body);
  return fnv1a(body.data(), body.size());
}

Dataset load_dataset(const fs::path& path) {
  auto [body, hash] = read_file(path, kDatasetMagic, kDatasetVersion);
  Reader r(body);
  Dataset d;
  DatasetManifest& m = d.manifest;
  const std::uint8_t task = r.u8();
  if (task > 3) throw CorruptData("unknown task type");
  m.task = static_cast<TaskType>(task);
  for (std::uint64_t& c : m.counts) c = r.u64();
  m.seed = r.u64();
  m.config_hash = r.u64();
  m.alpha = r.f32();
  m.beta = r.f32();
  m.epsilon = r.f32();
  m.content_hash = hash;
  const std::uint32_t n_scenes = r.count(1);
  d.scenes.reserve(n_scenes);
  for (std::uint32_t i = 0; i < n_scenes; ++i) d.scenes.push_back(read_scene(r));
  const std::uint32_t n_records = r.count(1);
  d.records.resize(n_records);
  for (InteractionRecord& rec : d.records) {
    rec.scene_id = r.u32();
    rec.p_op = r.i32();
    rec.action.p_sp = r.i32();
    rec.action.direction = r.vec3();
    rec.displacement.m = r.f32();
    rec.displacement.translation = r.vec3();
    rec.displacement.rotation = r.vec3();
    rec.g_d = r.f32();
    rec.g_c = r.f32();
    rec.success = r.u8() != 0;
    rec.step = r.i32();
    rec.episode = r.u32();
    const std::uint8_t src = r.u8();
    if (src > 2) throw CorruptData("unknown sampling source");
    rec.source = static_cast<Source>(src);
    const std::uint32_t nc = r.count(4);
    rec.context.resize(nc);
    for (std::uint32_t& c : rec.context) c = r.u32();
  }
  if (!r.done()) throw CorruptData("trailing bytes in dataset");
  const auto stored = m.counts;
  finalize_dataset(d);
  if (stored != m.counts) throw CorruptData("manifest counts disagree with the records");
  validate_dataset(d);
  return d;
}

void save_scene(const SceneInstance& scene, const fs::path& path) {
  Writer w;
  write_scene(w, scene);
  write_file(path, kSceneMagic, kSceneVersion, w.bytes());
}

SceneInstance load_scene(const fs::path& path) {
  const auto [body, hash] = read_file(path, kSceneMagic, kSceneVersion);
  Reader r(body);
  SceneInstance s = read_scene(r);
  if (!r.done()) throw CorruptData("trailing bytes in scene");
  return s;
}

void save_checkpoint(const ModelWeights& w, const fs::path& path) {
  ModelWeights copy = w;
  const nn::ParamList params = model_params(copy, ParamGroup::All);
  Writer out;
  write_config(out, w.config);
  out.u32(static_cast<std::uint32_t>(params.size()));
  for (const nn::ParamRef& p : params) {
    out.str(p.name);
    out.u32(static_cast<std::uint32_t>(p.value->rows()));
    out.u32(static_cast<std::uint32_t>(p.value->cols()));
    for (Eigen::Index i = 0; i < p.value->size(); ++i) out.f64(p.value->data()[i]);
  }
  write_file(path, kCheckpointMagic, kCheckpointVersion, out.bytes());
}

ModelWeights load_checkpoint(const fs::path& path) {
  const auto [body, hash] = read_file(path, kCheckpointMagic, kCheckpointVersion);
  Reader r(body);
  ModelConfig config = read_config(r);
  ModelWeights w;
  try {
    w = make_model(config, {0, 0});
  } catch (const InvalidArgument& e) {
    throw CorruptData(std::string("checkpoint holds an invalid model config: ") + e.what());
  }
  const nn::ParamList params = model_params(w, ParamGroup::All);
  if (r.count(1) != params.size()) throw CorruptData("checkpoint array count does not match the architecture");
  for (const nn::ParamRef& p : params) {
    const std::string name = r.str();
    const std::uint32_t rows = r.u32(), cols = r.u32();
    if (name != p.name || rows != p.value->rows() || cols != p.value->cols())
      throw CorruptData("checkpoint array " + name + " does not match the architecture");
    for (Eigen::Index i = 0; i < p.value->size(); ++i) p.value->data()[i] = r.f64();
  }
  if (!r.done()) throw CorruptData("trailing bytes in checkpoint");
  return w;
}

}  // namespace supportaff
