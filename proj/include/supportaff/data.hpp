#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "supportaff/env.hpp"
#include "supportaff/policy.hpp"

namespace supportaff {

enum class Source : std::uint8_t { Random = 0, Heuristic = 1, Policy = 2 };

/// One attempted support round. The observation is the snapshot `scene_id`;
/// the outcome is the displacement of the round's final step.
struct InteractionRecord {
  std::uint32_t scene_id = 0;
  int p_op = 0;
  SupportAction action;
  DisplacementBundle displacement;
  double g_d = 0.0;  // m / (2 epsilon)
  double g_c = 0.0;  // 1 - goal_delta
  double r = 0.0;    // derived from g_d, g_c and the manifest weights; not stored on disk
  bool success = false;
  int step = 0;
  std::uint32_t episode = 0;
  Source source = Source::Random;
  /// Earlier records of the same episode whose displacement reached epsilon,
  /// oldest first. Each one is a context frame (O_i, u_i, m_i).
  std::vector<std::uint32_t> context;

  bool positive() const { return r > 0.5; }
};

struct DatasetManifest {
  std::uint32_t version = 1;
  TaskType task = TaskType::Screw;
  std::array<std::uint64_t, 3> counts{};  // per Source
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  double alpha = 1.0;
  double beta = 1.0;
  double epsilon = 0.02;
  std::uint64_t content_hash = 0;  // of the serialized body; set by save and load
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<SceneInstance> scenes;
  std::vector<InteractionRecord> records;

  std::size_t positives() const;
};

/// r = clamp(1 - (alpha g_d + beta g_c), 0, 1).
double gt_score(double g_d, double g_c, double alpha, double beta);

/// Every floating field rounded through float so that a save/load round trip
/// is the identity.
SceneInstance quantize(const SceneInstance& scene);
double quantize(double x);

struct CollectConfig {
  int n = 10000;      // records
  double mix = 0.5;   // probability of a heuristic action at each step
  int k_max = 3;      // steps per episode
  double alpha = 1.0;
  double beta = 1.0;
  Exec exec = Exec::Serial;
  void validate() const;
};

/// Episodes of randomly switched random/heuristic actions until success or
/// k_max steps; stops after exactly `n` records.
Dataset collect_offline(TaskType task, const EnvConfig& env, const CollectConfig& config, std::uint64_t seed,
                        std::uint64_t config_hash = 0);

/// Fills derived fields (r) and the manifest counts after records change.
void finalize_dataset(Dataset& d);

/// Throws CorruptData when a record references a missing scene or a later
/// record, or the counts disagree with the records.
void validate_dataset(const Dataset& d);

// ---------------------------------------------------------------------------
// On-disk formats. Integers are little-endian fixed width; dataset and scene
// floats are 32-bit; checkpoint arrays are 64-bit. Every file ends its header
// with the FNV-1a hash of the body and is written through a temporary file
// and an atomic rename.

/// Returns the content hash of the written body.
std::uint64_t save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

void save_scene(const SceneInstance& scene, const std::filesystem::path& path);
SceneInstance load_scene(const std::filesystem::path& path);

void save_checkpoint(const ModelWeights& w, const std::filesystem::path& path);
ModelWeights load_checkpoint(const std::filesystem::path& path);

/// Hash of the serialized body; equal hashes mean equal on-disk content.
std::uint64_t dataset_content_hash(const Dataset& d);

/// FNV-1a over a byte range; the hash used by every format.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t file_hash(const std::filesystem::path& path);

}  // namespace supportaff
