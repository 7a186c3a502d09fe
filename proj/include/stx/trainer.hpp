#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include "stx/objectives.hpp"

namespace stx::trainer {

struct TrainConfig {
  system::ModelConfig model;
  objectives::LossWeights weights;
  double lr_gen = 1e-3;
  double lr_disc = 5e-4;
  double clip_norm = 1.0;
  int batch_size = 6;  // pairs per step
  long max_steps = 20000;
  uint64_t seed = 1;
  objectives::TrainOptions::CycleMode cycle_mode = objectives::TrainOptions::CycleMode::teacher_length;
  int d_steps_per_g_step = 1;
  bool no_dis = false;   // gamma = 0
  bool no_cyc = false;   // lambda = 0
  bool no_adv = false;   // beta = 0 and D never updated
  bool gaussian_posterior = false;  // K = 0
  bool cycle_stop_gradient = false;
  bool adv_real_ground_truth = false;
  enum class ZStarMode { centroid, batch };
  ZStarMode z_star_mode = ZStarMode::centroid;
  double kl_weight = 0.0;
  long eval_every = 500;
  long checkpoint_every = 0;  // 0 = only the final checkpoint
  int threads = 1;     // shard-parallel workers; arithmetic is thread-count invariant
  int shard_size = 8;  // utterance pairs per tape
  int max_frames = 240;

  void validate() const;
  // Ablation flags fold into the weights actually used.
  objectives::LossWeights effective_weights() const;
  objectives::TrainOptions train_options() const;

  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
  uint64_t config_hash() const;
};

struct CheckpointMeta {
  long step = 0;
  corpus::BatchIterator::State iter_state;
  Col z_star;
  long adam_gen_t = 0;
  long adam_disc_t = 0;
};

void save_checkpoint(const std::filesystem::path& path, const system::System& sys, const TrainConfig& cfg,
                     const CheckpointMeta& meta);
CheckpointMeta load_checkpoint(const std::filesystem::path& path, system::System& sys,
                               const TrainConfig& cfg);

// One JSON-lines record per training step.
struct StepRecord {
  long step = 0;
  objectives::LossBreakdown losses;
  double wallclock = 0;
  std::string to_json_line() const;
};

// Canonical log hash: wallclock carries real elapsed time, so determinism
// comparisons strip it before hashing.
uint64_t hash_log_stripped(const std::filesystem::path& jsonl_path);

struct TrainResult {
  std::filesystem::path checkpoint_path;
  std::filesystem::path log_path;
  std::filesystem::path eval_log_path;
  long final_step = 0;
};

class Trainer {
 public:
  Trainer(const corpus::CorpusManifest& manifest, TrainConfig cfg, std::filesystem::path out_dir);

  // D_s must be pretrained before training starts (the accuracy gate).
  void load_style_discriminator(const std::filesystem::path& ds_checkpoint);
  void adopt_style_discriminator(const adversaries::StyleDiscriminator& ds);

  // Trains from scratch, or resumes when `resume_from` is given.
  TrainResult train(std::optional<std::filesystem::path> resume_from = std::nullopt);

  system::System& system() { return *sys_; }
  const corpus::FrameCache& frames() const { return frames_; }
  const Col& z_star() const { return z_star_; }

  // Per-epoch metric: mean distance between per-utterance deterministic zK
  // and z* over the target train split.
  double z_star_spread() const;

 private:
  void recompute_z_star();
  objectives::Batch make_batch(const corpus::PairedBatch& pb) const;
  void cache_style_probabilities();

  const corpus::CorpusManifest& manifest_;
  TrainConfig cfg_;
  std::filesystem::path out_dir_;
  corpus::FrameCache frames_;
  std::unique_ptr<system::System> sys_;
  Col z_star_;
  std::map<std::string, double> p_ds_cache_;
  std::vector<const Mat*> target_train_frames_;
};

// Style transfer: encode the speaker from the given utterance (no lookup
// tables anywhere, so unseen speakers/styles work), decode free-running with
// the cached z*.
Mat transfer(const system::System& sys, const Col& z_star, const Mat& frames,
             const std::vector<int>& tokens, int max_frames);

}  // namespace stx::trainer
