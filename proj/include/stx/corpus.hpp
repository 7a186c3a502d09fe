#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stx/common.hpp"
#include "stx/rng.hpp"

namespace stx::corpus {

enum class Split { train, dev, test };

const char* split_name(Split s);
Split split_from_name(const std::string& s);

enum class EnergyContour { flat, rising, falling, periodic };

const char* contour_name(EnergyContour c);
EnergyContour contour_from_name(const std::string& s);

struct StyleSpec {
  std::string style_id;
  std::string speaker_id;  // disjointness: one speaker per style
  double duration_multiplier = 1.0;
  EnergyContour contour = EnergyContour::flat;
  double contour_rate = 0.0;
};

struct SpeakerSpec {
  std::string speaker_id;
  Col base_envelope;  // length frame_dim, multiplicative
  double envelope_scale = 1.0;
};

struct Utterance {
  std::string id;
  std::string speaker_id;
  std::string style_id;
  std::vector<int> tokens;
  int n_frames = 0;
  Split split = Split::train;
  std::string frame_file;  // relative to manifest root
};

struct CorpusManifest {
  std::vector<StyleSpec> styles;
  std::vector<SpeakerSpec> speakers;
  std::vector<Utterance> utterances;
  std::string target_style_id;
  int frame_dim = 0;
  int vocab_size = 0;
  uint64_t seed = 0;
  std::filesystem::path root;  // directory holding the manifest

  const StyleSpec& style(const std::string& id) const;
  const SpeakerSpec& speaker(const std::string& id) const;
  std::vector<const Utterance*> select(std::optional<Split> split,
                                       const std::string& style_id = "",
                                       bool target_only = false,
                                       bool exclude_target = false) const;
  // Styles that never appear in the train split (the held-out "unseen" set).
  std::vector<std::string> unseen_style_ids() const;
  const Utterance* find(const std::string& utt_id) const;

  void validate() const;  // all manifest invariants except file existence
};

struct GeneratorConfig {
  uint64_t seed = 7;
  int frame_dim = 32;
  int vocab_size = 24;
  int t_min = 40;
  int t_max = 160;
  int utterances_per_style = 100;
  int unseen_utterances = 40;
  bool scarce_target = false;  // target style gets ~1/6 of the utterances
  double train_frac = 0.7;
  double dev_frac = 0.15;
  double style_margin = 0.3;
  double snr_db = 20.0;
  // per-utterance variation of the style's contour rate (relative). Styles
  // stay separable while the realized style code becomes continuous.
  double rate_jitter = 0.12;
  // per-utterance smooth variation of the speaker envelope (log scale).
  // Speaker identity stays separable but carries utterance-level detail a
  // reconstruction cannot recover from a style code alone.
  double envelope_jitter = 0.22;
  // between-speaker envelope contrast (log scale). Kept comparable to the
  // within-speaker jitter so the speaker axis is not a trivial shortcut for
  // the adversary, while probes still separate speakers reliably.
  double speaker_contrast = 0.30;
  std::vector<StyleSpec> styles;      // empty -> default 6-style layout
  std::vector<SpeakerSpec> speakers;  // envelopes may be empty -> derived from seed
  std::string target_style_id;
  std::vector<std::string> unseen_style_ids;

  void validate() const;
};

// Default layout: 4 source styles + 1 target + 1 unseen, one speaker each.
GeneratorConfig default_generator_config(uint64_t seed = 7);
// Variant mirroring a scarce target-style corpus (~1/6 of the utterances).
GeneratorConfig scarce_target_config(uint64_t seed = 7);

GeneratorConfig generator_config_from_json(const std::string& json_text);
std::string generator_config_to_json(const GeneratorConfig& cfg);

// Synthesizes the corpus under out_dir (manifest.json + frames/*.stxf).
// Deterministic for a given config; per-utterance streams derive from the
// master seed so generation order never affects content.
CorpusManifest generate_corpus(const GeneratorConfig& cfg, const std::filesystem::path& out_dir);

CorpusManifest load_manifest(const std::filesystem::path& manifest_path);
void save_manifest(const CorpusManifest& m, const std::filesystem::path& manifest_path);

// Frame files: 16-byte header (magic "STXF", u32 T, u32 F, u32 reserved),
// then T*F little-endian float32, frame-major (row t contiguous).
Mat load_frames(const std::filesystem::path& path);          // returns T x F
void save_frames(const std::filesystem::path& path, const Mat& frames);

// Full-corpus content hash (manifest + every referenced frame file).
uint64_t corpus_hash(const CorpusManifest& m);

// In-memory frame cache keyed by utterance id.
class FrameCache {
 public:
  explicit FrameCache(const CorpusManifest& m);
  const Mat& frames(const std::string& utt_id) const;

 private:
  std::map<std::string, Mat> cache_;
};

struct PairedBatch {
  std::vector<const Utterance*> source;
  std::vector<const Utterance*> target;
};

// Paired sampler over the train split: source utterances are drawn without
// replacement per epoch; the target side recycles with a reshuffle when it
// is smaller. Deterministic for a given (manifest, batch_size, seed).
class BatchIterator {
 public:
  BatchIterator(const CorpusManifest& m, int batch_size, uint64_t seed);

  PairedBatch next();
  long steps_per_epoch() const { return long(source_.size()) / batch_size_; }
  long source_epoch() const { return src_epoch_; }

  struct State {
    long src_epoch = 0, src_pos = 0;
    long tgt_epoch = 0, tgt_pos = 0;
  };
  State state() const { return state_; }
  void restore(const State& s);

 private:
  void reshuffle_source();
  void reshuffle_target();

  const CorpusManifest* manifest_;
  std::vector<const Utterance*> source_, target_;
  std::vector<int> src_order_, tgt_order_;
  int batch_size_;
  uint64_t seed_;
  long src_epoch_ = 0;
  State state_;
};

}  // namespace stx::corpus
