#include "stx/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

namespace stx::corpus {

using json = nlohmann::ordered_json;

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "dev") return Split::dev;
  if (s == "test") return Split::test;
  fail(ErrorCategory::Data, "unknown split value: " + s);
}

const char* contour_name(EnergyContour c) {
  switch (c) {
    case EnergyContour::flat: return "flat";
    case EnergyContour::rising: return "rising";
    case EnergyContour::falling: return "falling";
    case EnergyContour::periodic: return "periodic";
  }
  return "?";
}

EnergyContour contour_from_name(const std::string& s) {
  if (s == "flat") return EnergyContour::flat;
  if (s == "rising") return EnergyContour::rising;
  if (s == "falling") return EnergyContour::falling;
  if (s == "periodic") return EnergyContour::periodic;
  fail(ErrorCategory::Data, "unknown energy contour: " + s);
}

// ---- manifest helpers -----------------------------------------------------

const StyleSpec& CorpusManifest::style(const std::string& id) const {
  for (const auto& s : styles)
    if (s.style_id == id) return s;
  fail(ErrorCategory::Data, "unknown style id: " + id);
}

const SpeakerSpec& CorpusManifest::speaker(const std::string& id) const {
  for (const auto& s : speakers)
    if (s.speaker_id == id) return s;
  fail(ErrorCategory::Data, "unknown speaker id: " + id);
}

std::vector<const Utterance*> CorpusManifest::select(std::optional<Split> split, const std::string& style_id,
                                                     bool target_only, bool exclude_target) const {
  std::vector<const Utterance*> out;
  for (const auto& u : utterances) {
    if (split && u.split != *split) continue;
    if (!style_id.empty() && u.style_id != style_id) continue;
    if (target_only && u.style_id != target_style_id) continue;
    if (exclude_target && u.style_id == target_style_id) continue;
    out.push_back(&u);
  }
  return out;
}

std::vector<std::string> CorpusManifest::unseen_style_ids() const {
  std::set<std::string> with_train;
  for (const auto& u : utterances)
    if (u.split == Split::train) with_train.insert(u.style_id);
  std::vector<std::string> out;
  for (const auto& s : styles)
    if (!with_train.count(s.style_id)) out.push_back(s.style_id);
  return out;
}

const Utterance* CorpusManifest::find(const std::string& utt_id) const {
  for (const auto& u : utterances)
    if (u.id == utt_id) return &u;
  return nullptr;
}

void CorpusManifest::validate() const {
  check(frame_dim >= 1, ErrorCategory::Data, "manifest: frame_dim must be >= 1");
  check(vocab_size >= 1, ErrorCategory::Data, "manifest: vocab_size must be >= 1");
  std::set<std::string> style_ids, speaker_ids, used_speakers, utt_ids;
  for (const auto& s : styles) {
    check(style_ids.insert(s.style_id).second, ErrorCategory::Data, "duplicate style id: " + s.style_id);
    check(s.duration_multiplier > 0, ErrorCategory::Data, "style " + s.style_id + ": duration_multiplier must be > 0");
    // disjointness: the style -> speaker map must be a bijection
    check(used_speakers.insert(s.speaker_id).second, ErrorCategory::Data,
          "disjointness violated: speaker " + s.speaker_id + " is assigned more than one style");
  }
  for (const auto& s : speakers) {
    check(speaker_ids.insert(s.speaker_id).second, ErrorCategory::Data, "duplicate speaker id: " + s.speaker_id);
    check(s.envelope_scale > 0, ErrorCategory::Data, "speaker " + s.speaker_id + ": envelope_scale must be > 0");
    check(int(s.base_envelope.size()) == frame_dim, ErrorCategory::Data,
          "speaker " + s.speaker_id + ": envelope length does not match frame_dim");
  }
  for (const auto& s : styles)
    check(speaker_ids.count(s.speaker_id) == 1, ErrorCategory::Data,
          "style " + s.style_id + " references unknown speaker " + s.speaker_id);
  check(style_ids.count(target_style_id) == 1, ErrorCategory::Data,
        "target style id not present in styles: " + target_style_id);
  for (const auto& u : utterances) {
    check(utt_ids.insert(u.id).second, ErrorCategory::Data, "duplicate utterance id: " + u.id);
    check(style_ids.count(u.style_id) == 1, ErrorCategory::Data, u.id + ": unknown style " + u.style_id);
    check(u.speaker_id == style(u.style_id).speaker_id, ErrorCategory::Data,
          u.id + ": speaker does not match the style's speaker (disjointness)");
    check(u.n_frames >= 1, ErrorCategory::Data, u.id + ": n_frames must be >= 1");
    check(!u.tokens.empty(), ErrorCategory::Data, u.id + ": empty token sequence");
    for (int tok : u.tokens)
      check(tok >= 0 && tok < vocab_size, ErrorCategory::Data, u.id + ": token id out of range");
  }
}

// ---- frame files ------------------------------------------------------------

static constexpr char kFrameMagic[4] = {'S', 'T', 'X', 'F'};

void save_frames(const std::filesystem::path& path, const Mat& frames) {
  check(frames.rows() >= 1 && frames.cols() >= 1, ErrorCategory::Data, "save_frames: empty matrix");
  check(all_finite(frames), ErrorCategory::Numeric, "save_frames: non-finite values");
  std::ofstream f(path, std::ios::binary);
  check(f.good(), ErrorCategory::Io, "cannot open for writing: " + path.string());
  uint32_t t = uint32_t(frames.rows()), d = uint32_t(frames.cols()), reserved = 0;
  f.write(kFrameMagic, 4);
  f.write(reinterpret_cast<const char*>(&t), 4);
  f.write(reinterpret_cast<const char*>(&d), 4);
  f.write(reinterpret_cast<const char*>(&reserved), 4);
  std::vector<float> buf(size_t(t) * d);
  for (uint32_t i = 0; i < t; ++i)
    for (uint32_t j = 0; j < d; ++j) buf[size_t(i) * d + j] = float(frames(i, j));
  f.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size() * sizeof(float)));
  check(f.good(), ErrorCategory::Io, "short write: " + path.string());
}

Mat load_frames(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), ErrorCategory::Io, "missing frame file: " + path.string());
  char magic[4];
  uint32_t t = 0, d = 0, reserved = 0;
  f.read(magic, 4);
  f.read(reinterpret_cast<char*>(&t), 4);
  f.read(reinterpret_cast<char*>(&d), 4);
  f.read(reinterpret_cast<char*>(&reserved), 4);
  check(f.good() && std::memcmp(magic, kFrameMagic, 4) == 0, ErrorCategory::Data,
        "bad frame file header: " + path.string());
  check(t >= 1 && d >= 1 && t < (1u << 24) && d < (1u << 16), ErrorCategory::Data,
        "implausible frame file shape: " + path.string());
  std::vector<float> buf(size_t(t) * d);
  f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * sizeof(float)));
  check(f.good(), ErrorCategory::Data, "truncated frame file: " + path.string());
  Mat frames(t, d);
  for (uint32_t i = 0; i < t; ++i)
    for (uint32_t j = 0; j < d; ++j) frames(i, j) = buf[size_t(i) * d + j];
  check(all_finite(frames), ErrorCategory::Data, "non-finite values in frame file: " + path.string());
  return frames;
}

// ---- manifest io ------------------------------------------------------------

static json style_to_json(const StyleSpec& s) {
  return json{{"id", s.style_id},
              {"speaker", s.speaker_id},
              {"duration_multiplier", s.duration_multiplier},
              {"energy_contour", contour_name(s.contour)},
              {"contour_rate", s.contour_rate}};
}

static StyleSpec style_from_json(const json& j) {
  StyleSpec s;
  s.style_id = j.at("id").get<std::string>();
  s.speaker_id = j.at("speaker").get<std::string>();
  s.duration_multiplier = j.at("duration_multiplier").get<double>();
  s.contour = contour_from_name(j.at("energy_contour").get<std::string>());
  s.contour_rate = j.at("contour_rate").get<double>();
  return s;
}

void save_manifest(const CorpusManifest& m, const std::filesystem::path& manifest_path) {
  json j;
  j["format"] = "stx-corpus-v1";
  j["seed"] = m.seed;
  j["frame_dim"] = m.frame_dim;
  j["vocab_size"] = m.vocab_size;
  j["target_style"] = m.target_style_id;
  j["styles"] = json::array();
  for (const auto& s : m.styles) j["styles"].push_back(style_to_json(s));
  j["speakers"] = json::array();
  for (const auto& s : m.speakers) {
    std::vector<double> env(s.base_envelope.data(), s.base_envelope.data() + s.base_envelope.size());
    j["speakers"].push_back(json{{"id", s.speaker_id}, {"envelope_scale", s.envelope_scale}, {"base_envelope", env}});
  }
  j["utterances"] = json::array();
  for (const auto& u : m.utterances) {
    j["utterances"].push_back(json{{"id", u.id},
                                   {"speaker", u.speaker_id},
                                   {"style", u.style_id},
                                   {"split", split_name(u.split)},
                                   {"tokens", u.tokens},
                                   {"n_frames", u.n_frames},
                                   {"file", u.frame_file}});
  }
  std::ofstream f(manifest_path);
  check(f.good(), ErrorCategory::Io, "cannot write manifest: " + manifest_path.string());
  f << j.dump(1) << "\n";
  check(f.good(), ErrorCategory::Io, "short write: " + manifest_path.string());
}

CorpusManifest load_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream f(manifest_path);
  check(f.good(), ErrorCategory::Io, "cannot open manifest: " + manifest_path.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    fail(ErrorCategory::Data, "malformed manifest json: " + std::string(e.what()));
  }
  CorpusManifest m;
  try {
    check(j.at("format").get<std::string>() == "stx-corpus-v1", ErrorCategory::Data,
          "unsupported manifest format");
    m.seed = j.at("seed").get<uint64_t>();
    m.frame_dim = j.at("frame_dim").get<int>();
    m.vocab_size = j.at("vocab_size").get<int>();
    m.target_style_id = j.at("target_style").get<std::string>();
    for (const auto& js : j.at("styles")) m.styles.push_back(style_from_json(js));
    for (const auto& js : j.at("speakers")) {
      SpeakerSpec s;
      s.speaker_id = js.at("id").get<std::string>();
      s.envelope_scale = js.at("envelope_scale").get<double>();
      auto env = js.at("base_envelope").get<std::vector<double>>();
      s.base_envelope = Eigen::Map<const Col>(env.data(), long(env.size()));
      m.speakers.push_back(std::move(s));
    }
    for (const auto& ju : j.at("utterances")) {
      Utterance u;
      u.id = ju.at("id").get<std::string>();
      u.speaker_id = ju.at("speaker").get<std::string>();
      u.style_id = ju.at("style").get<std::string>();
      u.split = split_from_name(ju.at("split").get<std::string>());
      u.tokens = ju.at("tokens").get<std::vector<int>>();
      u.n_frames = ju.at("n_frames").get<int>();
      u.frame_file = ju.at("file").get<std::string>();
      m.utterances.push_back(std::move(u));
    }
  } catch (const json::exception& e) {
    fail(ErrorCategory::Data, "manifest missing or mistyped field: " + std::string(e.what()));
  }
  m.root = manifest_path.parent_path();
  m.validate();
  // eager: every referenced frame file must exist with the declared shape
  for (const auto& u : m.utterances) {
    auto p = m.root / u.frame_file;
    check(std::filesystem::exists(p), ErrorCategory::Data, "missing frame file: " + p.string());
    std::ifstream fh(p, std::ios::binary);
    char magic[4];
    uint32_t t = 0, d = 0;
    fh.read(magic, 4);
    fh.read(reinterpret_cast<char*>(&t), 4);
    fh.read(reinterpret_cast<char*>(&d), 4);
    check(fh.good() && std::memcmp(magic, kFrameMagic, 4) == 0, ErrorCategory::Data,
          "bad frame file header: " + p.string());
    check(int(t) == u.n_frames && int(d) == m.frame_dim, ErrorCategory::Data,
          u.id + ": frame file shape " + std::to_string(t) + "x" + std::to_string(d) +
              " does not match declared " + std::to_string(u.n_frames) + "x" + std::to_string(m.frame_dim));
  }
  return m;
}

uint64_t corpus_hash(const CorpusManifest& m) {
  uint64_t h = 0xcbf29ce484222325ull;
  {
    std::ifstream f(m.root / "manifest.json", std::ios::binary);
    if (f.good()) {
      std::string body((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
      h = fnv1a(body, h);
    }
  }
  for (const auto& u : m.utterances) {
    std::ifstream f(m.root / u.frame_file, std::ios::binary);
    check(f.good(), ErrorCategory::Io, "missing frame file while hashing: " + u.frame_file);
    std::string body((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    h = fnv1a(body, h);
  }
  return h;
}

FrameCache::FrameCache(const CorpusManifest& m) {
  for (const auto& u : m.utterances) cache_[u.id] = load_frames(m.root / u.frame_file);
}

const Mat& FrameCache::frames(const std::string& utt_id) const {
  auto it = cache_.find(utt_id);
  check(it != cache_.end(), ErrorCategory::Data, "utterance not in frame cache: " + utt_id);
  return it->second;
}

// ---- generator ---------------------------------------------------------------

void GeneratorConfig::validate() const {
  check(frame_dim >= 4, ErrorCategory::Config, "frame_dim must be >= 4");
  check(vocab_size >= 2, ErrorCategory::Config, "vocab_size must be >= 2");
  check(t_min >= 8 && t_max >= t_min, ErrorCategory::Config, "frame length range invalid (t_min >= 8)");
  check(utterances_per_style >= 10, ErrorCategory::Config, "per-style utterance count must be >= 10");
  check(unseen_utterances >= 10, ErrorCategory::Config, "unseen utterance count must be >= 10");
  check(train_frac > 0 && dev_frac > 0 && train_frac + dev_frac < 1.0, ErrorCategory::Config,
        "split fractions must be positive and leave room for a test split");
  check(!target_style_id.empty(), ErrorCategory::Config, "exactly one target style must be named");
  check(!unseen_style_ids.empty(), ErrorCategory::Config, "at least one unseen style is required");

  std::set<std::string> style_ids, speaker_ids, used;
  for (const auto& s : styles) {
    check(style_ids.insert(s.style_id).second, ErrorCategory::Config, "duplicate style id: " + s.style_id);
    check(used.insert(s.speaker_id).second, ErrorCategory::Config,
          "disjointness violated: speaker " + s.speaker_id + " assigned two styles");
    check(s.duration_multiplier > 0, ErrorCategory::Config, "duration_multiplier must be > 0");
  }
  for (const auto& s : speakers)
    check(speaker_ids.insert(s.speaker_id).second, ErrorCategory::Config, "duplicate speaker id: " + s.speaker_id);
  for (const auto& s : styles)
    check(speaker_ids.count(s.speaker_id) == 1, ErrorCategory::Config,
          "style " + s.style_id + " references unknown speaker");
  check(style_ids.count(target_style_id) == 1, ErrorCategory::Config, "target style not in style list");
  int sources = 0;
  for (const auto& s : styles) {
    bool unseen = std::find(unseen_style_ids.begin(), unseen_style_ids.end(), s.style_id) != unseen_style_ids.end();
    if (!unseen && s.style_id != target_style_id) ++sources;
  }
  check(sources >= 2, ErrorCategory::Config, "need at least two source styles");
  for (const auto& id : unseen_style_ids) {
    check(style_ids.count(id) == 1, ErrorCategory::Config, "unseen style not in style list: " + id);
    check(id != target_style_id, ErrorCategory::Config, "target style cannot be unseen");
  }
  // distinct styles must differ by the configured margin in at least one knob
  for (size_t i = 0; i < styles.size(); ++i) {
    for (size_t k = i + 1; k < styles.size(); ++k) {
      const auto& a = styles[i];
      const auto& b = styles[k];
      bool distinct = a.contour != b.contour ||
                      std::abs(a.duration_multiplier - b.duration_multiplier) >= style_margin ||
                      std::abs(a.contour_rate - b.contour_rate) >= style_margin;
      check(distinct, ErrorCategory::Config,
            "styles " + a.style_id + " and " + b.style_id + " are not separated by the configured margin");
    }
  }
}

GeneratorConfig default_generator_config(uint64_t seed) {
  GeneratorConfig cfg;
  cfg.seed = seed;
  auto mk = [](std::string sid, std::string spk, double dur, EnergyContour c, double rate) {
    StyleSpec s;
    s.style_id = std::move(sid);
    s.speaker_id = std::move(spk);
    s.duration_multiplier = dur;
    s.contour = c;
    s.contour_rate = rate;
    return s;
  };
  // the target style is the only periodic one, so the style factor carries a
  // signature that survives the train/dev split (the source styles differ in
  // contour family or rate instead)
  cfg.styles = {
      mk("style-a", "spk-a", 1.00, EnergyContour::flat, 0.0),
      mk("style-b", "spk-b", 0.85, EnergyContour::rising, 1.0),
      mk("style-c", "spk-c", 1.15, EnergyContour::falling, 1.0),
      mk("style-d", "spk-d", 1.00, EnergyContour::falling, 2.2),
      mk("style-e", "spk-e", 0.75, EnergyContour::periodic, 5.0),  // target
      mk("style-f", "spk-f", 1.30, EnergyContour::rising, 1.9),    // unseen
  };
  for (const char* id : {"spk-a", "spk-b", "spk-c", "spk-d", "spk-e", "spk-f"}) {
    SpeakerSpec s;
    s.speaker_id = id;
    s.envelope_scale = 1.0;  // filled in during generation from the seed
    cfg.speakers.push_back(std::move(s));
  }
  cfg.target_style_id = "style-e";
  cfg.unseen_style_ids = {"style-f"};
  return cfg;
}

GeneratorConfig scarce_target_config(uint64_t seed) {
  GeneratorConfig cfg = default_generator_config(seed);
  cfg.scarce_target = true;
  return cfg;
}

GeneratorConfig generator_config_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(ErrorCategory::Config, "malformed generator config json: " + std::string(e.what()));
  }
  GeneratorConfig cfg = default_generator_config();
  try {
    if (j.contains("seed")) cfg.seed = j["seed"].get<uint64_t>();
    if (j.contains("frame_dim")) cfg.frame_dim = j["frame_dim"].get<int>();
    if (j.contains("vocab_size")) cfg.vocab_size = j["vocab_size"].get<int>();
    if (j.contains("t_min")) cfg.t_min = j["t_min"].get<int>();
    if (j.contains("t_max")) cfg.t_max = j["t_max"].get<int>();
    if (j.contains("utterances_per_style")) cfg.utterances_per_style = j["utterances_per_style"].get<int>();
    if (j.contains("unseen_utterances")) cfg.unseen_utterances = j["unseen_utterances"].get<int>();
    if (j.contains("scarce_target")) cfg.scarce_target = j["scarce_target"].get<bool>();
    if (j.contains("train_frac")) cfg.train_frac = j["train_frac"].get<double>();
    if (j.contains("dev_frac")) cfg.dev_frac = j["dev_frac"].get<double>();
    if (j.contains("style_margin")) cfg.style_margin = j["style_margin"].get<double>();
    if (j.contains("snr_db")) cfg.snr_db = j["snr_db"].get<double>();
    if (j.contains("rate_jitter")) cfg.rate_jitter = j["rate_jitter"].get<double>();
    if (j.contains("envelope_jitter")) cfg.envelope_jitter = j["envelope_jitter"].get<double>();
    if (j.contains("speaker_contrast")) cfg.speaker_contrast = j["speaker_contrast"].get<double>();
    if (j.contains("styles")) {
      cfg.styles.clear();
      for (const auto& js : j["styles"]) cfg.styles.push_back(style_from_json(js));
    }
    if (j.contains("speakers")) {
      cfg.speakers.clear();
      for (const auto& js : j["speakers"]) {
        SpeakerSpec s;
        s.speaker_id = js.at("id").get<std::string>();
        if (js.contains("envelope_scale")) s.envelope_scale = js["envelope_scale"].get<double>();
        cfg.speakers.push_back(std::move(s));
      }
    }
    if (j.contains("target_style")) cfg.target_style_id = j["target_style"].get<std::string>();
    if (j.contains("unseen_styles")) cfg.unseen_style_ids = j["unseen_styles"].get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    fail(ErrorCategory::Config, "generator config field error: " + std::string(e.what()));
  }
  return cfg;
}

std::string generator_config_to_json(const GeneratorConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["frame_dim"] = cfg.frame_dim;
  j["vocab_size"] = cfg.vocab_size;
  j["t_min"] = cfg.t_min;
  j["t_max"] = cfg.t_max;
  j["utterances_per_style"] = cfg.utterances_per_style;
  j["unseen_utterances"] = cfg.unseen_utterances;
  j["scarce_target"] = cfg.scarce_target;
  j["train_frac"] = cfg.train_frac;
  j["dev_frac"] = cfg.dev_frac;
  j["style_margin"] = cfg.style_margin;
  j["snr_db"] = cfg.snr_db;
  j["rate_jitter"] = cfg.rate_jitter;
  j["envelope_jitter"] = cfg.envelope_jitter;
  j["speaker_contrast"] = cfg.speaker_contrast;
  j["target_style"] = cfg.target_style_id;
  j["unseen_styles"] = cfg.unseen_style_ids;
  j["styles"] = json::array();
  for (const auto& s : cfg.styles) j["styles"].push_back(style_to_json(s));
  j["speakers"] = json::array();
  for (const auto& s : cfg.speakers)
    j["speakers"].push_back(json{{"id", s.speaker_id}, {"envelope_scale", s.envelope_scale}});
  return j.dump(1);
}

namespace {

// Smooth positive token spectra: each token id gets a bump pattern over the
// frequency axis plus a weaker harmonic, values in roughly [0.25, 1.6].
Mat token_patterns(uint64_t seed, int frame_dim, int vocab) {
  Rng rng = Rng(seed).stream(0x70617474);  // "patt"
  Mat p(frame_dim, vocab);
  for (int v = 0; v < vocab; ++v) {
    Rng r = rng.stream(uint64_t(v));
    double center = r.uniform(2.0, frame_dim - 3.0);
    double width = r.uniform(1.8, 3.2);
    double second = std::fmod(center * 2.7 + r.uniform(0.0, 4.0), double(frame_dim));
    for (int f = 0; f < frame_dim; ++f) {
      double d1 = (f - center) / width;
      double d2 = (f - second) / (width * 1.6);
      p(f, v) = 0.25 + 0.9 * std::exp(-0.5 * d1 * d1) + 0.45 * std::exp(-0.5 * d2 * d2);
    }
  }
  return p;
}

Col speaker_envelope(uint64_t seed, const std::string& speaker_id, int frame_dim, double contrast) {
  Rng rng = Rng(seed).stream(0x73706b72, fnv1a(speaker_id));  // "spkr"
  // smoothed log-amplitude walk -> multiplicative fingerprint around 1
  Col raw(frame_dim);
  for (int f = 0; f < frame_dim; ++f) raw(f) = rng.gaussian();
  Col env(frame_dim);
  for (int f = 0; f < frame_dim; ++f) {
    double acc = 0, wsum = 0;
    for (int k = -3; k <= 3; ++k) {
      int i = std::clamp(f + k, 0, frame_dim - 1);
      double w = std::exp(-0.5 * k * k / 2.25);
      acc += w * raw(i);
      wsum += w;
    }
    env(f) = std::exp(contrast * acc / wsum);
  }
  return env;
}

double contour_gain(const StyleSpec& s, int t, int total) {
  double u = total > 1 ? double(t) / double(total - 1) : 0.0;
  switch (s.contour) {
    case EnergyContour::flat: return 1.0;
    case EnergyContour::rising: return 1.0 + 0.6 * s.contour_rate * (u - 0.5);
    case EnergyContour::falling: return 1.0 + 0.6 * s.contour_rate * (0.5 - u);
    case EnergyContour::periodic: return 1.0 + 0.45 * std::sin(6.283185307179586 * s.contour_rate * u);
  }
  return 1.0;
}

struct UttPlan {
  std::string id;
  const StyleSpec* style;
  const SpeakerSpec* speaker;
  Split split;
};

Col smooth_noise(Rng& rng, int n, double sigma) {
  Col raw(n);
  for (int i = 0; i < n; ++i) raw(i) = rng.gaussian();
  Col out(n);
  for (int i = 0; i < n; ++i) {
    double acc = 0, wsum = 0;
    for (int k = -3; k <= 3; ++k) {
      int j = std::clamp(i + k, 0, n - 1);
      double w = std::exp(-0.5 * k * k / 2.25);
      acc += w * raw(j);
      wsum += w;
    }
    out(i) = sigma * acc / wsum;
  }
  return out;
}

Mat synthesize_utterance(const GeneratorConfig& cfg, const Mat& patterns, const StyleSpec& style,
                         const SpeakerSpec& speaker, const std::vector<int>& tokens, int n_frames, Rng rng) {
  int f_dim = cfg.frame_dim;
  // the utterance's envelope: the speaker's base fingerprint with smooth
  // utterance-level deviation (a take on real within-speaker variability)
  Col envelope = speaker.base_envelope;
  if (cfg.envelope_jitter > 0)
    envelope = envelope.cwiseProduct(smooth_noise(rng, f_dim, cfg.envelope_jitter).array().exp().matrix());

  Mat frames(n_frames, f_dim);
  int l = int(tokens.size());
  for (int t = 0; t < n_frames; ++t) {
    int tok = tokens[std::min(l - 1, t * l / n_frames)];
    double gain = contour_gain(style, t, n_frames) * speaker.envelope_scale;
    for (int f = 0; f < f_dim; ++f)
      frames(t, f) = patterns(f, tok) * envelope(f) * gain;
  }
  // additive noise calibrated to the configured SNR
  double power = frames.array().square().mean();
  double noise_std = std::sqrt(power) * std::pow(10.0, -cfg.snr_db / 20.0);
  for (int t = 0; t < n_frames; ++t)
    for (int f = 0; f < f_dim; ++f) frames(t, f) += noise_std * rng.gaussian();
  return frames;
}

}  // namespace

CorpusManifest generate_corpus(const GeneratorConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "frames", ec);
  check(!ec && std::filesystem::is_directory(out_dir / "frames"), ErrorCategory::Io,
        "cannot create output directory: " + (out_dir / "frames").string());

  CorpusManifest m;
  m.seed = cfg.seed;
  m.frame_dim = cfg.frame_dim;
  m.vocab_size = cfg.vocab_size;
  m.target_style_id = cfg.target_style_id;
  m.styles = cfg.styles;
  m.root = out_dir;

  Rng master(cfg.seed);
  for (const auto& spk : cfg.speakers) {
    SpeakerSpec s = spk;
    if (s.base_envelope.size() == 0)
      s.base_envelope = speaker_envelope(cfg.seed, s.speaker_id, cfg.frame_dim, cfg.speaker_contrast);
    if (s.envelope_scale == 1.0) {
      Rng r = master.stream(0x7363616c, fnv1a(s.speaker_id));  // "scal"
      s.envelope_scale = r.uniform(0.85, 1.2);
    }
    m.speakers.push_back(std::move(s));
  }

  Mat patterns = token_patterns(cfg.seed, cfg.frame_dim, cfg.vocab_size);

  // plan utterances: counts + splits per style
  std::vector<UttPlan> plans;
  int utt_counter = 0;
  for (const auto& style : m.styles) {
    bool unseen = std::find(cfg.unseen_style_ids.begin(), cfg.unseen_style_ids.end(), style.style_id) !=
                  cfg.unseen_style_ids.end();
    bool is_target = style.style_id == cfg.target_style_id;
    int count = unseen ? cfg.unseen_utterances : cfg.utterances_per_style;
    if (is_target && cfg.scarce_target) count = std::max(10, cfg.utterances_per_style / 6);

    int n_train = int(std::lround(count * cfg.train_frac));
    int n_dev = int(std::lround(count * cfg.dev_frac));
    std::vector<Split> splits(count, Split::test);
    if (!unseen) {
      for (int i = 0; i < n_train; ++i) splits[i] = Split::train;
      for (int i = n_train; i < n_train + n_dev && i < count; ++i) splits[i] = Split::dev;
    }
    // shuffle split assignment within the style (seeded)
    Rng r = master.stream(0x73706c74, fnv1a(style.style_id));  // "splt"
    for (int i = count - 1; i > 0; --i) std::swap(splits[i], splits[r.uniform_int(i + 1)]);

    for (int i = 0; i < count; ++i) {
      UttPlan p;
      char buf[16];
      std::snprintf(buf, sizeof(buf), "u%05d", utt_counter++);
      p.id = buf;
      p.style = &style;
      p.speaker = &m.speaker(style.speaker_id);
      p.split = splits[i];
      plans.push_back(std::move(p));
    }
  }

  for (const auto& plan : plans) {
    Rng r = master.stream(0x75747472, fnv1a(plan.id));  // "uttr"
    int l_tok = 8 + r.uniform_int(17);  // 8..24 tokens
    std::vector<int> tokens(l_tok);
    for (int& tok : tokens) tok = r.uniform_int(cfg.vocab_size);
    int t_base = cfg.t_min + r.uniform_int(cfg.t_max - cfg.t_min + 1);
    int n_frames = std::clamp(int(std::lround(t_base * plan.style->duration_multiplier)), 16, 2 * cfg.t_max);

    // utterance-level contour variation around the style's rate
    StyleSpec realized = *plan.style;
    if (cfg.rate_jitter > 0 && realized.contour != EnergyContour::flat) {
      double g = std::clamp(r.gaussian(), -2.0, 2.0);
      realized.contour_rate *= 1.0 + cfg.rate_jitter * g;
    }

    Mat frames = synthesize_utterance(cfg, patterns, realized, *plan.speaker, tokens, n_frames,
                                      r.stream(0x6e6f6973));  // "nois"

    Utterance u;
    u.id = plan.id;
    u.speaker_id = plan.speaker->speaker_id;
    u.style_id = plan.style->style_id;
    u.tokens = std::move(tokens);
    u.n_frames = n_frames;
    u.split = plan.split;
    u.frame_file = "frames/" + plan.id + ".stxf";
    save_frames(out_dir / u.frame_file, frames);
    m.utterances.push_back(std::move(u));
  }

  m.validate();
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

// ---- batch iterator -----------------------------------------------------------

BatchIterator::BatchIterator(const CorpusManifest& m, int batch_size, uint64_t seed)
    : manifest_(&m), batch_size_(batch_size), seed_(seed) {
  check(batch_size >= 1, ErrorCategory::Config, "batch_size must be >= 1");
  source_ = m.select(Split::train, "", false, true);
  target_ = m.select(Split::train, "", true, false);
  check(!source_.empty(), ErrorCategory::Data, "empty source training domain");
  check(!target_.empty(), ErrorCategory::Data, "empty target training domain");
  check(long(source_.size()) >= batch_size, ErrorCategory::Config, "batch_size larger than the source train split");
  reshuffle_source();
  reshuffle_target();
}

void BatchIterator::reshuffle_source() {
  src_order_.resize(source_.size());
  for (size_t i = 0; i < source_.size(); ++i) src_order_[i] = int(i);
  Rng r = Rng(seed_).stream(0x73726373, uint64_t(state_.src_epoch));  // "srcs"
  for (int i = int(src_order_.size()) - 1; i > 0; --i) std::swap(src_order_[i], src_order_[r.uniform_int(i + 1)]);
}

void BatchIterator::reshuffle_target() {
  tgt_order_.resize(target_.size());
  for (size_t i = 0; i < target_.size(); ++i) tgt_order_[i] = int(i);
  Rng r = Rng(seed_).stream(0x74677473, uint64_t(state_.tgt_epoch));  // "tgts"
  for (int i = int(tgt_order_.size()) - 1; i > 0; --i) std::swap(tgt_order_[i], tgt_order_[r.uniform_int(i + 1)]);
}

PairedBatch BatchIterator::next() {
  PairedBatch batch;
  if (state_.src_pos + batch_size_ > long(source_.size())) {
    ++state_.src_epoch;
    state_.src_pos = 0;
    reshuffle_source();
  }
  for (int i = 0; i < batch_size_; ++i) batch.source.push_back(source_[src_order_[state_.src_pos++]]);
  for (int i = 0; i < batch_size_; ++i) {
    if (state_.tgt_pos >= long(target_.size())) {
      ++state_.tgt_epoch;
      state_.tgt_pos = 0;
      reshuffle_target();
    }
    batch.target.push_back(target_[tgt_order_[state_.tgt_pos++]]);
  }
  src_epoch_ = state_.src_epoch;
  return batch;
}

void BatchIterator::restore(const State& s) {
  state_ = s;
  src_epoch_ = s.src_epoch;
  reshuffle_source();
  reshuffle_target();
}

}  // namespace stx::corpus
