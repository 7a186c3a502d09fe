#include "stx/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <future>

#include <json.hpp>

namespace stx::trainer {

using json = nlohmann::ordered_json;
using objectives::Batch;
using objectives::BatchItem;
using objectives::GeneratorTerms;
using objectives::LossWeights;

// ---- config -----------------------------------------------------------------

void TrainConfig::validate() const {
  model.validate();
  weights.validate();
  check(lr_gen > 0 && lr_disc > 0, ErrorCategory::Config, "learning rates must be positive");
  check(batch_size >= 1, ErrorCategory::Config, "batch_size must be >= 1");
  check(max_steps >= 1, ErrorCategory::Config, "max_steps must be >= 1");
  check(d_steps_per_g_step >= 0, ErrorCategory::Config, "d_steps_per_g_step must be >= 0");
  check(threads >= 1 && shard_size >= 1, ErrorCategory::Config, "threads and shard_size must be >= 1");
  check(eval_every >= 1, ErrorCategory::Config, "eval_every must be >= 1");
  check(kl_weight >= 0, ErrorCategory::Config, "kl_weight must be >= 0");
}

LossWeights TrainConfig::effective_weights() const {
  LossWeights w = weights;
  if (no_dis) w.gamma = 0;
  if (no_cyc) w.lambda = 0;
  if (no_adv) w.beta = 0;
  return w;
}

objectives::TrainOptions TrainConfig::train_options() const {
  objectives::TrainOptions o;
  o.cycle_mode = cycle_mode;
  o.cycle_stop_gradient = cycle_stop_gradient;
  o.use_flow = !gaussian_posterior;
  o.adv_real_ground_truth = adv_real_ground_truth;
  o.max_frames = max_frames;
  return o;
}

std::string TrainConfig::to_json() const {
  json j;
  j["weights"] = {{"alpha", weights.alpha}, {"beta", weights.beta}, {"gamma", weights.gamma},
                  {"lambda", weights.lambda}};
  j["lr_gen"] = lr_gen;
  j["lr_disc"] = lr_disc;
  j["clip_norm"] = clip_norm;
  j["batch_size"] = batch_size;
  j["max_steps"] = max_steps;
  j["seed"] = seed;
  j["cycle_mode"] = cycle_mode == objectives::TrainOptions::CycleMode::teacher_length ? "teacher_length"
                                                                                      : "free_running";
  j["d_steps_per_g_step"] = d_steps_per_g_step;
  j["no_dis"] = no_dis;
  j["no_cyc"] = no_cyc;
  j["no_adv"] = no_adv;
  j["gaussian_posterior"] = gaussian_posterior;
  j["cycle_stop_gradient"] = cycle_stop_gradient;
  j["adv_real_ground_truth"] = adv_real_ground_truth;
  j["z_star_mode"] = z_star_mode == ZStarMode::centroid ? "centroid" : "batch";
  j["kl_weight"] = kl_weight;
  j["eval_every"] = eval_every;
  j["checkpoint_every"] = checkpoint_every;
  j["threads"] = threads;
  j["shard_size"] = shard_size;
  j["max_frames"] = max_frames;
  json m;
  m["frame_dim"] = model.enc.frame_dim;
  m["vocab_size"] = model.dec.vocab_size;
  m["d_z"] = model.enc.d_z;
  m["d_r"] = model.enc.d_r;
  m["d_h"] = model.enc.d_h;
  m["conv_layers"] = model.enc.conv_layers;
  m["gru_units"] = model.enc.gru_units;
  m["flow_steps"] = model.enc.flow_steps;
  m["speaker_layers"] = model.enc.speaker_layers;
  m["conv_base_channels"] = model.enc.conv_base_channels;
  m["made_hidden"] = model.enc.made_hidden;
  m["speaker_hidden"] = model.enc.speaker_hidden;
  m["speaker_proj"] = model.enc.speaker_proj;
  m["speaker_stride"] = model.enc.speaker_stride;
  m["emb_dim"] = model.dec.emb_dim;
  m["enc_units"] = model.dec.enc_units;
  m["att_dim"] = model.dec.att_dim;
  m["dec_units"] = model.dec.dec_units;
  m["per_step_conditioning"] = model.dec.per_step_conditioning;
  m["stop_pos_weight"] = model.dec.stop_pos_weight;
  m["disc_conv_layers"] = model.disc.conv_layers;
  m["disc_base_channels"] = model.disc.base_channels;
  j["model"] = m;
  return j.dump(1);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCategory::Config, "malformed train config json: " + std::string(e.what()));
  }
  TrainConfig cfg;
  try {
    if (j.contains("weights")) {
      const auto& w = j["weights"];
      if (w.contains("alpha")) cfg.weights.alpha = w["alpha"].get<double>();
      if (w.contains("beta")) cfg.weights.beta = w["beta"].get<double>();
      if (w.contains("gamma")) cfg.weights.gamma = w["gamma"].get<double>();
      if (w.contains("lambda")) cfg.weights.lambda = w["lambda"].get<double>();
    }
    auto opt = [&](const char* key, auto& field) {
      using T = std::decay_t<decltype(field)>;
      if (j.contains(key)) field = j[key].get<T>();
    };
    opt("lr_gen", cfg.lr_gen);
    opt("lr_disc", cfg.lr_disc);
    opt("clip_norm", cfg.clip_norm);
    opt("batch_size", cfg.batch_size);
    opt("max_steps", cfg.max_steps);
    opt("seed", cfg.seed);
    opt("d_steps_per_g_step", cfg.d_steps_per_g_step);
    opt("no_dis", cfg.no_dis);
    opt("no_cyc", cfg.no_cyc);
    opt("no_adv", cfg.no_adv);
    opt("gaussian_posterior", cfg.gaussian_posterior);
    opt("cycle_stop_gradient", cfg.cycle_stop_gradient);
    opt("adv_real_ground_truth", cfg.adv_real_ground_truth);
    opt("kl_weight", cfg.kl_weight);
    opt("eval_every", cfg.eval_every);
    opt("checkpoint_every", cfg.checkpoint_every);
    opt("threads", cfg.threads);
    opt("shard_size", cfg.shard_size);
    opt("max_frames", cfg.max_frames);
    if (j.contains("cycle_mode")) {
      std::string mode = j["cycle_mode"].get<std::string>();
      check(mode == "teacher_length" || mode == "free_running", ErrorCategory::Config,
            "unknown cycle_mode: " + mode);
      cfg.cycle_mode = mode == "teacher_length" ? objectives::TrainOptions::CycleMode::teacher_length
                                                : objectives::TrainOptions::CycleMode::free_running;
    }
    if (j.contains("z_star_mode")) {
      std::string mode = j["z_star_mode"].get<std::string>();
      check(mode == "centroid" || mode == "batch", ErrorCategory::Config, "unknown z_star_mode: " + mode);
      cfg.z_star_mode = mode == "centroid" ? ZStarMode::centroid : ZStarMode::batch;
    }
    if (j.contains("model")) {
      const auto& m = j["model"];
      auto optm = [&](const char* key, auto& field) {
        using T = std::decay_t<decltype(field)>;
        if (m.contains(key)) field = m[key].get<T>();
      };
      optm("d_z", cfg.model.enc.d_z);
      optm("d_r", cfg.model.enc.d_r);
      optm("d_h", cfg.model.enc.d_h);
      optm("conv_layers", cfg.model.enc.conv_layers);
      optm("gru_units", cfg.model.enc.gru_units);
      optm("flow_steps", cfg.model.enc.flow_steps);
      optm("speaker_layers", cfg.model.enc.speaker_layers);
      optm("conv_base_channels", cfg.model.enc.conv_base_channels);
      optm("made_hidden", cfg.model.enc.made_hidden);
      optm("speaker_hidden", cfg.model.enc.speaker_hidden);
      optm("speaker_proj", cfg.model.enc.speaker_proj);
      optm("speaker_stride", cfg.model.enc.speaker_stride);
      optm("emb_dim", cfg.model.dec.emb_dim);
      optm("enc_units", cfg.model.dec.enc_units);
      optm("att_dim", cfg.model.dec.att_dim);
      optm("dec_units", cfg.model.dec.dec_units);
      optm("per_step_conditioning", cfg.model.dec.per_step_conditioning);
      optm("stop_pos_weight", cfg.model.dec.stop_pos_weight);
      optm("disc_conv_layers", cfg.model.disc.conv_layers);
      optm("disc_base_channels", cfg.model.disc.base_channels);
      // resolved snapshots carry the corpus dimensions; apply them after the
      // architecture fields so d_cond lines up
      if (m.contains("frame_dim")) {
        int vocab = m.contains("vocab_size") ? m["vocab_size"].get<int>() : cfg.model.dec.vocab_size;
        cfg.model.finalize(m["frame_dim"].get<int>(), vocab);
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorCategory::Config, "train config field error: " + std::string(e.what()));
  }
  return cfg;
}

uint64_t TrainConfig::config_hash() const { return fnv1a(to_json()); }

// ---- checkpoint io -------------------------------------------------------------

namespace {

constexpr char kCkptMagic[8] = {'S', 'T', 'X', 'C', 'K', 'P', 'T', '1'};

void write_segment(std::ofstream& f, const std::string& name, const std::vector<unsigned char>& payload) {
  uint32_t name_len = uint32_t(name.size());
  uint64_t len = payload.size();
  uint32_t crc = crc32(payload.data(), payload.size());
  f.write(reinterpret_cast<const char*>(&name_len), 4);
  f.write(name.data(), name_len);
  f.write(reinterpret_cast<const char*>(&len), 8);
  f.write(reinterpret_cast<const char*>(payload.data()), std::streamsize(len));
  f.write(reinterpret_cast<const char*>(&crc), 4);
}

std::pair<std::string, std::vector<unsigned char>> read_segment(std::ifstream& f,
                                                                const std::string& path) {
  uint32_t name_len = 0;
  f.read(reinterpret_cast<char*>(&name_len), 4);
  check(f.good() && name_len < 256, ErrorCategory::Data, "corrupt checkpoint segment name: " + path);
  std::string name(name_len, '\0');
  f.read(name.data(), name_len);
  uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), 8);
  check(f.good() && len < (1ull << 33), ErrorCategory::Data, "corrupt checkpoint segment length: " + path);
  std::vector<unsigned char> payload(len);
  f.read(reinterpret_cast<char*>(payload.data()), std::streamsize(len));
  uint32_t crc_stored = 0;
  f.read(reinterpret_cast<char*>(&crc_stored), 4);
  check(f.good(), ErrorCategory::Data, "truncated checkpoint: " + path);
  check(crc32(payload.data(), payload.size()) == crc_stored, ErrorCategory::Data,
        "checkpoint segment '" + name + "' failed its checksum: " + path);
  return {std::move(name), std::move(payload)};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const system::System& sys, const TrainConfig& cfg,
                     const CheckpointMeta& meta) {
  std::ofstream f(path, std::ios::binary);
  check(f.good(), ErrorCategory::Io, "cannot write checkpoint: " + path.string());
  f.write(kCkptMagic, 8);
  uint32_t version = 1;
  f.write(reinterpret_cast<const char*>(&version), 4);
  uint64_t hash = cfg.config_hash();
  f.write(reinterpret_cast<const char*>(&hash), 8);
  int64_t step = meta.step;
  f.write(reinterpret_cast<const char*>(&step), 8);
  int64_t iter[4] = {meta.iter_state.src_epoch, meta.iter_state.src_pos, meta.iter_state.tgt_epoch,
                     meta.iter_state.tgt_pos};
  f.write(reinterpret_cast<const char*>(iter), 32);
  uint32_t zlen = uint32_t(meta.z_star.size());
  f.write(reinterpret_cast<const char*>(&zlen), 4);
  f.write(reinterpret_cast<const char*>(meta.z_star.data()), std::streamsize(8 * zlen));
  uint8_t ds_flag = sys.ds.pretrained() ? 1 : 0;
  f.write(reinterpret_cast<const char*>(&ds_flag), 1);
  uint32_t n_segments = 3;
  f.write(reinterpret_cast<const char*>(&n_segments), 4);
  write_segment(f, "generator", sys.gen.serialize(meta.adam_gen_t));
  write_segment(f, "discriminator", sys.disc.serialize(meta.adam_disc_t));
  write_segment(f, "style_disc", sys.ds.params().serialize(0));
  check(f.good(), ErrorCategory::Io, "short checkpoint write: " + path.string());
}

CheckpointMeta load_checkpoint(const std::filesystem::path& path, system::System& sys,
                               const TrainConfig& cfg) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), ErrorCategory::Io, "cannot open checkpoint: " + path.string());
  char magic[8];
  f.read(magic, 8);
  check(f.good() && std::memcmp(magic, kCkptMagic, 8) == 0, ErrorCategory::Data,
        "bad checkpoint header: " + path.string());
  uint32_t version = 0;
  f.read(reinterpret_cast<char*>(&version), 4);
  check(version == 1, ErrorCategory::Data, "unsupported checkpoint version");
  uint64_t hash = 0;
  f.read(reinterpret_cast<char*>(&hash), 8);
  check(hash == cfg.config_hash(), ErrorCategory::Config,
        "checkpoint config hash mismatch: refusing to resume under a different configuration");
  CheckpointMeta meta;
  int64_t step = 0;
  f.read(reinterpret_cast<char*>(&step), 8);
  meta.step = step;
  int64_t iter[4];
  f.read(reinterpret_cast<char*>(iter), 32);
  meta.iter_state = {iter[0], iter[1], iter[2], iter[3]};
  uint32_t zlen = 0;
  f.read(reinterpret_cast<char*>(&zlen), 4);
  check(f.good() && zlen == uint32_t(cfg.model.enc.d_z), ErrorCategory::Data, "checkpoint z* length mismatch");
  meta.z_star.resize(zlen);
  f.read(reinterpret_cast<char*>(meta.z_star.data()), std::streamsize(8 * zlen));
  uint8_t ds_flag = 0;
  f.read(reinterpret_cast<char*>(&ds_flag), 1);
  uint32_t n_segments = 0;
  f.read(reinterpret_cast<char*>(&n_segments), 4);
  check(f.good() && n_segments == 3, ErrorCategory::Data, "unexpected checkpoint segment count");
  for (uint32_t i = 0; i < n_segments; ++i) {
    auto [name, payload] = read_segment(f, path.string());
    if (name == "generator")
      meta.adam_gen_t = sys.gen.deserialize(payload);
    else if (name == "discriminator")
      meta.adam_disc_t = sys.disc.deserialize(payload);
    else if (name == "style_disc")
      sys.ds.params().deserialize(payload);
    else
      fail(ErrorCategory::Data, "unknown checkpoint segment: " + name);
  }
  if (ds_flag) sys.ds.mark_pretrained();
  return meta;
}

// ---- log records ------------------------------------------------------------------

std::string StepRecord::to_json_line() const {
  json j;
  j["step"] = step;
  j["l_rec"] = losses.l_rec;
  j["l_adv_d"] = losses.l_adv_d;
  j["l_adv_g"] = losses.l_adv_g;
  j["l_dis"] = losses.l_dis;
  j["l_cyc"] = losses.l_cyc;
  j["total"] = losses.total;
  j["wallclock"] = wallclock;
  return j.dump();
}

uint64_t hash_log_stripped(const std::filesystem::path& jsonl_path) {
  std::ifstream f(jsonl_path);
  check(f.good(), ErrorCategory::Io, "cannot open log: " + jsonl_path.string());
  uint64_t h = 0xcbf29ce484222325ull;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    j.erase("wallclock");
    h = fnv1a(j.dump(), h);
    h = fnv1a("\n", h);
  }
  return h;
}

// ---- trainer ------------------------------------------------------------------------

Trainer::Trainer(const corpus::CorpusManifest& manifest, TrainConfig cfg, std::filesystem::path out_dir)
    : manifest_(manifest), cfg_(std::move(cfg)), out_dir_(std::move(out_dir)), frames_(manifest) {
  cfg_.model.finalize(manifest.frame_dim, manifest.vocab_size);
  cfg_.validate();
  std::filesystem::create_directories(out_dir_);
  sys_ = std::make_unique<system::System>(cfg_.model, cfg_.seed);
  for (auto* u : manifest_.select(corpus::Split::train, "", true, false))
    target_train_frames_.push_back(&frames_.frames(u->id));
}

void Trainer::load_style_discriminator(const std::filesystem::path& ds_checkpoint) {
  sys_->ds.load(ds_checkpoint, cfg_.model.enc.trunk_hash());
}

void Trainer::adopt_style_discriminator(const adversaries::StyleDiscriminator& ds) {
  check(ds.pretrained(), ErrorCategory::Gate, "style discriminator is not pretrained");
  // copy parameters into the system's instance (same architecture/config)
  auto payload = ds.params().serialize(0);
  sys_->ds.params().deserialize(payload);
  sys_->ds.mark_pretrained();
}

void Trainer::recompute_z_star() {
  z_star_ = encoders::compute_target_style(sys_->style_enc, sys_->gen, target_train_frames_);
}

double Trainer::z_star_spread() const {
  double sum = 0;
  for (const Mat* f : target_train_frames_) {
    auto det = encoders::style_deterministic(sys_->style_enc, sys_->gen, *f);
    sum += (det.zK - z_star_).norm();
  }
  return sum / double(target_train_frames_.size());
}

Batch Trainer::make_batch(const corpus::PairedBatch& pb) const {
  Batch b;
  for (auto* u : pb.source) b.source.push_back({u, &frames_.frames(u->id)});
  for (auto* u : pb.target) b.target.push_back({u, &frames_.frames(u->id)});
  return b;
}

void Trainer::cache_style_probabilities() {
  for (auto* u : manifest_.select(corpus::Split::train, "", false, true))
    p_ds_cache_[u->id] = sys_->ds.style_probability(frames_.frames(u->id));
}

namespace {

struct ShardOutput {
  double rec_src = 0, rec_tgt = 0, adv_g = 0, dis = 0, cyc_src = 0, cyc_tgt = 0;
  std::vector<Mat> gen_grads;
  std::vector<Mat> fake_frames, real_frames;
};

// Splits [0, n) into contiguous shards of at most `width`.
std::vector<std::pair<int, int>> shard_ranges(int n, int width) {
  std::vector<std::pair<int, int>> out;
  for (int start = 0; start < n; start += width) out.emplace_back(start, std::min(n, start + width));
  return out;
}

}  // namespace

TrainResult Trainer::train(std::optional<std::filesystem::path> resume_from) {
  check(sys_->ds.pretrained(), ErrorCategory::Gate,
        "the style discriminator must be pretrained (and pass its accuracy gate) before training");

  corpus::BatchIterator iterator(manifest_, cfg_.batch_size, cfg_.seed);
  nn::Adam adam_gen, adam_disc;
  adam_gen.lr = cfg_.lr_gen;
  adam_disc.lr = cfg_.lr_disc;
  long start_step = 0;

  if (resume_from) {
    CheckpointMeta meta = load_checkpoint(*resume_from, *sys_, cfg_);
    iterator.restore(meta.iter_state);
    z_star_ = meta.z_star;
    adam_gen.t = meta.adam_gen_t;
    adam_disc.t = meta.adam_disc_t;
    start_step = meta.step;
  }

  cache_style_probabilities();
  if (!resume_from) recompute_z_star();

  const LossWeights w = cfg_.effective_weights();
  const auto opts = cfg_.train_options();
  const int b_pairs = cfg_.batch_size;
  const auto shards = shard_ranges(b_pairs, cfg_.shard_size);

  std::ofstream log(out_dir_ / "train_log.jsonl", resume_from ? std::ios::app : std::ios::trunc);
  std::ofstream eval_log(out_dir_ / "eval_log.jsonl", resume_from ? std::ios::app : std::ios::trunc);
  check(log.good() && eval_log.good(), ErrorCategory::Io, "cannot open training logs under " + out_dir_.string());

  auto t_start = std::chrono::steady_clock::now();
  long epoch_seen = iterator.source_epoch();
  long last_eval_step = start_step - cfg_.eval_every;  // spread metric throttle

  for (long step = start_step; step < cfg_.max_steps; ++step) {
    // (1) paired batch
    corpus::PairedBatch pb = iterator.next();
    if (iterator.source_epoch() != epoch_seen) {
      epoch_seen = iterator.source_epoch();
      if (cfg_.z_star_mode == TrainConfig::ZStarMode::centroid) {
        recompute_z_star();
        if (step - last_eval_step >= cfg_.eval_every) {
          last_eval_step = step;
          json e;
          e["step"] = step;
          e["epoch"] = epoch_seen;
          e["z_star_spread"] = z_star_spread();
          eval_log << e.dump() << "\n";
        }
      }
    }
    Batch batch = make_batch(pb);
    if (cfg_.z_star_mode == TrainConfig::ZStarMode::batch) {
      std::vector<const Mat*> tgt;
      for (const auto& it : batch.target) tgt.push_back(it.frames);
      z_star_ = encoders::compute_target_style(sys_->style_enc, sys_->gen, tgt);
    }

    Mat eps = objectives::source_epsilon(cfg_.model.enc.d_z, b_pairs, cfg_.seed, step);

    // (2) forward every shard: generator terms + transfers (in parallel;
    // shard boundaries are fixed by config, so thread count never changes
    // the arithmetic)
    std::vector<ShardOutput> outputs(shards.size());
    std::vector<std::unique_ptr<ad::Tape>> shard_tapes(shards.size());
    std::vector<GeneratorTerms> shard_terms(shards.size());

    auto run_shard = [&](size_t si) {
      auto [lo, hi] = shards[si];
      Batch sub;
      sub.source.assign(batch.source.begin() + lo, batch.source.begin() + hi);
      sub.target.assign(batch.target.begin() + lo, batch.target.begin() + hi);
      std::vector<double> p_ds;
      for (const auto& it : sub.source) p_ds.push_back(p_ds_cache_.at(it.utt->id));
      Mat eps_sub = eps.middleCols(lo, hi - lo);

      shard_tapes[si] = std::make_unique<ad::Tape>();
      ad::Tape& tape = *shard_tapes[si];
      shard_terms[si] = objectives::build_generator_terms(tape, *sys_, sub, z_star_, eps_sub, p_ds, opts);
      GeneratorTerms& terms = shard_terms[si];

      ShardOutput& out = outputs[si];
      out.rec_src = terms.rec_src.val()(0, 0);
      out.rec_tgt = terms.rec_tgt.val()(0, 0);
      out.dis = terms.dis.val()(0, 0);
      out.cyc_src = terms.cyc_src.val()(0, 0);
      out.cyc_tgt = terms.cyc_tgt.val()(0, 0);
      out.fake_frames = objectives::extract_frames(terms.pieces.trans_src, cfg_.model.dec.frame_dim);
      if (opts.adv_real_ground_truth)
        for (const auto& it : sub.target) out.real_frames.push_back(*it.frames);
      else
        out.real_frames = objectives::extract_frames(terms.pieces.trans_tgt, cfg_.model.dec.frame_dim);
    };

    // runs `task(si)` for every shard with at most cfg_.threads in flight
    auto parallel_shards = [&](const std::function<void(size_t)>& task) {
      if (cfg_.threads == 1 || shards.size() == 1) {
        for (size_t si = 0; si < shards.size(); ++si) task(si);
        return;
      }
      size_t next = 0;
      std::vector<std::future<void>> futs;
      while (next < shards.size()) {
        futs.clear();
        for (int k = 0; k < cfg_.threads && next < shards.size(); ++k, ++next)
          futs.push_back(std::async(std::launch::async, task, next));
        for (auto& f : futs) f.get();
      }
    };

    parallel_shards(run_shard);

    // a non-finite loss aborts with a diagnostic naming the offending term
    auto abort_if_bad = [&](const char* name, double value) {
      if (std::isfinite(value)) return;
      json diag;
      diag["step"] = step;
      diag["abort"] = name;
      diag["value"] = std::isnan(value) ? "nan" : "inf";
      log << diag.dump() << "\n";
      log.flush();
      fail(ErrorCategory::Numeric,
           "non-finite loss at step " + std::to_string(step) + ": " + std::string(name) +
               " (training aborted)");
    };
    {
      double rec = 0, dis = 0, cyc = 0;
      for (const auto& o : outputs) {
        rec += o.rec_src + o.rec_tgt;
        dis += o.dis;
        cyc += o.cyc_src + o.cyc_tgt;
      }
      abort_if_bad("l_rec", rec);
      abort_if_bad("l_dis", dis);
      abort_if_bad("l_cyc", cyc);
    }

    // (3) discriminator sub-steps on the frozen transfers
    double l_adv_d = 0;
    bool adv_d_logged = false;
    int d_steps = cfg_.no_adv ? 0 : cfg_.d_steps_per_g_step;
    for (int d_iter = 0; d_iter < std::max(1, d_steps); ++d_iter) {
      bool update = d_iter < d_steps;
      std::vector<std::vector<Mat>> shard_disc_grads(shards.size());
      std::vector<double> shard_fake(shards.size(), 0.0), shard_real(shards.size(), 0.0);
      parallel_shards([&](size_t si) {
        ad::Tape tape;
        auto [fake_v, real_v] =
            objectives::build_adv_d_sums(tape, *sys_, outputs[si].fake_frames, outputs[si].real_frames);
        shard_fake[si] = fake_v.val()(0, 0);
        shard_real[si] = real_v.val()(0, 0);
        if (update) {
          ad::Var loss = ad::add(ad::scale(fake_v, 1.0 / b_pairs), ad::scale(real_v, 1.0 / b_pairs));
          tape.backward(loss);
          shard_disc_grads[si] = sys_->disc.zero_grads();
          tape.add_param_grads_to(sys_->disc, shard_disc_grads[si]);
        }
      });
      if (!adv_d_logged) {
        double fake_sum = 0, real_sum = 0;
        for (size_t si = 0; si < shards.size(); ++si) {
          fake_sum += shard_fake[si];
          real_sum += shard_real[si];
        }
        l_adv_d = fake_sum / b_pairs + real_sum / b_pairs;
        adv_d_logged = true;
      }
      if (!update) break;  // no_adv: evaluated once for the log, never updated
      std::vector<Mat> disc_grads = sys_->disc.zero_grads();
      for (size_t si = 0; si < shards.size(); ++si)
        for (size_t p = 0; p < disc_grads.size(); ++p) disc_grads[p] += shard_disc_grads[si][p];
      adam_disc.step(sys_->disc, disc_grads, cfg_.clip_norm);
    }

    // (4) generator update on the Eq. 5 total (adv term = non-saturating
    // generator view, evaluated against the D parameters updated in (3))
    std::vector<std::vector<Mat>> shard_gen_grads(shards.size());
    std::vector<double> shard_advg(shards.size(), 0.0);
    parallel_shards([&](size_t si) {
      ad::Tape& tape = *shard_tapes[si];
      GeneratorTerms& terms = shard_terms[si];
      auto [lo, hi] = shards[si];
      std::vector<ad::Var> advg_parts;
      for (int b = 0; b < hi - lo; ++b) {
        encoders::FrameInput in = encoders::FrameInput::from_vars(terms.pieces.trans_src.frames, b,
                                                                  terms.pieces.trans_src.lengths[b]);
        ad::Var logit = sys_->disc_net.logit(tape, sys_->disc, in, /*frozen=*/true);
        ad::Var prob = ad::clamp_prob(ad::sigmoid(logit), adversaries::kProbEps);
        advg_parts.push_back(ad::neg(ad::log_(prob)));
      }
      ad::Var advg = ad::sum(advg_parts.size() == 1 ? advg_parts[0] : ad::hstack(advg_parts));
      shard_advg[si] = advg.val()(0, 0);

      ad::Var total = ad::scale(ad::add(terms.rec_src, terms.rec_tgt), w.alpha / b_pairs);
      total = ad::add(total, ad::scale(advg, w.beta / b_pairs));
      total = ad::add(total, ad::scale(terms.dis, w.gamma / b_pairs));
      total = ad::add(total, ad::scale(ad::add(terms.cyc_src, terms.cyc_tgt), w.lambda / b_pairs));
      if (cfg_.kl_weight > 0) {
        int d_z = cfg_.model.enc.d_z;
        ad::Var kl = ad::add_scalar(ad::add(terms.log_q_sum, ad::scale(terms.zk_sq_sum, 0.5)),
                                    0.5 * d_z * std::log(2.0 * 3.14159265358979323846) * double(hi - lo));
        total = ad::add(total, ad::scale(kl, cfg_.kl_weight / b_pairs));
      }
      tape.backward(total);
      shard_gen_grads[si] = sys_->gen.zero_grads();
      tape.add_param_grads_to(sys_->gen, shard_gen_grads[si]);
      shard_tapes[si].reset();
    });
    double advg_sum = 0;
    std::vector<Mat> gen_grads = sys_->gen.zero_grads();
    for (size_t si = 0; si < shards.size(); ++si) {
      advg_sum += shard_advg[si];
      for (size_t p = 0; p < gen_grads.size(); ++p) gen_grads[p] += shard_gen_grads[si][p];
    }
    adam_gen.step(sys_->gen, gen_grads, cfg_.clip_norm);

    // (5) log
    double rec_src = 0, rec_tgt = 0, dis_sum = 0, cyc_src = 0, cyc_tgt = 0;
    for (const auto& o : outputs) {
      rec_src += o.rec_src;
      rec_tgt += o.rec_tgt;
      dis_sum += o.dis;
      cyc_src += o.cyc_src;
      cyc_tgt += o.cyc_tgt;
    }
    double l_rec = rec_src / b_pairs + rec_tgt / b_pairs;
    double l_adv_g = advg_sum / b_pairs;
    double l_dis = dis_sum / b_pairs;
    double l_cyc = cyc_src / b_pairs + cyc_tgt / b_pairs;
    auto breakdown = objectives::make_breakdown(w, l_rec, l_adv_d, l_adv_g, l_dis, l_cyc);

    const std::pair<const char*, double> components[] = {
        {"l_rec", l_rec}, {"l_adv_d", l_adv_d}, {"l_adv_g", l_adv_g}, {"l_dis", l_dis}, {"l_cyc", l_cyc}};
    for (auto [name, value] : components) abort_if_bad(name, value);

    StepRecord rec;
    rec.step = step;
    rec.losses = breakdown;
    rec.wallclock = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    log << rec.to_json_line() << "\n";

    if (cfg_.checkpoint_every > 0 && (step + 1) % cfg_.checkpoint_every == 0 && step + 1 < cfg_.max_steps) {
      CheckpointMeta meta;
      meta.step = step + 1;
      meta.iter_state = iterator.state();
      meta.z_star = z_star_;
      meta.adam_gen_t = adam_gen.t;
      meta.adam_disc_t = adam_disc.t;
      save_checkpoint(out_dir_ / ("checkpoint_step" + std::to_string(step + 1) + ".bin"), *sys_, cfg_, meta);
    }
  }

  CheckpointMeta meta;
  meta.step = cfg_.max_steps;
  meta.iter_state = iterator.state();
  meta.z_star = z_star_;
  meta.adam_gen_t = adam_gen.t;
  meta.adam_disc_t = adam_disc.t;
  TrainResult result;
  result.checkpoint_path = out_dir_ / "checkpoint.bin";
  result.log_path = out_dir_ / "train_log.jsonl";
  result.eval_log_path = out_dir_ / "eval_log.jsonl";
  result.final_step = cfg_.max_steps;
  save_checkpoint(result.checkpoint_path, *sys_, cfg_, meta);
  return result;
}

Mat transfer(const system::System& sys, const Col& z_star, const Mat& frames,
             const std::vector<int>& tokens, int max_frames) {
  check(frames.rows() >= 1 && frames.cols() == sys.cfg.enc.frame_dim, ErrorCategory::Data,
        "transfer: frame matrix shape mismatch");
  check(all_finite(frames), ErrorCategory::Data, "transfer: non-finite frames");
  Col r = encoders::encode_speaker(sys.speaker_enc, sys.gen, frames);
  Col cond(r.size() + z_star.size());
  cond << r, z_star;
  auto out = decoder::decode_free_running(sys.dec, sys.gen, tokens, cond, max_frames);
  check(all_finite(out.frames_hat), ErrorCategory::Numeric, "transfer produced non-finite frames");
  return out.frames_hat;
}

}  // namespace stx::trainer
