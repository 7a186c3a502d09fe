#include "stx/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "stx/trainer.hpp"

namespace stx::evalkit {

using json = nlohmann::ordered_json;

Col probe_features(const Mat& frames, int segments) {
  int t_len = int(frames.rows());
  int f_dim = int(frames.cols());
  Col feats(segments * (f_dim + 1));
  for (int s = 0; s < segments; ++s) {
    int lo = s * t_len / segments;
    int hi = std::max(lo + 1, (s + 1) * t_len / segments);
    hi = std::min(hi, t_len);
    Mat block = frames.middleRows(lo, hi - lo);
    Col mean = block.colwise().mean().transpose();
    // within-segment energy deviation catches fast contours that average out
    Col energy = block.rowwise().norm();
    double dev = energy.size() > 1 ? std::sqrt((energy.array() - energy.mean()).square().sum() /
                                               double(energy.size()))
                                   : 0.0;
    feats.segment(s * (f_dim + 1), f_dim) = mean;
    feats(s * (f_dim + 1) + f_dim) = dev;
  }
  return feats;
}

uint64_t frame_hash(const Mat& frames) {
  // hash the float32 image of the matrix so disk round-trips agree
  std::vector<float> buf(size_t(frames.size()));
  for (int j = 0; j < frames.cols(); ++j)
    for (int i = 0; i < frames.rows(); ++i) buf[size_t(j) * frames.rows() + i] = float(frames(i, j));
  return fnv1a_bytes(buf.data(), buf.size() * sizeof(float));
}

// ---- probes -------------------------------------------------------------------

namespace {

Mat feature_matrix(const std::vector<const corpus::Utterance*>& utts, const corpus::FrameCache& frames,
                   int segments) {
  require(!utts.empty(), "empty feature set");
  Col first = probe_features(frames.frames(utts[0]->id), segments);
  Mat x(first.size(), utts.size());
  x.col(0) = first;
  for (size_t i = 1; i < utts.size(); ++i) x.col(i) = probe_features(frames.frames(utts[i]->id), segments);
  return x;
}

}  // namespace

struct ProbeTrainer {
  static void init(Probes& probes, std::vector<std::string> style_classes, int segments) {
    probes.style.classes_ = std::move(style_classes);
    probes.style.segments_ = segments;
    probes.speaker.segments_ = segments;
  }

  static void train_style(StyleProbe& probe, const Mat& x, const std::vector<int>& labels, int classes,
                          const ProbeConfig& cfg, long& steps) {
    Rng rng = Rng(cfg.seed).stream(0x7374796c);  // "styl"
    nn::ParamStore ps;
    int w1 = ps.add("w1", nn::glorot(rng, cfg.hidden, int(x.rows())));
    int b1 = ps.add("b1", Mat::Zero(cfg.hidden, 1));
    int w2 = ps.add("w2", nn::glorot(rng, classes, cfg.hidden));
    int b2 = ps.add("b2", Mat::Zero(classes, 1));
    nn::Adam adam;
    adam.lr = cfg.lr;
    int n = int(x.cols());
    Mat onehot = Mat::Zero(classes, n);
    for (int i = 0; i < n; ++i) onehot(labels[i], i) = 1.0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      ad::Tape t;
      ad::Var hidden = ad::tanh_(ad::affine(t.param(ps, w1), t.constant(x), t.param(ps, b1)));
      ad::Var logits = ad::affine(t.param(ps, w2), hidden, t.param(ps, b2));
      // cross entropy via log-sum-exp
      ad::Var shifted = logits;  // numeric range is mild at this scale
      ad::Var log_z = ad::log_(ad::col_sums(ad::exp_(shifted)));
      ad::Var picked = ad::col_sums(ad::mul_const(shifted, onehot));
      ad::Var loss = ad::scale(ad::sum(ad::sub(log_z, picked)), 1.0 / double(n));
      t.backward(loss);
      std::vector<Mat> grads = ps.zero_grads();
      t.add_param_grads_to(ps, grads);
      adam.step(ps, grads, 5.0);
      ++steps;
    }
    probe.w1 = ps.value(w1);
    probe.b1 = ps.value(b1);
    probe.w2 = ps.value(w2);
    probe.b2 = ps.value(b2);
  }

  static void train_speaker(SpeakerProbe& probe, const Mat& x, const std::vector<int>& labels,
                            const ProbeConfig& cfg, long& steps) {
    Rng rng = Rng(cfg.seed).stream(0x73706b70);  // "spkp"
    nn::ParamStore ps;
    int w1 = ps.add("w1", nn::glorot(rng, cfg.hidden, int(x.rows())));
    int b1 = ps.add("b1", Mat::Zero(cfg.hidden, 1));
    int w2 = ps.add("w2", nn::glorot(rng, cfg.embed_dim, cfg.hidden));
    int b2 = ps.add("b2", Mat::Zero(cfg.embed_dim, 1));
    nn::Adam adam;
    adam.lr = cfg.lr;
    int n = int(x.cols());
    // supervised contrastive loss with within-batch (full-set) negatives
    const double tau = 0.1;
    Mat same = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (i != j && labels[i] == labels[j]) same(i, j) = 1.0;
    Mat off_diag = Mat::Ones(n, n) - Mat::Identity(n, n);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      ad::Tape t;
      ad::Var hidden = ad::tanh_(ad::affine(t.param(ps, w1), t.constant(x), t.param(ps, b1)));
      ad::Var z = ad::l2_normalize_cols(ad::affine(t.param(ps, w2), hidden, t.param(ps, b2)));
      ad::Var sims = ad::scale(ad::matmul_tn(z, z), 1.0 / tau);  // n x n
      ad::Var expo = ad::exp_(sims);
      ad::Var denom = ad::col_sums(ad::mul_const(expo, off_diag));  // 1 x n
      ad::Var numer = ad::col_sums(ad::mul_const(expo, same));
      ad::Var loss = ad::scale(ad::sum(ad::sub(ad::log_(denom), ad::log_(numer))), 1.0 / double(n));
      t.backward(loss);
      std::vector<Mat> grads = ps.zero_grads();
      t.add_param_grads_to(ps, grads);
      adam.step(ps, grads, 5.0);
      ++steps;
    }
    probe.w1 = ps.value(w1);
    probe.b1 = ps.value(b1);
    probe.w2 = ps.value(w2);
    probe.b2 = ps.value(b2);
  }
};

int StyleProbe::predict(const Mat& frames) const {
  Col f = probe_features(frames, segments_);
  Col h = (w1 * f + b1.col(0)).array().tanh();
  Col logits = w2 * h + b2.col(0);
  int best = 0;
  logits.maxCoeff(&best);
  return best;
}

std::string StyleProbe::predict_label(const Mat& frames) const { return classes_[predict(frames)]; }

double StyleProbe::accuracy(const std::vector<std::pair<const Mat*, std::string>>& labeled) const {
  require(!labeled.empty(), "empty eval set");
  int ok = 0;
  for (const auto& [frames, label] : labeled)
    if (classes_[predict(*frames)] == label) ++ok;
  return double(ok) / double(labeled.size());
}

Col SpeakerProbe::embed(const Mat& frames) const {
  Col f = probe_features(frames, segments_);
  Col h = (w1 * f + b1.col(0)).array().tanh();
  Col z = w2 * h + b2.col(0);
  double norm = std::max(z.norm(), 1e-12);
  return z / norm;
}

Probes train_probes(const corpus::CorpusManifest& manifest, const corpus::FrameCache& frames,
                    const ProbeConfig& cfg) {
  auto train = manifest.select(corpus::Split::train);
  auto dev = manifest.select(corpus::Split::dev);
  check(!train.empty() && !dev.empty(), ErrorCategory::Data, "probe training needs train and dev splits");

  // class sets from the train split
  std::vector<std::string> style_classes, speaker_classes;
  for (auto* u : train) {
    if (std::find(style_classes.begin(), style_classes.end(), u->style_id) == style_classes.end())
      style_classes.push_back(u->style_id);
    if (std::find(speaker_classes.begin(), speaker_classes.end(), u->speaker_id) == speaker_classes.end())
      speaker_classes.push_back(u->speaker_id);
  }
  std::sort(style_classes.begin(), style_classes.end());
  std::sort(speaker_classes.begin(), speaker_classes.end());
  check(style_classes.size() >= 2, ErrorCategory::Data,
        "cannot train a style probe on a single style class");

  Probes probes;
  ProbeTrainer::init(probes, style_classes, cfg.segments);

  Mat x = feature_matrix(train, frames, cfg.segments);
  std::vector<int> style_labels, speaker_labels;
  for (auto* u : train) {
    style_labels.push_back(int(std::find(style_classes.begin(), style_classes.end(), u->style_id) -
                               style_classes.begin()));
    speaker_labels.push_back(int(std::find(speaker_classes.begin(), speaker_classes.end(), u->speaker_id) -
                                 speaker_classes.begin()));
    probes.training_hashes.insert(frame_hash(frames.frames(u->id)));
  }

  ProbeTrainer::train_style(probes.style, x, style_labels, int(style_classes.size()), cfg,
                            probes.report.style_steps);
  ProbeTrainer::train_speaker(probes.speaker, x, speaker_labels, cfg, probes.report.speaker_steps);

  // held-out gates
  {
    std::vector<std::pair<const Mat*, std::string>> labeled;
    for (auto* u : dev) labeled.emplace_back(&frames.frames(u->id), u->style_id);
    probes.report.style_accuracy = probes.style.accuracy(labeled);
  }
  {
    // nearest-centroid speaker accuracy over dev embeddings
    std::map<std::string, Col> centroids;
    std::map<std::string, int> counts;
    for (auto* u : train) {
      Col e = probes.speaker.embed(frames.frames(u->id));
      auto [it, fresh] = centroids.try_emplace(u->speaker_id, Col::Zero(e.size()));
      it->second += e;
      counts[u->speaker_id] += 1;
    }
    for (auto& [id, c] : centroids) c /= double(counts[id]);
    int ok = 0;
    for (auto* u : dev) {
      Col e = probes.speaker.embed(frames.frames(u->id));
      double best = -2;
      std::string best_id;
      for (const auto& [id, c] : centroids) {
        double cos = e.dot(c) / std::max(c.norm(), 1e-12);
        if (cos > best) {
          best = cos;
          best_id = id;
        }
      }
      if (best_id == u->speaker_id) ++ok;
    }
    probes.report.speaker_accuracy = double(ok) / double(dev.size());
  }

  check(probes.report.style_accuracy >= cfg.gate, ErrorCategory::Gate,
        "style probe held-out accuracy " + std::to_string(probes.report.style_accuracy) +
            " is below the gate " + std::to_string(cfg.gate) + "; the corpus is not separable enough");
  check(probes.report.speaker_accuracy >= cfg.gate, ErrorCategory::Gate,
        "speaker probe held-out accuracy " + std::to_string(probes.report.speaker_accuracy) +
            " is below the gate " + std::to_string(cfg.gate));
  return probes;
}

// ---- metrics --------------------------------------------------------------------

double style_transfer_accuracy(const system::System& sys, const Col& z_star,
                               const std::vector<const corpus::Utterance*>& eval_set,
                               const corpus::FrameCache& frames, const Probes& probes,
                               const std::string& target_style, int max_frames) {
  check(!eval_set.empty(), ErrorCategory::Data, "empty eval set");
  int hits = 0;
  for (auto* u : eval_set) {
    Mat out = trainer::transfer(sys, z_star, frames.frames(u->id), u->tokens, max_frames);
    check(!probes.training_hashes.count(frame_hash(out)), ErrorCategory::Gate,
          "leakage guard: a transfer output collides with probe training data");
    if (probes.style.predict_label(out) == target_style) ++hits;
  }
  return double(hits) / double(eval_set.size());
}

double speaker_cosine(const system::System& sys, const Col& z_star,
                      const std::vector<const corpus::Utterance*>& eval_set,
                      const corpus::CorpusManifest& manifest, const corpus::FrameCache& frames,
                      const SpeakerProbe& probe, int max_frames, uint64_t seed) {
  check(!eval_set.empty(), ErrorCategory::Data, "empty eval set");
  double sum = 0;
  for (auto* u : eval_set) {
    Mat out = trainer::transfer(sys, z_star, frames.frames(u->id), u->tokens, max_frames);
    Col e_t = probe.embed(out);
    // random ground-truth utterance of the same speaker (not the source
    // itself when an alternative exists)
    std::vector<const corpus::Utterance*> pool;
    for (const auto& cand : manifest.utterances)
      if (cand.speaker_id == u->speaker_id && cand.id != u->id) pool.push_back(&cand);
    if (pool.empty()) pool.push_back(u);
    Rng r = Rng(seed).stream(fnv1a(u->id));
    const corpus::Utterance* pick = pool[r.uniform_int(int(pool.size()))];
    Col e_g = probe.embed(frames.frames(pick->id));
    sum += e_t.dot(e_g);
  }
  return sum / double(eval_set.size());
}

namespace {

double recon_mse(const system::System& sys, const std::vector<const corpus::Utterance*>& eval_set,
                 const corpus::FrameCache& frames) {
  double sum = 0;
  for (auto* u : eval_set) {
    const Mat& f = frames.frames(u->id);
    Rng rng(fnv1a(u->id));
    auto post = encoders::style_deterministic(sys.style_enc, sys.gen, f);
    Col r = encoders::encode_speaker(sys.speaker_enc, sys.gen, f);
    Col cond(r.size() + post.zK.size());
    cond << r, post.zK;
    auto out = decoder::decode_teacher_forced(sys.dec, sys.gen, u->tokens, cond, f);
    sum += (out.frames_hat - f).squaredNorm() / double(f.size());
  }
  return sum / double(eval_set.size());
}

}  // namespace

EvalOutcome evaluate_transfer(const system::System& sys, const Col& z_star,
                              const corpus::CorpusManifest& manifest, const corpus::FrameCache& frames,
                              const Probes& probes, const EvalRequest& req) {
  auto unseen_ids = manifest.unseen_style_ids();
  auto is_unseen = [&](const std::string& style) {
    return std::find(unseen_ids.begin(), unseen_ids.end(), style) != unseen_ids.end();
  };
  std::vector<const corpus::Utterance*> seen_set, unseen_set;
  for (auto* u : manifest.select(req.split, "", false, true)) {
    if (is_unseen(u->style_id))
      unseen_set.push_back(u);
    else
      seen_set.push_back(u);
  }
  EvalOutcome out;
  auto fill = [&](const std::vector<const corpus::Utterance*>& set, DirectionMetrics& m) {
    if (set.empty()) return;
    m.n = int(set.size());
    m.style_accuracy = style_transfer_accuracy(sys, z_star, set, frames, probes,
                                               manifest.target_style_id, req.max_frames);
    m.speaker_cosine =
        speaker_cosine(sys, z_star, set, manifest, frames, probes.speaker, req.max_frames, req.seed);
    m.recon_mse = recon_mse(sys, set, frames);
  };
  fill(seen_set, out.seen);
  fill(unseen_set, out.unseen);
  return out;
}

// ---- report ---------------------------------------------------------------------

namespace {

json metrics_json(const DirectionMetrics& m) {
  return json{{"style_accuracy", m.style_accuracy},
              {"speaker_cosine", m.speaker_cosine},
              {"recon_mse", m.recon_mse},
              {"n", m.n}};
}

DirectionMetrics metrics_from(const json& j) {
  DirectionMetrics m;
  m.style_accuracy = j.at("style_accuracy").get<double>();
  m.speaker_cosine = j.at("speaker_cosine").get<double>();
  m.recon_mse = j.at("recon_mse").get<double>();
  m.n = j.at("n").get<int>();
  return m;
}

}  // namespace

std::string EvalReport::to_json() const {
  json j;
  j["format"] = "stx-report-v1";
  j["config_hash"] = config_hash;
  j["corpus_hash"] = corpus_hash;
  j["probes"] = {{"style_accuracy", probes.style_accuracy},
                 {"speaker_accuracy", probes.speaker_accuracy},
                 {"style_steps", probes.style_steps},
                 {"speaker_steps", probes.speaker_steps}};
  j["models"] = json::array();
  for (const auto& row : models) {
    j["models"].push_back(json{{"name", row.name},
                               {"seen", metrics_json(row.seen)},
                               {"unseen", metrics_json(row.unseen)}});
  }
  j["reference_context"] = reference_context;
  return j.dump(1);
}

EvalReport EvalReport::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCategory::Data, "malformed report json: " + std::string(e.what()));
  }
  EvalReport r;
  try {
    check(j.at("format").get<std::string>() == "stx-report-v1", ErrorCategory::Data,
          "unsupported report format");
    r.config_hash = j.at("config_hash").get<std::string>();
    r.corpus_hash = j.at("corpus_hash").get<std::string>();
    r.probes.style_accuracy = j.at("probes").at("style_accuracy").get<double>();
    r.probes.speaker_accuracy = j.at("probes").at("speaker_accuracy").get<double>();
    r.probes.style_steps = j.at("probes").at("style_steps").get<long>();
    r.probes.speaker_steps = j.at("probes").at("speaker_steps").get<long>();
    for (const auto& jm : j.at("models")) {
      ModelRow row;
      row.name = jm.at("name").get<std::string>();
      row.seen = metrics_from(jm.at("seen"));
      row.unseen = metrics_from(jm.at("unseen"));
      r.models.push_back(std::move(row));
    }
    if (j.contains("reference_context"))
      r.reference_context = j["reference_context"].get<std::map<std::string, double>>();
  } catch (const json::exception& e) {
    fail(ErrorCategory::Data, "report missing or mistyped field: " + std::string(e.what()));
  }
  return r;
}

namespace {

// Minimal line-chart SVG writer: one polyline per named series.
void write_svg(const std::filesystem::path& path, const std::string& title,
               const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series,
               bool log_y) {
  const int width = 860, height = 420, margin = 56;
  double x_min = 1e300, x_max = -1e300, y_min = 1e300, y_max = -1e300;
  for (const auto& [name, pts] : series) {
    for (auto [x, y] : pts) {
      double yy = log_y ? std::log10(std::max(y, 1e-12)) : y;
      x_min = std::min(x_min, x);
      x_max = std::max(x_max, x);
      y_min = std::min(y_min, yy);
      y_max = std::max(y_max, yy);
    }
  }
  if (x_max <= x_min) x_max = x_min + 1;
  if (y_max <= y_min) y_max = y_min + 1;
  auto sx = [&](double x) { return margin + (x - x_min) / (x_max - x_min) * (width - 2 * margin); };
  auto sy = [&](double y) {
    double yy = log_y ? std::log10(std::max(y, 1e-12)) : y;
    return height - margin - (yy - y_min) / (y_max - y_min) * (height - 2 * margin);
  };
  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ofstream f(path);
  check(f.good(), ErrorCategory::Io, "cannot write plot: " + path.string());
  f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height << "'>\n";
  f << "<rect width='100%' height='100%' fill='white'/>\n";
  f << "<text x='" << width / 2 << "' y='24' text-anchor='middle' font-family='sans-serif' font-size='16'>"
    << title << (log_y ? " (log scale)" : "") << "</text>\n";
  f << "<line x1='" << margin << "' y1='" << height - margin << "' x2='" << width - margin << "' y2='"
    << height - margin << "' stroke='black'/>\n";
  f << "<line x1='" << margin << "' y1='" << margin << "' x2='" << margin << "' y2='" << height - margin
    << "' stroke='black'/>\n";
  int ci = 0;
  int legend_y = margin;
  for (const auto& [name, pts] : series) {
    const char* color = colors[ci % 6];
    f << "<polyline fill='none' stroke='" << color << "' stroke-width='1.2' points='";
    for (auto [x, y] : pts) f << sx(x) << "," << sy(y) << " ";
    f << "'/>\n";
    f << "<text x='" << width - margin + 4 << "' y='" << legend_y << "' font-family='sans-serif' "
      << "font-size='11' fill='" << color << "'>" << name << "</text>\n";
    legend_y += 14;
    ++ci;
  }
  f << "</svg>\n";
}

}  // namespace

void emit_report(const EvalReport& report, const std::filesystem::path& out_dir,
                 const std::filesystem::path& train_log, bool no_plots) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  check(std::filesystem::is_directory(out_dir), ErrorCategory::Io,
        "cannot create report directory: " + out_dir.string());
  {
    std::ofstream f(out_dir / "report.json");
    check(f.good(), ErrorCategory::Io, "cannot write report.json");
    f << report.to_json() << "\n";
  }
  {
    std::ofstream f(out_dir / "transfer_metrics.csv");
    check(f.good(), ErrorCategory::Io, "cannot write transfer_metrics.csv");
    f << "model,direction,style_acc,speaker_cos,recon_mse\n";
    for (const auto& row : report.models) {
      f << row.name << ",seen," << row.seen.style_accuracy << "," << row.seen.speaker_cosine << ","
        << row.seen.recon_mse << "\n";
      f << row.name << ",unseen," << row.unseen.style_accuracy << "," << row.unseen.speaker_cosine << ","
        << row.unseen.recon_mse << "\n";
    }
  }
  if (no_plots || train_log.empty()) return;

  std::ifstream f(train_log);
  if (!f.good()) return;  // plots are best-effort when no log is provided
  std::vector<std::pair<double, double>> rec, advd, advg, dis, cyc, total;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("l_rec")) continue;
    double step = j["step"].get<double>();
    rec.emplace_back(step, j["l_rec"].get<double>());
    advd.emplace_back(step, j["l_adv_d"].get<double>());
    advg.emplace_back(step, j["l_adv_g"].get<double>());
    dis.emplace_back(step, j["l_dis"].get<double>());
    cyc.emplace_back(step, j["l_cyc"].get<double>());
    total.emplace_back(step, j["total"].get<double>());
  }
  if (!rec.empty()) {
    write_svg(out_dir / "loss_curves.svg", "training losses",
              {{"l_rec", rec}, {"l_cyc", cyc}, {"total", total}}, /*log_y=*/true);
    write_svg(out_dir / "adversarial_curves.svg", "adversarial and distortion losses",
              {{"l_adv_d", advd}, {"l_adv_g", advg}, {"l_dis", dis}}, /*log_y=*/false);
  }
  // companion eval log (z* spread) when present next to the training log
  auto eval_path = train_log.parent_path() / "eval_log.jsonl";
  std::ifstream ef(eval_path);
  if (ef.good()) {
    std::vector<std::pair<double, double>> spread;
    while (std::getline(ef, line)) {
      if (line.empty()) continue;
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.contains("z_star_spread")) continue;
      spread.emplace_back(j["step"].get<double>(), j["z_star_spread"].get<double>());
    }
    if (!spread.empty())
      write_svg(out_dir / "z_star_spread.svg", "target-style spread over training",
                {{"mean |zK - z*|", spread}}, false);
  }
}

}  // namespace stx::evalkit
