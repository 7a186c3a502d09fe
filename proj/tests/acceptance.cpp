// Acceptance suite: runs every acceptance criterion end-to-end on the
// default configuration and prints one PASS/FAIL line per criterion.
// Exit code = number of failed criteria.
//
// The heavy criteria train real models; expect roughly 1.5 hours on two
// hyperthreads. `--only N[,M...]` restricts the run while debugging.

#include <chrono>
#include <cstring>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "stx/evalkit.hpp"
#include "stx/trainer.hpp"
#include "testing.hpp"

using namespace stx;
using Clock = std::chrono::steady_clock;

namespace {

struct Criterion {
  int id;
  bool pass = false;
  std::string detail;
  double seconds = 0;
};

std::vector<Criterion> results;

void report(int id, bool pass, const std::string& detail, double seconds) {
  results.push_back({id, pass, detail, seconds});
  std::printf("[%d] %s %s (%.1f s)\n", id, pass ? "PASS" : "FAIL", detail.c_str(), seconds);
  std::fflush(stdout);
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::filesystem::path work_dir() {
  static auto dir = [] {
    auto p = std::filesystem::temp_directory_path() / "stx_acceptance";
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
  }();
  return dir;
}

// ---- shared artifacts (built once, reused across criteria) -----------------

const corpus::CorpusManifest& default_corpus() {
  static corpus::CorpusManifest m = [] {
    auto cfg = corpus::default_generator_config(7);
    return corpus::generate_corpus(cfg, work_dir() / "corpus");
  }();
  return m;
}

const corpus::FrameCache& default_frames() {
  static corpus::FrameCache cache(default_corpus());
  return cache;
}

trainer::TrainConfig default_train_config() {
  trainer::TrainConfig cfg;
  cfg.model.finalize(default_corpus().frame_dim, default_corpus().vocab_size);
  cfg.seed = 1;
  return cfg;
}

const std::filesystem::path& pretrained_ds_path() {
  static std::filesystem::path path = [] {
    auto cfg = default_train_config();
    adversaries::StyleDiscriminator ds(cfg.model.enc, cfg.seed);
    auto rep = ds.pretrain(default_corpus(), default_frames(), 0.2, cfg.seed);
    auto p = work_dir() / "ds_checkpoint.bin";
    ds.save(p, cfg.model.enc.trunk_hash());
    std::ofstream(work_dir() / "ds_report.json") << rep.to_json() << "\n";
    return p;
  }();
  return path;
}

double pretrained_ds_accuracy() {
  pretrained_ds_path();
  std::ifstream f(work_dir() / "ds_report.json");
  nlohmann::json j;
  f >> j;
  return j["held_out_accuracy"].get<double>();
}

const evalkit::Probes& shared_probes() {
  static evalkit::Probes probes = evalkit::train_probes(default_corpus(), default_frames());
  return probes;
}

struct LogRow {
  long step;
  double l_rec, l_adv_d, l_adv_g, l_dis, l_cyc, total;
};

std::vector<LogRow> read_log(const std::filesystem::path& p) {
  std::ifstream f(p);
  std::vector<LogRow> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    if (!j.contains("l_rec")) continue;
    rows.push_back({j["step"].get<long>(), j["l_rec"].get<double>(), j["l_adv_d"].get<double>(),
                    j["l_adv_g"].get<double>(), j["l_dis"].get<double>(), j["l_cyc"].get<double>(),
                    j["total"].get<double>()});
  }
  return rows;
}

trainer::TrainResult run_training(const std::string& tag, trainer::TrainConfig cfg,
                                  std::optional<std::filesystem::path> resume = std::nullopt) {
  trainer::Trainer tr(default_corpus(), cfg, work_dir() / tag);
  tr.load_style_discriminator(pretrained_ds_path());
  return tr.train(resume);
}

evalkit::EvalOutcome eval_checkpoint(const std::filesystem::path& ckpt, const trainer::TrainConfig& cfg) {
  system::System sys(cfg.model, cfg.seed);
  auto meta = trainer::load_checkpoint(ckpt, sys, cfg);
  evalkit::EvalRequest req;
  req.max_frames = cfg.max_frames;
  return evalkit::evaluate_transfer(sys, meta.z_star, default_corpus(), default_frames(), shared_probes(),
                                    req);
}

// ---- criterion 1: flow correctness ------------------------------------------

void criterion_1() {
  auto t0 = Clock::now();
  double worst_logdet = 0, worst_inverse = 0;
  int instances = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng seed_rng = Rng(5000 + trial);
    encoders::EncoderConfig cfg;
    cfg.d_z = 2 + trial % 7;           // 2..8
    cfg.flow_steps = 1 + trial % 4;    // 1..4
    cfg.d_h = 4 + trial % 5;
    cfg.made_hidden = 8 + trial % 9;
    cfg.frame_dim = 16;
    cfg.conv_layers = 2;
    cfg.conv_base_channels = 2;
    cfg.gru_units = 4;
    nn::ParamStore ps;
    Rng init(seed_rng.next_u64());
    encoders::IafFlow flow(ps, init, cfg, "flow");
    // random parameters beyond the default init
    for (int i = 0; i < ps.size(); ++i) {
      auto& v = ps.value(i);
      for (int k = 0; k < v.size(); ++k) v.data()[k] += 0.3 * init.gaussian();
    }
    Col z0(cfg.d_z), h(cfg.d_h);
    for (int i = 0; i < cfg.d_z; ++i) z0(i) = 1.5 * init.gaussian();
    for (int i = 0; i < cfg.d_h; ++i) h(i) = init.gaussian();

    ad::Tape t;
    auto out = flow.forward(t, ps, t.constant(z0), t.constant(h));
    double analytic = 0;
    for (const auto& ld : out.log_dets) analytic += ld.val()(0, 0);

    // numeric Jacobian via central differences
    Mat jac(cfg.d_z, cfg.d_z);
    double step = 1e-5;
    for (int j = 0; j < cfg.d_z; ++j) {
      Col zp = z0, zm = z0;
      zp(j) += step;
      zm(j) -= step;
      ad::Tape tj;
      auto fp = flow.forward(tj, ps, tj.constant(zp), tj.constant(h));
      auto fm = flow.forward(tj, ps, tj.constant(zm), tj.constant(h));
      jac.col(j) = (fp.zK.val().col(0) - fm.zK.val().col(0)) / (2 * step);
    }
    double numeric = std::log(std::abs(jac.determinant()));
    worst_logdet = std::max(worst_logdet, std::abs(analytic - numeric));

    Col rec = flow.invert(ps, out.zK.val().col(0), h);
    worst_inverse = std::max(worst_inverse, (rec - z0).norm());
    ++instances;
  }
  double secs = seconds_since(t0);
  bool pass = worst_logdet <= 1e-4 && worst_inverse <= 1e-6 && secs < 60.0 && instances == 100;
  std::ostringstream os;
  os << "flow correctness: max |logdet err| " << worst_logdet << ", max inverse err " << worst_inverse
     << " over " << instances << " instances";
  report(1, pass, os.str(), secs);
}

// ---- criterion 2: gradient suite ---------------------------------------------

struct GradStats {
  long total = 0, passed = 0;
};

GradStats fd_sweep(nn::ParamStore& ps, const std::vector<Mat>& analytic,
                   const std::function<double()>& value) {
  GradStats st;
  const double h = 1e-6;
  for (int p = 0; p < ps.size(); ++p) {
    Mat& v = ps.value(p);
    for (int k = 0; k < v.size(); ++k) {
      double orig = v.data()[k];
      v.data()[k] = orig + h;
      double up = value();
      v.data()[k] = orig - h;
      double down = value();
      v.data()[k] = orig;
      double numeric = (up - down) / (2 * h);
      double a = analytic[p].data()[k];
      double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      ++st.total;
      if (rel <= 1e-3) ++st.passed;
    }
  }
  return st;
}

void criterion_2() {
  auto t0 = Clock::now();
  // tiny configuration: d_z = 4, F = 8, T <= 10
  auto gen_cfg = corpus::default_generator_config(99);
  gen_cfg.frame_dim = 8;
  gen_cfg.vocab_size = 6;
  gen_cfg.t_min = 8;
  gen_cfg.t_max = 10;
  gen_cfg.utterances_per_style = 10;
  gen_cfg.unseen_utterances = 10;
  auto manifest = corpus::generate_corpus(gen_cfg, work_dir() / "tiny_corpus");
  corpus::FrameCache frames(manifest);

  system::ModelConfig model;
  model.enc.d_z = 4;
  model.enc.d_r = 4;
  model.enc.d_h = 4;
  model.enc.conv_layers = 2;
  model.enc.gru_units = 6;
  model.enc.flow_steps = 2;
  model.enc.conv_base_channels = 2;
  model.enc.made_hidden = 6;
  model.enc.speaker_hidden = 6;
  model.enc.speaker_proj = 4;
  model.dec.emb_dim = 4;
  model.dec.enc_units = 4;
  model.dec.att_dim = 4;
  model.dec.dec_units = 8;
  model.disc.conv_layers = 2;
  model.disc.base_channels = 2;
  model.finalize(8, 6);
  system::System sys(model, 77);
  // give D a usable head so generator-view gradients flow
  {
    Rng hr(7);
    auto& head = sys.disc.value(sys.disc.find("d.head.w"));
    for (int i = 0; i < head.size(); ++i) head.data()[i] = hr.uniform(-0.4, 0.4);
  }

  auto src = manifest.select(corpus::Split::train, "", false, true);
  auto tgt = manifest.select(corpus::Split::train, "", true, false);
  objectives::Batch batch;
  for (int i = 0; i < 2; ++i) {
    batch.source.push_back({src[i], &frames.frames(src[i]->id)});
    batch.target.push_back({tgt[i], &frames.frames(tgt[i]->id)});
  }
  Col z_star(4);
  z_star << 0.2, -0.1, 0.3, 0.05;
  Mat eps = objectives::source_epsilon(4, 2, 3, 0);
  std::vector<double> p_ds{0.4, 0.8};
  objectives::TrainOptions opts;

  long coords = sys.gen.total_coords() + sys.disc.total_coords();
  std::ostringstream os;
  os << "gradient suite (" << coords << " coordinates):";
  bool all_pass = true;

  auto check_gen_loss = [&](const char* name, const std::function<ad::Var(ad::Tape&)>& build) {
    std::vector<Mat> analytic = sys.gen.zero_grads();
    {
      ad::Tape t;
      ad::Var loss = build(t);
      t.backward(loss);
      t.add_param_grads_to(sys.gen, analytic);
    }
    auto value = [&]() {
      ad::Tape t;
      return build(t).val()(0, 0);
    };
    GradStats st = fd_sweep(sys.gen, analytic, value);
    double frac = double(st.passed) / double(st.total);
    os << " " << name << " " << st.passed << "/" << st.total;
    if (frac < 0.99) all_pass = false;
  };

  check_gen_loss("L_rec", [&](ad::Tape& t) {
    auto g = objectives::build_generator_terms(t, sys, batch, z_star, eps, p_ds, opts);
    return ad::scale(ad::add(g.rec_src, g.rec_tgt), 0.5);
  });
  check_gen_loss("L_dis", [&](ad::Tape& t) {
    auto g = objectives::build_generator_terms(t, sys, batch, z_star, eps, p_ds, opts);
    return ad::scale(g.dis, 0.5);
  });
  check_gen_loss("L_cyc", [&](ad::Tape& t) {
    auto g = objectives::build_generator_terms(t, sys, batch, z_star, eps, p_ds, opts);
    return ad::scale(ad::add(g.cyc_src, g.cyc_tgt), 0.5);
  });
  check_gen_loss("L_adv_G", [&](ad::Tape& t) {
    auto g = objectives::build_generator_terms(t, sys, batch, z_star, eps, p_ds, opts);
    std::vector<ad::Var> parts;
    for (int b = 0; b < 2; ++b) {
      auto in = encoders::FrameInput::from_vars(g.pieces.trans_src.frames, b,
                                                g.pieces.trans_src.lengths[b]);
      ad::Var logit = sys.disc_net.logit(t, sys.disc, in, /*frozen=*/true);
      parts.push_back(ad::neg(ad::log_(ad::clamp_prob(ad::sigmoid(logit), adversaries::kProbEps))));
    }
    return ad::scale(ad::sum(ad::hstack(parts)), 0.5);
  });

  // discriminator view: fixed transfers, gradients w.r.t. D parameters
  {
    std::vector<Mat> fake, real;
    {
      ad::Tape t;
      auto p = objectives::build_pieces(t, sys, batch, z_star, eps, opts);
      fake = objectives::extract_frames(p.trans_src, 8);
      real = objectives::extract_frames(p.trans_tgt, 8);
    }
    auto build = [&](ad::Tape& t) {
      auto [f, r] = objectives::build_adv_d_sums(t, sys, fake, real);
      return ad::scale(ad::add(f, r), 0.5);
    };
    std::vector<Mat> analytic = sys.disc.zero_grads();
    {
      ad::Tape t;
      ad::Var loss = build(t);
      t.backward(loss);
      t.add_param_grads_to(sys.disc, analytic);
    }
    auto value = [&]() {
      ad::Tape t;
      return build(t).val()(0, 0);
    };
    GradStats st = fd_sweep(sys.disc, analytic, value);
    double frac = double(st.passed) / double(st.total);
    os << " L_adv_D " << st.passed << "/" << st.total;
    if (frac < 0.99) all_pass = false;
  }

  double secs = seconds_since(t0);
  bool pass = all_pass && secs < 300.0;
  report(2, pass, os.str(), secs);
}

// ---- criterion 3: loss algebra --------------------------------------------------

void criterion_3() {
  auto t0 = Clock::now();
  objectives::LossWeights w;  // alpha=beta=lambda=1, gamma=5
  bool eq5 = objectives::total_of(w, 2.0, 1.0, 0.1, 2.0) == 5.5;
  bool dis = objectives::style_distortion_from({0.2, 0.8}, {4.0, 1.0}) == 0.8;
  double advd = objectives::adv_d_from_probs({0.5, 0.5}, {0.5, 0.5});
  bool adv = std::abs(advd - 2.0 * std::log(2.0)) <= 1e-9;
  // linearity: zeroed weight makes the total exactly independent of the term
  objectives::LossWeights wz = w;
  wz.gamma = 0;
  bool lin = objectives::total_of(wz, 2, 1, 0.1, 2) == objectives::total_of(wz, 2, 1, 7e9, 2);
  std::ostringstream os;
  os << "loss algebra: Eq.5 example " << (eq5 ? "exact" : "WRONG") << ", Eq.3 batch example "
     << (dis ? "exact" : "WRONG") << ", Eq.2 D=0.5 example |err| " << std::abs(advd - 2 * std::log(2.0))
     << ", linearity " << (lin ? "exact" : "WRONG");
  report(3, eq5 && dis && adv && lin, os.str(), seconds_since(t0));
}

// ---- criterion 4: D_s gate -------------------------------------------------------

void criterion_4() {
  auto t0 = Clock::now();
  double acc = 0;
  bool pass = false;
  std::string note;
  try {
    acc = pretrained_ds_accuracy();
    pass = acc >= 0.95;
    note = "style discriminator held-out accuracy " + std::to_string(acc) + " (gate 0.95)";
  } catch (const Error& e) {
    note = std::string("pretraining failed its gate: ") + e.what();
  }
  report(4, pass, note, seconds_since(t0));
}

// ---- criteria 5 & 6: end-to-end runs ----------------------------------------------

struct LongRuns {
  trainer::TrainResult full;
  std::filesystem::path full_5k;
  trainer::TrainResult no_cyc, no_dis;
  double full_minutes = 0;
};

LongRuns& long_runs() {
  static LongRuns runs = [] {
    LongRuns r;
    auto cfg = default_train_config();
    cfg.checkpoint_every = 5000;  // the 5k snapshot doubles as the criterion-6 budget
    auto t0 = Clock::now();
    r.full = run_training("run_full", cfg);
    r.full_minutes = seconds_since(t0) / 60.0;
    r.full_5k = work_dir() / "run_full" / "checkpoint_step5000.bin";

    auto cfg_nc = default_train_config();
    cfg_nc.no_cyc = true;
    cfg_nc.max_steps = 5000;
    r.no_cyc = run_training("run_no_cyc", cfg_nc);

    auto cfg_nd = default_train_config();
    cfg_nd.no_dis = true;
    cfg_nd.max_steps = 5000;
    r.no_dis = run_training("run_no_dis", cfg_nd);
    return r;
  }();
  return runs;
}

void criterion_5() {
  auto t0 = Clock::now();
  std::string note;
  bool pass = false;
  try {
    auto& runs = long_runs();
    auto cfg = default_train_config();
    cfg.checkpoint_every = 5000;
    auto outcome = eval_checkpoint(runs.full.checkpoint_path, cfg);
    pass = outcome.seen.style_accuracy >= 0.80 && outcome.unseen.style_accuracy >= 0.60 &&
           runs.full_minutes < 60.0;
    std::ostringstream os;
    os << "end-to-end transfer after the default 20k-step run (" << runs.full_minutes
       << " min): seen style accuracy " << outcome.seen.style_accuracy << " (need >= 0.80), unseen "
       << outcome.unseen.style_accuracy << " (need >= 0.60)";
    note = os.str();
  } catch (const Error& e) {
    note = std::string("end-to-end run failed: ") + e.what();
  }
  report(5, pass, note, seconds_since(t0));
}

void criterion_6() {
  auto t0 = Clock::now();
  std::string note;
  bool pass = false;
  try {
    auto& runs = long_runs();
    auto cfg5k = default_train_config();
    cfg5k.checkpoint_every = 5000;
    auto cfg_nc = default_train_config();
    cfg_nc.no_cyc = true;
    cfg_nc.max_steps = 5000;
    auto cfg_nd = default_train_config();
    cfg_nd.no_dis = true;
    cfg_nd.max_steps = 5000;

    auto full = eval_checkpoint(runs.full_5k, cfg5k);
    auto no_cyc = eval_checkpoint(runs.no_cyc.checkpoint_path, cfg_nc);
    auto no_dis = eval_checkpoint(runs.no_dis.checkpoint_path, cfg_nd);

    const double margin = 0.03;
    bool seen_ok = full.seen.speaker_cosine >= no_cyc.seen.speaker_cosine + margin &&
                   full.seen.speaker_cosine >= no_dis.seen.speaker_cosine + margin;
    bool unseen_ok = full.unseen.speaker_cosine >= no_cyc.unseen.speaker_cosine + margin &&
                     full.unseen.speaker_cosine >= no_dis.unseen.speaker_cosine + margin;
    pass = seen_ok && unseen_ok;
    std::ostringstream os;
    os << "speaker-cosine ordering at an equal 5k budget: full seen " << full.seen.speaker_cosine
       << " vs no_cyc " << no_cyc.seen.speaker_cosine << " / no_dis " << no_dis.seen.speaker_cosine
       << "; unseen " << full.unseen.speaker_cosine << " vs " << no_cyc.unseen.speaker_cosine << " / "
       << no_dis.unseen.speaker_cosine << " (margin 0.03)";
    note = os.str();

    // persist the ablation table for inspection
    evalkit::EvalReport rep;
    rep.config_hash = hex64(cfg5k.config_hash());
    rep.corpus_hash = hex64(corpus::corpus_hash(default_corpus()));
    rep.probes = shared_probes().report;
    auto cfg20k = default_train_config();
    cfg20k.checkpoint_every = 5000;
    auto full20 = eval_checkpoint(runs.full.checkpoint_path, cfg20k);
    rep.models.push_back({"full_20k", full20.seen, full20.unseen});
    rep.models.push_back({"full_5k", full.seen, full.unseen});
    rep.models.push_back({"no_cyc_5k", no_cyc.seen, no_cyc.unseen});
    rep.models.push_back({"no_dis_5k", no_dis.seen, no_dis.unseen});
    evalkit::emit_report(rep, work_dir() / "report", runs.full.log_path, false);
  } catch (const Error& e) {
    note = std::string("ablation comparison failed: ") + e.what();
  }
  report(6, pass, note, seconds_since(t0));
}

// ---- criterion 7: ablation coherence ------------------------------------------------

void criterion_7() {
  auto t0 = Clock::now();
  std::string note;
  bool pass = true;
  try {
    auto& runs = long_runs();
    // two more zero-weight runs (short) so every weight is covered
    auto cfg_na = default_train_config();
    cfg_na.no_adv = true;
    cfg_na.max_steps = 300;
    auto r_na = run_training("run_no_adv", cfg_na);
    auto cfg_a0 = default_train_config();
    cfg_a0.weights.alpha = 0;
    cfg_a0.max_steps = 300;
    auto r_a0 = run_training("run_alpha0", cfg_a0);

    struct Case {
      std::filesystem::path log;
      objectives::LossWeights w;
      const char* name;
    };
    auto w_of = [&](bool nd, bool nc, bool na, double alpha) {
      auto cfg = default_train_config();
      cfg.no_dis = nd;
      cfg.no_cyc = nc;
      cfg.no_adv = na;
      cfg.weights.alpha = alpha;
      return cfg.effective_weights();
    };
    std::vector<Case> cases = {
        {runs.no_dis.log_path, w_of(true, false, false, 1.0), "gamma=0"},
        {runs.no_cyc.log_path, w_of(false, true, false, 1.0), "lambda=0"},
        {r_na.log_path, w_of(false, false, true, 1.0), "beta=0"},
        {r_a0.log_path, w_of(false, false, false, 0.0), "alpha=0"},
    };
    std::ostringstream os;
    os << "ablation coherence:";
    for (const auto& c : cases) {
      auto rows = read_log(c.log);
      double worst = 0;
      for (const auto& row : rows) {
        double expect = c.w.alpha * row.l_rec + c.w.beta * row.l_adv_g + c.w.gamma * row.l_dis +
                        c.w.lambda * row.l_cyc;
        worst = std::max(worst, std::abs(row.total - expect));
      }
      os << " " << c.name << " max|err| " << worst << " over " << rows.size() << " steps;";
      if (worst > 1e-12 || rows.empty()) pass = false;
    }
    note = os.str();
  } catch (const Error& e) {
    pass = false;
    note = std::string("ablation runs failed: ") + e.what();
  }
  report(7, pass, note, seconds_since(t0));
}

// ---- criterion 8: determinism & replay ----------------------------------------------

void criterion_8() {
  auto t0 = Clock::now();
  std::string note;
  bool pass = false;
  try {
    auto cfg = default_train_config();
    cfg.max_steps = 300;
    auto r1 = run_training("det_a", cfg);
    auto r2 = run_training("det_b", cfg);
    bool identical = trainer::hash_log_stripped(r1.log_path) == trainer::hash_log_stripped(r2.log_path);

    // replay: mid-save at 150, resume to 300, logs must continue identically
    auto cfg_mid = default_train_config();
    cfg_mid.max_steps = 300;
    cfg_mid.checkpoint_every = 150;
    auto r_mid = run_training("det_mid", cfg_mid);
    trainer::Trainer resumed(default_corpus(), cfg_mid, work_dir() / "det_resumed");
    resumed.load_style_discriminator(pretrained_ds_path());
    auto r_res = resumed.train(work_dir() / "det_mid" / "checkpoint_step150.bin");

    auto full_rows = read_log(r_mid.log_path);
    auto res_rows = read_log(r_res.log_path);
    bool replay = res_rows.size() == 150 && full_rows.size() == 300;
    if (replay) {
      for (size_t i = 0; i < res_rows.size(); ++i) {
        const auto& a = full_rows[150 + i];
        const auto& b = res_rows[i];
        if (std::memcmp(&a, &b, sizeof(LogRow)) != 0) {
          replay = false;
          break;
        }
      }
    }
    pass = identical && replay;
    std::ostringstream os;
    os << "determinism: identical seeds give bit-identical logs (" << (identical ? "yes" : "NO")
       << "); checkpoint resume replays the uninterrupted run (" << (replay ? "yes" : "NO") << ")";
    note = os.str();
  } catch (const Error& e) {
    note = std::string("determinism runs failed: ") + e.what();
  }
  report(8, pass, note, seconds_since(t0));
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string tok;
      while (std::getline(ss, tok, ',')) only.insert(std::atoi(tok.c_str()));
    }
  }
  auto want = [&](int id) { return only.empty() || only.count(id); };

  std::printf("acceptance suite, work dir %s\n", work_dir().string().c_str());
  auto t0 = Clock::now();
  try {
    if (want(1)) criterion_1();
    if (want(2)) criterion_2();
    if (want(3)) criterion_3();
    if (want(4)) criterion_4();
    if (want(5)) criterion_5();
    if (want(6)) criterion_6();
    if (want(7)) criterion_7();
    if (want(8)) criterion_8();
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 99;
  }
  int failures = 0;
  for (const auto& r : results)
    if (!r.pass) ++failures;
  std::printf("acceptance: %zu criteria run, %d failed (total %.1f min)\n", results.size(), failures,
              seconds_since(t0) / 60.0);
  return failures;
}
