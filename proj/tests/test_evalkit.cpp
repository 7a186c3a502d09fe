#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "stx/evalkit.hpp"
#include "stx/trainer.hpp"
#include "testing.hpp"

using namespace stx;
using namespace stx::evalkit;

namespace {

struct Fixture {
  Fixture()
      : dir("ek"),
        manifest(corpus::generate_corpus(
            [] {
              auto c = stx::testing::small_corpus_config(61);
              c.utterances_per_style = 24;
              return c;
            }(),
            dir.path())),
        frames(manifest) {}
  stx::testing::TempDir dir;
  corpus::CorpusManifest manifest;
  corpus::FrameCache frames;
};

Fixture& fx() {
  static Fixture f;
  return f;
}

Probes& shared_probes() {
  static Probes p = train_probes(fx().manifest, fx().frames);
  return p;
}

}  // namespace

TEST_CASE("probe gates pass on the synthetic corpus (separability)") {
  auto& p = shared_probes();
  CHECK(p.report.style_accuracy >= 0.95);
  CHECK(p.report.speaker_accuracy >= 0.95);
  CHECK(p.style.classes().size() == 5);  // 4 source + target; unseen has no train split
}

TEST_CASE("probe training is deterministic") {
  auto p2 = train_probes(fx().manifest, fx().frames);
  CHECK(p2.report.style_accuracy == shared_probes().report.style_accuracy);
  CHECK(p2.report.speaker_accuracy == shared_probes().report.speaker_accuracy);
}

TEST_CASE("single-class style input is an error") {
  corpus::CorpusManifest broken = fx().manifest;
  broken.utterances.clear();
  for (const auto& u : fx().manifest.utterances)
    if (u.style_id == "style-a" || u.split != corpus::Split::train) broken.utterances.push_back(u);
  CHECK_THROWS_AS(train_probes(broken, fx().frames), Error);
}

TEST_CASE("cosine identities") {
  Col v(3);
  v << 1, 2, 3;
  Col u = v / v.norm();
  CHECK(u.dot(u) == doctest::Approx(1.0).epsilon(1e-12));
  Col a(2), b(2);
  a << 1, 0;
  b << 0, 1;
  CHECK(a.dot(b) == 0.0);
}

TEST_CASE("speaker cosine floor: same-speaker ground truth beats cross-speaker") {
  auto& p = shared_probes();
  auto dev = fx().manifest.select(corpus::Split::dev);
  double same_sum = 0, cross_sum = 0;
  long same_n = 0, cross_n = 0;
  for (size_t i = 0; i < dev.size(); ++i) {
    Col ei = p.speaker.embed(fx().frames.frames(dev[i]->id));
    for (size_t j = i + 1; j < dev.size(); ++j) {
      Col ej = p.speaker.embed(fx().frames.frames(dev[j]->id));
      double cos = ei.dot(ej);
      if (dev[i]->speaker_id == dev[j]->speaker_id) {
        same_sum += cos;
        ++same_n;
      } else {
        cross_sum += cos;
        ++cross_n;
      }
    }
  }
  double margin = same_sum / double(same_n) - cross_sum / double(cross_n);
  INFO("margin ", margin);
  CHECK(margin > 0.1);
}

TEST_CASE("probe features are length-invariant in shape and finite") {
  Rng rng(5);
  for (int t_len : {9, 40, 173}) {
    Mat f(t_len, fx().manifest.frame_dim);
    for (int i = 0; i < f.size(); ++i) f.data()[i] = rng.uniform(0.0, 1.0);
    Col feats = probe_features(f, 8);
    CHECK(feats.size() == 8 * (fx().manifest.frame_dim + 1));
    CHECK(feats.allFinite());
  }
}

TEST_CASE("leakage guard trips when a probe training item is scored as a transfer") {
  auto& p = shared_probes();
  auto train = fx().manifest.select(corpus::Split::train);
  CHECK(p.training_hashes.count(frame_hash(fx().frames.frames(train[0]->id))) == 1);
  // fresh matrices never collide
  Mat synthetic = Mat::Constant(20, fx().manifest.frame_dim, 0.5);
  CHECK(p.training_hashes.count(frame_hash(synthetic)) == 0);
}

TEST_CASE("evaluate_transfer on an untrained checkpoint stays near the probe base rate") {
  auto model = stx::testing::small_model_config(fx().manifest.frame_dim, fx().manifest.vocab_size);
  system::System sys(model, 3);
  Col z_star = Col::Zero(model.enc.d_z);
  auto& p = shared_probes();
  EvalRequest req;
  req.max_frames = 60;
  auto outcome = evaluate_transfer(sys, z_star, fx().manifest, fx().frames, p, req);
  // an untrained decoder produces noise-like frames; the probe's target rate
  // on such input is far from perfect transfer, and everything stays finite
  CHECK(outcome.seen.n > 0);
  CHECK(outcome.unseen.n > 0);
  CHECK(std::isfinite(outcome.seen.style_accuracy));
  CHECK(std::isfinite(outcome.seen.speaker_cosine));
  CHECK(outcome.seen.style_accuracy <= 1.0);
  CHECK(outcome.seen.speaker_cosine >= -1.0);
  CHECK(outcome.seen.speaker_cosine <= 1.0);
}

TEST_CASE("report round-trips through its JSON schema") {
  EvalReport r;
  r.config_hash = "abc";
  r.corpus_hash = "def";
  r.probes.style_accuracy = 0.97;
  r.probes.speaker_accuracy = 0.99;
  ModelRow row;
  row.name = "full";
  row.seen = {0.9, 0.8, 0.01, 60};
  row.unseen = {0.7, 0.6, 0.02, 20};
  r.models.push_back(row);
  row.name = "no_cyc";
  r.models.push_back(row);
  EvalReport back = EvalReport::from_json(r.to_json());
  CHECK(back.models.size() == 2);
  CHECK(back.models[0].name == "full");
  CHECK(back.models[0].seen.style_accuracy == 0.9);
  CHECK(back.models[1].unseen.speaker_cosine == 0.6);
  CHECK(back.config_hash == "abc");
  CHECK(back.reference_context.at("proposed_seen_R2C") == 0.69);
}

TEST_CASE("emit_report writes CSV with directions x models rows and honors no_plots") {
  stx::testing::TempDir out("rep");
  EvalReport r;
  r.config_hash = "x";
  r.corpus_hash = "y";
  ModelRow row;
  row.name = "full";
  r.models.push_back(row);
  row.name = "no_dis";
  r.models.push_back(row);
  row.name = "no_cyc";
  r.models.push_back(row);

  emit_report(r, out.path(), {}, /*no_plots=*/true);
  std::ifstream csv(out.path() / "transfer_metrics.csv");
  std::string line;
  int rows = 0;
  std::getline(csv, line);  // header
  CHECK(line == "model,direction,style_acc,speaker_cos,recon_mse");
  while (std::getline(csv, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 6);  // 3 models x 2 directions
  CHECK(std::filesystem::exists(out.path() / "report.json"));
  CHECK(!std::filesystem::exists(out.path() / "loss_curves.svg"));
}

TEST_CASE("emit_report draws loss curves from a training log") {
  stx::testing::TempDir out("rep2");
  auto log_path = out.path() / "train_log.jsonl";
  {
    std::ofstream log(log_path);
    for (int s = 0; s < 50; ++s) {
      log << "{\"step\":" << s << ",\"l_rec\":" << 100.0 / (s + 1) << ",\"l_adv_d\":1.38,"
          << "\"l_adv_g\":0.69,\"l_dis\":0.1,\"l_cyc\":" << 90.0 / (s + 1)
          << ",\"total\":" << 100.0 / (s + 1) + 0.69 + 0.5 + 90.0 / (s + 1) << ",\"wallclock\":" << 0.1 * s
          << "}\n";
    }
  }
  EvalReport r;
  ModelRow row;
  row.name = "full";
  r.models.push_back(row);
  emit_report(r, out.path() / "report", log_path, false);
  CHECK(std::filesystem::exists(out.path() / "report" / "loss_curves.svg"));
  CHECK(std::filesystem::exists(out.path() / "report" / "adversarial_curves.svg"));
  std::ifstream svg(out.path() / "report" / "loss_curves.svg");
  std::string body((std::istreambuf_iterator<char>(svg)), std::istreambuf_iterator<char>());
  CHECK(body.find("<polyline") != std::string::npos);
  CHECK(body.find("l_rec") != std::string::npos);
}

TEST_CASE("style accuracy is invariant to eval-set ordering") {
  auto model = stx::testing::small_model_config(fx().manifest.frame_dim, fx().manifest.vocab_size);
  system::System sys(model, 5);
  Col z_star = Col::Zero(model.enc.d_z);
  auto& p = shared_probes();
  auto set = fx().manifest.select(corpus::Split::dev, "", false, true);
  set.resize(6);
  double a = style_transfer_accuracy(sys, z_star, set, fx().frames, p, fx().manifest.target_style_id, 40);
  std::reverse(set.begin(), set.end());
  double b = style_transfer_accuracy(sys, z_star, set, fx().frames, p, fx().manifest.target_style_id, 40);
  CHECK(a == b);
}

TEST_CASE("empty eval set is an error") {
  auto model = stx::testing::small_model_config(fx().manifest.frame_dim, fx().manifest.vocab_size);
  system::System sys(model, 5);
  auto& p = shared_probes();
  CHECK_THROWS_AS(style_transfer_accuracy(sys, Col::Zero(model.enc.d_z), {}, fx().frames, p,
                                          fx().manifest.target_style_id, 40),
                  Error);
}
