#include "stx/cli.hpp"

#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "stx/evalkit.hpp"
#include "stx/trainer.hpp"

namespace stx::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string slurp(const fs::path& p, const char* what) {
  std::ifstream f(p);
  check(f.good(), ErrorCategory::Io, std::string("cannot open ") + what + ": " + p.string());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

fs::path default_out_dir() {
  const char* env = std::getenv("STX_OUT_DIR");
  return env && *env ? fs::path(env) : fs::path("out");
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  check(fs::is_directory(p), ErrorCategory::Io, "cannot create directory: " + p.string());
}

// Every run leaves a resolved-config snapshot next to its outputs.
void write_snapshot(const fs::path& out_dir, const std::string& name, const std::string& body) {
  std::ofstream f(out_dir / name);
  check(f.good(), ErrorCategory::Io, "cannot write config snapshot");
  f << body;
  if (body.empty() || body.back() != '\n') f << "\n";
}

void refuse_overwrite(const fs::path& target, bool overwrite) {
  if (fs::exists(target) && !overwrite)
    fail(ErrorCategory::Io,
         target.string() + " already exists; pass --overwrite to replace it");
}

trainer::TrainConfig load_train_config(const std::string& config_path, uint64_t seed_override,
                                       bool seed_given) {
  trainer::TrainConfig cfg;
  if (!config_path.empty()) cfg = trainer::TrainConfig::from_json(slurp(config_path, "train config"));
  if (seed_given) cfg.seed = seed_override;
  return cfg;
}

struct TokensFile {
  std::vector<int> tokens;
};

// Token files are whitespace-separated integer ids.
TokensFile load_tokens(const fs::path& p) {
  std::ifstream f(p);
  check(f.good(), ErrorCategory::Io, "cannot open token file: " + p.string());
  TokensFile out;
  long v;
  while (f >> v) out.tokens.push_back(int(v));
  check(!out.tokens.empty(), ErrorCategory::Data, "token file is empty: " + p.string());
  return out;
}

int cmd_gen_data(const std::string& config_path, uint64_t seed, bool seed_given, fs::path out_dir,
                 bool scarce, bool overwrite) {
  corpus::GeneratorConfig cfg =
      config_path.empty() ? corpus::default_generator_config()
                          : corpus::generator_config_from_json(slurp(config_path, "generator config"));
  if (seed_given) cfg.seed = seed;
  if (scarce) cfg.scarce_target = true;
  refuse_overwrite(out_dir / "manifest.json", overwrite);
  ensure_dir(out_dir);
  auto manifest = corpus::generate_corpus(cfg, out_dir);
  write_snapshot(out_dir, "generator_config.resolved.json", corpus::generator_config_to_json(cfg));
  std::cout << "corpus " << out_dir.string() << " utterances " << manifest.utterances.size() << " hash "
            << hex64(corpus::corpus_hash(manifest)) << "\n";
  return 0;
}

int cmd_pretrain_disc(const std::string& manifest_path, const std::string& config_path, uint64_t seed,
                      bool seed_given, fs::path out_dir, double split_fraction, bool overwrite) {
  auto manifest = corpus::load_manifest(manifest_path);
  auto cfg = load_train_config(config_path, seed, seed_given);
  cfg.model.finalize(manifest.frame_dim, manifest.vocab_size);
  refuse_overwrite(out_dir / "ds_checkpoint.bin", overwrite);
  ensure_dir(out_dir);
  corpus::FrameCache frames(manifest);
  adversaries::StyleDiscriminator ds(cfg.model.enc, cfg.seed);
  auto report = ds.pretrain(manifest, frames, split_fraction, cfg.seed);
  ds.save(out_dir / "ds_checkpoint.bin", cfg.model.enc.trunk_hash());
  std::ofstream rf(out_dir / "ds_report.json");
  rf << report.to_json() << "\n";
  write_snapshot(out_dir, "train_config.resolved.json", cfg.to_json());
  std::cout << "style discriminator held-out accuracy " << report.held_out_accuracy << " ("
            << report.epochs_run << " epochs)\n";
  return 0;
}

int cmd_train(const std::string& manifest_path, const std::string& config_path, uint64_t seed,
              bool seed_given, fs::path out_dir, const std::string& ds_path, const std::string& resume,
              long steps_override, bool overwrite) {
  auto manifest = corpus::load_manifest(manifest_path);
  auto cfg = load_train_config(config_path, seed, seed_given);
  if (steps_override > 0) cfg.max_steps = steps_override;
  cfg.model.finalize(manifest.frame_dim, manifest.vocab_size);
  if (resume.empty()) refuse_overwrite(out_dir / "checkpoint.bin", overwrite);
  ensure_dir(out_dir);
  check(!ds_path.empty(), ErrorCategory::Gate,
        "train requires a pretrained style discriminator (--ds); run pretrain-disc first");

  trainer::Trainer tr(manifest, cfg, out_dir);
  tr.load_style_discriminator(ds_path);
  write_snapshot(out_dir, "train_config.resolved.json", cfg.to_json());
  auto result =
      tr.train(resume.empty() ? std::nullopt : std::make_optional<fs::path>(resume));
  std::cout << "trained " << result.final_step << " steps; checkpoint " << result.checkpoint_path.string()
            << " log hash " << hex64(trainer::hash_log_stripped(result.log_path)) << "\n";
  return 0;
}

int cmd_transfer(const std::string& manifest_path, const std::string& config_path, uint64_t seed,
                 bool seed_given, const std::string& checkpoint, const std::string& utterance_id,
                 const std::string& frames_path, const std::string& tokens_path, const std::string& out_path,
                 int max_frames, bool overwrite) {
  auto cfg = load_train_config(config_path, seed, seed_given);
  Mat source_frames;
  std::vector<int> tokens;
  if (!utterance_id.empty()) {
    check(!manifest_path.empty(), ErrorCategory::Config, "--utterance requires --manifest");
    auto manifest = corpus::load_manifest(manifest_path);
    cfg.model.finalize(manifest.frame_dim, manifest.vocab_size);
    const corpus::Utterance* u = manifest.find(utterance_id);
    check(u != nullptr, ErrorCategory::Data, "unknown utterance id: " + utterance_id);
    source_frames = corpus::load_frames(manifest.root / u->frame_file);
    tokens = u->tokens;
  } else {
    // external entry point: any speaker, any style, no manifest needed; the
    // resolved train config carries the model's frame/vocab dimensions
    check(!frames_path.empty() && !tokens_path.empty(), ErrorCategory::Config,
          "transfer needs either --utterance or both --frames and --tokens");
    source_frames = corpus::load_frames(frames_path);
    tokens = load_tokens(tokens_path).tokens;
    check(int(source_frames.cols()) == cfg.model.enc.frame_dim, ErrorCategory::Data,
          "external frame file dimension " + std::to_string(source_frames.cols()) +
              " does not match the model's frame dimension " + std::to_string(cfg.model.enc.frame_dim));
  }
  refuse_overwrite(out_path, overwrite);
  system::System sys(cfg.model, cfg.seed);
  auto meta = trainer::load_checkpoint(checkpoint, sys, cfg);
  Mat out = trainer::transfer(sys, meta.z_star, source_frames, tokens,
                              max_frames > 0 ? max_frames : cfg.max_frames);
  corpus::save_frames(out_path, out);
  std::cout << "transferred " << out.rows() << " frames -> " << out_path << "\n";
  return 0;
}

int cmd_eval(const std::string& manifest_path, const std::string& config_path, uint64_t seed,
             bool seed_given, const std::string& checkpoint, fs::path out_dir, const std::string& name,
             bool overwrite) {
  auto manifest = corpus::load_manifest(manifest_path);
  auto cfg = load_train_config(config_path, seed, seed_given);
  cfg.model.finalize(manifest.frame_dim, manifest.vocab_size);
  refuse_overwrite(out_dir / ("eval_" + name + ".json"), overwrite);
  ensure_dir(out_dir);
  corpus::FrameCache frames(manifest);
  system::System sys(cfg.model, cfg.seed);
  auto meta = trainer::load_checkpoint(checkpoint, sys, cfg);

  evalkit::ProbeConfig probe_cfg;
  probe_cfg.seed = cfg.seed;
  auto probes = evalkit::train_probes(manifest, frames, probe_cfg);
  evalkit::EvalRequest req;
  req.max_frames = cfg.max_frames;
  req.seed = cfg.seed;
  auto outcome = evalkit::evaluate_transfer(sys, meta.z_star, manifest, frames, probes, req);

  json j;
  j["name"] = name;
  j["config_hash"] = hex64(cfg.config_hash());
  j["corpus_hash"] = hex64(corpus::corpus_hash(manifest));
  j["checkpoint_step"] = meta.step;
  j["probes"] = {{"style_accuracy", probes.report.style_accuracy},
                 {"speaker_accuracy", probes.report.speaker_accuracy},
                 {"style_steps", probes.report.style_steps},
                 {"speaker_steps", probes.report.speaker_steps}};
  j["seen"] = {{"style_accuracy", outcome.seen.style_accuracy},
               {"speaker_cosine", outcome.seen.speaker_cosine},
               {"recon_mse", outcome.seen.recon_mse},
               {"n", outcome.seen.n}};
  j["unseen"] = {{"style_accuracy", outcome.unseen.style_accuracy},
                 {"speaker_cosine", outcome.unseen.speaker_cosine},
                 {"recon_mse", outcome.unseen.recon_mse},
                 {"n", outcome.unseen.n}};
  std::ofstream f(out_dir / ("eval_" + name + ".json"));
  f << j.dump(1) << "\n";
  write_snapshot(out_dir, "train_config.resolved.json", cfg.to_json());
  std::cout << name << " seen style_acc " << outcome.seen.style_accuracy << " spk_cos "
            << outcome.seen.speaker_cosine << " | unseen style_acc " << outcome.unseen.style_accuracy
            << " spk_cos " << outcome.unseen.speaker_cosine << "\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& eval_files, const std::string& train_log, fs::path out_dir,
               bool no_plots, bool overwrite) {
  check(!eval_files.empty(), ErrorCategory::Config, "report needs at least one --eval input");
  refuse_overwrite(out_dir / "report.json", overwrite);
  ensure_dir(out_dir);
  evalkit::EvalReport report;
  for (const auto& path : eval_files) {
    json j;
    try {
      j = json::parse(slurp(path, "eval file"));
    } catch (const json::exception& e) {
      fail(ErrorCategory::Data, "malformed eval file " + path + ": " + e.what());
    }
    try {
      evalkit::ModelRow row;
      row.name = j.at("name").get<std::string>();
      auto read = [&](const char* key, evalkit::DirectionMetrics& m) {
        m.style_accuracy = j.at(key).at("style_accuracy").get<double>();
        m.speaker_cosine = j.at(key).at("speaker_cosine").get<double>();
        m.recon_mse = j.at(key).at("recon_mse").get<double>();
        m.n = j.at(key).at("n").get<int>();
      };
      read("seen", row.seen);
      read("unseen", row.unseen);
      report.models.push_back(std::move(row));
      report.config_hash = j.at("config_hash").get<std::string>();
      report.corpus_hash = j.at("corpus_hash").get<std::string>();
      report.probes.style_accuracy = j.at("probes").at("style_accuracy").get<double>();
      report.probes.speaker_accuracy = j.at("probes").at("speaker_accuracy").get<double>();
      report.probes.style_steps = j.at("probes").at("style_steps").get<long>();
      report.probes.speaker_steps = j.at("probes").at("speaker_steps").get<long>();
    } catch (const json::exception& e) {
      fail(ErrorCategory::Data, "eval file " + path + " missing field: " + e.what());
    }
  }
  evalkit::emit_report(report, out_dir, train_log.empty() ? fs::path{} : fs::path(train_log), no_plots);
  std::cout << "report written to " << (out_dir / "report.json").string() << " (" << report.models.size()
            << " model rows)\n";
  return 0;
}

}  // namespace

int exit_code_for(const std::string& category) {
  if (category == "CONFIG") return 2;
  if (category == "DATA") return 3;
  if (category == "GATE") return 4;
  if (category == "NUMERIC") return 5;
  if (category == "IO") return 6;
  return 1;
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"seen/unseen speech-style transfer experiments on synthetic disjoint corpora"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags are valid after the subcommand name

  std::string config_path, manifest_path, ds_path, checkpoint, resume;
  std::string utterance_id, frames_path, tokens_path, out_path, name = "full", train_log;
  std::vector<std::string> eval_files;
  uint64_t seed = 0;
  bool scarce = false, overwrite = false, no_plots = false;
  long steps_override = 0;
  int max_frames = 0;
  double split_fraction = 0.2;
  std::string out_dir_str = default_out_dir().string();
  std::string log_level = "info";

  app.add_option("--seed", seed, "master seed override");
  app.add_option("--config", config_path, "config file (json)");
  app.add_option("--out-dir", out_dir_str, "output directory (env STX_OUT_DIR)");
  app.add_option("--log-level", log_level, "quiet|info")->check(CLI::IsMember({"quiet", "info"}));

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic disjoint multi-style corpus");
  gen->add_flag("--scarce-target", scarce, "give the target style ~1/6 of the utterances");
  gen->add_flag("--overwrite", overwrite, "replace existing outputs");

  auto* pre = app.add_subcommand("pretrain-disc", "pretrain the style discriminator D_s");
  pre->add_option("--manifest", manifest_path, "corpus manifest")->required();
  pre->add_option("--split-fraction", split_fraction, "portion of training data for D_s");
  pre->add_flag("--overwrite", overwrite, "replace existing outputs");

  auto* train = app.add_subcommand("train", "run the adversarial style-transfer training");
  train->add_option("--manifest", manifest_path, "corpus manifest")->required();
  train->add_option("--ds", ds_path, "pretrained style discriminator checkpoint");
  train->add_option("--resume", resume, "checkpoint to resume from");
  train->add_option("--steps", steps_override, "override max_steps");
  train->add_flag("--overwrite", overwrite, "replace existing outputs");

  auto* transfer = app.add_subcommand("transfer", "re-synthesize an utterance in the target style");
  transfer->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  transfer->add_option("--manifest", manifest_path, "corpus manifest (for --utterance)");
  transfer->add_option("--utterance", utterance_id, "utterance id from the manifest");
  transfer->add_option("--frames", frames_path, "external frame file (stxf)");
  transfer->add_option("--tokens", tokens_path, "external token file (whitespace ids)");
  transfer->add_option("--out", out_path, "output frame file")->required();
  transfer->add_option("--max-frames", max_frames, "generation cap");
  transfer->add_flag("--overwrite", overwrite, "replace existing outputs");

  auto* eval = app.add_subcommand("eval", "objective transfer metrics for one checkpoint");
  eval->add_option("--manifest", manifest_path, "corpus manifest")->required();
  eval->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  eval->add_option("--name", name, "model row name (full, no_cyc, ...)");
  eval->add_flag("--overwrite", overwrite, "replace existing outputs");

  auto* report = app.add_subcommand("report", "aggregate eval outputs into report + tables + plots");
  report->add_option("--eval", eval_files, "eval json files (repeatable)")->required();
  report->add_option("--train-log", train_log, "training log for loss curves");
  report->add_flag("--no-plots", no_plots, "skip plot emission");
  report->add_flag("--overwrite", overwrite, "replace existing outputs");

  try {
    std::vector<std::string> argv_copy = args;
    std::vector<char*> argv;
    argv.reserve(argv_copy.size() + 1);
    static std::string prog = "stx";
    argv.push_back(prog.data());
    for (auto& a : argv_copy) argv.push_back(a.data());
    app.parse(int(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      std::cout << app.help() << "\n";
      return 0;
    }
    std::cerr << "error [CONFIG] " << e.what() << "\n";
    return exit_code_for("CONFIG");
  }

  bool seed_given = app.count("--seed") > 0;
  fs::path out_dir(out_dir_str);

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, seed, seed_given, out_dir, scarce, overwrite);
    if (pre->parsed())
      return cmd_pretrain_disc(manifest_path, config_path, seed, seed_given, out_dir, split_fraction,
                               overwrite);
    if (train->parsed())
      return cmd_train(manifest_path, config_path, seed, seed_given, out_dir, ds_path, resume,
                       steps_override, overwrite);
    if (transfer->parsed())
      return cmd_transfer(manifest_path, config_path, seed, seed_given, checkpoint, utterance_id,
                          frames_path, tokens_path, out_path, max_frames, overwrite);
    if (eval->parsed())
      return cmd_eval(manifest_path, config_path, seed, seed_given, checkpoint, out_dir, name, overwrite);
    if (report->parsed()) return cmd_report(eval_files, train_log, out_dir, no_plots, overwrite);
  } catch (const Error& e) {
    std::cerr << "error [" << category_name(e.category) << "] " << e.what() << "\n";
    return exit_code_for(category_name(e.category));
  } catch (const std::exception& e) {
    std::cerr << "error [NUMERIC] unexpected failure: " << e.what() << "\n";
    return exit_code_for("NUMERIC");
  }
  return 0;
}

}  // namespace stx::cli
