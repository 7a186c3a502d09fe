#include "stx/adversaries.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

namespace stx::adversaries {

using namespace stx::ad;

void DiscConfig::validate() const {
  check(frame_dim >= (1 << conv_layers), ErrorCategory::Config,
        "discriminator conv stack would collapse the frequency axis");
  check(conv_layers >= 1 && base_channels >= 1, ErrorCategory::Config,
        "discriminator layout must be positive");
}

// ---- frame discriminator D ----------------------------------------------------

FrameDiscriminator::FrameDiscriminator(nn::ParamStore& ps, Rng& rng, const DiscConfig& cfg,
                                       const std::string& prefix)
    : cfg_(cfg) {
  cfg.validate();
  int c_in = 1;
  for (int l = 0; l < cfg.conv_layers; ++l) {
    int c_out = cfg.base_channels << std::min(2, l);
    convs_.emplace_back(ps, rng, prefix + ".conv" + std::to_string(l), c_in, c_out, 2);
    c_in = c_out;
  }
  head_ = nn::Linear(ps, rng, prefix + ".head", c_in, 1, /*zero_init=*/true);
}

Var FrameDiscriminator::logit(Tape& t, const nn::ParamStore& ps, const FrameInput& input,
                              bool frozen) const {
  int t_len = input.len;
  check(t_len >= cfg_.min_frames(), ErrorCategory::Data,
        "utterance too short for the discriminator: " + std::to_string(t_len) + " frames");
  Var x;
  if (input.constant) {
    check(all_finite(*input.constant), ErrorCategory::Data, "non-finite discriminator input");
    Mat flat(1, t_len * cfg_.frame_dim);
    for (int i = 0; i < t_len; ++i)
      flat.block(0, i * cfg_.frame_dim, 1, cfg_.frame_dim) = input.constant->row(i);
    x = t.constant(std::move(flat));
  } else {
    x = gather_frames(*input.frame_vars, input.col, t_len);
  }
  int h = t_len, w = cfg_.frame_dim;
  for (const auto& conv : convs_) {
    int oh = 0, ow = 0;
    x = conv.apply(t, ps, x, h, w, &oh, &ow, frozen);
    x = leaky_relu(x);
    h = oh;
    w = ow;
  }
  // global average pool over positions -> (C, 1)
  Var pooled = scale(row_sums(x), 1.0 / double(h * w));
  return frozen ? head_.apply_frozen(t, ps, pooled) : head_.apply(t, ps, pooled);
}

double FrameDiscriminator::probability(const nn::ParamStore& ps, const Mat& frames) const {
  Tape t;
  Var lg = logit(t, ps, FrameInput::from_mat(frames), /*frozen=*/true);
  double p = 1.0 / (1.0 + std::exp(-lg.val()(0, 0)));
  return std::clamp(p, kProbEps, 1.0 - kProbEps);
}

// ---- style discriminator D_s ---------------------------------------------------

StyleDiscriminator::StyleDiscriminator(const encoders::EncoderConfig& enc_cfg, uint64_t init_seed)
    : enc_cfg_(enc_cfg) {
  Rng rng = Rng(init_seed).stream(0x64735f69);  // "ds_i"
  trunk_ = encoders::ReferenceEncoder(params_, rng, enc_cfg, "ds.ref");
  head_ = nn::Linear(params_, rng, "ds.head", enc_cfg.gru_units, 1);
}

double StyleDiscriminator::logit_value(const Mat& frames) const {
  Tape t;
  Var state = trunk_.trunk(t, params_, {FrameInput::from_mat(frames)}, /*frozen=*/true);
  return head_.apply_frozen(t, params_, state).val()(0, 0);
}

double StyleDiscriminator::style_probability(const Mat& frames) const {
  check(pretrained_, ErrorCategory::Gate,
        "style discriminator used before pretraining (run pretrain-disc first)");
  double p = 1.0 / (1.0 + std::exp(-logit_value(frames)));
  return std::clamp(p, kProbEps, 1.0 - kProbEps);
}

PretrainReport StyleDiscriminator::pretrain(const corpus::CorpusManifest& manifest,
                                            const corpus::FrameCache& frames, double split_fraction,
                                            uint64_t seed, double accuracy_gate) {
  check(split_fraction > 0 && split_fraction <= 1.0, ErrorCategory::Config,
        "split_fraction must be in (0, 1]");
  auto train_all = manifest.select(corpus::Split::train);
  std::vector<const corpus::Utterance*> pos_all, neg_all;
  for (auto* u : train_all)
    (u->style_id == manifest.target_style_id ? pos_all : neg_all).push_back(u);
  check(!pos_all.empty(), ErrorCategory::Data, "no target-style training utterances");
  check(!neg_all.empty(), ErrorCategory::Data,
        "cannot form a binary style task: all training utterances share the target style");

  // stratified portion of the training data
  Rng rng = Rng(seed).stream(0x64737072);  // "dspr"
  auto take = [&](std::vector<const corpus::Utterance*>& pool, uint64_t tag) {
    Rng r = rng.stream(tag);
    std::vector<const corpus::Utterance*> shuffled = pool;
    for (int i = int(shuffled.size()) - 1; i > 0; --i) std::swap(shuffled[i], shuffled[r.uniform_int(i + 1)]);
    size_t n = std::max<size_t>(1, size_t(std::lround(split_fraction * double(shuffled.size()))));
    shuffled.resize(n);
    return shuffled;
  };
  auto pos = take(pos_all, 1);
  auto neg = take(neg_all, 2);

  std::vector<std::pair<const corpus::Utterance*, double>> data;
  for (auto* u : pos) data.emplace_back(u, 1.0);
  for (auto* u : neg) data.emplace_back(u, 0.0);
  double pos_weight = double(neg.size()) / double(pos.size());

  auto dev = manifest.select(corpus::Split::dev);
  check(!dev.empty(), ErrorCategory::Data, "empty dev split for the pretraining gate");

  auto accuracy_on = [&](const std::vector<const corpus::Utterance*>& set) {
    int correct = 0;
    for (auto* u : set) {
      double lg = logit_value(frames.frames(u->id));
      bool said_target = lg > 0;
      bool is_target = u->style_id == manifest.target_style_id;
      if (said_target == is_target) ++correct;
    }
    return double(correct) / double(set.size());
  };

  nn::Adam adam;
  adam.lr = 1e-3;
  const int batch = 16;
  const int max_epochs = 60;
  PretrainReport report;
  report.split_fraction = split_fraction;
  report.n_train_utterances = int(data.size());
  report.n_held_out = int(dev.size());

  // early stopping keeps the best held-out epoch
  double best_acc = -1;
  std::vector<unsigned char> best_params;
  for (int epoch = 0; epoch < max_epochs; ++epoch) {
    Rng r = rng.stream(0x65706f63, uint64_t(epoch));  // "epoc"
    std::vector<int> order(data.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    for (int i = int(order.size()) - 1; i > 0; --i) std::swap(order[i], order[r.uniform_int(i + 1)]);

    for (size_t start = 0; start < order.size(); start += batch) {
      Tape t;
      std::vector<FrameInput> inputs;
      size_t end = std::min(order.size(), start + batch);
      Row tgt(int(end - start)), wt(int(end - start));
      for (size_t i = start; i < end; ++i) {
        const auto& [u, label] = data[order[i]];
        inputs.push_back(FrameInput::from_mat(frames.frames(u->id)));
        tgt(int(i - start)) = label;
        wt(int(i - start)) = label > 0.5 ? pos_weight : 1.0;
      }
      Var state = trunk_.trunk(t, params_, inputs);
      Var logits = head_.apply(t, params_, state);
      Var loss = ad::stop_bce_cols(t, {logits}, {tgt}, {wt});
      Var total = ad::scale(ad::sum(loss), 1.0 / double(end - start));
      t.backward(total);
      std::vector<Mat> grads = params_.zero_grads();
      t.add_param_grads_to(params_, grads);
      adam.step(params_, grads, 1.0);
      ++report.steps;
    }
    report.epochs_run = epoch + 1;
    double acc = accuracy_on(dev);
    if (acc > best_acc) {
      best_acc = acc;
      best_params = params_.serialize(0);
    }
    if (best_acc >= 0.995) break;
  }
  if (!best_params.empty()) params_.deserialize(best_params);
  report.held_out_accuracy = best_acc;
  {
    std::vector<const corpus::Utterance*> train_set;
    for (const auto& [u, label] : data) train_set.push_back(u);
    report.train_accuracy = accuracy_on(train_set);
  }
  check(report.held_out_accuracy >= accuracy_gate, ErrorCategory::Gate,
        "style discriminator held-out accuracy " + std::to_string(report.held_out_accuracy) +
            " is below the gate " + std::to_string(accuracy_gate) +
            "; refusing to train against an unreliable style signal");
  pretrained_ = true;
  return report;
}

std::string PretrainReport::to_json() const {
  nlohmann::ordered_json j;
  j["held_out_accuracy"] = held_out_accuracy;
  j["train_accuracy"] = train_accuracy;
  j["epochs_run"] = epochs_run;
  j["steps"] = steps;
  j["split_fraction"] = split_fraction;
  j["n_train_utterances"] = n_train_utterances;
  j["n_held_out"] = n_held_out;
  return j.dump(1);
}

// ---- D_s checkpoint file --------------------------------------------------------

void StyleDiscriminator::save(const std::filesystem::path& path, uint64_t enc_config_hash) const {
  std::ofstream f(path, std::ios::binary);
  check(f.good(), ErrorCategory::Io, "cannot write style discriminator checkpoint: " + path.string());
  const char magic[8] = {'S', 'T', 'X', 'D', 'S', 'C', 'P', '1'};
  f.write(magic, 8);
  uint32_t version = 1;
  f.write(reinterpret_cast<const char*>(&version), 4);
  f.write(reinterpret_cast<const char*>(&enc_config_hash), 8);
  uint8_t flag = pretrained_ ? 1 : 0;
  f.write(reinterpret_cast<const char*>(&flag), 1);
  auto payload = params_.serialize(0);
  uint64_t len = payload.size();
  uint32_t crc = crc32(payload.data(), payload.size());
  f.write(reinterpret_cast<const char*>(&len), 8);
  f.write(reinterpret_cast<const char*>(payload.data()), std::streamsize(payload.size()));
  f.write(reinterpret_cast<const char*>(&crc), 4);
  check(f.good(), ErrorCategory::Io, "short write: " + path.string());
}

void StyleDiscriminator::load(const std::filesystem::path& path, uint64_t enc_config_hash) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), ErrorCategory::Io, "cannot open style discriminator checkpoint: " + path.string());
  char magic[8];
  f.read(magic, 8);
  check(f.good() && std::string(magic, 8) == "STXDSCP1", ErrorCategory::Data,
        "bad style discriminator checkpoint header");
  uint32_t version = 0;
  uint64_t hash = 0;
  uint8_t flag = 0;
  f.read(reinterpret_cast<char*>(&version), 4);
  f.read(reinterpret_cast<char*>(&hash), 8);
  f.read(reinterpret_cast<char*>(&flag), 1);
  check(version == 1, ErrorCategory::Data, "unsupported style discriminator checkpoint version");
  check(hash == enc_config_hash, ErrorCategory::Config,
        "style discriminator was pretrained under a different encoder configuration");
  uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), 8);
  check(f.good() && len < (1ull << 31), ErrorCategory::Data, "corrupt segment length");
  std::vector<unsigned char> payload(len);
  f.read(reinterpret_cast<char*>(payload.data()), std::streamsize(len));
  uint32_t crc_stored = 0;
  f.read(reinterpret_cast<char*>(&crc_stored), 4);
  check(f.good(), ErrorCategory::Data, "truncated style discriminator checkpoint");
  check(crc32(payload.data(), payload.size()) == crc_stored, ErrorCategory::Data,
        "style discriminator checkpoint failed its checksum");
  params_.deserialize(payload);
  pretrained_ = flag != 0;
}

}  // namespace stx::adversaries
