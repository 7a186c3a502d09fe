#pragma once

#include <vector>

#include "stx/system.hpp"

namespace stx::objectives {

using ad::Tape;
using ad::Var;

struct LossWeights {
  double alpha = 1.0;   // reconstruction
  double beta = 1.0;    // adversarial
  double gamma = 5.0;   // style distortion
  double lambda = 1.0;  // cycle consistency
  void validate() const {
    check(alpha >= 0 && beta >= 0 && gamma >= 0 && lambda >= 0, ErrorCategory::Config,
          "loss weights must be nonnegative");
  }
};

struct LossBreakdown {
  double l_rec = 0, l_adv_d = 0, l_adv_g = 0, l_dis = 0, l_cyc = 0, total = 0;
  LossWeights weights;
};

// total = alpha*l_rec + beta*l_adv_g + gamma*l_dis + lambda*l_cyc (generator
// view: the adversarial term the generator minimizes is the non-saturating
// one).
double total_of(const LossWeights& w, double l_rec, double l_adv_g, double l_dis, double l_cyc);
LossBreakdown make_breakdown(const LossWeights& w, double l_rec, double l_adv_d, double l_adv_g,
                             double l_dis, double l_cyc);

// ---- probability-space helpers (the exact loss algebra) -------------------

double adv_d_from_probs(const std::vector<double>& p_fake, const std::vector<double>& p_real,
                        double eps = adversaries::kProbEps);
double adv_g_from_probs(const std::vector<double>& p_fake, double eps = adversaries::kProbEps);
// mean over the batch of p * d^2
double style_distortion_from(const std::vector<double>& p, const std::vector<double>& d_sq);

// ---- batch data ------------------------------------------------------------

struct BatchItem {
  const corpus::Utterance* utt = nullptr;
  const Mat* frames = nullptr;  // T x F
};
struct Batch {
  std::vector<BatchItem> source, target;
};

struct TrainOptions {
  enum class CycleMode { teacher_length, free_running };
  CycleMode cycle_mode = CycleMode::teacher_length;
  bool cycle_stop_gradient = false;
  bool use_flow = true;               // false: Gaussian posterior (K = 0 ablation)
  bool adv_real_ground_truth = false; // D's "real" input: T(r_t, z*) as written, or x_t
  int max_frames = 240;
};

// Shared forward state for one shard: posteriors, speaker vectors, text
// memories, the four decoder passes, and the transfers x~_s / x~_t.
struct Pieces {
  encoders::StylePosteriorVars post_src;
  Var r_src, r_tgt;
  decoder::TextEncoder::Memory mem_src, mem_tgt;
  decoder::BatchedDecode recon_src, recon_tgt;
  decoder::BatchedDecode trans_src, trans_tgt;
  std::vector<int> src_lengths, tgt_lengths;
  Var z_star_block_src, z_star_block_tgt;  // constants, d_z x B
};

Pieces build_pieces(Tape& t, const system::System& sys, const Batch& batch, const Col& z_star,
                    const Mat& eps_src, const TrainOptions& opts);

// Per-term sums over the shard (values are sums, not means; the caller
// divides by the batch size so shard boundaries never change the math).
struct GeneratorTerms {
  Var rec_src, rec_tgt;   // teacher-forced NLL sums
  Var adv_g;              // sum of -log D(x~_s)
  Var dis;                // sum of p_Ds(x_s) * |z_s - z*|^2
  Var cyc_src, cyc_tgt;   // cycle NLL sums
  Var log_q_sum;          // sum of posterior log q (for the optional KL term)
  Var zk_sq_sum;          // sum of |zK|^2 (same)
  Pieces pieces;
};

GeneratorTerms build_generator_terms(Tape& t, const system::System& sys, const Batch& batch,
                                     const Col& z_star, const Mat& eps_src,
                                     const std::vector<double>& p_ds_src, const TrainOptions& opts);

// Discriminator objective on its own tape: transfers enter as detached
// values. Returns (sum -log(1 - D(fake)), sum -log D(real)).
std::pair<Var, Var> build_adv_d_sums(Tape& t, const system::System& sys, const std::vector<Mat>& fake,
                                     const std::vector<Mat>& real);

// Extracts per-utterance frame matrices (T_b x F) from a batched decode.
std::vector<Mat> extract_frames(const decoder::BatchedDecode& d, int frame_dim);

// ---- value-level operations over a full batch --------------------------------

double reconstruction_loss(const system::System& sys, const Batch& batch, const Col& z_star,
                           const Mat& eps_src, const TrainOptions& opts = {});
// (l_adv_d, l_adv_g)
std::pair<double, double> adversarial_losses(const system::System& sys, const Batch& batch,
                                             const Col& z_star, const Mat& eps_src,
                                             const TrainOptions& opts = {});
double style_distortion_loss(const system::System& sys, const Batch& batch, const Col& z_star,
                             const Mat& eps_src, const TrainOptions& opts = {});
double cycle_consistency_loss(const system::System& sys, const Batch& batch, const Col& z_star,
                              const Mat& eps_src, const TrainOptions& opts = {});

// Gaussian epsilon draws for the source batch, keyed deterministically.
Mat source_epsilon(int d_z, int batch, uint64_t seed, long step);

}  // namespace stx::objectives
