#pragma once

// Projection heads, prototype classifiers, the MI discriminator, and the
// non-PatchMix loss terms. Every loss returns a 1x1 Var averaged over its
// anchors.

#include <span>
#include <vector>

#include "gcd/autograd.hpp"
#include "gcd/nn.hpp"

namespace gcd::losses {

// All scalar hyperparameters shared by the three training methods.
struct TrainConfig {
  double lambda = 0.65;       // weight of the all-sample (unsupervised) terms
  double eps_s = 2.0;         // semantic mean-entropy weight
  double eps_d = 0.1;         // domain mean-entropy weight
  double epsilon = 2.0;       // VL mean-entropy weight
  double tau = 0.07;          // vision classification / contrastive temperature
  double tau_sharpen = 0.035; // pseudo-label sharpening, tau / 2
  double tau_vl = 0.007;      // VL matching-score temperature
  double tau_text = 0.007;    // temperature of the soft text-assignment q_i
  double tau_align = 1.0;     // similarity scale inside the symmetric-KL alignment
  double beta1 = 0.5;         // VL MI weight
  double beta2 = 0.4;         // VL alignment weight
  int k = 20;                 // alternation period
  double lr = 0.05;           // eta
  double lr_prompt = 0.05;    // eta_p
  double backbone_lr_scale = 1.0;  // s
  int views = 2;              // M
  int mi_disc_steps = 1;
  double momentum = 0.9;
  double disc_momentum = 0.0; // heavy-ball on the ascent step lags behind a moving encoder
  double weight_decay = 5e-5;
  int epochs = 50;
  int batch_size = 32;
  double grad_clip = 5.0;
  double mix_beta = 1.0;      // Beta(a, a) for per-patch mixing weights
  bool use_mi = true;
  bool use_patchmix = true;
  bool use_curriculum = true;
  bool use_domain_loss = true;
  bool use_phases = true;     // alternate prompt / model groups (prompt methods only)
  bool train_prompts = true;  // false keeps spatial prompts frozen at their init
  bool cosine_lr = false;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// d -> 2d -> 2d -> d_proj MLP with l2-normalised output.
class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(ad::Index in, ad::Index hidden, ad::Index out, Rng& rng);
  ad::Var operator()(const ad::Var& x) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;

 private:
  nn::Mlp3 mlp_;
};

// Learnable class prototypes, rows normalised at use.
class PrototypeBank {
 public:
  PrototypeBank() = default;
  PrototypeBank(ad::Index classes, ad::Index dim, Rng& rng);
  ad::Var normalized() const;
  // unit features [n, d] -> cosine logits / tau [n, K]
  ad::Var logits(const ad::Var& unit_features, double tau) const;
  const ad::Var& weights() const { return weights_; }
  void collect(const std::string& prefix, nn::ParamList& out) const;

 private:
  ad::Var weights_;
};

// MLP on concatenated (h_dom, h_sem) pairs with a scalar output.
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(ad::Index feature_dim, ad::Index hidden, Rng& rng);
  ad::Var operator()(const ad::Var& h_dom, const ad::Var& h_sem) const;  // [n, 1]
  void collect(const std::string& prefix, nn::ParamList& out) const;

 private:
  nn::Mlp3 mlp_;
};

// Throws ConfigError unless every row has unit l2 norm (tol 1e-6).
void require_unit_rows(const ad::Mat& m, const char* what);

using PositiveSets = std::vector<std::vector<int>>;

// Single-anchor InfoNCE: -(1/|P|) sum_p log softmax over (P u N) of a.c / tau.
ad::Var rep_loss(const ad::Var& anchor, const ad::Var& positives, const ad::Var& negatives, double tau);

// Batched InfoNCE. Row anchors[i] of features is an anchor whose positives are
// positives[i]; candidates are all other rows. Anchor i is weighted by
// weights[i] (default 1). Returns (1 / |anchors|) * sum_i weights[i] * loss_i.
ad::Var contrastive_loss(const ad::Var& features, std::span<const int> anchors, const PositiveSets& positives,
                         double tau, const ad::Vec* weights = nullptr);

// Mean over rows of -sum_k targets(i,k) * log softmax(logits)(i,k).
ad::Var cross_entropy(const ad::Var& logits, const ad::Mat& targets, const ad::Vec* weights = nullptr);

// Prototype classification loss on unit features; targets rows must be distributions.
ad::Var cls_loss(const ad::Var& unit_features, const ad::Var& prototypes, const ad::Mat& targets, double tau);

// softmax(logits / tau) as a constant (stop-gradient) target.
ad::Mat sharpen(const ad::Mat& logits, double tau);
ad::Mat one_hot(std::span<const int> labels, int classes);
void require_distributions(const ad::Mat& q, const char* what);

// Delta = -H(mean_i probs_i).
ad::Var entropy_reg(const ad::Var& probs);

struct SimGcdConfig {
  double lambda = 0.65;
  double epsilon = 2.0;
  double tau = 0.07;
  double tau_sharpen = 0.035;
};

struct SimGcdTerms {
  ad::Var rep_all, cls_all, rep_sup, cls_sup, delta;
  ad::Var weighted_rc;  // lambda * (rep_all + cls_all) + (1 - lambda) * (rep_sup + cls_sup)
  ad::Var weighted_delta;  // epsilon * delta
  ad::Var total;
};

// Two-view batch: rows [0, n) are view 0 and rows [n, 2n) view 1 of the same n
// samples. labels[i] >= 0 marks sample i as labelled. proj are the unit
// projector outputs; features are the unit vectors fed to the prototypes.
SimGcdTerms simgcd_loss(const ad::Var& proj, const ad::Var& features, const ad::Var& prototypes,
                        std::span<const int> labels, const SimGcdConfig& cfg);

// Pairing used for the marginal term: row i is paired with h_sem[perm[i]].
std::vector<int> shift_derangement(int n, int shift = 1);
bool is_derangement(std::span<const int> perm);

// Jensen-Shannon MI estimate: E_joint[-softplus(-D)] + E_marginal[-softplus(D)].
ad::Var mi_estimate(const ad::Var& h_dom, const ad::Var& h_sem, const Discriminator& disc, std::span<const int> perm);
// Same estimator on precomputed discriminator scores.
ad::Var mi_from_scores(const ad::Var& joint_scores, const ad::Var& marginal_scores);

double match_score(const ad::Vec& image_embedding, const ad::Vec& text_embedding);

// Cross-entropy of softmax(V E^T / tau) against targets.
ad::Var vl_cls_loss(const ad::Var& image_unit, const ad::Var& text_bank, const ad::Mat& targets, double tau);

// Symmetric KL between row softmaxes of S and S^T, S = V T^T / tau.
ad::Var vl_align_loss(const ad::Var& image_batch, const ad::Var& text_batch, double tau = 1.0);
ad::Var vl_align_from_similarity(const ad::Var& similarity);

}  // namespace gcd::losses
