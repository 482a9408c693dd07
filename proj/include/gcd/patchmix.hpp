#pragma once

// Patch-embedding mixing between an anchor batch and per-anchor partners,
// the attention-weighted semantic coefficient, and the mixed-view losses.

#include <span>
#include <vector>

#include "gcd/autograd.hpp"
#include "gcd/rng.hpp"

namespace gcd::patchmix {

struct MixPlan {
  std::vector<int> partner;  // partner row per anchor
  ad::Mat beta;              // [n, P], entry (i, j) is the weight of the anchor's patch j
  ad::Vec beta_mean;         // [n]
  ad::Vec alpha;             // [n], set by assign_alpha

  int size() const { return static_cast<int>(partner.size()); }
};

// Partners prefer the opposite labelled/unlabelled group; when one group is
// empty every anchor is paired inside its own group. Never pairs a row with
// itself. Batch must hold at least two rows.
std::vector<int> pair_partners(std::span<const bool> labelled, Rng& rng);

// Draws beta ~ Beta(a, a) per patch for the given pairing.
MixPlan make_plan(std::vector<int> partner, int num_patches, double beta_a, Rng& rng);

// Row block i of the result is beta_i * anchor_i + (1 - beta_i) * partner_i,
// per patch. anchor and partner are [n * P, d], beta is [n, P].
ad::Var mix_patch_embeddings(const ad::Var& anchor, const ad::Var& partner, const ad::Mat& beta);

// alpha = <beta, s> / (<beta, s> + <1 - beta, s'>).
double mix_coefficient(const ad::Vec& beta, const ad::Vec& s, const ad::Vec& s_partner);

// Fills plan.alpha from per-image CLS attention [n, P] of the unmixed batch.
void assign_alpha(MixPlan& plan, const ad::Mat& attention);

// alpha-weighted InfoNCE over two stacked mixed views [2n, dp]; the positive of
// row r is row (r + n) mod 2n. alpha has one entry per row.
ad::Var pm_rep_loss(const ad::Var& mixed_proj, const ad::Vec& alpha, double tau);

// q~ = alpha * q + (1 - alpha) / K.
ad::Mat pm_soft_label(const ad::Mat& q, const ad::Vec& alpha);

// Targets for mixed rows before softening: one-hot for labelled anchors,
// sharpened prediction of the other mixed view otherwise.
ad::Mat pm_targets(std::span<const int> labels, const ad::Mat& other_view_scores, double tau_sharpen);

ad::Var pm_cls_loss(const ad::Var& mixed_unit, const ad::Var& prototypes, const ad::Mat& soft_targets, double tau);
// Cross-modal variant: scores against a unit text bank.
ad::Var pm_vl_cls_loss(const ad::Var& mixed_unit, const ad::Var& text_bank, const ad::Mat& soft_targets, double tau);

// Row-wise t~ = beta_mean * t_s + (1 - beta_mean) * t_t.
ad::Var mix_text(const ad::Var& t_anchor, const ad::Var& t_partner, const ad::Vec& beta_mean);

ad::Var pm_vl_loss(const ad::Var& mixed_visual, const ad::Var& mixed_text, double tau = 1.0);

}  // namespace gcd::patchmix
