#include "gcd/patchmix.hpp"

#include <cmath>
#include <string>

#include "gcd/errors.hpp"
#include "gcd/heads_losses.hpp"

namespace gcd::patchmix {

namespace {

void require_unit_interval(const ad::Vec& v, const char* what) {
  for (ad::Index i = 0; i < v.size(); ++i) {
    if (!(v(i) >= 0.0 && v(i) <= 1.0)) throw ConfigError(std::string(what) + " must lie in [0, 1]");
  }
}

void require_attention(const ad::Vec& s, const char* what) {
  if (s.minCoeff() < 0.0 || std::abs(s.sum() - 1.0) > 1e-5) {
    throw ConfigError(std::string(what) + " must be non-negative and sum to 1");
  }
}

}  // namespace

std::vector<int> pair_partners(std::span<const bool> labelled, Rng& rng) {
  const auto n = static_cast<int>(labelled.size());
  if (n < 2) throw ConfigError("patchmix: batch needs at least two samples");
  std::vector<int> lab, unl;
  for (int i = 0; i < n; ++i) (labelled[i] ? lab : unl).push_back(i);

  auto shuffled = [&](const std::vector<int>& ids) {
    std::vector<int> out;
    for (int p : rng.permutation(static_cast<int>(ids.size()))) out.push_back(ids[p]);
    return out;
  };

  std::vector<int> partner(n, -1);
  if (!lab.empty() && !unl.empty()) {
    const auto pl = shuffled(lab);
    const auto pu = shuffled(unl);
    for (std::size_t i = 0; i < lab.size(); ++i) partner[lab[i]] = pu[i % pu.size()];
    for (std::size_t i = 0; i < unl.size(); ++i) partner[unl[i]] = pl[i % pl.size()];
  } else {
    // Single group: a shuffled cycle, so nobody is paired with itself.
    const auto order = shuffled(lab.empty() ? unl : lab);
    for (std::size_t i = 0; i < order.size(); ++i) partner[order[i]] = order[(i + 1) % order.size()];
  }
  return partner;
}

MixPlan make_plan(std::vector<int> partner, int num_patches, double beta_a, Rng& rng) {
  if (num_patches < 1) throw ConfigError("patchmix: need at least one patch");
  MixPlan plan;
  const auto n = static_cast<ad::Index>(partner.size());
  for (int p : partner) {
    if (p < 0 || p >= n) throw ConfigError("patchmix: partner index out of range");
  }
  plan.partner = std::move(partner);
  plan.beta.resize(n, num_patches);
  for (ad::Index i = 0; i < plan.beta.size(); ++i) plan.beta.data()[i] = rng.beta(beta_a, beta_a);
  plan.beta_mean = plan.beta.rowwise().mean();
  plan.alpha = ad::Vec::Ones(n);
  return plan;
}

ad::Var mix_patch_embeddings(const ad::Var& anchor, const ad::Var& partner, const ad::Mat& beta) {
  if (anchor.rows() != partner.rows() || anchor.cols() != partner.cols()) {
    throw ConfigError("mix_patch_embeddings: anchor and partner shapes differ");
  }
  if (beta.size() != anchor.rows()) throw ConfigError("mix_patch_embeddings: beta does not match the patch count");
  const ad::Vec b = Eigen::Map<const ad::Vec>(beta.data(), beta.size());
  require_unit_interval(b, "beta");
  return ad::add(ad::scale_rows(anchor, b), ad::scale_rows(partner, (1.0 - b.array()).matrix()));
}

double mix_coefficient(const ad::Vec& beta, const ad::Vec& s, const ad::Vec& s_partner) {
  if (beta.size() != s.size() || s.size() != s_partner.size()) throw ConfigError("mix_coefficient: length mismatch");
  require_unit_interval(beta, "beta");
  require_attention(s, "anchor attention");
  require_attention(s_partner, "partner attention");
  const double num = beta.dot(s);
  const double den = num + (1.0 - beta.array()).matrix().dot(s_partner);
  if (!(den > 0.0)) throw ConfigError("mix_coefficient: zero denominator");
  return num / den;
}

void assign_alpha(MixPlan& plan, const ad::Mat& attention) {
  const auto n = static_cast<ad::Index>(plan.partner.size());
  if (attention.rows() != n || attention.cols() != plan.beta.cols()) {
    throw ConfigError("assign_alpha: attention shape does not match the plan");
  }
  plan.alpha.resize(n);
  for (ad::Index i = 0; i < n; ++i) {
    plan.alpha(i) = mix_coefficient(plan.beta.row(i).transpose(), attention.row(i).transpose(),
                                    attention.row(plan.partner[i]).transpose());
  }
}

ad::Var pm_rep_loss(const ad::Var& mixed_proj, const ad::Vec& alpha, double tau) {
  const auto rows = static_cast<int>(mixed_proj.rows());
  if (rows % 2 != 0 || alpha.size() != rows) throw ConfigError("pm_rep_loss: expected two mixed views and one alpha per row");
  require_unit_interval(alpha, "alpha");
  const int n = rows / 2;
  std::vector<int> anchors(rows);
  losses::PositiveSets pos(rows);
  for (int r = 0; r < rows; ++r) {
    anchors[r] = r;
    pos[r] = {(r + n) % rows};
  }
  return losses::contrastive_loss(mixed_proj, anchors, pos, tau, &alpha);
}

ad::Mat pm_soft_label(const ad::Mat& q, const ad::Vec& alpha) {
  if (alpha.size() != q.rows()) throw ConfigError("pm_soft_label: one alpha per row required");
  require_unit_interval(alpha, "alpha");
  losses::require_distributions(q, "pm_soft_label q");
  const auto k = static_cast<double>(q.cols());
  ad::Mat out(q.rows(), q.cols());
  for (ad::Index i = 0; i < q.rows(); ++i) out.row(i) = alpha(i) * q.row(i).array() + (1.0 - alpha(i)) / k;
  return out;
}

ad::Mat pm_targets(std::span<const int> labels, const ad::Mat& other_view_scores, double tau_sharpen) {
  if (static_cast<ad::Index>(labels.size()) != other_view_scores.rows()) {
    throw ConfigError("pm_targets: label count does not match scores");
  }
  ad::Mat q = losses::sharpen(other_view_scores, tau_sharpen);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    if (labels[i] >= q.cols()) throw ConfigError("pm_targets: label out of range");
    q.row(static_cast<ad::Index>(i)).setZero();
    q(static_cast<ad::Index>(i), labels[i]) = 1.0;
  }
  return q;
}

ad::Var pm_cls_loss(const ad::Var& mixed_unit, const ad::Var& prototypes, const ad::Mat& soft_targets, double tau) {
  return losses::cls_loss(mixed_unit, prototypes, soft_targets, tau);
}

ad::Var pm_vl_cls_loss(const ad::Var& mixed_unit, const ad::Var& text_bank, const ad::Mat& soft_targets, double tau) {
  return losses::vl_cls_loss(mixed_unit, text_bank, soft_targets, tau);
}

ad::Var mix_text(const ad::Var& t_anchor, const ad::Var& t_partner, const ad::Vec& beta_mean) {
  if (t_anchor.rows() != t_partner.rows() || t_anchor.cols() != t_partner.cols()) {
    throw ConfigError("mix_text: text feature shapes differ");
  }
  if (beta_mean.size() != t_anchor.rows()) throw ConfigError("mix_text: one mean coefficient per row required");
  require_unit_interval(beta_mean, "beta mean");
  return ad::add(ad::scale_rows(t_anchor, beta_mean), ad::scale_rows(t_partner, (1.0 - beta_mean.array()).matrix()));
}

ad::Var pm_vl_loss(const ad::Var& mixed_visual, const ad::Var& mixed_text, double tau) {
  return losses::vl_align_loss(mixed_visual, mixed_text, tau);
}

}  // namespace gcd::patchmix
