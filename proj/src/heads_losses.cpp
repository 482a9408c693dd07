#include "gcd/heads_losses.hpp"

#include <cmath>
#include <string>

#include "gcd/errors.hpp"

namespace gcd::losses {

namespace {

constexpr double kUnitTol = 1e-5;
constexpr double kDistTol = 1e-5;
// Finite stand-in for -inf so masked entries multiply cleanly by zero.
constexpr double kMasked = -1e9;

ad::Var neg_mean_selected(const ad::Var& log_probs, const ad::Mat& selection, ad::Index anchors) {
  return ad::scale(ad::sum(ad::mul(log_probs, ad::constant(selection))), -1.0 / static_cast<double>(anchors));
}

}  // namespace

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  for (auto [name, t] : {std::pair{"tau", tau}, {"tau_sharpen", tau_sharpen}, {"tau_vl", tau_vl},
                         {"tau_text", tau_text}, {"tau_align", tau_align}}) {
    need(t > 0.0 && std::isfinite(t), std::string(name) + " must be > 0");
  }
  need(lambda >= 0.0 && lambda <= 1.0, "lambda must lie in [0, 1]");
  need(k >= 1, "k must be >= 1");
  need(views >= 2, "views (M) must be >= 2");
  need(lr > 0.0 && lr_prompt > 0.0, "learning rates must be > 0");
  need(backbone_lr_scale >= 0.0, "backbone_lr_scale must be >= 0");
  need(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
  need(disc_momentum >= 0.0 && disc_momentum < 1.0, "disc_momentum must lie in [0, 1)");
  need(weight_decay >= 0.0, "weight_decay must be >= 0");
  need(epochs >= 1, "epochs must be >= 1");
  need(batch_size >= 2 && batch_size % 2 == 0, "batch_size must be even and >= 2");
  need(mi_disc_steps >= 0, "mi_disc_steps must be >= 0");
  need(grad_clip > 0.0, "grad_clip must be > 0");
  need(mix_beta > 0.0, "mix_beta must be > 0");
  need(eps_s >= 0.0 && eps_d >= 0.0 && epsilon >= 0.0 && beta1 >= 0.0 && beta2 >= 0.0,
       "loss weights must be >= 0");
}

ProjectionHead::ProjectionHead(ad::Index in, ad::Index hidden, ad::Index out, Rng& rng) : mlp_(in, hidden, out, rng) {}

ad::Var ProjectionHead::operator()(const ad::Var& x) const { return ad::normalize_rows(mlp_(x)); }

void ProjectionHead::collect(const std::string& prefix, nn::ParamList& out) const { mlp_.collect(prefix, out); }

PrototypeBank::PrototypeBank(ad::Index classes, ad::Index dim, Rng& rng)
    : weights_(nn::parameter(nn::gaussian(classes, dim, 1.0, rng))) {}

ad::Var PrototypeBank::normalized() const { return ad::normalize_rows(weights_); }

ad::Var PrototypeBank::logits(const ad::Var& unit_features, double tau) const {
  return ad::scale(ad::matmul_nt(unit_features, normalized()), 1.0 / tau);
}

void PrototypeBank::collect(const std::string& prefix, nn::ParamList& out) const {
  out.push_back({prefix + ".weight", weights_});
}

Discriminator::Discriminator(ad::Index feature_dim, ad::Index hidden, Rng& rng)
    : mlp_(2 * feature_dim, hidden, 1, rng) {}

ad::Var Discriminator::operator()(const ad::Var& h_dom, const ad::Var& h_sem) const {
  const ad::Var parts[] = {h_dom, h_sem};
  return mlp_(ad::concat_cols(parts));
}

void Discriminator::collect(const std::string& prefix, nn::ParamList& out) const { mlp_.collect(prefix, out); }

void require_unit_rows(const ad::Mat& m, const char* what) {
  for (ad::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (!(std::abs(n - 1.0) <= kUnitTol)) {
      throw ConfigError(std::string(what) + ": row " + std::to_string(i) + " is not unit-norm (" +
                        std::to_string(n) + ")");
    }
  }
}

void require_distributions(const ad::Mat& q, const char* what) {
  for (ad::Index i = 0; i < q.rows(); ++i) {
    const double s = q.row(i).sum();
    if (!(std::abs(s - 1.0) <= kDistTol) || q.row(i).minCoeff() < -kDistTol) {
      throw ConfigError(std::string(what) + ": row " + std::to_string(i) + " is not a distribution (sum " +
                        std::to_string(s) + ")");
    }
  }
}

ad::Var rep_loss(const ad::Var& anchor, const ad::Var& positives, const ad::Var& negatives, double tau) {
  if (anchor.rows() != 1) throw ConfigError("rep_loss: anchor must be a single row");
  if (!positives.defined() || positives.rows() == 0) throw ConfigError("rep_loss: empty positive set");
  require_unit_rows(anchor.value(), "rep_loss anchor");
  require_unit_rows(positives.value(), "rep_loss positives");
  ad::Var candidates = positives;
  if (negatives.defined() && negatives.rows() > 0) {
    require_unit_rows(negatives.value(), "rep_loss negatives");
    const ad::Var parts[] = {positives, negatives};
    candidates = ad::concat_rows(parts);
  }
  ad::Var logp = ad::log_softmax_rows(ad::scale(ad::matmul_nt(anchor, candidates), 1.0 / tau));
  return ad::scale(ad::mean(ad::slice_cols(logp, 0, positives.rows())), -1.0);
}

ad::Var contrastive_loss(const ad::Var& features, std::span<const int> anchors, const PositiveSets& positives,
                         double tau, const ad::Vec* weights) {
  const auto a = static_cast<ad::Index>(anchors.size());
  const ad::Index n = features.rows();
  if (a == 0) throw ConfigError("contrastive_loss: no anchors");
  if (positives.size() != anchors.size()) throw ConfigError("contrastive_loss: positives/anchors size mismatch");
  if (weights && weights->size() != a) throw ConfigError("contrastive_loss: weights size mismatch");
  require_unit_rows(features.value(), "contrastive_loss features");

  std::vector<ad::Index> rows(anchors.begin(), anchors.end());
  ad::Mat mask = ad::Mat::Zero(a, n);
  ad::Mat select = ad::Mat::Zero(a, n);
  for (ad::Index i = 0; i < a; ++i) {
    const int self = anchors[i];
    if (self < 0 || self >= n) throw ConfigError("contrastive_loss: anchor out of range");
    const auto& pos = positives[i];
    if (pos.empty()) throw ConfigError("contrastive_loss: empty positive set for anchor " + std::to_string(self));
    mask(i, self) = kMasked;
    const double w = (weights ? (*weights)(i) : 1.0) / static_cast<double>(pos.size());
    for (int p : pos) {
      if (p < 0 || p >= n || p == self) throw ConfigError("contrastive_loss: invalid positive index");
      select(i, p) += w;
    }
  }
  ad::Var sims = ad::scale(ad::matmul_nt(ad::gather_rows(features, rows), features), 1.0 / tau);
  ad::Var logp = ad::log_softmax_rows(ad::add(sims, ad::constant(std::move(mask))));
  return neg_mean_selected(logp, select, a);
}

ad::Var cross_entropy(const ad::Var& logits, const ad::Mat& targets, const ad::Vec* weights) {
  if (logits.rows() == 0) throw ConfigError("cross_entropy: empty batch");
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols()) {
    throw ConfigError("cross_entropy: target shape mismatch");
  }
  ad::Mat t = targets;
  if (weights) {
    if (weights->size() != t.rows()) throw ConfigError("cross_entropy: weights size mismatch");
    for (ad::Index i = 0; i < t.rows(); ++i) t.row(i) *= (*weights)(i);
  }
  return neg_mean_selected(ad::log_softmax_rows(logits), t, logits.rows());
}

ad::Var cls_loss(const ad::Var& unit_features, const ad::Var& prototypes, const ad::Mat& targets, double tau) {
  require_unit_rows(unit_features.value(), "cls_loss features");
  require_distributions(targets, "cls_loss target");
  ad::Var logits = ad::scale(ad::matmul_nt(unit_features, ad::normalize_rows(prototypes)), 1.0 / tau);
  return cross_entropy(logits, targets);
}

ad::Mat sharpen(const ad::Mat& logits, double tau) {
  ad::Mat out(logits.rows(), logits.cols());
  for (ad::Index i = 0; i < logits.rows(); ++i) {
    const auto z = (logits.row(i).array() / tau).eval();
    const auto e = (z - z.maxCoeff()).exp().eval();
    out.row(i) = e / e.sum();
  }
  return out;
}

ad::Mat one_hot(std::span<const int> labels, int classes) {
  ad::Mat out = ad::Mat::Zero(static_cast<ad::Index>(labels.size()), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) throw ConfigError("one_hot: label out of range");
    out(static_cast<ad::Index>(i), labels[i]) = 1.0;
  }
  return out;
}

ad::Var entropy_reg(const ad::Var& probs) {
  if (!probs.defined() || probs.rows() == 0) throw ConfigError("entropy_reg: empty batch");
  ad::Var mean_p = ad::mean_rows(probs);
  return ad::sum(ad::mul(mean_p, ad::log(ad::add_scalar(mean_p, 1e-300))));
}

SimGcdTerms simgcd_loss(const ad::Var& proj, const ad::Var& features, const ad::Var& prototypes,
                        std::span<const int> labels, const SimGcdConfig& cfg) {
  const auto n = static_cast<int>(labels.size());
  if (n == 0) throw ConfigError("simgcd_loss: empty batch");
  if (proj.rows() != 2 * n || features.rows() != 2 * n) throw ConfigError("simgcd_loss: expected two views per sample");
  const auto k = static_cast<int>(prototypes.rows());
  require_unit_rows(features.value(), "simgcd_loss features");

  SimGcdTerms t;
  std::vector<int> all(2 * n);
  PositiveSets other_view(2 * n);
  for (int r = 0; r < 2 * n; ++r) {
    all[r] = r;
    other_view[r] = {(r + n) % (2 * n)};
  }
  t.rep_all = contrastive_loss(proj, all, other_view, cfg.tau);

  ad::Var logits = ad::scale(ad::matmul_nt(features, ad::normalize_rows(prototypes)), 1.0 / cfg.tau);
  // Pseudo-labels: sharpened cosine scores of the other view, no gradient.
  ad::Mat cos = features.value() * ad::normalize_rows(ad::detach(prototypes)).value().transpose();
  ad::Mat swapped(cos.rows(), cos.cols());
  swapped.topRows(n) = cos.bottomRows(n);
  swapped.bottomRows(n) = cos.topRows(n);
  t.cls_all = cross_entropy(logits, sharpen(swapped, cfg.tau_sharpen));

  std::vector<int> sup_rows;
  for (int r = 0; r < 2 * n; ++r) {
    const int y = labels[r % n];
    if (y >= k) throw ConfigError("simgcd_loss: label out of range");
    if (y >= 0) sup_rows.push_back(r);
  }
  if (sup_rows.empty()) {
    t.rep_sup = ad::Var::scalar(0.0);
    t.cls_sup = ad::Var::scalar(0.0);
  } else {
    PositiveSets same_class(sup_rows.size());
    std::vector<int> sup_labels;
    std::vector<ad::Index> sup_idx;
    for (std::size_t i = 0; i < sup_rows.size(); ++i) {
      const int r = sup_rows[i];
      for (int c : sup_rows) {
        if (c != r && labels[c % n] == labels[r % n]) same_class[i].push_back(c);
      }
      sup_labels.push_back(labels[r % n]);
      sup_idx.push_back(r);
    }
    t.rep_sup = contrastive_loss(proj, sup_rows, same_class, cfg.tau);
    t.cls_sup = cross_entropy(ad::gather_rows(logits, sup_idx), one_hot(sup_labels, k));
  }

  t.delta = entropy_reg(ad::softmax_rows(logits));
  t.weighted_rc = ad::add(ad::scale(ad::add(t.rep_all, t.cls_all), cfg.lambda),
                          ad::scale(ad::add(t.rep_sup, t.cls_sup), 1.0 - cfg.lambda));
  t.weighted_delta = ad::scale(t.delta, cfg.epsilon);
  t.total = ad::add(t.weighted_rc, t.weighted_delta);
  return t;
}

std::vector<int> shift_derangement(int n, int shift) {
  if (n < 2) throw ConfigError("derangement needs a batch of at least 2");
  shift = ((shift % n) + n) % n;
  if (shift == 0) throw ConfigError("derangement shift must not be a multiple of the batch size");
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = (i + shift) % n;
  return perm;
}

bool is_derangement(std::span<const int> perm) {
  const auto n = static_cast<int>(perm.size());
  std::vector<bool> seen(perm.size(), false);
  for (int i = 0; i < n; ++i) {
    const int p = perm[i];
    if (p < 0 || p >= n || p == i || seen[p]) return false;
    seen[p] = true;
  }
  return n >= 2;
}

ad::Var mi_from_scores(const ad::Var& joint_scores, const ad::Var& marginal_scores) {
  ad::Var joint = ad::scale(ad::mean(ad::softplus(ad::scale(joint_scores, -1.0))), -1.0);
  ad::Var marginal = ad::scale(ad::mean(ad::softplus(marginal_scores)), -1.0);
  return ad::add(joint, marginal);
}

ad::Var mi_estimate(const ad::Var& h_dom, const ad::Var& h_sem, const Discriminator& disc,
                    std::span<const int> perm) {
  if (h_dom.rows() != h_sem.rows()) throw ConfigError("mi_estimate: batches are not aligned");
  if (h_dom.rows() < 2) throw ConfigError("mi_estimate: batch size must be >= 2");
  if (static_cast<ad::Index>(perm.size()) != h_sem.rows() || !is_derangement(perm)) {
    throw ConfigError("mi_estimate: pairing is not a derangement");
  }
  std::vector<ad::Index> idx(perm.begin(), perm.end());
  return mi_from_scores(disc(h_dom, h_sem), disc(h_dom, ad::gather_rows(h_sem, idx)));
}

double match_score(const ad::Vec& image_embedding, const ad::Vec& text_embedding) {
  return image_embedding.dot(text_embedding);
}

ad::Var vl_cls_loss(const ad::Var& image_unit, const ad::Var& text_bank, const ad::Mat& targets, double tau) {
  require_unit_rows(image_unit.value(), "vl_cls_loss image");
  require_unit_rows(text_bank.value(), "vl_cls_loss text bank");
  require_distributions(targets, "vl_cls_loss target");
  return cross_entropy(ad::scale(ad::matmul_nt(image_unit, text_bank), 1.0 / tau), targets);
}

ad::Var vl_align_from_similarity(const ad::Var& s) {
  if (s.rows() != s.cols() || s.rows() == 0) throw ConfigError("vl_align: similarity must be square and non-empty");
  ad::Var log_i2t = ad::log_softmax_rows(s);
  ad::Var log_t2i = ad::log_softmax_rows(ad::transpose(s));
  ad::Var diff = ad::sub(log_t2i, log_i2t);
  // KL(t2i || i2t) + KL(i2t || t2i) with diff = log p_t2i - log p_i2t.
  ad::Var kl = ad::sub(ad::sum(ad::mul(ad::exp(log_t2i), diff)), ad::sum(ad::mul(ad::exp(log_i2t), diff)));
  return ad::scale(kl, 0.5 / static_cast<double>(s.rows()));
}

ad::Var vl_align_loss(const ad::Var& image_batch, const ad::Var& text_batch, double tau) {
  if (image_batch.rows() != text_batch.rows() || image_batch.cols() != text_batch.cols()) {
    throw ConfigError("vl_align_loss: V and T shapes differ");
  }
  return vl_align_from_similarity(ad::scale(ad::matmul_nt(image_batch, text_batch), 1.0 / tau));
}

}  // namespace gcd::losses
