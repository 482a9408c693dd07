#include "gcd/prompts.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>

#include "gcd/errors.hpp"

namespace gcd::prompts {

namespace {

constexpr double kSelfLoop = 1e-8;

std::vector<int> split_at(const ad::Vec& v, double t) {
  std::vector<int> side(static_cast<std::size_t>(v.size()));
  for (ad::Index i = 0; i < v.size(); ++i) side[i] = v(i) > t ? 1 : 0;
  return side;
}

bool both_sides(const std::vector<int>& side) {
  const auto ones = std::count(side.begin(), side.end(), 1);
  return ones > 0 && ones < static_cast<long>(side.size());
}

double quantile(ad::Vec v, double q) {
  std::sort(v.data(), v.data() + v.size());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<ad::Index>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v(lo) + (pos - static_cast<double>(lo)) * (v(hi) - v(lo));
}

}  // namespace

void AffinityConfig::validate() const {
  if (radius < 1) throw ConfigError("affinity radius must be >= 1");
  if (!std::isfinite(sigma)) throw ConfigError("affinity sigma must be finite");
}

ad::Mat affinity(const ad::Mat& features, int grid, const AffinityConfig& cfg) {
  cfg.validate();
  const ad::Index p = features.rows();
  if (p != static_cast<ad::Index>(grid) * grid) throw ConfigError("affinity: feature rows must equal grid * grid");
  if (p < 4) throw ConfigError("affinity: need at least 4 patches");
  if (!features.allFinite()) throw ConfigError("affinity: non-finite features");

  auto gated = [&](ad::Index i, ad::Index j) {
    const auto di = std::abs(i / grid - j / grid), dj = std::abs(i % grid - j % grid);
    return i != j && std::max(di, dj) < cfg.radius;
  };
  ad::Mat dist2 = ad::Mat::Zero(p, p);
  std::vector<double> dists;
  for (ad::Index i = 0; i < p; ++i) {
    for (ad::Index j = i + 1; j < p; ++j) {
      if (!gated(i, j)) continue;
      const double d2 = (features.row(i) - features.row(j)).squaredNorm();
      dist2(i, j) = dist2(j, i) = d2;
      dists.push_back(std::sqrt(d2));
    }
  }
  double sigma = cfg.sigma;
  if (sigma <= 0.0) {
    sigma = 0.0;
    if (!dists.empty()) {
      auto mid = dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2);
      std::nth_element(dists.begin(), mid, dists.end());
      sigma = *mid;
    }
    // All gated features identical: any positive bandwidth gives unit weights.
    if (!(sigma > 0.0)) sigma = 1.0;
  }
  ad::Mat w = ad::Mat::Zero(p, p);
  for (ad::Index i = 0; i < p; ++i) {
    for (ad::Index j = 0; j < p; ++j) {
      if (gated(i, j)) w(i, j) = std::exp(-dist2(i, j) / (2 * sigma * sigma));
    }
  }
  for (ad::Index i = 0; i < p; ++i) {
    if (w.row(i).sum() <= 0.0) w(i, i) = kSelfLoop;
  }
  return w;
}

double ncut_value(const ad::Mat& w, const std::vector<int>& side) {
  double cut = 0, assoc_a = 0, assoc_b = 0;
  for (ad::Index i = 0; i < w.rows(); ++i) {
    const double deg = w.row(i).sum();
    (side[i] ? assoc_a : assoc_b) += deg;
    for (ad::Index j = 0; j < w.cols(); ++j) {
      if (side[i] == 1 && side[j] == 0) cut += w(i, j);
    }
  }
  if (assoc_a <= 0.0 || assoc_b <= 0.0) return std::numeric_limits<double>::infinity();
  return cut / assoc_a + cut / assoc_b;
}

Bipartition spectral_bipartition(const ad::Mat& w, bool quantile_sweep) {
  const ad::Index p = w.rows();
  if (p < 2 || w.cols() != p) throw ConfigError("spectral_bipartition: need a square graph with >= 2 nodes");
  ad::Mat wd = w;
  ad::Vec deg = wd.rowwise().sum();
  for (ad::Index i = 0; i < p; ++i) {
    if (deg(i) <= 0.0) {
      wd(i, i) += kSelfLoop;
      deg(i) += kSelfLoop;
    }
  }
  const ad::Vec dis = deg.cwiseSqrt().cwiseInverse();
  // I - D^-1/2 W D^-1/2
  Eigen::MatrixXd lsym = -(dis.asDiagonal() * Eigen::MatrixXd(wd) * dis.asDiagonal());
  lsym.diagonal().array() += 1.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(lsym);
  if (es.info() != Eigen::Success) throw ConfigError("spectral_bipartition: eigen solve failed");

  Bipartition b;
  b.mu2 = es.eigenvalues()(1);
  b.v2 = dis.asDiagonal() * es.eigenvectors().col(1);
  b.v2.normalize();
  // Fix the sign so results do not depend on the solver's choice.
  ad::Index big;
  b.v2.cwiseAbs().maxCoeff(&big);
  if (b.v2(big) < 0) b.v2 = -b.v2;

  b.side = split_at(b.v2, 0.0);
  if (!both_sides(b.side)) b.side = split_at(b.v2, 0.5 * (b.v2.minCoeff() + b.v2.maxCoeff()));
  b.ncut = ncut_value(wd, b.side);
  if (quantile_sweep) {
    for (double q : {0.3, 0.4, 0.5, 0.6, 0.7}) {
      auto s = split_at(b.v2, quantile(b.v2, q));
      if (!both_sides(s)) continue;
      const double v = ncut_value(wd, s);
      if (v < b.ncut) {
        b.ncut = v;
        b.side = std::move(s);
      }
    }
  }
  return b;
}

std::vector<int> ncut_mask(const ad::Mat& features, const ad::Vec& cls_attention, int grid, const AffinityConfig& cfg) {
  if (cls_attention.size() != features.rows()) throw ConfigError("ncut_mask: attention length must equal patch count");
  Bipartition b = spectral_bipartition(affinity(features, grid, cfg), cfg.quantile_sweep);
  double s1 = 0, s0 = 0;
  int n1 = 0, n0 = 0;
  for (ad::Index i = 0; i < cls_attention.size(); ++i) {
    if (b.side[i]) {
      s1 += cls_attention(i);
      ++n1;
    } else {
      s0 += cls_attention(i);
      ++n0;
    }
  }
  const double m1 = n1 ? s1 / n1 : -1.0, m0 = n0 ? s0 / n0 : -1.0;
  if (m1 >= m0) return b.side;
  std::vector<int> flipped(b.side.size());
  for (std::size_t i = 0; i < flipped.size(); ++i) flipped[i] = 1 - b.side[i];
  return flipped;
}

ad::Mat ncut_masks(const ad::Mat& features, const ad::Mat& attention, int grid, const AffinityConfig& cfg) {
  const ad::Index p = static_cast<ad::Index>(grid) * grid;
  if (attention.cols() != p || features.rows() != attention.rows() * p) {
    throw ConfigError("ncut_masks: features and attention disagree on batch or patch count");
  }
  ad::Mat out(attention.rows(), p);
  for (ad::Index b = 0; b < attention.rows(); ++b) {
    auto m = ncut_mask(features.middleRows(b * p, p), attention.row(b).transpose(), grid, cfg);
    for (ad::Index j = 0; j < p; ++j) out(b, j) = m[j];
  }
  return out;
}

ad::Var apply_semantic_spt(const ad::Var& patch_embeddings, const ad::Mat& masks, const ad::Var& q_fg) {
  if (masks.size() != patch_embeddings.rows()) throw ConfigError("apply_semantic_spt: mask length must equal patch rows");
  if (q_fg.rows() != 1 || q_fg.cols() != patch_embeddings.cols()) throw ConfigError("apply_semantic_spt: q_fg must be [1, d]");
  ad::Mat m = Eigen::Map<const ad::Mat>(masks.data(), masks.size(), 1);
  return ad::add(patch_embeddings, ad::matmul(ad::constant(std::move(m)), q_fg));
}

ad::Mat boundary_mask(int patch, int border) {
  if (patch < 1) throw ConfigError("boundary_mask: patch size must be >= 1");
  if (border < 0 || border > (patch + 1) / 2) throw ConfigError("boundary_mask: border width out of range");
  ad::Mat m(patch, patch);
  for (int u = 0; u < patch; ++u) {
    for (int v = 0; v < patch; ++v) {
      const bool interior = border <= u && u < patch - border && border <= v && v < patch - border;
      m(u, v) = interior ? 0.0 : 1.0;
    }
  }
  return m;
}

ad::Mat boundary_mask_image(int image_size, int patch, int border) {
  if (patch < 1 || image_size % patch != 0) throw ConfigError("boundary_mask_image: image size must be a multiple of the patch");
  const ad::Mat tile = boundary_mask(patch, border);
  ad::Mat m(image_size, image_size);
  for (int y = 0; y < image_size; ++y) {
    for (int x = 0; x < image_size; ++x) m(y, x) = tile(y % patch, x % patch);
  }
  return m;
}

ad::Var apply_boundary_spt(const ad::Var& pixels, const ad::Var& q_s, const ad::Mat& mask, int channels) {
  const ad::Index plane = mask.size();
  if (q_s.rows() != 1 || q_s.cols() != channels * plane || pixels.cols() != channels * plane) {
    throw ConfigError("apply_boundary_spt: prompt, mask and image shapes disagree");
  }
  ad::Mat gate(1, channels * plane);
  for (int c = 0; c < channels; ++c) {
    gate.middleCols(c * plane, plane) = Eigen::Map<const ad::Mat>(mask.data(), 1, plane);
  }
  return ad::add_row(pixels, ad::mul(q_s, ad::constant(std::move(gate))));
}

TextPromptState::TextPromptState(int num_classes, int token_dim, const TextPromptConfig& cfg, Rng& rng)
    : num_classes_(num_classes), cfg_(cfg) {
  if (num_classes < 1 || token_dim < 1) throw ConfigError("text prompts: need at least one class and token dimension");
  if (cfg.context_tokens < 0 || cfg.tokens_per_class < 1) throw ConfigError("text prompts: invalid token counts");
  context_ = nn::parameter(nn::gaussian(cfg.context_tokens, token_dim, cfg.init_scale, rng));
  gamma_ = nn::parameter(nn::gaussian(static_cast<ad::Index>(num_classes) * cfg.tokens_per_class, token_dim,
                                      cfg.init_scale, rng));
}

std::size_t TextPromptState::parameter_count() const {
  return static_cast<std::size_t>(context_.value().size() + gamma_.value().size());
}

void TextPromptState::collect(const std::string& prefix, nn::ParamList& out) const {
  if (context_.rows() > 0) out.push_back({prefix + ".context", context_});
  out.push_back({prefix + ".category", gamma_});
}

ad::Var TextPromptState::sequence(int k) const {
  if (k < 0 || k >= num_classes_) throw std::out_of_range("text prompts: class index out of range");
  const ad::Var cat = ad::slice_rows(gamma_, static_cast<ad::Index>(k) * cfg_.tokens_per_class, cfg_.tokens_per_class);
  if (context_.rows() == 0) return cat;
  const ad::Var parts[] = {context_, cat};
  return ad::concat_rows(parts);
}

ad::Var build_text_embedding(int k, const TextPromptState& prompts, const backbone::TextEncoder& encoder) {
  return ad::normalize_rows(encoder.encode_one(prompts.sequence(k)));
}

ad::Var text_bank(const TextPromptState& prompts, const backbone::TextEncoder& encoder) {
  std::vector<ad::Var> seqs;
  for (int k = 0; k < prompts.num_classes(); ++k) seqs.push_back(prompts.sequence(k));
  const ad::Index len = seqs.front().rows();
  return ad::normalize_rows(encoder.encode(ad::concat_rows(seqs), prompts.num_classes(), len));
}

Phase PhaseSchedule::at(long long iteration) const { return phase_schedule(iteration, k, initial); }

Phase phase_schedule(long long iteration, int k, Phase initial) {
  if (k < 1) throw ConfigError("phase schedule: k must be >= 1");
  if (iteration < 0) throw ConfigError("phase schedule: iteration must be >= 0");
  const long long toggles = (iteration + 1) / k;
  const bool flipped = toggles % 2 == 1;
  if (!flipped) return initial;
  return initial == Phase::kModel ? Phase::kPrompt : Phase::kModel;
}

std::string to_string(Phase p) { return p == Phase::kModel ? "model" : "prompt"; }

}  // namespace gcd::prompts
