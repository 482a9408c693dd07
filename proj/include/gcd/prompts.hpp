#pragma once

// Spectral foreground masks, semantic and boundary spatial prompts, shared
// context / per-category text prompts, and the alternation schedule.

#include <string>
#include <vector>

#include "gcd/autograd.hpp"
#include "gcd/backbone.hpp"
#include "gcd/nn.hpp"

namespace gcd::prompts {

struct AffinityConfig {
  double sigma = 0.0;  // <= 0 selects the median heuristic
  int radius = 3;      // Chebyshev gate on the patch grid: dist(i, j) < radius
  bool quantile_sweep = false;

  void validate() const;
  bool operator==(const AffinityConfig&) const = default;
};

struct Bipartition {
  std::vector<int> side;  // 1 for nodes with v2 above the threshold
  ad::Vec v2;
  double mu2 = 0.0;
  double ncut = 0.0;
};

// Gated Gaussian affinity between the P = grid * grid patch features [P, d].
// Diagonal is zero; isolated nodes get a 1e-8 self-loop.
ad::Mat affinity(const ad::Mat& features, int grid, const AffinityConfig& cfg);

// Second-smallest generalised eigenvector of (D - W) v = mu D v and the
// thresholded split. Thresholds at 0; if that leaves a side empty, at the
// midpoint of v2's range. The optional sweep also tries v2 quantiles 0.3..0.7.
Bipartition spectral_bipartition(const ad::Mat& w, bool quantile_sweep = false);

double ncut_value(const ad::Mat& w, const std::vector<int>& side);

// Per-patch foreground mask: the side with higher mean CLS attention is 1.
std::vector<int> ncut_mask(const ad::Mat& features, const ad::Vec& cls_attention, int grid, const AffinityConfig& cfg);

// Masks for a batch: features [B * P, d], attention [B, P] -> [B, P] of 0/1.
ad::Mat ncut_masks(const ad::Mat& features, const ad::Mat& attention, int grid, const AffinityConfig& cfg);

// x_j + M_j * q_fg for patch embeddings [B * P, d], masks [B, P], q_fg [1, d].
ad::Var apply_semantic_spt(const ad::Var& patch_embeddings, const ad::Mat& masks, const ad::Var& q_fg);

// One S x S patch of the periodic border mask: 0 in the interior, 1 on the border.
ad::Mat boundary_mask(int patch, int border);
// The patch mask tiled over an image of side `image_size`.
ad::Mat boundary_mask_image(int image_size, int patch, int border);

// pixels [B, C*H*W] + (Q_s * M) with Q_s [1, C*H*W] and M [H, W] shared across channels.
ad::Var apply_boundary_spt(const ad::Var& pixels, const ad::Var& q_s, const ad::Mat& mask, int channels);

struct TextPromptConfig {
  int context_tokens = 4;   // N
  int tokens_per_class = 1; // g
  double init_scale = 1.0;

  bool operator==(const TextPromptConfig&) const = default;
};

class TextPromptState {
 public:
  TextPromptState() = default;
  TextPromptState(int num_classes, int token_dim, const TextPromptConfig& cfg, Rng& rng);

  int num_classes() const { return num_classes_; }
  const TextPromptConfig& config() const { return cfg_; }
  ad::Var& context() { return context_; }
  ad::Var& category_tokens() { return gamma_; }
  std::size_t parameter_count() const;
  void collect(const std::string& prefix, nn::ParamList& out) const;

  // [N + g, D_t] token sequence for class k.
  ad::Var sequence(int k) const;

 private:
  int num_classes_ = 0;
  TextPromptConfig cfg_;
  ad::Var context_;  // [N, D_t]
  ad::Var gamma_;    // [K * g, D_t], class k owns rows [k * g, (k + 1) * g)
};

// Unit text embedding xi_k, [1, D].
ad::Var build_text_embedding(int k, const TextPromptState& prompts, const backbone::TextEncoder& encoder);
// All K embeddings stacked, [K, D].
ad::Var text_bank(const TextPromptState& prompts, const backbone::TextEncoder& encoder);

enum class Phase { kModel = 0, kPrompt = 1 };

struct PhaseSchedule {
  int k = 20;
  Phase initial = Phase::kPrompt;

  // Toggle when (b + 1) mod k == 0, applied before iteration b is used.
  Phase at(long long iteration) const;
};

Phase phase_schedule(long long iteration, int k, Phase initial);

std::string to_string(Phase p);

}  // namespace gcd::prompts
