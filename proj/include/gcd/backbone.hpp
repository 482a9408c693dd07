#pragma once

// Tiny vision transformer with per-layer taps, and a frozen toy text encoder.
//
// Batches are stacked row-wise: B images of T = P + 1 tokens form a
// [B * T, d] matrix with the CLS token first in every block of T rows.
// Pixels enter as [B, C * H * W] (each row a CHW image).

#include <cstdint>
#include <vector>

#include "gcd/autograd.hpp"
#include "gcd/nn.hpp"

namespace gcd::backbone {

struct VitConfig {
  int image_size = 32;
  int patch_size = 4;
  int embed_dim = 64;
  int depth = 4;
  int heads = 4;
  double mlp_ratio = 2.0;
  int channels = 3;
  int ncut_tap_layer = 1;  // patch tokens after this block feed the NCut affinity graph
  int dom_tap_layer = 1;   // CLS after this block is the domain feature

  void validate() const;
  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int tokens() const { return num_patches() + 1; }
  int patch_dim() const { return channels * patch_size * patch_size; }
  int pixels() const { return channels * image_size * image_size; }

  bool operator==(const VitConfig&) const = default;
};

struct TransformerBlock {
  nn::LayerNorm ln1;
  nn::Linear qkv;
  nn::Linear proj;
  nn::LayerNorm ln2;
  nn::Linear fc1;
  nn::Linear fc2;
  int heads = 1;

  TransformerBlock() = default;
  TransformerBlock(ad::Index dim, ad::Index hidden, int heads, Rng& rng);

  ad::Var operator()(const ad::Var& x, ad::Index n_seq, ad::Index seq_len, ad::Mat* cls_attn = nullptr) const;
  void collect(const std::string& prefix, nn::ParamList& out) const;
};

// Per-image backbone outputs for a batch of B images.
struct FeatureBundle {
  ad::Var patch_embeddings;         // [B * P, d], output of the embedding layer
  std::vector<ad::Var> layer_cls;   // L + 1 entries of [B, d]: after embedding, after each block
  ad::Var final_tokens;             // [B * T, d]
  ad::Mat last_attn_cls;            // [B, P], final block, head-averaged, rows sum to 1
  ad::Mat mid_patch_feats;          // [B * P, d] patch tokens after the NCut tap block
};

class VisionTransformer {
 public:
  VisionTransformer(const VitConfig& cfg, std::uint64_t seed);

  const VitConfig& config() const { return cfg_; }

  // [B, C*H*W] -> [B * P, C*S*S] non-overlapping patches, channel-major within a patch.
  ad::Var extract_patches(const ad::Var& pixels) const;
  // Linear patch projection without positional embedding.
  ad::Var patch_project(const ad::Var& pixels) const;
  // Adds the patch rows of the positional table to [B * P, d].
  ad::Var add_patch_positions(const ad::Var& projected) const;
  // Embedding layer phi: projection + positional embedding.
  ad::Var patchify(const ad::Var& pixels) const;
  // Prepends the CLS token (with its position) to every image: [B * P, d] -> [B * T, d].
  ad::Var assemble_tokens(const ad::Var& patch_embeddings) const;

  // Runs blocks [from_layer, to_layer) on assembled tokens. Layer indices are
  // 0..L where 0 is the embedding output.
  ad::Var encode_range(const ad::Var& tokens, int from_layer, int to_layer, ad::Mat* cls_attn = nullptr) const;
  ad::Var encode_to_layer(const ad::Var& tokens, int layer) const;

  // Full pass from assembled tokens.
  FeatureBundle forward_tokens(const ad::Var& tokens) const;
  // Full pass from patch embeddings (prompts and mixing act on these).
  FeatureBundle forward_embeddings(const ad::Var& patch_embeddings) const;
  FeatureBundle forward(const ad::Var& pixels) const;

  // CLS -> patch attention of the final block, head-averaged, [B, P].
  ad::Mat cls_attention(const ad::Var& pixels) const;

  // CLS rows of a [B * T, d] token matrix.
  ad::Var cls_rows(const ad::Var& tokens) const;

  nn::ParamList parameters() const;

  ad::Var& positional() { return pos_embed_; }

 private:
  VitConfig cfg_;
  nn::Linear patch_proj_;
  ad::Var cls_token_;
  ad::Var pos_embed_;  // [T, d], row 0 belongs to CLS
  std::vector<TransformerBlock> blocks_;
  std::vector<ad::Index> patch_index_;  // gather map for one image
};

struct TextEncoderConfig {
  int token_dim = 64;
  int out_dim = 64;
  int depth = 2;
  int heads = 4;
  int max_len = 32;

  bool operator==(const TextEncoderConfig&) const = default;
};

// Frozen toy text tower: positional table, pre-LN blocks, final LayerNorm,
// last-token readout, linear projection to the shared space. Its weights are
// graph constants and never receive gradient.
class TextEncoder {
 public:
  TextEncoder(const TextEncoderConfig& cfg, std::uint64_t seed);

  const TextEncoderConfig& config() const { return cfg_; }

  // sequences: [n_seq * seq_len, token_dim] -> [n_seq, out_dim]
  ad::Var encode(const ad::Var& sequences, ad::Index n_seq, ad::Index seq_len) const;
  // One sequence [seq_len, token_dim] -> [1, out_dim]
  ad::Var encode_one(const ad::Var& sequence) const;

  // Every weight tensor, for inspecting the frozen contract.
  std::vector<ad::Var> weights() const;

 private:
  struct FrozenBlock {
    ad::Var ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };
  TextEncoderConfig cfg_;
  ad::Var pos_;
  std::vector<FrozenBlock> blocks_;
  ad::Var lnf_g_, lnf_b_, out_w_;
};

}  // namespace gcd::backbone
