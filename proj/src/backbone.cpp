#include "gcd/backbone.hpp"

#include <cmath>
#include <numeric>

#include "gcd/errors.hpp"

namespace gcd::backbone {

using ad::Index;
using ad::Mat;
using ad::Var;

void VitConfig::validate() const {
  if (patch_size <= 0 || image_size <= 0 || image_size % patch_size != 0) {
    throw ConfigError("vit: image_size must be a positive multiple of patch_size");
  }
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0) throw ConfigError("vit: heads must divide embed_dim");
  if (depth < 1) throw ConfigError("vit: depth must be >= 1");
  if (mlp_ratio <= 0.0) throw ConfigError("vit: mlp_ratio must be positive");
  if (channels <= 0) throw ConfigError("vit: channels must be positive");
  if (ncut_tap_layer < 0 || ncut_tap_layer > depth) throw ConfigError("vit: ncut_tap_layer out of range");
  if (dom_tap_layer < 0 || dom_tap_layer > depth) throw ConfigError("vit: dom_tap_layer out of range");
}

TransformerBlock::TransformerBlock(Index dim, Index hidden, int heads_, Rng& rng)
    : ln1(dim), qkv(dim, 3 * dim, rng), proj(dim, dim, rng), ln2(dim), fc1(dim, hidden, rng), fc2(hidden, dim, rng),
      heads(heads_) {}

Var TransformerBlock::operator()(const Var& x, Index n_seq, Index seq_len, Mat* cls_attn) const {
  Var attn = ad::self_attention(qkv(ln1(x)), n_seq, seq_len, heads, cls_attn);
  Var h = ad::add(x, proj(attn));
  return ad::add(h, fc2(ad::gelu(fc1(ln2(h)))));
}

void TransformerBlock::collect(const std::string& prefix, nn::ParamList& out) const {
  ln1.collect(prefix + ".ln1", out);
  qkv.collect(prefix + ".qkv", out);
  proj.collect(prefix + ".proj", out);
  ln2.collect(prefix + ".ln2", out);
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

VisionTransformer::VisionTransformer(const VitConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const Index d = cfg_.embed_dim;
  patch_proj_ = nn::Linear(cfg_.patch_dim(), d, rng);
  cls_token_ = nn::parameter(nn::gaussian(1, d, 0.02, rng));
  pos_embed_ = nn::parameter(nn::gaussian(cfg_.tokens(), d, 0.02, rng));
  const auto hidden = static_cast<Index>(std::lround(cfg_.mlp_ratio * static_cast<double>(d)));
  for (int l = 0; l < cfg_.depth; ++l) blocks_.emplace_back(d, hidden, cfg_.heads, rng);

  const int S = cfg_.patch_size, H = cfg_.image_size, G = cfg_.grid();
  patch_index_.reserve(static_cast<std::size_t>(cfg_.num_patches() * cfg_.patch_dim()));
  for (int py = 0; py < G; ++py) {
    for (int px = 0; px < G; ++px) {
      for (int c = 0; c < cfg_.channels; ++c) {
        for (int u = 0; u < S; ++u) {
          for (int v = 0; v < S; ++v) {
            patch_index_.push_back(static_cast<Index>((c * H + py * S + u) * H + px * S + v));
          }
        }
      }
    }
  }
}

Var VisionTransformer::extract_patches(const Var& pixels) const {
  if (pixels.cols() != cfg_.pixels()) {
    throw ConfigError("vit: expected " + std::to_string(cfg_.pixels()) + " pixels per image, got " +
                      std::to_string(pixels.cols()));
  }
  const Index B = pixels.rows();
  const Index per_image = static_cast<Index>(patch_index_.size());
  std::vector<Index> src(static_cast<std::size_t>(B * per_image));
  for (Index b = 0; b < B; ++b) {
    const Index offset = b * cfg_.pixels();
    for (Index k = 0; k < per_image; ++k) src[static_cast<std::size_t>(b * per_image + k)] = offset + patch_index_[static_cast<std::size_t>(k)];
  }
  return ad::gather(pixels, B * cfg_.num_patches(), cfg_.patch_dim(), src);
}

Var VisionTransformer::patch_project(const Var& pixels) const { return patch_proj_(extract_patches(pixels)); }

Var VisionTransformer::add_patch_positions(const Var& projected) const {
  const Index P = cfg_.num_patches();
  if (projected.rows() % P != 0 || projected.cols() != cfg_.embed_dim) throw ConfigError("vit: bad patch embedding shape");
  std::vector<Index> idx(static_cast<std::size_t>(projected.rows()));
  for (Index r = 0; r < projected.rows(); ++r) idx[static_cast<std::size_t>(r)] = 1 + r % P;
  return ad::add(projected, ad::gather_rows(pos_embed_, idx));
}

Var VisionTransformer::patchify(const Var& pixels) const { return add_patch_positions(patch_project(pixels)); }

Var VisionTransformer::assemble_tokens(const Var& patch_embeddings) const {
  const Index P = cfg_.num_patches(), T = cfg_.tokens();
  if (patch_embeddings.rows() % P != 0 || patch_embeddings.cols() != cfg_.embed_dim) {
    throw ConfigError("vit: bad patch embedding shape");
  }
  const Index B = patch_embeddings.rows() / P;
  Var cls = ad::add(cls_token_, ad::slice_rows(pos_embed_, 0, 1));
  const Var parts[] = {cls, patch_embeddings};
  Var stacked = ad::concat_rows(parts);
  std::vector<Index> idx(static_cast<std::size_t>(B * T));
  for (Index b = 0; b < B; ++b) {
    idx[static_cast<std::size_t>(b * T)] = 0;
    for (Index p = 0; p < P; ++p) idx[static_cast<std::size_t>(b * T + 1 + p)] = 1 + b * P + p;
  }
  return ad::gather_rows(stacked, idx);
}

Var VisionTransformer::encode_range(const Var& tokens, int from_layer, int to_layer, Mat* cls_attn) const {
  if (from_layer < 0 || to_layer > cfg_.depth || from_layer > to_layer) {
    throw std::out_of_range("vit: layer range [" + std::to_string(from_layer) + ", " + std::to_string(to_layer) +
                            ") outside [0, " + std::to_string(cfg_.depth) + "]");
  }
  const Index T = cfg_.tokens();
  if (tokens.rows() % T != 0) throw ConfigError("vit: token rows not a multiple of tokens per image");
  const Index B = tokens.rows() / T;
  Var x = tokens;
  for (int l = from_layer; l < to_layer; ++l) {
    x = blocks_[static_cast<std::size_t>(l)](x, B, T, l + 1 == to_layer ? cls_attn : nullptr);
  }
  return x;
}

Var VisionTransformer::encode_to_layer(const Var& tokens, int layer) const { return encode_range(tokens, 0, layer); }

Var VisionTransformer::cls_rows(const Var& tokens) const {
  const Index T = cfg_.tokens();
  const Index B = tokens.rows() / T;
  std::vector<Index> idx(static_cast<std::size_t>(B));
  for (Index b = 0; b < B; ++b) idx[static_cast<std::size_t>(b)] = b * T;
  return ad::gather_rows(tokens, idx);
}

FeatureBundle VisionTransformer::forward_tokens(const Var& tokens) const {
  const Index T = cfg_.tokens(), P = cfg_.num_patches();
  if (tokens.rows() % T != 0) throw ConfigError("vit: token rows not a multiple of tokens per image");
  const Index B = tokens.rows() / T;
  FeatureBundle out;
  out.layer_cls.reserve(static_cast<std::size_t>(cfg_.depth + 1));
  out.layer_cls.push_back(cls_rows(tokens));
  Var x = tokens;
  for (int l = 0; l < cfg_.depth; ++l) {
    const bool last = l + 1 == cfg_.depth;
    x = blocks_[static_cast<std::size_t>(l)](x, B, T, last ? &out.last_attn_cls : nullptr);
    out.layer_cls.push_back(cls_rows(x));
    if (l + 1 == cfg_.ncut_tap_layer) {
      out.mid_patch_feats.resize(B * P, cfg_.embed_dim);
      for (Index b = 0; b < B; ++b) out.mid_patch_feats.middleRows(b * P, P) = x.value().middleRows(b * T + 1, P);
    }
  }
  if (cfg_.ncut_tap_layer == 0) {
    out.mid_patch_feats.resize(B * P, cfg_.embed_dim);
    for (Index b = 0; b < B; ++b) out.mid_patch_feats.middleRows(b * P, P) = tokens.value().middleRows(b * T + 1, P);
  }
  out.final_tokens = x;
  return out;
}

FeatureBundle VisionTransformer::forward_embeddings(const Var& patch_embeddings) const {
  FeatureBundle out = forward_tokens(assemble_tokens(patch_embeddings));
  out.patch_embeddings = patch_embeddings;
  return out;
}

FeatureBundle VisionTransformer::forward(const Var& pixels) const { return forward_embeddings(patchify(pixels)); }

Mat VisionTransformer::cls_attention(const Var& pixels) const {
  ad::NoGradGuard guard;
  return forward(pixels).last_attn_cls;
}

nn::ParamList VisionTransformer::parameters() const {
  nn::ParamList out;
  patch_proj_.collect("vit.patch_proj", out);
  out.push_back({"vit.cls_token", cls_token_});
  out.push_back({"vit.pos_embed", pos_embed_});
  for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect("vit.block" + std::to_string(l), out);
  return out;
}

// --- text encoder ---------------------------------------------------------

namespace {

Var frozen(Mat m) { return ad::constant(std::move(m)); }

Var frozen_gaussian(Index rows, Index cols, Rng& rng) {
  return frozen(nn::gaussian(rows, cols, 1.0 / std::sqrt(static_cast<double>(rows)), rng));
}

Var layer_norm(const Var& x, const Var& g, const Var& b) {
  return ad::add_row(ad::mul_row(ad::layer_norm_rows(x), g), b);
}

Var affine(const Var& x, const Var& w, const Var& b) { return ad::add_row(ad::matmul(x, w), b); }

}  // namespace

TextEncoder::TextEncoder(const TextEncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.token_dim <= 0 || cfg_.token_dim % cfg_.heads != 0) throw ConfigError("text encoder: heads must divide token_dim");
  Rng rng(seed);
  const Index D = cfg_.token_dim;
  pos_ = frozen(nn::gaussian(cfg_.max_len, D, 0.1, rng));
  for (int l = 0; l < cfg_.depth; ++l) {
    FrozenBlock b;
    b.ln1_g = frozen(Mat::Ones(1, D));
    b.ln1_b = frozen(Mat::Zero(1, D));
    b.qkv_w = frozen_gaussian(D, 3 * D, rng);
    b.qkv_b = frozen(Mat::Zero(1, 3 * D));
    b.proj_w = frozen_gaussian(D, D, rng);
    b.proj_b = frozen(Mat::Zero(1, D));
    b.ln2_g = frozen(Mat::Ones(1, D));
    b.ln2_b = frozen(Mat::Zero(1, D));
    b.fc1_w = frozen_gaussian(D, 2 * D, rng);
    b.fc1_b = frozen(Mat::Zero(1, 2 * D));
    b.fc2_w = frozen_gaussian(2 * D, D, rng);
    b.fc2_b = frozen(Mat::Zero(1, D));
    blocks_.push_back(std::move(b));
  }
  lnf_g_ = frozen(Mat::Ones(1, D));
  lnf_b_ = frozen(Mat::Zero(1, D));
  out_w_ = frozen_gaussian(D, cfg_.out_dim, rng);
}

Var TextEncoder::encode(const Var& sequences, Index n_seq, Index seq_len) const {
  if (n_seq <= 0 || seq_len <= 0) throw ConfigError("text encoder: empty sequence");
  if (seq_len > cfg_.max_len) throw ConfigError("text encoder: sequence longer than max_len");
  if (sequences.rows() != n_seq * seq_len || sequences.cols() != cfg_.token_dim) {
    throw ConfigError("text encoder: sequence shape mismatch");
  }
  std::vector<Index> pos_idx(static_cast<std::size_t>(n_seq * seq_len));
  for (Index r = 0; r < n_seq * seq_len; ++r) pos_idx[static_cast<std::size_t>(r)] = r % seq_len;
  Var x = ad::add(sequences, ad::gather_rows(pos_, pos_idx));
  for (const auto& b : blocks_) {
    Var attn = ad::self_attention(affine(layer_norm(x, b.ln1_g, b.ln1_b), b.qkv_w, b.qkv_b), n_seq, seq_len, cfg_.heads);
    x = ad::add(x, affine(attn, b.proj_w, b.proj_b));
    x = ad::add(x, affine(ad::gelu(affine(layer_norm(x, b.ln2_g, b.ln2_b), b.fc1_w, b.fc1_b)), b.fc2_w, b.fc2_b));
  }
  std::vector<Index> last(static_cast<std::size_t>(n_seq));
  for (Index s = 0; s < n_seq; ++s) last[static_cast<std::size_t>(s)] = s * seq_len + seq_len - 1;
  return ad::matmul(layer_norm(ad::gather_rows(x, last), lnf_g_, lnf_b_), out_w_);
}

Var TextEncoder::encode_one(const Var& sequence) const {
  if (sequence.rows() == 0) throw ConfigError("text encoder: empty sequence");
  return encode(sequence, 1, sequence.rows());
}

std::vector<Var> TextEncoder::weights() const {
  std::vector<Var> out = {pos_};
  for (const auto& b : blocks_) {
    out.insert(out.end(), {b.ln1_g, b.ln1_b, b.qkv_w, b.qkv_b, b.proj_w, b.proj_b, b.ln2_g, b.ln2_b, b.fc1_w, b.fc1_b,
                           b.fc2_w, b.fc2_b});
  }
  out.insert(out.end(), {lnf_g_, lnf_b_, out_w_});
  return out;
}

}  // namespace gcd::backbone
