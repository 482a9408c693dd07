#include <doctest.h>

#include <set>

#include "gcd/backbone.hpp"
#include "gcd/errors.hpp"
#include "grad_check.hpp"

using namespace gcd;
using namespace gcd::backbone;
using gcd::testing::grad_check;
using gcd::testing::random_mat;

namespace {

VitConfig small_config() {
  VitConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.depth = 2;
  c.heads = 2;
  return c;
}

ad::Mat random_pixels(int batch, const VitConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  ad::Mat m(batch, c.pixels());
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform();
  return m;
}

}  // namespace

TEST_CASE("default config shapes") {
  VitConfig c;
  c.validate();
  CHECK(c.num_patches() == 64);
  VisionTransformer vit(c, 1);
  ad::Var px(random_pixels(2, c, 3));
  FeatureBundle f = vit.forward(px);
  CHECK(f.patch_embeddings.rows() == 2 * 64);
  CHECK(f.patch_embeddings.cols() == 64);
  CHECK(f.layer_cls.size() == 5);
  for (const auto& l : f.layer_cls) {
    CHECK(l.rows() == 2);
    CHECK(l.cols() == 64);
  }
  CHECK(f.final_tokens.rows() == 2 * 65);
  CHECK(f.last_attn_cls.rows() == 2);
  CHECK(f.last_attn_cls.cols() == 64);
  CHECK(f.mid_patch_feats.rows() == 2 * 64);
  for (int b = 0; b < 2; ++b) {
    CHECK(f.last_attn_cls.row(b).sum() == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(f.last_attn_cls.row(b).minCoeff() >= 0.0);
  }
}

TEST_CASE("config validation") {
  VitConfig c;
  c.patch_size = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = VitConfig{};
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  VisionTransformer vit(VitConfig{}, 1);
  ad::Var wrong(ad::Mat::Zero(1, 10));
  CHECK_THROWS_AS(vit.patchify(wrong), ConfigError);
}

TEST_CASE("patchify is linear and position-equivariant") {
  VitConfig c;
  VisionTransformer vit(c, 2);
  vit.positional().mutable_value().setZero();

  ad::Var zeros(ad::Mat::Zero(1, c.pixels()));
  ad::Mat e = vit.patchify(zeros).value();
  for (ad::Index r = 1; r < e.rows(); ++r) CHECK((e.row(r) - e.row(0)).cwiseAbs().maxCoeff() == 0.0);

  // Swap patches (0,0) and (2,5) in pixel space.
  ad::Mat px = random_pixels(1, c, 4);
  ad::Mat swapped = px;
  const int s = c.patch_size, hw = c.image_size;
  auto at = [&](int ch, int y, int x) { return ch * hw * hw + y * hw + x; };
  const int pa = 0, pb = 2 * c.grid() + 5;
  for (int ch = 0; ch < 3; ++ch) {
    for (int dy = 0; dy < s; ++dy) {
      for (int dx = 0; dx < s; ++dx) {
        const int ia = at(ch, (pa / c.grid()) * s + dy, (pa % c.grid()) * s + dx);
        const int ib = at(ch, (pb / c.grid()) * s + dy, (pb % c.grid()) * s + dx);
        std::swap(swapped(0, ia), swapped(0, ib));
      }
    }
  }
  ad::Mat a = vit.patch_project(ad::Var(px)).value();
  ad::Mat b = vit.patch_project(ad::Var(swapped)).value();
  CHECK((a.row(pa) - b.row(pb)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((a.row(pb) - b.row(pa)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((a.row(7) - b.row(7)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("encode_to_layer composition") {
  VitConfig c;
  VisionTransformer vit(c, 3);
  ad::Var tokens = vit.assemble_tokens(vit.patchify(ad::Var(random_pixels(2, c, 5))));
  CHECK((vit.encode_to_layer(tokens, 0).value() - tokens.value()).cwiseAbs().maxCoeff() == 0.0);

  ad::Var full = vit.encode_to_layer(tokens, c.depth);
  ad::Var composed = vit.encode_range(vit.encode_to_layer(tokens, 1), 1, c.depth);
  CHECK((full.value() - composed.value()).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((full.value() - vit.forward_tokens(tokens).final_tokens.value()).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(vit.encode_to_layer(tokens, c.depth + 1), std::out_of_range);
  CHECK_THROWS_AS(vit.encode_to_layer(tokens, -1), std::out_of_range);

  FeatureBundle f = vit.forward_tokens(tokens);
  ad::Vec a = f.layer_cls[1].value().row(0).transpose();
  ad::Vec b = f.layer_cls[c.depth].value().row(0).transpose();
  CHECK(a.normalized().dot(b.normalized()) < 1.0 - 1e-6);
}

TEST_CASE("cls attention") {
  VitConfig c;
  VisionTransformer vit(c, 4);
  ad::Var px(random_pixels(3, c, 6));
  ad::Mat s1 = vit.cls_attention(px);
  ad::Mat s2 = vit.cls_attention(px);
  CHECK(s1 == s2);
  for (int b = 0; b < 3; ++b) CHECK(s1.row(b).sum() == doctest::Approx(1.0).epsilon(1e-5));

  // Identical patch embeddings give uniform attention.
  ad::Var same(ad::Mat::Constant(c.num_patches(), c.embed_dim, 0.3));
  FeatureBundle f = vit.forward_embeddings(same);
  for (int j = 0; j < c.num_patches(); ++j) CHECK(f.last_attn_cls(0, j) == doctest::Approx(1.0 / c.num_patches()));
}

TEST_CASE("vision transformer gradients match finite differences") {
  VitConfig c = small_config();
  VisionTransformer vit(c, 5);
  ad::Var px(random_pixels(2, c, 7), true);
  Rng rng(8);
  ad::Mat w = random_mat(2, c.embed_dim, rng);
  auto f = [&] {
    FeatureBundle b = vit.forward(px);
    return ad::add(ad::sum(ad::mul(b.layer_cls.back(), ad::constant(w))),
                   ad::sum(ad::mul(b.layer_cls[1], ad::constant(w))));
  };
  std::vector<ad::Var> leaves = {px};
  for (auto& p : vit.parameters()) leaves.push_back(p.var);
  auto r = grad_check(f, leaves, 10);
  CHECK(r.probes >= 10);
  CHECK(r.worst_rel < 1e-4);
}

TEST_CASE("parameter names are unique") {
  VisionTransformer vit(VitConfig{}, 1);
  std::set<std::string> names;
  for (auto& p : vit.parameters()) CHECK(names.insert(p.name).second);
  CHECK(names.count("vit.cls_token") == 1);
}

TEST_CASE("frozen text encoder") {
  TextEncoderConfig tc;
  TextEncoder enc(tc, 9);
  Rng rng(10);
  ad::Var seq(random_mat(6, tc.token_dim, rng), true);

  ad::Mat a = enc.encode_one(seq).value();
  ad::Mat b = enc.encode_one(seq).value();
  CHECK(a == b);
  CHECK(a.cols() == tc.out_dim);

  ad::Var out = enc.encode_one(seq);
  ad::Var loss = ad::sum(ad::mul(out, out));
  loss.backward();
  CHECK(seq.grad().cwiseAbs().maxCoeff() > 0.0);
  for (auto& w : enc.weights()) {
    CHECK_FALSE(w.requires_grad());
    CHECK_FALSE(w.has_grad());
  }

  auto f = [&] { return ad::sum(ad::mul(enc.encode_one(seq), ad::constant(a))); };
  auto r = grad_check(f, {seq}, 20);
  CHECK(r.worst_rel < 1e-4);

  ad::Var empty(ad::Mat(0, tc.token_dim));
  CHECK_THROWS_AS(enc.encode_one(empty), ConfigError);

  // Batched encoding agrees with one-at-a-time encoding.
  ad::Var two(random_mat(2 * 5, tc.token_dim, rng));
  ad::Mat batched = enc.encode(two, 2, 5).value();
  CHECK((batched.row(1) - enc.encode_one(ad::slice_rows(two, 5, 5)).value().row(0)).cwiseAbs().maxCoeff() < 1e-12);
}
