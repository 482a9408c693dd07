#include <doctest.h>

#include <limits>

#include "gcd/errors.hpp"
#include "gcd/prompts.hpp"
#include "grad_check.hpp"

using namespace gcd;
using namespace gcd::prompts;
using gcd::testing::random_mat;

namespace {

// Brute-force normalised cut over all non-trivial bipartitions.
double brute_min_ncut(const ad::Mat& w) {
  const int n = static_cast<int>(w.rows());
  double best = std::numeric_limits<double>::infinity();
  for (int mask = 1; mask < (1 << n) - 1; ++mask) {
    if (mask & 1) continue;  // each split once
    double cut = 0, va = 0, vb = 0;
    for (int i = 0; i < n; ++i) {
      const bool a = (mask >> i) & 1;
      for (int j = 0; j < n; ++j) {
        (a ? va : vb) += w(i, j);
        if (a && !((mask >> j) & 1)) cut += w(i, j);
      }
    }
    best = std::min(best, cut / va + cut / vb);
  }
  return best;
}

}  // namespace

TEST_CASE("two separated blobs are recovered with zero cut") {
  const int grid = 8;
  ad::Mat f(grid * grid, 3);
  ad::Vec attn(grid * grid);
  for (int i = 0; i < grid * grid; ++i) {
    const bool left = (i % grid) < 4;
    f.row(i) = left ? Eigen::RowVector3d(1, 0, 0) : Eigen::RowVector3d(0, 5, 0);
    attn(i) = left ? 0.02 : 0.01;
  }
  // Fixed bandwidth small enough that cross-blob weights underflow to zero.
  AffinityConfig cfg{0.1, 3, false};
  ad::Mat w = affinity(f, grid, cfg);
  Bipartition b = spectral_bipartition(w);
  CHECK(b.ncut == 0.0);
  auto m = ncut_mask(f, attn, grid, cfg);
  for (int i = 0; i < grid * grid; ++i) CHECK(m[i] == ((i % grid) < 4 ? 1 : 0));

  // Attention decides which side is foreground.
  attn = -attn;
  auto flipped = ncut_mask(f, attn, grid, cfg);
  for (int i = 0; i < grid * grid; ++i) CHECK(flipped[i] == 1 - m[i]);

  // Median rule on the same input is deterministic.
  AffinityConfig med;
  CHECK(ncut_mask(f, attn, grid, med) == ncut_mask(f, attn, grid, med));
}

TEST_CASE("affinity respects the locality gate") {
  Rng rng(5);
  const int grid = 6;
  ad::Mat f = random_mat(grid * grid, 4, rng);
  AffinityConfig cfg;
  ad::Mat w = affinity(f, grid, cfg);
  CHECK((w - w.transpose()).cwiseAbs().maxCoeff() == 0.0);
  for (int i = 0; i < grid * grid; ++i) {
    CHECK(w(i, i) == 0.0);
    for (int j = 0; j < grid * grid; ++j) {
      const int cheb = std::max(std::abs(i / grid - j / grid), std::abs(i % grid - j % grid));
      if (cheb >= 3) CHECK(w(i, j) == 0.0);
      if (i != j && cheb < 3) CHECK(w(i, j) > 0.0);
    }
  }
  CHECK_THROWS_AS(affinity(f, 5, cfg), ConfigError);
  CHECK_THROWS_AS(affinity(random_mat(1, 4, rng), 1, cfg), ConfigError);
  cfg.radius = 0;
  CHECK_THROWS_AS(affinity(f, grid, cfg), ConfigError);
}

TEST_CASE("generalised eigen residual on random graphs") {
  for (int g = 0; g < 10; ++g) {
    Rng rng(derive_seed(77, {static_cast<std::uint64_t>(g)}));
    ad::Mat a(16, 16);
    for (int i = 0; i < 16; ++i) {
      for (int j = 0; j < 16; ++j) a(i, j) = rng.uniform();
    }
    ad::Mat w = 0.5 * (a + a.transpose());
    w.diagonal().setZero();
    Bipartition b = spectral_bipartition(w);
    ad::Vec d = w.rowwise().sum();
    ad::Mat lap = ad::Mat(d.asDiagonal()) - w;
    const double res = (lap * b.v2 - b.mu2 * d.cwiseProduct(b.v2)).norm() / b.v2.norm();
    CHECK(res < 1e-8);
    CHECK(b.mu2 > 0.0);
  }
}

TEST_CASE("path graph split matches brute force") {
  ad::Mat w = ad::Mat::Zero(4, 4);
  for (int i = 0; i < 3; ++i) w(i, i + 1) = w(i + 1, i) = 1.0;
  const double brute = brute_min_ncut(w);
  CHECK(brute == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  Bipartition b = spectral_bipartition(w);
  CHECK(b.ncut == doctest::Approx(brute).epsilon(1e-12));
  CHECK(b.side[0] == b.side[1]);
  CHECK(b.side[2] == b.side[3]);
  CHECK(b.side[0] != b.side[2]);
  CHECK(spectral_bipartition(w, true).ncut == doctest::Approx(brute).epsilon(1e-12));
}

TEST_CASE("isolated nodes and many components still bipartition") {
  ad::Mat w = ad::Mat::Zero(6, 6);
  w(0, 1) = w(1, 0) = 1.0;
  w(2, 3) = w(3, 2) = 1.0;
  // nodes 4 and 5 isolated
  Bipartition b = spectral_bipartition(w);
  const auto ones = std::count(b.side.begin(), b.side.end(), 1);
  CHECK(ones > 0);
  CHECK(ones < 6);
  CHECK(b.v2.allFinite());
}

TEST_CASE("semantic prompt") {
  Rng rng(9);
  ad::Var x = ad::constant(random_mat(2 * 4, 3, rng));
  ad::Var q = nn::parameter(random_mat(1, 3, rng));
  ad::Mat zeros = ad::Mat::Zero(2, 4), ones = ad::Mat::Ones(2, 4);
  CHECK(apply_semantic_spt(x, zeros, q).value() == x.value());
  ad::Mat shifted = apply_semantic_spt(x, ones, q).value();
  for (int i = 0; i < 8; ++i) CHECK((shifted.row(i) - x.value().row(i) - q.value()).norm() < 1e-15);
  ad::Var qz = ad::constant(ad::Mat::Zero(1, 3));
  ad::Mat mixed(2, 4);
  mixed << 1, 0, 1, 0, 0, 0, 1, 1;
  CHECK(apply_semantic_spt(x, mixed, qz).value() == x.value());
  ad::Mat out = apply_semantic_spt(x, mixed, q).value();
  for (int i = 0; i < 8; ++i) {
    const double m = mixed(i / 4, i % 4);
    CHECK((out.row(i) - x.value().row(i) - m * q.value()).norm() < 1e-15);
  }
  CHECK_THROWS_AS(apply_semantic_spt(x, ad::Mat::Ones(1, 4), q), ConfigError);

  // Gradient reaches q only through masked rows: d/dq sum = (#ones) * 1.
  ad::Var loss = ad::sum(apply_semantic_spt(x, mixed, q));
  loss.backward();
  CHECK(q.grad()(0, 0) == doctest::Approx(4.0));
}

TEST_CASE("boundary mask counts") {
  CHECK(boundary_mask(4, 0).sum() == 0.0);
  CHECK(boundary_mask(4, 2).sum() == 16.0);
  ad::Mat m = boundary_mask(4, 1);
  CHECK(m.sum() == 12.0);
  // Enumerate the interior condition directly.
  int ones = 0;
  for (int u = 0; u < 4; ++u) {
    for (int v = 0; v < 4; ++v) ones += !(1 <= u && u < 3 && 1 <= v && v < 3);
  }
  CHECK(ones == 12);
  CHECK(boundary_mask(5, 3).sum() == 25.0);
  CHECK_THROWS_AS(boundary_mask(4, 3), ConfigError);
  CHECK_THROWS_AS(boundary_mask(4, -1), ConfigError);

  ad::Mat img = boundary_mask_image(8, 4, 1);
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) CHECK(img(y, x) == m(y % 4, x % 4));
  }
  CHECK_THROWS_AS(boundary_mask_image(10, 4, 1), ConfigError);
}

TEST_CASE("boundary prompt leaves patch interiors untouched") {
  Rng rng(10);
  const int c = 3, s = 8, patch = 4;
  ad::Var px = ad::constant(random_mat(2, c * s * s, rng));
  ad::Var q = nn::parameter(random_mat(1, c * s * s, rng));
  ad::Mat m = boundary_mask_image(s, patch, 1);
  ad::Mat out = apply_boundary_spt(px, q, m, c).value();
  for (int b = 0; b < 2; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
          const int idx = (ch * s + y) * s + x;
          if (m(y, x) == 0.0) {
            CHECK(out(b, idx) == px.value()(b, idx));
          } else {
            CHECK(out(b, idx) == px.value()(b, idx) + q.value()(0, idx));
          }
        }
      }
    }
  }
  CHECK(apply_boundary_spt(px, q, boundary_mask_image(s, patch, 0), c).value() == px.value());
  ad::Var qz = ad::constant(ad::Mat::Zero(1, c * s * s));
  CHECK(apply_boundary_spt(px, qz, m, c).value() == px.value());
  CHECK_THROWS_AS(apply_boundary_spt(px, q, m, 2), ConfigError);
}

TEST_CASE("text prompts") {
  backbone::TextEncoderConfig tc;
  tc.token_dim = 64;
  tc.out_dim = 16;
  backbone::TextEncoder enc(tc, 3);
  Rng rng(11);
  TextPromptConfig pc;
  pc.context_tokens = 4;
  TextPromptState st(10, 64, pc, rng);
  CHECK(st.parameter_count() == 896u);
  CHECK(10u * (4 + 1) * 64 == 3200u);

  st.category_tokens().mutable_value().row(3) = st.category_tokens().value().row(7);
  ad::Mat x3 = build_text_embedding(3, st, enc).value();
  ad::Mat x7 = build_text_embedding(7, st, enc).value();
  CHECK(x3 == x7);
  CHECK(x3.norm() == doctest::Approx(1.0));

  ad::Mat bank = text_bank(st, enc).value();
  CHECK(bank.rows() == 10);
  for (int k = 0; k < 10; ++k) {
    CHECK((bank.row(k) - build_text_embedding(k, st, enc).value()).cwiseAbs().maxCoeff() < 1e-12);
  }

  ad::Var xi = build_text_embedding(2, st, enc);
  ad::Var probe = ad::constant(random_mat(16, 1, rng));
  ad::sum(ad::matmul(xi, probe)).backward();
  CHECK(st.context().grad().norm() > 0.0);
  const ad::Mat& g = st.category_tokens().grad();
  CHECK(g.row(2).norm() > 0.0);
  for (int k = 0; k < 10; ++k) {
    if (k != 2) CHECK(g.row(k).norm() == 0.0);
  }
  for (const auto& w : enc.weights()) CHECK_FALSE(w.has_grad());

  nn::ParamList params;
  st.collect("text_prompt", params);
  CHECK(params.size() == 2);
  CHECK_THROWS_AS(build_text_embedding(10, st, enc), std::out_of_range);
}

TEST_CASE("phase schedule") {
  PhaseSchedule hl{20, Phase::kPrompt};
  for (int b = 0; b <= 18; ++b) CHECK(hl.at(b) == Phase::kPrompt);
  for (int b = 19; b <= 38; ++b) CHECK(hl.at(b) == Phase::kModel);
  CHECK(hl.at(39) == Phase::kPrompt);

  PhaseSchedule vl{20, Phase::kModel};
  CHECK(vl.at(0) == Phase::kModel);
  CHECK(vl.at(19) == Phase::kPrompt);

  for (int b = 0; b < 10; ++b) {
    CHECK(phase_schedule(b, 1, Phase::kModel) != phase_schedule(b + 1, 1, Phase::kModel));
  }
  CHECK_THROWS_AS(phase_schedule(0, 0, Phase::kModel), ConfigError);
  CHECK(to_string(Phase::kPrompt) == "prompt");
}
