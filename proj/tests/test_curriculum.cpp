#include <doctest.h>

#include <cmath>
#include <set>

#include "gcd/curriculum.hpp"
#include "gcd/errors.hpp"
#include "grad_check.hpp"

using namespace gcd;
using namespace gcd::curriculum;
using gcd::testing::random_mat;

namespace {

// Upper 1% point of chi-square with k dof (Wilson-Hilferty).
double chi2_critical_99(int k) {
  const double z = 2.3263478740408408;
  const double a = 2.0 / (9.0 * k);
  return k * std::pow(1 - a + z * std::sqrt(a), 3);
}

std::vector<float> flip_horizontal(std::span<const float> img, const data::ImageShape& s) {
  std::vector<float> out(img.size());
  for (int c = 0; c < s.channels; ++c) {
    for (int y = 0; y < s.height; ++y) {
      for (int x = 0; x < s.width; ++x) {
        out[(c * s.height + y) * s.width + x] = img[(c * s.height + y) * s.width + (s.width - 1 - x)];
      }
    }
  }
  return out;
}

ad::Mat col(std::initializer_list<double> v) {
  ad::Mat m(static_cast<ad::Index>(v.size()), 1);
  ad::Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

}  // namespace

TEST_CASE("fft amplitude of a constant image is all DC") {
  data::ImageShape shape{3, 32, 32};
  std::vector<float> img(shape.numel(), 0.4f);
  ad::Vec v = fft_amplitude(img, shape);
  CHECK(v.size() == 64);
  ad::Index top;
  v.maxCoeff(&top);
  // The zero frequency sits at the centre after shifting: block (4, 4).
  CHECK(top == 4 * 8 + 4);
  CHECK(v(top) == doctest::Approx(0.4 * 32 * 32 / 16.0));
  double rest = v.sum() - v(top);
  CHECK(rest < 1e-9);
}

TEST_CASE("fft amplitude is invariant to horizontal flips") {
  data::Dataset ds = data::make_dataset(data::GenConfig{});
  const auto& shape = ds.manifest.image_shape;
  for (std::size_t i : {0u, 17u, 130u, 255u}) {
    auto img = ds.image(i);
    auto flipped = flip_horizontal(img, shape);
    CHECK((fft_amplitude(img, shape) - fft_amplitude(flipped, shape)).cwiseAbs().maxCoeff() < 1e-5);
  }
  CHECK_THROWS_AS(parse_domain_rep_kind("wavelet"), ConfigError);
  CHECK(parse_domain_rep_kind("fft_amplitude") == DomainRepKind::kFftAmplitude);
}

TEST_CASE("ss_kmeans examples") {
  auto r = ss_kmeans(col({0.0, 0.1}), col({0.05, 5.0, 5.1}));
  CHECK(r.cluster == std::vector<int>{0, 1, 1});

  ad::Mat lab = col({1.0, 1.0});
  auto same = ss_kmeans(lab, col({1.0, 1.0, 1.0}));
  CHECK(same.cluster == std::vector<int>{0, 0, 0});

  CHECK_THROWS_AS(ss_kmeans(ad::Mat(0, 1), lab), ConfigError);
}

TEST_CASE("ss_kmeans objective never increases and is reproducible") {
  for (int inst = 0; inst < 20; ++inst) {
    Rng rng(derive_seed(42, {static_cast<std::uint64_t>(inst)}));
    ad::Mat lab = random_mat(10, 4, rng);
    ad::Mat unl = random_mat(30, 4, rng, 2.0);
    for (ad::Index i = 0; i < 15; ++i) unl.row(i).array() += 3.0;
    auto r = ss_kmeans(lab, unl, 100);
    for (std::size_t i = 1; i < r.objective.size(); ++i) CHECK(r.objective[i] <= r.objective[i - 1] + 1e-9);
    CHECK(ss_kmeans(lab, unl, 100).cluster == r.cluster);
  }
}

TEST_CASE("curriculum weights follow the schedule on every cell") {
  std::vector<std::int64_t> lab(32), unl(160);
  for (int i = 0; i < 32; ++i) lab[i] = i;
  KMeansResult km;
  for (int i = 0; i < 160; ++i) {
    unl[i] = 32 + i;
    km.cluster.push_back(i < 128 ? 0 : 1);
  }
  CurriculumState s = build_state(lab, unl, km, ssbc_preset(), DomainRepKind::kFftAmplitude);
  CHECK(s.n_a == 128);
  CHECK(s.n_b == 32);
  for (int t : {0, 1, 79, 80, 81, 200}) {
    const bool late = t > 80;
    CHECK(curriculum_weight(0, t, s) == 1.0);
    CHECK(curriculum_weight(40, t, s) == doctest::Approx(0.25));
    CHECK(curriculum_weight(170, t, s) == doctest::Approx(late ? 0.05 : 0.0));
  }
  s.schedule = domainnet_preset();
  CHECK(curriculum_weight(170, 80, s) == 0.0);
  CHECK(curriculum_weight(170, 81, s) == 1.0);
  s.schedule.r0 = 0.3;
  CHECK(curriculum_weight(170, 10, s) == doctest::Approx(0.3));
  CHECK_THROWS_AS(curriculum_weight(9999, 1, s), ConfigError);

  CHECK(s.domain_label(0) == 0);
  CHECK(s.domain_label(40) == 0);
  CHECK(s.domain_label(170) == 1);

  auto j = dump_assignment(s);
  CHECK(j["0"] == "labelled");
  CHECK(j["40"] == "a");
  CHECK(j["170"] == "b");
  CHECK(preset("ssbc") == ssbc_preset());
  CHECK_THROWS_AS(preset("imagenet"), ConfigError);
}

TEST_CASE("draw_batch") {
  std::vector<std::int64_t> lab = {0, 1, 2, 3, 4, 5, 6, 7};
  std::vector<std::int64_t> unl(20);
  for (int i = 0; i < 20; ++i) unl[i] = 100 + i;

  SUBCASE("equal weights give uniform inclusion") {
    std::vector<double> w(20, 1.0);
    std::vector<double> counts(20, 0.0);
    Rng rng(1);
    const int draws = 10000;
    for (int d = 0; d < draws; ++d) {
      Batch b = draw_batch(lab, unl, w, 8, rng);
      CHECK_FALSE(b.with_replacement);
      std::set<std::int64_t> uniq(b.unlabelled.begin(), b.unlabelled.end());
      REQUIRE(uniq.size() == 4);
      for (auto id : b.unlabelled) counts[id - 100] += 1;
    }
    const double expected = draws * 4.0 / 20.0;
    double chi2 = 0;
    for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
    CHECK(chi2 < chi2_critical_99(19));
  }

  SUBCASE("a single positive weight forces that id") {
    std::vector<double> w(20, 0.0);
    w[7] = 1.0;
    Rng rng(2);
    Batch b = draw_batch(lab, unl, w, 8, rng);
    CHECK(b.with_replacement);
    for (auto id : b.unlabelled) CHECK(id == 107);
  }

  SUBCASE("zero-weight ids are never drawn") {
    std::vector<double> w(20, 1.0);
    for (int i = 10; i < 20; ++i) w[i] = 0.0;
    Rng rng(3);
    for (int d = 0; d < 500; ++d) {
      for (auto id : draw_batch(lab, unl, w, 8, rng).unlabelled) CHECK(id < 110);
    }
  }

  SUBCASE("determinism and errors") {
    std::vector<double> w(20, 1.0);
    Rng a(4), b(4);
    auto x = draw_batch(lab, unl, w, 8, a);
    auto y = draw_batch(lab, unl, w, 8, b);
    CHECK(x.labelled == y.labelled);
    CHECK(x.unlabelled == y.unlabelled);
    std::set<std::int64_t> l(x.labelled.begin(), x.labelled.end());
    CHECK(l.size() == 4);
    CHECK_THROWS_AS(draw_batch(lab, unl, w, 7, a), ConfigError);
    std::vector<double> zero(20, 0.0);
    CHECK_THROWS_AS(draw_batch(lab, unl, zero, 8, a), ConfigError);
  }
}

TEST_CASE("fft k-means recovers the synthetic domains") {
  data::Dataset ds = data::make_dataset(data::GenConfig{});
  data::Split split = data::split_dataset(ds.manifest, ds.manifest.split_spec);
  ad::Mat lab = domain_representation(ds, split.labelled, DomainRepKind::kFftAmplitude);
  ad::Mat unl = domain_representation(ds, split.unlabelled, DomainRepKind::kFftAmplitude);
  auto km = ss_kmeans(lab, unl);
  int agree = 0;
  for (std::size_t i = 0; i < split.unlabelled.size(); ++i) {
    agree += km.cluster[i] == ds.manifest.records[static_cast<std::size_t>(split.unlabelled[i])].domain_id;
  }
  const double n = static_cast<double>(split.unlabelled.size());
  const double acc = std::max(agree / n, 1.0 - agree / n);
  MESSAGE("domain agreement " << acc);
  CHECK(acc >= 0.9);

  // Same features, same partition.
  CHECK(ss_kmeans(lab, unl).cluster == km.cluster);

  auto fn = [](const ad::Mat& images) { return ad::Mat(images.leftCols(3)); };
  ad::Mat bf = domain_representation(ds, split.labelled, DomainRepKind::kBackboneFeature, fn);
  CHECK(bf.rows() == static_cast<ad::Index>(split.labelled.size()));
  CHECK(bf.cols() == 3);
  CHECK_THROWS_AS(domain_representation(ds, split.labelled, DomainRepKind::kBackboneFeature), ConfigError);
}
