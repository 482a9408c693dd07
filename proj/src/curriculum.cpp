#include "gcd/curriculum.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>

#include "gcd/errors.hpp"

namespace gcd::curriculum {

namespace {

// FFTW planning is not thread-safe.
std::mutex& fftw_mutex() {
  static std::mutex m;
  return m;
}

double sse(const ad::Mat& labelled, const ad::Mat& unlabelled, const std::vector<int>& cluster, const ad::Vec& c0,
           const ad::Vec& c1) {
  double s = 0;
  for (ad::Index i = 0; i < labelled.rows(); ++i) s += (labelled.row(i).transpose() - c0).squaredNorm();
  for (ad::Index i = 0; i < unlabelled.rows(); ++i) {
    s += (unlabelled.row(i).transpose() - (cluster[i] == 0 ? c0 : c1)).squaredNorm();
  }
  return s;
}

}  // namespace

DomainRepKind parse_domain_rep_kind(const std::string& name) {
  if (name == "fft_amplitude") return DomainRepKind::kFftAmplitude;
  if (name == "backbone_feature") return DomainRepKind::kBackboneFeature;
  throw ConfigError("unknown domain representation kind '" + name + "'");
}

std::string to_string(DomainRepKind kind) {
  return kind == DomainRepKind::kFftAmplitude ? "fft_amplitude" : "backbone_feature";
}

ad::Vec fft_amplitude(std::span<const float> image, const data::ImageShape& shape) {
  const int c = shape.channels, h = shape.height, w = shape.width;
  if (image.size() != shape.numel()) throw ConfigError("fft_amplitude: image size does not match shape");
  if (h < kFftPool || w < kFftPool) throw ConfigError("fft_amplitude: image smaller than the pooled grid");

  static constexpr double kLuma[3] = {0.299, 0.587, 0.114};
  const int wc = w / 2 + 1;
  double* in = fftw_alloc_real(static_cast<std::size_t>(h) * w);
  fftw_complex* out = fftw_alloc_complex(static_cast<std::size_t>(h) * wc);
  for (int i = 0; i < h * w; ++i) {
    double g = 0;
    if (c == 3) {
      for (int ch = 0; ch < 3; ++ch) g += kLuma[ch] * image[static_cast<std::size_t>(ch) * h * w + i];
    } else {
      for (int ch = 0; ch < c; ++ch) g += image[static_cast<std::size_t>(ch) * h * w + i] / c;
    }
    in[i] = g;
  }
  {
    std::lock_guard lock(fftw_mutex());
    fftw_plan plan = fftw_plan_dft_r2c_2d(h, w, in, out, FFTW_ESTIMATE);
    fftw_execute(plan);
    fftw_destroy_plan(plan);
  }

  // Full amplitude grid via Hermitian symmetry.
  ad::Mat amp(h, w);
  for (int u = 0; u < h; ++u) {
    for (int v = 0; v < w; ++v) {
      int uu = u, vv = v;
      if (v >= wc) {
        uu = (h - u) % h;
        vv = w - v;
      }
      const auto& z = out[uu * wc + vv];
      amp(u, v) = std::hypot(z[0], z[1]);
    }
  }
  fftw_free(in);
  fftw_free(out);

  ad::Mat sym(h, w);
  for (int u = 0; u < h; ++u) {
    for (int v = 0; v < w; ++v) {
      const int nu = (h - u) % h, nv = (w - v) % w;
      sym(u, v) = 0.25 * (amp(u, v) + amp(nu, v) + amp(u, nv) + amp(nu, nv));
    }
  }

  ad::Vec pooled = ad::Vec::Zero(kFftPool * kFftPool);
  ad::Vec counts = ad::Vec::Zero(kFftPool * kFftPool);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // Centred coordinates: y holds frequency (y - h/2) mod h.
      const double a = sym((y + h / 2) % h, (x + w / 2) % w);
      const int by = y * kFftPool / h, bx = x * kFftPool / w;
      pooled(by * kFftPool + bx) += a;
      counts(by * kFftPool + bx) += 1;
    }
  }
  return pooled.cwiseQuotient(counts);
}

ad::Mat domain_representation(const data::Dataset& ds, std::span<const std::int64_t> ids, DomainRepKind kind,
                              const FeatureFn& features) {
  const auto& shape = ds.manifest.image_shape;
  if (kind == DomainRepKind::kFftAmplitude) {
    ad::Mat out(static_cast<ad::Index>(ids.size()), kFftPool * kFftPool);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      out.row(static_cast<ad::Index>(i)) = fft_amplitude(ds.image(static_cast<std::size_t>(ids[i])), shape).transpose();
    }
    return out;
  }
  if (!features) throw ConfigError("domain_representation: backbone kind needs a feature function");
  constexpr std::size_t kChunk = 64;
  ad::Mat out;
  for (std::size_t start = 0; start < ids.size(); start += kChunk) {
    const std::size_t m = std::min(kChunk, ids.size() - start);
    ad::Mat images(static_cast<ad::Index>(m), static_cast<ad::Index>(shape.numel()));
    for (std::size_t i = 0; i < m; ++i) {
      auto img = ds.image(static_cast<std::size_t>(ids[start + i]));
      for (std::size_t p = 0; p < img.size(); ++p) images(static_cast<ad::Index>(i), static_cast<ad::Index>(p)) = img[p];
    }
    ad::Mat f = features(images);
    if (out.size() == 0) out.resize(static_cast<ad::Index>(ids.size()), f.cols());
    out.middleRows(static_cast<ad::Index>(start), static_cast<ad::Index>(m)) = f;
  }
  return out;
}

KMeansResult ss_kmeans(const ad::Mat& labelled, const ad::Mat& unlabelled, int iters) {
  if (labelled.rows() == 0) throw ConfigError("ss_kmeans: need at least one labelled vector");
  if (unlabelled.rows() > 0 && unlabelled.cols() != labelled.cols()) throw ConfigError("ss_kmeans: dimension mismatch");
  if (iters < 1) throw ConfigError("ss_kmeans: iters must be >= 1");

  KMeansResult r;
  const ad::Index nu = unlabelled.rows();
  r.cluster.assign(static_cast<std::size_t>(nu), 0);
  ad::Vec c0 = labelled.colwise().mean().transpose();
  ad::Vec c1 = c0;
  double far = -1;
  for (ad::Index i = 0; i < nu; ++i) {
    const double d = (unlabelled.row(i).transpose() - c0).squaredNorm();
    if (d > far) {
      far = d;
      c1 = unlabelled.row(i).transpose();
    }
  }

  for (int it = 0; it < iters; ++it) {
    bool changed = false;
    for (ad::Index i = 0; i < nu; ++i) {
      const auto x = unlabelled.row(i).transpose();
      // Ties stay with the labelled cluster.
      const int k = (x - c1).squaredNorm() < (x - c0).squaredNorm() ? 1 : 0;
      changed |= k != r.cluster[i];
      r.cluster[i] = k;
    }
    ad::Vec s0 = labelled.colwise().sum().transpose(), s1 = ad::Vec::Zero(labelled.cols());
    ad::Index n0 = labelled.rows(), n1 = 0;
    for (ad::Index i = 0; i < nu; ++i) {
      if (r.cluster[i] == 0) {
        s0 += unlabelled.row(i).transpose();
        ++n0;
      } else {
        s1 += unlabelled.row(i).transpose();
        ++n1;
      }
    }
    c0 = s0 / static_cast<double>(n0);
    if (n1 > 0) c1 = s1 / static_cast<double>(n1);
    r.objective.push_back(sse(labelled, unlabelled, r.cluster, c0, c1));
    r.iterations = it + 1;
    if (!changed && it > 0) break;
  }
  return r;
}

Schedule domainnet_preset() { return {0.0, 1.0, 80}; }
Schedule ssbc_preset() { return {0.0, 0.05, 80}; }

Schedule preset(const std::string& name) {
  if (name == "domainnet") return domainnet_preset();
  if (name == "ssbc") return ssbc_preset();
  throw ConfigError("unknown curriculum preset '" + name + "'");
}

int CurriculumState::domain_label(std::int64_t id) const {
  auto it = assignment.find(id);
  if (it == assignment.end()) throw ConfigError("curriculum: sample " + std::to_string(id) + " is not assigned");
  return it->second == Membership::kB ? 1 : 0;
}

CurriculumState build_state(std::span<const std::int64_t> labelled_ids, std::span<const std::int64_t> unlabelled_ids,
                            const KMeansResult& km, const Schedule& schedule, DomainRepKind kind) {
  if (km.cluster.size() != unlabelled_ids.size()) throw ConfigError("curriculum: cluster count does not match ids");
  CurriculumState s;
  s.schedule = schedule;
  s.kind = kind;
  for (auto id : labelled_ids) s.assignment[id] = Membership::kLabelled;
  for (std::size_t i = 0; i < unlabelled_ids.size(); ++i) {
    const bool b = km.cluster[i] == 1;
    s.assignment[unlabelled_ids[i]] = b ? Membership::kB : Membership::kA;
    (b ? s.n_b : s.n_a)++;
  }
  s.n_labelled = labelled_ids.size();
  return s;
}

double curriculum_weight(std::int64_t sample_id, int t, const CurriculumState& state) {
  auto it = state.assignment.find(sample_id);
  if (it == state.assignment.end()) throw ConfigError("curriculum: sample " + std::to_string(sample_id) + " is not assigned");
  switch (it->second) {
    case Membership::kLabelled:
      return 1.0;
    case Membership::kA:
      if (state.n_a == 0) throw ConfigError("curriculum: empty pseudo-domain a");
      return static_cast<double>(state.n_labelled) / static_cast<double>(state.n_a);
    case Membership::kB:
      return state.schedule.r0 + (state.schedule.r_prime - state.schedule.r0) * (t > state.schedule.t_prime ? 1.0 : 0.0);
  }
  return 0.0;
}

nlohmann::json dump_assignment(const CurriculumState& state) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [id, m] : state.assignment) {
    j[std::to_string(id)] = m == Membership::kLabelled ? "labelled" : (m == Membership::kA ? "a" : "b");
  }
  return j;
}

Batch draw_batch(std::span<const std::int64_t> labelled_ids, std::span<const std::int64_t> unlabelled_ids,
                 std::span<const double> unlabelled_weights, int batch_size, Rng& rng) {
  if (batch_size < 2 || batch_size % 2 != 0) throw ConfigError("draw_batch: batch_size must be even and >= 2");
  if (unlabelled_weights.size() != unlabelled_ids.size()) throw ConfigError("draw_batch: one weight per unlabelled id");
  if (labelled_ids.empty()) throw ConfigError("draw_batch: labelled pool is empty");
  const auto half = static_cast<std::size_t>(batch_size / 2);

  Batch b;
  if (labelled_ids.size() >= half) {
    auto perm = rng.permutation(static_cast<int>(labelled_ids.size()));
    for (std::size_t i = 0; i < half; ++i) b.labelled.push_back(labelled_ids[perm[i]]);
  } else {
    for (std::size_t i = 0; i < half; ++i) {
      b.labelled.push_back(labelled_ids[rng.uniform_int(0, static_cast<int>(labelled_ids.size()) - 1)]);
    }
  }

  std::vector<std::pair<double, std::size_t>> keys;
  for (std::size_t i = 0; i < unlabelled_ids.size(); ++i) {
    const double w = unlabelled_weights[i];
    if (w < 0 || !std::isfinite(w)) throw ConfigError("draw_batch: weights must be finite and non-negative");
    if (w > 0) keys.emplace_back(0.0, i);
  }
  if (keys.empty()) throw ConfigError("draw_batch: no unlabelled sample has positive weight");

  if (keys.size() >= half) {
    // Largest log(u) / w keys give a weighted sample without replacement.
    for (auto& [key, i] : keys) {
      double u = rng.uniform();
      while (u <= 0.0) u = rng.uniform();
      key = std::log(u) / unlabelled_weights[i];
    }
    std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(half), keys.end(),
                      [](const auto& a, const auto& c) { return a.first > c.first || (a.first == c.first && a.second < c.second); });
    for (std::size_t i = 0; i < half; ++i) b.unlabelled.push_back(unlabelled_ids[keys[i].second]);
  } else {
    b.with_replacement = true;
    std::vector<double> w(unlabelled_weights.begin(), unlabelled_weights.end());
    std::discrete_distribution<std::size_t> dist(w.begin(), w.end());
    for (std::size_t i = 0; i < half; ++i) b.unlabelled.push_back(unlabelled_ids[dist(rng.engine())]);
  }
  return b;
}

}  // namespace gcd::curriculum
