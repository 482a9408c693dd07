#pragma once

// Pseudo-domain partition of the unlabelled pool and curriculum-weighted
// batch sampling.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gcd/autograd.hpp"
#include "gcd/rng.hpp"
#include "gcd/synthdata.hpp"

namespace gcd::curriculum {

enum class DomainRepKind { kBackboneFeature, kFftAmplitude };

DomainRepKind parse_domain_rep_kind(const std::string& name);
std::string to_string(DomainRepKind kind);

inline constexpr int kFftPool = 8;

// Luminance -> 2-D DFT amplitude, averaged over the (+-u, +-v) mirror bins,
// centred, average-pooled to 8x8 and flattened (64 values).
ad::Vec fft_amplitude(std::span<const float> image, const data::ImageShape& shape);

// Maps a batch of images [n, C*H*W] to domain features [n, d].
using FeatureFn = std::function<ad::Mat(const ad::Mat& images)>;

// One row per requested id. The backbone kind calls `features` in chunks.
ad::Mat domain_representation(const data::Dataset& ds, std::span<const std::int64_t> ids, DomainRepKind kind,
                              const FeatureFn& features = {});

struct KMeansResult {
  std::vector<int> cluster;       // per unlabelled row: 0 (a) or 1 (b)
  std::vector<double> objective;  // pinned within-cluster SSE after every update
  int iterations = 0;
};

// Two-cluster Lloyd iterations with every labelled row pinned to cluster 0.
KMeansResult ss_kmeans(const ad::Mat& labelled, const ad::Mat& unlabelled, int iters = 50);

enum class Membership { kLabelled, kA, kB };

struct Schedule {
  double r0 = 0.0;
  double r_prime = 1.0;
  int t_prime = 80;

  bool operator==(const Schedule&) const = default;
};

Schedule domainnet_preset();  // r' = 1, t' = 80
Schedule ssbc_preset();       // r0 = 0, r' = 0.05, t' = 80
Schedule preset(const std::string& name);

struct CurriculumState {
  std::map<std::int64_t, Membership> assignment;
  Schedule schedule;
  DomainRepKind kind = DomainRepKind::kFftAmplitude;
  std::size_t n_labelled = 0;
  std::size_t n_a = 0;
  std::size_t n_b = 0;

  // Pseudo-domain label used by the domain head: b -> 1, otherwise 0.
  int domain_label(std::int64_t id) const;
};

CurriculumState build_state(std::span<const std::int64_t> labelled_ids, std::span<const std::int64_t> unlabelled_ids,
                            const KMeansResult& km, const Schedule& schedule, DomainRepKind kind);

// Sampling weight at epoch t (unnormalised).
double curriculum_weight(std::int64_t sample_id, int t, const CurriculumState& state);

nlohmann::json dump_assignment(const CurriculumState& state);

struct Batch {
  std::vector<std::int64_t> labelled;
  std::vector<std::int64_t> unlabelled;
  bool with_replacement = false;  // set when too few positive-weight unlabelled ids
};

// batch_size / 2 uniform labelled ids plus batch_size / 2 weighted unlabelled
// ids drawn without replacement (exponential-key sampling).
Batch draw_batch(std::span<const std::int64_t> labelled_ids, std::span<const std::int64_t> unlabelled_ids,
                 std::span<const double> unlabelled_weights, int batch_size, Rng& rng);

}  // namespace gcd::curriculum
