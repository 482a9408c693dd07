#pragma once

// Procedural two-domain glyph datasets.
//
// Every class is a glyph (shape x fill pattern) drawn at a jittered position
// and scale. Domain 0 is the clean rendering; domain 1 applies a fixed
// photometric corruption (channel permutation, brightness shift, pixel noise)
// to renderings of the same class distribution.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace gcd::data {

inline constexpr int kGlyphCount = 64;
inline constexpr double kDomainBrightnessShift = 0.15;
inline constexpr double kDomainNoiseStd = 0.05;

struct ImageShape {
  int channels = 3;
  int height = 32;
  int width = 32;

  std::size_t numel() const {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  bool operator==(const ImageShape&) const = default;
};

struct SplitSpec {
  std::vector<int> base_classes;
  std::vector<int> novel_classes;
  double labelled_fraction = 0.5;
  std::vector<int> seen_domains{0};
  std::vector<int> new_domains{1};

  // Base and novel must partition [0, K) and base must be non-empty.
  void validate(int num_classes) const;
  bool is_base(int class_id) const;

  bool operator==(const SplitSpec&) const = default;
};

struct RecordInfo {
  std::int64_t sample_id = 0;
  int class_id = 0;
  int domain_id = 0;
  bool is_labelled = false;
  std::uint64_t tensor_file_offset = 0;

  bool operator==(const RecordInfo&) const = default;
};

struct DatasetManifest {
  std::string dataset_name;
  int K = 0;
  ImageShape image_shape;
  SplitSpec split_spec;
  std::vector<RecordInfo> records;
  std::uint64_t generator_seed = 0;

  bool operator==(const DatasetManifest&) const = default;
};

// One record together with a view of its pixels ([C, H, W] row-major).
struct SampleRecord {
  std::span<const float> image;
  int class_id;
  int domain_id;
  bool is_labelled;
  std::int64_t sample_id;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<float> pixels;  // [N, C, H, W]

  std::size_t size() const { return manifest.records.size(); }
  std::span<const float> image(std::size_t i) const;
  SampleRecord record(std::size_t i) const;
};

struct GenConfig {
  std::string name = "glyphs";
  int K = 8;
  int n_per_class_per_domain = 16;
  ImageShape image_shape;
  int patch_size = 4;
  std::uint64_t seed = 7;
  int num_base_classes = -1;  // -1: first K/2 classes
  double labelled_fraction = 0.5;
};

SplitSpec default_split(int num_classes, int num_base_classes, double labelled_fraction);

Dataset make_dataset(const GenConfig& cfg);

// Renders glyph `glyph_index` (0..63) on a clean canvas.
std::vector<float> render_glyph(int glyph_index, const ImageShape& shape, std::uint64_t seed);

// Glyph library index used for class k.
int glyph_for_class(int class_id);

// domain 0: identity. domain 1: channel permutation, +0.15 brightness, N(0, 0.05^2) noise, clamp.
std::vector<float> apply_domain_transform(std::span<const float> image, const ImageShape& shape, int domain_id,
                                          std::uint64_t seed);

// Training-view augmentation: crop-pad shift <= max_shift px, horizontal flip,
// brightness jitter in [-0.1, 0.1]; seeded by (seed, sample_id, view, epoch).
struct AugmentConfig {
  int max_shift = 4;
  double flip_prob = 0.5;
  double brightness = 0.1;
  bool enabled = true;

  bool operator==(const AugmentConfig&) const = default;
};

std::vector<float> augment(std::span<const float> image, const ImageShape& shape, const AugmentConfig& cfg,
                           std::uint64_t seed, std::int64_t sample_id, int view, int epoch);

struct Split {
  std::vector<std::int64_t> labelled;    // D_l
  std::vector<std::int64_t> unlabelled;  // D_u
};

// D_l: the first floor(fraction * n) domain-0 records of every base class (at least one), in sample order.
Split split_dataset(const DatasetManifest& manifest, const SplitSpec& spec);

// manifest.json + images.gcdt
void persist(const Dataset& ds, const std::filesystem::path& dir);
Dataset load(const std::filesystem::path& dir);

nlohmann::json to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);

}  // namespace gcd::data
