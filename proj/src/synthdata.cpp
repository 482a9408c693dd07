#include "gcd/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>

#include "gcd/errors.hpp"
#include "gcd/rng.hpp"
#include "gcd/tensor_io.hpp"

namespace gcd::data {

namespace {

constexpr std::array<float, 3> kForeground = {0.95F, 0.60F, 0.25F};
constexpr std::array<float, 3> kBackground = {0.10F, 0.12F, 0.18F};
constexpr std::array<int, 3> kChannelPerm = {2, 0, 1};

// Shape membership in glyph-local coordinates (u, v) in roughly [-1, 1].
bool inside_shape(int shape, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  const double r = std::sqrt(u * u + v * v);
  switch (shape) {
    case 0: return r < 0.9;                                                     // disk
    case 1: return au < 0.78 && av < 0.78;                                      // square
    case 2: return v > -0.85 && v < 0.8 && au < 0.5 * (v + 0.85);               // triangle, apex up
    case 3: return (au < 0.28 && av < 0.92) || (av < 0.28 && au < 0.92);        // plus
    case 4: return r > 0.5 && r < 0.92;                                         // ring
    case 5: return au + av < 0.95;                                              // diamond
    case 6: return (std::abs(u - v) < 0.36 || std::abs(u + v) < 0.36) && au < 0.85 && av < 0.85;  // x
    case 7: return (v < -0.45 && v > -0.92 && au < 0.88) || (au < 0.26 && v > -0.92 && v < 0.92);  // T
    default: return false;
  }
}

double fill_intensity(int fill, double u, double v) {
  auto parity = [](double t) { return static_cast<int>(std::floor(t)) & 1; };
  switch (fill) {
    case 0: return 1.0;
    case 1: return parity((v + 1.0) * 3.0) ? 0.35 : 1.0;
    case 2: return parity((u + 1.0) * 3.0) ? 0.35 : 1.0;
    case 3: return (parity((u + 1.0) * 2.5) ^ parity((v + 1.0) * 2.5)) ? 0.35 : 1.0;
    case 4: {
      const double fu = (u + 1.0) * 2.5 - std::floor((u + 1.0) * 2.5) - 0.5;
      const double fv = (v + 1.0) * 2.5 - std::floor((v + 1.0) * 2.5) - 0.5;
      return fu * fu + fv * fv < 0.09 ? 1.0 : 0.4;
    }
    case 5: return parity((u + v + 2.0) * 2.2) ? 0.35 : 1.0;
    case 6: return 0.55;
    case 7: return std::max(0.3, 1.0 - 0.6 * std::sqrt(u * u + v * v));
    default: return 1.0;
  }
}

void validate_gen_config(const GenConfig& cfg) {
  if (cfg.K < 2 || cfg.K % 2 != 0) throw ConfigError("K must be an even number >= 2");
  if (cfg.K > kGlyphCount) throw ConfigError("K exceeds the glyph library size (64)");
  if (cfg.n_per_class_per_domain < 4) throw ConfigError("n_per_class_per_domain must be >= 4");
  const auto& s = cfg.image_shape;
  if (s.channels != 3) throw ConfigError("image_shape must have 3 channels");
  if (s.height != s.width || s.height <= 0) throw ConfigError("image_shape must be square");
  if (cfg.patch_size <= 0 || s.height % cfg.patch_size != 0) {
    throw ConfigError("image size " + std::to_string(s.height) + " not divisible by patch size " +
                      std::to_string(cfg.patch_size));
  }
}

}  // namespace

void SplitSpec::validate(int num_classes) const {
  if (base_classes.empty()) throw ConfigError("split: base class set must be non-empty");
  if (!(labelled_fraction > 0.0 && labelled_fraction <= 1.0)) throw ConfigError("split: labelled_fraction must be in (0, 1]");
  std::set<int> seen;
  for (int c : base_classes) {
    if (c < 0 || c >= num_classes) throw ConfigError("split: base class out of range");
    if (!seen.insert(c).second) throw ConfigError("split: duplicate class");
  }
  for (int c : novel_classes) {
    if (c < 0 || c >= num_classes) throw ConfigError("split: novel class out of range");
    if (!seen.insert(c).second) throw ConfigError("split: base and novel classes overlap");
  }
  if (static_cast<int>(seen.size()) != num_classes) throw ConfigError("split: classes do not cover [0, K)");
}

bool SplitSpec::is_base(int class_id) const {
  return std::find(base_classes.begin(), base_classes.end(), class_id) != base_classes.end();
}

std::span<const float> Dataset::image(std::size_t i) const {
  const std::size_t n = manifest.image_shape.numel();
  return std::span<const float>(pixels).subspan(i * n, n);
}

SampleRecord Dataset::record(std::size_t i) const {
  const auto& r = manifest.records.at(i);
  return SampleRecord{image(i), r.class_id, r.domain_id, r.is_labelled, r.sample_id};
}

SplitSpec default_split(int num_classes, int num_base_classes, double labelled_fraction) {
  if (num_base_classes < 0) num_base_classes = num_classes / 2;
  SplitSpec s;
  for (int c = 0; c < num_classes; ++c) (c < num_base_classes ? s.base_classes : s.novel_classes).push_back(c);
  s.labelled_fraction = labelled_fraction;
  return s;
}

int glyph_for_class(int class_id) {
  const int shape = class_id % 8;
  const int fill = (class_id / 8 + class_id) % 8;
  return shape * 8 + fill;
}

std::vector<float> render_glyph(int glyph_index, const ImageShape& shape, std::uint64_t seed) {
  if (glyph_index < 0 || glyph_index >= kGlyphCount) throw ConfigError("glyph index out of range");
  const int kind = glyph_index / 8;
  const int fill = glyph_index % 8;
  const int H = shape.height, W = shape.width;
  Rng rng(seed);
  const double jitter = H / 16.0;
  const double cx = 0.5 * W + rng.uniform(-jitter, jitter);
  const double cy = 0.5 * H + rng.uniform(-jitter, jitter);
  const double radius = 0.36 * H * rng.uniform(0.85, 1.0);

  std::vector<float> img(shape.numel());
  constexpr int kSuper = 2;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double tex = 0.0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double u = (x + (sx + 0.5) / kSuper - cx) / radius;
          const double v = (y + (sy + 0.5) / kSuper - cy) / radius;
          if (inside_shape(kind, u, v)) {
            tex += fill_intensity(fill, u, v);
          }
        }
      }
      const double a = tex / (kSuper * kSuper);
      for (int c = 0; c < 3; ++c) {
        const double val = kBackground[c] + a * (kForeground[c] - kBackground[c]);
        img[static_cast<std::size_t>((c * H + y) * W + x)] = static_cast<float>(val);
      }
    }
  }
  return img;
}

std::vector<float> apply_domain_transform(std::span<const float> image, const ImageShape& shape, int domain_id,
                                          std::uint64_t seed) {
  if (image.size() != shape.numel()) throw ConfigError("apply_domain_transform: image size mismatch");
  if (domain_id == 0) return std::vector<float>(image.begin(), image.end());
  if (domain_id != 1) throw ConfigError("apply_domain_transform: unknown domain id " + std::to_string(domain_id));
  const std::size_t plane = static_cast<std::size_t>(shape.height) * static_cast<std::size_t>(shape.width);
  std::vector<float> out(image.size());
  Rng rng(seed);
  for (int c = 0; c < 3; ++c) {
    const auto src = static_cast<std::size_t>(kChannelPerm[static_cast<std::size_t>(c)]);
    for (std::size_t i = 0; i < plane; ++i) {
      const double v = image[src * plane + i] + kDomainBrightnessShift + rng.normal(0.0, kDomainNoiseStd);
      out[static_cast<std::size_t>(c) * plane + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

std::vector<float> augment(std::span<const float> image, const ImageShape& shape, const AugmentConfig& cfg,
                           std::uint64_t seed, std::int64_t sample_id, int view, int epoch) {
  if (!cfg.enabled) return std::vector<float>(image.begin(), image.end());
  Rng rng(derive_seed(seed, {tag(Stream::kAugment), static_cast<std::uint64_t>(sample_id),
                             static_cast<std::uint64_t>(view), static_cast<std::uint64_t>(epoch)}));
  const int dx = rng.uniform_int(-cfg.max_shift, cfg.max_shift);
  const int dy = rng.uniform_int(-cfg.max_shift, cfg.max_shift);
  const bool flip = rng.bernoulli(cfg.flip_prob);
  const double bright = rng.uniform(-cfg.brightness, cfg.brightness);
  const int H = shape.height, W = shape.width;
  std::vector<float> out(image.size(), 0.0F);
  for (int c = 0; c < shape.channels; ++c) {
    for (int y = 0; y < H; ++y) {
      const int sy = y - dy;
      if (sy < 0 || sy >= H) continue;
      for (int x = 0; x < W; ++x) {
        int sx = x - dx;
        if (sx < 0 || sx >= W) continue;
        if (flip) sx = W - 1 - sx;
        const double v = image[static_cast<std::size_t>((c * H + sy) * W + sx)] + bright;
        out[static_cast<std::size_t>((c * H + y) * W + x)] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

Split split_dataset(const DatasetManifest& manifest, const SplitSpec& spec) {
  spec.validate(manifest.K);
  std::map<int, std::vector<std::int64_t>> seen_by_class;
  for (const auto& r : manifest.records) {
    if (r.domain_id == 0 && spec.is_base(r.class_id)) seen_by_class[r.class_id].push_back(r.sample_id);
  }
  std::set<std::int64_t> labelled;
  for (int c : spec.base_classes) {
    auto it = seen_by_class.find(c);
    if (it == seen_by_class.end() || it->second.empty()) {
      throw ConfigError("split: base class " + std::to_string(c) + " has no domain-0 samples");
    }
    auto ids = it->second;
    std::sort(ids.begin(), ids.end());
    const auto n = static_cast<std::size_t>(std::floor(spec.labelled_fraction * static_cast<double>(ids.size()) + 1e-9));
    const std::size_t take = std::clamp<std::size_t>(n, 1, ids.size());
    labelled.insert(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(take));
  }
  Split out;
  std::vector<std::int64_t> all;
  all.reserve(manifest.records.size());
  for (const auto& r : manifest.records) all.push_back(r.sample_id);
  std::sort(all.begin(), all.end());
  for (auto id : all) (labelled.count(id) ? out.labelled : out.unlabelled).push_back(id);
  return out;
}

Dataset make_dataset(const GenConfig& cfg) {
  validate_gen_config(cfg);
  Dataset ds;
  auto& m = ds.manifest;
  m.dataset_name = cfg.name;
  m.K = cfg.K;
  m.image_shape = cfg.image_shape;
  m.split_spec = default_split(cfg.K, cfg.num_base_classes, cfg.labelled_fraction);
  m.split_spec.validate(cfg.K);
  m.generator_seed = cfg.seed;

  const std::size_t numel = cfg.image_shape.numel();
  const std::size_t total = static_cast<std::size_t>(cfg.K) * static_cast<std::size_t>(cfg.n_per_class_per_domain) * 2;
  ds.pixels.reserve(total * numel);
  const std::size_t header = io::header_size(4);
  std::int64_t id = 0;
  for (int domain = 0; domain < 2; ++domain) {
    for (int k = 0; k < cfg.K; ++k) {
      for (int i = 0; i < cfg.n_per_class_per_domain; ++i, ++id) {
        const auto uid = static_cast<std::uint64_t>(id);
        auto img = render_glyph(glyph_for_class(k), cfg.image_shape, derive_seed(cfg.seed, {tag(Stream::kGlyph), uid}));
        if (domain == 1) {
          img = apply_domain_transform(img, cfg.image_shape, 1, derive_seed(cfg.seed, {tag(Stream::kDomain), uid}));
        }
        ds.pixels.insert(ds.pixels.end(), img.begin(), img.end());
        RecordInfo r;
        r.sample_id = id;
        r.class_id = k;
        r.domain_id = domain;
        r.tensor_file_offset = header + uid * numel * sizeof(float);
        m.records.push_back(r);
      }
    }
  }
  const auto split = split_dataset(m, m.split_spec);
  std::set<std::int64_t> lab(split.labelled.begin(), split.labelled.end());
  for (auto& r : m.records) r.is_labelled = lab.count(r.sample_id) > 0;
  return ds;
}

nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : m.records) {
    records.push_back({{"sample_id", r.sample_id},
                       {"class_id", r.class_id},
                       {"domain_id", r.domain_id},
                       {"is_labelled", r.is_labelled},
                       {"tensor_file_offset", r.tensor_file_offset}});
  }
  return {
      {"dataset_name", m.dataset_name},
      {"K", m.K},
      {"image_shape", {m.image_shape.channels, m.image_shape.height, m.image_shape.width}},
      {"split_spec",
       {{"base_classes", m.split_spec.base_classes},
        {"novel_classes", m.split_spec.novel_classes},
        {"labelled_fraction_per_base_class", m.split_spec.labelled_fraction},
        {"domains", {{"seen", m.split_spec.seen_domains}, {"new", m.split_spec.new_domains}}}}},
      {"records", records},
      {"generator_seed", m.generator_seed},
  };
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
  try {
    DatasetManifest m;
    m.dataset_name = j.at("dataset_name").get<std::string>();
    m.K = j.at("K").get<int>();
    const auto shape = j.at("image_shape").get<std::vector<int>>();
    if (shape.size() != 3) throw FormatError(FormatErrorKind::kInconsistentManifest, "image_shape must have 3 entries");
    m.image_shape = ImageShape{shape[0], shape[1], shape[2]};
    const auto& s = j.at("split_spec");
    m.split_spec.base_classes = s.at("base_classes").get<std::vector<int>>();
    m.split_spec.novel_classes = s.at("novel_classes").get<std::vector<int>>();
    m.split_spec.labelled_fraction = s.at("labelled_fraction_per_base_class").get<double>();
    m.split_spec.seen_domains = s.at("domains").at("seen").get<std::vector<int>>();
    m.split_spec.new_domains = s.at("domains").at("new").get<std::vector<int>>();
    for (const auto& r : j.at("records")) {
      m.records.push_back(RecordInfo{r.at("sample_id").get<std::int64_t>(), r.at("class_id").get<int>(),
                                     r.at("domain_id").get<int>(), r.at("is_labelled").get<bool>(),
                                     r.at("tensor_file_offset").get<std::uint64_t>()});
    }
    m.generator_seed = j.at("generator_seed").get<std::uint64_t>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::kMalformedJson, e.what());
  }
}

void persist(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto& s = ds.manifest.image_shape;
  const std::array<std::uint64_t, 4> dims = {ds.size(), static_cast<std::uint64_t>(s.channels),
                                             static_cast<std::uint64_t>(s.height), static_cast<std::uint64_t>(s.width)};
  io::write_file_atomic(dir / "images.gcdt", io::encode_blob(dims, std::span<const float>(ds.pixels)));
  io::write_file_atomic(dir / "manifest.json", to_json(ds.manifest).dump(2) + "\n");
}

Dataset load(const std::filesystem::path& dir) {
  Dataset ds;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(FormatErrorKind::kMalformedJson, e.what());
  }
  ds.manifest = manifest_from_json(j);
  const std::string bytes = io::read_file(dir / "images.gcdt");
  auto blob = io::decode_blob(bytes);
  if (blob.dtype != io::Dtype::kF32) throw FormatError(FormatErrorKind::kUnsupportedDtype, "dataset blob must be f32");
  const auto& s = ds.manifest.image_shape;
  const std::vector<std::uint64_t> expected = {ds.manifest.records.size(), static_cast<std::uint64_t>(s.channels),
                                               static_cast<std::uint64_t>(s.height), static_cast<std::uint64_t>(s.width)};
  if (blob.dims != expected) {
    throw FormatError(FormatErrorKind::kInconsistentManifest,
                      "manifest lists " + std::to_string(ds.manifest.records.size()) + " records of shape [" +
                          std::to_string(s.channels) + "," + std::to_string(s.height) + "," + std::to_string(s.width) +
                          "] but blob does not match");
  }
  ds.pixels = std::move(blob.f32);
  return ds;
}

}  // namespace gcd::data
