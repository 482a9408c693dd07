#pragma once

// Run configuration: method, seeds, and every tunable of the model, losses,
// curriculum and augmentation, with a strict JSON form. Unknown keys are
// rejected; the echoed JSON reproduces a run exactly.

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "gcd/backbone.hpp"
#include "gcd/curriculum.hpp"
#include "gcd/heads_losses.hpp"
#include "gcd/prompts.hpp"
#include "gcd/synthdata.hpp"

namespace gcd {

enum class Method { kHiLo, kHLPrompt, kVLPrompt };

Method parse_method(const std::string& name);
std::string to_string(Method m);
inline constexpr const char* kValidMethods = "hilo, hlprompt, vlprompt";

struct ModelConfig {
  int proj_dim = 32;
  int border_width = 1;            // boundary prompt p
  double prompt_init_scale = 0.0;  // std of the spatial prompt init; 0 starts at zero
  double tau_sharpen_vl = 0.0035;  // sharpening of VL pseudo-labels

  bool operator==(const ModelConfig&) const = default;
};

struct CurriculumConfig {
  std::string preset = "ssbc";
  curriculum::Schedule schedule = curriculum::ssbc_preset();
  curriculum::DomainRepKind kind = curriculum::DomainRepKind::kFftAmplitude;
  // t' is given for the reference schedule length; with scaling on, the
  // effective switch epoch is round(t' * epochs / reference_epochs).
  bool scale_t_prime = true;
  int reference_epochs = 200;

  int effective_t_prime(int epochs) const;
  bool operator==(const CurriculumConfig&) const = default;
};

struct RunConfig {
  Method method = Method::kHiLo;
  std::uint64_t seed = 1;
  int workers = 1;
  long long max_steps = -1;  // < 0: run every epoch
  losses::TrainConfig train;
  backbone::VitConfig vit;
  backbone::TextEncoderConfig text;
  prompts::TextPromptConfig text_prompt;
  prompts::AffinityConfig affinity;
  ModelConfig model;
  CurriculumConfig curriculum;
  data::AugmentConfig augment;

  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

// Method presets: VLPrompt uses tau_vl, weight decay 5e-4, and no domain head.
RunConfig default_config(Method method);

nlohmann::json to_json(const RunConfig& cfg);
// Expects a complete document (as produced by to_json).
RunConfig run_config_from_json(const nlohmann::json& j);

// Overlays `patch` on `base`. Every key in patch must already exist in base
// with a compatible type; throws ConfigError naming the offending key.
void merge_strict(nlohmann::json& base, const nlohmann::json& patch, const std::string& where = "");

// Applies key=value. Dotted keys address nested fields; a bare key must name
// exactly one field anywhere in the document. The value is parsed as JSON,
// falling back to a plain string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// Defaults of `method` overlaid with an optional user document and overrides.
RunConfig resolve_config(Method method, const nlohmann::json& user, const std::vector<std::string>& overrides);

nlohmann::json to_json(const data::GenConfig& g);
data::GenConfig gen_config_from_json(const nlohmann::json& j);

}  // namespace gcd
