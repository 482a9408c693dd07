#pragma once

// Clustering accuracy after optimal cluster-to-class matching, split into
// All / Old / New and per domain, and evaluation of trained models.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gcd/synthdata.hpp"
#include "gcd/trainer.hpp"

namespace gcd::eval {

// Minimum-cost perfect assignment on a square cost matrix; result[row] = col.
std::vector<int> hungarian(const ad::Mat& cost);

struct Matching {
  double acc = 0.0;
  std::vector<int> assignment;  // cluster -> class, padded to max(K, max prediction + 1)
};

// Max-trace matching over the contingency table of predictions vs labels.
Matching hungarian_acc(std::span<const int> y_true, std::span<const int> y_pred, int num_classes);

struct Cell {
  std::optional<double> acc;  // empty when the split has no samples
  std::size_t count = 0;
};

struct SplitRow {
  Cell all, old, novel;
};

inline constexpr const char* kReportSchema = "gcd-eval-report/1";

struct EvalReport {
  SplitRow overall;
  std::map<int, SplitRow> domains;
  std::vector<int> assignment;
  std::string method;
  std::string checkpoint_id;
  std::string config_hash;

  nlohmann::json to_json() const;
};

// One global matching over every sample; each cell restricts it.
EvalReport split_accuracies(std::span<const int> y_true, std::span<const int> y_pred, std::span<const int> domain_ids,
                            std::span<const int> base_classes, int num_classes);

// Predictions of a model on the unlabelled pool (clean images).
std::vector<int> predict(const trainer::Model& model, const data::Dataset& ds, std::span<const std::int64_t> ids,
                         bool use_prompts = true);

EvalReport evaluate_model(const trainer::Model& model, const data::Dataset& ds, bool use_prompts = true);

// Throws ConfigError when `expected` is set and differs from the checkpoint's
// method, or when the class count does not match the dataset.
EvalReport evaluate_checkpoint(const trainer::LoadedCheckpoint& ckpt, const data::Dataset& ds,
                               std::optional<Method> expected = std::nullopt);

}  // namespace gcd::eval
