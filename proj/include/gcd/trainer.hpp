#pragma once

// Model assembly, optimisation, and the three training loops. Each step draws
// a curriculum batch, renders two augmented views, runs one discriminator
// ascent (when MI is on) and one descent step on the active parameter groups.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gcd/config.hpp"
#include "gcd/curriculum.hpp"
#include "gcd/heads_losses.hpp"
#include "gcd/patchmix.hpp"
#include "gcd/prompts.hpp"
#include "gcd/synthdata.hpp"

namespace gcd::trainer {

enum class Group { kEncoder, kHeads, kPrototypes, kDiscriminator, kSpatialPrompt, kTextPrompt };
std::string to_string(Group g);

struct Slot {
  std::string name;
  ad::Var var;
  Group group;
};

// Every learnable tensor of one method. Components a method does not use are
// left undefined and are absent from slots().
class Model {
 public:
  Model(const RunConfig& cfg, int num_classes);

  Method method() const { return method_; }
  int num_classes() const { return num_classes_; }
  const RunConfig& config() const { return cfg_; }

  backbone::VisionTransformer vit;
  losses::ProjectionHead sem_head, dom_head;
  losses::PrototypeBank sem_protos, dom_protos, pm_protos;
  losses::Discriminator disc;
  nn::Linear vl_proj;  // vision -> shared space (VLPrompt)
  ad::Var q_fg;        // [1, d] foreground prompt (HLPrompt)
  ad::Var q_s;         // [1, C*H*W] pixel prompt (VLPrompt)
  prompts::TextPromptState text_prompts;
  std::optional<backbone::TextEncoder> text_encoder;
  ad::Mat boundary;    // [H, W] boundary mask (VLPrompt)

  std::vector<Slot> slots() const;

  // Forward on clean pixels [n, C*H*W] -> class scores [n, K] (prompts applied).
  ad::Mat class_scores(const ad::Mat& pixels, bool use_prompts = true) const;
  // Per-image foreground masks [n, P] from an unprompted pass.
  ad::Mat foreground_masks(const ad::Mat& pixels, int workers = 1) const;

 private:
  RunConfig cfg_;
  Method method_;
  int num_classes_;
};

// SGD with momentum and decoupled-from-clipping weight decay:
// g = grad + wd * theta; v = mu * v + g; theta -= lr * v.
class Sgd {
 public:
  Sgd(std::vector<Slot> slots, double momentum, double weight_decay);

  // Updates slots whose group is in `active`; learning rate per group. When
  // clip > 0, gradients of the active slots are rescaled to global norm <= clip.
  // ascend flips the gradient sign. Returns the pre-clip gradient norm.
  double step(const std::vector<Group>& active, const std::function<double(Group)>& lr, double clip,
              bool ascend = false);
  void zero_grad();
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  std::vector<Slot> slots_;
  std::vector<ad::Mat> velocity_;
  double momentum_, weight_decay_;
};

// Pixels for a set of ids and one augmented view ([n, C*H*W]).
ad::Mat render_views(const data::Dataset& ds, std::span<const std::int64_t> ids, const data::AugmentConfig& aug,
                     std::uint64_t seed, int view, int epoch, int workers);
ad::Mat clean_pixels(const data::Dataset& ds, std::span<const std::int64_t> ids);

struct StepInputs {
  std::vector<std::int64_t> ids;  // labelled first, then unlabelled
  std::vector<int> labels;        // class for labelled ids, -1 otherwise
  std::vector<int> domain_labels; // pseudo-domain: labelled and D_a -> 0, D_b -> 1
  ad::Mat pixels;                 // [2B, C*H*W], view 0 rows then view 1 rows
  int epoch = 0;
  long long iteration = 0;
  bool with_replacement = false;
  int n_domain_b = 0;             // D_b members in the batch
};

// Everything the objective needs from one forward pass over a batch.
struct Forward {
  ad::Var r_sem, r_dom;  // [2B, d] CLS after the last / domain-tap block
  ad::Var sem_proj;      // HiLo family: unit projector output of r_sem
  ad::Var dom_proj;      // HiLo family: unit projector output of r_dom (domain loss or MI)
  ad::Var vis;           // VLPrompt: unit shared-space image embedding
  ad::Var text_bank;     // VLPrompt: [K, D]
  ad::Var h_dom, h_sem;  // MI inputs, undefined when MI is off
  // PatchMix
  ad::Var mix_r_sem;                // [2B, d]
  ad::Vec alpha, beta_mean;         // [2B]
  std::vector<ad::Index> mix_partner_rows;  // partner row of each mixed row, same view block
};

struct LossTerms {
  std::vector<std::pair<std::string, ad::Var>> components;  // summed into total
  ad::Var total;
  ad::Var mi;  // unweighted estimate, undefined when MI is off
};

bool mi_enabled(const RunConfig& cfg);

// `masks` are the foreground masks for HLPrompt ([2B, P]); `mix_rng` drives PatchMix plans.
Forward forward_batch(const Model& model, const StepInputs& in, const ad::Mat* masks, Rng& mix_rng);
// Full objective of the configured method; uses the discriminator as it is now.
LossTerms assemble_losses(const Model& model, const StepInputs& in, const Forward& fwd);

struct StepRecord {
  int epoch = 0;
  long long iteration = 0;
  std::string phase;  // "model", "prompt", or "joint" when phases are off
  std::map<std::string, double> lr;
  std::vector<std::pair<std::string, double>> components;
  double total = 0.0;
  double grad_norm = 0.0;
  std::optional<double> mi_disc_before, mi_disc_after;
  bool with_replacement = false;
  int n_domain_b = 0;

  nlohmann::json to_json() const;
};

struct Hooks {
  // After the descent step of every iteration.
  std::function<void(const StepRecord&, const Model&)> after_step;
  // Before any update of an iteration, with the batch it will use.
  std::function<void(const StepInputs&, const Model&)> before_step;
};

struct TrainResult {
  std::unique_ptr<Model> model;
  std::vector<StepRecord> history;
  curriculum::CurriculumState curriculum;
  long long mask_computations = 0;  // images passed through the NCut mask step
  long long iterations_per_epoch = 0;
};

// Deterministic preparation shared with external reference loops.
struct Setup {
  data::Split split;
  curriculum::CurriculumState curriculum;
  long long iterations_per_epoch = 0;
  int t_prime = 0;
};
Setup prepare(const data::Dataset& ds, const RunConfig& cfg, const Model& initial);

// Draws batch `iteration` using the persistent batch RNG.
StepInputs next_batch(const data::Dataset& ds, const RunConfig& cfg, const Setup& setup, int epoch,
                      long long iteration, Rng& batch_rng);

std::string phase_name(const RunConfig& cfg, long long iteration);
// Groups updated by descent at an iteration (the discriminator is handled by ascent).
std::vector<Group> active_groups(const RunConfig& cfg, long long iteration);
bool discriminator_active(const RunConfig& cfg, long long iteration);
double group_lr(const RunConfig& cfg, Group g, long long iteration, long long total_iterations);

TrainResult train(const data::Dataset& ds, const RunConfig& cfg, const Hooks& hooks = {});
TrainResult train_hilo(const data::Dataset& ds, const RunConfig& cfg, const Hooks& hooks = {});
TrainResult train_hlprompt(const data::Dataset& ds, const RunConfig& cfg, const Hooks& hooks = {});
TrainResult train_vlprompt(const data::Dataset& ds, const RunConfig& cfg, const Hooks& hooks = {});

void write_history(const std::filesystem::path& path, const std::vector<StepRecord>& history);

// checkpoint.gcdt holds one f64 blob per tensor; checkpoint.json maps names
// to byte offsets and shapes and carries the run config.
void save_checkpoint(const std::filesystem::path& dir, const Model& model, const nlohmann::json& extra = {});

struct LoadedCheckpoint {
  std::unique_ptr<Model> model;
  nlohmann::json sidecar;
  std::string id;  // hash of the tensor file
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

// FNV-1a 64 over bytes, hex encoded.
std::string content_hash(std::string_view bytes);

// Reads GCD_NUM_WORKERS (>= 1) or returns the fallback.
int workers_from_env(int fallback);

}  // namespace gcd::trainer
