#include "gcd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <numbers>
#include <sstream>
#include <thread>

#include "gcd/errors.hpp"
#include "gcd/tensor_io.hpp"

namespace gcd::trainer {

using ad::Index;
using ad::Mat;
using ad::Var;
using nlohmann::json;

namespace {

std::uint64_t init_seed(const RunConfig& cfg, std::uint64_t component) {
  return derive_seed(cfg.seed, {tag(Stream::kInit), component});
}

// Splits [0, n) into contiguous chunks, one per worker.
void parallel_for(Index n, int workers, const std::function<void(Index, Index)>& fn) {
  const Index w = std::clamp<Index>(workers, 1, std::max<Index>(n, 1));
  if (w == 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(w));
  const Index chunk = (n + w - 1) / w;
  for (Index t = 0; t < w; ++t) {
    const Index lo = t * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    threads.emplace_back([&, t, lo, hi] {
      try {
        fn(lo, hi);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// Rows [0, n) and [n, 2n) exchanged: row r gets the other view's row.
Mat swap_views(const Mat& m) {
  const Index n = m.rows() / 2;
  Mat out(m.rows(), m.cols());
  out.topRows(n) = m.bottomRows(n);
  out.bottomRows(n) = m.topRows(n);
  return out;
}

std::vector<int> repeat_twice(const std::vector<int>& v) {
  std::vector<int> out(v);
  out.insert(out.end(), v.begin(), v.end());
  return out;
}

Mat unit_rows_value(const Var& v) { return ad::normalize_rows(ad::detach(v)).value(); }

bool is_prompt_method(Method m) { return m != Method::kHiLo; }

}  // namespace

std::string to_string(Group g) {
  switch (g) {
    case Group::kEncoder: return "encoder";
    case Group::kHeads: return "heads";
    case Group::kPrototypes: return "prototypes";
    case Group::kDiscriminator: return "discriminator";
    case Group::kSpatialPrompt: return "spatial_prompt";
    case Group::kTextPrompt: return "text_prompt";
  }
  return "?";
}

Model::Model(const RunConfig& cfg, int num_classes)
    : vit(cfg.vit, init_seed(cfg, 1)), cfg_(cfg), method_(cfg.method), num_classes_(num_classes) {
  cfg.validate();
  if (num_classes < 2) throw ConfigError("model needs at least two classes");
  const Index d = cfg.vit.embed_dim, dp = cfg.model.proj_dim;
  auto rng = [&](std::uint64_t c) { return Rng(init_seed(cfg, c)); };
  auto prompt_init = [&](Index rows, Index cols, std::uint64_t c) {
    if (cfg.model.prompt_init_scale == 0.0) return nn::parameter(Mat::Zero(rows, cols));
    Rng r = rng(c);
    return nn::parameter(nn::gaussian(rows, cols, cfg.model.prompt_init_scale, r));
  };
  if (method_ != Method::kVLPrompt) {
    Rng r2 = rng(2), r3 = rng(3), r4 = rng(4), r5 = rng(5), r6 = rng(6), r7 = rng(7);
    sem_head = losses::ProjectionHead(d, 2 * d, dp, r2);
    dom_head = losses::ProjectionHead(d, 2 * d, dp, r3);
    sem_protos = losses::PrototypeBank(num_classes, d, r4);
    dom_protos = losses::PrototypeBank(2, d, r5);
    pm_protos = losses::PrototypeBank(num_classes, d, r6);
    disc = losses::Discriminator(dp, 2 * d, r7);
    if (method_ == Method::kHLPrompt) q_fg = prompt_init(1, d, 8);
  } else {
    const Index D = cfg.text.out_dim;
    Rng r7 = rng(7), r9 = rng(9), r11 = rng(11);
    vl_proj = nn::Linear(d, D, r9);
    disc = losses::Discriminator(D, 2 * d, r7);
    text_encoder.emplace(cfg.text, init_seed(cfg, 10));
    text_prompts = prompts::TextPromptState(num_classes, cfg.text.token_dim, cfg.text_prompt, r11);
    q_s = prompt_init(1, cfg.vit.pixels(), 12);
    boundary = prompts::boundary_mask_image(cfg.vit.image_size, cfg.vit.patch_size, cfg.model.border_width);
  }
}

std::vector<Slot> Model::slots() const {
  std::vector<Slot> out;
  auto add = [&](const nn::ParamList& list, Group g) {
    for (const auto& p : list) out.push_back({p.name, p.var, g});
  };
  add(vit.parameters(), Group::kEncoder);
  nn::ParamList heads, protos, disc_p, spatial, text;
  if (method_ != Method::kVLPrompt) {
    sem_head.collect("sem_head", heads);
    dom_head.collect("dom_head", heads);
    sem_protos.collect("sem_protos", protos);
    dom_protos.collect("dom_protos", protos);
    pm_protos.collect("pm_protos", protos);
    if (method_ == Method::kHLPrompt) spatial.push_back({"prompt.q_fg", q_fg});
  } else {
    vl_proj.collect("vl_proj", heads);
    spatial.push_back({"prompt.q_s", q_s});
    text_prompts.collect("text_prompt", text);
  }
  disc.collect("disc", disc_p);
  add(heads, Group::kHeads);
  add(protos, Group::kPrototypes);
  add(disc_p, Group::kDiscriminator);
  add(spatial, Group::kSpatialPrompt);
  add(text, Group::kTextPrompt);
  return out;
}

ad::Mat Model::foreground_masks(const ad::Mat& pixels, int workers) const {
  ad::NoGradGuard guard;
  backbone::FeatureBundle fb = vit.forward(ad::constant(pixels));
  const Index n = pixels.rows(), p = cfg_.vit.num_patches();
  const int grid = cfg_.vit.grid();
  Mat masks(n, p);
  parallel_for(n, workers, [&](Index lo, Index hi) {
    masks.middleRows(lo, hi - lo) = prompts::ncut_masks(fb.mid_patch_feats.middleRows(lo * p, (hi - lo) * p),
                                                        fb.last_attn_cls.middleRows(lo, hi - lo), grid, cfg_.affinity);
  });
  return masks;
}

ad::Mat Model::class_scores(const ad::Mat& pixels, bool use_prompts) const {
  ad::NoGradGuard guard;
  constexpr Index kChunk = 64;
  Mat out(pixels.rows(), num_classes_);
  Mat bank;
  if (method_ == Method::kVLPrompt) bank = prompts::text_bank(text_prompts, *text_encoder).value();
  for (Index lo = 0; lo < pixels.rows(); lo += kChunk) {
    const Index n = std::min(kChunk, pixels.rows() - lo);
    const Mat px = pixels.middleRows(lo, n);
    Var x = ad::constant(px);
    if (method_ == Method::kVLPrompt) {
      if (use_prompts) x = prompts::apply_boundary_spt(x, q_s, boundary, cfg_.vit.channels);
      const auto fb = vit.forward(x);
      const Mat v = ad::normalize_rows(vl_proj(fb.layer_cls.back())).value();
      out.middleRows(lo, n) = v * bank.transpose();
      continue;
    }
    Var emb = vit.patchify(x);
    if (method_ == Method::kHLPrompt && use_prompts) {
      emb = prompts::apply_semantic_spt(emb, foreground_masks(px), q_fg);
    }
    const auto fb = vit.forward_embeddings(emb);
    out.middleRows(lo, n) = sem_protos.logits(ad::normalize_rows(fb.layer_cls.back()), 1.0).value();
  }
  return out;
}

Sgd::Sgd(std::vector<Slot> slots, double momentum, double weight_decay)
    : slots_(std::move(slots)), momentum_(momentum), weight_decay_(weight_decay) {
  for (const auto& s : slots_) velocity_.push_back(Mat::Zero(s.var.rows(), s.var.cols()));
}

void Sgd::zero_grad() {
  for (auto& s : slots_) s.var.zero_grad();
}

double Sgd::step(const std::vector<Group>& active, const std::function<double(Group)>& lr, double clip, bool ascend) {
  auto is_active = [&](Group g) { return std::find(active.begin(), active.end(), g) != active.end(); };
  double sq = 0.0;
  for (const auto& s : slots_) {
    if (is_active(s.group) && s.var.has_grad()) sq += s.var.grad().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  const double scale = (clip > 0.0 && norm > clip) ? clip / norm : 1.0;
  const double sign = ascend ? -1.0 : 1.0;
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    auto& s = slots_[i];
    if (!is_active(s.group)) continue;
    Mat g = s.var.grad() * (sign * scale);
    if (weight_decay_ != 0.0) g += weight_decay_ * s.var.value();
    velocity_[i] = momentum_ * velocity_[i] + g;
    s.var.mutable_value() -= lr(s.group) * velocity_[i];
  }
  return norm;
}

ad::Mat render_views(const data::Dataset& ds, std::span<const std::int64_t> ids, const data::AugmentConfig& aug,
                     std::uint64_t seed, int view, int epoch, int workers) {
  const auto& shape = ds.manifest.image_shape;
  Mat out(static_cast<Index>(ids.size()), static_cast<Index>(shape.numel()));
  parallel_for(out.rows(), workers, [&](Index lo, Index hi) {
    for (Index i = lo; i < hi; ++i) {
      const auto id = ids[static_cast<std::size_t>(i)];
      const auto img = data::augment(ds.image(static_cast<std::size_t>(id)), shape, aug, seed, id, view, epoch);
      for (std::size_t k = 0; k < img.size(); ++k) out(i, static_cast<Index>(k)) = img[k];
    }
  });
  return out;
}

ad::Mat clean_pixels(const data::Dataset& ds, std::span<const std::int64_t> ids) {
  const auto numel = static_cast<Index>(ds.manifest.image_shape.numel());
  Mat out(static_cast<Index>(ids.size()), numel);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto img = ds.image(static_cast<std::size_t>(ids[i]));
    for (Index k = 0; k < numel; ++k) out(static_cast<Index>(i), k) = img[static_cast<std::size_t>(k)];
  }
  return out;
}

bool mi_enabled(const RunConfig& cfg) {
  if (!cfg.train.use_mi) return false;
  return cfg.method != Method::kVLPrompt || cfg.train.beta1 != 0.0;
}

namespace {

struct MixedPass {
  Var r_sem;
  ad::Vec alpha, beta_mean;
  std::vector<Index> partner_rows;
};

// Two mixed views sharing one partner assignment; beta drawn per view.
MixedPass mixed_forward(const Model& model, const Var& emb, const Mat& attention, const std::vector<int>& labels,
                        Rng& rng) {
  const auto& cfg = model.config();
  const int b = static_cast<int>(labels.size());
  const Index p = cfg.vit.num_patches();
  std::unique_ptr<bool[]> labelled(new bool[labels.size()]);
  for (std::size_t i = 0; i < labels.size(); ++i) labelled[i] = labels[i] >= 0;
  const std::vector<int> partner = patchmix::pair_partners(std::span<const bool>(labelled.get(), labels.size()), rng);

  MixedPass out;
  out.alpha.resize(2 * b);
  out.beta_mean.resize(2 * b);
  out.partner_rows.resize(static_cast<std::size_t>(2 * b));
  std::vector<Var> parts;
  for (int v = 0; v < 2; ++v) {
    patchmix::MixPlan plan = patchmix::make_plan(partner, static_cast<int>(p), cfg.train.mix_beta, rng);
    patchmix::assign_alpha(plan, attention.middleRows(v * b, b));
    const Var anchor = ad::slice_rows(emb, v * b * p, b * p);
    std::vector<Index> idx(static_cast<std::size_t>(b * p));
    for (int i = 0; i < b; ++i) {
      for (Index j = 0; j < p; ++j) idx[static_cast<std::size_t>(i * p + j)] = partner[i] * p + j;
      out.partner_rows[static_cast<std::size_t>(v * b + i)] = v * b + partner[i];
    }
    parts.push_back(patchmix::mix_patch_embeddings(anchor, ad::gather_rows(anchor, idx), plan.beta));
    out.alpha.segment(v * b, b) = plan.alpha;
    out.beta_mean.segment(v * b, b) = plan.beta_mean;
  }
  out.r_sem = model.vit.forward_embeddings(ad::concat_rows(parts)).layer_cls.back();
  return out;
}

}  // namespace

Forward forward_batch(const Model& model, const StepInputs& in, const ad::Mat* masks, Rng& mix_rng) {
  const auto& cfg = model.config();
  const auto& t = cfg.train;
  Forward f;
  Var px = ad::constant(in.pixels);
  if (model.method() == Method::kVLPrompt) px = prompts::apply_boundary_spt(px, model.q_s, model.boundary, cfg.vit.channels);
  Var emb = model.vit.patchify(px);
  if (model.method() == Method::kHLPrompt) {
    if (masks == nullptr) throw ConfigError("forward_batch: HLPrompt needs foreground masks");
    emb = prompts::apply_semantic_spt(emb, *masks, model.q_fg);
  }
  const backbone::FeatureBundle fb = model.vit.forward_embeddings(emb);
  f.r_sem = fb.layer_cls.back();
  f.r_dom = fb.layer_cls[static_cast<std::size_t>(cfg.vit.dom_tap_layer)];
  const bool mi = mi_enabled(cfg);

  if (model.method() != Method::kVLPrompt) {
    f.sem_proj = model.sem_head(f.r_sem);
    if (t.use_domain_loss || mi) f.dom_proj = model.dom_head(f.r_dom);
    if (mi) {
      f.h_dom = f.dom_proj;
      f.h_sem = f.sem_proj;
    }
  } else {
    f.vis = ad::normalize_rows(model.vl_proj(f.r_sem));
    f.text_bank = prompts::text_bank(model.text_prompts, *model.text_encoder);
    if (mi) {
      f.h_dom = ad::normalize_rows(model.vl_proj(f.r_dom));
      f.h_sem = f.vis;
    }
  }
  if (t.use_patchmix) {
    MixedPass m = mixed_forward(model, emb, fb.last_attn_cls, in.labels, mix_rng);
    f.mix_r_sem = m.r_sem;
    f.alpha = std::move(m.alpha);
    f.beta_mean = std::move(m.beta_mean);
    f.mix_partner_rows = std::move(m.partner_rows);
  }
  return f;
}

LossTerms assemble_losses(const Model& model, const StepInputs& in, const Forward& f) {
  const auto& cfg = model.config();
  const auto& t = cfg.train;
  LossTerms out;
  auto add = [&](const std::string& name, const Var& v) { out.components.emplace_back(name, v); };
  const std::vector<int> labels2 = repeat_twice(in.labels);
  const int n2 = static_cast<int>(labels2.size());

  if (model.method() != Method::kVLPrompt) {
    const losses::SimGcdConfig sc{t.lambda, t.eps_s, t.tau, t.tau_sharpen};
    const auto s = losses::simgcd_loss(f.sem_proj, ad::normalize_rows(f.r_sem), model.sem_protos.weights(), in.labels, sc);
    add("sem_rc", s.weighted_rc);
    add("sem_delta", s.weighted_delta);
    if (t.use_domain_loss) {
      const losses::SimGcdConfig dc{t.lambda, t.eps_d, t.tau, t.tau_sharpen};
      const auto d = losses::simgcd_loss(f.dom_proj, ad::normalize_rows(f.r_dom), model.dom_protos.weights(),
                                         in.domain_labels, dc);
      add("dom_rc", d.weighted_rc);
      add("dom_delta", d.weighted_delta);
    }
    if (f.h_dom.defined()) {
      out.mi = losses::mi_estimate(f.h_dom, f.h_sem, model.disc, losses::shift_derangement(n2));
      add("mi", out.mi);
    }
    if (t.use_patchmix) {
      add("pm_rep", patchmix::pm_rep_loss(model.sem_head(f.mix_r_sem), f.alpha, t.tau));
      const Var unit = ad::normalize_rows(f.mix_r_sem);
      const Mat cos = unit.value() * unit_rows_value(model.pm_protos.weights()).transpose();
      const Mat q = patchmix::pm_soft_label(patchmix::pm_targets(labels2, swap_views(cos), t.tau_sharpen), f.alpha);
      add("pm_cls", patchmix::pm_cls_loss(unit, model.pm_protos.weights(), q, t.tau));
    }
  } else {
    const Var& e = f.text_bank;
    const Mat other = swap_views(f.vis.value() * e.value().transpose());
    const Mat targets = patchmix::pm_targets(labels2, other, cfg.model.tau_sharpen_vl);
    add("vl_cls", losses::vl_cls_loss(f.vis, e, targets, t.tau_vl));
    const Var probs = ad::softmax_rows(ad::scale(ad::matmul_nt(f.vis, e), 1.0 / t.tau_vl));
    add("vl_delta", ad::scale(losses::entropy_reg(probs), t.epsilon));
    if (f.h_dom.defined()) {
      out.mi = losses::mi_estimate(f.h_dom, f.h_sem, model.disc, losses::shift_derangement(n2));
      add("mi", ad::scale(out.mi, t.beta1));
    }
    // Text batch: class embedding for labelled rows, q-weighted bank otherwise.
    const Mat text_weights = patchmix::pm_targets(labels2, other, t.tau_text);
    const Var text_batch = ad::matmul(ad::constant(text_weights), e);
    if (t.beta2 != 0.0) add("vl_align", ad::scale(losses::vl_align_loss(f.vis, text_batch, t.tau_align), t.beta2));
    if (t.use_patchmix) {
      const Var vm = ad::normalize_rows(model.vl_proj(f.mix_r_sem));
      const Mat other_m = swap_views(vm.value() * e.value().transpose());
      const Mat q = patchmix::pm_soft_label(patchmix::pm_targets(labels2, other_m, cfg.model.tau_sharpen_vl), f.alpha);
      add("pm_cls", patchmix::pm_vl_cls_loss(vm, e, q, t.tau_vl));
      const Var mixed_text = patchmix::mix_text(text_batch, ad::gather_rows(text_batch, f.mix_partner_rows), f.beta_mean);
      add("pm_vl", patchmix::pm_vl_loss(vm, mixed_text, t.tau_align));
    }
  }
  out.total = out.components.front().second;
  for (std::size_t i = 1; i < out.components.size(); ++i) out.total = ad::add(out.total, out.components[i].second);
  return out;
}

Setup prepare(const data::Dataset& ds, const RunConfig& cfg, const Model& initial) {
  Setup s;
  s.split = data::split_dataset(ds.manifest, ds.manifest.split_spec);
  if (s.split.unlabelled.empty()) throw ConfigError("dataset has no unlabelled samples");
  const auto n = static_cast<long long>(s.split.labelled.size() + s.split.unlabelled.size());
  s.iterations_per_epoch = (n + cfg.train.batch_size - 1) / cfg.train.batch_size;
  s.t_prime = cfg.curriculum.effective_t_prime(cfg.train.epochs);

  curriculum::FeatureFn fn;
  if (cfg.curriculum.kind == curriculum::DomainRepKind::kBackboneFeature) {
    const int tap = cfg.vit.dom_tap_layer;
    fn = [&initial, tap](const Mat& images) {
      ad::NoGradGuard guard;
      return Mat(initial.vit.forward(ad::constant(images)).layer_cls[static_cast<std::size_t>(tap)].value());
    };
  }
  const Mat lab = curriculum::domain_representation(ds, s.split.labelled, cfg.curriculum.kind, fn);
  const Mat unl = curriculum::domain_representation(ds, s.split.unlabelled, cfg.curriculum.kind, fn);
  const auto km = curriculum::ss_kmeans(lab, unl);
  curriculum::Schedule sched = cfg.curriculum.schedule;
  sched.t_prime = s.t_prime;
  s.curriculum = curriculum::build_state(s.split.labelled, s.split.unlabelled, km, sched, cfg.curriculum.kind);
  return s;
}

StepInputs next_batch(const data::Dataset& ds, const RunConfig& cfg, const Setup& setup, int epoch,
                      long long iteration, Rng& batch_rng) {
  const auto& unl = setup.split.unlabelled;
  std::vector<double> w(unl.size(), 1.0);
  if (cfg.train.use_curriculum) {
    for (std::size_t i = 0; i < unl.size(); ++i) w[i] = curriculum::curriculum_weight(unl[i], epoch, setup.curriculum);
  }
  const curriculum::Batch b = curriculum::draw_batch(setup.split.labelled, unl, w, cfg.train.batch_size, batch_rng);
  StepInputs in;
  in.epoch = epoch;
  in.iteration = iteration;
  in.with_replacement = b.with_replacement;
  in.ids = b.labelled;
  in.ids.insert(in.ids.end(), b.unlabelled.begin(), b.unlabelled.end());
  for (auto id : b.labelled) {
    in.labels.push_back(ds.manifest.records[static_cast<std::size_t>(id)].class_id);
    in.domain_labels.push_back(0);
  }
  for (auto id : b.unlabelled) {
    in.labels.push_back(-1);
    const int dl = setup.curriculum.domain_label(id);
    in.domain_labels.push_back(dl);
    in.n_domain_b += dl;
  }
  const std::uint64_t aug_seed = derive_seed(cfg.seed, {tag(Stream::kAugment)});
  const Mat v0 = render_views(ds, in.ids, cfg.augment, aug_seed, 0, epoch, cfg.workers);
  const Mat v1 = render_views(ds, in.ids, cfg.augment, aug_seed, 1, epoch, cfg.workers);
  in.pixels.resize(2 * v0.rows(), v0.cols());
  in.pixels.topRows(v0.rows()) = v0;
  in.pixels.bottomRows(v1.rows()) = v1;
  return in;
}

std::string phase_name(const RunConfig& cfg, long long iteration) {
  if (!is_prompt_method(cfg.method) || !cfg.train.use_phases) return "joint";
  const auto initial = cfg.method == Method::kHLPrompt ? prompts::Phase::kPrompt : prompts::Phase::kModel;
  return prompts::to_string(prompts::phase_schedule(iteration, cfg.train.k, initial));
}

std::vector<Group> active_groups(const RunConfig& cfg, long long iteration) {
  const std::string phase = phase_name(cfg, iteration);
  std::vector<Group> model_groups = {Group::kEncoder, Group::kHeads};
  if (cfg.method == Method::kVLPrompt) {
    model_groups.push_back(Group::kTextPrompt);
  } else {
    model_groups.push_back(Group::kPrototypes);
  }
  std::vector<Group> prompt_groups;
  if (cfg.train.train_prompts && is_prompt_method(cfg.method)) prompt_groups.push_back(Group::kSpatialPrompt);
  if (phase == "model") return model_groups;
  if (phase == "prompt") return prompt_groups;
  model_groups.insert(model_groups.end(), prompt_groups.begin(), prompt_groups.end());
  return model_groups;
}

bool discriminator_active(const RunConfig& cfg, long long iteration) {
  return mi_enabled(cfg) && phase_name(cfg, iteration) != "prompt";
}

double group_lr(const RunConfig& cfg, Group g, long long iteration, long long total_iterations) {
  double factor = 1.0;
  if (cfg.train.cosine_lr && total_iterations > 0) {
    factor = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(iteration) / total_iterations));
  }
  switch (g) {
    case Group::kEncoder: return cfg.train.lr * cfg.train.backbone_lr_scale * factor;
    case Group::kSpatialPrompt: return cfg.train.lr_prompt * factor;
    default: return cfg.train.lr * factor;
  }
}

json StepRecord::to_json() const {
  json c = json::object();
  for (const auto& [k, v] : components) c[k] = v;
  json j = {{"epoch", epoch},         {"iteration", iteration},   {"phase", phase},
            {"lr", lr},               {"components", c},          {"total", total},
            {"grad_norm", grad_norm}, {"with_replacement", with_replacement}, {"n_domain_b", n_domain_b}};
  if (mi_disc_before) j["mi_disc_before"] = *mi_disc_before;
  if (mi_disc_after) j["mi_disc_after"] = *mi_disc_after;
  return j;
}

TrainResult train(const data::Dataset& ds, const RunConfig& cfg, const Hooks& hooks) {
  cfg.validate();
  TrainResult res;
  res.model = std::make_unique<Model>(cfg, ds.manifest.K);
  Model& model = *res.model;
  const Setup setup = prepare(ds, cfg, model);
  res.curriculum = setup.curriculum;
  res.iterations_per_epoch = setup.iterations_per_epoch;

  std::vector<Slot> descent, ascent;
  for (auto& s : model.slots()) (s.group == Group::kDiscriminator ? ascent : descent).push_back(s);
  Sgd opt(descent, cfg.train.momentum, cfg.train.weight_decay);
  Sgd disc_opt(ascent, cfg.train.disc_momentum, cfg.train.weight_decay);
  Rng batch_rng(derive_seed(cfg.seed, {tag(Stream::kBatch)}));

  long long total = static_cast<long long>(cfg.train.epochs) * setup.iterations_per_epoch;
  if (cfg.max_steps >= 0) total = std::min(total, cfg.max_steps);

  long long it = 0;
  for (int epoch = 0; epoch < cfg.train.epochs && it < total; ++epoch) {
    for (long long b = 0; b < setup.iterations_per_epoch && it < total; ++b, ++it) {
      StepInputs in = next_batch(ds, cfg, setup, epoch, it, batch_rng);
      if (hooks.before_step) hooks.before_step(in, model);
      Mat masks;
      if (model.method() == Method::kHLPrompt) {
        masks = model.foreground_masks(in.pixels, cfg.workers);
        res.mask_computations += in.pixels.rows();
      }
      Rng mix_rng(derive_seed(cfg.seed, {tag(Stream::kMixPlan), static_cast<std::uint64_t>(it)}));
      const Forward fwd = forward_batch(model, in, masks.size() ? &masks : nullptr, mix_rng);

      StepRecord rec;
      rec.epoch = epoch;
      rec.iteration = it;
      rec.phase = phase_name(cfg, it);
      rec.with_replacement = in.with_replacement;
      rec.n_domain_b = in.n_domain_b;
      auto lr = [&](Group g) { return group_lr(cfg, g, it, total); };

      if (fwd.h_dom.defined() && discriminator_active(cfg, it)) {
        const Var hd = ad::constant(fwd.h_dom.value()), hs = ad::constant(fwd.h_sem.value());
        const auto perm = losses::shift_derangement(static_cast<int>(hd.rows()));
        rec.mi_disc_before = losses::mi_estimate(hd, hs, model.disc, perm).item();
        for (int k = 0; k < cfg.train.mi_disc_steps; ++k) {
          disc_opt.zero_grad();
          losses::mi_estimate(hd, hs, model.disc, perm).backward();
          disc_opt.step({Group::kDiscriminator}, lr, cfg.train.grad_clip, /*ascend=*/true);
        }
        ad::NoGradGuard guard;
        rec.mi_disc_after = losses::mi_estimate(hd, hs, model.disc, perm).item();
      }

      const LossTerms terms = assemble_losses(model, in, fwd);
      rec.total = terms.total.item();
      for (const auto& [name, v] : terms.components) rec.components.emplace_back(name, v.item());
      if (!std::isfinite(rec.total)) {
        throw NonFiniteLoss("non-finite loss at iteration " + std::to_string(it) + ": " + rec.to_json().dump());
      }
      opt.zero_grad();
      disc_opt.zero_grad();
      terms.total.backward();
      const auto active = active_groups(cfg, it);
      for (Group g : active) rec.lr[to_string(g)] = lr(g);
      rec.grad_norm = opt.step(active, lr, cfg.train.grad_clip);
      res.history.push_back(rec);
      if (hooks.after_step) hooks.after_step(rec, model);
    }
  }
  return res;
}

namespace {
TrainResult train_checked(const data::Dataset& ds, const RunConfig& cfg, const Hooks& hooks, Method m) {
  if (cfg.method != m) throw ConfigError("config method is " + to_string(cfg.method) + ", expected " + to_string(m));
  return train(ds, cfg, hooks);
}
}  // namespace

TrainResult train_hilo(const data::Dataset& ds, const RunConfig& cfg, const Hooks& hooks) {
  return train_checked(ds, cfg, hooks, Method::kHiLo);
}
TrainResult train_hlprompt(const data::Dataset& ds, const RunConfig& cfg, const Hooks& hooks) {
  return train_checked(ds, cfg, hooks, Method::kHLPrompt);
}
TrainResult train_vlprompt(const data::Dataset& ds, const RunConfig& cfg, const Hooks& hooks) {
  return train_checked(ds, cfg, hooks, Method::kVLPrompt);
}

void write_history(const std::filesystem::path& path, const std::vector<StepRecord>& history) {
  std::string out;
  for (const auto& r : history) out += r.to_json().dump() + "\n";
  io::write_file_atomic(path, out);
}

std::string content_hash(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

void save_checkpoint(const std::filesystem::path& dir, const Model& model, const json& extra) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::string bytes;
  json tensors = json::array();
  for (const auto& s : model.slots()) {
    const Mat& v = s.var.value();
    const std::uint64_t dims[] = {static_cast<std::uint64_t>(v.rows()), static_cast<std::uint64_t>(v.cols())};
    tensors.push_back({{"name", s.name}, {"group", to_string(s.group)}, {"offset", bytes.size()}, {"dims", dims}});
    bytes += io::encode_blob(dims, std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
  }
  json side = {{"format", "gcdt-checkpoint"},
               {"version", 1},
               {"method", to_string(model.method())},
               {"num_classes", model.num_classes()},
               {"tensor_file", "checkpoint.gcdt"},
               {"tensor_hash", content_hash(bytes)},
               {"config", to_json(model.config())},
               {"tensors", tensors}};
  if (extra.is_object()) {
    for (auto it = extra.begin(); it != extra.end(); ++it) side[it.key()] = *it;
  }
  io::write_file_atomic(dir / "checkpoint.gcdt", bytes);
  io::write_file_atomic(dir / "checkpoint.json", side.dump(2));
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  LoadedCheckpoint out;
  const std::string side_text = io::read_file(dir / "checkpoint.json");
  out.sidecar = json::parse(side_text, nullptr, false);
  if (out.sidecar.is_discarded() || !out.sidecar.is_object()) {
    throw FormatError(FormatErrorKind::kMalformedJson, (dir / "checkpoint.json").string());
  }
  const std::string bytes = io::read_file(dir / "checkpoint.gcdt");
  out.id = content_hash(bytes);
  try {
    if (out.sidecar.at("format") != "gcdt-checkpoint") {
      throw FormatError(FormatErrorKind::kInconsistentManifest, "not a checkpoint sidecar");
    }
    const RunConfig cfg = run_config_from_json(out.sidecar.at("config"));
    out.model = std::make_unique<Model>(cfg, out.sidecar.at("num_classes").get<int>());
    std::map<std::string, json> entries;
    for (const auto& t : out.sidecar.at("tensors")) entries[t.at("name").get<std::string>()] = t;
    auto slots = out.model->slots();
    if (entries.size() != slots.size()) {
      throw FormatError(FormatErrorKind::kInconsistentManifest, "tensor count does not match the model");
    }
    for (auto& s : slots) {
      auto it = entries.find(s.name);
      if (it == entries.end()) throw FormatError(FormatErrorKind::kInconsistentManifest, "missing tensor " + s.name);
      const auto offset = it->second.at("offset").get<std::size_t>();
      if (offset >= bytes.size()) throw FormatError(FormatErrorKind::kTruncated, "tensor " + s.name + " past end of file");
      const io::TensorBlob blob = io::decode_blob(std::span<const char>(bytes.data() + offset, bytes.size() - offset));
      if (blob.dtype != io::Dtype::kF64 || blob.dims.size() != 2 ||
          blob.dims[0] != static_cast<std::uint64_t>(s.var.rows()) ||
          blob.dims[1] != static_cast<std::uint64_t>(s.var.cols())) {
        throw FormatError(FormatErrorKind::kInconsistentManifest, "tensor " + s.name + " has the wrong shape or dtype");
      }
      s.var.mutable_value() = Eigen::Map<const Mat>(blob.f64.data(), s.var.rows(), s.var.cols());
    }
  } catch (const json::exception& e) {
    throw FormatError(FormatErrorKind::kMalformedJson, e.what());
  }
  return out;
}

int workers_from_env(int fallback) {
  const char* v = std::getenv("GCD_NUM_WORKERS");
  if (v == nullptr || *v == '\0') return fallback;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError("GCD_NUM_WORKERS must be a positive integer");
  return static_cast<int>(n);
}

}  // namespace gcd::trainer
