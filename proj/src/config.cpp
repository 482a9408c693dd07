#include "gcd/config.hpp"

#include <cmath>
#include <functional>

#include "gcd/errors.hpp"

namespace gcd {

using nlohmann::json;

Method parse_method(const std::string& name) {
  if (name == "hilo") return Method::kHiLo;
  if (name == "hlprompt") return Method::kHLPrompt;
  if (name == "vlprompt") return Method::kVLPrompt;
  throw ConfigError("unknown method '" + name + "' (valid: " + kValidMethods + ")");
}

std::string to_string(Method m) {
  switch (m) {
    case Method::kHiLo: return "hilo";
    case Method::kHLPrompt: return "hlprompt";
    case Method::kVLPrompt: return "vlprompt";
  }
  return "?";
}

int CurriculumConfig::effective_t_prime(int epochs) const {
  if (!scale_t_prime) return schedule.t_prime;
  return static_cast<int>(std::lround(static_cast<double>(schedule.t_prime) * epochs / reference_epochs));
}

void RunConfig::validate() const {
  train.validate();
  vit.validate();
  affinity.validate();
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (train.views != 2) throw ConfigError("training uses exactly two views per image");
  if (model.proj_dim < 1) throw ConfigError("model.proj_dim must be >= 1");
  if (model.tau_sharpen_vl <= 0) throw ConfigError("model.tau_sharpen_vl must be > 0");
  if (model.prompt_init_scale < 0) throw ConfigError("model.prompt_init_scale must be >= 0");
  if (model.border_width < 0 || model.border_width > (vit.patch_size + 1) / 2) {
    throw ConfigError("model.border_width out of range for the patch size");
  }
  if (curriculum.reference_epochs < 1) throw ConfigError("curriculum.reference_epochs must be >= 1");
  const auto& s = curriculum.schedule;
  if (s.r0 < 0 || s.r_prime < 0 || s.t_prime < 0) throw ConfigError("curriculum schedule values must be >= 0");
  if (method == Method::kVLPrompt) {
    if (text.out_dim < 1 || text.token_dim < 1) throw ConfigError("text encoder dims must be >= 1");
    if (text_prompt.context_tokens + text_prompt.tokens_per_class > text.max_len) {
      throw ConfigError("text prompt longer than the text encoder's max_len");
    }
  }
}

RunConfig default_config(Method method) {
  RunConfig c;
  c.method = method;
  if (method == Method::kVLPrompt) {
    c.train.weight_decay = 5e-4;
    c.train.use_domain_loss = false;
  }
  return c;
}

namespace {

json train_json(const losses::TrainConfig& t) {
  return {{"lambda", t.lambda},
          {"eps_s", t.eps_s},
          {"eps_d", t.eps_d},
          {"epsilon", t.epsilon},
          {"tau", t.tau},
          {"tau_sharpen", t.tau_sharpen},
          {"tau_vl", t.tau_vl},
          {"tau_text", t.tau_text},
          {"tau_align", t.tau_align},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"k", t.k},
          {"lr", t.lr},
          {"lr_prompt", t.lr_prompt},
          {"backbone_lr_scale", t.backbone_lr_scale},
          {"views", t.views},
          {"mi_disc_steps", t.mi_disc_steps},
          {"momentum", t.momentum},
          {"disc_momentum", t.disc_momentum},
          {"weight_decay", t.weight_decay},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"grad_clip", t.grad_clip},
          {"mix_beta", t.mix_beta},
          {"use_mi", t.use_mi},
          {"use_patchmix", t.use_patchmix},
          {"use_curriculum", t.use_curriculum},
          {"use_domain_loss", t.use_domain_loss},
          {"use_phases", t.use_phases},
          {"train_prompts", t.train_prompts},
          {"cosine_lr", t.cosine_lr}};
}

losses::TrainConfig train_from(const json& j) {
  losses::TrainConfig t;
  j.at("lambda").get_to(t.lambda);
  j.at("eps_s").get_to(t.eps_s);
  j.at("eps_d").get_to(t.eps_d);
  j.at("epsilon").get_to(t.epsilon);
  j.at("tau").get_to(t.tau);
  j.at("tau_sharpen").get_to(t.tau_sharpen);
  j.at("tau_vl").get_to(t.tau_vl);
  j.at("tau_text").get_to(t.tau_text);
  j.at("tau_align").get_to(t.tau_align);
  j.at("beta1").get_to(t.beta1);
  j.at("beta2").get_to(t.beta2);
  j.at("k").get_to(t.k);
  j.at("lr").get_to(t.lr);
  j.at("lr_prompt").get_to(t.lr_prompt);
  j.at("backbone_lr_scale").get_to(t.backbone_lr_scale);
  j.at("views").get_to(t.views);
  j.at("mi_disc_steps").get_to(t.mi_disc_steps);
  j.at("momentum").get_to(t.momentum);
  j.at("disc_momentum").get_to(t.disc_momentum);
  j.at("weight_decay").get_to(t.weight_decay);
  j.at("epochs").get_to(t.epochs);
  j.at("batch_size").get_to(t.batch_size);
  j.at("grad_clip").get_to(t.grad_clip);
  j.at("mix_beta").get_to(t.mix_beta);
  j.at("use_mi").get_to(t.use_mi);
  j.at("use_patchmix").get_to(t.use_patchmix);
  j.at("use_curriculum").get_to(t.use_curriculum);
  j.at("use_domain_loss").get_to(t.use_domain_loss);
  j.at("use_phases").get_to(t.use_phases);
  j.at("train_prompts").get_to(t.train_prompts);
  j.at("cosine_lr").get_to(t.cosine_lr);
  return t;
}

json vit_json(const backbone::VitConfig& v) {
  return {{"image_size", v.image_size}, {"patch_size", v.patch_size},       {"embed_dim", v.embed_dim},
          {"depth", v.depth},           {"heads", v.heads},                 {"mlp_ratio", v.mlp_ratio},
          {"channels", v.channels},     {"ncut_tap_layer", v.ncut_tap_layer}, {"dom_tap_layer", v.dom_tap_layer}};
}

backbone::VitConfig vit_from(const json& j) {
  backbone::VitConfig v;
  j.at("image_size").get_to(v.image_size);
  j.at("patch_size").get_to(v.patch_size);
  j.at("embed_dim").get_to(v.embed_dim);
  j.at("depth").get_to(v.depth);
  j.at("heads").get_to(v.heads);
  j.at("mlp_ratio").get_to(v.mlp_ratio);
  j.at("channels").get_to(v.channels);
  j.at("ncut_tap_layer").get_to(v.ncut_tap_layer);
  j.at("dom_tap_layer").get_to(v.dom_tap_layer);
  return v;
}

// Integer-valued JSON numbers are accepted where a float is expected.
bool compatible(const json& base, const json& value) {
  if (base.is_number_float()) return value.is_number();
  if (base.is_number_integer()) return value.is_number_integer();
  if (base.is_boolean()) return value.is_boolean();
  if (base.is_string()) return value.is_string();
  if (base.is_object()) return value.is_object();
  return base.type() == value.type();
}

void collect_paths(const json& doc, const std::string& prefix, const std::string& leaf, std::vector<std::string>& out) {
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it.key() == leaf) out.push_back(path);
    if (it->is_object()) collect_paths(*it, path, leaf, out);
  }
}

}  // namespace

json to_json(const RunConfig& c) {
  return {
      {"method", to_string(c.method)},
      {"seed", c.seed},
      {"workers", c.workers},
      {"max_steps", c.max_steps},
      {"train", train_json(c.train)},
      {"vit", vit_json(c.vit)},
      {"text",
       {{"token_dim", c.text.token_dim},
        {"out_dim", c.text.out_dim},
        {"depth", c.text.depth},
        {"heads", c.text.heads},
        {"max_len", c.text.max_len}}},
      {"text_prompt",
       {{"context_tokens", c.text_prompt.context_tokens},
        {"tokens_per_class", c.text_prompt.tokens_per_class},
        {"init_scale", c.text_prompt.init_scale}}},
      {"affinity",
       {{"sigma", c.affinity.sigma}, {"radius", c.affinity.radius}, {"quantile_sweep", c.affinity.quantile_sweep}}},
      {"model",
       {{"proj_dim", c.model.proj_dim},
        {"border_width", c.model.border_width},
        {"prompt_init_scale", c.model.prompt_init_scale},
        {"tau_sharpen_vl", c.model.tau_sharpen_vl}}},
      {"curriculum",
       {{"preset", c.curriculum.preset},
        {"r0", c.curriculum.schedule.r0},
        {"r_prime", c.curriculum.schedule.r_prime},
        {"t_prime", c.curriculum.schedule.t_prime},
        {"kind", curriculum::to_string(c.curriculum.kind)},
        {"scale_t_prime", c.curriculum.scale_t_prime},
        {"reference_epochs", c.curriculum.reference_epochs}}},
      {"augment",
       {{"max_shift", c.augment.max_shift},
        {"flip_prob", c.augment.flip_prob},
        {"brightness", c.augment.brightness},
        {"enabled", c.augment.enabled}}},
  };
}

RunConfig run_config_from_json(const json& j) {
  try {
    RunConfig c;
    c.method = parse_method(j.at("method").get<std::string>());
    j.at("seed").get_to(c.seed);
    j.at("workers").get_to(c.workers);
    j.at("max_steps").get_to(c.max_steps);
    c.train = train_from(j.at("train"));
    c.vit = vit_from(j.at("vit"));
    const auto& t = j.at("text");
    t.at("token_dim").get_to(c.text.token_dim);
    t.at("out_dim").get_to(c.text.out_dim);
    t.at("depth").get_to(c.text.depth);
    t.at("heads").get_to(c.text.heads);
    t.at("max_len").get_to(c.text.max_len);
    const auto& tp = j.at("text_prompt");
    tp.at("context_tokens").get_to(c.text_prompt.context_tokens);
    tp.at("tokens_per_class").get_to(c.text_prompt.tokens_per_class);
    tp.at("init_scale").get_to(c.text_prompt.init_scale);
    const auto& a = j.at("affinity");
    a.at("sigma").get_to(c.affinity.sigma);
    a.at("radius").get_to(c.affinity.radius);
    a.at("quantile_sweep").get_to(c.affinity.quantile_sweep);
    const auto& m = j.at("model");
    m.at("proj_dim").get_to(c.model.proj_dim);
    m.at("border_width").get_to(c.model.border_width);
    m.at("prompt_init_scale").get_to(c.model.prompt_init_scale);
    m.at("tau_sharpen_vl").get_to(c.model.tau_sharpen_vl);
    const auto& cu = j.at("curriculum");
    cu.at("preset").get_to(c.curriculum.preset);
    cu.at("r0").get_to(c.curriculum.schedule.r0);
    cu.at("r_prime").get_to(c.curriculum.schedule.r_prime);
    cu.at("t_prime").get_to(c.curriculum.schedule.t_prime);
    c.curriculum.kind = curriculum::parse_domain_rep_kind(cu.at("kind").get<std::string>());
    cu.at("scale_t_prime").get_to(c.curriculum.scale_t_prime);
    cu.at("reference_epochs").get_to(c.curriculum.reference_epochs);
    const auto& au = j.at("augment");
    au.at("max_shift").get_to(c.augment.max_shift);
    au.at("flip_prob").get_to(c.augment.flip_prob);
    au.at("brightness").get_to(c.augment.brightness);
    au.at("enabled").get_to(c.augment.enabled);
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
}

void merge_strict(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError("config" + (where.empty() ? "" : " '" + where + "'") + " must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string path = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + path + "'");
    json& slot = base[it.key()];
    if (!compatible(slot, *it)) throw ConfigError("config key '" + path + "' has the wrong type");
    if (slot.is_object()) {
      merge_strict(slot, *it, path);
    } else {
      slot = *it;
    }
  }
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  std::string path = key;
  if (key.find('.') == std::string::npos && !doc.contains(key)) {
    std::vector<std::string> hits;
    collect_paths(doc, "", key, hits);
    if (hits.empty()) throw ConfigError("unknown config key '" + key + "'");
    if (hits.size() > 1) {
      std::string all;
      for (const auto& h : hits) all += (all.empty() ? "" : ", ") + h;
      throw ConfigError("ambiguous config key '" + key + "' (use one of: " + all + ")");
    }
    path = hits.front();
  }
  // Build the nested patch {a: {b: value}} and merge it.
  json patch = value;
  std::size_t end = path.size();
  while (true) {
    const auto dot = path.rfind('.', end - 1);
    const std::string part = path.substr(dot == std::string::npos ? 0 : dot + 1, end - (dot == std::string::npos ? 0 : dot + 1));
    patch = json{{part, patch}};
    if (dot == std::string::npos) break;
    end = dot;
  }
  merge_strict(doc, patch);
}

RunConfig resolve_config(Method method, const json& user, const std::vector<std::string>& overrides) {
  json doc = to_json(default_config(method));
  if (!user.is_null()) merge_strict(doc, user);
  for (const auto& o : overrides) apply_override(doc, o);
  if (doc.at("method").get<std::string>() != to_string(method)) {
    throw ConfigError("config method '" + doc.at("method").get<std::string>() + "' conflicts with --method " +
                      to_string(method));
  }
  // A named preset supplies the schedule; explicit values need preset "custom".
  auto& cu = doc.at("curriculum");
  const std::string name = cu.at("preset").get<std::string>();
  if (name != "custom") {
    const curriculum::Schedule want = curriculum::preset(name);
    const curriculum::Schedule dflt = default_config(method).curriculum.schedule;
    const curriculum::Schedule got{cu.at("r0").get<double>(), cu.at("r_prime").get<double>(), cu.at("t_prime").get<int>()};
    if (got == dflt) {
      cu["r0"] = want.r0;
      cu["r_prime"] = want.r_prime;
      cu["t_prime"] = want.t_prime;
    } else if (!(got == want)) {
      throw ConfigError("explicit curriculum schedule values require curriculum.preset=custom");
    }
  }
  RunConfig c = run_config_from_json(doc);
  c.validate();
  return c;
}

json to_json(const data::GenConfig& g) {
  return {{"name", g.name},
          {"K", g.K},
          {"n_per_class_per_domain", g.n_per_class_per_domain},
          {"image_shape",
           {{"channels", g.image_shape.channels}, {"height", g.image_shape.height}, {"width", g.image_shape.width}}},
          {"patch_size", g.patch_size},
          {"seed", g.seed},
          {"num_base_classes", g.num_base_classes},
          {"labelled_fraction", g.labelled_fraction}};
}

data::GenConfig gen_config_from_json(const json& user) {
  json doc = to_json(data::GenConfig{});
  if (!user.is_null()) merge_strict(doc, user);
  data::GenConfig g;
  doc.at("name").get_to(g.name);
  doc.at("K").get_to(g.K);
  doc.at("n_per_class_per_domain").get_to(g.n_per_class_per_domain);
  doc.at("image_shape").at("channels").get_to(g.image_shape.channels);
  doc.at("image_shape").at("height").get_to(g.image_shape.height);
  doc.at("image_shape").at("width").get_to(g.image_shape.width);
  doc.at("patch_size").get_to(g.patch_size);
  doc.at("seed").get_to(g.seed);
  doc.at("num_base_classes").get_to(g.num_base_classes);
  doc.at("labelled_fraction").get_to(g.labelled_fraction);
  return g;
}

}  // namespace gcd
