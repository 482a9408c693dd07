// gcd: generate synthetic data, train HiLo / HLPrompt / VLPrompt, evaluate.
//
// Exit codes: 0 ok, 1 I/O or format error, 2 usage or config error,
// 3 training aborted on a non-finite loss.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gcd/config.hpp"
#include "gcd/errors.hpp"
#include "gcd/eval.hpp"
#include "gcd/synthdata.hpp"
#include "gcd/tensor_io.hpp"
#include "gcd/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kOk = 0, kIo = 1, kUsage = 2, kNonFinite = 3;

json read_json_file(const std::string& path) {
  if (path.empty()) return nullptr;
  const std::string text = gcd::io::read_file(path);
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw gcd::ConfigError("config file " + path + " is not valid JSON");
  return j;
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

int gen_data(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed,
             const std::vector<std::string>& sets) {
  json doc = gcd::to_json(gcd::data::GenConfig{});
  const json user = read_json_file(config);
  if (!user.is_null()) gcd::merge_strict(doc, user);
  for (const auto& s : sets) gcd::apply_override(doc, s);
  gcd::data::GenConfig g = gcd::gen_config_from_json(doc);
  if (seed) g.seed = *seed;
  const gcd::data::Dataset ds = gcd::data::make_dataset(g);
  gcd::data::persist(ds, out);
  const auto split = gcd::data::split_dataset(ds.manifest, ds.manifest.split_spec);
  std::cout << "dataset " << ds.manifest.dataset_name << ": " << ds.size() << " images, K=" << ds.manifest.K << ", "
            << ds.manifest.image_shape.channels << "x" << ds.manifest.image_shape.height << "x"
            << ds.manifest.image_shape.width << ", labelled " << split.labelled.size() << ", unlabelled "
            << split.unlabelled.size() << " -> " << out << "\n";
  return kOk;
}

int train(const std::string& method_name, const std::string& config, const std::string& data_dir,
          const std::string& out, std::optional<std::uint64_t> seed, const std::vector<std::string>& sets) {
  const gcd::Method method = gcd::parse_method(method_name);
  std::vector<std::string> overrides = sets;
  if (seed) overrides.push_back("seed=" + std::to_string(*seed));
  gcd::RunConfig cfg = gcd::resolve_config(method, read_json_file(config), overrides);
  cfg.workers = gcd::trainer::workers_from_env(cfg.workers);
  const gcd::data::Dataset ds = gcd::data::load(data_dir);

  gcd::trainer::Hooks hooks;
  hooks.after_step = [&](const gcd::trainer::StepRecord& r, const gcd::trainer::Model&) {
    if (r.iteration % 50 == 0) std::cerr << "iter " << r.iteration << " epoch " << r.epoch << " loss " << r.total << "\n";
  };
  gcd::trainer::TrainResult res = gcd::trainer::train(ds, cfg, hooks);

  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw gcd::IoError("cannot create " + out + ": " + ec.message());
  gcd::trainer::save_checkpoint(out, *res.model,
                                {{"iterations", res.history.size()}, {"epochs", cfg.train.epochs}});
  gcd::trainer::write_history(fs::path(out) / "history.jsonl", res.history);
  gcd::io::write_file_atomic(fs::path(out) / "config.echo.json", gcd::to_json(cfg).dump(2));
  std::cout << "trained " << gcd::to_string(method) << " for " << res.history.size() << " steps; final loss "
            << (res.history.empty() ? 0.0 : res.history.back().total) << " -> " << out << "\n";
  return kOk;
}

int evaluate(const std::string& method_name, const std::string& data_dir, const std::string& ckpt_dir,
             const std::string& out) {
  std::optional<gcd::Method> expected;
  if (!method_name.empty()) expected = gcd::parse_method(method_name);
  const gcd::data::Dataset ds = gcd::data::load(data_dir);
  const auto ckpt = gcd::trainer::load_checkpoint(ckpt_dir);
  const gcd::eval::EvalReport rep = gcd::eval::evaluate_checkpoint(ckpt, ds, expected);
  const std::string text = rep.to_json().dump(2);
  std::ostream& msg = out == "-" ? std::cerr : std::cout;
  if (out == "-") {
    std::cout << text << "\n";
  } else {
    fs::path p(out);
    if (fs::is_directory(p)) p /= "report.json";
    gcd::io::write_file_atomic(p, text);
  }
  for (const auto& [id, row] : rep.domains) {
    msg << "domain " << id << ": All " << fmt(row.all.acc) << "  Old " << fmt(row.old.acc) << "  New "
        << fmt(row.novel.acc) << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generalized category discovery under domain shift: data, training, evaluation"};
  app.require_subcommand(1);

  std::string config, out, data_dir, method, checkpoint;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic two-domain glyph dataset");
  gen->add_option("--config", config, "JSON generator config");
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--seed", seed, "Generator seed");
  gen->add_option("--set", sets, "key=value override (repeatable)");

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--method", method, std::string("One of: ") + gcd::kValidMethods)->required();
  tr->add_option("--data", data_dir, "Dataset directory")->required();
  tr->add_option("--out", out, "Run directory")->required();
  tr->add_option("--config", config, "JSON run config");
  tr->add_option("--seed", seed, "Run seed");
  tr->add_option("--set", sets, "key=value override (repeatable; dotted or unique bare keys)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the unlabelled pool");
  ev->add_option("--data", data_dir, "Dataset directory")->required();
  ev->add_option("--checkpoint", checkpoint, "Run directory holding checkpoint.json")->required();
  ev->add_option("--method", method, "Expected method (checked against the checkpoint)");
  ev->add_option("--out", out, "Report path, directory, or - for stdout")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return gen_data(config, out, seed, sets);
    if (*tr) return train(method, config, data_dir, out, seed, sets);
    if (*ev) return evaluate(method, data_dir, checkpoint, out);
  } catch (const gcd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const gcd::NonFiniteLoss& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return kNonFinite;
  } catch (const gcd::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const gcd::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  }
  return kUsage;
}
