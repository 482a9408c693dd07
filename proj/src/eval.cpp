#include "gcd/eval.hpp"

#include <algorithm>
#include <limits>

#include "gcd/errors.hpp"

namespace gcd::eval {

using nlohmann::json;

std::vector<int> hungarian(const ad::Mat& cost) {
  const int n = static_cast<int>(cost.rows());
  if (n == 0 || cost.cols() != n) throw ConfigError("hungarian: cost matrix must be square and non-empty");
  // Shortest augmenting paths with row/column potentials; 1-based internally.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n);
  for (int j = 1; j <= n; ++j) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

Matching hungarian_acc(std::span<const int> y_true, std::span<const int> y_pred, int num_classes) {
  if (y_true.empty()) throw ConfigError("hungarian_acc: empty input");
  if (y_true.size() != y_pred.size()) throw ConfigError("hungarian_acc: label and prediction lengths differ");
  if (num_classes < 1) throw ConfigError("hungarian_acc: need at least one class");
  int k = num_classes;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i] < 0 || y_true[i] >= num_classes) throw ConfigError("hungarian_acc: label out of range");
    if (y_pred[i] < 0) throw ConfigError("hungarian_acc: negative prediction");
    k = std::max(k, y_pred[i] + 1);
  }
  ad::Mat counts = ad::Mat::Zero(k, k);  // (cluster, class)
  for (std::size_t i = 0; i < y_true.size(); ++i) counts(y_pred[i], y_true[i]) += 1.0;
  const ad::Mat cost = counts.maxCoeff() - counts.array();
  Matching m;
  m.assignment = hungarian(cost);
  double hit = 0.0;
  for (int c = 0; c < k; ++c) hit += counts(c, m.assignment[c]);
  m.acc = hit / static_cast<double>(y_true.size());
  return m;
}

namespace {

json cell_json(const Cell& c) {
  json j = {{"count", c.count}};
  j["acc"] = c.acc ? json(*c.acc) : json(nullptr);
  return j;
}

json row_json(const SplitRow& r) { return {{"all", cell_json(r.all)}, {"old", cell_json(r.old)}, {"new", cell_json(r.novel)}}; }

struct Tally {
  std::size_t hit = 0, n = 0;
  void add(bool ok) {
    ++n;
    hit += ok ? 1 : 0;
  }
  Cell cell() const {
    Cell c;
    c.count = n;
    if (n > 0) c.acc = static_cast<double>(hit) / static_cast<double>(n);
    return c;
  }
};

}  // namespace

json EvalReport::to_json() const {
  json d = json::object();
  for (const auto& [id, row] : domains) d[std::to_string(id)] = row_json(row);
  return {{"schema", kReportSchema}, {"method", method},     {"checkpoint_id", checkpoint_id},
          {"config_hash", config_hash}, {"overall", row_json(overall)}, {"domains", d},
          {"assignment", assignment}};
}

EvalReport split_accuracies(std::span<const int> y_true, std::span<const int> y_pred, std::span<const int> domain_ids,
                            std::span<const int> base_classes, int num_classes) {
  if (domain_ids.size() != y_true.size()) throw ConfigError("split_accuracies: domain ids length differs");
  const Matching m = hungarian_acc(y_true, y_pred, num_classes);
  auto is_base = [&](int c) { return std::find(base_classes.begin(), base_classes.end(), c) != base_classes.end(); };

  struct RowTally {
    Tally all, old, novel;
  };
  RowTally overall;
  std::map<int, RowTally> per;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const bool ok = m.assignment[static_cast<std::size_t>(y_pred[i])] == y_true[i];
    const bool base = is_base(y_true[i]);
    for (RowTally* r : {&overall, &per[domain_ids[i]]}) {
      r->all.add(ok);
      (base ? r->old : r->novel).add(ok);
    }
  }
  EvalReport rep;
  rep.assignment = m.assignment;
  rep.overall = {overall.all.cell(), overall.old.cell(), overall.novel.cell()};
  for (const auto& [id, r] : per) rep.domains[id] = {r.all.cell(), r.old.cell(), r.novel.cell()};
  return rep;
}

std::vector<int> predict(const trainer::Model& model, const data::Dataset& ds, std::span<const std::int64_t> ids,
                         bool use_prompts) {
  const ad::Mat scores = model.class_scores(trainer::clean_pixels(ds, ids), use_prompts);
  std::vector<int> out(ids.size());
  for (ad::Index i = 0; i < scores.rows(); ++i) {
    ad::Index best;
    scores.row(i).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

EvalReport evaluate_model(const trainer::Model& model, const data::Dataset& ds, bool use_prompts) {
  if (model.num_classes() != ds.manifest.K) throw ConfigError("model and dataset disagree on the number of classes");
  const data::Split split = data::split_dataset(ds.manifest, ds.manifest.split_spec);
  const auto pred = predict(model, ds, split.unlabelled, use_prompts);
  std::vector<int> truth, dom;
  for (auto id : split.unlabelled) {
    const auto& r = ds.manifest.records[static_cast<std::size_t>(id)];
    truth.push_back(r.class_id);
    dom.push_back(r.domain_id);
  }
  EvalReport rep = split_accuracies(truth, pred, dom, ds.manifest.split_spec.base_classes, ds.manifest.K);
  rep.method = to_string(model.method());
  rep.config_hash = trainer::content_hash(to_json(model.config()).dump());
  return rep;
}

EvalReport evaluate_checkpoint(const trainer::LoadedCheckpoint& ckpt, const data::Dataset& ds,
                               std::optional<Method> expected) {
  if (expected && *expected != ckpt.model->method()) {
    throw ConfigError("checkpoint was trained with " + to_string(ckpt.model->method()) + ", not " +
                      to_string(*expected));
  }
  EvalReport rep = evaluate_model(*ckpt.model, ds);
  rep.checkpoint_id = ckpt.id;
  return rep;
}

}  // namespace gcd::eval
