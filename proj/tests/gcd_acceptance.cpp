// Acceptance run: one PASS/FAIL line per criterion with the measured value and
// its pinned tolerance. Exit status is 0 only when every criterion passes.
//
//   gcd_acceptance [--only N[,N...]] [--seeds S] [--data DIR] [--known-fail N[,N...]]
//
// --known-fail lists criteria whose failure is documented; they still print
// FAIL, but the exit status ignores them. A listed criterion that passes is
// reported so the list can be trimmed.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "gcd/curriculum.hpp"
#include "gcd/eval.hpp"
#include "gcd/heads_losses.hpp"
#include "gcd/patchmix.hpp"
#include "gcd/prompts.hpp"
#include "gcd/trainer.hpp"
#include "grad_check.hpp"
#include "reference_loops.hpp"
#include "tiny.hpp"

using namespace gcd;
using testing::grad_check;
using testing::random_mat;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- 1 -------------------------------------------------------------------

Outcome gradient_suite() {
  using namespace losses;
  Rng rng(31);
  struct Probe {
    std::string name;
    std::function<ad::Var()> f;
    std::vector<ad::Var> leaves;
  };
  std::vector<Probe> probes;
  auto leaf = [&](ad::Index r, ad::Index c) { return ad::Var(random_mat(r, c, rng), true); };

  ad::Var a = leaf(1, 5), p = leaf(2, 5), n = leaf(3, 5);
  probes.push_back({"rep", [=] { return rep_loss(ad::normalize_rows(a), ad::normalize_rows(p), ad::normalize_rows(n), 0.4); },
                    {a, p, n}});
  ad::Var feats = leaf(6, 5);
  probes.push_back({"contrastive",
                    [=] {
                      const std::vector<int> anchors{0, 1, 2, 3, 4, 5};
                      const PositiveSets pos{{3}, {4}, {5}, {0}, {1}, {2}};
                      return contrastive_loss(ad::normalize_rows(feats), anchors, pos, 0.5);
                    },
                    {feats}});
  ad::Var f = leaf(4, 5), w = leaf(3, 5);
  const ad::Mat q = sharpen(random_mat(4, 3, rng), 1.0);
  probes.push_back({"cls", [=] { return cls_loss(ad::normalize_rows(f), w, q, 0.3); }, {f, w}});
  ad::Var logits = leaf(5, 4);
  probes.push_back({"delta", [=] { return entropy_reg(ad::softmax_rows(logits)); }, {logits}});

  ad::Var proj = leaf(8, 6), feat = leaf(8, 6), protos = leaf(4, 6);
  const std::vector<int> labels{0, 2, -1, -1};
  SimGcdConfig sc;
  sc.tau = 0.5;
  sc.tau_sharpen = 0.25;
  // Finite differences would also move the stop-gradient pseudo-labels, so the
  // full objective is probed on the projector input and the classifier path
  // with the unsupervised weight at zero.
  probes.push_back({"simgcd",
                    [=] {
                      return simgcd_loss(ad::normalize_rows(proj), ad::normalize_rows(feat), protos, labels, sc).total;
                    },
                    {proj}});
  SimGcdConfig sup = sc;
  sup.lambda = 0.0;
  probes.push_back({"simgcd(sup)",
                    [=] {
                      return simgcd_loss(ad::normalize_rows(proj), ad::normalize_rows(feat), protos, labels, sup).total;
                    },
                    {proj, feat, protos}});

  ad::Var hv = leaf(4, 6), ht = leaf(4, 6);
  Discriminator disc(6, 8, rng);
  nn::ParamList dp;
  disc.collect("d", dp);
  std::vector<ad::Var> mi_leaves{hv, ht};
  for (auto& x : dp) mi_leaves.push_back(x.var);
  const auto perm = shift_derangement(4);
  probes.push_back({"mi", [=] { return mi_estimate(hv, ht, disc, perm); }, mi_leaves});

  ad::Var v = leaf(4, 6), e = leaf(3, 6), t = leaf(4, 6);
  probes.push_back({"vl_cls", [=] { return vl_cls_loss(ad::normalize_rows(v), ad::normalize_rows(e), q, 0.2); }, {v, e}});
  probes.push_back({"vl_align", [=] { return vl_align_loss(ad::normalize_rows(v), ad::normalize_rows(t), 0.5); }, {v, t}});

  ad::Var ma = leaf(6, 5), mb = leaf(6, 5), mw = leaf(4, 5), mt = leaf(6, 5);
  ad::Mat beta(2, 3);
  for (ad::Index i = 0; i < beta.size(); ++i) beta.data()[i] = rng.uniform();
  ad::Vec alpha(6);
  alpha << 0.1, 0.4, 0.9, 0.5, 0.3, 1.0;
  const ad::Mat soft = patchmix::pm_soft_label(sharpen(random_mat(6, 4, rng), 0.5), ad::Vec::Constant(6, 0.7));
  auto mixed = [=] { return ad::normalize_rows(patchmix::mix_patch_embeddings(ma, mb, beta)); };
  probes.push_back({"pm_mix+rep", [=] { return patchmix::pm_rep_loss(mixed(), alpha, 0.4); }, {ma, mb}});
  probes.push_back({"pm_cls", [=] { return patchmix::pm_cls_loss(mixed(), mw, soft, 0.3); }, {ma, mb, mw}});
  probes.push_back({"pm_vl_cls", [=] { return patchmix::pm_vl_cls_loss(mixed(), ad::normalize_rows(mw), soft, 0.3); },
                    {ma, mb, mw}});
  probes.push_back({"pm_vl",
                    [=] { return patchmix::pm_vl_loss(mixed(), patchmix::mix_text(mt, mb, ad::Vec::Constant(6, 0.3))); },
                    {ma, mb, mt}});

  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  int fewest = 1 << 30;
  std::string worst_name;
  for (auto& pr : probes) {
    const auto r = grad_check(pr.f, pr.leaves, 10);
    fewest = std::min(fewest, r.probes);
    if (r.worst_rel >= worst) {
      worst = r.worst_rel;
      worst_name = pr.name;
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  Outcome o;
  o.pass = worst <= 1e-4 && fewest >= 10 && secs < 120;
  o.detail = std::to_string(probes.size()) + " ops, worst rel err " + num(worst, 3) + " (" + worst_name +
             ") <= 1e-4, min probes " + std::to_string(fewest) + " >= 10, " + num(secs, 3) + " s < 120 s";
  return o;
}

// ---- 2 -------------------------------------------------------------------

Outcome closed_forms() {
  using namespace losses;
  bool ok = true;
  std::ostringstream d;

  // zero discriminator
  Rng rng(3);
  Discriminator disc(4, 8, rng);
  nn::ParamList ps;
  disc.collect("d", ps);
  for (auto& x : ps) x.var.mutable_value().setZero();
  const ad::Var h1(random_mat(6, 4, rng)), h2(random_mat(6, 4, rng));
  const double mi0 = mi_estimate(h1, h2, disc, shift_derangement(6)).item();
  const double mi_err = std::abs(mi0 + 2 * std::log(2.0));
  ok &= mi_err <= 1e-15;
  d << "|I(D=0)+2log2| " << num(mi_err, 2) << " <= 1e-15";

  ad::Mat s = random_mat(5, 5, rng);
  s = (s + s.transpose()).eval();
  const double align = vl_align_from_similarity(ad::Var(s)).item();
  ok &= std::abs(align) <= 1e-12;
  d << "; sym align " << num(align, 2);

  double delta_err = 0.0;
  for (int k : {2, 5, 8, 13}) {
    const double dv = entropy_reg(ad::Var(ad::Mat::Constant(7, k, 1.0 / k))).item();
    delta_err = std::max(delta_err, std::abs(dv + std::log(static_cast<double>(k))));
  }
  ok &= delta_err <= 1e-12;
  d << "; uniform Delta err " << num(delta_err, 2);

  // weight table: every membership x {t <= t', t > t'} cell for both presets
  std::vector<std::int64_t> lab(32), unl(160);
  std::iota(lab.begin(), lab.end(), 0);
  curriculum::KMeansResult km;
  for (int i = 0; i < 160; ++i) {
    unl[static_cast<std::size_t>(i)] = 32 + i;
    km.cluster.push_back(i < 128 ? 0 : 1);
  }
  int cells = 0, bad = 0;
  for (const auto& sch : {curriculum::ssbc_preset(), curriculum::domainnet_preset(), curriculum::Schedule{0.3, 0.7, 10}}) {
    const auto st = curriculum::build_state(lab, unl, km, sch, curriculum::DomainRepKind::kFftAmplitude);
    for (int t : {0, sch.t_prime - 1, sch.t_prime, sch.t_prime + 1, 2 * sch.t_prime + 5}) {
      const bool late = t > sch.t_prime;
      bad += curriculum::curriculum_weight(3, t, st) != 1.0;
      bad += std::abs(curriculum::curriculum_weight(40, t, st) - 32.0 / 128.0) > 1e-15;
      bad += curriculum::curriculum_weight(170, t, st) != (late ? sch.r_prime : sch.r0);
      cells += 3;
    }
    if (sch == curriculum::ssbc_preset()) {
      bad += curriculum::curriculum_weight(170, 80, st) != 0.0;
      bad += curriculum::curriculum_weight(170, 81, st) != 0.05;
      cells += 2;
    }
  }
  ok &= bad == 0;
  d << "; weight table " << cells - bad << "/" << cells << " cells";
  return {ok, d.str()};
}

// ---- 3 -------------------------------------------------------------------

Outcome oracle_equivalence() {
  bool ok = true;
  std::ostringstream d;
  Rng rng(2024);
  int agree = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int k = rng.uniform_int(1, 7), n = rng.uniform_int(1, 30);
    std::vector<int> t(static_cast<std::size_t>(n)), p(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      t[static_cast<std::size_t>(i)] = rng.uniform_int(0, k - 1);
      p[static_cast<std::size_t>(i)] = rng.uniform_int(0, k - 1);
    }
    std::vector<int> perm(static_cast<std::size_t>(k));
    std::iota(perm.begin(), perm.end(), 0);
    std::size_t best = 0;
    do {
      std::size_t hit = 0;
      for (int i = 0; i < n; ++i) hit += perm[static_cast<std::size_t>(p[static_cast<std::size_t>(i)])] == t[static_cast<std::size_t>(i)];
      best = std::max(best, hit);
    } while (std::next_permutation(perm.begin(), perm.end()));
    agree += eval::hungarian_acc(t, p, k).acc == static_cast<double>(best) / n;
  }
  ok &= agree == 200;
  d << "hungarian==brute " << agree << "/200";

  ad::Mat path = ad::Mat::Zero(4, 4);
  for (int i = 0; i < 3; ++i) path(i, i + 1) = path(i + 1, i) = 1.0;
  const double pc = prompts::spectral_bipartition(path).ncut;
  ok &= std::abs(pc - 2.0 / 3.0) <= 1e-12;
  d << "; path ncut " << num(pc, 6) << " (2/3)";

  ad::Mat split = ad::Mat::Zero(6, 6);
  for (int b = 0; b < 2; ++b) {
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        if (i != j) split(3 * b + i, 3 * b + j) = 1.0;
      }
    }
  }
  const double dc = prompts::spectral_bipartition(split).ncut;
  ok &= dc == 0.0;
  d << "; disconnected ncut " << dc;

  int mono = 0;
  for (int inst = 0; inst < 20; ++inst) {
    Rng r(derive_seed(42, {static_cast<std::uint64_t>(inst)}));
    const ad::Mat lab = random_mat(10, 4, r);
    ad::Mat unl = random_mat(30, 4, r, 2.0);
    for (ad::Index i = 0; i < 15; ++i) unl.row(i).array() += 3.0;
    const auto km = curriculum::ss_kmeans(lab, unl, 100);
    bool m = true;
    for (std::size_t i = 1; i < km.objective.size(); ++i) m &= km.objective[i] <= km.objective[i - 1] + 1e-9;
    mono += m;
  }
  ok &= mono == 20;
  d << "; ss_kmeans monotone " << mono << "/20";
  return {ok, d.str()};
}

// ---- 4 -------------------------------------------------------------------

Outcome bit_exact_masks() {
  bool ok = true;
  std::ostringstream d;
  const int want[] = {0, 12, 16};
  for (int p = 0; p <= 2; ++p) {
    const ad::Mat m = prompts::boundary_mask(4, p);
    // enumerate: a pixel is on the border when within p of any patch edge
    int expected_ones = 0;
    bool match = true;
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 4; ++x) {
        const bool border = std::min({x, y, 3 - x, 3 - y}) < p;
        expected_ones += border;
        match &= m(y, x) == (border ? 1.0 : 0.0);
      }
    }
    ok &= match && expected_ones == want[p] && m.sum() == want[p];
    d << (p ? ", " : "ones per patch ") << "p=" << p << ":" << m.sum();
  }
  Rng rng(4);
  const int h = 16, c = 3;
  const ad::Mat mask = prompts::boundary_mask_image(h, 4, 1);
  const ad::Mat px = random_mat(3, c * h * h, rng);
  const ad::Var q(random_mat(1, c * h * h, rng), true);
  const ad::Mat out = prompts::apply_boundary_spt(ad::Var(px), q, mask, c).value();
  long interior = 0, changed = 0, border_moved = 0, border = 0;
  for (ad::Index i = 0; i < px.rows(); ++i) {
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < h; ++x) {
          const ad::Index k = (ch * h + y) * h + x;
          if (mask(y, x) == 0.0) {
            ++interior;
            changed += out(i, k) != px(i, k);
          } else {
            ++border;
            border_moved += out(i, k) != px(i, k);
          }
        }
      }
    }
  }
  ok &= changed == 0 && border_moved == border;
  d << "; interior pixels changed " << changed << "/" << interior << " (exact 0)";
  return {ok, d.str()};
}

// ---- 5 -------------------------------------------------------------------

Outcome reduction_identities() {
  const data::Dataset ds = testing::tiny_dataset(4);
  RunConfig cfg = testing::simgcd_only(testing::tiny_config(Method::kHiLo, 3));
  cfg.train.epochs = 13;
  cfg.max_steps = 100;
  const auto got = trainer::train(ds, cfg).history;
  const auto ref = testing::simgcd_reference_trace(ds, cfg, 100);
  double simgcd_gap = got.size() == 100 ? 0.0 : 1e300;
  for (std::size_t i = 0; i < std::min(got.size(), ref.size()); ++i) {
    simgcd_gap = std::max(simgcd_gap, std::abs(got[i].total - ref[i]));
  }

  RunConfig h = testing::tiny_config(Method::kHiLo, 4);
  h.max_steps = 100;
  h.train.epochs = 13;
  RunConfig p = h;
  p.method = Method::kHLPrompt;
  p.train.train_prompts = false;
  p.train.use_phases = false;
  p.model.prompt_init_scale = 0.0;
  const auto a = trainer::train(ds, h).history;
  const auto b = trainer::train(ds, p).history;
  double hl_gap = a.size() == b.size() && a.size() == 100 ? 0.0 : 1e300;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) hl_gap = std::max(hl_gap, std::abs(a[i].total - b[i].total));

  Outcome o;
  o.pass = simgcd_gap <= 1e-6 && hl_gap <= 1e-6;
  o.detail = "SimGCD trace max |diff| " + num(simgcd_gap, 3) + " over 100 steps; HLPrompt(zero frozen prompt) vs HiLo " +
             num(hl_gap, 3) + " over 100 steps; tol 1e-6";
  return o;
}

// ---- 6 -------------------------------------------------------------------

Outcome alternation_isolation() {
  const data::Dataset ds = testing::tiny_dataset(4);
  bool ok = true;
  std::ostringstream d;
  for (Method m : {Method::kHLPrompt, Method::kVLPrompt}) {
    RunConfig cfg = testing::tiny_config(m, 2);
    cfg.train.k = 4;
    const auto rep = testing::check_isolation(ds, cfg);
    const std::string want0 = m == Method::kHLPrompt ? "prompt" : "model";
    const bool good = rep.off_phase_moves == 0 && rep.model_steps > 0 && rep.prompt_steps > 0 && rep.phases[0] == want0;
    ok &= good;
    d << (m == Method::kVLPrompt ? "; " : "") << to_string(m) << ": " << rep.model_steps << " model + " << rep.prompt_steps
      << " prompt steps, off-phase changes " << rep.off_phase_moves << " (exact 0), iteration 0 " << rep.phases[0];
  }
  return {ok, d.str()};
}

// ---- 7 -------------------------------------------------------------------

Outcome factorization_count() {
  bool ok = true;
  Rng rng(1);
  const RunConfig def = default_config(Method::kVLPrompt);
  const int k = 10, dt = def.text.token_dim;
  const prompts::TextPromptState st(k, dt, def.text_prompt, rng);
  const int n = def.text_prompt.context_tokens, g = def.text_prompt.tokens_per_class;
  const std::size_t want = static_cast<std::size_t>((n + k * g) * dt);
  const std::size_t full = static_cast<std::size_t>(k * (n + 1) * dt);
  ok &= st.parameter_count() == want && want < full;
  // The formula is checked everywhere. The strict inequality holds exactly
  // when N(K-1) > K(g-1); for g = 1 that is implied by K > N/g >= 1, for g >= 2
  // it is not, and those cells are listed rather than asserted.
  int checked = 0, formula_bad = 0, strict_bad = 0;
  std::vector<std::string> counter;
  for (int kk = 2; kk <= 24; ++kk) {
    for (int nn = 1; nn <= 8; ++nn) {
      for (int gg = 1; gg <= 3; ++gg) {
        if (!(kk * gg > nn && nn >= gg)) continue;  // K > N/g >= 1
        prompts::TextPromptConfig c;
        c.context_tokens = nn;
        c.tokens_per_class = gg;
        const prompts::TextPromptState s(kk, 8, c, rng);
        ++checked;
        const std::size_t got = s.parameter_count();
        formula_bad += got != static_cast<std::size_t>((nn + kk * gg) * 8);
        const bool below = got < static_cast<std::size_t>(kk * (nn + 1) * 8);
        if (below != (nn * (kk - 1) > kk * (gg - 1))) ++strict_bad;
        if (gg == 1 && !below) ++strict_bad;
        if (!below) counter.push_back("(N=" + std::to_string(nn) + ",K=" + std::to_string(kk) + ",g=" + std::to_string(gg) + ")");
      }
    }
  }
  ok &= formula_bad == 0 && strict_bad == 0;
  std::string cx;
  for (const auto& x : counter) cx += (cx.empty() ? "" : " ") + x;
  return {ok, "default (N=" + std::to_string(n) + ", K=10, D_t=" + std::to_string(dt) + "): " +
                  std::to_string(st.parameter_count()) + " < " + std::to_string(full) + "; formula " +
                  std::to_string(checked - formula_bad) + "/" + std::to_string(checked) +
                  " configs; strict inequality holds for all g=1 cells, g>=2 exceptions exactly where N(K-1) <= K(g-1): " +
                  (cx.empty() ? "none" : cx)};
}

// ---- 8 -------------------------------------------------------------------

// Discriminator trained by plain ascent for `steps` batches from `sample`.
double trained_estimate(const std::function<std::pair<ad::Mat, ad::Mat>()>& sample, int dim, int steps,
                        std::uint64_t seed) {
  Rng init(seed);
  losses::Discriminator disc(dim, 32, init);
  nn::ParamList ps;
  disc.collect("d", ps);
  std::vector<ad::Mat> vel;
  for (auto& p : ps) vel.push_back(ad::Mat::Zero(p.var.rows(), p.var.cols()));
  for (int s = 0; s < steps; ++s) {
    const auto [a, b] = sample();
    const auto perm = losses::shift_derangement(static_cast<int>(a.rows()));
    for (auto& p : ps) p.var.zero_grad();
    losses::mi_estimate(ad::Var(a), ad::Var(b), disc, perm).backward();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      vel[i] = 0.9 * vel[i] + ps[i].var.grad();
      ps[i].var.mutable_value() += 0.05 * vel[i];
    }
  }
  double total = 0.0;
  for (int e = 0; e < 8; ++e) {
    const auto [a, b] = sample();
    total += losses::mi_estimate(ad::Var(a), ad::Var(b), disc, losses::shift_derangement(static_cast<int>(a.rows()))).item();
  }
  return total / 8;
}

Outcome mi_behaviour() {
  const int dim = 8, batch = 64;
  Rng dep_rng(17), ind_rng(18);
  auto dependent = [&] {
    ad::Mat a = random_mat(batch, dim, dep_rng);
    ad::Mat b = a + random_mat(batch, dim, dep_rng, 0.01);
    return std::pair{a, b};
  };
  auto independent = [&] { return std::pair{random_mat(batch, dim, ind_rng), random_mat(batch, dim, ind_rng)}; };
  const double gap = trained_estimate(dependent, dim, 300, 5) - trained_estimate(independent, dim, 300, 5);

  // Encoder side: each view sees two shared coordinates and two private ones.
  // Two linear encoders minimise the estimate against a discriminator that
  // keeps ascending (five steps per encoder step). The excess over the
  // independence floor -2 log 2 is measured with a freshly trained
  // discriminator before and after.
  const int in_dim = 4, out_dim = 2;
  Rng src(21);
  ad::Var wd(random_mat(in_dim, out_dim, src, 0.7), true), ws(random_mat(in_dim, out_dim, src, 0.7), true);
  auto draw = [&](Rng& r) {
    const ad::Mat z = random_mat(batch, 2, r);
    ad::Mat xd = random_mat(batch, in_dim, r, 0.3), xs = random_mat(batch, in_dim, r, 0.3);
    xd.leftCols(2) = z;
    xs.leftCols(2) = z;
    return std::pair{xd, xs};
  };
  auto encoded = [&](Rng& r) {
    const auto [xd, xs] = draw(r);
    return std::pair{ad::Mat(xd * wd.value()), ad::Mat(xs * ws.value())};
  };
  const double floor = -2 * std::log(2.0);
  Rng m0(40);
  const double before = trained_estimate([&] { return encoded(m0); }, out_dim, 300, 7) - floor;

  Rng init(8);
  losses::Discriminator disc(out_dim, 32, init);
  nn::ParamList ps;
  disc.collect("d", ps);
  Rng train_rng(41);
  ad::Mat vd = ad::Mat::Zero(in_dim, out_dim), vs = vd;
  for (int step = 0; step < 500; ++step) {
    const auto [a, b] = draw(train_rng);
    const ad::Var xd(a), xs(b);
    const auto perm = losses::shift_derangement(batch);
    for (int k = 0; k < 5; ++k) {
      for (auto& p : ps) p.var.zero_grad();
      losses::mi_estimate(ad::constant(ad::matmul(xd, wd).value()), ad::constant(ad::matmul(xs, ws).value()), disc, perm)
          .backward();
      for (auto& p : ps) p.var.mutable_value() += 0.1 * p.var.grad();
    }
    wd.zero_grad();
    ws.zero_grad();
    losses::mi_estimate(ad::matmul(xd, wd), ad::matmul(xs, ws), disc, perm).backward();
    vd = 0.9 * vd + wd.grad();
    vs = 0.9 * vs + ws.grad();
    wd.mutable_value() -= 0.02 * vd;
    ws.mutable_value() -= 0.02 * vs;
  }
  Rng m1(40);
  const double after = trained_estimate([&] { return encoded(m1); }, out_dim, 300, 7) - floor;
  const double reduction = 1.0 - after / before;

  Outcome o;
  o.pass = gap >= 0.5 && reduction >= 0.5;
  o.detail = "separation gap " + num(gap) + " >= 0.5; encoder minimisation: excess I over -2log2 " + num(before) + " -> " +
             num(after) + " (reduction " + num(100 * reduction, 3) + "% >= 50%, 500 steps)";
  return o;
}

// ---- 9 -------------------------------------------------------------------

RunConfig hilo_toy(std::uint64_t seed) {
  RunConfig c = default_config(Method::kHiLo);
  c.seed = seed;
  c.vit.image_size = 32;
  c.vit.patch_size = 8;
  c.vit.embed_dim = 32;
  c.vit.depth = 4;
  c.vit.heads = 4;
  c.train.batch_size = 32;
  c.train.epochs = 50;
  c.train.lr = 0.01;
  c.curriculum.preset = "domainnet";
  c.curriculum.schedule = curriculum::domainnet_preset();
  return c;
}

Outcome desk_trend(const data::Dataset& ds, int seeds) {
  std::vector<double> all_full, d1_full, d1_nomi, all_nomi;
  const auto t0 = std::chrono::steady_clock::now();
  double slowest = 0.0;
  for (int s = 1; s <= seeds; ++s) {
    for (bool mi : {true, false}) {
      RunConfig c = hilo_toy(static_cast<std::uint64_t>(s));
      c.train.use_mi = mi;
      const auto r0 = std::chrono::steady_clock::now();
      const auto res = trainer::train(ds, c);
      slowest = std::max(slowest, std::chrono::duration<double>(std::chrono::steady_clock::now() - r0).count());
      const auto rep = eval::evaluate_model(*res.model, ds);
      const double all = rep.overall.all.acc.value_or(0.0), d1 = rep.domains.at(1).all.acc.value_or(0.0);
      std::cerr << "  seed " << s << (mi ? " full " : " no-MI") << ": All " << num(all) << ", domain 0 "
                << num(rep.domains.at(0).all.acc.value_or(0.0)) << ", domain 1 " << num(d1) << "\n";
      (mi ? all_full : all_nomi).push_back(all);
      (mi ? d1_full : d1_nomi).push_back(d1);
    }
  }
  const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double med_all = median(all_full), med_d1 = median(d1_full), med_d1_nomi = median(d1_nomi);
  Outcome o;
  o.pass = med_all >= 0.50 && med_d1_nomi <= med_d1 + 0.02 && slowest < 900;
  o.detail = "HiLo-toy, " + std::to_string(seeds) + " seeds: median All " + num(med_all) + " >= 0.50; median domain-1 All " +
             "no-MI " + num(med_d1_nomi) + " <= full " + num(med_d1) + " + 0.02; slowest run " + num(slowest, 3) +
             " s < 900 s (total " + num(total, 3) + " s)";
  return o;
}

// ---- 10 ------------------------------------------------------------------

Outcome determinism(const data::Dataset& ds) {
  const data::Dataset tiny = testing::tiny_dataset(4);
  int runs = 0, identical = 0;
  auto same = [](const trainer::TrainResult& a, const trainer::TrainResult& b) {
    if (a.history.size() != b.history.size()) return false;
    for (std::size_t i = 0; i < a.history.size(); ++i) {
      if (a.history[i].to_json().dump() != b.history[i].to_json().dump()) return false;
      if (a.history[i].total != b.history[i].total || a.history[i].components != b.history[i].components) return false;
    }
    return testing::snapshot(*a.model) == testing::snapshot(*b.model);
  };
  for (Method m : {Method::kHiLo, Method::kHLPrompt, Method::kVLPrompt}) {
    for (std::uint64_t seed : {1u, 2u}) {
      const RunConfig c = testing::tiny_config(m, seed);
      ++runs;
      identical += same(trainer::train(tiny, c), trainer::train(tiny, c));
    }
  }
  RunConfig toy = hilo_toy(3);
  toy.max_steps = 24;
  ++runs;
  RunConfig par = toy;
  par.workers = 2;
  identical += same(trainer::train(ds, toy), trainer::train(ds, par));
  return {identical == runs, std::to_string(identical) + "/" + std::to_string(runs) +
                                 " (seed, config) pairs bit-identical across two runs (histories and parameters)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only, known;
  int seeds = 5;
  std::string data_dir;
  app.add_option("--only", only, "Criteria to run")->delimiter(',');
  app.add_option("--seeds", seeds, "Seeds for the desk-scale trend");
  app.add_option("--known-fail", known, "Criteria with documented failures")->delimiter(',');
  app.add_option("--data", data_dir, "Dataset directory for the trend (default: generated in memory)");
  CLI11_PARSE(app, argc, argv);

  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  data::Dataset ds = data_dir.empty() ? data::make_dataset(data::GenConfig{}) : data::load(data_dir);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"closed-form values", closed_forms},
      {"oracle equivalence", oracle_equivalence},
      {"bit-exact masks", bit_exact_masks},
      {"reduction identities", reduction_identities},
      {"alternation isolation", alternation_isolation},
      {"factorization count", factorization_count},
      {"MI behaviour", mi_behaviour},
      {"desk-scale trend", [&] { return desk_trend(ds, seeds); }},
      {"determinism", [&] { return determinism(ds); }},
  };
  int failed = 0, known_failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const bool is_known = std::find(known.begin(), known.end(), id) != known.end();
    if (!o.pass) (is_known ? known_failed : failed)++;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  [" << std::setw(2) << id << "] " << criteria[i].first << ": "
              << o.detail << (is_known ? (o.pass ? " (listed as known failure, now passing)" : " (known failure)") : "")
              << std::endl;
  }
  std::cout << "summary: " << failed + known_failed << " failed (" << known_failed << " known), exit "
            << (failed == 0 ? 0 : 1) << std::endl;
  return failed == 0 ? 0 : 1;
}
