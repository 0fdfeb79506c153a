// Acceptance run: one PASS/FAIL line per criterion, with the measured
// numbers and the tolerance each check uses. Exit status is 0 only when
// every selected criterion passes.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "gfss/pipeline.hpp"
#include "support.hpp"

using namespace gfss;
using fixtures::random_matrix;

namespace {

struct Criterion {
  std::string id;
  std::string title;
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    notes.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
  void info(const std::string& what) { notes.push_back("info " + what); }
};

std::string num(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string source_path(const std::string& rel) { return std::string(GFSS_SOURCE_DIR) + "/" + rel; }

// ---------------------------------------------------------------------------

Criterion metric_reproduction() {
  Criterion c{"AC1", "metric reproduction"};
  struct Row {
    const char* what;
    double base, novel, expect, tol;
    bool mean;
  };
  const Row rows[] = {
      {"PASCAL 1-shot H-Mean", 75.23, 43.93, 55.47, 0.01, false},
      {"PASCAL 5-shot H-Mean", 75.73, 57.00, 65.04, 0.01, false},
      {"PASCAL 1-shot Mean", 75.23, 43.93, 67.78, 0.02, true},
      {"PASCAL 5-shot Mean", 75.73, 57.00, 71.28, 0.02, true},
      {"COCO 1-shot H-Mean", 54.81, 21.83, 31.22, 0.01, false},
      {"COCO 5-shot H-Mean", 55.68, 31.62, 40.33, 0.01, false},
  };
  for (const auto& r : rows) {
    const auto m = metrics_from_summary(r.base, r.novel, 15, 5);
    const double got = r.mean ? m.mean_metric : m.h_mean;
    c.check(std::abs(got - r.expect) <= r.tol, std::string(r.what) + " " + num(got) + " vs " +
                                                   num(r.expect, 2) + " (tol " + num(r.tol, 2) + ")");
  }
  return c;
}

// ---------------------------------------------------------------------------

double max_relative_gradient_error(Criterion& c, const std::string& what,
                                   const std::function<Var<double>()>& loss,
                                   std::vector<Var<double>> params) {
  const auto rep = fixtures::check_gradients(loss, std::move(params));
  c.check(rep.worst_relative <= 1e-3,
          "(f) " + what + ": worst rel err " + sci(rep.worst_relative) + " over " +
              std::to_string(rep.checked) + " entries (tol 1e-3, step 1e-4)");
  return rep.worst_relative;
}

Criterion equation_properties() {
  Criterion c{"AC2", "equation property suite"};
  Rng rng(2024, "acceptance/ac2");

  {  // (a)
    double worst = 0;
    for (int t = 0; t < 500; ++t) {
      const std::size_t d = 2 + rng.index(30), C = 1 + rng.index(12);
      FeatureMap<double> f{fixtures::random_tensor({1 + rng.index(6), 1 + rng.index(6), d}, rng), 1};
      const auto dec = decompose(f, random_matrix(C, d, rng));
      Tensor<double> sum = dec.residual.values;
      for (const auto& fi : dec.sub_features)
        for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += fi.values[k];
      worst = std::max(worst, max_abs_diff(sum, f.values));
    }
    c.check(worst <= 1e-6, "(a) reconstruction over 500 draws: max |sum f_i + f_0 - f| = " + sci(worst) + " (tol 1e-6)");
  }

  {  // (b)
    double worst_zero = 0, least_pos = 1e300;
    for (int t = 0; t < 500; ++t) {
      const std::size_t d = 3 + rng.index(12), C = 2 + rng.index(d - 2);
      Tensor<double> U = random_matrix(C, d, rng);
      for (std::size_t i = 0; i < C; ++i) {
        for (std::size_t k = 0; k < i; ++k) {
          double dot = 0, nk = 0;
          for (std::size_t j = 0; j < d; ++j) {
            dot += U(i, j) * U(k, j);
            nk += U(k, j) * U(k, j);
          }
          for (std::size_t j = 0; j < d; ++j) U(i, j) -= dot / nk * U(k, j);
        }
      }
      worst_zero = std::max(worst_zero, orthogonality_loss(U));
      const std::size_t i = rng.index(C), k = (i + 1 + rng.index(C - 1)) % C;
      for (std::size_t j = 0; j < d; ++j) U(i, j) += 0.05 * U(k, j);
      least_pos = std::min(least_pos, orthogonality_loss(U));
    }
    c.check(worst_zero <= 1e-9 && least_pos > 0,
            "(b) L_orth on orthogonal sets max " + sci(worst_zero) + " (tol 1e-9); on perturbed sets min " +
                sci(least_pos) + " (> 0)");
  }

  {  // (c)
    double worst_sum = 0, worst_single = 0;
    for (int t = 0; t < 300; ++t) {
      const std::size_t d = 2 + rng.index(10), M = 1 + rng.index(8), N = 1 + rng.index(5);
      const auto params = ModulationParams<double>::pass_through(d, rng, 0.5);
      const auto r = modulate_novel_prototypes(Var<double>::constant(random_matrix(N, d, rng, 2)),
                                               Var<double>::constant(random_matrix(M, d, rng, 2)), params);
      for (std::size_t i = 0; i < N; ++i) {
        double s = 0;
        for (std::size_t m = 0; m < M; ++m) s += r.attention.value()(i, m);
        worst_sum = std::max(worst_sum, std::abs(s - 1));
      }
      // M = 1: reconstruction is u_b W_V, so the fused output is [u, u_b W_V] W_F + b
      const auto Un = random_matrix(N, d, rng), Ub = random_matrix(1, d, rng);
      const auto one = modulate_novel_prototypes(Var<double>::constant(Un), Var<double>::constant(Ub), params);
      const auto& Wv = params.wv.value();
      const auto& Wf = params.fusion_w.value();
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t col = 0; col < d; ++col) {
          double expect = params.fusion_b.value()(0, col);
          for (std::size_t j = 0; j < d; ++j) {
            double v = 0;
            for (std::size_t k = 0; k < d; ++k) v += Ub(0, k) * Wv(k, j);
            expect += Un(i, j) * Wf(j, col) + v * Wf(d + j, col);
          }
          worst_single = std::max(worst_single, std::abs(one.prototypes.value()(i, col) - expect));
        }
    }
    c.check(worst_sum <= 1e-6 && worst_single <= 1e-9,
            "(c) attention row sums max |s - 1| = " + sci(worst_sum) + " (tol 1e-6); M=1 reduction max err " +
                sci(worst_single) + " (tol 1e-9)");
  }

  {  // (d)
    double worst_std = 0;
    std::map<std::size_t, double> worst_idem_by_n;
    for (int t = 0; t < 600; ++t) {
      const std::size_t d = 2 + rng.index(64), N = 1 + rng.index(6);
      const auto base = weight_stats(random_matrix(d, 1 + rng.index(15), rng, rng.uniform(0.05, 2.0)));
      auto Zn = random_matrix(d, N, rng, rng.uniform(0.05, 3.0));
      for (auto& v : Zn.values()) v += 0.5;
      const auto after = weight_stats(calibrate_novel(Zn, base).theta);
      for (double s : after.sigma) worst_std = std::max(worst_std, std::abs(s - base.sigma_bar));

      WeightStats zero = base;
      zero.mu_bar = 0;
      const auto once = calibrate_novel(Zn, zero).theta;
      const double diff = max_abs_diff(calibrate_novel(once, zero).theta, once);
      worst_idem_by_n[N] = std::max(worst_idem_by_n[N], diff);
    }
    c.check(worst_std <= 1e-6, "(d) post-calibration per-class std vs sigma_bar_b: max err " + sci(worst_std) + " (tol 1e-6)");
    for (const auto& [n, w] : worst_idem_by_n)
      c.check(w <= 1e-6, "(d) idempotence at mu_bar_b = 0, N = " + std::to_string(n) +
                             " novel columns: max |second - first| = " + sci(w) + " (tol 1e-6)");
  }

  {  // (e)
    double worst_eq = 0, worst_gap = 0;
    for (int t = 0; t < 500; ++t) {
      const std::size_t P = 1 + rng.index(20), C = 2 + rng.index(10);
      const auto p = ag::softmax_rows_value(random_matrix(P, C, rng, rng.uniform(0.1, 6)));
      const auto q = ag::softmax_rows_value(random_matrix(P, C, rng, rng.uniform(0.1, 6)));
      double h = 0;
      for (double v : p.values()) h -= v * std::log(v);
      h /= double(P);
      worst_eq = std::max(worst_eq, std::abs(consistency_loss(p, p) - h));
      worst_gap = std::min(worst_gap, consistency_loss(p, q) - h);
    }
    c.check(worst_eq <= 1e-9 && worst_gap >= -1e-12,
            "(e) L_con(p,p) vs entropy max err " + sci(worst_eq) + " (tol 1e-9); min L_con(p,q) - H(p) = " +
                sci(worst_gap) + " (>= 0)");
  }

  {  // (f)
    using V = Var<double>;
    auto p = [&](std::size_t r, std::size_t k, double sd = 1.0) { return V::leaf(random_matrix(r, k, rng, sd), true); };
    auto pt = [&](Shape s, double sd = 1.0) { return V::leaf(fixtures::random_tensor(std::move(s), rng, sd), true); };
    auto ws = [](const V& out, std::uint64_t seed) {
      Rng r(seed);
      return fixtures::weighted_sum(out, r);
    };
    auto a = p(3, 4), b = p(4, 5), a2 = p(3, 4), row = p(1, 4);
    max_relative_gradient_error(c, "matmul", [&] { return ws(ag::matmul(a, b), 1); }, {a, b});
    max_relative_gradient_error(c, "add/sub/scale", [&] {
      return ws(ag::scale(ag::sub(ag::add(a, a2), a2), 1.5), 2); }, {a, a2});
    max_relative_gradient_error(c, "transpose/concat/select", [&] {
      return ws(ag::select_cols(ag::concat_cols(ag::transpose(ag::transpose(a)), a2), {0, 5, 7}), 3); }, {a, a2});
    max_relative_gradient_error(c, "mul_row/add_row/col_dot", [&] {
      return ws(ag::col_dot(ag::add_row(ag::mul_row(a, row), row), a2), 4); }, {a, a2, row});
    max_relative_gradient_error(c, "normalize_rows/softmax", [&] {
      return ws(ag::softmax_rows(ag::normalize_rows(a)), 5); }, {a});

    const std::size_t d = 5, M = 3, N = 2, h = 3, w = 3, H = 6, W = 6;
    auto f = p(h * w, d), Ub = p(M, d), Un = p(N, d), Zb = p(d, M), Zn = p(d, N), Zbg = p(d, 1);
    auto npm = ModulationParams<double>::pass_through(d, rng, 0.3);
    std::vector<int> y(H * W);
    for (auto& v : y) v = static_cast<int>(rng.index(M + N + 1));
    max_relative_gradient_error(c, "score_rows", [&] {
      return ws(score_rows(f, ag::concat_rows(Ub, Un), ag::concat_cols(Zb, Zn), Zbg), 6); }, {f, Ub, Un, Zb, Zn, Zbg});
    max_relative_gradient_error(c, "prototype modulation", [&] {
      return ws(modulate_novel_prototypes(Un, Ub, npm).prototypes, 7); },
      {Un, Ub, npm.wq, npm.wk, npm.wv, npm.fusion_w, npm.fusion_b});
    max_relative_gradient_error(c, "L_seg + L_orth through upsampling", [&] {
      auto U = ag::concat_rows(Ub, modulate_novel_prototypes(Un, Ub, npm).prototypes);
      auto lg = ag::upsample_rows(score_rows(f, U, ag::concat_cols(Zb, Zn), Zbg), h, w, H, W);
      return ag::add_scalars<double>({ag::cross_entropy(lg, y), orthogonality_loss(U)}); },
      {f, Ub, Un, Zb, Zn, Zbg, npm.wq, npm.fusion_w});
    auto lw = p(6, 4, 2), ls = p(6, 4, 2);
    max_relative_gradient_error(c, "L_con (both views)", [&] { return consistency_loss(lw, ls, false); }, {lw, ls});
    auto bg = p(1, 1);
    std::vector<int> ya{0, 1, 2, 3, -1, 1, 0, 2, 3};
    max_relative_gradient_error(c, "L_aux", [&] {
      return auxiliary_loss(f, Ub, ya, AuxOptions{0.5}, bg); }, {f, Ub, bg});
    auto x = pt({2, 5, 6}), k = pt({4, 2, 3, 3}, 0.5), kb = pt({4}), g = pt({4}), be = pt({4});
    max_relative_gradient_error(c, "conv2d + group_norm + relu", [&] {
      return ws(ag::chw_to_rows(ag::relu(ag::group_norm(ag::conv2d(x, k, kb, 2, 1), g, be, 2))), 8); },
      {x, k, kb, g, be});
  }
  return c;
}

// ---------------------------------------------------------------------------

Criterion augmentation_geometry() {
  Criterion c{"AC3", "augmentation geometry suite"};
  Rng rng(2025, "acceptance/ac3");
  log::ScopedSink quiet([](log::Level, std::string_view) {});
  const int masks = 10000;
  std::map<CutoutMode, std::size_t> violations, fallbacks;
  std::size_t area_errors = 0, outside_changes = 0, over_budget = 0;
  for (int t = 0; t < masks; ++t) {
    const std::size_t H = 4 + rng.index(45), W = 4 + rng.index(45);
    Sample weak = fixtures::random_sample(H, W, 6, rng);
    const auto boxes = extract_boxes(weak.mask);
    for (auto mode : {CutoutMode::bcutout, CutoutMode::wcutout, CutoutMode::ocutout, CutoutMode::icutout}) {
      const auto cc = sample_cutout_center(boxes, H, W, mode, rng);
      if (cc.used != mode) {
        ++fallbacks[mode];
        if (!cutout_candidates(boxes, H, W, mode).empty()) ++violations[mode];
        continue;
      }
      const auto p = cc.pixel;
      const bool on = std::any_of(boxes.begin(), boxes.end(), [&](auto& b) { return b.on_perimeter(p.y, p.x); });
      const bool in = std::any_of(boxes.begin(), boxes.end(), [&](auto& b) { return b.contains(p.y, p.x); });
      const bool ok = mode == CutoutMode::bcutout   ? on
                      : mode == CutoutMode::wcutout ? in
                      : mode == CutoutMode::ocutout ? !in
                                                    : p.y < H && p.x < W;
      violations[mode] += !ok;
    }

    CutoutOptions o{static_cast<CutoutMode>(rng.index(4)), 1 + rng.index(24)};
    CutoutCenter cc;
    const Sample strong = strong_augment(weak, o, rng, &cc);
    // expected area by direct enumeration of offsets -size/2 .. size - size/2 - 1
    const long long half = static_cast<long long>(o.size / 2);
    std::size_t expect = 0, changed = 0;
    for (long long dy = -half; dy < static_cast<long long>(o.size) - half; ++dy)
      for (long long dx = -half; dx < static_cast<long long>(o.size) - half; ++dx) {
        const long long yy = static_cast<long long>(cc.pixel.y) + dy, xx = static_cast<long long>(cc.pixel.x) + dx;
        expect += yy >= 0 && xx >= 0 && yy < static_cast<long long>(H) && xx < static_cast<long long>(W);
      }
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const long long dy = static_cast<long long>(y) - static_cast<long long>(cc.pixel.y);
        const long long dx = static_cast<long long>(x) - static_cast<long long>(cc.pixel.x);
        const bool inside = dy >= -half && dy < static_cast<long long>(o.size) - half && dx >= -half &&
                            dx < static_cast<long long>(o.size) - half;
        bool differs = false;
        for (std::size_t ch = 0; ch < 3; ++ch) differs = differs || strong.image(y, x, ch) != weak.image(y, x, ch);
        changed += differs;
        if (!inside && differs) ++outside_changes;
      }
    area_errors += changed != expect;
    over_budget += changed > o.size * o.size;
  }
  for (auto mode : {CutoutMode::bcutout, CutoutMode::wcutout, CutoutMode::ocutout, CutoutMode::icutout})
    c.check(violations[mode] == 0, std::string(cutout_mode_name(mode)) + ": " + std::to_string(violations[mode]) +
                                       " centres outside the allowed region over " + std::to_string(masks) +
                                       " masks (" + std::to_string(fallbacks[mode]) + " empty-set fallbacks)");
  c.check(over_budget == 0 && area_errors == 0,
          "changed-pixel count: " + std::to_string(over_budget) + " above size^2, " + std::to_string(area_errors) +
              " differing from the clipped-square count");
  c.check(outside_changes == 0, "weak vs strong outside the cutout: " + std::to_string(outside_changes) + " differing pixels");
  return c;
}

// ---------------------------------------------------------------------------

std::size_t first_divergence(const TrainLog& a, const TrainLog& b) {
  const std::size_t n = std::min(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto &x = a.records[i].loss, &y = b.records[i].loss;
    if (x.seg != y.seg || x.orth != y.orth || x.con != y.con) return i;
  }
  return n;
}

Criterion two_phase_contract() {
  Criterion c{"AC4", "two-phase contract suite"};
  const std::string smoke = source_path("configs/smoke.cfg");
  auto cfg_with = [&](std::map<std::string, std::string> ov) {
    ov.emplace("epochs_pretrain", "2");
    ov.emplace("epochs_finetune", "4");
    return resolve_config(smoke, ov);
  };
  const auto base_cfg = cfg_with({});
  const auto data = prepare_fold(base_cfg);
  const auto pre = pretrain(data.base_set, data.taxonomy, base_cfg);
  auto run = [&](const std::map<std::string, std::string>& ov, const TrainHooks& hooks = {}) {
    return finetune(pre.checkpoint, data.support, data.unlabeled_base, data.taxonomy, cfg_with(ov), hooks);
  };
  const std::size_t B = std::min(base_cfg.batch_size, data.support.size());
  const std::size_t spe = (data.support.size() + B - 1) / B;

  std::vector<std::pair<std::size_t, std::size_t>> events;  // (kind, epoch): 0 step, 1 calibration
  TrainHooks hooks;
  hooks.on_step = [&](const LossRecord& r) { events.emplace_back(0, r.epoch); };
  hooks.on_calibration = [&](std::size_t e, const GfssModel<float>&) { events.emplace_back(1, e); };
  const auto full = run({}, hooks);

  std::size_t frozen = 0, changed = 0;
  for (const auto& [name, t] : pre.checkpoint.tensors) {
    const bool trainable = name.rfind("prototypes.novel", 0) == 0 || name.rfind("clf.novel", 0) == 0 ||
                           name.rfind("npm.", 0) == 0;
    if (trainable) continue;
    ++frozen;
    changed += !(full.checkpoint.tensors.at(name) == t);
  }
  c.check(changed == 0, "frozen tensors bit-identical after fine-tuning: " + std::to_string(frozen - changed) + "/" +
                            std::to_string(frozen));

  std::vector<std::pair<std::size_t, std::size_t>> expect;
  for (std::size_t e = 0; e < base_cfg.epochs_finetune; ++e) {
    for (std::size_t s = 0; s < spe; ++s) expect.emplace_back(0, e);
    expect.emplace_back(1, e);
  }
  c.check(events == expect && full.calibrations == base_cfg.epochs_finetune,
          "calibration fired " + std::to_string(full.calibrations) + " times in " +
              std::to_string(base_cfg.epochs_finetune) + " epochs, each after the epoch's last step");

  const auto no_ncc = run({{"ncc", "off"}});
  c.check(first_divergence(full.log, no_ncc.log) == spe && no_ncc.calibrations == 0,
          "ncc toggle: logs identical until step " + std::to_string(first_divergence(full.log, no_ncc.log)) +
              " (first step after the first calibration is " + std::to_string(spe) + ")");

  const auto ccl_on = run({{"ncc", "off"}, {"npm", "off"}});
  const auto ccl_off = run({{"ncc", "off"}, {"npm", "off"}, {"ccl", "off"}});
  bool con_zero = true;
  for (const auto& r : ccl_off.log.records) con_zero = con_zero && r.loss.con == 0;
  const bool same_first = ccl_on.log.records[0].loss.seg == ccl_off.log.records[0].loss.seg &&
                          ccl_on.log.records[0].loss.orth == ccl_off.log.records[0].loss.orth;
  bool later_differs = false;
  for (std::size_t i = 1; i < ccl_on.log.records.size(); ++i)
    later_differs = later_differs || ccl_on.log.records[i].loss.seg != ccl_off.log.records[i].loss.seg;
  c.check(con_zero && same_first && later_differs && ccl_on.log.records[0].loss.con > 0,
          "ccl toggle: L_con is 0 throughout when off; seg/orth identical at step 0 and diverge only after the "
          "first consistency gradient");

  const auto npm_on = run({{"ncc", "off"}, {"ccl", "off"}, {"npm_init_noise", "0"}});
  const auto npm_off = run({{"ncc", "off"}, {"ccl", "off"}, {"npm_init_noise", "0"}, {"npm", "off"}});
  bool npm_frozen = true;
  const auto init = run({{"epochs_finetune", "0"}, {"npm_init_noise", "0"}});
  for (const auto& [name, t] : npm_off.checkpoint.tensors)
    if (name.rfind("npm.", 0) == 0) npm_frozen = npm_frozen && t == init.checkpoint.tensors.at(name);
  c.check(first_divergence(npm_on.log, npm_off.log) == 1 && npm_frozen,
          "npm toggle: pass-through start gives identical step-0 losses, divergence at step " +
              std::to_string(first_divergence(npm_on.log, npm_off.log)) + "; modulation weights untouched when off");

  const auto all_off = run({{"ncc", "off"}, {"ccl", "off"}, {"npm", "off"}});
  bool baseline_ok = all_off.calibrations == 0;
  for (const auto& r : all_off.log.records) baseline_ok = baseline_ok && r.loss.con == 0;
  c.check(baseline_ok, "all-off baseline: no calibration, no consistency term");
  return c;
}

// ---------------------------------------------------------------------------

struct DeskRun {
  MetricsReport report;
  double seconds = 0;
  std::string pretrain_csv, finetune_csv;
};

struct DeskResults {
  std::map<std::uint64_t, DeskRun> on, off;
  double background_novel = 0;
};

DeskResults run_desk(const std::vector<std::uint64_t>& seeds) {
  const std::string on_cfg = source_path("configs/desk.cfg");
  const auto off_overrides = read_config_file(source_path("configs/desk_baseline.cfg"));
  DeskResults out;
  for (auto seed : seeds) {
    const std::map<std::string, std::string> seed_ov{{"seed", std::to_string(seed)}};
    const auto on = resolve_config(on_cfg, seed_ov);
    auto off_ov = off_overrides;
    off_ov["seed"] = std::to_string(seed);
    const auto off = resolve_config(on_cfg, off_ov);

    const auto data = prepare_fold(on);
    const auto t0 = std::chrono::steady_clock::now();
    const auto pre = pretrain(data.base_set, data.taxonomy, on);
    const double pre_s = seconds_since(t0);
    for (auto* which : {&on, &off}) {
      const auto t1 = std::chrono::steady_clock::now();
      const auto ft = finetune(pre.checkpoint, data.support, data.unlabeled_base, data.taxonomy, *which);
      DeskRun r;
      r.report = evaluate_checkpoint(ft.checkpoint, *which, data.dataset.test);
      r.seconds = pre_s + seconds_since(t1);
      r.pretrain_csv = pre.log.csv();
      r.finetune_csv = ft.log.csv();
      (which == &on ? out.on : out.off)[seed] = r;
      std::cout << "  seed " << seed << (which == &on ? " ON " : " OFF") << ": base " << num(r.report.miou_base, 2)
                << " novel " << num(r.report.miou_novel, 2) << " h-mean " << num(r.report.h_mean, 2) << " ("
                << num(r.seconds, 0) << " s)" << std::endl;
    }
    if (seed == seeds.front())
      out.background_novel = all_background_report(data.dataset.test, data.taxonomy).miou_novel;
  }
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// (a) and (b) apply to the desk run at the config's own seed; the other
// seeds only feed the (c) median and are reported for reference.
Criterion desk_end_to_end(const DeskResults& r, std::uint64_t desk_seed) {
  Criterion c{"AC5", "desk-scale end-to-end"};
  std::vector<double> on_novel, off_novel;
  for (const auto& [seed, run] : r.on) {
    const auto& m = run.report;
    const std::string s = "seed " + std::to_string(seed) + ": ";
    c.check(run.seconds <= 600, s + "pretrain + finetune wall time " + num(run.seconds, 1) + " s (limit 600)");
    const std::string a = s + "(a) base mIoU " + num(m.miou_base, 2) + " (>= 60)";
    const std::string b = s + "(b) novel mIoU " + num(m.miou_novel, 2) + " (>= 25 and > all-background " +
                          num(r.background_novel, 2) + ")";
    if (seed == desk_seed) {
      c.check(m.miou_base >= 60, a);
      c.check(m.miou_novel >= 25 && m.miou_novel > r.background_novel, b);
    } else {
      c.info(a);
      c.info(b);
    }
    on_novel.push_back(m.miou_novel);
    off_novel.push_back(r.off.at(seed).report.miou_novel);
  }
  const double mon = median(on_novel), moff = median(off_novel);
  c.check(mon >= moff, "(c) median novel mIoU over " + std::to_string(on_novel.size()) + " seeds: modules on " +
                           num(mon, 2) + " vs all off " + num(moff, 2) + " (on >= off)");
  return c;
}

Criterion determinism(const DeskResults& r, std::uint64_t seed) {
  Criterion c{"AC6", "determinism"};
  const auto again = run_desk({seed});
  const auto& a = r.on.at(seed);
  const auto& b = again.on.at(seed);
  c.check(a.pretrain_csv == b.pretrain_csv && a.finetune_csv == b.finetune_csv,
          "seed " + std::to_string(seed) + ": loss CSVs byte-identical across two runs");
  const bool same = a.report.miou_base == b.report.miou_base && a.report.miou_novel == b.report.miou_novel &&
                    a.report.h_mean == b.report.h_mean && a.report.iou_per_class == b.report.iou_per_class;
  c.check(same, "seed " + std::to_string(seed) + ": final metrics identical (base " + num(b.report.miou_base, 4) +
                    ", novel " + num(b.report.miou_novel, 4) + ")");
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<std::string> only;
  app.add_option("--only", only, "criteria to run (AC1..AC6); default all");
  CLI11_PARSE(app, argc, argv);
  const std::set<std::string> selected(only.begin(), only.end());
  auto wanted = [&](const std::string& id) { return selected.empty() || selected.count(id) > 0; };

  std::vector<Criterion> results;
  auto report = [&](Criterion c, double seconds) {
    std::cout << c.id << " " << (c.pass ? "PASS" : "FAIL") << "  " << c.title << "  [" << num(seconds, 1) << " s]\n";
    for (const auto& n : c.notes) std::cout << "    " << n << "\n";
    std::cout << std::flush;
    results.push_back(std::move(c));
  };
  auto timed = [&](const std::string& id, const std::function<Criterion()>& f) {
    if (!wanted(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Criterion c = f();
    report(std::move(c), seconds_since(t0));
  };

  timed("AC1", metric_reproduction);
  timed("AC2", equation_properties);
  timed("AC3", augmentation_geometry);
  timed("AC4", two_phase_contract);
  if (wanted("AC5") || wanted("AC6")) {
    const std::uint64_t desk_seed = resolve_config(source_path("configs/desk.cfg"), {}).seed;
    std::vector<std::uint64_t> seeds{desk_seed};
    if (wanted("AC5"))
      for (std::uint64_t s = 1; seeds.size() < 3; ++s)
        if (s != desk_seed) seeds.push_back(s);
    const auto t0 = std::chrono::steady_clock::now();
    std::cout << "desk runs (configs/desk.cfg vs configs/desk_baseline.cfg)\n" << std::flush;
    const auto desk = run_desk(seeds);
    if (wanted("AC5")) report(desk_end_to_end(desk, desk_seed), seconds_since(t0));
    if (wanted("AC6")) timed("AC6", [&] { return determinism(desk, seeds.front()); });
  }

  std::size_t failed = 0;
  std::cout << "\nsummary:";
  for (const auto& c : results) {
    std::cout << " " << c.id << "=" << (c.pass ? "PASS" : "FAIL");
    failed += !c.pass;
  }
  std::cout << "\n";
  return failed == 0 ? 0 : 1;
}
