// Acceptance run: one PASS/FAIL line per headline property. Arguments, if
// any, select checks whose name contains one of them.
//
// The benchmark and ablation checks train three desk-scale models (about half
// an hour each on one core); everything else finishes in a few minutes.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "rcnf/rcnf.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace rcnf;
using rcnf::testing::random_windows;
using rcnf::testing::randomize;
using rcnf::testing::tiny_config;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Eigen::VectorXd row(const Mat& m, Index r) { return m.row(r).transpose(); }

double gaussian_logpdf(const double* x, const double* mu, Index d) {
  double q = 0;
  for (Index i = 0; i < d; ++i) q += (x[i] - mu[i]) * (x[i] - mu[i]);
  return -0.5 * static_cast<double>(d) * std::log(2 * std::numbers::pi) - 0.5 * q;
}

// --- flow mathematics --------------------------------------------------------

Outcome invertibility() {
  const auto t0 = std::chrono::steady_clock::now();
  FlowConfig cfg;  // T=12, N=32, K=12
  FlowModel m(cfg, optimize_codebook(10, cfg.frames, 5.0, 0), {});
  randomize(m, 1, 0.1);
  const auto ws = random_windows(cfg, m.codebook(), 100, 2);
  const auto c = m.condition(ws);
  const Mat x = m.stack_x(ws);
  Mat z;
  {
    ad::NoGradGuard ng;
    z = m.forward(Var(x), c).z.value();
  }
  const double err = (m.inverse(z, c) - x).cwiseAbs().maxCoeff();
  const double secs = seconds_since(t0);
  return {err < 1e-4 && secs < 60,
          fmt("max |f^-1(f(x)) - x| = %.3e over 100 windows (< 1e-4), %.1f s (< 60 s)", err, secs)};
}

Outcome jacobian_exactness() {
  double worst = 0;
  int models = 0;
  for (int steps : {1, 2})
    for (std::uint64_t seed = 0; seed < 10; ++seed, ++models) {
      const auto cfg = tiny_config(steps, seed);
      FlowModel m(cfg, optimize_codebook(3, cfg.frames, 2.0, 7), {});
      randomize(m, 300 + seed * 7 + static_cast<std::uint64_t>(steps));
      const auto ws = random_windows(cfg, m.codebook(), 1, 400 + seed);
      const auto c = m.condition(ws);
      ad::NoGradGuard ng;
      auto f = [&](const Eigen::VectorXd& v) { return row(m.forward(Var(Mat(v.transpose())), c).z.value(), 0); };
      const double numeric = rcnf::testing::log_abs_det(rcnf::testing::numeric_jacobian(f, row(m.stack_x(ws), 0)));
      const double analytic = m.forward(Var(m.stack_x(ws)), c).log_det.item();
      worst = std::max(worst, std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-8));
    }
  return {worst < 1e-3, fmt("worst relative log-det error %.3e over %d models at T=4, N=2, K in {1,2} (< 1e-3)", worst,
                            models)};
}

Outcome change_of_variables() {
  double worst = 0;
  int points = 0;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto cfg = tiny_config(2, seed);
    FlowModel m(cfg, optimize_codebook(3, cfg.frames, 2.0, 7), {});
    randomize(m, 500 + seed);
    auto ws = random_windows(cfg, m.codebook(), 5, 600 + seed);
    const auto c = m.condition(ws);
    std::mt19937_64 rng(700 + seed);
    std::normal_distribution<double> g;
    Mat z = c.mu;
    for (Index i = 0; i < z.size(); ++i) z.data()[i] += g(rng);
    const Mat x = m.inverse(z, c);
    ad::NoGradGuard ng;
    for (Index i = 0; i < x.rows(); ++i, ++points) {
      const Conditioning ci{c.s.middleRows(i * cfg.frames, cfg.frames), c.tau.row(i), c.mu.row(i)};
      auto f = [&](const Eigen::VectorXd& v) { return row(m.forward(Var(Mat(v.transpose())), ci).z.value(), 0); };
      const double log_jac = rcnf::testing::log_abs_det(rcnf::testing::numeric_jacobian(f, row(x, i)));
      // p_X(x) = p_Z(z) |det dz/dx|, with z drawn first and x = f^-1(z)
      const double expected = gaussian_logpdf(z.row(i).data(), c.mu.row(i).data(), z.cols()) + log_jac;
      auto& w = ws[static_cast<std::size_t>(i)];
      w.x.assign(x.row(i).data(), x.row(i).data() + x.cols());
      const double logp = m.log_likelihood(w).first;
      worst = std::max(worst, std::abs(logp - expected) / std::abs(expected));
    }
  }
  return {worst < 1e-3, fmt("worst relative error of log p_X vs log p_Z + log|det J| %.3e at %d points (< 1e-3)", worst,
                            points)};
}

// Every scalar parameter against a fourth-order central difference. The
// smallest gradients are near 1e-10 while the loss is O(100), so a plain
// two-point stencil at small h is dominated by rounding; the wider
// five-point stencil keeps both rounding and truncation below 1e-12.
Outcome gradient_check() {
  const double h = 1e-2;
  double worst = 0;
  std::size_t checked = 0;
  std::string where;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto cfg = tiny_config(2, seed);
    FlowModel m(cfg, optimize_codebook(3, cfg.frames, 5.0, 0), {});
    randomize(m, 800 + seed);
    const auto w = random_windows(cfg, m.codebook(), 1, 900 + seed)[0];
    const std::vector<const Window*> one{&w};
    m.params().zero_grad();
    ad::backward(m.nll(Var(m.stack_x(one)), m.condition(one)));
    for (auto& [name, p] : m.params().entries()) {
      const Mat analytic = p.has_grad() ? p.grad() : Mat::Zero(p.value().rows(), p.value().cols());
      for (Index k = 0; k < p.value().size(); ++k, ++checked) {
        double& slot = p.mutable_value().data()[k];
        const double orig = slot;
        const auto loss_at = [&](double delta) {
          slot = orig + delta;
          const double v = -m.log_likelihood(w).first;
          slot = orig;
          return v;
        };
        const double d1 = (loss_at(h) - loss_at(-h)) / (2 * h);
        const double d2 = (loss_at(2 * h) - loss_at(-2 * h)) / (4 * h);
        const double numeric = (4 * d1 - d2) / 3;
        const double a = analytic.data()[k];
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
        if (rel > worst) {
          worst = rel;
          where = name + "[" + std::to_string(k) + "]";
        }
      }
    }
    m.params().zero_grad();
  }
  return {worst < 1e-3, fmt("max relative gradient error %.3e over all %zu parameters of 5 models (< 1e-3; worst %s)",
                            worst, checked, where.c_str())};
}

Outcome gaussian_prior() {
  double worst = 0;
  const auto cfg = tiny_config(1);
  FlowModel m(cfg, optimize_codebook(3, cfg.frames, 2.0, 7), {});
  m.set_identity();
  for (const auto& w : random_windows(cfg, m.codebook(), 20, 11, 3.0)) {
    const auto mu = prior_mean(embed_task(m.codebook(), w.task_id), cfg.frames, cfg.points);
    worst = std::max(worst, std::abs(m.log_likelihood(w).first -
                                     gaussian_logpdf(w.x.data(), mu.data(), static_cast<Index>(w.x.size()))));
  }
  FlowConfig desk;
  desk.steps = 1;
  FlowModel big(desk, optimize_codebook(10, 12, 5.0, 0), {});
  big.set_identity();
  auto w = random_windows(desk, big.codebook(), 1, 12)[0];
  w.x = prior_mean(embed_task(big.codebook(), w.task_id), 12, 32);
  const double mode = big.log_likelihood(w).first;
  const double expected = -705.7447935011886;  // -(768/2) ln(2 pi)
  return {worst < 1e-9 && std::abs(mode - expected) < 1e-9,
          fmt("identity flow vs normal log-density max error %.2e (< 1e-9); mode at d=768 %.10f vs %.10f", worst, mode,
              expected)};
}

Outcome spherical_codebook() {
  const double radius = 5.0;
  const auto cb = optimize_codebook(6, 3, radius, 0);
  double norm_err = 0;
  for (const auto& e : cb.embeddings()) {
    const double n = std::sqrt(std::inner_product(e.vector.begin(), e.vector.end(), e.vector.begin(), 0.0));
    norm_err = std::max(norm_err, std::abs(n - radius));
  }
  const double angle = cb.min_pairwise_angle();
  return {std::abs(angle - 90.0) <= 1.0 && norm_err < 1e-6,
          fmt("M=6, T=3: min pairwise angle %.4f deg (90 +- 1), max |norm - R| %.2e (< 1e-6)", angle, norm_err)};
}

// --- calibration and metrics -------------------------------------------------

Outcome conformal_fpr() {
  const double alpha = 0.05;
  const int n_cal = 200, n_test = 1000, reps = 200;
  std::mt19937_64 rng(31);
  std::gamma_distribution<double> g(2.0, 1.5);
  double sum = 0;
  for (int r = 0; r < reps; ++r) {
    std::vector<double> cal(n_cal);
    for (auto& v : cal) v = g(rng);
    const auto p = calibrate_scores(cal, "t", alpha, static_cast<std::uint64_t>(r));
    int fp = 0;
    for (int i = 0; i < n_test; ++i) fp += judge_state(p, g(rng)) == MonitorState::anomalous;
    sum += static_cast<double>(fp) / n_test;
  }
  const double fpr = sum / reps, bound = alpha + 2.0 / std::sqrt(n_test);
  return {fpr <= bound, fmt("mean FPR %.4f over %d resamples (<= %.4f)", fpr, reps, bound)};
}

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& l) {
  double wins = 0;
  int pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] && !l[j]) {
        ++pairs;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return wins / pairs;
}

double rank_enumeration_ap(const std::vector<double>& s, const std::vector<int>& l) {
  auto rank = [&](std::size_t i) {
    int r = 1;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (s[j] > s[i] || (s[j] == s[i] && j < i)) ++r;
    return r;
  };
  double ap = 0;
  int pos = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!l[i]) continue;
    ++pos;
    int hits = 0;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[j] && rank(j) <= rank(i)) ++hits;
    ap += static_cast<double>(hits) / rank(i);
  }
  return ap / pos;
}

Outcome metric_oracles() {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> coarse(0, 3);
  std::normal_distribution<double> fine;
  double worst = 0;
  long cases = 0;
  for (int n = 1; n <= 8; ++n)
    for (int rep = 0; rep < 4; ++rep) {
      std::vector<double> s(static_cast<std::size_t>(n));
      for (auto& v : s) v = rep % 2 ? fine(rng) : coarse(rng);
      for (int bits = 0; bits < (1 << n); ++bits) {
        std::vector<int> l;
        for (int i = 0; i < n; ++i) l.push_back((bits >> i) & 1);
        const int pos = static_cast<int>(std::count(l.begin(), l.end(), 1));
        if (pos == 0) continue;
        ++cases;
        worst = std::max(worst, std::abs(average_precision(s, l) - rank_enumeration_ap(s, l)));
        if (pos < n) worst = std::max(worst, std::abs(auc(s, l) - pairwise_auc(s, l)));
      }
    }
  const double a = auc(std::vector{0.1, 0.4, 0.35, 0.8}, std::vector{0, 0, 1, 1});
  const double ap = average_precision(std::vector{0.8, 0.4, 0.35, 0.1}, std::vector{1, 0, 1, 0});
  const bool worked = std::abs(a - 0.75) < 1e-12 && std::abs(ap - 5.0 / 6.0) < 1e-12;
  return {worst < 1e-12 && worked,
          fmt("max deviation from enumeration %.1e over %ld labelings (< 1e-12); worked AUC %.4f, AP %.4f", worst,
              cases, a, ap)};
}

// --- desk-scale benchmark ----------------------------------------------------

RunConfig desk_config() {
  RunConfig c;
  c.seed = 2024;
  c.train.epochs = 100;
  c.train.next_stage_epoch = 30;
  c.train.windows_per_epoch = 576;
  c.train.max_val_windows = 512;
  fan_out_seeds(c);
  c.validate();
  return c;
}

struct Trained {
  BenchReport bench;
  double train_seconds = 0;
};

const std::vector<Episode>& nominal_episodes() {
  static const auto eps = [] {
    const auto c = desk_config();
    return generate_episodes(c, {AnomalyKind::none}, c.data.episodes_per_task, derive_seed(c.seed, "nominal"));
  }();
  return eps;
}

const std::vector<Episode>& bench_episodes() {
  static const auto eps = [] {
    const auto c = desk_config();
    std::vector<AnomalyKind> kinds(kAnomalyKinds.begin(), kAnomalyKinds.end());
    return generate_episodes(c, kinds, 6, derive_seed(c.seed, "bench"));
  }();
  return eps;
}

const Trained& trained(bool use_task, bool use_state) {
  static std::map<std::pair<bool, bool>, Trained> cache;
  const auto key = std::make_pair(use_task, use_state);
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  RunConfig c = desk_config();
  c.flow.use_task_embedding = use_task;
  c.flow.use_robot_state = use_state;
  const auto windows = windows_of(nominal_episodes(), c.flow.frames);
  const auto t0 = std::chrono::steady_clock::now();
  FlowModel model = build_model(c, make_codebook(c), compute_norm_stats(windows));
  train(model, windows, c.train);
  Trained t;
  t.train_seconds = seconds_since(t0);
  t.bench = evaluate_benchmark(model, {}, bench_episodes());
  std::fprintf(stderr, "  trained (task %d, state %d) in %.0f s\n", use_task, use_state, t.train_seconds);
  return cache[key] = std::move(t);
}

double kind_auc(const BenchReport& r, const char* kind) {
  const auto it = r.per_kind.find(kind);
  return it != r.per_kind.end() && it->second.auc ? *it->second.auc : std::nan("");
}

Outcome benchmark() {
  const auto& t = trained(true, true);
  const auto& r = t.bench;
  bool per_kind_ok = r.missing_kinds.empty();
  std::string kinds;
  for (const auto& [kind, km] : r.per_kind) {
    per_kind_ok = per_kind_ok && km.auc && *km.auc >= 0.85;
    kinds += fmt(", %s %.4f/%.4f", kind.c_str(), km.auc.value_or(std::nan("")), km.ap.value_or(std::nan("")));
  }
  const double auc = r.macro_auc.value_or(0), ap = r.macro_ap.value_or(0);
  return {auc >= 0.90 && ap >= 0.90 && per_kind_ok && t.train_seconds < 1800,
          fmt("macro AUC %.4f (>= 0.90), AP %.4f (>= 0.90); per kind AUC/AP (AUC >= 0.85)", auc, ap) + kinds +
              fmt("; training %.0f s (< 1800 s)", t.train_seconds)};
}

Outcome ablations() {
  const auto& full = trained(true, true).bench;
  const auto& no_task = trained(false, true).bench;
  const auto& no_state = trained(true, false).bench;
  const double mis = kind_auc(full, "spatial_misalignment") - kind_auc(no_task, "spatial_misalignment");
  const double open = kind_auc(full, "gripper_open") - kind_auc(no_state, "gripper_open");
  return {mis >= 0.05 && open >= 0.05,
          fmt("no task embedding: spatial_misalignment AUC %.4f -> %.4f (drop %.4f >= 0.05); no robot state: "
              "gripper_open AUC %.4f -> %.4f (drop %.4f >= 0.05)",
              kind_auc(full, "spatial_misalignment"), kind_auc(no_task, "spatial_misalignment"), mis,
              kind_auc(full, "gripper_open"), kind_auc(no_state, "gripper_open"), open)};
}

Outcome latency() {
  RunConfig c = desk_config();
  c.data.episode_length = 240;
  const auto ep = generate_episodes(c, {AnomalyKind::none}, 1, 99).front();
  const auto ws = windows_of({ep}, c.flow.frames);
  FlowModel model = build_model(c, make_codebook(c), compute_norm_stats(ws));
  model.actnorm_init(model.stack_x(ws), model.condition(ws));
  ThresholdProfile p;
  p.task_id = ep.task_id;
  p.upper = 0;
  const auto verdicts = run_monitor(model, p, ep.frames, c.monitor.policy());
  std::vector<double> ms;
  for (std::size_t i = 10; i < verdicts.size(); ++i) ms.push_back(verdicts[i].latency_ms);
  double mean = 0;
  for (double v : ms) mean += v;
  mean /= static_cast<double>(ms.size());
  std::sort(ms.begin(), ms.end());
  const double p95 = ms[ms.size() * 95 / 100];
  return {mean < 50, fmt("steady-state score+judge %.2f ms mean, %.2f ms p95 over %zu frames at T=12, N=32, "
                         "K=12 (< 50 ms)",
                         mean, p95, ms.size())};
}

// --- reproducibility ---------------------------------------------------------

int cli(const std::string& args) {
  const std::string cmd = std::string(RCNF_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> tree_contents(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = strip_header(read_text_file(e.path()));
  return out;
}

Outcome determinism() {
  const fs::path base = fs::temp_directory_path() / ("rcnf_accept_" + std::to_string(getpid()));
  fs::remove_all(base);
  std::vector<std::map<std::string, std::string>> runs;
  bool ok = true;
  // same paths both times, since reports record their input and output paths
  for (int run = 0; run < 2; ++run) {
    const fs::path d = base / "run";
    fs::remove_all(d);
    fs::create_directories(d);
    const auto p = [&](const char* f) { return (d / f).string(); };
    const std::string small = " --tasks 3 --seed 5";
    ok = ok && cli("gen-data --episodes-per-task 6 --length 24" + small + " --out-dir " + p("nominal")) == 0;
    ok = ok && cli("gen-data --episodes-per-task 2 --length 48 --anomaly all --seed 6 --tasks 3 --out-dir " +
                   p("bench")) == 0;
    ok = ok && cli("train --data " + p("nominal") + small + " --epochs 5 --next-stage-epoch 2 --windows-per-epoch 64" +
                   " --out " + p("model.json")) == 0;
    ok = ok && cli("calibrate --model " + p("model.json") + " --data " + p("nominal") + " --seed 5 --out " +
                   p("profiles.json")) == 0;
    ok = ok && cli("eval --model " + p("model.json") + " --data " + p("bench") + " --profiles " + p("profiles.json") +
                   " --out " + p("eval.json") + " --curves " + p("curves.csv")) == 0;
    runs.push_back(tree_contents(d));
  }
  fs::remove_all(base);
  if (!ok) return {false, "pipeline command failed"};
  std::vector<std::string> differ;
  for (const auto& [file, text] : runs[0])
    if (!runs[1].contains(file) || runs[1].at(file) != text) differ.push_back(file);
  const bool same = differ.empty() && runs[0].size() == runs[1].size();
  return {same, fmt("gen-data, 5-epoch train, calibrate, eval twice: %zu files compared, %zu differ", runs[0].size(),
                    differ.size()) +
                    (differ.empty() ? "" : " (first " + differ.front() + ")")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks{
      {"invertibility", invertibility},
      {"jacobian_exactness", jacobian_exactness},
      {"change_of_variables", change_of_variables},
      {"gradient_check", gradient_check},
      {"gaussian_prior", gaussian_prior},
      {"spherical_codebook", spherical_codebook},
      {"conformal_fpr", conformal_fpr},
      {"metric_oracles", metric_oracles},
      {"latency", latency},
      {"determinism", determinism},
      {"benchmark", benchmark},
      {"ablations", ablations},
  };
  int failed = 0;
  for (const auto& [name, fn] : checks) {
    if (argc > 1) {
      bool wanted = false;
      for (int i = 1; i < argc; ++i) wanted = wanted || name.find(argv[i]) != std::string::npos;
      if (!wanted) continue;
    }
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed ? 1 : 0;
}
