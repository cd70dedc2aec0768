#include <malloc.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <gmpxx.h>

#include "mvlab/experiment.hpp"

using namespace mvlab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

fs::path g_scratch;
const fs::path g_configs = fs::path(MVLAB_SOURCE_DIR) / "configs";
std::map<std::string, ChaosResult> g_chaos;

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", x);
  return buf;
}

SpectralGrid grid2(int modes) { return SpectralGrid{modes, 2.0 * M_PI, 2}; }

SpectralVelocityField random_velocity(const SpectralGrid& g, std::mt19937_64& gen, int max_mode) {
  std::normal_distribution<double> n01;
  VectorCoefficients raw(g);
  for (int k1 = -g.modes; k1 <= g.modes; ++k1)
    for (int k2 = -g.modes; k2 <= g.modes; ++k2) {
      if (!(k1 > 0 || (k1 == 0 && k2 > 0))) continue;
      if (std::max(std::abs(k1), std::abs(k2)) > max_mode) continue;
      const double a = 1.0 / std::sqrt(static_cast<double>(k1 * k1 + k2 * k2));
      for (int c = 0; c < 2; ++c) {
        const Complex z{a * n01(gen), a * n01(gen)};
        raw.comp[c][g.index(k1, k2)] = z;
        raw.comp[c][g.index(-k1, -k2)] = std::conj(z);
      }
    }
  return leray_project(std::move(raw));
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::map<std::string, std::string> result_files(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name == "timing.json") continue;
    out[name] = read_text_file(e.path());
  }
  return out;
}

RunOptions options_for(const std::string& name, unsigned threads) {
  RunOptions o;
  o.threads = threads;
  o.output_dir = (g_scratch / name).string();
  return o;
}

Outcome operator_identities() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 gen(1001);
  const auto g = grid2(32);
  double worst_energy = 0.0, worst_skew = 0.0, worst_stokes = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto u = random_velocity(g, gen, 32);
    const auto v = random_velocity(g, gen, 32);
    const auto z = random_velocity(g, gen, 32);
    const double nu = sobolev_norm(u, 0), nv1 = sobolev_norm(v, 1), nz1 = sobolev_norm(z, 1);
    worst_energy = std::max(worst_energy, std::abs(inner_product(bilinear_B(u, v), v, 0)) / (nu * nv1 * nv1));
    const double s = inner_product(bilinear_B(u, v), z, 0) + inner_product(bilinear_B(u, z), v, 0);
    worst_skew = std::max(worst_skew, std::abs(s) / (nu * nv1 * nz1));
    const double h1 = inner_product(u, u, 1);
    worst_stokes = std::max(worst_stokes, std::abs(inner_product(stokes_apply(u), u, 0) + h1) / h1);
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = worst_energy <= 1e-10 && worst_skew <= 1e-10 && worst_stokes <= 1e-12 && secs < 10.0;
  o.detail = "energy " + fmt(worst_energy) + ", skew " + fmt(worst_skew) + ", stokes " + fmt(worst_stokes) +
             ", " + fmt(secs) + " s";
  return o;
}

Outcome leray() {
  std::mt19937_64 gen(1002);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  int idempotent = 0, solenoidal = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto g = grid2(trial % 3 == 0 ? 17 : 32);
    const double scale = std::pow(10.0, trial % 7 - 3);
    VectorCoefficients raw(g);
    for (int c = 0; c < 2; ++c)
      for (auto& z : raw.comp[c]) z = {scale * u(gen), scale * u(gen)};
    const auto once = leray_project(raw);
    if (leray_project(once.raw()) == once) ++idempotent;
    if (max_coefficient_divergence(once.raw()) == 0.0) ++solenoidal;
  }
  return {idempotent == 100 && solenoidal == 100,
          std::to_string(idempotent) + "/100 idempotent, " + std::to_string(solenoidal) + "/100 divergence-free"};
}

Outcome cutoff() {
  std::mt19937_64 gen(1003);
  std::normal_distribution<double> g;
  std::uniform_int_distribution<int> dims(1, 6);
  int identity_fail = 0, lipschitz_fail = 0, moment_fail = 0;
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> x(dims(gen));
    for (auto& v : x) v = g(gen);
    double r = 0.0;
    for (double v : x) r += v * v;
    if (cutoff_psi(x, std::sqrt(r) * (1.0 + 1e-12)) != x) ++identity_fail;
  }
  double worst_ratio = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const std::size_t d = dims(gen);
    const double level = 0.1 + 3.0 * std::abs(g(gen));
    std::vector<double> x(d), y(d);
    for (auto& v : x) v = 3.0 * g(gen);
    for (std::size_t c = 0; c < d; ++c) y[c] = i % 2 ? x[c] + 0.01 * g(gen) : 3.0 * g(gen);
    const auto px = cutoff_psi(x, level), py = cutoff_psi(y, level);
    double num = 0.0, den = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      num += (px[c] - py[c]) * (px[c] - py[c]);
      den += (x[c] - y[c]) * (x[c] - y[c]);
    }
    if (den == 0.0) continue;
    const double ratio = std::sqrt(num / den);
    worst_ratio = std::max(worst_ratio, ratio);
    if (ratio > 2.0) ++lipschitz_fail;
  }
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 1 + i % 40, d = dims(gen);
    VectorEnsemble e(n, d);
    for (auto& v : e.values()) v = 2.0 * g(gen);
    const double level = 0.2 + 0.004 * i;
    const auto image = pushforward_truncate(e, level);
    auto moment = [](const VectorEnsemble& m) {
      mpq_class s = 0;
      for (std::size_t p = 0; p < m.size(); ++p)
        for (std::size_t c = 0; c < m.dim(); ++c) s += mpq_class(m[p][c]) * mpq_class(m[p][c]);
      return mpq_class(s / static_cast<unsigned long>(m.size()));
    };
    const mpq_class cap = mpq_class(level) * mpq_class(level);
    const mpq_class before = moment(e);
    if (!(moment(image) <= (before < cap ? before : cap))) ++moment_fail;
  }
  return {identity_fail == 0 && lipschitz_fail == 0 && moment_fail == 0,
          "identity failures " + std::to_string(identity_fail) + ", Lipschitz failures " +
              std::to_string(lipschitz_fail) + " (worst ratio " + fmt(worst_ratio) + "), moment failures " +
              std::to_string(moment_fail)};
}

Outcome closed_forms() {
  const auto t0 = std::chrono::steady_clock::now();
  SpdeModelSpec spec;
  spec.grid = grid2(8);
  spec.kernel.kind = KernelKind::zero;
  spec.nonlinear = false;
  VectorCoefficients raw(spec.grid);
  raw.comp[0][spec.grid.index(0, 1)] = Complex{0.0, -0.5};
  raw.comp[0][spec.grid.index(0, -1)] = Complex{0.0, 0.5};
  ParticleEnsemble<SpectralVelocityField> e;
  e.states.push_back(leray_project(std::move(raw)));
  SimulationOptions so;
  so.horizon = 1.0;
  so.dt = 1e-3;
  so.save_stride = 1000;
  const auto stokes = simulate_system(spec, e, so);
  const double amp = -2.0 * stokes.frames.back()[0].at(0, 0, 1).imag();
  const double stokes_err = std::abs(amp / std::exp(-1.0) - 1.0);

  const std::size_t n = 10000;
  MvsdeRunOptions mo;
  mo.horizon = 1.0;
  mo.dt = 1e-3;
  mo.save_stride = 1000;
  mo.master_seed = 1004;
  VectorEnsemble x0(n, 1);
  for (auto& v : x0.values()) v = 1.0;
  const auto path = simulate_mvsde(mean_field_ou(-1.0, 0.5, 1.0), std::move(x0), mo);
  const auto& last = path.frames.back();
  double m = 0.0, v = 0.0;
  for (std::size_t i = 0; i < n; ++i) m += last[i][0];
  m /= n;
  for (std::size_t i = 0; i < n; ++i) v += (last[i][0] - m) * (last[i][0] - m);
  v /= n - 1;
  const double var = (1.0 - std::exp(-2.0)) / 2.0;
  const double mean_z = (m - std::exp(-0.5)) / std::sqrt(var / n);
  double m4 = 0.0;
  for (std::size_t i = 0; i < n; ++i) m4 += std::pow(last[i][0] - m, 4);
  m4 /= n;
  const double var_se = std::sqrt((m4 - v * v) / n);
  const double var_z = (v - var) / var_se;
  const double secs = seconds_since(t0);
  return {stokes_err <= 1e-3 && std::abs(mean_z) <= 3.0 && std::abs(var_z) <= 3.0 && secs < 60.0,
          "stokes rel err " + fmt(stokes_err) + ", OU mean " + fmt(mean_z) + " SE, OU variance " + fmt(var_z) +
              " SE, " + fmt(secs) + " s"};
}

Outcome wasserstein() {
  std::mt19937_64 gen(1005);
  std::normal_distribution<double> g;
  auto cloud = [&](std::size_t n, std::size_t d, double s) {
    VectorEnsemble e(n, d);
    for (auto& v : e.values()) v = s * g(gen);
    return e;
  };
  double worst_brute = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 6, d = 1 + trial % 3;
    const auto a = cloud(n, d, 1.0), b = cloud(n, d, 2.0);
    const auto cost = pairwise_cost(a, b);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    double best = std::numeric_limits<double>::infinity();
    do {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) acc += (a[i][c] - b[perm[i]][c]) * (a[i][c] - b[perm[i]][c]);
      best = std::min(best, acc / static_cast<double>(n));
    } while (std::next_permutation(perm.begin(), perm.end()));
    worst_brute = std::max(worst_brute, std::abs(wasserstein2_squared(cost) - best));
  }
  double worst_sym = 0.0, worst_tri = -std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + trial % 30;
    const auto a = cloud(n, 2, 1.0), b = cloud(n, 2, 1.5), c = cloud(n, 2, 0.5);
    const double ab = wasserstein2(pairwise_cost(a, b)), ba = wasserstein2(pairwise_cost(b, a));
    const double bc = wasserstein2(pairwise_cost(b, c)), ac = wasserstein2(pairwise_cost(a, c));
    worst_sym = std::max(worst_sym, std::abs(ab - ba));
    worst_tri = std::max(worst_tri, ac - ab - bc);
  }
  return {worst_brute <= 1e-12 && worst_sym <= 1e-10 && worst_tri <= 1e-10,
          "brute-force gap " + fmt(worst_brute) + ", symmetry gap " + fmt(worst_sym) + ", triangle excess " +
              fmt(worst_tri)};
}

std::string schedule_means(const ChaosResult& r) {
  std::string s;
  for (const auto& a : r.aggregates) s += (s.empty() ? "" : " ") + std::to_string(a.n) + ":" + fmt(a.mean);
  return s;
}

Outcome chaos_decay() {
  auto t0 = std::chrono::steady_clock::now();
  const auto ou = run_chaos_experiment(parse_config_file((g_configs / "chaos_ou.toml").string()),
                                       options_for("chaos_ou_1", 1));
  const double ou_secs = seconds_since(t0);
  g_chaos["ou"] = ou;
  t0 = std::chrono::steady_clock::now();
  const auto nse = run_chaos_experiment(parse_config_file((g_configs / "chaos_nse.toml").string()),
                                        options_for("chaos_nse", 1));
  const double nse_secs = seconds_since(t0);
  g_chaos["nse"] = nse;
  const bool pass = ou.strictly_decreasing && ou.slope <= -0.3 && ou.failed_cells == 0 && ou_secs < 300.0 &&
                    nse.strictly_decreasing && nse.failed_cells == 0 && nse_secs < 2700.0;
  return {pass, "OU means " + schedule_means(ou) + " slope " + fmt(ou.slope) + " (" + fmt(ou_secs) +
                    " s); NSE means " + schedule_means(nse) + " slope " + fmt(nse.slope) + " (" + fmt(nse_secs) +
                    " s)"};
}

Outcome moment_bounds() {
  if (!g_chaos.count("nse")) return {false, "NSE chaos run missing"};
  const auto& r = g_chaos["nse"];
  std::string s;
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (const auto& a : r.aggregates) {
    s += (s.empty() ? "" : " ") + std::to_string(a.n) + ":" + fmt(a.mean_sup_moment);
    lo = std::min(lo, a.mean_sup_moment);
    hi = std::max(hi, a.mean_sup_moment);
  }
  const double spread = hi / lo - 1.0;
  return {spread < 0.25 && r.moments_within_band, "sup moments " + s + ", spread " + fmt(spread)};
}

Outcome stability() {
  const auto r = run_stability_experiment(parse_config_file((g_configs / "stability_nse.toml").string()),
                                          options_for("stability_1", 1));
  bool ratios_ok = !r.halving_ratios.empty();
  std::string s;
  for (double q : r.halving_ratios) {
    ratios_ok = ratios_ok && std::abs(q - 2.0) <= 0.4;
    s += (s.empty() ? "" : " ") + fmt(q);
  }
  double exponent = 0.0;
  for (const auto& run : r.runs) exponent = std::max(exponent, run.gronwall_exponent);
  return {ratios_ok && r.linear_scaling && r.gronwall_finite && std::isfinite(exponent),
          "halving ratios " + s + ", Gronwall exponent " + fmt(exponent) +
              (r.zero_gap_exact ? ", zero perturbation exact" : "")};
}

Outcome audits() {
  const auto shipped = run_audits(parse_config_file((g_configs / "audit_nse.toml").string()),
                                  options_for("audit_nse", 1));
  const auto broken = run_audits(parse_config_file((g_configs / "audit_broken.toml").string()),
                                 options_for("audit_broken", 1));
  bool shipped_ok = true;
  std::string s;
  for (const char* name : {"coercivity", "growth", "local_monotonicity"}) {
    bool found = false;
    for (const auto& rep : shipped.reports) {
      if (rep.condition != name) continue;
      found = true;
      shipped_ok = shipped_ok && rep.passed && std::isfinite(rep.fitted_constant) && rep.samples >= 500;
      s += std::string(s.empty() ? "" : ", ") + name + " " + fmt(rep.fitted_constant);
    }
    shipped_ok = shipped_ok && found;
  }
  bool broken_fails = false;
  for (const auto& rep : broken.reports)
    if (rep.condition == "coercivity") {
      broken_fails = !rep.passed;
      s += ", broken coercivity " + fmt(rep.fitted_constant);
    }
  return {shipped_ok && shipped.passed() && broken_fails, s};
}

Outcome determinism() {
  bool same = true;
  std::string s;
  auto compare = [&](const std::string& label, const fs::path& a, const fs::path& b) {
    const bool eq = result_files(a) == result_files(b) && !result_files(a).empty();
    same = same && eq;
    s += (s.empty() ? "" : ", ") + label + (eq ? " identical" : " DIFFER");
  };
  run_chaos_experiment(parse_config_file((g_configs / "chaos_ou.toml").string()), options_for("chaos_ou_8", 8));
  compare("chaos_ou", g_scratch / "chaos_ou_1", g_scratch / "chaos_ou_8");

  run_stability_experiment(parse_config_file((g_configs / "stability_nse.toml").string()),
                           options_for("stability_8", 8));
  compare("stability_nse", g_scratch / "stability_1", g_scratch / "stability_8");

  auto nse = parse_config_file((g_configs / "chaos_nse.toml").string());
  nse.seeds = 2;
  nse.n_schedule = {4, 16};
  nse.n_ref = 32;
  run_chaos_experiment(nse, options_for("chaos_nse_small_1", 1));
  run_chaos_experiment(nse, options_for("chaos_nse_small_8", 8));
  compare("chaos_nse (reduced)", g_scratch / "chaos_nse_small_1", g_scratch / "chaos_nse_small_8");

  run_audits(parse_config_file((g_configs / "audit_nse.toml").string()), options_for("audit_nse_8", 8));
  compare("audit_nse", g_scratch / "audit_nse", g_scratch / "audit_nse_8");
  return {same, s};
}

}  // namespace

int main() {
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  g_scratch = fs::temp_directory_path() / ("mvlab_acceptance_" + std::to_string(getpid()));
  fs::create_directories(g_scratch);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"operator identities", operator_identities},
      {"leray projection", leray},
      {"cut-off localization", cutoff},
      {"closed-form oracles", closed_forms},
      {"wasserstein exactness", wasserstein},
      {"chaos decay", chaos_decay},
      {"uniform moment bounds", moment_bounds},
      {"pathwise stability", stability},
      {"condition audits", audits},
      {"determinism", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("criterion %zu %s: %s (%s)\n", i + 1, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                o.detail.c_str());
    std::fflush(stdout);
  }
  fs::remove_all(g_scratch);
  return failures == 0 ? 0 : 1;
}
