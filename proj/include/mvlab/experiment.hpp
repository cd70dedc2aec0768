#pragma once

// Experiment runner: strict TOML configs, the chaos-decay, Galerkin-refinement
// and pathwise-stability studies, condition audits, and result persistence.
//
// Output files are a pure function of (config, master seed): summary.json,
// rows.csv, plot.csv and journal.jsonl. Wall-clock metrics go to timing.json,
// which is the only file allowed to differ between reruns.

#include "toml.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "mvlab/conditions.hpp"
#include "mvlab/core.hpp"
#include "mvlab/ensemble.hpp"
#include "mvlab/measures.hpp"
#include "mvlab/mvsde.hpp"
#include "mvlab/particles.hpp"
#include "mvlab/snapshot.hpp"
#include "mvlab/spectral.hpp"

namespace mvlab {

using nlohmann::json;

enum class ExperimentKind { simulate, chaos_decay, galerkin, stability, audit };

inline const char* to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::simulate: return "simulate";
    case ExperimentKind::chaos_decay: return "chaos_decay";
    case ExperimentKind::galerkin: return "galerkin";
    case ExperimentKind::stability: return "stability";
    case ExperimentKind::audit: return "audit";
  }
  return "?";
}

inline ExperimentKind parse_experiment_kind(const std::string& s) {
  for (auto k : {ExperimentKind::simulate, ExperimentKind::chaos_decay, ExperimentKind::galerkin,
                 ExperimentKind::stability, ExperimentKind::audit})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown experiment kind '" + s + "'");
}

// Finite-dimensional model parameters. mean_field_ou: b = a x + beta mean(mu),
// sigma = s I. cubic_confining: b = -x|x|^2 + mean(mu), sigma = (1 + |x|) I.
struct MvsdeParams {
  std::string name = "mean_field_ou";
  double a = -1.0;
  double beta = 0.5;
  double sigma = 1.0;
  std::size_t dim = 1;
  double x0 = 1.0;
  double init_std = 0.0;
  std::optional<double> truncation;
};

struct AuditParams {
  std::size_t samples = 500;
  std::string model = "shipped";  // shipped | broken_sigma
  AuditSampler sampler;
  double coercivity_constant = 1.0;
  double monotonicity_constant = 1.0;
  double growth_constant = 1.0;
  double bilinear_constant = 1.0;
  double kernel_constant = 1.0;
  double rho_coefficient = 1.0;
  double growth_beta = 2.0;
};

struct Tolerances {
  double chaos_slope_max = -0.3;
  double galerkin_min_ratio = 4.0;
  double galerkin_roundoff_floor = 1e-12;
  double moment_band = 0.25;
  double stability_ratio_tol = 0.2;
};

struct ExperimentConfig {
  int schema_version = 1;
  ExperimentKind kind = ExperimentKind::simulate;
  std::string output_dir = "out";
  bool finite_dimensional = false;  // model.type = "mvsde"
  SpdeModelSpec spde;
  InitialSampler initial;
  MvsdeParams mvsde;

  double horizon = 1.0;
  double dt = 0.01;
  std::size_t save_stride = 1;
  std::vector<std::size_t> n_schedule;
  std::size_t n_ref = 0;
  std::size_t particles = 1;
  std::size_t seeds = 1;
  std::uint64_t master_seed = 0;
  std::size_t subsample = 0;  // 0: N

  std::vector<int> mode_schedule{8, 16, 32, 64};
  std::vector<double> perturbations{1e-3, 5e-4, 0.0};
  AuditParams audit;
  Tolerances tolerances;
};

// ---------------------------------------------------------------------------
// TOML ingestion

namespace detail {

inline void check_keys(const toml::table& t, const std::string& where, std::initializer_list<const char*> allowed) {
  for (const auto& [key, _] : t) {
    const std::string k(key.str());
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; }))
      throw ConfigError("unknown key '" + (where.empty() ? k : where + "." + k) + "'");
  }
}

inline const toml::table* subtable(const toml::table& t, const char* key, const std::string& where) {
  const auto* node = t.get(key);
  if (!node) return nullptr;
  const auto* tab = node->as_table();
  if (!tab) throw ConfigError("'" + where + key + "' must be a table");
  return tab;
}

inline double get_number(const toml::table& t, const char* key, double fallback, const std::string& where) {
  const auto* node = t.get(key);
  if (!node) return fallback;
  if (auto v = node->value<double>()) return *v;
  throw ConfigError("'" + where + key + "' must be a number");
}

inline std::int64_t get_integer(const toml::table& t, const char* key, std::int64_t fallback, const std::string& where) {
  const auto* node = t.get(key);
  if (!node) return fallback;
  if (auto v = node->as_integer()) return v->get();
  throw ConfigError("'" + where + key + "' must be an integer");
}

inline std::size_t get_count(const toml::table& t, const char* key, std::size_t fallback, const std::string& where) {
  const auto v = get_integer(t, key, static_cast<std::int64_t>(fallback), where);
  if (v < 0) throw ConfigError("'" + where + key + "' must be nonnegative");
  return static_cast<std::size_t>(v);
}

inline bool get_bool(const toml::table& t, const char* key, bool fallback, const std::string& where) {
  const auto* node = t.get(key);
  if (!node) return fallback;
  if (auto v = node->as_boolean()) return v->get();
  throw ConfigError("'" + where + key + "' must be a boolean");
}

inline std::string get_string(const toml::table& t, const char* key, const std::string& fallback,
                              const std::string& where) {
  const auto* node = t.get(key);
  if (!node) return fallback;
  if (auto v = node->as_string()) return v->get();
  throw ConfigError("'" + where + key + "' must be a string");
}

template <class T>
std::vector<T> get_array(const toml::table& t, const char* key, std::vector<T> fallback, const std::string& where) {
  const auto* node = t.get(key);
  if (!node) return fallback;
  const auto* arr = node->as_array();
  if (!arr) throw ConfigError("'" + where + key + "' must be an array");
  std::vector<T> out;
  for (const auto& el : *arr) {
    if constexpr (std::is_floating_point_v<T>) {
      auto v = el.value<double>();
      if (!v) throw ConfigError("'" + where + key + "' must hold numbers");
      out.push_back(*v);
    } else {
      auto v = el.as_integer();
      if (!v || v->get() < 0) throw ConfigError("'" + where + key + "' must hold nonnegative integers");
      out.push_back(static_cast<T>(v->get()));
    }
  }
  return out;
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  if (c.schema_version != 1) throw ConfigError("unsupported schema_version " + std::to_string(c.schema_version));
  const std::size_t steps = step_count(c.horizon, c.dt);
  const double back = c.dt * static_cast<double>(steps);
  if (std::abs(back - c.horizon) > std::nextafter(c.horizon, std::numeric_limits<double>::infinity()) - c.horizon)
    throw ConfigError("dt * steps must equal the horizon within 1 ulp");
  if (c.save_stride == 0) throw ConfigError("save_stride must be positive");
  if (c.finite_dimensional) {
    if (c.mvsde.dim == 0) throw ConfigError("mvsde dim must be positive");
    if (c.mvsde.name != "mean_field_ou" && c.mvsde.name != "cubic_confining")
      throw ConfigError("unknown mvsde model '" + c.mvsde.name + "'");
    if (c.mvsde.truncation && !(*c.mvsde.truncation > 0.0)) throw ConfigError("truncation level must be positive");
    if (c.mvsde.init_std < 0.0 || c.mvsde.sigma < 0.0) throw ConfigError("standard deviations must be nonnegative");
  } else {
    validate(c.spde);
  }
  switch (c.kind) {
    case ExperimentKind::chaos_decay:
      if (c.n_schedule.empty()) throw ConfigError("chaos_decay needs a nonempty n_schedule");
      for (std::size_t i = 0; i < c.n_schedule.size(); ++i) {
        if (c.n_schedule[i] == 0) throw ConfigError("particle counts must be positive");
        if (i > 0 && c.n_schedule[i] <= c.n_schedule[i - 1]) throw ConfigError("n_schedule must be strictly increasing");
      }
      if (c.seeds == 0) throw ConfigError("seeds must be positive");
      if (c.n_ref == 0) throw ConfigError("chaos_decay needs n_ref");
      for (auto n : c.n_schedule) {
        const std::size_t sub = c.subsample == 0 ? n : c.subsample;
        if (sub > n || sub > c.n_ref) throw ConfigError("subsample must not exceed N or N_ref");
      }
      break;
    case ExperimentKind::galerkin:
      if (c.finite_dimensional) throw ConfigError("galerkin needs an spde model");
      if (c.mode_schedule.size() < 2) throw ConfigError("mode_schedule needs at least two entries");
      for (std::size_t i = 0; i < c.mode_schedule.size(); ++i) {
        if (c.mode_schedule[i] <= 0) throw ConfigError("mode counts must be positive");
        if (i > 0 && c.mode_schedule[i] <= c.mode_schedule[i - 1])
          throw ConfigError("mode_schedule must be strictly increasing");
      }
      if (c.particles == 0) throw ConfigError("particles must be positive");
      break;
    case ExperimentKind::stability:
      if (c.finite_dimensional) throw ConfigError("stability needs an spde model");
      if (c.perturbations.empty()) throw ConfigError("stability needs perturbations");
      for (double e : c.perturbations)
        if (!(e >= 0.0) || !std::isfinite(e)) throw ConfigError("perturbations must be finite and nonnegative");
      if (c.particles == 0) throw ConfigError("particles must be positive");
      break;
    case ExperimentKind::audit:
      if (c.finite_dimensional) throw ConfigError("audit needs an spde model");
      if (c.audit.samples == 0) throw ConfigError("audit samples must be positive");
      if (c.audit.model != "shipped" && c.audit.model != "broken_sigma")
        throw ConfigError("audit model must be 'shipped' or 'broken_sigma'");
      if (c.audit.model == "broken_sigma" && c.spde.equation != Equation::navier_stokes_2d)
        throw ConfigError("broken_sigma is a navier_stokes_2d model");
      if (c.audit.sampler.decays.empty() || c.audit.sampler.scales.empty() || c.audit.sampler.measure_size == 0)
        throw ConfigError("audit sampler needs decays, scales and a positive measure_size");
      break;
    case ExperimentKind::simulate:
      if (c.particles == 0) throw ConfigError("particles must be positive");
      break;
  }
}

inline ExperimentConfig parse_config_table(const toml::table& root) {
  using namespace detail;
  ExperimentConfig c;
  check_keys(root, "", {"schema_version", "experiment", "model", "run", "galerkin", "stability", "audit", "tolerances"});
  c.schema_version = static_cast<int>(get_integer(root, "schema_version", 1, ""));

  const auto* ex = subtable(root, "experiment", "");
  if (!ex) throw ConfigError("missing [experiment] table");
  check_keys(*ex, "experiment", {"kind", "output_dir"});
  c.kind = parse_experiment_kind(get_string(*ex, "kind", "", "experiment."));
  c.output_dir = get_string(*ex, "output_dir", c.output_dir, "experiment.");

  const auto* m = subtable(root, "model", "");
  if (!m) throw ConfigError("missing [model] table");
  check_keys(*m, "model", {"type", "equation", "modes", "length", "dimension", "viscosity", "hyperdiffusion", "phi",
                           "nonlinear", "blowup_energy", "kernel", "noise", "initial", "mvsde"});
  const std::string type = get_string(*m, "type", "spde", "model.");
  if (type != "spde" && type != "mvsde") throw ConfigError("model.type must be 'spde' or 'mvsde'");
  c.finite_dimensional = type == "mvsde";
  auto& s = c.spde;
  s.equation = parse_equation(get_string(*m, "equation", "navier_stokes_2d", "model."));
  s.grid.modes = static_cast<int>(get_integer(*m, "modes", 16, "model."));
  s.grid.length = get_number(*m, "length", 2.0 * std::numbers::pi, "model.");
  s.grid.dimension =
      static_cast<int>(get_integer(*m, "dimension", s.equation == Equation::kuramoto_sivashinsky ? 1 : 2, "model."));
  s.viscosity = get_number(*m, "viscosity", 1.0, "model.");
  s.hyperdiffusion = get_number(*m, "hyperdiffusion", 1.0, "model.");
  s.phi.coeffs = get_array<double>(*m, "phi", s.equation == Equation::navier_stokes_2d ? std::vector<double>{}
                                                                                         : Polynomial::double_well().coeffs,
                                   "model.");
  s.nonlinear = get_bool(*m, "nonlinear", true, "model.");
  s.blowup_energy = get_number(*m, "blowup_energy", 1e12, "model.");
  if (const auto* k = subtable(*m, "kernel", "model.")) {
    check_keys(*k, "model.kernel", {"kind", "coefficient", "noise_alpha", "clip_radius"});
    s.kernel.kind = parse_kernel_kind(get_string(*k, "kind", "stokes_drag", "model.kernel."));
    s.kernel.coefficient = get_number(*k, "coefficient", 1.0, "model.kernel.");
    s.kernel.noise_alpha = get_number(*k, "noise_alpha", 0.0, "model.kernel.");
    s.kernel.clip_radius = get_number(*k, "clip_radius", 10.0, "model.kernel.");
  }
  if (const auto* n = subtable(*m, "noise", "model.")) {
    check_keys(*n, "model.noise", {"modes", "amplitude", "mean_mode_amplitude"});
    s.noise.modes = static_cast<int>(get_integer(*n, "modes", 0, "model.noise."));
    s.noise.amplitude = get_number(*n, "amplitude", 0.0, "model.noise.");
    s.noise.mean_mode_amplitude = get_number(*n, "mean_mode_amplitude", 0.0, "model.noise.");
  }
  if (const auto* i = subtable(*m, "initial", "model.")) {
    check_keys(*i, "model.initial", {"decay", "max_mode", "amplitude", "with_mean"});
    c.initial.decay = get_number(*i, "decay", c.initial.decay, "model.initial.");
    c.initial.max_mode = static_cast<int>(get_integer(*i, "max_mode", c.initial.max_mode, "model.initial."));
    c.initial.amplitude = get_number(*i, "amplitude", c.initial.amplitude, "model.initial.");
    c.initial.with_mean = get_bool(*i, "with_mean", c.initial.with_mean, "model.initial.");
  }
  if (const auto* v = subtable(*m, "mvsde", "model.")) {
    check_keys(*v, "model.mvsde", {"name", "a", "beta", "sigma", "dim", "x0", "init_std", "truncation"});
    auto& p = c.mvsde;
    p.name = get_string(*v, "name", p.name, "model.mvsde.");
    p.a = get_number(*v, "a", p.a, "model.mvsde.");
    p.beta = get_number(*v, "beta", p.beta, "model.mvsde.");
    p.sigma = get_number(*v, "sigma", p.sigma, "model.mvsde.");
    p.dim = get_count(*v, "dim", p.dim, "model.mvsde.");
    p.x0 = get_number(*v, "x0", p.x0, "model.mvsde.");
    p.init_std = get_number(*v, "init_std", p.init_std, "model.mvsde.");
    if (v->get("truncation")) p.truncation = get_number(*v, "truncation", 0.0, "model.mvsde.");
  }

  if (const auto* r = subtable(root, "run", "")) {
    check_keys(*r, "run", {"horizon", "dt", "save_stride", "n_schedule", "n_ref", "particles", "seeds", "master_seed",
                           "subsample"});
    c.horizon = get_number(*r, "horizon", c.horizon, "run.");
    c.dt = get_number(*r, "dt", c.dt, "run.");
    c.save_stride = get_count(*r, "save_stride", c.save_stride, "run.");
    c.n_schedule = get_array<std::size_t>(*r, "n_schedule", c.n_schedule, "run.");
    c.n_ref = get_count(*r, "n_ref", c.n_ref, "run.");
    c.particles = get_count(*r, "particles", c.particles, "run.");
    c.seeds = get_count(*r, "seeds", c.seeds, "run.");
    c.master_seed = static_cast<std::uint64_t>(get_integer(*r, "master_seed", 0, "run."));
    c.subsample = get_count(*r, "subsample", c.subsample, "run.");
  }
  if (const auto* g = subtable(root, "galerkin", "")) {
    check_keys(*g, "galerkin", {"mode_schedule"});
    const auto ms = get_array<std::size_t>(*g, "mode_schedule", {}, "galerkin.");
    if (!ms.empty()) c.mode_schedule.assign(ms.begin(), ms.end());
  }
  if (const auto* st = subtable(root, "stability", "")) {
    check_keys(*st, "stability", {"perturbations"});
    c.perturbations = get_array<double>(*st, "perturbations", c.perturbations, "stability.");
  }
  if (const auto* a = subtable(root, "audit", "")) {
    check_keys(*a, "audit", {"samples", "model", "decays", "scales", "max_mode", "measure_size", "seed",
                             "coercivity_constant", "monotonicity_constant", "growth_constant", "bilinear_constant",
                             "kernel_constant", "rho_coefficient", "growth_beta"});
    auto& p = c.audit;
    p.samples = get_count(*a, "samples", p.samples, "audit.");
    p.model = get_string(*a, "model", p.model, "audit.");
    p.sampler.decays = get_array<double>(*a, "decays", p.sampler.decays, "audit.");
    p.sampler.scales = get_array<double>(*a, "scales", p.sampler.scales, "audit.");
    p.sampler.max_mode = static_cast<int>(get_integer(*a, "max_mode", p.sampler.max_mode, "audit."));
    p.sampler.measure_size = get_count(*a, "measure_size", p.sampler.measure_size, "audit.");
    p.sampler.seed = static_cast<std::uint64_t>(get_integer(*a, "seed", 0, "audit."));
    p.coercivity_constant = get_number(*a, "coercivity_constant", p.coercivity_constant, "audit.");
    p.monotonicity_constant = get_number(*a, "monotonicity_constant", p.monotonicity_constant, "audit.");
    p.growth_constant = get_number(*a, "growth_constant", p.growth_constant, "audit.");
    p.bilinear_constant = get_number(*a, "bilinear_constant", p.bilinear_constant, "audit.");
    p.kernel_constant = get_number(*a, "kernel_constant", p.kernel_constant, "audit.");
    p.rho_coefficient = get_number(*a, "rho_coefficient", p.rho_coefficient, "audit.");
    p.growth_beta = get_number(*a, "growth_beta", p.growth_beta, "audit.");
  }
  if (const auto* t = subtable(root, "tolerances", "")) {
    check_keys(*t, "tolerances", {"chaos_slope_max", "galerkin_min_ratio", "galerkin_roundoff_floor", "moment_band",
                                  "stability_ratio_tol"});
    auto& p = c.tolerances;
    p.chaos_slope_max = get_number(*t, "chaos_slope_max", p.chaos_slope_max, "tolerances.");
    p.galerkin_min_ratio = get_number(*t, "galerkin_min_ratio", p.galerkin_min_ratio, "tolerances.");
    p.galerkin_roundoff_floor = get_number(*t, "galerkin_roundoff_floor", p.galerkin_roundoff_floor, "tolerances.");
    p.moment_band = get_number(*t, "moment_band", p.moment_band, "tolerances.");
    p.stability_ratio_tol = get_number(*t, "stability_ratio_tol", p.stability_ratio_tol, "tolerances.");
  }
  validate(c);
  return c;
}

inline ExperimentConfig parse_config_string(const std::string& text) {
  try {
    return parse_config_table(toml::parse(text));
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "config parse error: " << e.description() << " (line " << e.source().begin.line << ")";
    throw ConfigError(os.str());
  }
}

inline ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_string(ss.str());
}

// Canonical form: every field, sorted keys, shortest round-trip doubles. The
// output directory is not part of the experiment's identity.
inline json canonical_json(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["kind"] = to_string(c.kind);
  if (c.finite_dimensional) {
    const auto& p = c.mvsde;
    j["model"] = {{"type", "mvsde"}, {"name", p.name}, {"a", p.a}, {"beta", p.beta}, {"sigma", p.sigma},
                  {"dim", p.dim}, {"x0", p.x0}, {"init_std", p.init_std}};
    j["model"]["truncation"] = p.truncation ? json(*p.truncation) : json(nullptr);
  } else {
    const auto& s = c.spde;
    j["model"] = {{"type", "spde"},
                  {"equation", to_string(s.equation)},
                  {"modes", s.grid.modes},
                  {"length", s.grid.length},
                  {"dimension", s.grid.dimension},
                  {"viscosity", s.viscosity},
                  {"hyperdiffusion", s.hyperdiffusion},
                  {"phi", s.phi.coeffs},
                  {"nonlinear", s.nonlinear},
                  {"blowup_energy", s.blowup_energy},
                  {"kernel",
                   {{"kind", to_string(s.kernel.kind)},
                    {"coefficient", s.kernel.coefficient},
                    {"noise_alpha", s.kernel.noise_alpha},
                    {"clip_radius", s.kernel.clip_radius}}},
                  {"noise",
                   {{"modes", s.noise.modes},
                    {"amplitude", s.noise.amplitude},
                    {"mean_mode_amplitude", s.noise.mean_mode_amplitude}}},
                  {"initial",
                   {{"decay", c.initial.decay},
                    {"max_mode", c.initial.max_mode},
                    {"amplitude", c.initial.amplitude},
                    {"with_mean", c.initial.with_mean}}}};
  }
  j["run"] = {{"horizon", c.horizon},     {"dt", c.dt},           {"save_stride", c.save_stride},
              {"n_schedule", c.n_schedule}, {"n_ref", c.n_ref},   {"particles", c.particles},
              {"seeds", c.seeds},         {"master_seed", c.master_seed}, {"subsample", c.subsample}};
  j["galerkin"] = {{"mode_schedule", c.mode_schedule}};
  j["stability"] = {{"perturbations", c.perturbations}};
  const auto& a = c.audit;
  j["audit"] = {{"samples", a.samples},
                {"model", a.model},
                {"decays", a.sampler.decays},
                {"scales", a.sampler.scales},
                {"max_mode", a.sampler.max_mode},
                {"measure_size", a.sampler.measure_size},
                {"seed", a.sampler.seed},
                {"coercivity_constant", a.coercivity_constant},
                {"monotonicity_constant", a.monotonicity_constant},
                {"growth_constant", a.growth_constant},
                {"bilinear_constant", a.bilinear_constant},
                {"kernel_constant", a.kernel_constant},
                {"rho_coefficient", a.rho_coefficient},
                {"growth_beta", a.growth_beta}};
  const auto& t = c.tolerances;
  j["tolerances"] = {{"chaos_slope_max", t.chaos_slope_max},
                     {"galerkin_min_ratio", t.galerkin_min_ratio},
                     {"galerkin_roundoff_floor", t.galerkin_roundoff_floor},
                     {"moment_band", t.moment_band},
                     {"stability_ratio_tol", t.stability_ratio_tol}};
  return j;
}

inline std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a64(canonical_json(c).dump())); }

// ---------------------------------------------------------------------------
// Persistence helpers

inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) throw Error("malformed number '" + s + "'");
  return v;
}

inline void write_text_file(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path().empty() ? "." : p.parent_path());
  const auto tmp = p.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp);
    os << text;
    if (!os) throw Error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, p);
}

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Error("cannot read " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Append-only log of finished cells. Lines are flushed as cells complete; the
// final rewrite sorts them by cell key so the file is deterministic.
class CellJournal {
 public:
  CellJournal(std::filesystem::path path, std::string hash, bool resume) : path_(std::move(path)), hash_(std::move(hash)) {
    std::filesystem::create_directories(path_.parent_path());
    if (resume && std::filesystem::exists(path_)) {
      std::ifstream is(path_);
      std::string line;
      while (std::getline(is, line)) {
        if (line.empty()) continue;
        json j;
        try {
          j = json::parse(line);
        } catch (const json::exception&) {
          continue;  // torn final line from an interrupted run
        }
        if (j.value("config_hash", "") != hash_) continue;
        done_[j.at("cell").get<std::string>()] = j;
      }
    }
    std::ofstream os(path_, std::ios::trunc);
    for (const auto& [_, j] : done_) os << j.dump() << "\n";
  }

  const json* find(const std::string& cell) const {
    const auto it = done_.find(cell);
    return it == done_.end() ? nullptr : &it->second;
  }
  std::size_t resumed() const { return done_.size(); }

  void record(const std::string& cell, json row) {
    row["config_hash"] = hash_;
    row["cell"] = cell;
    std::lock_guard lock(mutex_);
    std::ofstream os(path_, std::ios::app);
    os << row.dump() << "\n";
    os.flush();
    done_[cell] = std::move(row);
  }

  void finalize() const {
    std::string text;
    for (const auto& [_, j] : done_) text += j.dump() + "\n";
    write_text_file(path_, text);
  }

 private:
  std::filesystem::path path_;
  std::string hash_;
  std::map<std::string, json> done_;
  std::mutex mutex_;
};

struct RunOptions {
  unsigned threads = 1;
  bool resume = false;
  std::optional<std::string> output_dir;
  std::optional<std::uint64_t> seed;
};

inline ExperimentConfig apply_overrides(ExperimentConfig c, const RunOptions& o) {
  if (o.output_dir) c.output_dir = *o.output_dir;
  if (o.seed) c.master_seed = *o.seed;
  return c;
}

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

inline void write_timing(const std::filesystem::path& dir, double seconds, double particle_mode_steps) {
  json t{{"wall_seconds", seconds},
         {"particle_mode_steps", particle_mode_steps},
         {"particle_mode_steps_per_second", seconds > 0.0 ? particle_mode_steps / seconds : 0.0}};
  write_text_file(dir / "timing.json", t.dump(2) + "\n");
}

// Work queue over independent cells; result slots are indexed by cell so the
// output does not depend on completion order.
template <class Body>
void run_cells(std::size_t count, unsigned workers, Body&& body) {
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(count, 1))));
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  auto loop = [&](unsigned w) {
    try {
      for (std::size_t i = next++; i < count; i = next++) body(i);
    } catch (...) {
      errors[w] = std::current_exception();
      next = count;
    }
  };
  if (workers == 1) {
    loop(0);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(loop, w);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Model construction

inline MvsdeModel build_mvsde_model(const MvsdeParams& p) {
  if (p.name == "mean_field_ou") return mean_field_ou(p.a, p.beta, p.sigma, p.dim);
  if (p.name == "cubic_confining") return cubic_confining_model(p.dim);
  throw ConfigError("unknown mvsde model '" + p.name + "'");
}

inline VectorEnsemble mvsde_initial(const MvsdeParams& p, std::span<const std::uint64_t> labels, std::uint64_t seed) {
  VectorEnsemble e(labels.size(), p.dim);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    SequentialRng rng(derive_seed(seed ^ 0x1A17ULL, labels[i]));
    for (std::size_t c = 0; c < p.dim; ++c) e[i][c] = p.x0 + p.init_std * rng.normal();
  }
  return e;
}

inline PathEnsemble<VectorEnsemble> run_mvsde(const ExperimentConfig& c, std::size_t n, std::uint64_t seed,
                                              unsigned threads) {
  MvsdeRunOptions o;
  o.horizon = c.horizon;
  o.dt = c.dt;
  o.save_stride = c.save_stride;
  o.master_seed = seed;
  o.threads = threads;
  const auto labels = identity_labels(n);
  auto init = mvsde_initial(c.mvsde, labels, seed);
  const MvsdeModel base = build_mvsde_model(c.mvsde);
  if (c.mvsde.truncation) return simulate_mvsde(TruncatedModel{base, *c.mvsde.truncation}, std::move(init), o);
  return simulate_mvsde(base, std::move(init), o);
}

template <class Field>
PathEnsemble<ParticleEnsemble<Field>> run_spde(const ExperimentConfig& c, std::size_t n, std::uint64_t seed,
                                               unsigned threads) {
  SpdeModelSpec spec = c.spde;
  spec.noise.master_seed = seed;
  InitialSampler init = c.initial;
  init.seed = seed;
  SimulationOptions o;
  o.horizon = c.horizon;
  o.dt = c.dt;
  o.save_stride = c.save_stride;
  o.threads = threads;
  return simulate_system(spec, sample_initial_ensemble<Field>(spec.grid, init, n), o);
}

// ---------------------------------------------------------------------------
// Chaos decay

struct ChaosRow {
  std::size_t n = 0;
  std::size_t seed_index = 0;
  std::uint64_t seed = 0;
  double statistic = 0.0;
  double sup_moment = 0.0;  // sup_t (1/N) sum_i ||X_t^i||^2 of the N-particle run
  std::string status = "ok";  // ok | blowup
};

struct ChaosAggregate {
  std::size_t n = 0;
  std::size_t count = 0;
  std::size_t failed = 0;
  double mean = 0.0;
  double stderr_ = 0.0;
  double mean_sup_moment = 0.0;
};

struct ChaosResult {
  std::string config_hash;
  std::vector<ChaosRow> rows;
  std::vector<ChaosAggregate> aggregates;
  double slope = std::numeric_limits<double>::quiet_NaN();
  bool strictly_decreasing = false;
  bool slope_ok = false;
  std::size_t failed_cells = 0;
  std::size_t resumed_cells = 0;
  double moment_spread = 0.0;  // max/min - 1 of the per-N mean sup moments
  bool moments_within_band = false;
};

inline std::vector<ChaosAggregate> aggregate_rows(const std::vector<ChaosRow>& rows,
                                                  const std::vector<std::size_t>& schedule) {
  std::vector<ChaosAggregate> out;
  for (auto n : schedule) {
    ChaosAggregate a;
    a.n = n;
    CompensatedSum sum, moments;
    std::vector<double> vals;
    for (const auto& r : rows) {
      if (r.n != n) continue;
      if (r.status != "ok") {
        ++a.failed;
        continue;
      }
      vals.push_back(r.statistic);
      sum.add(r.statistic);
      moments.add(r.sup_moment);
    }
    a.count = vals.size();
    if (a.count > 0) {
      a.mean = sum.value() / static_cast<double>(a.count);
      a.mean_sup_moment = moments.value() / static_cast<double>(a.count);
      if (a.count > 1) {
        CompensatedSum sq;
        for (double v : vals) sq.add((v - a.mean) * (v - a.mean));
        a.stderr_ = std::sqrt(sq.value() / static_cast<double>(a.count - 1) / static_cast<double>(a.count));
      }
    } else {
      a.mean = std::numeric_limits<double>::quiet_NaN();
      a.mean_sup_moment = std::numeric_limits<double>::quiet_NaN();
    }
    out.push_back(a);
  }
  return out;
}

// Least-squares slope of log(y) against log(x) over points with y > 0.
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] > 0.0 && y[i] > 0.0 && std::isfinite(y[i])) {
      lx.push_back(std::log(x[i]));
      ly.push_back(std::log(y[i]));
    }
  if (lx.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const double n = static_cast<double>(lx.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  return sxy / sxx;
}

inline void finish_chaos(ChaosResult& r, const ExperimentConfig& c) {
  r.aggregates = aggregate_rows(r.rows, c.n_schedule);
  std::vector<double> xs, ys;
  r.strictly_decreasing = true;
  r.failed_cells = 0;
  for (std::size_t i = 0; i < r.aggregates.size(); ++i) {
    const auto& a = r.aggregates[i];
    r.failed_cells += a.failed;
    xs.push_back(static_cast<double>(a.n));
    ys.push_back(a.mean);
    if (!std::isfinite(a.mean) || (i > 0 && !(a.mean < r.aggregates[i - 1].mean))) r.strictly_decreasing = false;
  }
  r.slope = loglog_slope(xs, ys);
  r.slope_ok = std::isfinite(r.slope) && r.slope <= c.tolerances.chaos_slope_max;
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (const auto& a : r.aggregates) {
    lo = std::min(lo, a.mean_sup_moment);
    hi = std::max(hi, a.mean_sup_moment);
  }
  r.moment_spread = lo > 0.0 ? hi / lo - 1.0 : (hi == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
  if (std::isnan(lo) || std::isnan(hi)) r.moment_spread = std::numeric_limits<double>::quiet_NaN();
  r.moments_within_band = r.moment_spread <= c.tolerances.moment_band;
}

inline std::string cell_key(std::size_t n, std::size_t seed_index) {
  std::ostringstream os;
  os << "n=" << std::setw(8) << std::setfill('0') << n << "/seed=" << std::setw(6) << std::setfill('0') << seed_index;
  return os.str();
}

inline json chaos_summary_json(const ChaosResult& r, const ExperimentConfig& c) {
  json j;
  j["schema_version"] = 1;
  j["kind"] = "chaos_decay";
  j["config_hash"] = r.config_hash;
  j["config"] = canonical_json(c);
  json aggs = json::array();
  for (const auto& a : r.aggregates)
    aggs.push_back({{"n", a.n},
                    {"count", a.count},
                    {"failed", a.failed},
                    {"mean", std::isfinite(a.mean) ? json(a.mean) : json(nullptr)},
                    {"stderr", a.stderr_},
                    {"mean_sup_moment", std::isfinite(a.mean_sup_moment) ? json(a.mean_sup_moment) : json(nullptr)}});
  j["aggregates"] = aggs;
  j["loglog_slope"] = std::isfinite(r.slope) ? json(r.slope) : json(nullptr);
  j["strictly_decreasing"] = r.strictly_decreasing;
  j["slope_within_tolerance"] = r.slope_ok;
  j["failed_cells"] = r.failed_cells;
  j["moment_spread"] = std::isfinite(r.moment_spread) ? json(r.moment_spread) : json(nullptr);
  j["moments_within_band"] = r.moments_within_band;
  return j;
}

inline std::string chaos_rows_csv(const ChaosResult& r) {
  std::string s = "n,seed_index,seed,statistic,sup_moment,status\n";
  for (const auto& row : r.rows)
    s += std::to_string(row.n) + "," + std::to_string(row.seed_index) + "," + std::to_string(row.seed) + "," +
         format_double(row.statistic) + "," + format_double(row.sup_moment) + "," + row.status + "\n";
  return s;
}

inline std::string plot_csv(const std::vector<double>& x, const std::vector<double>& y, const std::vector<double>& err) {
  std::string s = "x,y,err\n";
  for (std::size_t i = 0; i < x.size(); ++i)
    s += format_double(x[i]) + "," + format_double(y[i]) + "," + format_double(err[i]) + "\n";
  return s;
}

template <class Runner>
ChaosResult chaos_impl(const ExperimentConfig& c, const RunOptions& opt, Runner&& run, double modes_per_particle) {
  Timer timer;
  const std::filesystem::path dir = c.output_dir;
  std::filesystem::create_directories(dir);
  ChaosResult r;
  r.config_hash = config_hash(c);
  CellJournal journal(dir / "journal.jsonl", r.config_hash, opt.resume);
  r.resumed_cells = journal.resumed();

  struct Cell {
    std::size_t n, seed_index;
  };
  std::vector<Cell> cells;
  for (auto n : c.n_schedule)
    for (std::size_t s = 0; s < c.seeds; ++s) cells.push_back({n, s});
  r.rows.resize(cells.size());

  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& cell = cells[i];
    auto& row = r.rows[i];
    row.n = cell.n;
    row.seed_index = cell.seed_index;
    row.seed = derive_seed(c.master_seed, cell.seed_index);
    if (const json* done = journal.find(cell_key(cell.n, cell.seed_index))) {
      row.status = done->at("status").get<std::string>();
      row.statistic = done->at("statistic").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                       : done->at("statistic").get<double>();
      row.sup_moment = done->at("sup_moment").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                         : done->at("sup_moment").get<double>();
    } else {
      todo.push_back(i);
    }
  }

  double work = 0.0;
  const std::size_t steps = step_count(c.horizon, c.dt);
  if (!todo.empty()) {
    // One reference system on its own seed stream, shared by every cell.
    const std::uint64_t ref_seed = derive_seed(~c.master_seed, 0x5EFULL);
    const auto reference = run(c.n_ref, ref_seed, opt.threads);
    work += static_cast<double>(c.n_ref * steps) * modes_per_particle;
    const unsigned inner = 1;
    run_cells(todo.size(), opt.threads, [&](std::size_t t) {
      const std::size_t i = todo[t];
      auto& row = r.rows[i];
      const std::uint64_t run_seed = derive_seed(row.seed, row.n);
      try {
        const auto path = run(row.n, run_seed, inner);
        const std::size_t sub = c.subsample == 0 ? row.n : c.subsample;
        row.statistic = chaos_statistic(path, reference, sub, derive_seed(run_seed, 3), inner);
        row.sup_moment = moment_monitor(path, 2.0).sup_moment;
        row.status = "ok";
      } catch (const BlowUpError&) {
        row.statistic = std::numeric_limits<double>::quiet_NaN();
        row.sup_moment = std::numeric_limits<double>::quiet_NaN();
        row.status = "blowup";
      }
      json rec{{"n", row.n}, {"seed_index", row.seed_index}, {"seed", row.seed}, {"status", row.status}};
      rec["statistic"] = std::isfinite(row.statistic) ? json(row.statistic) : json(nullptr);
      rec["sup_moment"] = std::isfinite(row.sup_moment) ? json(row.sup_moment) : json(nullptr);
      journal.record(cell_key(row.n, row.seed_index), rec);
    });
    for (auto i : todo) work += static_cast<double>(r.rows[i].n * steps) * modes_per_particle;
  }
  finish_chaos(r, c);
  journal.finalize();
  write_text_file(dir / "summary.json", chaos_summary_json(r, c).dump(2) + "\n");
  write_text_file(dir / "rows.csv", chaos_rows_csv(r));
  std::vector<double> x, y, e;
  for (const auto& a : r.aggregates) {
    x.push_back(static_cast<double>(a.n));
    y.push_back(a.mean);
    e.push_back(a.stderr_);
  }
  write_text_file(dir / "plot.csv", plot_csv(x, y, e));
  write_timing(dir, timer.seconds(), work);
  return r;
}

inline ChaosResult run_chaos_experiment(ExperimentConfig c, const RunOptions& opt = {}) {
  c = apply_overrides(std::move(c), opt);
  validate(c);
  if (c.kind != ExperimentKind::chaos_decay) throw ConfigError("config kind is not chaos_decay");
  if (c.finite_dimensional)
    return chaos_impl(c, opt, [&](std::size_t n, std::uint64_t s, unsigned th) { return run_mvsde(c, n, s, th); },
                      static_cast<double>(c.mvsde.dim));
  const double modes = static_cast<double>(c.spde.grid.size());
  if (c.spde.equation == Equation::navier_stokes_2d)
    return chaos_impl(
        c, opt, [&](std::size_t n, std::uint64_t s, unsigned th) { return run_spde<SpectralVelocityField>(c, n, s, th); },
        modes);
  return chaos_impl(
      c, opt, [&](std::size_t n, std::uint64_t s, unsigned th) { return run_spde<ScalarSpectralField>(c, n, s, th); },
      modes);
}

// Reads rows.csv and summary.json back and checks that the stored aggregates
// are exactly what the rows recompute to.
inline ChaosResult load_chaos_result(const std::filesystem::path& dir) {
  const json summary = json::parse(read_text_file(dir / "summary.json"));
  ChaosResult r;
  r.config_hash = summary.at("config_hash").get<std::string>();
  std::istringstream rows(read_text_file(dir / "rows.csv"));
  std::string line;
  std::getline(rows, line);
  if (line != "n,seed_index,seed,statistic,sup_moment,status") throw Error("rows.csv: unexpected header");
  while (std::getline(rows, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw Error("rows.csv: malformed row '" + line + "'");
    ChaosRow row;
    row.n = std::stoull(f[0]);
    row.seed_index = std::stoull(f[1]);
    row.seed = std::stoull(f[2]);
    row.statistic = parse_double(f[3]);
    row.sup_moment = parse_double(f[4]);
    row.status = f[5];
    r.rows.push_back(row);
  }
  std::vector<std::size_t> schedule;
  for (const auto& a : summary.at("aggregates")) schedule.push_back(a.at("n").get<std::size_t>());
  r.aggregates = aggregate_rows(r.rows, schedule);
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    const auto& stored = summary.at("aggregates")[i];
    const auto& a = r.aggregates[i];
    auto same = [](const json& v, double x) { return v.is_null() ? std::isnan(x) : v.get<double>() == x; };
    if (!same(stored.at("mean"), a.mean) || !same(stored.at("mean_sup_moment"), a.mean_sup_moment) ||
        stored.at("stderr").get<double>() != a.stderr_ || stored.at("count").get<std::size_t>() != a.count)
      throw Error("summary.json aggregates disagree with rows.csv at n=" + std::to_string(a.n));
  }
  r.slope = summary.at("loglog_slope").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                 : summary.at("loglog_slope").get<double>();
  r.strictly_decreasing = summary.at("strictly_decreasing").get<bool>();
  r.slope_ok = summary.at("slope_within_tolerance").get<bool>();
  r.failed_cells = summary.at("failed_cells").get<std::size_t>();
  r.moment_spread = summary.at("moment_spread").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                          : summary.at("moment_spread").get<double>();
  r.moments_within_band = summary.at("moments_within_band").get<bool>();
  return r;
}

// ---------------------------------------------------------------------------
// Galerkin refinement

struct GalerkinLevel {
  int modes = 0;
  double sup_second_moment = 0.0;
  double dissipation_integral = 0.0;
  double diff_to_next = std::numeric_limits<double>::quiet_NaN();  // ||u^(M) - u^(next)||_{T,L2}
  double ratio = std::numeric_limits<double>::quiet_NaN();         // diff(prev) / diff(this)
};

struct GalerkinResult {
  std::string config_hash;
  std::vector<GalerkinLevel> levels;
  bool cauchy_decrease = false;  // every ratio >= min_ratio, or both differences at roundoff
  double moment_spread = 0.0;    // max/min - 1 of the sup second moments
  bool moments_within_band = false;
};

template <class Field>
double path_sup_distance(const PathEnsemble<ParticleEnsemble<Field>>& coarse,
                         const PathEnsemble<ParticleEnsemble<Field>>& fine) {
  if (coarse.times != fine.times) throw DimensionError("refinement paths are on different time grids");
  double worst = 0.0;
  for (std::size_t f = 0; f < coarse.frames.size(); ++f)
    for (std::size_t i = 0; i < coarse.particles(); ++i) {
      const auto up = resample(coarse.frames[f][i], FieldTraits<Field>::grid(fine.frames[f][i]).modes);
      worst = std::max(worst, l2_distance_sq(up, fine.frames[f][i]));
    }
  return std::sqrt(worst);
}

template <class Field>
GalerkinResult galerkin_impl(const ExperimentConfig& c, const RunOptions& opt) {
  Timer timer;
  GalerkinResult r;
  r.config_hash = config_hash(c);
  const std::uint64_t seed = derive_seed(c.master_seed, 0);
  SpectralGrid coarse = c.spde.grid;
  coarse.modes = c.mode_schedule.front();
  InitialSampler init = c.initial;
  init.seed = seed;
  const auto base = sample_initial_ensemble<Field>(coarse, init, c.particles);
  std::vector<PathEnsemble<ParticleEnsemble<Field>>> paths;
  double work = 0.0;
  const std::size_t steps = step_count(c.horizon, c.dt);
  for (int m : c.mode_schedule) {
    SpdeModelSpec spec = c.spde;
    spec.grid.modes = m;
    spec.noise.master_seed = seed;
    // Noise above the coarsest level is injected as zero so every level sees
    // the same realization.
    spec.noise.modes = spec.noise.modes <= 0 ? c.mode_schedule.front() : std::min(spec.noise.modes, c.mode_schedule.front());
    ParticleEnsemble<Field> initial;
    for (const auto& f : base.states) initial.states.push_back(resample(f, m));
    SimulationOptions o;
    o.horizon = c.horizon;
    o.dt = c.dt;
    o.save_stride = c.save_stride;
    o.threads = opt.threads;
    paths.push_back(simulate_system(spec, std::move(initial), o));
    const auto rep = moment_monitor(paths.back(), 2.0);
    GalerkinLevel lvl;
    lvl.modes = m;
    lvl.sup_second_moment = rep.sup_moment;
    lvl.dissipation_integral = rep.dissipation_integral;
    r.levels.push_back(lvl);
    work += static_cast<double>(c.particles * steps * spec.grid.size());
  }
  for (std::size_t l = 0; l + 1 < paths.size(); ++l) r.levels[l].diff_to_next = path_sup_distance(paths[l], paths[l + 1]);
  r.cauchy_decrease = true;
  double scale = 0.0;
  for (const auto& lvl : r.levels) scale = std::max(scale, std::sqrt(lvl.sup_second_moment));
  const double floor = c.tolerances.galerkin_roundoff_floor * std::max(1.0, scale);
  for (std::size_t l = 1; l + 1 < r.levels.size(); ++l) {
    const double prev = r.levels[l - 1].diff_to_next, cur = r.levels[l].diff_to_next;
    r.levels[l].ratio = cur > 0.0 ? prev / cur : std::numeric_limits<double>::infinity();
    const bool at_roundoff = cur <= floor;
    if (!(r.levels[l].ratio >= c.tolerances.galerkin_min_ratio) && !at_roundoff) r.cauchy_decrease = false;
  }
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (const auto& lvl : r.levels) {
    lo = std::min(lo, lvl.sup_second_moment);
    hi = std::max(hi, lvl.sup_second_moment);
  }
  r.moment_spread = lo > 0.0 ? hi / lo - 1.0 : (hi == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
  r.moments_within_band = r.moment_spread <= c.tolerances.moment_band;

  const std::filesystem::path dir = c.output_dir;
  json j;
  j["schema_version"] = 1;
  j["kind"] = "galerkin";
  j["config_hash"] = r.config_hash;
  j["config"] = canonical_json(c);
  json levels = json::array();
  std::string rows = "modes,sup_second_moment,dissipation_integral,diff_to_next,ratio\n";
  std::vector<double> x, y, e;
  for (const auto& lvl : r.levels) {
    json lj{{"modes", lvl.modes}, {"sup_second_moment", lvl.sup_second_moment},
            {"dissipation_integral", lvl.dissipation_integral}};
    lj["diff_to_next"] = std::isfinite(lvl.diff_to_next) ? json(lvl.diff_to_next) : json(nullptr);
    lj["ratio"] = std::isfinite(lvl.ratio) ? json(lvl.ratio) : json(nullptr);
    levels.push_back(lj);
    rows += std::to_string(lvl.modes) + "," + format_double(lvl.sup_second_moment) + "," +
            format_double(lvl.dissipation_integral) + "," + format_double(lvl.diff_to_next) + "," +
            format_double(lvl.ratio) + "\n";
    if (std::isfinite(lvl.diff_to_next)) {
      x.push_back(lvl.modes);
      y.push_back(lvl.diff_to_next);
      e.push_back(0.0);
    }
  }
  j["levels"] = levels;
  j["cauchy_decrease"] = r.cauchy_decrease;
  j["moment_spread"] = r.moment_spread;
  j["moments_within_band"] = r.moments_within_band;
  write_text_file(dir / "summary.json", j.dump(2) + "\n");
  write_text_file(dir / "rows.csv", rows);
  write_text_file(dir / "plot.csv", plot_csv(x, y, e));
  write_timing(dir, timer.seconds(), work);
  return r;
}

inline GalerkinResult run_galerkin_refinement(ExperimentConfig c, const RunOptions& opt = {}) {
  c = apply_overrides(std::move(c), opt);
  validate(c);
  if (c.kind != ExperimentKind::galerkin) throw ConfigError("config kind is not galerkin");
  if (c.spde.equation == Equation::navier_stokes_2d) return galerkin_impl<SpectralVelocityField>(c, opt);
  return galerkin_impl<ScalarSpectralField>(c, opt);
}

// ---------------------------------------------------------------------------
// Pathwise stability

struct StabilityRun {
  double epsilon = 0.0;
  std::vector<double> times;
  std::vector<double> gap;  // max over particles of ||X_t - Y_t||
  double terminal_gap = 0.0;
  double gronwall_exponent = 0.0;  // max over t > 0 of ln(gap/eps)/t
};

struct StabilityResult {
  std::string config_hash;
  std::vector<StabilityRun> runs;
  std::vector<double> halving_ratios;  // terminal gap ratios for eps pairs (e, e/2)
  bool linear_scaling = false;
  bool gronwall_finite = false;
  bool zero_gap_exact = true;
};

template <class Field>
StabilityResult stability_impl(const ExperimentConfig& c, const RunOptions& opt) {
  Timer timer;
  StabilityResult r;
  r.config_hash = config_hash(c);
  const std::uint64_t seed = derive_seed(c.master_seed, 0);
  SpdeModelSpec spec = c.spde;
  spec.noise.master_seed = seed;
  InitialSampler init = c.initial;
  init.seed = seed;
  const auto base = sample_initial_ensemble<Field>(spec.grid, init, c.particles);
  // Unit-norm perturbation direction per particle, on its own stream.
  InitialSampler dir_sampler = c.initial;
  dir_sampler.seed = derive_seed(seed, 0xD1ULL);
  dir_sampler.amplitude = 1.0;
  auto direction = sample_initial_ensemble<Field>(spec.grid, dir_sampler, c.particles);
  for (auto& d : direction.states) {
    auto raw = FieldTraits<Field>::raw(d);
    const double norm = std::sqrt(inner_product(raw, raw, 0));
    if (norm > 0.0) raw *= 1.0 / norm;
    d = FieldTraits<Field>::finish(std::move(raw));
  }
  SimulationOptions o;
  o.horizon = c.horizon;
  o.dt = c.dt;
  o.save_stride = c.save_stride;
  o.threads = opt.threads;
  const auto reference = simulate_system(spec, base, o);
  double work = static_cast<double>(c.particles * step_count(c.horizon, c.dt) * spec.grid.size());
  for (double eps : c.perturbations) {
    ParticleEnsemble<Field> perturbed;
    for (std::size_t i = 0; i < base.size(); ++i) {
      auto raw = FieldTraits<Field>::raw(base[i]);
      if (eps != 0.0) raw.axpy(eps, FieldTraits<Field>::raw(direction[i]));
      perturbed.states.push_back(eps != 0.0 ? FieldTraits<Field>::finish(std::move(raw)) : base[i]);
    }
    const auto path = simulate_system(spec, std::move(perturbed), o);
    work += static_cast<double>(c.particles * step_count(c.horizon, c.dt) * spec.grid.size());
    StabilityRun run;
    run.epsilon = eps;
    run.times = path.times;
    run.gronwall_exponent = -std::numeric_limits<double>::infinity();
    for (std::size_t f = 0; f < path.frames.size(); ++f) {
      double worst = 0.0;
      for (std::size_t i = 0; i < path.particles(); ++i)
        worst = std::max(worst, l2_distance_sq(path.frames[f][i], reference.frames[f][i]));
      run.gap.push_back(std::sqrt(worst));
      if (eps > 0.0 && path.times[f] > 0.0 && run.gap.back() > 0.0)
        run.gronwall_exponent = std::max(run.gronwall_exponent, std::log(run.gap.back() / eps) / path.times[f]);
    }
    if (eps == 0.0) {
      run.gronwall_exponent = 0.0;
      if (!(path == reference)) r.zero_gap_exact = false;
    }
    run.terminal_gap = run.gap.back();
    r.runs.push_back(std::move(run));
  }
  r.linear_scaling = false;
  for (std::size_t a = 0; a < r.runs.size(); ++a)
    for (std::size_t b = 0; b < r.runs.size(); ++b)
      if (r.runs[a].epsilon > 0.0 && r.runs[b].epsilon * 2.0 == r.runs[a].epsilon) {
        const double ratio = r.runs[a].terminal_gap / r.runs[b].terminal_gap;
        r.halving_ratios.push_back(ratio);
      }
  if (!r.halving_ratios.empty()) {
    r.linear_scaling = std::all_of(r.halving_ratios.begin(), r.halving_ratios.end(), [&](double q) {
      return std::abs(q - 2.0) <= 2.0 * c.tolerances.stability_ratio_tol;
    });
  }
  r.gronwall_finite = std::all_of(r.runs.begin(), r.runs.end(), [](const StabilityRun& s) {
    return s.epsilon == 0.0 || std::isfinite(s.gronwall_exponent);
  });

  const std::filesystem::path dir = c.output_dir;
  json j;
  j["schema_version"] = 1;
  j["kind"] = "stability";
  j["config_hash"] = r.config_hash;
  j["config"] = canonical_json(c);
  json runs = json::array();
  std::string rows = "epsilon,t,gap\n";
  for (const auto& s : r.runs) {
    json sj{{"epsilon", s.epsilon}, {"terminal_gap", s.terminal_gap}};
    sj["gronwall_exponent"] = std::isfinite(s.gronwall_exponent) ? json(s.gronwall_exponent) : json(nullptr);
    runs.push_back(sj);
    for (std::size_t f = 0; f < s.times.size(); ++f)
      rows += format_double(s.epsilon) + "," + format_double(s.times[f]) + "," + format_double(s.gap[f]) + "\n";
  }
  j["runs"] = runs;
  j["halving_ratios"] = r.halving_ratios;
  j["linear_scaling"] = r.linear_scaling;
  j["gronwall_finite"] = r.gronwall_finite;
  j["zero_gap_exact"] = r.zero_gap_exact;
  write_text_file(dir / "summary.json", j.dump(2) + "\n");
  write_text_file(dir / "rows.csv", rows);
  std::vector<double> x, y, e;
  for (const auto& s : r.runs) {
    x.push_back(s.epsilon);
    y.push_back(s.terminal_gap);
    e.push_back(0.0);
  }
  write_text_file(dir / "plot.csv", plot_csv(x, y, e));
  write_timing(dir, timer.seconds(), work);
  return r;
}

inline StabilityResult run_stability_experiment(ExperimentConfig c, const RunOptions& opt = {}) {
  c = apply_overrides(std::move(c), opt);
  validate(c);
  if (c.kind != ExperimentKind::stability) throw ConfigError("config kind is not stability");
  if (c.spde.equation == Equation::navier_stokes_2d) return stability_impl<SpectralVelocityField>(c, opt);
  return stability_impl<ScalarSpectralField>(c, opt);
}

// ---------------------------------------------------------------------------
// Audits

struct AuditSet {
  std::string config_hash;
  std::vector<AuditReport> reports;
  bool passed() const {
    return std::all_of(reports.begin(), reports.end(), [](const AuditReport& r) { return r.passed; });
  }
};

// Truncated noise trace sum_k |kappa|^2 c_k^2 into V; finite by construction
// for finite mode counts, reported so the operator-norm assumption is visible.
inline AuditReport noise_trace_report(const SpdeModelSpec& spec) {
  AuditReport r;
  r.condition = "noise_trace_v";
  r.samples = 1;
  r.fitted_constant = spec.noise.trace(spec.grid, spec.equation == Equation::navier_stokes_2d, 1);
  r.declared_constant = std::numeric_limits<double>::infinity();
  r.worst_margin = std::isfinite(r.fitted_constant) ? std::numeric_limits<double>::infinity() : -1.0;
  r.passed = std::isfinite(r.fitted_constant);
  r.note = "truncated noise trace into V; finite for finite mode counts";
  return r;
}

inline AuditSet run_audits(ExperimentConfig c, const RunOptions& opt = {}) {
  c = apply_overrides(std::move(c), opt);
  validate(c);
  if (c.kind != ExperimentKind::audit) throw ConfigError("config kind is not audit");
  Timer timer;
  AuditSet set;
  set.config_hash = config_hash(c);
  const auto& a = c.audit;
  AuditSampler sampler = a.sampler;
  sampler.seed = derive_seed(c.master_seed, a.sampler.seed);
  const SpectralGrid& g = c.spde.grid;
  const unsigned th = opt.threads;
  if (c.spde.equation == Equation::navier_stokes_2d) {
    auto model = a.model == "broken_sigma" ? broken_sigma_model(c.spde) : nse_audit_model(c.spde, a.rho_coefficient);
    model.growth_beta = a.growth_beta;
    model.declared_constant = a.coercivity_constant;
    set.reports.push_back(audit_coercivity(model, g, sampler, a.samples, th));
    model.declared_constant = a.monotonicity_constant;
    set.reports.push_back(audit_local_monotonicity(model, g, sampler, a.samples, th));
    model.declared_constant = a.growth_constant;
    set.reports.push_back(audit_growth(model, g, sampler, a.samples, th));
    set.reports.push_back(audit_bilinear_estimate(g, sampler, a.samples, a.bilinear_constant, th));
    const double trace = c.spde.noise.trace(g, true);
    set.reports.push_back(
        audit_kernel_growth<SpectralVelocityField>(c.spde.kernel, trace, g, sampler, a.samples, a.kernel_constant, th));
    set.reports.push_back(audit_kernel_lipschitz<SpectralVelocityField>(c.spde.kernel, trace, g, sampler, a.samples,
                                                                         a.kernel_constant, th));
  } else {
    auto model = scalar_audit_model(c.spde);
    model.growth_beta = a.growth_beta;
    const auto rho = a.rho_coefficient;
    model.rho = [rho](const ScalarSpectralField& u) { return rho * (inner_product(u, u, 2) + l2_norm_sq(u)); };
    model.declared_constant = a.coercivity_constant;
    set.reports.push_back(audit_coercivity(model, g, sampler, a.samples, th));
    model.declared_constant = a.monotonicity_constant;
    set.reports.push_back(audit_local_monotonicity(model, g, sampler, a.samples, th));
    model.declared_constant = a.growth_constant;
    set.reports.push_back(audit_growth(model, g, sampler, a.samples, th));
    const double trace = c.spde.noise.trace(g, false);
    set.reports.push_back(
        audit_kernel_growth<ScalarSpectralField>(c.spde.kernel, trace, g, sampler, a.samples, a.kernel_constant, th));
    set.reports.push_back(audit_kernel_lipschitz<ScalarSpectralField>(c.spde.kernel, trace, g, sampler, a.samples,
                                                                       a.kernel_constant, th));
  }
  set.reports.push_back(noise_trace_report(c.spde));

  const std::filesystem::path dir = c.output_dir;
  json j;
  j["schema_version"] = 1;
  j["kind"] = "audit";
  j["config_hash"] = set.config_hash;
  j["config"] = canonical_json(c);
  j["model"] = a.model;
  j["reports"] = set.reports;
  j["passed"] = set.passed();
  write_text_file(dir / "summary.json", j.dump(2) + "\n");
  std::string rows = "condition,samples,worst_margin,fitted_constant,declared_constant,passed\n";
  for (const auto& r : set.reports)
    rows += r.condition + "," + std::to_string(r.samples) + "," + format_double(r.worst_margin) + "," +
            format_double(r.fitted_constant) + "," + format_double(r.declared_constant) + "," +
            (r.passed ? "true" : "false") + "\n";
  write_text_file(dir / "rows.csv", rows);
  write_timing(dir, timer.seconds(), static_cast<double>(a.samples * set.reports.size() * g.size()));
  return set;
}

// ---------------------------------------------------------------------------
// Single simulation with snapshot output

struct SimulateResult {
  std::string config_hash;
  std::vector<double> times;
  std::vector<double> mean_energy;
  MomentReport moments;
};

template <class Ensemble>
SimulateResult finish_simulate(const ExperimentConfig& c, const PathEnsemble<Ensemble>& path, double seconds,
                               double work) {
  SimulateResult r;
  r.config_hash = config_hash(c);
  r.times = path.times;
  for (const auto& frame : path.frames) {
    CompensatedSum e;
    for (std::size_t i = 0; i < frame.size(); ++i) e.add(state_norm_sq(frame, i));
    r.mean_energy.push_back(e.value() / static_cast<double>(frame.size()));
  }
  r.moments = moment_monitor(path, 2.0);
  const std::filesystem::path dir = c.output_dir;
  json j;
  j["schema_version"] = 1;
  j["kind"] = "simulate";
  j["config_hash"] = r.config_hash;
  j["config"] = canonical_json(c);
  j["sup_second_moment"] = r.moments.sup_moment;
  j["dissipation_integral"] = r.moments.dissipation_integral;
  j["spec_hash"] = path.spec_hash;
  write_text_file(dir / "summary.json", j.dump(2) + "\n");
  std::vector<double> zeros(r.times.size(), 0.0);
  write_text_file(dir / "plot.csv", plot_csv(r.times, r.mean_energy, zeros));
  write_timing(dir, seconds, work);
  return r;
}

inline SimulateResult run_simulation(ExperimentConfig c, const RunOptions& opt = {}) {
  c = apply_overrides(std::move(c), opt);
  validate(c);
  Timer timer;
  const std::uint64_t seed = derive_seed(c.master_seed, 0);
  const double steps = static_cast<double>(step_count(c.horizon, c.dt));
  const std::filesystem::path dir = c.output_dir;
  std::filesystem::create_directories(dir);
  if (c.finite_dimensional) {
    const auto path = run_mvsde(c, c.particles, seed, opt.threads);
    return finish_simulate(c, path, timer.seconds(), steps * static_cast<double>(c.particles * c.mvsde.dim));
  }
  const double work = steps * static_cast<double>(c.particles * c.spde.grid.size());
  if (c.spde.equation == Equation::navier_stokes_2d) {
    const auto path = run_spde<SpectralVelocityField>(c, c.particles, seed, opt.threads);
    write_snapshot(dir / "final.snap", c.spde.equation, path.frames.back(), c.dt, path.times.back());
    return finish_simulate(c, path, timer.seconds(), work);
  }
  const auto path = run_spde<ScalarSpectralField>(c, c.particles, seed, opt.threads);
  write_snapshot(dir / "final.snap", c.spde.equation, path.frames.back(), c.dt, path.times.back());
  return finish_simulate(c, path, timer.seconds(), work);
}

// W2 between the ensembles of two snapshot files (state L2 metric).
inline double snapshot_wasserstein2(const std::string& a, const std::string& b, unsigned threads = 1) {
  const auto ha = read_snapshot_header(a);
  const auto hb = read_snapshot_header(b);
  if (ha.equation != hb.equation || !(ha.grid == hb.grid))
    throw ConfigError("snapshots hold different equations or grids");
  if (ha.equation == Equation::navier_stokes_2d) {
    const auto sa = read_snapshot<SpectralVelocityField>(a);
    const auto sb = read_snapshot<SpectralVelocityField>(b);
    return wasserstein2(pairwise_cost(sa.ensemble, sb.ensemble, threads));
  }
  const auto sa = read_snapshot<ScalarSpectralField>(a);
  const auto sb = read_snapshot<ScalarSpectralField>(b);
  return wasserstein2(pairwise_cost(sa.ensemble, sb.ensemble, threads));
}

}  // namespace mvlab
