#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "mvlab/experiment.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kAuditViolation = 1;
constexpr int kConfigError = 2;
constexpr int kBlowUp = 3;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool resume = false;
  unsigned threads = 1;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool needs_config = true) {
  auto* c = cmd->add_option("--config", f.config, "experiment config (TOML)")->envname("MVLAB_CONFIG");
  if (needs_config) c->required();
  cmd->add_option("--seed", f.seed, "master seed override")->envname("MVLAB_SEED");
  cmd->add_option("--out", f.out, "output directory override")->envname("MVLAB_OUT");
  cmd->add_flag("--resume", f.resume, "skip cells already recorded in the journal")->envname("MVLAB_RESUME");
  cmd->add_option("--threads", f.threads, "worker threads (0: all cores)")->envname("MVLAB_THREADS");
}

mvlab::RunOptions run_options(const CommonFlags& f) {
  mvlab::RunOptions o;
  o.threads = mvlab::resolve_threads(f.threads);
  o.resume = f.resume;
  o.output_dir = f.out;
  o.seed = f.seed;
  return o;
}

mvlab::ExperimentConfig load(const CommonFlags& f, mvlab::ExperimentKind expected) {
  auto c = mvlab::parse_config_file(f.config);
  if (c.kind != expected)
    throw mvlab::ConfigError(std::string("config kind is '") + mvlab::to_string(c.kind) + "', expected '" +
                             mvlab::to_string(expected) + "'");
  return c;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Field buffers sit just above glibc's default mmap threshold; keep them on the heap.
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
  CLI::App app{"mvlab: McKean-Vlasov particle and SPDE experiments"};
  app.require_subcommand(1);

  CommonFlags sim_f, chaos_f, gal_f, stab_f, audit_f;
  auto* sim = app.add_subcommand("simulate", "run one particle system and write a snapshot");
  add_common(sim, sim_f);
  auto* chaos = app.add_subcommand("chaos", "chaos-decay study over the N schedule");
  add_common(chaos, chaos_f);
  auto* gal = app.add_subcommand("galerkin", "Galerkin refinement study over the mode schedule");
  add_common(gal, gal_f);
  auto* stab = app.add_subcommand("stability", "paired runs with perturbed initial data");
  add_common(stab, stab_f);
  auto* audit = app.add_subcommand("audit", "sampled audits of the structural conditions");
  add_common(audit, audit_f);

  std::string snap_a, snap_b;
  unsigned ot_threads = 1;
  auto* ot = app.add_subcommand("ot", "W2 distance between two snapshot files");
  ot->add_option("first", snap_a, "snapshot file")->required();
  ot->add_option("second", snap_b, "snapshot file")->required();
  ot->add_option("--threads", ot_threads, "worker threads")->envname("MVLAB_THREADS");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (*sim) {
      const auto r = mvlab::run_simulation(mvlab::parse_config_file(sim_f.config), run_options(sim_f));
      std::printf("sup second moment %.6g, dissipation integral %.6g\n", r.moments.sup_moment,
                  r.moments.dissipation_integral);
      return kOk;
    }
    if (*chaos) {
      const auto r = mvlab::run_chaos_experiment(load(chaos_f, mvlab::ExperimentKind::chaos_decay), run_options(chaos_f));
      for (const auto& a : r.aggregates)
        std::printf("N=%zu mean=%.6g stderr=%.3g (%zu ok, %zu failed)\n", a.n, a.mean, a.stderr_, a.count, a.failed);
      std::printf("log-log slope %.4f, strictly decreasing: %s\n", r.slope, r.strictly_decreasing ? "yes" : "no");
      return r.failed_cells > 0 ? kBlowUp : kOk;
    }
    if (*gal) {
      const auto r = mvlab::run_galerkin_refinement(load(gal_f, mvlab::ExperimentKind::galerkin), run_options(gal_f));
      for (const auto& l : r.levels)
        std::printf("M=%d diff_to_next=%.4g ratio=%.4g sup_moment=%.6g\n", l.modes, l.diff_to_next, l.ratio,
                    l.sup_second_moment);
      std::printf("Cauchy decrease: %s, moment spread %.4f\n", r.cauchy_decrease ? "yes" : "no", r.moment_spread);
      return kOk;
    }
    if (*stab) {
      const auto r =
          mvlab::run_stability_experiment(load(stab_f, mvlab::ExperimentKind::stability), run_options(stab_f));
      for (const auto& s : r.runs)
        std::printf("eps=%.4g terminal_gap=%.6g gronwall=%.4g\n", s.epsilon, s.terminal_gap, s.gronwall_exponent);
      std::printf("linear scaling: %s\n", r.linear_scaling ? "yes" : "no");
      return kOk;
    }
    if (*audit) {
      const auto set = mvlab::run_audits(load(audit_f, mvlab::ExperimentKind::audit), run_options(audit_f));
      for (const auto& r : set.reports)
        std::printf("%-20s %s fitted C=%.6g declared C=%.6g worst margin=%.6g\n", r.condition.c_str(),
                    r.passed ? "pass" : "FAIL", r.fitted_constant, r.declared_constant, r.worst_margin);
      return set.passed() ? kOk : kAuditViolation;
    }
    if (*ot) {
      std::printf("%.17g\n", mvlab::snapshot_wasserstein2(snap_a, snap_b, mvlab::resolve_threads(ot_threads)));
      return kOk;
    }
  } catch (const mvlab::BlowUpError& e) {
    std::fprintf(stderr, "blow-up: %s\n", e.what());
    return kBlowUp;
  } catch (const mvlab::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const mvlab::DimensionError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kConfigError;
  }
  return kOk;
}
