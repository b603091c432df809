// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fail.

#include "cpbounds/experiments.hpp"
#include "test_support.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <string>

namespace cp = cpbounds;
namespace ct = cpbounds::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void run(int id, const char* name, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::printf("[%s] %d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), seconds_since(t0));
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), f, a, b, c, d);
  return buf;
}

cp::BoundsReport micrb_at(const cp::SystemConfig& cfg, std::int64_t samples, const cp::Geometry* geom = nullptr) {
  const cp::Geometry g = geom ? *geom : cp::sample_geometry(cfg);
  const cp::LinkBudget lb = cp::compute_link_budget(cfg, g);
  cp::MicrbOptions o = cp::MicrbOptions::from_config(cfg);
  o.samples = samples;
  return cp::evaluate_bounds(g, lb, cfg.wavelength_m(), o);
}

Outcome criterion1() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(424242);
  std::uniform_real_distribution<double> carrier(1e9, 120e9), power(-20, 30), spread(30, 300);
  std::uniform_int_distribution<int> stations(4, 12);
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    cp::SystemConfig cfg;
    cfg.geometry_seed = 1000 + static_cast<std::uint64_t>(k);
    cfg.carrier_frequency_hz = carrier(rng);
    cfg.tx_power_dbm = power(rng);
    cfg.bs_placement_std_m = spread(rng);
    cfg.num_bs = stations(rng);
    const cp::Geometry g = cp::sample_geometry(cfg);
    const cp::LinkBudget lb = cp::compute_link_budget(cfg, g);
    const double lambda = cfg.wavelength_m();
    worst = std::max(worst, ct::max_relative_error(ct::fd_information(g, lb, lambda, 5), cp::fim_known(g, lb, lambda).matrix));
    worst = std::max(worst, ct::max_relative_error(ct::fd_information(g, lb, lambda, 4), cp::fim_delay(g, lb).matrix));
  }
  const double t = seconds_since(t0);
  return {worst < 1e-5 && t < 10.0, fmt("max relative error %.2e over 20 scenarios, %.2f s", worst, t)};
}

Outcome criterion2() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(777);
  std::uniform_real_distribution<double> u(-1, 1), r(-20, 20);
  int agree = 0;
  for (int k = 0; k < 1000; ++k) {
    const Eigen::Index n = 1 + k % 5;
    cp::Mat g(n, n);
    cp::Vec target(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      target(i) = r(rng);
      for (Eigen::Index j = 0; j < n; ++j) g(i, j) = u(rng);
    }
    g.diagonal().array() += 2.0;
    const cp::LatticeProblem p{g, target};
    // Exhaustive box provably containing the optimum.
    const cp::Mat ginv = g.inverse();
    cp::Vec real = ginv * target;
    cp::IntVector rnd(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) rnd[static_cast<std::size_t>(i)] = std::llround(real(i));
    const double rho = (target - g * cp::to_eigen(rnd)).norm();
    const auto box = static_cast<std::int64_t>(std::ceil(rho * ginv.rowwise().norm().maxCoeff() + 0.5));
    if (cp::solve_ils(p) == cp::brute_force_ils(p, box)) ++agree;
  }
  const double t = seconds_since(t0);
  return {agree == 1000 && t < 30.0, fmt("%.0f/1000 agree, %.2f s", agree, t)};
}

Outcome criterion3() {
  cp::SystemConfig cfg;
  cfg.tx_power_dbm = 15;
  const cp::BoundsReport r = micrb_at(cfg, 5000);
  const double gap = std::abs(*r.peb_mi - r.peb_known) / r.peb_known;
  return {*r.p_fix >= 0.99 && gap < 0.10,
          fmt("p_fix %.4f, peb_mi %.3e m, peb_known %.3e m, relative gap %.3g", *r.p_fix, *r.peb_mi, r.peb_known, gap)};
}

Outcome criterion4() {
  cp::SystemConfig cfg;
  cfg.tx_power_dbm = -10;
  const cp::BoundsReport r = micrb_at(cfg, cfg.micrb_samples);
  const double to_delay = *r.peb_mi / r.peb_delay, to_known = *r.peb_mi / r.peb_known;
  return {to_delay > 0.5 && to_delay < 2.0 && to_known >= 100.0,
          fmt("peb_mi %.3f m, peb_delay %.3f m, peb_known %.3e m, mi/known %.3g", *r.peb_mi, r.peb_delay,
              r.peb_known, to_known)};
}

std::vector<cp::SweepRow> micrb_sweep(cp::SweepParameter p, std::vector<double> grid, cp::SystemConfig base) {
  cp::SweepSpec s;
  s.parameter = p;
  s.grid = std::move(grid);
  s.base_config = base;
  s.micrb = true;
  return cp::run_sweep(s);
}

Outcome criterion5() {
  const auto rows = micrb_sweep(cp::SweepParameter::kCarrierFrequency, cp::make_grid(1.6e9, 250e9, 16, true), {});
  double f_low = 0.0, f_high = 0.0, best_low = 1e300, best_high = 1e300;
  for (const auto& r : rows) {
    if (!r.peb_mi) continue;
    const double k = *r.peb_mi / r.peb_known, d = *r.peb_mi / r.peb_delay;
    if (r.value <= 20e9 && k < 1.05 && f_low == 0.0) f_low = r.value;
    if (r.value <= 20e9) best_low = std::min(best_low, k);
    if (r.value >= 50e9 && d >= 0.3 && d <= 1.5 && f_high == 0.0) f_high = r.value;
    if (r.value >= 50e9) best_high = std::min(best_high, std::abs(d - 1.0));
  }
  return {f_low > 0.0 && f_high > 0.0,
          fmt("f_low %.3g GHz (best mi/known %.4f), f_high %.3g GHz (best |mi/delay-1| %.3f)", f_low / 1e9, best_low,
              f_high / 1e9, best_high)};
}

Outcome criterion6() {
  const auto rows = micrb_sweep(cp::SweepParameter::kBandwidth, cp::make_grid(0.1e6, 1e9, 13, true), {});
  bool wide_ok = true, narrow_ok = true;
  double worst_wide = 0.0, worst_narrow = 1e300;
  for (const auto& r : rows) {
    if (!r.peb_mi) return {false, "missing peb_mi at " + cp::format_number(r.value) + ": " + r.status};
    if (r.value >= 100e6) {
      worst_wide = std::max(worst_wide, *r.peb_mi / r.peb_known);
      wide_ok = wide_ok && *r.peb_mi / r.peb_known < 1.05;
    }
    if (r.value <= 1e6) {
      worst_narrow = std::min(worst_narrow, *r.peb_mi / r.peb_delay);
      narrow_ok = narrow_ok && *r.peb_mi / r.peb_delay > 0.5;
    }
  }
  return {wide_ok && narrow_ok,
          fmt("worst mi/known for W >= 100 MHz %.3g, worst mi/delay for W <= 1 MHz %.3f", worst_wide, worst_narrow)};
}

Outcome criterion7() {
  cp::SystemConfig cfg;
  cp::Mat bs(3, 1);
  bs.col(0) = cfg.ue_position_m + cp::Vec3(100.0, 0.0, 0.0);
  const cp::LinkBudget lb = cp::compute_link_budget(cfg, cp::make_geometry(bs, cfg.ue_position_m));
  // Hand computation: P = 1 mW over 300 subcarriers, FSPL at 28 GHz and 100 m,
  // N0 = -174 dBm/Hz + 13 dB, SNR per subcarrier = E_s |rho|^2 / N0.
  const double st = lb.sigma_tau_m(0), sp = lb.sigma_theta_m(0);
  return {std::abs(st / 2.88 - 1.0) < 0.01 && std::abs(sp / 1.78e-4 - 1.0) < 0.01,
          fmt("sigma_tau %.4f m, sigma_theta %.4e m", st, sp)};
}

Outcome criterion8() {
  const cp::ScenarioPoint def = cp::make_scenario_point(cp::SystemConfig{});
  const auto d = cp::error_statistics(cp::run_trials(def, cp::EstimatorMethod::kDelayOnly, 500));
  cp::SystemConfig low;
  low.carrier_frequency_hz = 3e9;
  const cp::ScenarioPoint p3 = cp::make_scenario_point(low);
  const auto s = cp::error_statistics(cp::run_trials(p3, cp::EstimatorMethod::kDirectional, 500));
  const double rd = d.rmse / def.bounds.peb_delay, rs = s.rmse / p3.bounds.peb_known;
  return {rd >= 0.8 && rd <= 1.5 && rs >= 0.8 && rs <= 3.0,
          fmt("delay-only RMSE/peb_delay %.3f, directional RMSE/peb_known at 3 GHz %.3f (RMSE %.3e m)", rd, rs,
              s.rmse)};
}

// Compact re-check of the invariants; the unit suites cover them exhaustively.
Outcome criterion9(Clock::time_point suite_start) {
  std::string broken;
  auto check = [&](bool ok, const char* what) {
    if (!ok) broken += std::string(broken.empty() ? "" : ", ") + what;
  };
  for (std::uint64_t seed : {1u, 42u, 1846u}) {
    cp::SystemConfig cfg;
    cfg.geometry_seed = seed;
    const cp::Geometry g = cp::sample_geometry(cfg);
    const cp::LinkBudget lb = cp::compute_link_budget(cfg, g);
    const cp::BoundsReport r = cp::compute_classical_bounds(g, lb, cfg.wavelength_m());
    check(ct::min_eigenvalue(r.cov_delay - r.cov_known) > -1e-12 * r.cov_delay.norm(), "delay >= known");
    check(ct::min_eigenvalue(r.cov_known) > 0.0, "known PSD");
    cp::MicrbOptions o;
    o.samples = 300;
    const cp::MicrbResult mi = cp::micrb(g, lb, cfg.wavelength_m(), r, o);
    check(ct::min_eigenvalue(mi.cov_position - r.cov_known) > -1e-9 * r.cov_known.norm(), "mi >= known");
    o.threads = 3;
    check(cp::micrb(g, lb, cfg.wavelength_m(), r, o).cov_full == mi.cov_full, "micrb thread invariance");
  }
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int k = 0; k < 2000; ++k) {
    const double lambda = 1e-3 + u(rng), v = 1e3 * (u(rng) - 0.5);
    const cp::CellWrap w = cp::wrap_to_cell(v, lambda);
    check(w.fraction_m >= 0.0 && w.fraction_m < lambda &&
              std::abs(static_cast<double>(w.integer_part) * lambda + w.fraction_m - v) < 1e-12 * (1 + std::abs(v)),
          "wrap round trip");
  }
  for (int k = 0; k < 100; ++k) {
    const cp::Mat g = ct::random_spd(4, rng, 0.3);
    cp::Vec r(4);
    for (int i = 0; i < 4; ++i) r(i) = 10.0 * u(rng);
    const cp::IntVector z = cp::solve_ils({g, r});
    cp::IntVector kshift{3, -2, 7, 0};
    const cp::IntVector moved = cp::solve_ils({g, r + g * cp::to_eigen(kshift)});
    for (std::size_t i = 0; i < 4; ++i) check(moved[i] == z[i] + kshift[i], "ILS translation invariance");
  }
  cp::SystemConfig hi;
  hi.tx_power_dbm = 20;
  const cp::ScenarioPoint p = cp::make_scenario_point(hi);
  for (auto m : {cp::EstimatorMethod::kDelayOnly, cp::EstimatorMethod::kMixedInteger}) {
    const auto a = cp::run_trials(p, m, 12, 1), b = cp::run_trials(p, m, 12, 4);
    for (std::size_t i = 0; i < a.size(); ++i)
      check(a[i].position_m == b[i].position_m && a[i].clock_bias_m == b[i].clock_bias_m, "trial thread invariance");
  }
  const double t = seconds_since(suite_start);
  check(t < 300.0, "acceptance runtime");
  return {broken.empty(), (broken.empty() ? std::string("all invariants hold") : "broken: " + broken) +
                              fmt(", acceptance runtime so far %.1f s", t)};
}

}  // namespace

int main() {
  const auto start = Clock::now();
  run(1, "FIM matches finite differences", criterion1);
  run(2, "ILS equals exhaustive search", criterion2);
  run(3, "MICRB high-SNR limit", criterion3);
  run(4, "MICRB low-SNR limit", criterion4);
  run(5, "carrier-frequency regime transition", criterion5);
  run(6, "bandwidth transition", criterion6);
  run(7, "link-budget scale", criterion7);
  run(8, "estimator-bound consistency", criterion8);
  run(9, "property suite", [&] { return criterion9(start); });
  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
