// Acceptance run: one PASS/FAIL line per criterion. Criteria can be selected
// by number on the command line, e.g. `acceptance 1 2 4`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "omsqz/cli.hpp"
#include "omsqz/core.hpp"
#include "omsqz/errors.hpp"
#include "omsqz/fitter.hpp"
#include "omsqz/lineshape.hpp"
#include "omsqz/oracle.hpp"
#include "omsqz/units.hpp"

using namespace omsqz;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double max_rel(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]) / std::abs(b[i]));
  return m;
}

// Random stable configurations from the full pump physics.
std::vector<DerivedRates> random_configurations(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto log_uniform = [&](double lo, double hi) { return lo * std::pow(hi / lo, u(rng)); };
  std::vector<DerivedRates> out;
  while (out.size() < n) {
    SystemParams p;
    p.kappa = hz_to_rad(log_uniform(1e5, 5e6));
    p.kappa_in = p.kappa * (0.1 + 0.8 * u(rng));
    p.g0 = hz_to_rad(log_uniform(1.0, 100.0));
    p.omega_m0 = hz_to_rad(log_uniform(1e5, 2e6));
    p.gamma_m = p.omega_m0 / log_uniform(1e4, 1e7);
    p.delta = (2.0 * u(rng) - 1.0) * p.kappa;
    p.n_th = log_uniform(1.0, 1e6);
    p.n_extra = u(rng) < 0.5 ? 0.0 : log_uniform(1e-3, 1.0);
    const double g = hz_to_rad(log_uniform(1e2, 3e4));
    const double eps = 0.5 + 0.5 * u(rng);
    const auto field = IntracavityField::from_coupling(p.g0, g, eps, 2.0 * std::numbers::pi * u(rng),
                                                       2.0 * std::numbers::pi * u(rng));
    const auto r = derive_unchecked(p, field, p.omega_m0);
    if (r.stable() && std::abs(r.s) < 0.95 && r.n_bar > 0.0) out.push_back(r);
  }
  return out;
}

std::vector<double> offsets_for(double gamma) {
  std::vector<double> v;
  for (int k = -200; k <= 200; ++k) v.push_back(0.05 * k * gamma);
  return v;
}

Outcome oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto configs = random_configurations(1000, 101);
  double worst = 0.0, worst_q = 0.0;
  for (const auto& r : configs) {
    const auto grid = offsets_for(r.gamma_eff);
    const double ty = -0.5 * r.phi;
    const std::vector<double> thetas{ty, ty + 0.5 * std::numbers::pi};
    const auto eq = propagate_spectra(r, NoiseCorrelators::thermal_equivalent(r.gamma_eff, r.n_bar), grid, thetas);
    worst = std::max({worst, max_rel(eq.stokes, stokes_spectrum(r, r.n_bar, grid)),
                      max_rel(eq.antistokes, antistokes_spectrum(r, r.n_bar, grid))});
    // S_YY and S_XX, also with the physical input correlators
    const auto phys = propagate_spectra(r, NoiseCorrelators::from_rates(r), grid, thetas);
    for (std::size_t q = 0; q < thetas.size(); ++q) {
      const auto ref = quadrature_spectrum(r, r.n_bar, thetas[q], grid);
      worst_q = std::max({worst_q, max_rel(eq.quadratures[q], ref), max_rel(phys.quadratures[q], ref)});
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst <= 1e-9 && worst_q <= 1e-9 && secs < 60.0,
          fmt::format("{} configs, sidebands max rel {:.2e}, S_XX/S_YY max rel {:.2e}, {:.1f} s (need 1e-9, < 60 s)",
                      configs.size(), worst, worst_q, secs)};
}

Outcome sum_rule() {
  const auto configs = random_configurations(1000, 101);
  double worst = 0.0, worst_ulps = 0.0, n_bar_at_worst = 0.0;
  int over = 0;
  for (const auto& r : configs) {
    const double a_s = stokes_terms(r, r.n_bar).area();
    const double dev = std::abs(a_s - antistokes_terms(r, r.n_bar).area() - 1.0);
    // spacing of doubles near the Stokes area
    const double ulp = std::nextafter(a_s, INFINITY) - a_s;
    over += dev > 1e-10;
    worst_ulps = std::max(worst_ulps, dev / ulp);
    if (dev > worst) {
      worst = dev;
      n_bar_at_worst = r.n_bar;
    }
  }
  return {worst <= 1e-10,
          fmt::format("{} configs, max |A_S - A_aS - 1| = {:.2e} at n_bar = {:.3g} (need 1e-10); {} configs over, "
                      "largest error {:.0f} ulp of the Stokes area",
                      configs.size(), worst, n_bar_at_worst, over, worst_ulps)};
}

Outcome rate_identity() {
  const auto configs = random_configurations(1000, 101);
  double worst = 0.0;
  for (const auto& r : configs) {
    const double scale = std::max({std::abs(r.gamma_opt), r.a_minus, r.a_plus});
    worst = std::max(worst, std::abs(r.gamma_opt - (r.a_minus - r.a_plus)) / scale);
  }
  return {worst <= 1e-10, fmt::format("{} configs, max relative deviation {:.2e} (need 1e-10)", configs.size(), worst)};
}

Outcome ratio_formulas() {
  const auto a = sideband_ratios(5.8, 0.53);
  const auto b = sideband_ratios(0.12, 0.4);
  // (n + 1 +/- s/2) / (n -/+ s/2)
  const double rp = (5.8 + 1.0 + 0.265) / (5.8 - 0.265), rm = (5.8 + 1.0 - 0.265) / (5.8 + 0.265);
  // The quoted 1.276 and 1.078 carry three decimals.
  const bool ok = std::abs(a.r_plus - rp) <= 1e-6 && std::abs(a.r_minus - rm) <= 1e-6 &&
                  std::abs(b.r_plus + 16.5) <= 1e-6 && std::abs(a.r_plus - 1.276) < 1e-3 &&
                  std::abs(a.r_minus - 1.078) < 1e-3;
  return {ok, fmt::format("R+ = {:.7f}, R- = {:.7f} at (5.8, 0.53) (quoted 1.276, 1.078); R+ = {:.7f} at "
                          "(0.12, 0.4)",
                          a.r_plus, a.r_minus, b.r_plus)};
}

Outcome fig7_spectrum() {
  const auto cfg = ConfigFile::parse(R"([truth]
omega_m_hz = 530e3
gamma_eff_hz = 3929.31
n_bar = 0.12
s = 0.4
[acquisition]
resolution_hz = 1
floor_db = 30
)");
  const auto rep = cmd_spectrum(cfg);
  const bool ok = std::abs(rep.antistokes.weight_broad + 0.08) <= 1e-12 && rep.min_psd >= 0.0 &&
                  std::abs(rep.area_difference - 1.0) <= 1e-10;
  return {ok, fmt::format("broad anti-Stokes weight {:.12f}, min PSD {:.3e} over {} bins, area difference {:.12f}",
                          rep.antistokes.weight_broad, rep.min_psd, rep.curves.rows.size(), rep.area_difference)};
}

Outcome bias_study_default() {
  const auto cfg = default_bias_config();
  const auto rep = bias_study(cfg);
  const bool ok = rep.valid && rep.mean_s >= 0.005 && rep.mean_s <= 0.03 && rep.std_s >= 0.01 &&
                  rep.std_s <= 0.04 && rep.skewness_s > 0.0 && rep.seconds < 600.0;
  return {ok, fmt::format("{} trials ({} failed): mean {:.4f} in [0.005, 0.03], std {:.4f} in [0.01, 0.04], "
                          "skewness {:.3f} > 0, {:.0f} s < 600 s",
                          rep.n_trials, rep.n_failed, rep.mean_s, rep.std_s, rep.skewness_s, rep.seconds)};
}

Outcome recovery_study() {
  const auto cfg = ConfigFile::parse(R"([truth]
omega_m_hz = 530e3
gamma_eff_hz = 3929.31
n_bar = 5.8
s = 0.53
[acquisition]
delta_lo_hz = 11e3
resolution_hz = 0.2
half_window_hz = 20e3
floor_db = 15
n_avg = 10
[experiment]
n_repeats = 100
seed = 2024
rebin = 200
)");
  const auto rep = cmd_experiment(cfg);
  const bool ok = rep.n_failed == 0 && rep.s_moments.std <= 0.05 && std::abs(rep.s_bias) <= 0.02;
  return {ok, fmt::format("{} campaigns ({} failed): mean s {:.4f}, std {:.4f} <= 0.05, bias {:+.4f} within 0.02",
                          rep.rows.size(), rep.n_failed, rep.s_moments.mean, rep.s_moments.std, rep.s_bias)};
}

Outcome detuning_behavior() {
  const auto cfg = ConfigFile::parse(R"([cavity]
kappa_hz = 1.9e6
g0_hz = 20
detuning_hz = -150e3
[mechanics]
omega_m0_hz = 530e3
quality_factor = 6.4e6
[bath]
temperature_k = 7
[pump]
alpha_in_minus = 1.26e7
alpha_in_plus = 7.3e6, 0
[sweep]
axis = detuning
start = -300e3
stop = 300e3
n_points = 121
)");
  const auto t = run_sweep(sweep_config(cfg), cfg);
  std::size_t mid = 0;
  while (t.at(mid, "detuning_hz") != 0.0) ++mid;
  const double r0 = t.at(mid, "r0");
  const double dev = std::max(std::abs(t.at(mid, "r_plus") - r0), std::abs(t.at(mid, "r_minus") - r0)) / r0;
  bool folded = true;
  int pairs = 0;
  for (std::size_t k = 1; k <= mid && mid + k < t.rows.size(); ++k) {
    const std::size_t lo = mid - k, hi = mid + k;
    if (t.at(lo, "stable") == 0.0 || t.at(hi, "stable") == 0.0) continue;
    ++pairs;
    folded = folded && t.at(lo, "s") >= 0.0 && t.at(hi, "s") >= 0.0 &&
             t.at(lo, "s") == std::abs(t.at(lo, "s_signed")) && t.at(hi, "s") == std::abs(t.at(hi, "s_signed")) &&
             t.at(lo, "s_signed") * t.at(hi, "s_signed") < 0.0;
  }
  const bool ok = t.at(mid, "s") == 0.0 && dev <= 1e-9 && folded && pairs > 0;
  return {ok, fmt::format("s(0) = {}, max |R+-(0) - R0(0)| / R0 = {:.1e}, folding checked on {} +/-Delta pairs: {}",
                          t.at(mid, "s"), dev, pairs, folded ? "ok" : "broken")};
}

// Two-sided copy of a one-sided PSD around 0 Hz, for a symmetric Lorentzian
// fit. The DC bin of a one-sided estimate is not doubled, so it is masked.
SpectrumData mirrored(const SpectrumData& one_sided, double f_max) {
  const auto d = one_sided.slice(0.0, f_max);
  SpectrumData m;
  m.n_avg = d.n_avg;
  m.resolution_hz = d.resolution_hz;
  for (std::size_t i = d.size() - 1; i >= 1; --i) {
    m.freq_hz.push_back(-d.freq_hz[i]);
    m.psd.push_back(d.psd[i]);
  }
  m.freq_hz.insert(m.freq_hz.end(), d.freq_hz.begin(), d.freq_hz.end());
  m.psd.insert(m.psd.end(), d.psd.begin(), d.psd.end());
  m.mask.assign(m.size(), 0);
  m.mask[d.size() - 1] = 1;
  return m;
}

Outcome sde_widths() {
  const double phi = 0.6, s = 0.5, n = 2.0;
  const auto r = phenomenological_rates(hz_to_rad(530e3), 1.0, s, n, phi);
  const double dt = 0.01, duration = 40000.0;
  const auto tr = sde_simulate(r, n, duration, dt, 5);
  std::vector<double> y(tr.samples.size()), x(tr.samples.size());
  const cplx rot = std::exp(cplx{0.0, -0.5 * phi});
  for (std::size_t k = 0; k < y.size(); ++k) {
    y[k] = (rot * tr.samples[k]).real();
    x[k] = -(rot * tr.samples[k]).imag();
  }
  const auto py = welch_psd(y, 1.0 / dt, 1 << 14);
  const auto px = welch_psd(x, 1.0 / dt, 1 << 14);
  const double gp = rad_to_hz(r.gamma_plus), gm = rad_to_hz(r.gamma_minus);
  const auto fy = fit_single_peak(mirrored(py, 10.0 * gp));
  const auto fx = fit_single_peak(mirrored(px, 10.0 * gm));
  if (!fy.converged || !fx.converged) return {false, "quadrature fit did not converge"};
  const double wy = fy.get("width_hz") / gp;
  const double wx = fx.get("width_hz") / gm;
  const double corr_times = duration * r.gamma_minus;
  const bool ok = std::abs(wy - 1.0) <= 0.05 && std::abs(wx - 1.0) <= 0.05 && corr_times >= 200.0;
  return {ok, fmt::format("Y width / Gamma+ = {:.4f}, X width / Gamma- = {:.4f}, {:.0f} correlation times", wy, wx,
                          corr_times)};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Outcome determinism() {
  const auto base = fs::temp_directory_path() / fmt::format("omsqz_acceptance_{}", ::getpid());
  fs::remove_all(base);
  const std::string truth = R"([truth]
omega_m_hz = 530e3
gamma_eff_hz = 3929.31
n_bar = 5.8
s = 0.53
[acquisition]
n_avg = 10
[synth]
seed = 17
[experiment]
n_repeats = 10
seed = 17
rebin = 200
)";
  const std::vector<std::pair<std::string, std::string>> runs{
      {"synth", truth},
      {"experiment", truth},
      {"bias", "[bias]\nn_trials = 100\nseed = 17\n"},
  };
  int files = 0;
  std::vector<std::string> differing;
  for (const auto& [cmd, text] : runs) {
    const auto cfg = ConfigFile::parse(text);
    RunOptions opt;
    opt.formats = OutputFormats::parse("csv,json");
    opt.out_dir = base / cmd / "1";
    const auto m = run_command(cmd, cfg, opt);
    opt.out_dir = base / cmd / "2";
    run_command(cmd, cfg, opt);
    for (const auto& f : m.outputs) {
      ++files;
      if (slurp(base / cmd / "1" / f) != slurp(base / cmd / "2" / f)) differing.push_back(cmd + "/" + f);
    }
  }
  fs::remove_all(base);
  return {differing.empty() && files > 0,
          fmt::format("synth, experiment, bias: {} CSV/JSON files compared, {} differ", files, differing.size())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"oracle equivalence", oracle_equivalence},
      {"sum rule", sum_rule},
      {"rate identity", rate_identity},
      {"ratio formulas", ratio_formulas},
      {"low-occupation spectrum", fig7_spectrum},
      {"bias study", bias_study_default},
      {"recovery study", recovery_study},
      {"detuning behavior", detuning_behavior},
      {"SDE cross-check", sde_widths},
      {"determinism", determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, fmt::format("threw: {}", e.what())};
    }
    failed += !o.pass;
    std::printf("%s %2d %-24s %s\n", o.pass ? "PASS" : "FAIL", id, criteria[k].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
