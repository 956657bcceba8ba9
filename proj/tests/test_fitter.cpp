#include <doctest.h>

#include "approx.hpp"

#include <cmath>
#include <random>
#include <vector>

#include "omsqz/core.hpp"
#include "omsqz/errors.hpp"
#include "omsqz/fitter.hpp"
#include "omsqz/lineshape.hpp"
#include "omsqz/rng.hpp"
#include "omsqz/synthesizer.hpp"
#include "omsqz/units.hpp"

using namespace omsqz;

namespace {

constexpr double kFm = 530e3;
constexpr double kDeltaLo = 11e3;

struct Setup {
  double n_bar = 5.8;
  double s = 0.0;
  double gamma_hz = 100.0;
  double half_window_hz = 2000.0;
  double resolution_hz = 5.0;
  double floor_db = 20.0;  // below the Stokes peak
  int n_avg = 10;
};

BiasStudyConfig as_config(const Setup& u) {
  BiasStudyConfig c;
  c.omega_m = hz_to_rad(kFm);
  c.gamma_eff = hz_to_rad(u.gamma_hz);
  c.n_bar = u.n_bar;
  c.s = u.s;
  c.acq.delta_lo = hz_to_rad(kDeltaLo);
  c.acq.resolution_hz = u.resolution_hz;
  c.acq.half_window_hz = u.half_window_hz;
  c.acq.n_avg = u.n_avg;
  c.acq.floor = floor_below_stokes_peak(c, u.floor_db);
  return c;
}

// Truth spectrum with everything outside the two windows masked; seed 0 means noiseless.
SpectrumData make_data(const Setup& u, std::uint64_t seed = 0) {
  const auto c = as_config(u);
  const auto rates = phenomenological_rates(c.omega_m, c.gamma_eff, c.s, c.n_bar);
  const auto grid = c.acq.grid_hz(c.omega_m);
  const auto psd = heterodyne_model(rates, c.n_bar, c.acq.delta_lo, 1.0, c.acq.floor).sample_hz(grid);
  std::vector<std::uint8_t> mask(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i)
    mask[i] = std::abs(grid[i] - (kFm + kDeltaLo)) > u.half_window_hz &&
              std::abs(grid[i] - (kFm - kDeltaLo)) > u.half_window_hz;
  if (seed != 0) return synth_periodogram(grid, psd, u.n_avg, seed, mask);
  auto d = SpectrumData::uniform(grid.front(), u.resolution_hz, grid.size(), u.n_avg);
  d.freq_hz = grid;
  d.psd = psd;
  d.mask = mask;
  return d;
}

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

FitResult fit_both(const SpectrumData& d) {
  const auto single = fit_single_pair(d);
  FitHint h;
  h.center_stokes_hz = single.get("center_stokes_hz");
  h.center_antistokes_hz = single.get("center_antistokes_hz");
  return fit_double_pair(d, single.get("gamma_eff_hz"), h);
}

}  // namespace

TEST_CASE("single pair: noiseless round trip") {
  const Setup u;
  const auto fit = fit_single_pair(make_data(u));
  REQUIRE(fit.converged);
  CHECK(fit.gradient_norm <= FitOptions{}.gradient_tolerance);
  const auto rates = phenomenological_rates(hz_to_rad(kFm), hz_to_rad(u.gamma_hz), 0.0, u.n_bar);
  const double floor = as_config(u).acq.floor;
  CHECK(rel(fit.get("center_stokes_hz"), kFm + kDeltaLo) < 1e-12);
  CHECK(rel(fit.get("center_antistokes_hz"), kFm - kDeltaLo) < 1e-12);
  CHECK(rel(fit.get("gamma_eff_hz"), u.gamma_hz) < 1e-6);
  CHECK(rel(fit.get("area_stokes"), stokes_terms(rates, u.n_bar).area()) < 1e-6);
  CHECK(rel(fit.get("area_antistokes"), antistokes_terms(rates, u.n_bar).area()) < 1e-6);
  CHECK(rel(fit.get("floor"), floor) < 1e-6);
  REQUIRE(fit.ratios);
  CHECK(rel(fit.ratios->r0, (u.n_bar + 1.0) / u.n_bar) < 1e-6);
  REQUIRE(fit.n_bar_inferred);
  CHECK(rel(*fit.n_bar_inferred, u.n_bar) < 1e-6);
}

TEST_CASE("single pair: R0 = 1.172 corresponds to n_bar near 5.8") {
  Setup u;
  u.n_bar = 1.0 / 0.172;
  const auto fit = fit_single_pair(make_data(u));
  REQUIRE(fit.ratios);
  CHECK(fit.ratios->r0 == approx(1.172).epsilon(1e-6));
  CHECK(*fit.n_bar_inferred == approx(5.8).epsilon(0.01));
}

TEST_CASE("single pair: ratio correction scales R0") {
  const auto d = make_data(Setup{});
  FitOptions opt;
  opt.ratio_correction = 1.01;
  const auto a = fit_single_pair(d);
  const auto b = fit_single_pair(d, {}, opt);
  CHECK(b.ratios->r0 == approx(1.01 * a.ratios->r0).epsilon(1e-12));
}

TEST_CASE("single pair: n_bar over 100 noisy seeds at n_avg = 10") {
  auto c = default_bias_config();
  c.n_trials = 100;
  const auto rates = phenomenological_rates(c.omega_m, c.gamma_eff, c.s, c.n_bar);
  const auto grid = c.acq.grid_hz(c.omega_m);
  const auto psd = heterodyne_model(rates, c.n_bar, c.acq.delta_lo, 1.0, c.acq.floor).sample_hz(grid);
  const double f_st = rad_to_hz(c.omega_m + c.acq.delta_lo), f_as = rad_to_hz(c.omega_m - c.acq.delta_lo);
  std::vector<std::uint8_t> mask(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i)
    mask[i] = std::abs(grid[i] - f_st) > c.acq.half_window_hz && std::abs(grid[i] - f_as) > c.acq.half_window_hz;
  int outside = 0;
  for (int k = 0; k < c.n_trials; ++k) {
    const auto d = synth_periodogram(grid, psd, c.acq.n_avg, task_seed(77, k), mask).rebin(c.rebin);
    const auto fit = fit_single_pair(d);
    REQUIRE(fit.converged);
    outside += std::abs(*fit.n_bar_inferred - 5.8) > 0.5;
  }
  CHECK(outside == 0);
}

TEST_CASE("double pair: noiseless round trip at s = 0.53") {
  Setup u;
  u.s = 0.53;
  const auto fit = fit_double_pair(make_data(u), u.gamma_hz);
  REQUIRE(fit.converged);
  CHECK(!fit.at_boundary);
  CHECK(rel(fit.get("s"), 0.53) < 1e-6);
  const auto rates = phenomenological_rates(hz_to_rad(kFm), hz_to_rad(u.gamma_hz), u.s, u.n_bar);
  const auto st = stokes_terms(rates, u.n_bar);
  const auto as = antistokes_terms(rates, u.n_bar);
  CHECK(rel(fit.get("area_stokes_narrow"), st.area_narrow()) < 1e-6);
  CHECK(rel(fit.get("area_stokes_broad"), st.area_broad()) < 1e-6);
  CHECK(rel(fit.get("area_antistokes_narrow"), as.area_narrow()) < 1e-6);
  CHECK(rel(fit.get("area_antistokes_broad"), as.area_broad()) < 1e-6);
  const auto want = sideband_ratios(5.8, 0.53);
  CHECK(rel(fit.ratios->r_plus, want.r_plus) < 1e-6);
  CHECK(rel(fit.ratios->r_minus, want.r_minus) < 1e-6);
  CHECK(rel(fit.get("gamma_minus_hz"), 47.0) < 1e-6);
  CHECK(rel(fit.get("gamma_plus_hz"), 153.0) < 1e-6);
}

TEST_CASE("double pair: negative broad anti-Stokes weight at n_bar = 0.12, s = 0.4") {
  Setup u;
  u.n_bar = 0.12;
  u.s = 0.4;
  const auto fit = fit_double_pair(make_data(u), u.gamma_hz);
  REQUIRE(fit.converged);
  CHECK(rel(fit.get("s"), 0.4) < 1e-6);
  // area = (Gamma_eff / 2) w / Gamma+, so w = 2 (1 + s) area
  const double w = 2.0 * (1.0 + fit.get("s")) * fit.get("area_antistokes_broad");
  CHECK(w == approx(-0.08).epsilon(1e-6));
  CHECK(rel(fit.ratios->r_plus, sideband_ratios(0.12, 0.4).r_plus) < 1e-6);
  CHECK(fit.ratios->r_plus == approx(-16.5).epsilon(1e-6));
}

TEST_CASE("double pair: ratios match the closed forms for random noiseless truths") {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> nb(0.5, 10.0), ss(0.1, 0.8);
  for (int k = 0; k < 6; ++k) {
    Setup u;
    u.n_bar = nb(gen);
    u.s = ss(gen);
    CAPTURE(u.n_bar);
    CAPTURE(u.s);
    const auto fit = fit_double_pair(make_data(u), u.gamma_hz);
    REQUIRE(fit.converged);
    const auto want = sideband_ratios(u.n_bar, u.s);
    CHECK(rel(fit.ratios->r0, want.r0) < 1e-6);
    CHECK(rel(fit.ratios->r_plus, want.r_plus) < 1e-6);
    CHECK(rel(fit.ratios->r_minus, want.r_minus) < 1e-6);
  }
}

TEST_CASE("double pair: noiseless s = 0 is pinned at the boundary") {
  const auto fit = fit_both(make_data(Setup{}));
  REQUIRE(fit.converged);
  CHECK(fit.get("s") < 1e-6);
  CHECK(fit.at_boundary);
  CHECK(std::isnan(fit.sigmas.at("s")));
  CHECK(!fit.warnings.empty());
}

TEST_CASE("double pair: s is reported folded and nonnegative") {
  Setup u;
  u.s = 0.3;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto fit = fit_both(make_data(u, seed));
    REQUIRE(fit.converged);
    CHECK(fit.get("s") >= 0.0);
    CHECK(fit.get("gamma_minus_hz") <= fit.get("gamma_plus_hz"));
  }
}

TEST_CASE("double pair: Gamma_eff must be positive") {
  CHECK_THROWS_AS(fit_double_pair(make_data(Setup{}), 0.0), PreconditionError);
}

TEST_CASE("fit_curves: total is the floor plus the components") {
  Setup u;
  u.s = 0.53;
  const auto d = make_data(u);
  const auto fit = fit_double_pair(d, u.gamma_hz);
  const auto curves = fit_curves(fit, d.freq_hz);
  REQUIRE(curves.size() == 5);
  for (std::size_t i = 0; i < d.size(); i += 97) {
    double acc = fit.get("floor");
    for (std::size_t k = 1; k < curves.size(); ++k) acc += curves[k][i];
    CHECK(curves[0][i] == approx(acc).epsilon(1e-12));
    if (!d.masked(i)) CHECK(rel(curves[0][i], d.psd[i]) < 1e-6);
  }
}

TEST_CASE("apply_mask: empty list is the identity") {
  const auto d = make_data(Setup{}, 3);
  const auto m = apply_mask(d, {});
  CHECK(m.psd == d.psd);
  CHECK(m.mask == d.mask);
  const auto a = fit_single_pair(d), b = fit_single_pair(m);
  CHECK(a.params == b.params);
  CHECK_THROWS_AS(apply_mask(d, {{2.0, 1.0}}), PreconditionError);
}

TEST_CASE("apply_mask: masking a spurious spike restores the fit") {
  Setup u;
  u.s = 0.5;
  const auto clean = make_data(u, 11);
  auto spiked = clean;
  const double f_spike = kFm + kDeltaLo + 150.0;
  for (std::size_t i = 0; i < spiked.size(); ++i)
    if (std::abs(spiked.freq_hz[i] - f_spike) <= 10.0) spiked.psd[i] *= 30.0;

  const auto ref = fit_both(clean);
  const auto bad = fit_both(spiked);
  const auto fixed = fit_both(apply_mask(spiked, {{f_spike - 10.0, f_spike + 10.0}}));
  REQUIRE(ref.converged);
  REQUIRE(fixed.converged);
  const double sigma = ref.sigmas.at("s");
  CHECK(std::abs(fixed.get("s") - ref.get("s")) < sigma);
  CHECK(std::abs(bad.get("s") - ref.get("s")) > std::abs(fixed.get("s") - ref.get("s")));
}

TEST_CASE("apply_mask: masking most of a peak inflates the errors and warns") {
  Setup u;
  const auto d = make_data(u, 12);
  const double f_st = kFm + kDeltaLo;
  const auto masked = apply_mask(d, {{f_st - 90.0, f_st + 90.0}});
  const auto a = fit_single_pair(d), b = fit_single_pair(masked);
  REQUIRE(b.converged);
  CHECK(b.sigmas.at("area_stokes") > 1.3 * a.sigmas.at("area_stokes"));
  bool warned = false;
  for (const auto& w : b.warnings) warned |= w.find("masked") != std::string::npos;
  CHECK(warned);
  for (const auto& w : a.warnings) CHECK(w.find("masked") == std::string::npos);
}

TEST_CASE("apply_mask: a fully masked sideband is rejected, not reported as converged") {
  Setup u;
  const auto d = make_data(u, 13);
  const double f_as = kFm - kDeltaLo;
  const auto hidden = apply_mask(d, {{f_as - u.half_window_hz, f_as + u.half_window_hz}});
  const auto single = fit_single_pair(hidden);
  CHECK_FALSE(single.converged);
  const auto dp = fit_double_pair(hidden, u.gamma_hz);
  CHECK_FALSE(dp.converged);
}

TEST_CASE("parameter scatter falls as 1/sqrt(n_avg)") {
  const std::vector<int> navg{5, 10, 20, 40};
  std::vector<double> scaled;
  std::vector<double> fisher;
  for (int n : navg) {
    Setup u;
    u.n_avg = n;
    u.half_window_hz = 1000.0;
    std::vector<double> widths;
    double sig = 0.0;
    for (int k = 0; k < 150; ++k) {
      const auto fit = fit_single_pair(make_data(u, task_seed(1000 + n, k)));
      REQUIRE(fit.converged);
      widths.push_back(fit.get("gamma_eff_hz"));
      sig += fit.sigmas.at("gamma_eff_hz") / 150.0;
    }
    scaled.push_back(sample_moments(widths).std * std::sqrt(n));
    fisher.push_back(sig * std::sqrt(n));
  }
  double mean = 0.0;
  for (double v : scaled) mean += v / scaled.size();
  for (std::size_t k = 0; k < navg.size(); ++k) {
    CAPTURE(navg[k]);
    CHECK(scaled[k] == approx(mean).epsilon(0.2));
    // the reported sigma agrees with the observed scatter
    CHECK(fisher[k] == approx(scaled[k]).epsilon(0.2));
  }
}

TEST_CASE("single peak: noiseless round trip") {
  auto d = SpectrumData::uniform(1000.0, 0.5, 4001, 10);
  SpectrumModel m;
  m.floor = 0.2;
  m.components.push_back({hz_to_rad(2000.0), hz_to_rad(40.0), 3.0});
  d.psd = m.sample_hz(d.freq_hz);
  const auto fit = fit_single_peak(d);
  REQUIRE(fit.converged);
  CHECK(rel(fit.get("center_hz"), 2000.0) < 1e-9);
  CHECK(rel(fit.get("width_hz"), 40.0) < 1e-6);
  CHECK(rel(fit.get("area"), 3.0) < 1e-6);
  CHECK(rel(fit.get("floor"), 0.2) < 1e-6);
}

TEST_CASE("sample moments") {
  const auto m = sample_moments({1.0, 2.0, 3.0, 10.0});
  CHECK(m.mean == approx(4.0));
  CHECK(m.std == approx(std::sqrt(50.0 / 3.0)));
  CHECK(m.skewness > 0.0);
  CHECK(std::abs(sample_moments({1.0, 2.0, 3.0}).skewness) < 1e-15);
}

TEST_CASE("bias study: noiseless trials give s below 1e-6") {
  auto c = as_config(Setup{});
  c.n_trials = 100;
  const auto rep = bias_study(c, true);
  CHECK(rep.n_failed == 0);
  for (double s : rep.s_values) CHECK(s < 1e-6);
}

TEST_CASE("bias study: seeded output is reproducible") {
  auto c = as_config(Setup{});
  c.n_trials = 100;
  c.root_seed = 9;
  const auto a = bias_study(c), b = bias_study(c);
  CHECK(to_json(a, c) == to_json(b, c));
  CHECK(histogram_csv(a) == histogram_csv(b));
  CHECK(a.valid);
  auto few = c;
  few.n_trials = 99;
  CHECK_THROWS_AS(bias_study(few), PreconditionError);
  auto squeezed = c;
  squeezed.s = 0.1;
  CHECK_THROWS_AS(bias_study(squeezed), PreconditionError);
}
