#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>
#include <json.hpp>

#include "omsqz/cli.hpp"
#include "omsqz/errors.hpp"
#include "omsqz/oracle.hpp"
#include "omsqz/rng.hpp"
#include "omsqz/units.hpp"

namespace omsqz {

namespace {

using ojson = nlohmann::ordered_json;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// JSON has no NaN; missing values are written as null.
ojson num(double v) { return std::isfinite(v) ? ojson(v) : ojson(nullptr); }

ojson rates_json(const DerivedRates& r) {
  ojson j;
  j["omega_m_hz"] = num(rad_to_hz(r.omega_m));
  j["gamma_opt_hz"] = num(rad_to_hz(r.gamma_opt));
  j["gamma_eff_hz"] = num(rad_to_hz(r.gamma_eff));
  j["gamma_par_hz"] = num(rad_to_hz(r.gamma_par));
  j["phi"] = num(r.phi);
  j["s"] = num(std::abs(r.s));
  j["s_signed"] = num(r.s);
  j["gamma_plus_hz"] = num(rad_to_hz(r.gamma_plus));
  j["gamma_minus_hz"] = num(rad_to_hz(r.gamma_minus));
  j["a_minus_hz"] = num(rad_to_hz(r.a_minus));
  j["a_plus_hz"] = num(rad_to_hz(r.a_plus));
  j["n_ba"] = r.n_ba ? num(*r.n_ba) : ojson(nullptr);
  j["n_bar"] = num(r.n_bar);
  j["anomalous_hz"] = {num(rad_to_hz(r.anomalous.real())), num(rad_to_hz(r.anomalous.imag()))};
  return j;
}

ojson ratios_json(double n_bar, double s) {
  ojson j;
  if (!(n_bar >= 0.0) || !(std::abs(s) < 1.0)) return j;
  const auto r = sideband_ratios(n_bar, std::abs(s));
  j["r0"] = num(r.r0);
  j["r_plus"] = num(r.r_plus);
  j["r_minus"] = num(r.r_minus);
  j["var_y"] = num(squeezed_variance(n_bar, std::abs(s)));
  j["var_x"] = num(antisqueezed_variance(n_bar, std::abs(s)));
  const auto c = squeezing_criterion(n_bar, std::abs(s));
  j["below_zero_point"] = c.below_zero_point;
  j["criterion_margin"] = c.margin;
  return j;
}

ojson acquisition_json(const Acquisition& a) {
  ojson j;
  j["delta_lo_hz"] = rad_to_hz(a.delta_lo);
  j["resolution_hz"] = a.resolution_hz;
  j["half_window_hz"] = a.half_window_hz;
  j["calibration"] = a.calibration;
  j["floor"] = a.floor;
  j["n_avg"] = a.n_avg;
  return j;
}

ojson moments_json(const SampleMoments& m) {
  return {{"mean", num(m.mean)}, {"std", num(m.std)}, {"skewness", num(m.skewness)}};
}

}  // namespace

int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const PreconditionError*>(&e) ||
      dynamic_cast<const ZeroPumpError*>(&e))
    return kExitConfig;
  if (dynamic_cast<const InstabilityError*>(&e)) return kExitInstability;
  if (dynamic_cast<const FitThresholdError*>(&e) || dynamic_cast<const FitError*>(&e)) return kExitFitFailures;
  return kExitError;
}

// ---- rates ------------------------------------------------------------------

RatesReport cmd_rates(const ConfigFile& cfg) {
  RatesReport rep;
  if (has_truth(cfg)) {
    rep.rates = config_rates(cfg);
    return rep;
  }
  rep.rates.params = system_params(cfg);
  rep.rates.pump = pump_config(cfg);
  const auto& p = *rep.rates.params;
  const auto fp = self_consistent_frequency(p, *rep.rates.pump);
  rep.field = intracavity_amplitudes(p, *rep.rates.pump, fp.omega_m);
  rep.rates.on = derive_unchecked(p, *rep.field, fp.omega_m);
  try {
    check_stability(rep.rates.on);
  } catch (const InstabilityError& e) {
    rep.stable = false;
    rep.instability = e.what();
  }
  DerivedRates base = rep.rates.on;
  if (const auto off = pump_off_config(cfg)) {
    const auto fo = self_consistent_frequency(p, *off);
    base = derive_unchecked(p, intracavity_amplitudes(p, *off, fo.omega_m), fo.omega_m);
  }
  rep.rates.off = drive_off_rates(base);
  return rep;
}

std::string RatesReport::json() const {
  ojson j;
  j["stable"] = stable;
  if (!stable) j["instability"] = instability;
  if (rates.params) {
    const auto& p = *rates.params;
    ojson q;
    q["kappa_hz"] = rad_to_hz(p.kappa);
    q["kappa_in_hz"] = rad_to_hz(p.kappa_in);
    q["g0_hz"] = rad_to_hz(p.g0);
    q["detuning_hz"] = rad_to_hz(p.delta);
    q["omega_m0_hz"] = rad_to_hz(p.omega_m0);
    q["gamma_m_hz"] = rad_to_hz(p.gamma_m);
    q["quality_factor"] = p.omega_m0 / p.gamma_m;
    q["n_th"] = p.n_th;
    q["n_extra"] = p.n_extra;
    if (p.bath_temperature) q["temperature_k"] = *p.bath_temperature;
    j["params"] = q;
  }
  if (field) {
    j["field"] = {{"g_hz", rad_to_hz(field->g)},
                  {"epsilon_c", field->epsilon_c},
                  {"abs_alpha_minus", std::abs(field->alpha_minus)},
                  {"abs_alpha_plus", std::abs(field->alpha_plus)}};
  }
  j["drive_on"] = rates_json(rates.on);
  j["drive_on"]["sidebands"] = ratios_json(rates.on.n_bar, rates.on.s);
  j["drive_off"] = rates_json(rates.off);
  j["drive_off"]["sidebands"] = ratios_json(rates.off.n_bar, rates.off.s);
  return j.dump(2) + "\n";
}

std::string RatesReport::table() const {
  std::string out;
  const auto row = [&](const char* name, double v, const char* unit) {
    out += fmt::format("{:<22}{:>16.8g}  {}\n", name, v, unit);
  };
  if (rates.params) {
    const auto& p = *rates.params;
    row("kappa/2pi", rad_to_hz(p.kappa), "Hz");
    row("kappa_in/2pi", rad_to_hz(p.kappa_in), "Hz");
    row("Omega_m0/2pi", rad_to_hz(p.omega_m0), "Hz");
    row("Gamma_m/2pi", rad_to_hz(p.gamma_m), "Hz");
    row("n_th", p.n_th, "");
  }
  if (field) {
    row("g/2pi", rad_to_hz(field->g), "Hz");
    row("epsilon_c", field->epsilon_c, "");
  }
  const auto& r = rates.on;
  row("Omega_m/2pi", rad_to_hz(r.omega_m), "Hz");
  row("Gamma_opt/2pi", rad_to_hz(r.gamma_opt), "Hz");
  row("Gamma_eff/2pi", rad_to_hz(r.gamma_eff), "Hz");
  row("Gamma_par/2pi", rad_to_hz(r.gamma_par), "Hz");
  row("phi", r.phi, "rad");
  row("s", r.s, "");
  row("Gamma+/2pi", rad_to_hz(r.gamma_plus), "Hz");
  row("Gamma-/2pi", rad_to_hz(r.gamma_minus), "Hz");
  row("A-/2pi", rad_to_hz(r.a_minus), "Hz");
  row("A+/2pi", rad_to_hz(r.a_plus), "Hz");
  if (r.n_ba) row("n_BA", *r.n_ba, "");
  row("n_bar", r.n_bar, "");
  if (r.n_bar >= 0.0 && std::abs(r.s) < 1.0) {
    const auto q = sideband_ratios(r.n_bar, std::abs(r.s));
    row("R0", q.r0, "");
    row("R+", q.r_plus, "");
    row("R-", q.r_minus, "");
  }
  out += fmt::format("{:<22}{:>16}\n", "stable", stable ? "yes" : "no");
  if (!stable) out += fmt::format("  {}\n", instability);
  return out;
}

// ---- spectrum -----------------------------------------------------------------

namespace {

SidebandSummary summarize(const SidebandTerms& t) {
  return {t.weight_narrow, t.weight_broad, t.area_narrow(), t.area_broad(), rad_to_hz(t.width_narrow),
          rad_to_hz(t.width_broad)};
}

ojson sideband_json(const SidebandSummary& s) {
  return {{"weight_narrow", s.weight_narrow}, {"weight_broad", s.weight_broad},
          {"area_narrow", s.area_narrow},     {"area_broad", s.area_broad},
          {"area", s.area_narrow + s.area_broad}, {"width_narrow_hz", s.width_narrow_hz},
          {"width_broad_hz", s.width_broad_hz}};
}

}  // namespace

SpectrumReport cmd_spectrum(const ConfigFile& cfg) {
  cfg.allow_keys("spectrum", {"resolution_hz", "oracle"});
  SpectrumReport rep;
  const auto rates = config_rates(cfg);
  rep.rates = rates.on;
  rep.acq = acquisition(cfg, rates.on);
  auto grid_acq = rep.acq;
  grid_acq.resolution_hz = cfg.number("spectrum", "resolution_hz", rep.acq.resolution_hz);
  if (!(grid_acq.resolution_hz > 0.0)) cfg.fail("spectrum", "resolution_hz", "must be > 0");
  const auto grid = grid_acq.grid_hz(rep.rates.omega_m);
  const auto& r = rep.rates;
  const double n = r.n_bar;

  const auto composite = heterodyne_composite(r, n, rep.acq.delta_lo, rep.acq.calibration, rep.acq.floor, grid);
  rep.curves.columns = {"freq_hz", "total", "stokes_narrow", "stokes_broad", "antistokes_narrow",
                        "antistokes_broad"};
  std::vector<std::vector<double>> comps;
  for (const auto& c : composite.model.components) {
    std::vector<double> v(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) v[i] = rep.acq.calibration * c.value(hz_to_rad(grid[i]));
    comps.push_back(std::move(v));
  }

  std::vector<double> oracle;
  if (cfg.boolean("spectrum", "oracle", false)) {
    rep.curves.columns.push_back("oracle_total");
    const double f_st = rad_to_hz(r.omega_m + rep.acq.delta_lo);
    const double f_as = rad_to_hz(r.omega_m - rep.acq.delta_lo);
    std::vector<double> d_st(grid.size()), d_as(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) {
      d_st[i] = hz_to_rad(grid[i] - f_st);
      d_as[i] = hz_to_rad(grid[i] - f_as);
    }
    const auto noise = NoiseCorrelators::thermal_equivalent(r.gamma_eff, n);
    const auto ps = propagate_spectra(r, noise, d_st);
    const auto pa = propagate_spectra(r, noise, d_as);
    oracle.resize(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) {
      oracle[i] = rep.acq.floor + rep.acq.calibration * (ps.stokes[i] + pa.antistokes[i]);
      const double rel = std::abs(oracle[i] - composite.psd[i]) / std::abs(composite.psd[i]);
      rep.max_oracle_rel_diff = std::max(rep.max_oracle_rel_diff, rel);
    }
  }

  rep.curves.rows.reserve(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    std::vector<double> row{grid[i], composite.psd[i]};
    for (const auto& c : comps) row.push_back(c[i]);
    if (!oracle.empty()) row.push_back(oracle[i]);
    rep.curves.rows.push_back(std::move(row));
  }
  rep.stokes = summarize(stokes_terms(r, n));
  rep.antistokes = summarize(antistokes_terms(r, n));
  rep.area_difference =
      (rep.stokes.area_narrow + rep.stokes.area_broad) - (rep.antistokes.area_narrow + rep.antistokes.area_broad);
  rep.min_psd = *std::min_element(composite.psd.begin(), composite.psd.end());
  return rep;
}

std::string SpectrumReport::json() const {
  ojson j;
  j["rates"] = rates_json(rates);
  j["acquisition"] = acquisition_json(acq);
  j["grid"] = {{"n_bins", curves.rows.size()},
               {"f_min_hz", curves.rows.empty() ? 0.0 : curves.rows.front()[0]},
               {"f_max_hz", curves.rows.empty() ? 0.0 : curves.rows.back()[0]}};
  j["stokes"] = sideband_json(stokes);
  j["antistokes"] = sideband_json(antistokes);
  j["area_difference"] = area_difference;
  j["min_psd"] = min_psd;
  j["nonnegative"] = min_psd >= 0.0;
  j["sidebands"] = ratios_json(rates.n_bar, rates.s);
  if (curves.columns.back() == "oracle_total") j["max_oracle_rel_diff"] = max_oracle_rel_diff;
  return j.dump(2) + "\n";
}

// ---- experiment -----------------------------------------------------------------

ExperimentReport cmd_experiment(const ConfigFile& cfg, std::optional<std::uint64_t> seed) {
  cfg.allow_keys("experiment",
                 {"n_repeats", "seed", "noiseless", "rebin", "fit_window_hz", "max_failure_fraction"});
  ExperimentReport rep;
  const auto rates = config_rates(cfg);
  rep.truth_on = rates.on;
  rep.truth_off = rates.off;
  rep.acq = acquisition(cfg, rates.on);
  const int n_repeats = static_cast<int>(cfg.integer("experiment", "n_repeats", 20));
  if (n_repeats < 1) cfg.fail("experiment", "n_repeats", "must be >= 1");
  rep.root_seed = seed ? *seed : static_cast<std::uint64_t>(cfg.integer("experiment", "seed", 1));
  rep.noiseless = cfg.boolean("experiment", "noiseless", false);
  rep.rebin = static_cast<int>(cfg.integer("experiment", "rebin", 1));
  if (rep.rebin < 1) cfg.fail("experiment", "rebin", "must be >= 1");
  rep.fit_window_hz = cfg.number("experiment", "fit_window_hz", rep.acq.half_window_hz);
  if (!(rep.fit_window_hz > 0.0)) cfg.fail("experiment", "fit_window_hz", "must be > 0");
  rep.max_failure_fraction = cfg.number("experiment", "max_failure_fraction", 0.05);
  if (!(rep.max_failure_fraction >= 0.0 && rep.max_failure_fraction <= 1.0))
    cfg.fail("experiment", "max_failure_fraction", "must be in [0, 1]");
  const auto opt = fit_options(cfg);

  const auto grid = rep.acq.grid_hz(rates.on.omega_m);
  const auto& acq = rep.acq;
  auto model_of = [&](const DerivedRates& r) {
    return heterodyne_model(r, r.n_bar, acq.delta_lo, acq.calibration, acq.floor).sample_hz(grid);
  };
  auto mask_of = [&](const DerivedRates& r) {
    const double f_st = rad_to_hz(r.omega_m + acq.delta_lo), f_as = rad_to_hz(r.omega_m - acq.delta_lo);
    std::vector<std::uint8_t> m(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i)
      m[i] = std::abs(grid[i] - f_st) > rep.fit_window_hz && std::abs(grid[i] - f_as) > rep.fit_window_hz;
    return m;
  };
  const auto psd_on = model_of(rates.on), psd_off = model_of(rates.off);
  const auto mask_on = mask_of(rates.on), mask_off = mask_of(rates.off);

  auto spectrum = [&](const std::vector<double>& psd, const std::vector<std::uint8_t>& mask, std::uint64_t s) {
    SpectrumData d;
    if (rep.noiseless) {
      d = SpectrumData::uniform(grid.front(), acq.resolution_hz, grid.size(), acq.n_avg);
      d.freq_hz = grid;
      d.psd = psd;
      d.mask = mask;
    } else {
      d = synth_periodogram(grid, psd, acq.n_avg, s, mask);
    }
    return rep.rebin > 1 ? d.rebin(rep.rebin) : d;
  };

  struct Fits {
    FitResult off, on;
    SpectrumData d_on;
  };
  auto run_one = [&](int k, Fits* keep) {
    ExperimentRow row;
    row.repeat = k;
    const auto s_r = task_seed(rep.root_seed, static_cast<std::uint64_t>(k));
    try {
      const auto d_off = spectrum(psd_off, mask_off, task_seed(s_r, 1));
      auto d_on = spectrum(psd_on, mask_on, task_seed(s_r, 0));
      const auto off = fit_single_pair(d_off, {}, opt);
      if (!off.converged || !off.n_bar_inferred) {
        row.failure = off.warnings.empty() ? "drive-off fit failed" : "drive-off fit: " + off.warnings.back();
        return row;
      }
      FitHint h;
      h.center_stokes_hz = off.get("center_stokes_hz");
      h.center_antistokes_hz = off.get("center_antistokes_hz");
      auto on = fit_double_pair(d_on, off.get("gamma_eff_hz"), h, opt);
      row.gamma_eff_hz = off.get("gamma_eff_hz");
      row.r0 = off.ratios->r0;
      row.n_bar = *off.n_bar_inferred;
      row.s = on.get("s");
      row.sigma_s = on.sigmas.at("s");
      row.r_plus = on.ratios->r_plus;
      row.r_minus = on.ratios->r_minus;
      row.area_antistokes_broad = on.get("area_antistokes_broad");
      row.ok = on.converged;
      if (!on.converged) row.failure = "drive-on fit: " + on.warnings.back();
      if (keep) *keep = {off, std::move(on), std::move(d_on)};
    } catch (const Error& e) {
      row.failure = e.what();
    }
    return row;
  };

  rep.rows.resize(static_cast<std::size_t>(n_repeats));
#pragma omp parallel for schedule(dynamic, 1)
  for (int k = 0; k < n_repeats; ++k) rep.rows[static_cast<std::size_t>(k)] = run_one(k, nullptr);

  std::vector<double> s_ok, n_ok;
  int negative = 0;
  for (const auto& r : rep.rows) {
    if (!r.ok) {
      ++rep.n_failed;
      continue;
    }
    s_ok.push_back(r.s);
    n_ok.push_back(r.n_bar);
    negative += r.area_antistokes_broad < 0.0;
  }
  rep.s_moments = sample_moments(s_ok);
  rep.n_bar_moments = sample_moments(n_ok);
  rep.s_bias = s_ok.empty() ? kNaN : rep.s_moments.mean - std::abs(rates.on.s);
  rep.negative_broad_fraction = s_ok.empty() ? kNaN : static_cast<double>(negative) / static_cast<double>(s_ok.size());

  // Overlay of the first repeat, refitted serially.
  Fits first;
  const auto row0 = run_one(0, &first);
  rep.overlay.columns = {"freq_hz", "data", "masked", "fit_total"};
  if (row0.ok) {
    const auto curves = fit_curves(first.on, first.d_on.freq_hz);
    rep.overlay.columns.insert(rep.overlay.columns.end(),
                               {"stokes_narrow", "stokes_broad", "antistokes_narrow", "antistokes_broad"});
    for (std::size_t i = 0; i < first.d_on.size(); ++i) {
      std::vector<double> row{first.d_on.freq_hz[i], first.d_on.psd[i], first.d_on.masked(i) ? 1.0 : 0.0};
      for (const auto& c : curves) row.push_back(c[i]);
      rep.overlay.rows.push_back(std::move(row));
    }
  }
  return rep;
}

Table ExperimentReport::table() const {
  Table t;
  t.columns = {"repeat", "ok", "gamma_eff_hz", "r0", "n_bar", "s", "sigma_s", "r_plus", "r_minus",
               "area_antistokes_broad"};
  for (const auto& r : rows) {
    if (r.ok)
      t.rows.push_back({static_cast<double>(r.repeat), 1.0, r.gamma_eff_hz, r.r0, r.n_bar, r.s, r.sigma_s, r.r_plus,
                        r.r_minus, r.area_antistokes_broad});
    else
      t.rows.push_back({static_cast<double>(r.repeat), 0.0, kNaN, kNaN, kNaN, kNaN, kNaN, kNaN, kNaN, kNaN});
  }
  return t;
}

std::string ExperimentReport::json() const {
  ojson j;
  j["truth"] = {{"drive_on", rates_json(truth_on)}, {"drive_off", rates_json(truth_off)}};
  j["truth"]["drive_on"]["sidebands"] = ratios_json(truth_on.n_bar, truth_on.s);
  j["acquisition"] = acquisition_json(acq);
  j["settings"] = {{"n_repeats", rows.size()}, {"root_seed", root_seed},         {"noiseless", noiseless},
                   {"rebin", rebin},           {"fit_window_hz", fit_window_hz}, {"max_failure_fraction", max_failure_fraction}};
  const auto n_ok = static_cast<double>(rows.size()) - n_failed;
  ojson res;
  res["n_failed"] = n_failed;
  res["s"] = moments_json(s_moments);
  res["s"]["bias"] = num(s_bias);
  res["s"]["standard_error"] = num(n_ok > 0 ? s_moments.std / std::sqrt(n_ok) : kNaN);
  res["s"]["within_two_sigma"] = std::isfinite(s_bias) && std::abs(s_bias) <= 2.0 * s_moments.std;
  // "std" is the scatter over repeats; this is the per-fit Fisher estimate.
  double sigma_sum = 0.0;
  int sigma_n = 0;
  for (const auto& r : rows)
    if (r.ok && std::isfinite(r.sigma_s)) {
      sigma_sum += r.sigma_s;
      ++sigma_n;
    }
  res["s"]["mean_fit_sigma"] = num(sigma_n > 0 ? sigma_sum / sigma_n : kNaN);
  res["n_bar"] = moments_json(n_bar_moments);
  res["n_bar"]["bias"] = num(n_ok > 0 ? n_bar_moments.mean - truth_off.n_bar : kNaN);
  res["negative_broad_antistokes_fraction"] = num(negative_broad_fraction);
  j["results"] = res;
  ojson failures = ojson::array();
  for (const auto& r : rows)
    if (!r.ok) failures.push_back({{"repeat", r.repeat}, {"reason", r.failure}});
  j["failures"] = failures;
  return j.dump(2) + "\n";
}

}  // namespace omsqz
