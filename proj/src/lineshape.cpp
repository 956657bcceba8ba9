#include "omsqz/lineshape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "omsqz/errors.hpp"
#include "omsqz/kernels.hpp"
#include "omsqz/units.hpp"

namespace omsqz {

namespace {

void require_squeezable(const DerivedRates& r, const char* who) {
  if (!(r.gamma_eff > 0.0) || !(std::abs(r.s) < 1.0))
    throw PreconditionError(fmt::format("{}: need Gamma_eff > 0 and |s| < 1", who));
}

void require_nonnegative(std::span<const double> psd, const char* who) {
  for (std::size_t i = 0; i < psd.size(); ++i)
    if (psd[i] < 0.0 || std::isnan(psd[i]))
      throw InternalConsistencyError(fmt::format("{}: negative PSD {:.6g} at bin {}", who, psd[i], i));
}

}  // namespace

double SpectrumModel::value(double omega) const {
  double acc = 0.0;
  for (const auto& c : components) acc += c.value(omega);
  return floor + calibration * acc;
}

std::vector<double> SpectrumModel::sample(std::span<const double> omega) const {
  auto out = kernels::sample(omega, [this](double w) { return value(w); });
  require_nonnegative(out, "SpectrumModel");
  return out;
}

std::vector<double> SpectrumModel::sample_serial(std::span<const double> omega) const {
  auto out = kernels::sample_serial(omega, [this](double w) { return value(w); });
  require_nonnegative(out, "SpectrumModel");
  return out;
}

std::vector<double> SpectrumModel::sample_hz(std::span<const double> freq_hz) const {
  // Offsets are taken in Hz, where f - f_c is exact for nearby values; scaling
  // the absolute frequency first would add per-bin rounding to every offset.
  std::vector<double> centers_hz;
  for (const auto& c : components) centers_hz.push_back(rad_to_hz(c.center));
  auto out = kernels::sample(freq_hz, [&](double f) {
    double acc = 0.0;
    for (std::size_t k = 0; k < components.size(); ++k) {
      const auto& c = components[k];
      const double d = hz_to_rad(f - centers_hz[k]);
      acc += c.area * c.width / (d * d + 0.25 * c.width * c.width);
    }
    return floor + calibration * acc;
  });
  require_nonnegative(out, "SpectrumModel");
  return out;
}

std::vector<Lorentzian> SidebandTerms::components(double center) const {
  return {{center, width_narrow, area_narrow()}, {center, width_broad, area_broad()}};
}

SidebandTerms stokes_terms(const DerivedRates& rates, double n_bar) {
  require_squeezable(rates, "stokes_terms");
  const double s = rates.s;
  return {0.5 * rates.gamma_eff, 1.0 + n_bar - 0.5 * s, 1.0 + n_bar + 0.5 * s, rates.gamma_minus,
          rates.gamma_plus};
}

SidebandTerms antistokes_terms(const DerivedRates& rates, double n_bar) {
  require_squeezable(rates, "antistokes_terms");
  const double s = rates.s;
  return {0.5 * rates.gamma_eff, n_bar + 0.5 * s, n_bar - 0.5 * s, rates.gamma_minus, rates.gamma_plus};
}

std::vector<double> stokes_spectrum(const DerivedRates& rates, double n_bar,
                                    std::span<const double> offsets) {
  const auto t = stokes_terms(rates, n_bar);
  return kernels::sample(offsets, [&t](double d) { return t.value(d); });
}

std::vector<double> antistokes_spectrum(const DerivedRates& rates, double n_bar,
                                        std::span<const double> offsets) {
  const auto t = antistokes_terms(rates, n_bar);
  auto out = kernels::sample(offsets, [&t](double d) { return t.value(d); });
  require_nonnegative(out, "antistokes_spectrum");
  return out;
}

double quadrature_psd(const DerivedRates& rates, double n_bar, double theta, double offset) {
  const double chi = 2.0 * theta + rates.phi;
  const double c2 = std::pow(std::cos(0.5 * chi), 2);
  const double s2 = std::pow(std::sin(0.5 * chi), 2);
  const double d2 = offset * offset;
  const double wp = 0.25 * rates.gamma_plus * rates.gamma_plus;
  const double wm = 0.25 * rates.gamma_minus * rates.gamma_minus;
  return 0.25 * rates.gamma_eff * (2.0 * n_bar + 1.0) * (c2 / (d2 + wp) + s2 / (d2 + wm));
}

std::vector<double> quadrature_spectrum(const DerivedRates& rates, double n_bar, double theta,
                                        std::span<const double> offsets) {
  require_squeezable(rates, "quadrature_spectrum");
  return kernels::sample(offsets,
                         [&](double d) { return quadrature_psd(rates, n_bar, theta, d); });
}

double zero_point_variance(double n_bar) { return 0.25 * (2.0 * n_bar + 1.0); }
double squeezed_variance(double n_bar, double s) { return zero_point_variance(n_bar) / (1.0 + s); }
double antisqueezed_variance(double n_bar, double s) { return zero_point_variance(n_bar) / (1.0 - s); }

QuadratureSpec quadrature_variance(const DerivedRates& rates, double n_bar, double theta) {
  require_squeezable(rates, "quadrature_variance");
  const double chi = 2.0 * theta + rates.phi;
  const double c2 = std::pow(std::cos(0.5 * chi), 2);
  const double s2 = std::pow(std::sin(0.5 * chi), 2);
  return {theta, zero_point_variance(n_bar) * (c2 / (1.0 + rates.s) + s2 / (1.0 - rates.s))};
}

Ratios sideband_ratios(double n_bar, double s) {
  if (!(n_bar >= 0.0) || !(std::abs(s) < 1.0))
    throw PreconditionError("sideband_ratios: need n_bar >= 0 and |s| < 1");
  Ratios r;
  r.r0 = n_bar > 0.0 ? (n_bar + 1.0) / n_bar : std::numeric_limits<double>::infinity();
  r.r_plus = (n_bar + 1.0 + 0.5 * s) / (n_bar - 0.5 * s);
  r.r_minus = (n_bar + 1.0 - 0.5 * s) / (n_bar + 0.5 * s);
  return r;
}

SqueezingCriterion squeezing_criterion(double n_bar, double s) {
  if (!(n_bar >= 0.0) || !(s >= 0.0 && s < 1.0))
    throw PreconditionError("squeezing_criterion: need n_bar >= 0 and 0 <= s < 1");
  return {s > 2.0 * n_bar, s - 2.0 * n_bar};
}

SpectrumModel heterodyne_model(const DerivedRates& rates, double n_bar, double delta_lo,
                               double calibration, double floor) {
  if (!(delta_lo > 0.0) || !(delta_lo < rates.omega_m))
    throw PreconditionError("heterodyne: need 0 < Delta_LO < Omega_m");
  if (!(calibration >= 0.0) || !(floor >= 0.0))
    throw PreconditionError("heterodyne: calibration and floor must be >= 0");
  SpectrumModel m;
  m.floor = floor;
  m.calibration = calibration;
  for (const auto& c : stokes_terms(rates, n_bar).components(rates.omega_m + delta_lo))
    m.components.push_back(c);
  for (const auto& c : antistokes_terms(rates, n_bar).components(rates.omega_m - delta_lo))
    m.components.push_back(c);
  return m;
}

CompositeSpectrum heterodyne_composite(const DerivedRates& rates, double n_bar, double delta_lo,
                                       double calibration, double floor,
                                       std::span<const double> freq_hz) {
  auto model = heterodyne_model(rates, n_bar, delta_lo, calibration, floor);
  if (freq_hz.empty()) throw PreconditionError("heterodyne_composite: empty grid");
  const auto [lo, hi] = std::minmax_element(freq_hz.begin(), freq_hz.end());
  const double f_as = rad_to_hz(rates.omega_m - delta_lo);
  const double f_st = rad_to_hz(rates.omega_m + delta_lo);
  if (*lo > f_as || *hi < f_st)
    throw PreconditionError(fmt::format(
        "heterodyne_composite: grid [{:.6f}, {:.6f}] Hz does not contain both sidebands "
        "({:.6f} and {:.6f} Hz)",
        *lo, *hi, f_as, f_st));
  auto psd = model.sample_hz(freq_hz);
  return {std::move(model), std::move(psd)};
}

}  // namespace omsqz
