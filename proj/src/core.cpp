#include "omsqz/core.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include <fmt/format.h>

#include "omsqz/errors.hpp"
#include "omsqz/units.hpp"

namespace omsqz {

namespace {

constexpr int kMaxFixedPointIterations = 50;
constexpr double kFixedPointTolerance = 1e-6;  // in units of Gamma_m
constexpr double kRateIdentityTolerance = 1e-10;

double lorentz_denominator(double detuning, double kappa) {
  return detuning * detuning + 0.25 * kappa * kappa;
}

// Bracket shared by the optical damping (real part) and the optical spring
// (imaginary part), evaluated at Omega = Omega_m.
cplx dynamical_bracket(const SystemParams& p, const IntracavityField& f, double omega_m) {
  const cplx i{0.0, 1.0};
  const double half_k = 0.5 * p.kappa;
  const double pm = std::norm(f.alpha_minus);
  const double pp = std::norm(f.alpha_plus);
  const cplx lower = 1.0 / (-i * p.delta + half_k) - 1.0 / (i * (p.delta - 2.0 * omega_m) + half_k);
  const cplx upper = 1.0 / (-i * (p.delta + 2.0 * omega_m) + half_k) - 1.0 / (i * p.delta + half_k);
  return pm * lower + pp * upper;
}

}  // namespace

void SystemParams::validate() const {
  auto fail = [](const std::string& what) { throw PreconditionError("invalid system parameters: " + what); };
  if (!(kappa > 0.0)) fail("kappa must be > 0");
  if (!(kappa_in > 0.0)) fail("kappa_in must be > 0");
  if (kappa_in > kappa) fail("kappa_in must not exceed kappa");
  if (!(omega_m0 > 0.0)) fail("omega_m0 must be > 0");
  if (!(gamma_m > 0.0)) fail("gamma_m must be > 0");
  if (!(n_th >= 0.0)) fail("n_th must be >= 0");
  if (!(n_extra >= 0.0)) fail("n_extra must be >= 0");
  if (!(g0 >= 0.0)) fail("g0 must be >= 0");
  if (!std::isfinite(delta)) fail("delta must be finite");
}

IntracavityField IntracavityField::from_coupling(double g0, double g, double epsilon_c,
                                                 double phase_minus, double phase_plus) {
  if (!(g0 > 0.0) || g < 0.0 || epsilon_c < 0.0 || epsilon_c > 1.0)
    throw PreconditionError("from_coupling: need g0 > 0, g >= 0, 0 <= epsilon_c <= 1");
  const double photons = (g / g0) * (g / g0);
  IntracavityField f;
  f.alpha_minus = std::polar(std::sqrt(photons * epsilon_c), phase_minus);
  f.alpha_plus = std::polar(std::sqrt(photons * (1.0 - epsilon_c)), phase_plus);
  f.g = g;
  f.epsilon_c = epsilon_c;
  return f;
}

IntracavityField intracavity_amplitudes(const SystemParams& params, const PumpConfig& pump,
                                        double omega_m) {
  if (!(omega_m > 0.0)) throw PreconditionError("intracavity_amplitudes: omega_m must be > 0");
  if (pump.is_zero())
    throw ZeroPumpError("both pump tones are zero; the intracavity power ratio is undefined");
  const cplx i{0.0, 1.0};
  const double root_kin = std::sqrt(params.kappa_in);
  IntracavityField f;
  f.alpha_minus = pump.alpha_in_minus * root_kin / (-i * (params.delta - omega_m) + 0.5 * params.kappa);
  f.alpha_plus = pump.alpha_in_plus * root_kin / (-i * (params.delta + omega_m) + 0.5 * params.kappa);
  const double pm = std::norm(f.alpha_minus);
  const double pp = std::norm(f.alpha_plus);
  f.g = params.g0 * std::sqrt(pm + pp);
  f.epsilon_c = pm / (pm + pp);
  return f;
}

double optical_damping(const SystemParams& params, const IntracavityField& field, double omega_m) {
  const double g2k = field.g * field.g * params.kappa;
  const double eps = field.epsilon_c;
  const double d0 = lorentz_denominator(params.delta, params.kappa);
  const double dm = lorentz_denominator(params.delta - 2.0 * omega_m, params.kappa);
  const double dp = lorentz_denominator(params.delta + 2.0 * omega_m, params.kappa);
  return g2k * (eps / d0 - eps / dm + (1.0 - eps) / dp - (1.0 - eps) / d0);
}

double optical_spring_shift(const SystemParams& params, const IntracavityField& field,
                            double omega_m) {
  return params.g0 * params.g0 * dynamical_bracket(params, field, omega_m).imag();
}

FixedPoint self_consistent_frequency(const SystemParams& params, const PumpConfig& pump) {
  params.validate();
  const double tol = kFixedPointTolerance * params.gamma_m;
  double omega = params.omega_m0;
  for (int it = 1; it <= kMaxFixedPointIterations; ++it) {
    const auto field = intracavity_amplitudes(params, pump, omega);
    const double next = params.omega_m0 + optical_spring_shift(params, field, omega);
    if (!(next > 0.0)) break;
    const double step = std::abs(next - omega);
    omega = next;
    if (step < tol) {
      const auto f = intracavity_amplitudes(params, pump, omega);
      const double residual =
          std::abs(omega - params.omega_m0 - optical_spring_shift(params, f, omega));
      return {omega, it, residual};
    }
  }
  throw ConvergenceError(fmt::format(
      "self-consistent mechanical frequency did not converge in {} iterations "
      "(strong-coupling regime is outside the model)",
      kMaxFixedPointIterations));
}

ParametricDrive parametric_rate(const SystemParams& params, const IntracavityField& field,
                                double /*omega_m*/) {
  const double eps = field.epsilon_c;
  const double d0 = lorentz_denominator(params.delta, params.kappa);
  ParametricDrive out;
  out.gamma_par = 4.0 * field.g * field.g * std::sqrt(eps * (1.0 - eps)) * params.delta / d0;
  out.phi = 0.5 * std::numbers::pi + std::arg(std::conj(field.alpha_minus) * field.alpha_plus);
  return out;
}

ScatteringRates scattering_rates(const SystemParams& params, const IntracavityField& field,
                                 double omega_m) {
  const double g02k = params.g0 * params.g0 * params.kappa;
  const double pm = std::norm(field.alpha_minus);
  const double pp = std::norm(field.alpha_plus);
  const double d0 = lorentz_denominator(params.delta, params.kappa);
  const double dm = lorentz_denominator(params.delta - 2.0 * omega_m, params.kappa);
  const double dp = lorentz_denominator(params.delta + 2.0 * omega_m, params.kappa);
  ScatteringRates r;
  r.a_minus = g02k * (pm / d0 + pp / dp);
  r.a_plus = g02k * (pm / dm + pp / d0);

  const double gamma_opt = optical_damping(params, field, omega_m);
  const double scale = std::max(r.a_minus, r.a_plus);
  if (std::abs(gamma_opt - (r.a_minus - r.a_plus)) > kRateIdentityTolerance * scale)
    throw InternalConsistencyError(fmt::format(
        "Gamma_opt = {:.17g} differs from A- - A+ = {:.17g}", gamma_opt, r.a_minus - r.a_plus));
  return r;
}

Occupancy occupancy(const SystemParams& params, double gamma_eff, double gamma_opt, double a_plus) {
  if (!(gamma_eff > 0.0))
    throw InstabilityError(InstabilityError::Kind::AntiDamping,
                           fmt::format("Gamma_eff = {:.6g} rad/s <= 0: anti-damping instability", gamma_eff));
  Occupancy o;
  o.n_bar = (params.gamma_m * params.n_th + a_plus) / gamma_eff + params.n_extra;
  if (gamma_opt != 0.0) o.n_ba = a_plus / gamma_opt;
  return o;
}

double thermal_occupation(double temperature_k, double omega) {
  if (!(temperature_k > 0.0) || !(omega > 0.0))
    throw PreconditionError("thermal_occupation: temperature and frequency must be > 0");
  const double x = kHbar * omega / (kBoltzmann * temperature_k);
  return 1.0 / std::expm1(x);
}

cplx anomalous_correlator(const SystemParams& params, const IntracavityField& field) {
  return -params.g0 * params.g0 * params.kappa * std::conj(field.alpha_minus) * field.alpha_plus /
         lorentz_denominator(params.delta, params.kappa);
}

DerivedRates derive_unchecked(const SystemParams& params, const IntracavityField& field,
                              double omega_m) {
  DerivedRates r;
  r.omega_m = omega_m;
  r.gamma_opt = optical_damping(params, field, omega_m);
  r.gamma_eff = params.gamma_m + r.gamma_opt;
  const auto drive = parametric_rate(params, field, omega_m);
  r.gamma_par = drive.gamma_par;
  r.phi = drive.phi;
  r.s = r.gamma_eff != 0.0 ? r.gamma_par / r.gamma_eff : 0.0;
  r.gamma_plus = r.gamma_eff * (1.0 + r.s);
  r.gamma_minus = r.gamma_eff * (1.0 - r.s);
  const auto sc = scattering_rates(params, field, omega_m);
  r.a_minus = sc.a_minus;
  r.a_plus = sc.a_plus;
  if (r.gamma_opt != 0.0) r.n_ba = r.a_plus / r.gamma_opt;
  r.n_bar = r.gamma_eff > 0.0 ? (params.gamma_m * params.n_th + r.a_plus) / r.gamma_eff + params.n_extra
                              : std::numeric_limits<double>::infinity();
  r.anomalous = anomalous_correlator(params, field);
  r.gamma_m = params.gamma_m;
  r.n_th = params.n_th;
  r.n_extra = params.n_extra;
  return r;
}

void check_stability(const DerivedRates& rates) {
  if (!(rates.gamma_eff > 0.0))
    throw InstabilityError(InstabilityError::Kind::AntiDamping,
                           fmt::format("anti-damping instability: Gamma_eff/2pi = {:.6g} Hz <= 0",
                                       rad_to_hz(rates.gamma_eff)));
  if (!(std::abs(rates.s) < 1.0))
    throw InstabilityError(InstabilityError::Kind::Parametric,
                           fmt::format("parametric instability: |s| = {:.6g} >= 1", std::abs(rates.s)));
}

DerivedRates derive_from_field(const SystemParams& params, const IntracavityField& field,
                               double omega_m) {
  params.validate();
  auto r = derive_unchecked(params, field, omega_m);
  check_stability(r);
  return r;
}

DerivedRates derive_all(const SystemParams& params, const PumpConfig& pump) {
  const auto fp = self_consistent_frequency(params, pump);
  const auto field = intracavity_amplitudes(params, pump, fp.omega_m);
  return derive_from_field(params, field, fp.omega_m);
}

DerivedRates phenomenological_rates(double omega_m, double gamma_eff, double s, double n_bar,
                                    double phi) {
  if (!(omega_m > 0.0) || !(n_bar >= 0.0))
    throw PreconditionError("phenomenological_rates: need omega_m > 0 and n_bar >= 0");
  DerivedRates r;
  r.omega_m = omega_m;
  r.gamma_eff = gamma_eff;
  r.s = s;
  r.gamma_par = s * gamma_eff;
  r.phi = phi;
  r.gamma_plus = gamma_eff * (1.0 + s);
  r.gamma_minus = gamma_eff * (1.0 - s);
  r.n_bar = n_bar;
  // A thermal bath at n_bar with rate Gamma_eff reproduces the same correlators.
  r.gamma_m = gamma_eff;
  r.n_th = n_bar;
  check_stability(r);
  return r;
}

}  // namespace omsqz
