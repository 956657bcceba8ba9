#pragma once

#include <complex>
#include <optional>

namespace omsqz {

using cplx = std::complex<double>;

/// Static physical parameters. All rates are angular (rad/s); conversion from
/// the Hz values of a config file happens once, in the config layer.
struct SystemParams {
  double kappa = 0.0;      // cavity linewidth
  double kappa_in = 0.0;   // input coupling rate
  double g0 = 0.0;         // single-photon coupling
  double omega_m0 = 0.0;   // bare mechanical frequency
  double gamma_m = 0.0;    // intrinsic mechanical damping
  double delta = 0.0;      // mean detuning of the two pump tones (signed)
  double n_th = 0.0;       // thermal occupancy
  double n_extra = 0.0;    // additive occupancy (probe back-action), default 0
  std::optional<double> bath_temperature;  // K, informational once n_th is set

  /// Throws PreconditionError on the first violated invariant.
  void validate() const;
};

/// Input amplitudes of the lower (omega_L - Omega_m) and upper
/// (omega_L + Omega_m) tones, in sqrt(photons/s).
struct PumpConfig {
  cplx alpha_in_minus{};
  cplx alpha_in_plus{};

  bool is_zero() const { return alpha_in_minus == cplx{} && alpha_in_plus == cplx{}; }
  PumpConfig scaled(cplx factor) const { return {alpha_in_minus * factor, alpha_in_plus * factor}; }
};

struct IntracavityField {
  cplx alpha_minus{};
  cplx alpha_plus{};
  double g = 0.0;          // g^2 = g0^2 (|a-|^2 + |a+|^2)
  double epsilon_c = 0.0;  // |a-|^2 / (|a-|^2 + |a+|^2)

  /// Field with prescribed total coupling and power split.
  static IntracavityField from_coupling(double g0, double g, double epsilon_c,
                                        double phase_minus = 0.0, double phase_plus = 0.0);
};

struct DerivedRates {
  double omega_m = 0.0;
  double gamma_opt = 0.0;
  double gamma_eff = 0.0;
  double gamma_par = 0.0;
  double phi = 0.0;
  double s = 0.0;  // signed; spectra only depend on |s|
  double gamma_plus = 0.0;
  double gamma_minus = 0.0;
  double a_minus = 0.0;
  double a_plus = 0.0;
  std::optional<double> n_ba;  // only when gamma_opt != 0
  double n_bar = 0.0;
  cplx anomalous{};  // <b_in b_in> coefficient

  // Bath data carried along so noise correlators can be rebuilt from rates.
  double gamma_m = 0.0;
  double n_th = 0.0;
  double n_extra = 0.0;

  bool stable() const { return gamma_eff > 0.0 && std::abs(s) < 1.0; }
  double s_folded() const { return std::abs(s); }
};

struct FixedPoint {
  double omega_m = 0.0;
  int iterations = 0;
  double residual = 0.0;  // |Omega_m - Omega_m0 - shift(Omega_m)| at the returned value
};

struct ParametricDrive {
  double gamma_par = 0.0;
  double phi = 0.0;
};

struct ScatteringRates {
  double a_minus = 0.0;  // phonon removal
  double a_plus = 0.0;   // phonon addition
};

struct Occupancy {
  double n_bar = 0.0;
  std::optional<double> n_ba;
};

IntracavityField intracavity_amplitudes(const SystemParams& params, const PumpConfig& pump,
                                        double omega_m);

/// Gamma_opt in the quasi-resonant form; Gamma_eff = Gamma_m + Gamma_opt.
double optical_damping(const SystemParams& params, const IntracavityField& field, double omega_m);

/// Optical spring shift Omega_m - Omega_m0 evaluated at Omega = Omega_m.
double optical_spring_shift(const SystemParams& params, const IntracavityField& field,
                            double omega_m);

/// Plain fixed-point iteration, tolerance 1e-6 Gamma_m, at most 50 iterations.
FixedPoint self_consistent_frequency(const SystemParams& params, const PumpConfig& pump);

ParametricDrive parametric_rate(const SystemParams& params, const IntracavityField& field,
                                double omega_m);

/// Stokes/anti-Stokes rates. Throws InternalConsistencyError if
/// A- - A+ departs from Gamma_opt by more than 1e-10 max(A-, A+).
ScatteringRates scattering_rates(const SystemParams& params, const IntracavityField& field,
                                 double omega_m);

Occupancy occupancy(const SystemParams& params, double gamma_eff, double gamma_opt, double a_plus);

/// Bose-Einstein occupancy of a mode at angular frequency `omega`.
double thermal_occupation(double temperature_k, double omega);

cplx anomalous_correlator(const SystemParams& params, const IntracavityField& field);

/// All rates without stability enforcement; sweeps use this and flag.
DerivedRates derive_unchecked(const SystemParams& params, const IntracavityField& field,
                              double omega_m);

/// All rates at a given field and frequency; throws InstabilityError.
DerivedRates derive_from_field(const SystemParams& params, const IntracavityField& field,
                               double omega_m);

/// Full pipeline: self-consistent Omega_m, intracavity field, every rate.
DerivedRates derive_all(const SystemParams& params, const PumpConfig& pump);

/// Throws InstabilityError naming the violated condition.
void check_stability(const DerivedRates& rates);

/// Rates specified directly by the lineshape parameters (no pump physics).
/// Correlators rebuilt from these are the thermal-equivalent ones.
DerivedRates phenomenological_rates(double omega_m, double gamma_eff, double s, double n_bar,
                                    double phi = 0.0);

}  // namespace omsqz
