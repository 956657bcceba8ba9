#pragma once

#include <span>
#include <vector>

#include "omsqz/core.hpp"

namespace omsqz {

/// value(w) = area * width / ((w - center)^2 + width^2 / 4).
/// With angular frequencies, `area` is the integral over dw/2pi, i.e. over Hz.
struct Lorentzian {
  double center = 0.0;  // rad/s
  double width = 0.0;   // rad/s, full width at half maximum
  double area = 0.0;    // may be negative

  double value(double omega) const {
    const double d = omega - center;
    return area * width / (d * d + 0.25 * width * width);
  }
};

struct SpectrumModel {
  std::vector<Lorentzian> components;
  double floor = 0.0;
  double calibration = 1.0;

  double value(double omega) const;
  /// Samples on an angular-frequency grid. Throws InternalConsistencyError if
  /// any sample is negative.
  std::vector<double> sample(std::span<const double> omega) const;
  std::vector<double> sample_serial(std::span<const double> omega) const;
  std::vector<double> sample_hz(std::span<const double> freq_hz) const;
};

/// One motional sideband as written in the two-Lorentzian form
///   S(d) = (Gamma_eff/2) [w_n / (d^2 + G-^2/4) + w_b / (d^2 + G+^2/4)].
/// "narrow" is the Gamma_eff(1 - s) term, "broad" the Gamma_eff(1 + s) term,
/// so for negative s the labels describe the Gamma- / Gamma+ terms literally.
struct SidebandTerms {
  double prefactor = 0.0;  // Gamma_eff / 2
  double weight_narrow = 0.0;
  double weight_broad = 0.0;
  double width_narrow = 0.0;  // Gamma-
  double width_broad = 0.0;   // Gamma+

  double area_narrow() const { return prefactor * weight_narrow / width_narrow; }
  double area_broad() const { return prefactor * weight_broad / width_broad; }
  double area() const { return area_narrow() + area_broad(); }
  double value(double d) const {
    return prefactor * (weight_narrow / (d * d + 0.25 * width_narrow * width_narrow) +
                        weight_broad / (d * d + 0.25 * width_broad * width_broad));
  }
  /// The two terms as Lorentzians centered at `center`.
  std::vector<Lorentzian> components(double center) const;
};

SidebandTerms stokes_terms(const DerivedRates& rates, double n_bar);
SidebandTerms antistokes_terms(const DerivedRates& rates, double n_bar);

std::vector<double> stokes_spectrum(const DerivedRates& rates, double n_bar,
                                    std::span<const double> offsets);
/// Throws InternalConsistencyError if the total is negative anywhere.
std::vector<double> antistokes_spectrum(const DerivedRates& rates, double n_bar,
                                        std::span<const double> offsets);

/// Spectrum of X_theta = (e^{i theta} b_R + e^{-i theta} b_R^dag)/2 from the
/// squared transfer functions (no anomalous noise). At theta = -phi/2 it is
/// S_YY (width Gamma+), at theta = -phi/2 + pi/2 it is S_XX (width Gamma-).
double quadrature_psd(const DerivedRates& rates, double n_bar, double theta, double offset);
std::vector<double> quadrature_spectrum(const DerivedRates& rates, double n_bar, double theta,
                                        std::span<const double> offsets);

struct QuadratureSpec {
  double theta = 0.0;
  double variance = 0.0;  // <X_theta^2>
};

/// sigma0^2 [cos^2(chi/2)/(1+s) + sin^2(chi/2)/(1-s)] with chi = 2 theta + phi.
QuadratureSpec quadrature_variance(const DerivedRates& rates, double n_bar, double theta);
double zero_point_variance(double n_bar);  // (2 n_bar + 1) / 4
double squeezed_variance(double n_bar, double s);      // sigma_Y^2
double antisqueezed_variance(double n_bar, double s);  // sigma_X^2

struct Ratios {
  double r0 = 0.0;       // +inf at n_bar = 0
  double r_plus = 0.0;   // broad components, may be negative
  double r_minus = 0.0;  // narrow components
};

Ratios sideband_ratios(double n_bar, double s);

struct SqueezingCriterion {
  bool below_zero_point = false;  // s > 2 n_bar, i.e. sigma_Y^2 < 1/4
  double margin = 0.0;            // s - 2 n_bar
};

SqueezingCriterion squeezing_criterion(double n_bar, double s);

struct CompositeSpectrum {
  SpectrumModel model;
  std::vector<double> psd;
};

/// Heterodyne photocurrent spectrum on an absolute frequency grid (Hz):
/// Stokes at Omega_m + Delta_LO, anti-Stokes at Omega_m - Delta_LO.
/// Throws PreconditionError if the grid does not contain both sideband centers.
CompositeSpectrum heterodyne_composite(const DerivedRates& rates, double n_bar, double delta_lo,
                                       double calibration, double floor,
                                       std::span<const double> freq_hz);

SpectrumModel heterodyne_model(const DerivedRates& rates, double n_bar, double delta_lo,
                               double calibration, double floor);

}  // namespace omsqz
