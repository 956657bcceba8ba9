#pragma once

// Independent numerical routes to the spectra: covariance propagation through
// the 2x2 rotating-frame system, and a stochastic envelope simulator.

#include <array>
#include <complex>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "omsqz/core.hpp"
#include "omsqz/spectrum_data.hpp"

namespace omsqz {

/// White input-noise correlators of the reduced mechanical equation:
/// <n(t) n^dag(t')> = c_bbdag delta(t - t'), <n^dag n> = c_bdagb, <n n> = c_anom.
struct NoiseCorrelators {
  double c_bbdag = 0.0;
  double c_bdagb = 0.0;
  cplx c_anom{};

  /// Gamma_m(n_th + 1) + A- and Gamma_m n_th + A+, plus Gamma_eff n_extra on
  /// both; c_anom from the rates.
  static NoiseCorrelators from_rates(const DerivedRates& rates);
  /// Bath of rate Gamma_eff at occupancy n_bar, no anomalous term.
  static NoiseCorrelators thermal_equivalent(double gamma_eff, double n_bar);
};

/// Inverse of the rotating-frame system matrix at one offset, obtained by a
/// numerical 2x2 solve.
struct TransferMatrix {
  std::array<std::array<cplx, 2>, 2> entries{};
  cplx determinant{};

  static TransferMatrix at(const DerivedRates& rates, double offset);
};

struct PropagatedSpectra {
  std::vector<double> stokes;
  std::vector<double> antistokes;
  std::vector<std::vector<double>> quadratures;  // symmetrized, one per requested theta
  double max_condition = 0.0;
  std::vector<std::string> warnings;
};

PropagatedSpectra propagate_spectra(const DerivedRates& rates, const NoiseCorrelators& noise,
                                    std::span<const double> offsets,
                                    std::span<const double> thetas = {});

struct EnvelopeTrace {
  std::vector<cplx> samples;
  double dt = 0.0;
  std::uint64_t seed = 0;
};

/// Euler-Maruyama integration of
///   d beta = [-(Gamma_eff/2) beta - (Gamma_par/2) e^{i phi} beta*] dt + noise
/// with complex noise of intensity Gamma_eff (2 n_bar + 1) / 2, so that
/// Re(e^{i theta} beta) has the symmetrized spectrum of X_theta. Starts from
/// the stationary distribution of the uncoupled quadratures.
EnvelopeTrace sde_simulate(const DerivedRates& rates, double n_bar, double duration, double dt,
                           std::uint64_t seed);

enum class Window { Rectangular, Hann };

/// Averaged periodogram. Real input gives a one-sided PSD on [0, fs/2];
/// complex input a two-sided PSD on [-fs/2, fs/2). Densities are per Hz.
SpectrumData welch_psd(std::span<const double> x, double fs, std::size_t segment_length,
                       double overlap_fraction = 0.5, Window window = Window::Hann);
SpectrumData welch_psd(std::span<const cplx> x, double fs, std::size_t segment_length,
                       double overlap_fraction = 0.5, Window window = Window::Hann);

/// Text header line "omsqz-trace v1 dt=<s> seed=<n> length=<n>" followed by
/// little-endian interleaved (re, im) float64.
void write_trace(std::ostream& os, const EnvelopeTrace& trace);
EnvelopeTrace read_trace(std::istream& is);
void save_trace(const std::string& path, const EnvelopeTrace& trace);
EnvelopeTrace load_trace(const std::string& path);

}  // namespace omsqz
