#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "omsqz/core.hpp"
#include "omsqz/lineshape.hpp"
#include "omsqz/spectrum_data.hpp"

namespace omsqz {

/// Each bin is model * G / n_avg with G ~ Gamma(n_avg, 1), drawn in grid order
/// from one stream seeded by `seed`.
SpectrumData synth_periodogram(const SpectrumModel& model, std::span<const double> freq_hz, int n_avg,
                               std::uint64_t seed);

/// Same law applied to an already sampled model. Bins flagged in `mask` keep
/// the model value, consume no draws and stay masked in the result.
SpectrumData synth_periodogram(std::span<const double> freq_hz, std::span<const double> model_psd, int n_avg,
                               std::uint64_t seed, std::span<const std::uint8_t> mask = {});

/// Complex baseband of the heterodyne photocurrent around Omega_m: the Stokes
/// sideband sits at +Delta_LO, the anti-Stokes sideband at -Delta_LO.
struct HeterodyneSeries {
  std::vector<cplx> samples;
  double fs = 0.0;         // Hz
  double carrier_hz = 0.0; // Omega_m / 2pi, added back to baseband frequencies
  std::uint64_t seed = 0;
};

/// Emulates the heterodyne signal. A classical envelope driven by noise of
/// intensity Gamma_eff n_bar supplies the symmetric part of both sidebands; an
/// independent copy of the 2x2 system driven only in its first component by
/// noise Gamma_eff supplies the ordering terms (the "+1" of the Stokes side and
/// the p^2 |T|^2 term of the anti-Stokes side). `floor` is a white two-sided PSD
/// per Hz. Requires fs > 4 Delta_LO.
HeterodyneSeries synth_timeseries(const DerivedRates& rates, double n_bar, double delta_lo, double fs,
                                  double duration, std::uint64_t seed, double floor = 0.0);

/// Lock-in output sqrt(1/2) Re[e^{i theta} z(t) e^{-i 2pi (f_demod - carrier) t}],
/// brick-wall low-passed at `lowpass_cutoff` (Hz). Requires
/// 0 < lowpass_cutoff < f_demod and lowpass_cutoff <= fs / 2.
std::vector<double> lockin_demodulate(const HeterodyneSeries& series, double f_demod, double theta,
                                      double lowpass_cutoff);

/// Non-overlapping rectangular periodograms, averaged. Complex input gives a
/// two-sided spectrum shifted by `carrier_hz`; real input a one-sided spectrum.
SpectrumData segment_average(std::span<const cplx> x, double fs, double segment_seconds,
                             double resolution_hz, double carrier_hz = 0.0);
SpectrumData segment_average(std::span<const double> x, double fs, double segment_seconds,
                             double resolution_hz);

/// How synthetic heterodyne spectra are laid out.
struct Acquisition {
  double delta_lo = 0.0;         // rad/s
  double resolution_hz = 0.2;
  double half_window_hz = 0.0;   // grid spans Omega_m -/+ (Delta_LO + half_window)
  double calibration = 1.0;
  double floor = 0.0;
  int n_avg = 10;

  std::vector<double> grid_hz(double omega_m) const;
};

struct OnOffPair {
  SpectrumData drive_on;
  SpectrumData drive_off;
  SystemParams shared_params;
  DerivedRates rates_on;
  DerivedRates rates_off;
  double gamma_eff_off = 0.0;
};

/// The off member keeps every cooling contribution of both tones and has the
/// parametric drive removed (Gamma_par = 0, no anomalous term).
DerivedRates drive_off_rates(const DerivedRates& on);

OnOffPair make_onoff_pair(const SystemParams& params, const PumpConfig& pump,
                          const std::optional<PumpConfig>& pump_off_variant, const Acquisition& acq,
                          std::uint64_t seed);

/// Same as make_onoff_pair for rates given directly.
OnOffPair make_onoff_pair(const DerivedRates& on, const DerivedRates& off, const Acquisition& acq,
                          std::uint64_t seed);

}  // namespace omsqz
