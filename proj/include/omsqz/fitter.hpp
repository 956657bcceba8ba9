#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "omsqz/lineshape.hpp"
#include "omsqz/spectrum_data.hpp"
#include "omsqz/synthesizer.hpp"

namespace omsqz {

struct FitOptions {
  int max_iterations = 500;
  // Stop when |D^-1/2 g| / sqrt(N) falls below this, with g the gradient of the
  // negative log-likelihood, D the diagonal of the Fisher matrix, N the bin count.
  double gradient_tolerance = 1e-10;
  double ratio_correction = 1.0;      // external multiplicative factor on R0, R+, R-
};

/// Starting values; anything left empty is estimated from the data.
struct FitHint {
  std::optional<double> center_stokes_hz;
  std::optional<double> center_antistokes_hz;
  std::optional<double> gamma_eff_hz;
  std::optional<double> s;
  std::optional<double> floor;
};

struct FitResult {
  std::string model;  // "single_pair", "double_pair" or "single_peak"
  // Parameters in user units: centers and widths in Hz, areas in PSD * Hz.
  std::map<std::string, double> params;
  std::map<std::string, double> sigmas;
  double chi2_reduced = 0.0;
  double deviance = 0.0;  // Gamma negative log-likelihood at the optimum, up to a constant
  std::optional<Ratios> ratios;
  std::optional<double> n_bar_inferred;
  bool converged = false;
  int n_iter = 0;
  double gradient_norm = 0.0;
  bool at_boundary = false;
  std::vector<std::string> warnings;
  int n_bins = 0;

  double get(const std::string& k) const { return params.at(k); }
};

/// floor + two Lorentzians sharing one width, free centers and areas.
/// Stokes is the peak at higher frequency.
FitResult fit_single_pair(const SpectrumData& data, const FitHint& hint = {}, const FitOptions& opt = {});

/// floor + four Lorentzians: widths Gamma_eff (1 -/+ s) with Gamma_eff fixed,
/// a shared s, per-sideband centers, four free areas. s is fitted through
/// 0.999 tanh(xi) and reported folded to [0, 0.999). R+ and R- are the broad
/// and narrow area ratios; R0 weights each area by its width, (1 -/+ s), which
/// makes it (n_bar + 1) / n_bar for any s.
FitResult fit_double_pair(const SpectrumData& data, double gamma_eff_hz_fixed, const FitHint& hint = {},
                          const FitOptions& opt = {});

/// floor + one Lorentzian (lock-in quadrature spectra).
FitResult fit_single_peak(const SpectrumData& data, const FitHint& hint = {}, const FitOptions& opt = {});

/// Model curve(s) of a fit on the given grid: total first, then one entry per component.
std::vector<std::vector<double>> fit_curves(const FitResult& fit, const std::vector<double>& freq_hz);

/// Masks bins inside any [lo, hi] window (Hz).
SpectrumData apply_mask(const SpectrumData& data, const std::vector<std::pair<double, double>>& windows);

std::string to_json(const FitResult& fit);

struct BiasStudyConfig {
  double omega_m = 0.0;    // rad/s
  double gamma_eff = 0.0;  // rad/s
  double n_bar = 5.8;
  double s = 0.0;          // bias_study requires 0
  Acquisition acq;         // bins farther than half_window_hz from both sidebands are masked
  int rebin = 1;           // bins averaged before fitting
  int n_trials = 6000;
  std::uint64_t root_seed = 1;
  FitOptions fit;
};

/// Floor placed `db` below the Stokes peak of the truth spectrum.
double floor_below_stokes_peak(const BiasStudyConfig& cfg, double db);

/// Defaults for the s = 0 study: Omega_m/2pi = 530 kHz, Q = 6.4e6 and a 7 K
/// bath give Gamma_m n_th; Gamma_eff is what brings that to n_bar = 5.8
/// (about 2pi x 3.9 kHz). Delta_LO/2pi = 11 kHz, 0.2 Hz bins, 10 averages,
/// +-20 kHz windows, floor 15 dB below the Stokes peak, 200 bins rebinned.
BiasStudyConfig default_bias_config();

struct SampleMoments {
  double mean = 0.0;
  double std = 0.0;       // n - 1 normalization
  double skewness = 0.0;  // m3 / m2^{3/2}
};
SampleMoments sample_moments(const std::vector<double>& x);

struct BiasStudyReport {
  int n_trials = 0;
  int n_failed = 0;
  bool valid = false;  // false when more than 5% of the trials failed
  double mean_s = 0.0;
  double std_s = 0.0;
  double skewness_s = 0.0;
  std::vector<double> s_values;  // trial order, NaN for failed trials
  std::vector<double> hist_edges;
  std::vector<int> hist_counts;
  double seconds = 0.0;
};

/// Per trial: one synthetic spectrum at the truth, single-pair fit for
/// Gamma_eff, then double-pair fit of the same spectrum with Gamma_eff fixed.
/// Trials run in parallel with seeds task_seed(root_seed, i). Requires s = 0
/// and at least 100 trials.
BiasStudyReport bias_study(const BiasStudyConfig& cfg, bool noiseless = false);

std::string to_json(const BiasStudyReport& report, const BiasStudyConfig& cfg);
std::string histogram_csv(const BiasStudyReport& report);

}  // namespace omsqz
