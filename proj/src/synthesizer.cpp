#include "omsqz/synthesizer.hpp"

#include <cmath>
#include <random>

#include <fmt/format.h>
#include <json.hpp>

#include "omsqz/errors.hpp"
#include "omsqz/fft.hpp"
#include "omsqz/oracle.hpp"
#include "omsqz/rng.hpp"
#include "omsqz/units.hpp"

namespace omsqz {

SpectrumData synth_periodogram(const SpectrumModel& model, std::span<const double> freq_hz, int n_avg,
                               std::uint64_t seed) {
  if (freq_hz.size() < 2) throw PreconditionError("synth_periodogram: need at least two bins");
  const auto psd = model.sample_hz(freq_hz);
  return synth_periodogram(freq_hz, psd, n_avg, seed);
}

SpectrumData synth_periodogram(std::span<const double> freq_hz, std::span<const double> model_psd, int n_avg,
                               std::uint64_t seed, std::span<const std::uint8_t> mask) {
  if (n_avg < 1) throw PreconditionError("synth_periodogram: n_avg must be >= 1");
  if (freq_hz.size() < 2 || model_psd.size() != freq_hz.size())
    throw PreconditionError("synth_periodogram: need matching grid and model with at least two bins");
  if (!mask.empty() && mask.size() != freq_hz.size())
    throw PreconditionError("synth_periodogram: mask size differs from the grid");
  SpectrumData d;
  d.freq_hz.assign(freq_hz.begin(), freq_hz.end());
  d.resolution_hz = freq_hz[1] - freq_hz[0];
  d.n_avg = n_avg;
  d.psd.assign(model_psd.begin(), model_psd.end());
  auto eng = make_engine(seed);
  std::gamma_distribution<double> gamma(static_cast<double>(n_avg), 1.0);
  const double inv = 1.0 / n_avg;
  if (mask.empty()) {
    for (auto& v : d.psd) v *= gamma(eng) * inv;
  } else {
    d.mask.assign(mask.begin(), mask.end());
    for (std::size_t i = 0; i < d.psd.size(); ++i)
      if (!mask[i]) d.psd[i] *= gamma(eng) * inv;
  }
  d.metadata["seed"] = std::to_string(seed);
  return d;
}

HeterodyneSeries synth_timeseries(const DerivedRates& rates, double n_bar, double delta_lo, double fs,
                                  double duration, std::uint64_t seed, double floor) {
  if (!rates.stable()) throw InstabilityError(InstabilityError::Kind::Parametric,
                                              "synth_timeseries: unstable parameters rejected");
  if (!(delta_lo > 0.0)) throw PreconditionError("synth_timeseries: Delta_LO must be > 0");
  if (!(fs > 4.0 * rad_to_hz(delta_lo)))
    throw PreconditionError(fmt::format("synth_timeseries: fs = {:.6g} Hz must exceed 4 Delta_LO = {:.6g} Hz",
                                        fs, 4.0 * rad_to_hz(delta_lo)));
  if (!(duration > 0.0) || !(floor >= 0.0) || !(n_bar >= 0.0))
    throw PreconditionError("synth_timeseries: need duration > 0, floor >= 0, n_bar >= 0");
  const double dt = 1.0 / fs;
  const double fastest = std::max(rates.gamma_plus, rates.gamma_minus);
  const double slowest = std::min(rates.gamma_plus, rates.gamma_minus);
  if (!(dt * fastest < 0.1)) throw PreconditionError("synth_timeseries: need Gamma_max / fs < 0.1");

  const cplx i{0.0, 1.0};
  const double half_ge = 0.5 * rates.gamma_eff;
  const cplx c = 0.5 * rates.gamma_par * std::exp(i * rates.phi);
  const double sd_thermal = std::sqrt(0.5 * rates.gamma_eff * n_bar * dt);
  const double sd_vacuum = std::sqrt(0.5 * rates.gamma_eff * dt);
  const double sd_floor = std::sqrt(0.5 * floor * fs);

  auto eng = make_engine(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  cplx beta{}, u{}, v{};
  auto step = [&] {
    const cplx xi_t{normal(eng), normal(eng)};
    const cplx xi_v{normal(eng), normal(eng)};
    const cplx nb = beta + (-half_ge * beta - c * std::conj(beta)) * dt + sd_thermal * xi_t;
    const cplx nu = u + (-half_ge * u - c * v) * dt + sd_vacuum * xi_v;
    const cplx nv = v + (-std::conj(c) * u - half_ge * v) * dt;
    beta = nb;
    u = nu;
    v = nv;
  };
  // Burn-in from rest over 30 of the slowest correlation times.
  const auto burn = static_cast<std::size_t>(std::ceil(30.0 / (slowest * dt)));
  for (std::size_t k = 0; k < burn; ++k) step();

  const auto n = static_cast<std::size_t>(std::llround(duration * fs));
  HeterodyneSeries out;
  out.fs = fs;
  out.carrier_hz = rad_to_hz(rates.omega_m);
  out.seed = seed;
  out.samples.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    step();
    const cplx rot = std::polar(1.0, std::fmod(delta_lo * static_cast<double>(k) * dt, kTwoPi));
    const cplx w{sd_floor * normal(eng), sd_floor * normal(eng)};
    out.samples[k] = (beta + u) * rot + (beta + std::conj(v)) * std::conj(rot) + w;
  }
  return out;
}

namespace {

std::vector<cplx> inverse_fft(std::span<const cplx> x) {
  std::vector<cplx> conj_in(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) conj_in[k] = std::conj(x[k]);
  auto y = fft(conj_in);
  const double inv = 1.0 / static_cast<double>(x.size());
  for (auto& v : y) v = std::conj(v) * inv;
  return y;
}

}  // namespace

std::vector<double> lockin_demodulate(const HeterodyneSeries& series, double f_demod, double theta,
                                      double lowpass_cutoff) {
  if (!(lowpass_cutoff > 0.0) || !(lowpass_cutoff < f_demod))
    throw PreconditionError("lockin_demodulate: need 0 < lowpass_cutoff < f_demod");
  if (lowpass_cutoff > 0.5 * series.fs)
    throw PreconditionError("lockin_demodulate: lowpass_cutoff above the Nyquist frequency of the series");
  const std::size_t n = series.samples.size();
  const double shift = kTwoPi * (f_demod - series.carrier_hz);
  const cplx phase = std::polar(1.0, theta);
  std::vector<cplx> mixed(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double t = static_cast<double>(k) / series.fs;
    const cplx lo = std::polar(1.0, -std::fmod(shift * t, kTwoPi));
    mixed[k] = {std::sqrt(0.5) * (phase * series.samples[k] * lo).real(), 0.0};
  }
  auto spec = fft(mixed);
  const double df = series.fs / static_cast<double>(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double f = (k <= n / 2 ? static_cast<double>(k) : static_cast<double>(k) - static_cast<double>(n)) * df;
    if (std::abs(f) > lowpass_cutoff) spec[k] = {};
  }
  const auto back = inverse_fft(spec);
  std::vector<double> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = back[k].real();
  return out;
}

namespace {

std::size_t segment_length(double fs, double segment_seconds, double resolution_hz) {
  if (!(fs > 0.0) || !(segment_seconds > 0.0)) throw PreconditionError("segment_average: need fs, segment > 0");
  const double exact = segment_seconds * fs;
  const auto len = static_cast<std::size_t>(std::llround(exact));
  if (len < 2 || std::abs(exact - static_cast<double>(len)) > 1e-9 * exact)
    throw PreconditionError("segment_average: segment duration is not a whole number of samples");
  if (std::abs(resolution_hz * segment_seconds - 1.0) > 1e-9)
    throw PreconditionError(fmt::format("segment_average: resolution {:.6g} Hz incompatible with {:.6g} s segments",
                                        resolution_hz, segment_seconds));
  return len;
}

}  // namespace

SpectrumData segment_average(std::span<const cplx> x, double fs, double segment_seconds, double resolution_hz,
                             double carrier_hz) {
  const auto len = segment_length(fs, segment_seconds, resolution_hz);
  auto d = welch_psd(x, fs, len, 0.0, Window::Rectangular);
  for (auto& f : d.freq_hz) f += carrier_hz;
  return d;
}

SpectrumData segment_average(std::span<const double> x, double fs, double segment_seconds, double resolution_hz) {
  const auto len = segment_length(fs, segment_seconds, resolution_hz);
  return welch_psd(x, fs, len, 0.0, Window::Rectangular);
}

std::vector<double> Acquisition::grid_hz(double omega_m) const {
  if (!(resolution_hz > 0.0) || !(delta_lo > 0.0) || !(half_window_hz >= 0.0))
    throw PreconditionError("acquisition: need resolution > 0, Delta_LO > 0, half window >= 0");
  const double fm = rad_to_hz(omega_m);
  const double reach = rad_to_hz(delta_lo) + half_window_hz;
  const auto half_bins = static_cast<long>(std::ceil(reach / resolution_hz));
  std::vector<double> g(2 * half_bins + 1);
  for (long k = -half_bins; k <= half_bins; ++k) g[k + half_bins] = fm + static_cast<double>(k) * resolution_hz;
  return g;
}

DerivedRates drive_off_rates(const DerivedRates& on) {
  DerivedRates off = on;
  off.gamma_par = 0.0;
  off.s = 0.0;
  off.gamma_plus = off.gamma_eff;
  off.gamma_minus = off.gamma_eff;
  off.anomalous = {};
  return off;
}

namespace {

std::string truth_json(const DerivedRates& r, std::uint64_t seed) {
  nlohmann::ordered_json j;
  j["omega_m_hz"] = rad_to_hz(r.omega_m);
  j["gamma_eff_hz"] = rad_to_hz(r.gamma_eff);
  j["s"] = r.s;
  j["phi"] = r.phi;
  j["n_bar"] = r.n_bar;
  j["seed"] = seed;
  return j.dump();
}

}  // namespace

OnOffPair make_onoff_pair(const DerivedRates& on, const DerivedRates& off, const Acquisition& acq,
                          std::uint64_t seed) {
  const auto grid = acq.grid_hz(on.omega_m);
  const auto model_on = heterodyne_model(on, on.n_bar, acq.delta_lo, acq.calibration, acq.floor);
  const auto model_off = heterodyne_model(off, off.n_bar, acq.delta_lo, acq.calibration, acq.floor);
  OnOffPair pair;
  pair.drive_on = synth_periodogram(model_on, grid, acq.n_avg, task_seed(seed, 0));
  pair.drive_off = synth_periodogram(model_off, grid, acq.n_avg, task_seed(seed, 1));
  pair.drive_on.metadata["truth"] = truth_json(on, seed);
  pair.drive_off.metadata["truth"] = truth_json(off, seed);
  pair.rates_on = on;
  pair.rates_off = off;
  pair.gamma_eff_off = off.gamma_eff;
  return pair;
}

OnOffPair make_onoff_pair(const SystemParams& params, const PumpConfig& pump,
                          const std::optional<PumpConfig>& pump_off_variant, const Acquisition& acq,
                          std::uint64_t seed) {
  const auto on = derive_all(params, pump);
  DerivedRates off_base = on;
  if (pump_off_variant) {
    const auto fp = self_consistent_frequency(params, *pump_off_variant);
    off_base = derive_unchecked(params, intracavity_amplitudes(params, *pump_off_variant, fp.omega_m), fp.omega_m);
  }
  auto off = drive_off_rates(off_base);
  check_stability(off);
  auto pair = make_onoff_pair(on, off, acq, seed);
  pair.shared_params = params;
  return pair;
}

}  // namespace omsqz
