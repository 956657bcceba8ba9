#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <boost/property_tree/ptree.hpp>

#include "omsqz/core.hpp"
#include "omsqz/fitter.hpp"
#include "omsqz/synthesizer.hpp"

namespace omsqz {

/// INI text with sections. Every lookup error is a ConfigError naming the
/// source, line, section and key.
class ConfigFile {
 public:
  static ConfigFile parse(const std::string& text, const std::string& source = "<string>",
                          const std::string& base_dir = "");
  static ConfigFile load(const std::string& path);

  const std::string& text() const { return text_; }
  const std::string& source() const { return source_; }
  /// Directory relative paths in the file are resolved against.
  const std::string& base_dir() const { return base_dir_; }

  bool has_section(const std::string& section) const;
  bool has(const std::string& section, const std::string& key) const;

  double number(const std::string& section, const std::string& key) const;
  double number(const std::string& section, const std::string& key, double fallback) const;
  std::optional<double> optional_number(const std::string& section, const std::string& key) const;
  long integer(const std::string& section, const std::string& key, long fallback) const;
  bool boolean(const std::string& section, const std::string& key, bool fallback) const;
  std::string string(const std::string& section, const std::string& key, const std::string& fallback) const;
  /// Comma-separated numbers.
  std::vector<double> numbers(const std::string& section, const std::string& key) const;
  /// "a:b, c:d" pairs.
  std::vector<std::pair<double, double>> pairs(const std::string& section, const std::string& key) const;
  /// Path value resolved against base_dir().
  std::string path(const std::string& section, const std::string& key) const;

  /// Throws on any key of `section` outside `known`.
  void allow_keys(const std::string& section, const std::vector<std::string>& known) const;
  /// Throws on any section outside `known`.
  void allow_sections(const std::vector<std::string>& known) const;

  [[noreturn]] void fail(const std::string& section, const std::string& key, const std::string& message) const;

 private:
  std::string raw(const std::string& section, const std::string& key) const;
  int line_of(const std::string& section, const std::string& key) const;

  std::string text_;
  std::string source_;
  std::string base_dir_;
  boost::property_tree::ptree tree_;
  std::map<std::string, int> lines_;  // "section" and "section.key" -> 1-based line
};

/// [cavity] kappa_hz, kappa_in_hz (default kappa/2), g0_hz, detuning_hz;
/// [mechanics] omega_m0_hz, gamma_m_hz or quality_factor;
/// [bath] n_th or temperature_k, n_extra. Hz values become rad/s here.
SystemParams system_params(const ConfigFile& cfg);

/// [pump] alpha_in_minus / alpha_in_plus as "magnitude, phase_deg" in sqrt(photons/s).
/// off_alpha_in_minus / off_alpha_in_plus describe the drive-off variant if present.
PumpConfig pump_config(const ConfigFile& cfg);
std::optional<PumpConfig> pump_off_config(const ConfigFile& cfg);

/// True when the rates come from [truth] (omega_m_hz, gamma_eff_hz, s, n_bar)
/// rather than from the pump physics.
bool has_truth(const ConfigFile& cfg);

struct ConfigRates {
  DerivedRates on;
  DerivedRates off;
  std::optional<SystemParams> params;  // empty for [truth] configs
  std::optional<PumpConfig> pump;
};

/// Drive-on and drive-off rates of the config. Throws InstabilityError if the
/// drive-on system is unstable.
ConfigRates config_rates(const ConfigFile& cfg);

/// [acquisition] delta_lo_hz (11000), resolution_hz (0.2), half_window_hz
/// (20000), calibration (1), floor or floor_db (15 dB below the Stokes peak of
/// `rates`), n_avg (10).
Acquisition acquisition(const ConfigFile& cfg, const DerivedRates& rates);

/// [fit] max_iterations, gradient_tolerance, ratio_correction.
FitOptions fit_options(const ConfigFile& cfg);

/// default_bias_config() overridden by [truth], [acquisition] and [bias]
/// (n_trials, rebin, seed).
BiasStudyConfig bias_config(const ConfigFile& cfg);

}  // namespace omsqz
