#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "omsqz/config.hpp"
#include "omsqz/fitter.hpp"
#include "omsqz/lineshape.hpp"
#include "omsqz/synthesizer.hpp"

namespace omsqz {

/// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitInstability = 3;
inline constexpr int kExitFitFailures = 4;

int exit_code(const std::exception& e);

/// A numeric table with named columns. NaN is written as "nan".
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  std::size_t column(const std::string& name) const;  // throws PreconditionError if absent
  double at(std::size_t row, const std::string& name) const { return rows.at(row).at(column(name)); }
  std::string csv() const;
};

// ---- sweeps ---------------------------------------------------------------

enum class SweepAxis { ParametricGain, GammaEff, Detuning };

struct SweepConfig {
  SweepAxis axis = SweepAxis::ParametricGain;
  double start = 0.0;  // s, or Hz for gamma_eff and detuning
  double stop = 0.0;
  int n_points = 2;
  std::map<std::string, double> held;  // n_bar, gamma_eff_hz for the s axis
  std::vector<std::string> outputs;    // subset of r0, r_plus, r_minus, s, variance, criterion
  // gamma_eff_hz -> s, linearly interpolated and clamped at the ends.
  std::vector<std::pair<double, double>> s_override;

  /// Throws PreconditionError on a broken invariant.
  void validate() const;
  std::vector<double> points() const;
};

/// [sweep] axis (s, gamma_eff, detuning), start, stop, n_points, outputs,
/// n_bar, gamma_eff_hz, s_override = "gamma_hz:s, ...".
SweepConfig sweep_config(const ConfigFile& cfg);

/// One row per axis point; every row carries a stable flag and unstable points
/// hold NaN observables. The gamma_eff and detuning axes use the pump physics
/// of `base`: gamma_eff scales both input amplitudes by a common real factor,
/// detuning keeps the input amplitudes fixed.
Table run_sweep(const SweepConfig& sweep, const ConfigFile& base);

// ---- plots ----------------------------------------------------------------

struct PlotSpec {
  std::string title;
  std::string x_column;
  std::vector<std::string> y_columns;
  std::string x_label;
  std::string y_label;
  bool log_y = false;
};

/// Polyline plot of CSV columns. Reads only the CSV text.
std::string svg_from_csv(const std::string& csv, const PlotSpec& spec);

// ---- reports ---------------------------------------------------------------

struct RatesReport {
  ConfigRates rates;  // drive-on rates may be unstable here
  std::optional<IntracavityField> field;
  bool stable = true;
  std::string instability;  // message of the failed stability check
  std::string json() const;
  std::string table() const;
};

/// Does not throw on instability; run_command turns `stable == false` into an
/// InstabilityError after writing the report.
RatesReport cmd_rates(const ConfigFile& cfg);

struct SidebandSummary {
  double weight_narrow = 0.0;
  double weight_broad = 0.0;
  double area_narrow = 0.0;  // integral over Hz, calibration 1
  double area_broad = 0.0;
  double width_narrow_hz = 0.0;
  double width_broad_hz = 0.0;
};

struct SpectrumReport {
  DerivedRates rates;
  Acquisition acq;
  // freq_hz, total, stokes_narrow, stokes_broad, antistokes_narrow,
  // antistokes_broad and, when requested, oracle_total.
  Table curves;
  SidebandSummary stokes;
  SidebandSummary antistokes;
  double area_difference = 0.0;  // Stokes minus anti-Stokes
  double min_psd = 0.0;
  double max_oracle_rel_diff = 0.0;  // 0 without the oracle column
  std::string json() const;
};

/// Heterodyne model of the drive-on rates on the acquisition grid; [spectrum]
/// resolution_hz overrides the grid spacing, oracle = true adds the
/// covariance-propagation total.
SpectrumReport cmd_spectrum(const ConfigFile& cfg);

struct ExperimentRow {
  int repeat = 0;
  bool ok = false;
  double gamma_eff_hz = 0.0;  // off fit
  double r0 = 0.0;
  double n_bar = 0.0;
  double s = 0.0;  // on fit
  double sigma_s = 0.0;
  double r_plus = 0.0;
  double r_minus = 0.0;
  double area_antistokes_broad = 0.0;
  std::string failure;
};

struct ExperimentReport {
  DerivedRates truth_on;
  DerivedRates truth_off;
  Acquisition acq;
  int rebin = 1;
  double fit_window_hz = 0.0;
  bool noiseless = false;
  std::uint64_t root_seed = 1;
  std::vector<ExperimentRow> rows;
  int n_failed = 0;
  double max_failure_fraction = 0.05;
  SampleMoments s_moments;
  SampleMoments n_bar_moments;
  double s_bias = 0.0;
  double negative_broad_fraction = 0.0;  // among successful repeats
  Table overlay;  // first repeat: freq_hz, data, masked, fit_total, components

  std::string json() const;
  Table table() const;
};

/// Drive-on/off pairs, single-pair fit of the off spectrum for Gamma_eff and
/// n_bar, double-pair fit of the on spectrum with Gamma_eff fixed. [experiment]
/// n_repeats, seed, noiseless, rebin, fit_window_hz, max_failure_fraction.
ExperimentReport cmd_experiment(const ConfigFile& cfg, std::optional<std::uint64_t> seed = {});

// ---- runner ----------------------------------------------------------------

struct OutputFormats {
  bool csv = true;
  bool json = true;
  bool svg = false;

  /// Comma-separated subset of csv, json, svg.
  static OutputFormats parse(const std::string& list);
  std::string str() const;
};

struct RunManifest {
  std::string command;
  std::string tool_version;
  std::string config_source;
  std::string config_dir;
  std::string config_text;
  std::optional<std::uint64_t> root_seed;
  std::optional<int> trials;
  std::string formats;
  std::string started_utc;
  std::string finished_utc;
  std::vector<std::string> outputs;  // relative to the output directory

  std::string json() const;
  static RunManifest parse(const std::string& json);
};

struct RunOptions {
  std::filesystem::path out_dir;
  OutputFormats formats;
  std::optional<std::uint64_t> seed;
  std::optional<int> trials;  // bias study override
  std::ostream* log = nullptr;
};

/// $OMSQZ_OUT_DIR if set and nonempty, else the current directory.
std::filesystem::path default_out_dir();

std::string tool_version();

/// Runs one of rates, spectrum, synth, fit, sweep, experiment, bias, writes
/// its artifacts and manifest.json into opt.out_dir and returns the manifest.
/// Throws FitThresholdError after writing when too many fits failed.
RunManifest run_command(const std::string& command, const ConfigFile& cfg, const RunOptions& opt);

/// Replays a manifest: same command, config text, seed and formats.
RunManifest rerun_manifest(const std::filesystem::path& manifest, const RunOptions& opt);

}  // namespace omsqz
