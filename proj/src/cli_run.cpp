#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <ostream>
#include <sstream>

#include <boost/algorithm/string.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "omsqz/cli.hpp"
#include "omsqz/errors.hpp"
#include "omsqz/rng.hpp"
#include "omsqz/units.hpp"

#ifndef OMSQZ_VERSION
#define OMSQZ_VERSION "0.0.0"
#endif

namespace omsqz {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

OutputFormats OutputFormats::parse(const std::string& list) {
  OutputFormats f{false, false, false};
  std::vector<std::string> parts;
  boost::split(parts, list, boost::is_any_of(","));
  for (auto p : parts) {
    boost::trim(p);
    if (p == "csv") f.csv = true;
    else if (p == "json") f.json = true;
    else if (p == "svg") f.svg = true;
    else if (!p.empty()) throw ConfigError(fmt::format("unknown output format '{}' (csv, json, svg)", p));
  }
  if (!f.csv && !f.json && !f.svg) throw ConfigError("no output format selected");
  return f;
}

std::string OutputFormats::str() const {
  std::vector<std::string> v;
  if (csv) v.push_back("csv");
  if (json) v.push_back("json");
  if (svg) v.push_back("svg");
  return boost::join(v, ",");
}

std::string RunManifest::json() const {
  ojson j;
  j["command"] = command;
  j["tool_version"] = tool_version;
  j["config_source"] = config_source;
  j["config_dir"] = config_dir;
  j["config_text"] = config_text;
  j["root_seed"] = root_seed ? ojson(*root_seed) : ojson(nullptr);
  j["trials"] = trials ? ojson(*trials) : ojson(nullptr);
  j["formats"] = formats;
  j["started_utc"] = started_utc;
  j["finished_utc"] = finished_utc;
  j["outputs"] = outputs;
  return j.dump(2) + "\n";
}

RunManifest RunManifest::parse(const std::string& text) {
  RunManifest m;
  try {
    const auto j = ojson::parse(text);
    m.command = j.at("command").get<std::string>();
    m.tool_version = j.at("tool_version").get<std::string>();
    m.config_source = j.at("config_source").get<std::string>();
    m.config_dir = j.at("config_dir").get<std::string>();
    m.config_text = j.at("config_text").get<std::string>();
    if (!j.at("root_seed").is_null()) m.root_seed = j["root_seed"].get<std::uint64_t>();
    if (!j.at("trials").is_null()) m.trials = j["trials"].get<int>();
    m.formats = j.at("formats").get<std::string>();
    m.started_utc = j.value("started_utc", "");
    m.finished_utc = j.value("finished_utc", "");
    m.outputs = j.at("outputs").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("manifest: {}", e.what()));
  }
  return m;
}

fs::path default_out_dir() {
  const char* env = std::getenv("OMSQZ_OUT_DIR");
  if (env && *env) return env;
  return ".";
}

std::string tool_version() { return OMSQZ_VERSION; }

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class Writer {
 public:
  Writer(const RunOptions& opt, RunManifest& m) : opt_(opt), m_(m) { fs::create_directories(opt.out_dir); }

  void put(const std::string& name, const std::string& content) {
    std::ofstream os(opt_.out_dir / name, std::ios::binary | std::ios::trunc);
    os << content;
    if (!os) throw Error(fmt::format("cannot write {}", (opt_.out_dir / name).string()));
    m_.outputs.push_back(name);
    if (opt_.log) *opt_.log << "wrote " << (opt_.out_dir / name).string() << "\n";
  }
  void csv(const std::string& name, const std::string& content) {
    if (opt_.formats.csv) put(name, content);
  }
  void json(const std::string& name, const std::string& content) {
    if (opt_.formats.json) put(name, content);
  }
  void svg(const std::string& name, const std::string& csv_text, const PlotSpec& spec) {
    if (opt_.formats.svg) put(name, svg_from_csv(csv_text, spec));
  }

 private:
  const RunOptions& opt_;
  RunManifest& m_;
};

std::string spectrum_csv(const SpectrumData& d) {
  std::ostringstream os;
  write_csv(os, d);
  return os.str();
}

std::string fmt_num(double v) { return std::isnan(v) ? "nan" : fmt::format("{:.17g}", v); }

// name,value,unit rows of the drive-on rates.
std::string rates_csv(const RatesReport& rep) {
  std::string out = "name,value,unit\n";
  const auto row = [&](const char* n, double v, const char* u) { out += fmt::format("{},{},{}\n", n, fmt_num(v), u); };
  if (rep.rates.params) {
    const auto& p = *rep.rates.params;
    row("kappa_hz", rad_to_hz(p.kappa), "Hz");
    row("kappa_in_hz", rad_to_hz(p.kappa_in), "Hz");
    row("g0_hz", rad_to_hz(p.g0), "Hz");
    row("detuning_hz", rad_to_hz(p.delta), "Hz");
    row("omega_m0_hz", rad_to_hz(p.omega_m0), "Hz");
    row("gamma_m_hz", rad_to_hz(p.gamma_m), "Hz");
    row("n_th", p.n_th, "");
  }
  const auto& r = rep.rates.on;
  row("omega_m_hz", rad_to_hz(r.omega_m), "Hz");
  row("gamma_opt_hz", rad_to_hz(r.gamma_opt), "Hz");
  row("gamma_eff_hz", rad_to_hz(r.gamma_eff), "Hz");
  row("gamma_par_hz", rad_to_hz(r.gamma_par), "Hz");
  row("phi", r.phi, "rad");
  row("s", r.s_folded(), "");
  row("s_signed", r.s, "");
  row("gamma_plus_hz", rad_to_hz(r.gamma_plus), "Hz");
  row("gamma_minus_hz", rad_to_hz(r.gamma_minus), "Hz");
  row("a_minus_hz", rad_to_hz(r.a_minus), "Hz");
  row("a_plus_hz", rad_to_hz(r.a_plus), "Hz");
  row("n_bar", r.n_bar, "");
  row("stable", rep.stable ? 1.0 : 0.0, "");
  return out;
}

void run_rates(const ConfigFile& cfg, Writer& w) {
  const auto rep = cmd_rates(cfg);
  w.json("rates.json", rep.json());
  w.csv("rates.csv", rates_csv(rep));
  if (!rep.stable)
    throw InstabilityError(rep.rates.on.gamma_eff <= 0.0 ? InstabilityError::Kind::AntiDamping
                                                         : InstabilityError::Kind::Parametric,
                           rep.instability);
}

void run_spectrum(const ConfigFile& cfg, Writer& w) {
  const auto rep = cmd_spectrum(cfg);
  const auto csv = rep.curves.csv();
  w.csv("spectrum.csv", csv);
  w.json("spectrum.json", rep.json());
  PlotSpec spec{"Heterodyne spectrum", "freq_hz", {"total"}, "frequency (Hz)", "PSD", true};
  if (rep.curves.columns.back() == "oracle_total") spec.y_columns.push_back("oracle_total");
  w.svg("spectrum.svg", csv, spec);
}

std::uint64_t seed_of(const ConfigFile& cfg, const std::string& section, const RunOptions& opt) {
  if (opt.seed) return *opt.seed;
  const long s = cfg.integer(section, "seed", 1);
  if (s < 0) cfg.fail(section, "seed", "must be >= 0");
  return static_cast<std::uint64_t>(s);
}

void run_synth(const ConfigFile& cfg, const RunOptions& opt, Writer& w, RunManifest& m) {
  cfg.allow_keys("synth", {"kind", "seed", "duration_s", "fs_hz", "segment_s"});
  const auto rates = config_rates(cfg);
  const auto acq = acquisition(cfg, rates.on);
  const auto seed = seed_of(cfg, "synth", opt);
  m.root_seed = seed;
  const auto kind = cfg.string("synth", "kind", "periodogram");
  ojson j;
  j["kind"] = kind;
  j["seed"] = seed;
  SpectrumData on, off;
  if (kind == "periodogram") {
    const auto pair = make_onoff_pair(rates.on, rates.off, acq, seed);
    on = pair.drive_on;
    off = pair.drive_off;
  } else if (kind == "timeseries") {
    const double duration = cfg.number("synth", "duration_s", 10.0);
    const double fs_hz = cfg.number("synth", "fs_hz", 4.0 * rad_to_hz(acq.delta_lo) + 4.0 * acq.half_window_hz);
    const double segment = cfg.number("synth", "segment_s", 1.0 / acq.resolution_hz);
    if (!(duration > 0.0)) cfg.fail("synth", "duration_s", "must be > 0");
    if (!(segment > 0.0 && segment <= duration)) cfg.fail("synth", "segment_s", "must be in (0, duration_s]");
    const auto make = [&](const DerivedRates& r, std::uint64_t s) {
      const auto series = synth_timeseries(r, r.n_bar, acq.delta_lo, fs_hz, duration, s, acq.floor);
      auto d = segment_average(series.samples, fs_hz, segment, acq.resolution_hz, series.carrier_hz);
      if (acq.calibration != 1.0)
        for (auto& v : d.psd) v *= acq.calibration;
      return d;
    };
    on = make(rates.on, task_seed(seed, 0));
    off = make(rates.off, task_seed(seed, 1));
    j["duration_s"] = duration;
    j["fs_hz"] = fs_hz;
    j["segment_s"] = segment;
  } else {
    cfg.fail("synth", "kind", "expected periodogram or timeseries");
  }
  j["n_bins"] = on.size();
  j["n_avg"] = on.n_avg;
  j["truth"] = {{"omega_m_hz", rad_to_hz(rates.on.omega_m)},
                {"gamma_eff_hz", rad_to_hz(rates.on.gamma_eff)},
                {"gamma_eff_off_hz", rad_to_hz(rates.off.gamma_eff)},
                {"s", rates.on.s_folded()},
                {"n_bar", rates.on.n_bar},
                {"n_bar_off", rates.off.n_bar}};
  const auto on_csv = spectrum_csv(on);
  w.csv("synth_on.csv", on_csv);
  w.csv("synth_off.csv", spectrum_csv(off));
  w.json("synth.json", j.dump(2) + "\n");
  w.svg("synth_on.svg", on_csv, {"Synthetic drive-on spectrum", "freq_hz", {"psd"}, "frequency (Hz)", "PSD", true});
}

void run_fit(const ConfigFile& cfg, Writer& w) {
  cfg.allow_keys("fit", {"input", "off_input", "model", "gamma_eff_hz", "mask", "rebin", "max_iterations",
                         "gradient_tolerance", "ratio_correction"});
  const auto opt = fit_options(cfg);
  if (!cfg.has("fit", "input")) cfg.fail("fit", "input", "missing");
  const long rebin = cfg.integer("fit", "rebin", 1);
  if (rebin < 1) cfg.fail("fit", "rebin", "must be >= 1");
  const auto windows = cfg.has("fit", "mask") ? cfg.pairs("fit", "mask") : std::vector<std::pair<double, double>>{};
  for (const auto& [lo, hi] : windows)
    if (!(lo <= hi)) cfg.fail("fit", "mask", "window with lo > hi");
  const auto prepare = [&](const std::string& key) {
    auto d = load_csv(cfg.path("fit", key));
    d = apply_mask(d, windows);
    return rebin > 1 ? d.rebin(static_cast<int>(rebin)) : d;
  };
  const auto data = prepare("input");
  const auto model = cfg.string("fit", "model", cfg.has("fit", "off_input") ? "two_stage" : "single_pair");

  ojson j;
  j["model"] = model;
  FitResult main;
  if (model == "two_stage") {
    if (!cfg.has("fit", "off_input")) cfg.fail("fit", "off_input", "two_stage needs the drive-off spectrum");
    const auto off = fit_single_pair(prepare("off_input"), {}, opt);
    if (!off.converged) throw FitError("drive-off fit did not converge");
    FitHint h;
    h.center_stokes_hz = off.get("center_stokes_hz");
    h.center_antistokes_hz = off.get("center_antistokes_hz");
    main = fit_double_pair(data, off.get("gamma_eff_hz"), h, opt);
    j["drive_off"] = ojson::parse(to_json(off));
  } else if (model == "single_pair") {
    main = fit_single_pair(data, {}, opt);
  } else if (model == "double_pair") {
    const double g = cfg.number("fit", "gamma_eff_hz");
    main = fit_double_pair(data, g, {}, opt);
  } else if (model == "single_peak") {
    main = fit_single_peak(data, {}, opt);
  } else {
    cfg.fail("fit", "model", "expected two_stage, single_pair, double_pair or single_peak");
  }
  j["fit"] = ojson::parse(to_json(main));
  if (!main.converged) throw FitError(fmt::format("{} fit did not converge", main.model));

  Table t;
  t.columns = {"freq_hz", "data", "masked", "fit_total"};
  if (main.model == "single_pair") t.columns.insert(t.columns.end(), {"stokes", "antistokes"});
  else if (main.model == "double_pair")
    t.columns.insert(t.columns.end(), {"stokes_narrow", "stokes_broad", "antistokes_narrow", "antistokes_broad"});
  else t.columns.push_back("peak");
  const auto curves = fit_curves(main, data.freq_hz);
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::vector<double> row{data.freq_hz[i], data.psd[i], data.masked(i) ? 1.0 : 0.0};
    for (const auto& c : curves) row.push_back(c[i]);
    t.rows.push_back(std::move(row));
  }
  const auto csv = t.csv();
  w.json("fit.json", j.dump(2) + "\n");
  w.csv("fit_curves.csv", csv);
  w.svg("fit.svg", csv, {"Fit", "freq_hz", {"data", "fit_total"}, "frequency (Hz)", "PSD", true});
}

void run_sweep_cmd(const ConfigFile& cfg, Writer& w) {
  const auto sw = sweep_config(cfg);
  const auto t = run_sweep(sw, cfg);
  const auto csv = t.csv();
  w.csv("sweep.csv", csv);
  int n_stable = 0;
  for (std::size_t i = 0; i < t.rows.size(); ++i) n_stable += t.at(i, "stable") != 0.0;
  const char* axis = sw.axis == SweepAxis::ParametricGain ? "s"
                     : sw.axis == SweepAxis::GammaEff     ? "gamma_eff"
                                                          : "detuning";
  ojson j;
  j["axis"] = axis;
  j["start"] = sw.start;
  j["stop"] = sw.stop;
  j["n_points"] = sw.n_points;
  j["outputs"] = sw.outputs;
  j["n_stable"] = n_stable;
  j["columns"] = t.columns;
  w.json("sweep.json", j.dump(2) + "\n");

  PlotSpec spec;
  spec.x_column = t.columns.front();
  spec.x_label = spec.x_column;
  for (const auto* c : {"r_plus", "r0", "r_minus"})
    if (std::find(t.columns.begin(), t.columns.end(), c) != t.columns.end()) spec.y_columns.push_back(c);
  if (spec.y_columns.empty() && spec.x_column != "s") spec.y_columns.push_back("s");
  if (spec.y_columns.empty()) spec.y_columns.push_back("n_bar");
  spec.title = fmt::format("Sweep over {}", axis);
  spec.y_label = boost::join(spec.y_columns, ", ");
  w.svg("sweep.svg", csv, spec);
}

void run_experiment(const ConfigFile& cfg, const RunOptions& opt, Writer& w, RunManifest& m) {
  const auto rep = cmd_experiment(cfg, opt.seed);
  m.root_seed = rep.root_seed;
  w.csv("experiment.csv", rep.table().csv());
  w.json("experiment.json", rep.json());
  const auto overlay = rep.overlay.csv();
  w.csv("overlay.csv", overlay);
  if (!rep.overlay.rows.empty()) {
    PlotSpec spec{"Drive-on spectrum, repeat 0", "freq_hz", {}, "frequency (Hz)", "PSD", true};
    for (std::size_t k = 1; k < rep.overlay.columns.size(); ++k)
      if (rep.overlay.columns[k] != "masked") spec.y_columns.push_back(rep.overlay.columns[k]);
    w.svg("overlay.svg", overlay, spec);
  }
  const auto n = static_cast<double>(rep.rows.size());
  if (rep.n_failed > rep.max_failure_fraction * n)
    throw FitThresholdError(fmt::format("{} of {} repeats failed (allowed fraction {})", rep.n_failed,
                                        rep.rows.size(), rep.max_failure_fraction));
}

void run_bias(const ConfigFile& cfg, const RunOptions& opt, Writer& w, RunManifest& m) {
  auto c = bias_config(cfg);
  if (opt.seed) c.root_seed = *opt.seed;
  if (opt.trials) c.n_trials = *opt.trials;
  m.root_seed = c.root_seed;
  m.trials = c.n_trials;
  const auto rep = bias_study(c);
  w.json("bias.json", to_json(rep, c) + "\n");
  const auto hist = histogram_csv(rep);
  w.csv("bias_hist.csv", hist);
  std::string trials = "trial,s\n";
  for (std::size_t i = 0; i < rep.s_values.size(); ++i) trials += fmt::format("{},{}\n", i, fmt_num(rep.s_values[i]));
  w.csv("bias_trials.csv", trials);
  w.svg("bias_hist.svg", hist, {"Fitted s at s = 0", "lo", {"count"}, "s", "trials", false});
  if (!rep.valid)
    throw FitThresholdError(fmt::format("{} of {} bias trials failed", rep.n_failed, rep.n_trials));
}

}  // namespace

RunManifest run_command(const std::string& command, const ConfigFile& cfg, const RunOptions& opt) {
  RunManifest m;
  m.command = command;
  m.tool_version = tool_version();
  m.config_source = cfg.source();
  m.config_dir = cfg.base_dir();
  m.config_text = cfg.text();
  m.formats = opt.formats.str();
  m.started_utc = utc_now();
  Writer w(opt, m);

  const auto finish = [&] {
    m.finished_utc = utc_now();
    std::ofstream os(opt.out_dir / "manifest.json", std::ios::binary | std::ios::trunc);
    os << m.json();
  };
  try {
    if (command == "rates") run_rates(cfg, w);
    else if (command == "spectrum") run_spectrum(cfg, w);
    else if (command == "synth") run_synth(cfg, opt, w, m);
    else if (command == "fit") run_fit(cfg, w);
    else if (command == "sweep") run_sweep_cmd(cfg, w);
    else if (command == "experiment") run_experiment(cfg, opt, w, m);
    else if (command == "bias") run_bias(cfg, opt, w, m);
    else throw ConfigError(fmt::format("unknown command '{}'", command));
  } catch (const InstabilityError&) {
    finish();
    throw;
  } catch (const FitThresholdError&) {
    finish();
    throw;
  }
  finish();
  return m;
}

RunManifest rerun_manifest(const fs::path& manifest, const RunOptions& opt) {
  std::ifstream is(manifest, std::ios::binary);
  if (!is) throw ConfigError(fmt::format("cannot read manifest {}", manifest.string()));
  std::ostringstream ss;
  ss << is.rdbuf();
  const auto m = RunManifest::parse(ss.str());
  const auto cfg = ConfigFile::parse(m.config_text, m.config_source, m.config_dir);
  RunOptions o = opt;
  o.formats = OutputFormats::parse(m.formats);
  o.seed = m.root_seed;
  o.trials = m.trials;
  return run_command(m.command, cfg, o);
}

}  // namespace omsqz
