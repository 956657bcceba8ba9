#include "omsqz/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include "omsqz/errors.hpp"
#include "omsqz/units.hpp"

namespace omsqz {

namespace pt = boost::property_tree;

ConfigFile ConfigFile::parse(const std::string& text, const std::string& source, const std::string& base_dir) {
  ConfigFile c;
  c.text_ = text;
  c.source_ = source;
  c.base_dir_ = base_dir;
  std::istringstream is(text);
  try {
    pt::ini_parser::read_ini(is, c.tree_);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(fmt::format("{}:{}: {}", source, e.line(), e.message()));
  }

  std::istringstream lines(text);
  std::string line, section;
  for (int n = 1; std::getline(lines, line); ++n) {
    boost::trim(line);
    if (line.empty() || line[0] == ';' || line[0] == '#') continue;
    if (line.front() == '[' && line.back() == ']') {
      section = boost::trim_copy(line.substr(1, line.size() - 2));
      c.lines_.emplace(section, n);
    } else if (const auto eq = line.find('='); eq != std::string::npos) {
      c.lines_.emplace(section + "." + boost::trim_copy(line.substr(0, eq)), n);
    }
  }
  return c;
}

ConfigFile ConfigFile::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("{}: cannot open config file", path));
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path, std::filesystem::absolute(path).parent_path().lexically_normal().string());
}

int ConfigFile::line_of(const std::string& section, const std::string& key) const {
  auto it = lines_.find(key.empty() ? section : section + "." + key);
  if (it == lines_.end() && !key.empty()) it = lines_.find(section);
  return it == lines_.end() ? 0 : it->second;
}

void ConfigFile::fail(const std::string& section, const std::string& key, const std::string& message) const {
  const int line = line_of(section, key);
  const std::string where = line > 0 ? fmt::format("{}:{}", source_, line) : source_;
  const std::string what = key.empty() ? fmt::format("[{}]", section) : fmt::format("[{}] {}", section, key);
  throw ConfigError(fmt::format("{}: {}: {}", where, what, message));
}

bool ConfigFile::has_section(const std::string& section) const {
  return tree_.get_child_optional(pt::ptree::path_type(section, '\0')).has_value();
}

bool ConfigFile::has(const std::string& section, const std::string& key) const {
  const auto s = tree_.get_child_optional(pt::ptree::path_type(section, '\0'));
  return s && s->get_child_optional(pt::ptree::path_type(key, '\0')).has_value();
}

std::string ConfigFile::raw(const std::string& section, const std::string& key) const {
  if (!has(section, key)) fail(section, key, "missing required key");
  return tree_.get_child(pt::ptree::path_type(section, '\0'))
      .get<std::string>(pt::ptree::path_type(key, '\0'));
}

namespace {

std::optional<double> to_double(std::string s) {
  boost::trim(s);
  if (!s.empty() && s.front() == '+') s.erase(0, 1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace

double ConfigFile::number(const std::string& section, const std::string& key) const {
  const auto s = raw(section, key);
  const auto v = to_double(s);
  if (!v) fail(section, key, fmt::format("'{}' is not a finite number", s));
  return *v;
}

double ConfigFile::number(const std::string& section, const std::string& key, double fallback) const {
  return has(section, key) ? number(section, key) : fallback;
}

std::optional<double> ConfigFile::optional_number(const std::string& section, const std::string& key) const {
  if (!has(section, key)) return std::nullopt;
  return number(section, key);
}

long ConfigFile::integer(const std::string& section, const std::string& key, long fallback) const {
  if (!has(section, key)) return fallback;
  auto s = boost::trim_copy(raw(section, key));
  long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) fail(section, key, fmt::format("'{}' is not an integer", s));
  return v;
}

bool ConfigFile::boolean(const std::string& section, const std::string& key, bool fallback) const {
  if (!has(section, key)) return fallback;
  const auto s = boost::to_lower_copy(boost::trim_copy(raw(section, key)));
  if (s == "true" || s == "yes" || s == "on" || s == "1") return true;
  if (s == "false" || s == "no" || s == "off" || s == "0") return false;
  fail(section, key, fmt::format("'{}' is not a boolean", s));
}

std::string ConfigFile::string(const std::string& section, const std::string& key,
                               const std::string& fallback) const {
  return has(section, key) ? boost::trim_copy(raw(section, key)) : fallback;
}

std::vector<double> ConfigFile::numbers(const std::string& section, const std::string& key) const {
  std::vector<std::string> parts;
  const auto s = raw(section, key);
  boost::split(parts, s, boost::is_any_of(","));
  std::vector<double> out;
  for (const auto& p : parts) {
    const auto v = to_double(p);
    if (!v) fail(section, key, fmt::format("'{}' is not a finite number", boost::trim_copy(p)));
    out.push_back(*v);
  }
  return out;
}

std::vector<std::pair<double, double>> ConfigFile::pairs(const std::string& section, const std::string& key) const {
  std::vector<std::string> parts;
  const auto s = raw(section, key);
  std::vector<std::pair<double, double>> out;
  if (boost::trim_copy(s).empty()) return out;
  boost::split(parts, s, boost::is_any_of(",;"));
  for (const auto& p : parts) {
    const auto colon = p.find(':');
    const auto a = colon == std::string::npos ? std::nullopt : to_double(p.substr(0, colon));
    const auto b = colon == std::string::npos ? std::nullopt : to_double(p.substr(colon + 1));
    if (!a || !b) fail(section, key, fmt::format("'{}' is not an a:b pair", boost::trim_copy(p)));
    out.emplace_back(*a, *b);
  }
  return out;
}

std::string ConfigFile::path(const std::string& section, const std::string& key) const {
  const std::filesystem::path p = boost::trim_copy(raw(section, key));
  if (p.is_absolute() || base_dir_.empty()) return p.string();
  return (std::filesystem::path(base_dir_) / p).string();
}

void ConfigFile::allow_keys(const std::string& section, const std::vector<std::string>& known) const {
  const auto s = tree_.get_child_optional(pt::ptree::path_type(section, '\0'));
  if (!s) return;
  for (const auto& [k, v] : *s)
    if (std::find(known.begin(), known.end(), k) == known.end())
      fail(section, k, fmt::format("unknown key (expected one of: {})", fmt::join(known, ", ")));
}

void ConfigFile::allow_sections(const std::vector<std::string>& known) const {
  for (const auto& [k, v] : tree_) {
    if (v.empty() && !v.data().empty()) fail(k, "", "key outside any section");
    if (std::find(known.begin(), known.end(), k) == known.end())
      fail(k, "", fmt::format("unknown section (expected one of: {})", fmt::join(known, ", ")));
  }
}

SystemParams system_params(const ConfigFile& cfg) {
  cfg.allow_keys("cavity", {"kappa_hz", "kappa_in_hz", "g0_hz", "detuning_hz"});
  cfg.allow_keys("mechanics", {"omega_m0_hz", "gamma_m_hz", "quality_factor"});
  cfg.allow_keys("bath", {"n_th", "temperature_k", "n_extra"});
  SystemParams p;
  p.kappa = hz_to_rad(cfg.number("cavity", "kappa_hz"));
  p.kappa_in = cfg.has("cavity", "kappa_in_hz") ? hz_to_rad(cfg.number("cavity", "kappa_in_hz")) : 0.5 * p.kappa;
  p.g0 = hz_to_rad(cfg.number("cavity", "g0_hz"));
  p.delta = hz_to_rad(cfg.number("cavity", "detuning_hz", 0.0));
  p.omega_m0 = hz_to_rad(cfg.number("mechanics", "omega_m0_hz"));

  const bool has_gamma = cfg.has("mechanics", "gamma_m_hz");
  const bool has_q = cfg.has("mechanics", "quality_factor");
  if (has_gamma == has_q) cfg.fail("mechanics", "", "give exactly one of gamma_m_hz and quality_factor");
  if (has_gamma) {
    p.gamma_m = hz_to_rad(cfg.number("mechanics", "gamma_m_hz"));
  } else {
    const double q = cfg.number("mechanics", "quality_factor");
    if (!(q > 0.0)) cfg.fail("mechanics", "quality_factor", "must be > 0");
    p.gamma_m = p.omega_m0 / q;
  }

  const bool has_nth = cfg.has("bath", "n_th");
  const bool has_t = cfg.has("bath", "temperature_k");
  if (has_nth == has_t) cfg.fail("bath", "", "give exactly one of n_th and temperature_k");
  if (has_nth) {
    p.n_th = cfg.number("bath", "n_th");
  } else {
    const double t = cfg.number("bath", "temperature_k");
    if (!(t > 0.0)) cfg.fail("bath", "temperature_k", "must be > 0");
    p.bath_temperature = t;
    p.n_th = thermal_occupation(t, p.omega_m0);
  }
  p.n_extra = cfg.number("bath", "n_extra", 0.0);
  try {
    p.validate();
  } catch (const PreconditionError& e) {
    throw ConfigError(fmt::format("{}: {}", cfg.source(), e.what()));
  }
  return p;
}

namespace {

cplx amplitude(const ConfigFile& cfg, const std::string& key) {
  const auto v = cfg.numbers("pump", key);
  if (v.empty() || v.size() > 2) cfg.fail("pump", key, "expected 'magnitude' or 'magnitude, phase_deg'");
  if (!(v[0] >= 0.0)) cfg.fail("pump", key, "magnitude must be >= 0");
  const double phase = v.size() == 2 ? v[1] * std::numbers::pi / 180.0 : 0.0;
  return std::polar(v[0], phase);
}

const std::vector<std::string> kPumpKeys{"alpha_in_minus", "alpha_in_plus", "off_alpha_in_minus",
                                         "off_alpha_in_plus"};

}  // namespace

PumpConfig pump_config(const ConfigFile& cfg) {
  cfg.allow_keys("pump", kPumpKeys);
  PumpConfig p;
  if (cfg.has("pump", "alpha_in_minus")) p.alpha_in_minus = amplitude(cfg, "alpha_in_minus");
  if (cfg.has("pump", "alpha_in_plus")) p.alpha_in_plus = amplitude(cfg, "alpha_in_plus");
  if (p.is_zero()) cfg.fail("pump", "", "at least one of alpha_in_minus and alpha_in_plus must be nonzero");
  return p;
}

std::optional<PumpConfig> pump_off_config(const ConfigFile& cfg) {
  if (!cfg.has("pump", "off_alpha_in_minus") && !cfg.has("pump", "off_alpha_in_plus")) return std::nullopt;
  PumpConfig p;
  if (cfg.has("pump", "off_alpha_in_minus")) p.alpha_in_minus = amplitude(cfg, "off_alpha_in_minus");
  if (cfg.has("pump", "off_alpha_in_plus")) p.alpha_in_plus = amplitude(cfg, "off_alpha_in_plus");
  if (p.is_zero()) cfg.fail("pump", "off_alpha_in_minus", "drive-off pump is zero");
  return p;
}

bool has_truth(const ConfigFile& cfg) { return cfg.has_section("truth"); }

ConfigRates config_rates(const ConfigFile& cfg) {
  ConfigRates out;
  if (has_truth(cfg)) {
    if (cfg.has_section("pump") || cfg.has_section("cavity"))
      cfg.fail("truth", "", "[truth] replaces the pump physics; drop [cavity] and [pump]");
    cfg.allow_keys("truth", {"omega_m_hz", "gamma_eff_hz", "s", "n_bar", "phi"});
    const double wm = hz_to_rad(cfg.number("truth", "omega_m_hz"));
    const double ge = hz_to_rad(cfg.number("truth", "gamma_eff_hz"));
    const double s = cfg.number("truth", "s", 0.0);
    const double nb = cfg.number("truth", "n_bar");
    if (!(wm > 0.0)) cfg.fail("truth", "omega_m_hz", "must be > 0");
    if (!(nb >= 0.0)) cfg.fail("truth", "n_bar", "must be >= 0");
    out.on = phenomenological_rates(wm, ge, s, nb, cfg.number("truth", "phi", 0.0));
    out.off = drive_off_rates(out.on);
    return out;
  }
  out.params = system_params(cfg);
  out.pump = pump_config(cfg);
  out.on = derive_all(*out.params, *out.pump);
  DerivedRates base = out.on;
  if (const auto off = pump_off_config(cfg)) {
    const auto fp = self_consistent_frequency(*out.params, *off);
    base = derive_unchecked(*out.params, intracavity_amplitudes(*out.params, *off, fp.omega_m), fp.omega_m);
  }
  out.off = drive_off_rates(base);
  check_stability(out.off);
  return out;
}

Acquisition acquisition(const ConfigFile& cfg, const DerivedRates& rates) {
  cfg.allow_keys("acquisition",
                 {"delta_lo_hz", "resolution_hz", "half_window_hz", "calibration", "floor", "floor_db", "n_avg"});
  Acquisition a;
  a.delta_lo = hz_to_rad(cfg.number("acquisition", "delta_lo_hz", 11e3));
  a.resolution_hz = cfg.number("acquisition", "resolution_hz", 0.2);
  a.half_window_hz = cfg.number("acquisition", "half_window_hz", 20e3);
  a.calibration = cfg.number("acquisition", "calibration", 1.0);
  a.n_avg = static_cast<int>(cfg.integer("acquisition", "n_avg", 10));
  if (!(a.delta_lo > 0.0)) cfg.fail("acquisition", "delta_lo_hz", "must be > 0");
  if (!(a.resolution_hz > 0.0)) cfg.fail("acquisition", "resolution_hz", "must be > 0");
  if (!(a.half_window_hz >= 0.0)) cfg.fail("acquisition", "half_window_hz", "must be >= 0");
  if (!(a.calibration > 0.0)) cfg.fail("acquisition", "calibration", "must be > 0");
  if (a.n_avg < 1) cfg.fail("acquisition", "n_avg", "must be >= 1");
  if (cfg.has("acquisition", "floor") && cfg.has("acquisition", "floor_db"))
    cfg.fail("acquisition", "floor_db", "give at most one of floor and floor_db");
  if (cfg.has("acquisition", "floor")) {
    a.floor = cfg.number("acquisition", "floor");
    if (!(a.floor >= 0.0)) cfg.fail("acquisition", "floor", "must be >= 0");
  } else {
    const double db = cfg.number("acquisition", "floor_db", 15.0);
    const auto m = heterodyne_model(rates, rates.n_bar, a.delta_lo, a.calibration, 0.0);
    a.floor = m.value(rates.omega_m + a.delta_lo) * std::pow(10.0, -db / 10.0);
  }
  return a;
}

FitOptions fit_options(const ConfigFile& cfg) {
  FitOptions o;
  o.max_iterations = static_cast<int>(cfg.integer("fit", "max_iterations", o.max_iterations));
  o.gradient_tolerance = cfg.number("fit", "gradient_tolerance", o.gradient_tolerance);
  o.ratio_correction = cfg.number("fit", "ratio_correction", o.ratio_correction);
  if (o.max_iterations < 0) cfg.fail("fit", "max_iterations", "must be >= 0");
  if (!(o.gradient_tolerance > 0.0)) cfg.fail("fit", "gradient_tolerance", "must be > 0");
  if (!(o.ratio_correction > 0.0)) cfg.fail("fit", "ratio_correction", "must be > 0");
  return o;
}

BiasStudyConfig bias_config(const ConfigFile& cfg) {
  cfg.allow_keys("bias", {"n_trials", "rebin", "seed"});
  auto c = default_bias_config();
  if (has_truth(cfg)) {
    const auto r = config_rates(cfg);
    c.omega_m = r.on.omega_m;
    c.gamma_eff = r.on.gamma_eff;
    if (r.on.s != 0.0) cfg.fail("truth", "s", "the bias study needs s = 0");
    c.n_bar = r.on.n_bar;
  }
  if (cfg.has_section("acquisition")) {
    const auto rates = phenomenological_rates(c.omega_m, c.gamma_eff, c.s, c.n_bar);
    c.acq = acquisition(cfg, rates);
  }
  c.n_trials = static_cast<int>(cfg.integer("bias", "n_trials", c.n_trials));
  c.rebin = static_cast<int>(cfg.integer("bias", "rebin", c.rebin));
  c.root_seed = static_cast<std::uint64_t>(cfg.integer("bias", "seed", static_cast<long>(c.root_seed)));
  if (c.n_trials < 100) cfg.fail("bias", "n_trials", "need at least 100 trials");
  if (c.rebin < 1) cfg.fail("bias", "rebin", "must be >= 1");
  c.fit = fit_options(cfg);
  return c;
}

}  // namespace omsqz
