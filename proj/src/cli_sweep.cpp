#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <boost/algorithm/string.hpp>
#include <boost/math/tools/roots.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include "omsqz/cli.hpp"
#include "omsqz/errors.hpp"
#include "omsqz/units.hpp"

namespace omsqz {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string number_text(double v) {
  if (std::isnan(v)) return "nan";
  return fmt::format("{:.17g}", v);
}

}  // namespace

std::size_t Table::column(const std::string& name) const {
  const auto it = std::find(columns.begin(), columns.end(), name);
  if (it == columns.end()) throw PreconditionError(fmt::format("table has no column '{}'", name));
  return static_cast<std::size_t>(it - columns.begin());
}

std::string Table::csv() const {
  std::string out = fmt::format("{}\n", fmt::join(columns, ","));
  for (const auto& r : rows) {
    for (std::size_t k = 0; k < r.size(); ++k) {
      if (k) out += ',';
      out += number_text(r[k]);
    }
    out += '\n';
  }
  return out;
}

// ---- sweep ------------------------------------------------------------------

namespace {

const std::vector<std::string> kObservables{"r0", "r_plus", "r_minus", "s", "variance", "criterion"};

const char* axis_column(SweepAxis a) {
  switch (a) {
    case SweepAxis::ParametricGain: return "s";
    case SweepAxis::GammaEff: return "gamma_eff_hz";
    case SweepAxis::Detuning: return "detuning_hz";
  }
  return "";
}

double interpolate(const std::vector<std::pair<double, double>>& table, double x) {
  if (x <= table.front().first) return table.front().second;
  if (x >= table.back().first) return table.back().second;
  const auto hi = std::upper_bound(table.begin(), table.end(), x,
                                   [](double v, const auto& p) { return v < p.first; });
  const auto lo = hi - 1;
  const double t = (x - lo->first) / (hi->first - lo->first);
  return lo->second + t * (hi->second - lo->second);
}

bool wants(const SweepConfig& sw, const std::string& name) {
  return std::find(sw.outputs.begin(), sw.outputs.end(), name) != sw.outputs.end();
}

// Observable columns for one (n_bar, s) state.
struct Observables {
  std::vector<std::string> names;
  std::vector<double> values;

  void add(const std::string& n, double v) {
    names.push_back(n);
    values.push_back(v);
  }
};

Observables observables(const SweepConfig& sw, bool stable, double n_bar, double s) {
  Observables o;
  const double fs = std::abs(s);
  const bool ok = stable && n_bar >= 0.0 && fs < 1.0;
  if (wants(sw, "r0") || wants(sw, "r_plus") || wants(sw, "r_minus")) {
    Ratios r{kNaN, kNaN, kNaN};
    if (ok) r = sideband_ratios(n_bar, fs);
    if (wants(sw, "r0")) o.add("r0", r.r0);
    if (wants(sw, "r_plus")) o.add("r_plus", r.r_plus);
    if (wants(sw, "r_minus")) o.add("r_minus", r.r_minus);
  }
  if (wants(sw, "variance")) {
    o.add("var_y", ok ? squeezed_variance(n_bar, fs) : kNaN);
    o.add("var_x", ok ? antisqueezed_variance(n_bar, fs) : kNaN);
  }
  if (wants(sw, "criterion")) {
    const auto c = ok ? squeezing_criterion(n_bar, fs) : SqueezingCriterion{false, kNaN};
    o.add("criterion_margin", c.margin);
    o.add("below_zero_point", ok ? (c.below_zero_point ? 1.0 : 0.0) : kNaN);
  }
  return o;
}

struct PhysicsPoint {
  bool stable = false;
  DerivedRates rates;
};

PhysicsPoint physics_point(const SystemParams& params, const PumpConfig& pump) {
  PhysicsPoint p;
  try {
    const auto fp = self_consistent_frequency(params, pump);
    p.rates = derive_unchecked(params, intracavity_amplitudes(params, pump, fp.omega_m), fp.omega_m);
    p.stable = p.rates.stable();
  } catch (const ConvergenceError&) {
    p.stable = false;
  }
  return p;
}

void require_physics(const ConfigFile& cfg, const SweepConfig& sw) {
  if (has_truth(cfg) || !cfg.has_section("pump"))
    cfg.fail("sweep", "axis",
             fmt::format("a {} sweep needs the pump physics ([cavity], [mechanics], [pump], [bath])",
                         axis_column(sw.axis)));
}

}  // namespace

void SweepConfig::validate() const {
  if (!(start < stop)) throw PreconditionError("sweep: need start < stop");
  if (n_points < 2) throw PreconditionError("sweep: need n_points >= 2");
  for (const auto& o : outputs)
    if (std::find(kObservables.begin(), kObservables.end(), o) == kObservables.end())
      throw PreconditionError(fmt::format("sweep: unknown output '{}'", o));
  if (const auto it = held.find("n_bar"); it != held.end() && !(it->second >= 0.0))
    throw PreconditionError("sweep: held n_bar must be >= 0");
  if (const auto it = held.find("gamma_eff_hz"); it != held.end() && !(it->second > 0.0))
    throw PreconditionError("sweep: held gamma_eff_hz must be > 0");
  for (std::size_t k = 1; k < s_override.size(); ++k)
    if (!(s_override[k].first > s_override[k - 1].first))
      throw PreconditionError("sweep: s_override must be strictly increasing in gamma_eff_hz");
  if (!s_override.empty() && axis != SweepAxis::GammaEff)
    throw PreconditionError("sweep: s_override only applies to the gamma_eff axis");
}

std::vector<double> SweepConfig::points() const {
  std::vector<double> x(static_cast<std::size_t>(n_points));
  for (int k = 0; k < n_points; ++k)
    x[static_cast<std::size_t>(k)] =
        k == n_points - 1 ? stop : start + (stop - start) * static_cast<double>(k) / (n_points - 1);
  return x;
}

SweepConfig sweep_config(const ConfigFile& cfg) {
  cfg.allow_keys("sweep", {"axis", "start", "stop", "n_points", "outputs", "n_bar", "gamma_eff_hz", "s_override"});
  SweepConfig sw;
  const auto axis = cfg.string("sweep", "axis", "");
  if (axis == "s") sw.axis = SweepAxis::ParametricGain;
  else if (axis == "gamma_eff") sw.axis = SweepAxis::GammaEff;
  else if (axis == "detuning") sw.axis = SweepAxis::Detuning;
  else cfg.fail("sweep", "axis", fmt::format("'{}' is not one of s, gamma_eff, detuning", axis));
  sw.start = cfg.number("sweep", "start");
  sw.stop = cfg.number("sweep", "stop");
  sw.n_points = static_cast<int>(cfg.integer("sweep", "n_points", 51));
  if (cfg.has("sweep", "outputs")) {
    std::vector<std::string> parts;
    const auto s = cfg.string("sweep", "outputs", "");
    boost::split(parts, s, boost::is_any_of(", "), boost::token_compress_on);
    for (auto& p : parts)
      if (!p.empty()) sw.outputs.push_back(p);
  } else {
    sw.outputs = kObservables;
  }
  if (cfg.has("sweep", "n_bar")) sw.held["n_bar"] = cfg.number("sweep", "n_bar");
  if (cfg.has("sweep", "gamma_eff_hz")) sw.held["gamma_eff_hz"] = cfg.number("sweep", "gamma_eff_hz");
  if (cfg.has("sweep", "s_override")) {
    sw.s_override = cfg.pairs("sweep", "s_override");
    std::sort(sw.s_override.begin(), sw.s_override.end());
  }
  try {
    sw.validate();
  } catch (const PreconditionError& e) {
    cfg.fail("sweep", "", e.what());
  }
  if (sw.axis != SweepAxis::ParametricGain) require_physics(cfg, sw);
  if (sw.axis == SweepAxis::ParametricGain && !sw.held.count("n_bar")) {
    if (!has_truth(cfg) && !cfg.has_section("pump")) cfg.fail("sweep", "n_bar", "missing required key");
  }
  return sw;
}

Table run_sweep(const SweepConfig& sw, const ConfigFile& base) {
  sw.validate();
  Table t;
  const auto xs = sw.points();

  auto push = [&](std::vector<std::string> fixed_names, std::vector<double> fixed, const Observables& o) {
    if (t.columns.empty()) {
      t.columns = std::move(fixed_names);
      t.columns.insert(t.columns.end(), o.names.begin(), o.names.end());
    }
    fixed.insert(fixed.end(), o.values.begin(), o.values.end());
    t.rows.push_back(std::move(fixed));
  };

  if (sw.axis == SweepAxis::ParametricGain) {
    double n_bar = 0.0, gamma_hz = kNaN;
    if (const auto it = sw.held.find("n_bar"); it != sw.held.end()) {
      n_bar = it->second;
    } else {
      n_bar = config_rates(base).on.n_bar;
    }
    if (const auto it = sw.held.find("gamma_eff_hz"); it != sw.held.end()) {
      gamma_hz = it->second;
    } else if (has_truth(base) || base.has_section("pump")) {
      gamma_hz = rad_to_hz(config_rates(base).on.gamma_eff);
    }
    for (double s : xs) {
      const bool stable = std::abs(s) < 1.0;
      auto o = observables(sw, stable, n_bar, s);
      push({"s", "stable", "n_bar", "gamma_eff_hz", "gamma_plus_hz", "gamma_minus_hz"},
           {s, stable ? 1.0 : 0.0, n_bar, gamma_hz, stable ? gamma_hz * (1.0 + s) : kNaN,
            stable ? gamma_hz * (1.0 - s) : kNaN},
           o);
    }
    return t;
  }

  const auto params = system_params(base);
  const auto pump = pump_config(base);

  if (sw.axis == SweepAxis::Detuning) {
    for (double d_hz : xs) {
      auto p = params;
      p.delta = hz_to_rad(d_hz);
      const auto pt = physics_point(p, pump);
      const auto& r = pt.rates;
      const bool have = pt.stable;
      auto o = observables(sw, have, r.n_bar, r.s);
      push({"detuning_hz", "stable", "gamma_eff_hz", "gamma_par_hz", "n_bar", "s", "s_signed", "omega_m_hz"},
           {d_hz, have ? 1.0 : 0.0, have ? rad_to_hz(r.gamma_eff) : kNaN, have ? rad_to_hz(r.gamma_par) : kNaN,
            have ? r.n_bar : kNaN, have ? std::abs(r.s) : kNaN, have ? r.s : kNaN,
            have ? rad_to_hz(r.omega_m) : kNaN},
           o);
    }
    return t;
  }

  // Gamma_eff axis: find the common pump scale u = c^2 that gives each target.
  const auto at_scale = [&](double u) { return physics_point(params, pump.scaled(std::sqrt(u))); };
  const auto unit = at_scale(1.0);
  if (!(unit.rates.gamma_opt > 0.0))
    base.fail("sweep", "axis", "the configured pump does not damp (Gamma_opt <= 0), so Gamma_eff cannot be tuned");
  for (double target_hz : xs) {
    const double target = hz_to_rad(target_hz);
    PhysicsPoint pt;
    double scale = kNaN;
    if (target > params.gamma_m) {
      const auto f = [&](double u) { return at_scale(u).rates.gamma_eff - target; };
      double hi = 2.0 * (target - params.gamma_m) / unit.rates.gamma_opt;
      bool bracketed = false;
      for (int k = 0; k < 60 && !bracketed; ++k) {
        const auto v = at_scale(hi);
        if (v.rates.omega_m == 0.0) break;  // frequency iteration failed
        if (v.rates.gamma_eff >= target) bracketed = true;
        else hi *= 2.0;
      }
      if (bracketed) {
        boost::uintmax_t iters = 200;
        const auto [a, b] = boost::math::tools::toms748_solve(
            f, 0.0, hi, params.gamma_m - target, f(hi), boost::math::tools::eps_tolerance<double>(50), iters);
        scale = 0.5 * (a + b);
        pt = at_scale(scale);
      }
    }
    const auto& r = pt.rates;
    double s = r.s;
    if (!sw.s_override.empty() && pt.rates.omega_m > 0.0) s = interpolate(sw.s_override, target_hz);
    const bool have = pt.stable && std::abs(s) < 1.0 && r.gamma_eff > 0.0;
    auto o = observables(sw, have, r.n_bar, s);
    push({"gamma_eff_hz", "stable", "pump_scale", "n_bar", "s", "s_model", "gamma_par_hz"},
         {target_hz, have ? 1.0 : 0.0, std::isnan(scale) ? kNaN : std::sqrt(scale), have ? r.n_bar : kNaN,
          have ? std::abs(s) : kNaN, have ? std::abs(r.s) : kNaN, have ? rad_to_hz(r.gamma_par) : kNaN},
         o);
  }
  return t;
}

// ---- svg ----------------------------------------------------------------------

namespace {

struct CsvColumns {
  std::vector<std::string> names;
  std::vector<std::vector<double>> cols;
};

CsvColumns read_columns(const std::string& csv) {
  CsvColumns c;
  std::istringstream is(csv);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> parts;
    boost::split(parts, line, boost::is_any_of(","));
    if (c.names.empty()) {
      c.names = parts;
      c.cols.resize(parts.size());
      continue;
    }
    for (std::size_t k = 0; k < c.cols.size(); ++k) {
      double v = kNaN;
      if (k < parts.size()) {
        char* end = nullptr;
        v = std::strtod(parts[k].c_str(), &end);
        if (end == parts[k].c_str()) v = kNaN;
      }
      c.cols[k].push_back(v);
    }
  }
  return c;
}

const std::vector<double>& named(const CsvColumns& c, const std::string& name) {
  const auto it = std::find(c.names.begin(), c.names.end(), name);
  if (it == c.names.end()) throw PreconditionError(fmt::format("svg: CSV has no column '{}'", name));
  return c.cols[static_cast<std::size_t>(it - c.names.begin())];
}

std::vector<double> nice_ticks(double lo, double hi) {
  const double span = hi - lo;
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (m * mag >= raw) {
      step = m * mag;
      break;
    }
  std::vector<double> t;
  for (double v = std::ceil(lo / step) * step; v <= hi + 1e-9 * span; v += step) t.push_back(std::abs(v) < 1e-12 * span ? 0.0 : v);
  return t;
}

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};

}  // namespace

std::string svg_from_csv(const std::string& csv, const PlotSpec& spec) {
  const auto data = read_columns(csv);
  const auto& x = named(data, spec.x_column);
  std::vector<const std::vector<double>*> ys;
  for (const auto& n : spec.y_columns) ys.push_back(&named(data, n));

  const auto ty = [&](double v) { return spec.log_y ? (v > 0.0 ? std::log10(v) : kNaN) : v; };
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) continue;
    for (const auto* y : ys) {
      const double v = ty((*y)[i]);
      if (!std::isfinite(v)) continue;
      x0 = std::min(x0, x[i]), x1 = std::max(x1, x[i]);
      y0 = std::min(y0, v), y1 = std::max(y1, v);
    }
  }
  if (!std::isfinite(x0)) x0 = 0.0, x1 = 1.0, y0 = 0.0, y1 = 1.0;
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad, y1 += pad;

  constexpr double W = 720, H = 450, L = 80, R = 160, T = 40, B = 60;
  const auto px = [&](double v) { return L + (v - x0) / (x1 - x0) * (W - L - R); };
  const auto py = [&](double v) { return H - B - (v - y0) / (y1 - y0) * (H - T - B); };

  std::string s = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\" "
      "font-family=\"sans-serif\" font-size=\"12\">\n",
      W, H, W, H);
  s += fmt::format("<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>\n", W, H);
  s += fmt::format("<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n", 0.5 * (L + W - R),
                   spec.title);
  s += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n", L, T,
                   W - L - R, H - T - B);

  for (double v : nice_ticks(x0, x1)) {
    s += fmt::format("<line x1=\"{0:.2f}\" y1=\"{1}\" x2=\"{0:.2f}\" y2=\"{2}\" stroke=\"black\"/>\n", px(v), H - B,
                     H - B + 5);
    s += fmt::format("<text x=\"{:.2f}\" y=\"{}\" text-anchor=\"middle\">{:.6g}</text>\n", px(v), H - B + 18, v);
  }
  if (spec.log_y) {
    for (double d = std::ceil(y0); d <= y1; d += 1.0) {
      s += fmt::format("<line x1=\"{0}\" y1=\"{1:.2f}\" x2=\"{2}\" y2=\"{1:.2f}\" stroke=\"black\"/>\n", L - 5, py(d), L);
      s += fmt::format("<text x=\"{}\" y=\"{:.2f}\" text-anchor=\"end\">1e{:g}</text>\n", L - 8, py(d) + 4, d);
    }
  } else {
    for (double v : nice_ticks(y0, y1)) {
      s += fmt::format("<line x1=\"{0}\" y1=\"{1:.2f}\" x2=\"{2}\" y2=\"{1:.2f}\" stroke=\"black\"/>\n", L - 5, py(v), L);
      s += fmt::format("<text x=\"{}\" y=\"{:.2f}\" text-anchor=\"end\">{:.6g}</text>\n", L - 8, py(v) + 4, v);
    }
  }
  s += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", 0.5 * (L + W - R), H - 15,
                   spec.x_label.empty() ? spec.x_column : spec.x_label);
  s += fmt::format("<text x=\"18\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {0})\">{1}</text>\n",
                   0.5 * (T + H - B), spec.y_label);

  for (std::size_t k = 0; k < ys.size(); ++k) {
    const char* color = kPalette[k % std::size(kPalette)];
    std::string pts;
    auto flush = [&] {
      if (!pts.empty())
        s += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.2\" points=\"{}\"/>\n", color, pts);
      pts.clear();
    };
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = ty((*ys[k])[i]);
      if (!std::isfinite(v) || !std::isfinite(x[i])) {
        flush();
        continue;
      }
      if (!pts.empty()) pts += ' ';
      pts += fmt::format("{:.2f},{:.2f}", px(x[i]), py(v));
    }
    flush();
    const double ly = T + 16 + 18 * static_cast<double>(k);
    s += fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{}\" stroke-width=\"2\"/>\n", W - R + 12,
                     ly, W - R + 36, ly, color);
    s += fmt::format("<text x=\"{}\" y=\"{}\">{}</text>\n", W - R + 42, ly + 4, spec.y_columns[k]);
  }
  s += "</svg>\n";
  return s;
}

}  // namespace omsqz
