#include "omsqz/spectrum_data.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

#include "omsqz/errors.hpp"

namespace omsqz {

void SpectrumData::validate() const {
  const std::size_t n = freq_hz.size();
  if (psd.size() != n) throw PreconditionError("SpectrumData: freq/psd size mismatch");
  if (!mask.empty() && mask.size() != n) throw PreconditionError("SpectrumData: mask size mismatch");
  if (n_avg < 1) throw PreconditionError("SpectrumData: n_avg must be >= 1");
  if (n < 2) throw PreconditionError("SpectrumData: need at least two bins");
  const double df = freq_hz[1] - freq_hz[0];
  if (!(df > 0.0)) throw PreconditionError("SpectrumData: grid must be ascending");
  if (std::abs(resolution_hz - df) > 1e-9 * df)
    throw PreconditionError("SpectrumData: resolution_hz differs from the grid spacing");
  for (std::size_t i = 1; i < n; ++i) {
    // Compare against the ideal grid so rounding does not accumulate.
    const double ideal = freq_hz[0] + static_cast<double>(i) * df;
    const double scale = std::max(std::abs(ideal), df);
    if (std::abs(freq_hz[i] - ideal) > 1e-9 * scale)
      throw PreconditionError(fmt::format("SpectrumData: grid not uniform at bin {}", i));
  }
  for (std::size_t i = 0; i < n; ++i)
    if (!(psd[i] >= 0.0)) throw PreconditionError(fmt::format("SpectrumData: negative psd at bin {}", i));
}

SpectrumData SpectrumData::uniform(double f0_hz, double df_hz, std::size_t n, int n_avg) {
  SpectrumData d;
  d.freq_hz.resize(n);
  for (std::size_t i = 0; i < n; ++i) d.freq_hz[i] = f0_hz + static_cast<double>(i) * df_hz;
  d.psd.assign(n, 0.0);
  d.n_avg = n_avg;
  d.resolution_hz = df_hz;
  return d;
}

SpectrumData SpectrumData::rebin(int k) const {
  if (k < 1) throw PreconditionError("rebin: factor must be >= 1");
  if (k == 1) return *this;
  const std::size_t m = size() / static_cast<std::size_t>(k);
  if (m < 2) throw PreconditionError("rebin: factor leaves fewer than two bins");
  SpectrumData out;
  out.n_avg = n_avg * k;
  out.resolution_hz = resolution_hz * k;
  out.metadata = metadata;
  out.freq_hz.resize(m);
  out.psd.resize(m);
  if (!mask.empty()) out.mask.assign(m, 0);
  for (std::size_t j = 0; j < m; ++j) {
    double f = 0.0, p = 0.0;
    for (int q = 0; q < k; ++q) {
      const std::size_t i = j * k + q;
      f += freq_hz[i];
      p += psd[i];
      if (masked(i)) out.mask[j] = 1;
    }
    out.freq_hz[j] = f / k;
    out.psd[j] = p / k;
  }
  return out;
}

SpectrumData SpectrumData::slice(double lo_hz, double hi_hz) const {
  SpectrumData out;
  out.n_avg = n_avg;
  out.resolution_hz = resolution_hz;
  out.metadata = metadata;
  for (std::size_t i = 0; i < size(); ++i) {
    if (freq_hz[i] < lo_hz || freq_hz[i] > hi_hz) continue;
    out.freq_hz.push_back(freq_hz[i]);
    out.psd.push_back(psd[i]);
    if (!mask.empty()) out.mask.push_back(mask[i]);
  }
  return out;
}

void write_csv(std::ostream& os, const SpectrumData& data) {
  os << fmt::format("# n_avg={}\n# resolution_hz={:.17g}\n", data.n_avg, data.resolution_hz);
  for (const auto& [k, v] : data.metadata) os << "# " << k << '=' << v << '\n';
  os << "freq_hz,psd,mask\n";
  for (std::size_t i = 0; i < data.size(); ++i)
    os << fmt::format("{:.17g},{:.17g},{}\n", data.freq_hz[i], data.psd[i], data.masked(i) ? 1 : 0);
}

SpectrumData read_csv(std::istream& is) {
  SpectrumData d;
  std::string line;
  bool header_seen = false;
  int lineno = 0;
  bool any_mask = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      std::string key = line.substr(1, eq - 1);
      key.erase(0, key.find_first_not_of(' '));
      const std::string value = line.substr(eq + 1);
      if (key == "n_avg") d.n_avg = std::stoi(value);
      else if (key == "resolution_hz") d.resolution_hz = std::stod(value);
      else d.metadata[key] = value;
      continue;
    }
    if (!header_seen) {
      if (line.rfind("freq_hz", 0) != 0)
        throw ConfigError(fmt::format("spectrum csv line {}: expected header 'freq_hz,psd[,mask]'", lineno));
      header_seen = true;
      continue;
    }
    std::istringstream ls(line);
    std::string f, p, m;
    if (!std::getline(ls, f, ',') || !std::getline(ls, p, ','))
      throw ConfigError(fmt::format("spectrum csv line {}: expected at least two columns", lineno));
    std::getline(ls, m, ',');
    try {
      d.freq_hz.push_back(std::stod(f));
      d.psd.push_back(std::stod(p));
    } catch (const std::exception&) {
      throw ConfigError(fmt::format("spectrum csv line {}: not a number", lineno));
    }
    const bool bit = !m.empty() && m != "0";
    any_mask = any_mask || bit;
    d.mask.push_back(bit ? 1 : 0);
  }
  if (!any_mask) d.mask.clear();
  if (d.resolution_hz == 0.0 && d.size() >= 2) d.resolution_hz = d.freq_hz[1] - d.freq_hz[0];
  d.validate();
  return d;
}

void save_csv(const std::string& path, const SpectrumData& data) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  write_csv(os, data);
}

SpectrumData load_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path);
  return read_csv(is);
}

}  // namespace omsqz
