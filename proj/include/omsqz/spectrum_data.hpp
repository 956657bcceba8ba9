#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace omsqz {

/// Averaged periodogram on a uniform grid. `mask[i] != 0` excludes bin i from fits.
struct SpectrumData {
  std::vector<double> freq_hz;
  std::vector<double> psd;
  int n_avg = 1;
  std::vector<std::uint8_t> mask;
  double resolution_hz = 0.0;
  std::map<std::string, std::string> metadata;  // written as "# key=value" header lines

  std::size_t size() const { return freq_hz.size(); }
  bool masked(std::size_t i) const { return !mask.empty() && mask[i] != 0; }

  /// Throws PreconditionError unless the grid is uniform (1e-9 relative),
  /// ascending, psd >= 0, sizes agree and n_avg >= 1.
  void validate() const;

  /// Grid f0, f0 + df, ..., n bins, zero psd, no mask.
  static SpectrumData uniform(double f0_hz, double df_hz, std::size_t n, int n_avg = 1);

  /// Averages k adjacent bins (trailing remainder dropped). The averaged
  /// estimate carries k * n_avg periodograms; a bin is masked if any input was.
  SpectrumData rebin(int k) const;

  /// Bins with f in [lo, hi].
  SpectrumData slice(double lo_hz, double hi_hz) const;
};

void write_csv(std::ostream& os, const SpectrumData& data);
SpectrumData read_csv(std::istream& is);
void save_csv(const std::string& path, const SpectrumData& data);
SpectrumData load_csv(const std::string& path);

}  // namespace omsqz
