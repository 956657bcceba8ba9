#include "omsqz/oracle.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "omsqz/errors.hpp"
#include "omsqz/fft.hpp"
#include "omsqz/rng.hpp"

namespace omsqz {

namespace {

constexpr double kConditionWarning = 1e8;

using Mat2 = Eigen::Matrix2cd;

Mat2 system_matrix(const DerivedRates& r, double offset) {
  const cplx i{0.0, 1.0};
  const cplx diag = -i * offset + 0.5 * r.gamma_eff;
  const double p = 0.5 * r.gamma_par;
  Mat2 m;
  m << diag, p * std::exp(i * r.phi), p * std::exp(-i * r.phi), diag;
  return m;
}

double condition_number(const Mat2& m) {
  Eigen::JacobiSVD<Mat2> svd(m);
  const auto& sv = svd.singularValues();
  return sv(1) > 0.0 ? sv(0) / sv(1) : std::numeric_limits<double>::infinity();
}

// <N_k N_l> for N = (n, n^dag).
Mat2 input_covariance(const NoiseCorrelators& c) {
  Mat2 m;
  m << c.c_anom, c.c_bbdag, c.c_bdagb, std::conj(c.c_anom);
  return m;
}

// sum_kl U_ik(w1) V_jl(w2) C_kl for fixed row indices (i, j).
cplx contract(const Mat2& t1, int i, const Mat2& t2, int j, const Mat2& c) {
  cplx acc{};
  for (int k = 0; k < 2; ++k)
    for (int l = 0; l < 2; ++l) acc += t1(i, k) * t2(j, l) * c(k, l);
  return acc;
}

Mat2 to_eigen(const TransferMatrix& t) {
  Mat2 m;
  m << t.entries[0][0], t.entries[0][1], t.entries[1][0], t.entries[1][1];
  return m;
}

}  // namespace

NoiseCorrelators NoiseCorrelators::from_rates(const DerivedRates& r) {
  NoiseCorrelators c;
  const double extra = r.gamma_eff * r.n_extra;
  c.c_bbdag = r.gamma_m * (r.n_th + 1.0) + r.a_minus + extra;
  c.c_bdagb = r.gamma_m * r.n_th + r.a_plus + extra;
  c.c_anom = r.anomalous;
  return c;
}

NoiseCorrelators NoiseCorrelators::thermal_equivalent(double gamma_eff, double n_bar) {
  return {gamma_eff * (n_bar + 1.0), gamma_eff * n_bar, cplx{}};
}

TransferMatrix TransferMatrix::at(const DerivedRates& rates, double offset) {
  const Mat2 m = system_matrix(rates, offset);
  Eigen::PartialPivLU<Mat2> lu(m);
  const Mat2 inv = lu.solve(Mat2::Identity());
  TransferMatrix t;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) t.entries[i][j] = inv(i, j);
  t.determinant = lu.determinant();
  return t;
}

PropagatedSpectra propagate_spectra(const DerivedRates& rates, const NoiseCorrelators& noise,
                                    std::span<const double> offsets, std::span<const double> thetas) {
  if (!(std::abs(rates.s) < 1.0) || !(rates.gamma_eff > 0.0))
    throw PreconditionError("propagate_spectra: need Gamma_eff > 0 and |s| < 1");
  const std::size_t n = offsets.size();
  PropagatedSpectra out;
  out.stokes.resize(n);
  out.antistokes.resize(n);
  out.quadratures.assign(thetas.size(), std::vector<double>(n));
  std::vector<double> cond(n);
  const Mat2 c = input_covariance(noise);
  const cplx i{0.0, 1.0};

  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t b = 0; b < count; ++b) {
    const double d = offsets[b];
    const Mat2 tp = to_eigen(TransferMatrix::at(rates, d));
    const Mat2 tm = to_eigen(TransferMatrix::at(rates, -d));
    cond[b] = condition_number(system_matrix(rates, d));
    out.stokes[b] = contract(tm, 0, tp, 1, c).real();
    out.antistokes[b] = contract(tm, 1, tp, 0, c).real();
    for (std::size_t q = 0; q < thetas.size(); ++q) {
      const std::array<cplx, 2> v{0.5 * std::exp(i * thetas[q]), 0.5 * std::exp(-i * thetas[q])};
      cplx raw_pos{}, raw_neg{};
      for (int a = 0; a < 2; ++a)
        for (int e = 0; e < 2; ++e) {
          raw_pos += v[a] * v[e] * contract(tp, a, tm, e, c);
          raw_neg += v[a] * v[e] * contract(tm, a, tp, e, c);
        }
      out.quadratures[q][b] = 0.5 * (raw_pos + raw_neg).real();
    }
  }
  out.max_condition = n ? *std::max_element(cond.begin(), cond.end()) : 0.0;
  if (out.max_condition > kConditionWarning)
    out.warnings.push_back(fmt::format(
        "system matrix condition number {:.3g} near the parametric threshold (|s| = {:.9f})",
        out.max_condition, std::abs(rates.s)));
  return out;
}

EnvelopeTrace sde_simulate(const DerivedRates& rates, double n_bar, double duration, double dt,
                           std::uint64_t seed) {
  if (!rates.stable()) throw InstabilityError(InstabilityError::Kind::Parametric,
                                              "sde_simulate: unstable parameters rejected");
  if (!(n_bar >= 0.0)) throw PreconditionError("sde_simulate: n_bar must be >= 0");
  const double fastest = std::max(rates.gamma_plus, rates.gamma_minus);
  const double slowest = std::min(rates.gamma_plus, rates.gamma_minus);
  if (!(dt > 0.0) || !(dt * fastest < 0.1))
    throw PreconditionError(fmt::format("sde_simulate: need dt * Gamma_max < 0.1 (got {:.3g})", dt * fastest));
  if (!(duration * slowest > 50.0))
    throw PreconditionError(fmt::format("sde_simulate: need duration * Gamma_min > 50 (got {:.3g})",
                                        duration * slowest));

  const std::size_t steps = static_cast<std::size_t>(std::ceil(duration / dt));
  const cplx i{0.0, 1.0};
  const double half_ge = 0.5 * rates.gamma_eff;
  const cplx coupling = 0.5 * rates.gamma_par * std::exp(i * rates.phi);
  const double sigma0_sq = 0.25 * (2.0 * n_bar + 1.0);
  const double noise_sd = std::sqrt(0.25 * rates.gamma_eff * (2.0 * n_bar + 1.0) * dt);

  auto eng = make_engine(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Stationary start: Y = Re(e^{-i phi/2} beta), X = -Im(e^{-i phi/2} beta).
  const double y0 = std::sqrt(sigma0_sq / (1.0 + rates.s)) * normal(eng);
  const double x0 = std::sqrt(sigma0_sq / (1.0 - rates.s)) * normal(eng);
  cplx beta = std::exp(0.5 * i * rates.phi) * cplx{y0, -x0};

  EnvelopeTrace trace;
  trace.dt = dt;
  trace.seed = seed;
  trace.samples.resize(steps + 1);
  trace.samples[0] = beta;
  for (std::size_t k = 1; k <= steps; ++k) {
    const double re = normal(eng);
    const double im = normal(eng);
    beta += (-half_ge * beta - coupling * std::conj(beta)) * dt + noise_sd * cplx{re, im};
    trace.samples[k] = beta;
  }
  return trace;
}

namespace {

std::vector<double> make_window(std::size_t len, Window w) {
  std::vector<double> out(len, 1.0);
  if (w == Window::Hann)
    for (std::size_t n = 0; n < len; ++n)
      out[n] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(len)));
  return out;
}

// Two-sided averaged periodogram in FFT bin order.
std::vector<double> averaged_periodogram(std::span<const cplx> x, double fs, std::size_t len,
                                         double overlap, Window window, int& n_seg) {
  if (len < 2 || len > x.size()) throw PreconditionError("welch_psd: segment length must be in [2, trace length]");
  if (!(overlap >= 0.0 && overlap < 1.0)) throw PreconditionError("welch_psd: overlap must be in [0, 1)");
  if (!(fs > 0.0)) throw PreconditionError("welch_psd: fs must be > 0");
  const auto step = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(len * (1.0 - overlap))));
  n_seg = static_cast<int>(1 + (x.size() - len) / step);
  if (n_seg < 2) throw PreconditionError("welch_psd: fewer than 2 segments");

  const auto w = make_window(len, window);
  double u = 0.0;
  for (double v : w) u += v * v;
  std::vector<double> acc(len, 0.0);
  std::vector<cplx> seg(len);
  for (int s = 0; s < n_seg; ++s) {
    const std::size_t off = static_cast<std::size_t>(s) * step;
    for (std::size_t n = 0; n < len; ++n) seg[n] = x[off + n] * w[n];
    const auto spec = fft(seg);
    for (std::size_t k = 0; k < len; ++k) acc[k] += std::norm(spec[k]);
  }
  const double norm = 1.0 / (fs * u * n_seg);
  for (auto& v : acc) v *= norm;
  return acc;
}

}  // namespace

SpectrumData welch_psd(std::span<const cplx> x, double fs, std::size_t len, double overlap, Window window) {
  int n_seg = 0;
  const auto p = averaged_periodogram(x, fs, len, overlap, window, n_seg);
  const double df = fs / static_cast<double>(len);
  const std::size_t half = (len + 1) / 2;
  SpectrumData d;
  d.n_avg = n_seg;
  d.resolution_hz = df;
  d.freq_hz.resize(len);
  d.psd.resize(len);
  for (std::size_t j = 0; j < len; ++j) {
    const std::size_t k = (j + half) % len;
    const double kk = k < half ? static_cast<double>(k) : static_cast<double>(k) - static_cast<double>(len);
    d.freq_hz[j] = kk * df;
    d.psd[j] = p[k];
  }
  return d;
}

SpectrumData welch_psd(std::span<const double> x, double fs, std::size_t len, double overlap, Window window) {
  std::vector<cplx> z(x.begin(), x.end());
  int n_seg = 0;
  const auto p = averaged_periodogram(z, fs, len, overlap, window, n_seg);
  const double df = fs / static_cast<double>(len);
  const std::size_t top = len / 2;
  SpectrumData d;
  d.n_avg = n_seg;
  d.resolution_hz = df;
  for (std::size_t k = 0; k <= top; ++k) {
    const bool single = k == 0 || (len % 2 == 0 && k == top);
    d.freq_hz.push_back(static_cast<double>(k) * df);
    d.psd.push_back(single ? p[k] : 2.0 * p[k]);
  }
  return d;
}

namespace {

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap64(v);
  return v;
}

}  // namespace

void write_trace(std::ostream& os, const EnvelopeTrace& t) {
  os << fmt::format("omsqz-trace v1 dt={:.17g} seed={} length={}\n", t.dt, t.seed, t.samples.size());
  for (const auto& z : t.samples) {
    const std::uint64_t re = to_little(std::bit_cast<std::uint64_t>(z.real()));
    const std::uint64_t im = to_little(std::bit_cast<std::uint64_t>(z.imag()));
    os.write(reinterpret_cast<const char*>(&re), 8);
    os.write(reinterpret_cast<const char*>(&im), 8);
  }
}

EnvelopeTrace read_trace(std::istream& is) {
  std::string header;
  if (!std::getline(is, header) || header.rfind("omsqz-trace v1 ", 0) != 0)
    throw ConfigError("trace: missing 'omsqz-trace v1' header");
  EnvelopeTrace t;
  std::size_t length = 0;
  std::istringstream hs(header.substr(15));
  std::string field;
  while (hs >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) continue;
    const auto key = field.substr(0, eq);
    const auto val = field.substr(eq + 1);
    if (key == "dt") t.dt = std::stod(val);
    else if (key == "seed") t.seed = std::stoull(val);
    else if (key == "length") length = std::stoull(val);
  }
  t.samples.resize(length);
  for (auto& z : t.samples) {
    std::uint64_t re = 0, im = 0;
    is.read(reinterpret_cast<char*>(&re), 8);
    is.read(reinterpret_cast<char*>(&im), 8);
    if (!is) throw ConfigError("trace: truncated payload");
    z = {std::bit_cast<double>(to_little(re)), std::bit_cast<double>(to_little(im))};
  }
  return t;
}

void save_trace(const std::string& path, const EnvelopeTrace& trace) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  write_trace(os, trace);
}

EnvelopeTrace load_trace(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path);
  return read_trace(is);
}

}  // namespace omsqz
