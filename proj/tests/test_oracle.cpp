#include <doctest.h>

#include "approx.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <vector>

#include "omsqz/core.hpp"
#include "omsqz/errors.hpp"
#include "omsqz/lineshape.hpp"
#include "omsqz/oracle.hpp"
#include "omsqz/units.hpp"

using namespace omsqz;

namespace {

std::vector<double> offsets_for(double gamma) {
  std::vector<double> v;
  for (int k = -200; k <= 200; ++k) v.push_back(0.05 * k * gamma);
  return v;
}

double max_rel(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]) / std::abs(b[i]));
  return m;
}

SystemParams physical_params() {
  SystemParams p;
  p.kappa = hz_to_rad(1.9e6);
  p.kappa_in = 0.5 * p.kappa;
  p.g0 = hz_to_rad(20.0);
  p.omega_m0 = hz_to_rad(530e3);
  p.gamma_m = hz_to_rad(0.083);
  p.delta = hz_to_rad(200e3);
  p.n_th = 2.75e5;
  return p;
}

// Width of a single Lorentzian from a weighted linear fit of 1/S against f^2.
double lorentz_width_hz(const SpectrumData& d, double guess_hz) {
  double sw = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double f = d.freq_hz[i];
    // the DC bin of a one-sided estimate is not doubled
    if (f <= 0.0 || f > 1.5 * guess_hz) continue;
    // 1/S has relative noise of constant size, so weight by S^2.
    const double x = f * f, y = 1.0 / d.psd[i], w = d.psd[i] * d.psd[i];
    sw += w; sx += w * x; sy += w * y; sxx += w * x * x; sxy += w * x * y;
  }
  const double slope = (sw * sxy - sx * sy) / (sw * sxx - sx * sx);
  const double icept = (sy - slope * sx) / sw;
  return 2.0 * std::sqrt(icept / slope);
}

}  // namespace

TEST_CASE("noise correlators") {
  const auto p = physical_params();
  const auto r = derive_from_field(p, IntracavityField::from_coupling(p.g0, hz_to_rad(2e3), 0.9), p.omega_m0);
  const auto c = NoiseCorrelators::from_rates(r);
  CHECK(c.c_bbdag - c.c_bdagb == approx(r.gamma_eff).epsilon(1e-9));
  CHECK(c.c_bdagb / r.gamma_eff == approx(r.n_bar).epsilon(1e-12));
  CHECK(c.c_anom == r.anomalous);
}

TEST_CASE("determinant factorizes") {
  const auto r = phenomenological_rates(hz_to_rad(530e3), 7.0, 0.6, 3.0, 1.1);
  std::mt19937_64 eng(3);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  const cplx i{0.0, 1.0};
  for (int k = 0; k < 100; ++k) {
    const double d = u(eng);
    const auto t = TransferMatrix::at(r, d);
    const cplx expect = (-i * d + 0.5 * r.gamma_plus) * (-i * d + 0.5 * r.gamma_minus);
    CHECK(std::abs(t.determinant - expect) < 1e-12 * std::abs(t.determinant));
  }
}

TEST_CASE("thermal-equivalent propagation reproduces the closed forms") {
  for (double s : {0.0, 0.3, 0.53, -0.4, 0.95}) {
    const double n = 5.8;
    const auto r = phenomenological_rates(hz_to_rad(530e3), hz_to_rad(100.0), s, n, 0.4);
    const auto grid = offsets_for(r.gamma_eff);
    const std::vector<double> thetas{-0.2, -0.2 + 0.5 * std::numbers::pi, 1.0};
    const auto out = propagate_spectra(r, NoiseCorrelators::thermal_equivalent(r.gamma_eff, n), grid, thetas);
    CHECK(max_rel(out.stokes, stokes_spectrum(r, n, grid)) < 1e-9);
    CHECK(max_rel(out.antistokes, antistokes_spectrum(r, n, grid)) < 1e-9);
    for (std::size_t q = 0; q < thetas.size(); ++q)
      CHECK(max_rel(out.quadratures[q], quadrature_spectrum(r, n, thetas[q], grid)) < 1e-9);
    CHECK(out.warnings.empty());
  }
}

TEST_CASE("without parametric drive the sidebands are single Lorentzians") {
  const auto r = phenomenological_rates(hz_to_rad(530e3), hz_to_rad(100.0), 0.0, 2.0);
  const auto grid = offsets_for(r.gamma_eff);
  const auto out = propagate_spectra(r, NoiseCorrelators::thermal_equivalent(r.gamma_eff, 2.0), grid);
  for (std::size_t b = 0; b < grid.size(); ++b)
    CHECK(out.stokes[b] / out.antistokes[b] == approx(1.5).epsilon(1e-12));
}

TEST_CASE("anomalous input noise alone makes the quadratures theta dependent") {
  const auto r = phenomenological_rates(hz_to_rad(530e3), hz_to_rad(100.0), 0.0, 2.0);
  const auto grid = offsets_for(r.gamma_eff);
  const std::vector<double> thetas{0.0, 0.7};
  auto noise = NoiseCorrelators::thermal_equivalent(r.gamma_eff, 2.0);
  noise.c_anom = cplx{0.3, 0.2} * r.gamma_eff;
  auto out = propagate_spectra(r, noise, grid, thetas);
  CHECK(max_rel(out.quadratures[0], out.quadratures[1]) > 1e-3);
  noise.c_anom = {};
  out = propagate_spectra(r, noise, grid, thetas);
  CHECK(max_rel(out.quadratures[0], out.quadratures[1]) < 1e-12);
}

TEST_CASE("physical correlators: quadratures exact, sidebands differ by an odd term") {
  const auto p = physical_params();
  const auto r = derive_from_field(p, IntracavityField::from_coupling(p.g0, hz_to_rad(2e3), 0.9, 0.2, 1.3),
                                   p.omega_m0);
  const auto grid = offsets_for(r.gamma_eff);
  const double ty = -0.5 * r.phi;
  const std::vector<double> thetas{ty, ty + 0.5 * std::numbers::pi};
  const auto out = propagate_spectra(r, NoiseCorrelators::from_rates(r), grid, thetas);
  CHECK(max_rel(out.quadratures[0], quadrature_spectrum(r, r.n_bar, ty, grid)) < 1e-9);
  CHECK(max_rel(out.quadratures[1], quadrature_spectrum(r, r.n_bar, thetas[1], grid)) < 1e-9);

  const auto st = stokes_spectrum(r, r.n_bar, grid);
  const std::size_t mid = grid.size() / 2;
  for (std::size_t k = 1; k <= mid; ++k) {
    const double even = 0.5 * (out.stokes[mid + k] + out.stokes[mid - k]);
    CHECK(std::abs(even - st[mid + k]) < 1e-9 * st[mid + k]);
  }
}

TEST_CASE("condition warning near threshold") {
  const auto r = phenomenological_rates(hz_to_rad(530e3), 1.0, 1.0 - 1e-10, 1.0);
  const std::vector<double> grid{0.0};
  const auto out = propagate_spectra(r, NoiseCorrelators::thermal_equivalent(1.0, 1.0), grid);
  CHECK_FALSE(out.warnings.empty());
}

TEST_CASE("SDE is stationary and deterministic") {
  const auto r = phenomenological_rates(hz_to_rad(530e3), 1.0, 0.0, 2.0);
  const auto a = sde_simulate(r, 2.0, 20000.0, 0.01, 11);
  const auto b = sde_simulate(r, 2.0, 20000.0, 0.01, 11);
  CHECK(a.samples == b.samples);
  double vr = 0.0, vi = 0.0;
  for (const auto& z : a.samples) { vr += z.real() * z.real(); vi += z.imag() * z.imag(); }
  vr /= a.samples.size();
  vi /= a.samples.size();
  // 20000 correlation times, so the standard error of each variance is ~1%.
  CHECK(vr == approx(1.25).epsilon(0.04));
  CHECK(vi == approx(1.25).epsilon(0.04));
}

TEST_CASE("SDE preconditions") {
  const auto r = phenomenological_rates(hz_to_rad(530e3), 1.0, 0.5, 2.0);
  CHECK_THROWS_AS(sde_simulate(r, 2.0, 1000.0, 0.1, 1), PreconditionError);
  CHECK_THROWS_AS(sde_simulate(r, 2.0, 10.0, 0.01, 1), PreconditionError);
}

TEST_CASE("SDE quadrature widths at s = 0.5") {
  const double phi = 0.6;
  const auto r = phenomenological_rates(hz_to_rad(530e3), 1.0, 0.5, 2.0, phi);
  const double dt = 0.01;
  const auto tr = sde_simulate(r, 2.0, 40000.0, dt, 5);
  std::vector<double> y(tr.samples.size()), x(tr.samples.size());
  const cplx rot = std::exp(cplx{0.0, -0.5 * phi});
  for (std::size_t k = 0; k < y.size(); ++k) {
    y[k] = (rot * tr.samples[k]).real();
    x[k] = -(rot * tr.samples[k]).imag();
  }
  const auto py = welch_psd(y, 1.0 / dt, 1 << 14);
  const auto px = welch_psd(x, 1.0 / dt, 1 << 14);
  const double gp = rad_to_hz(r.gamma_plus), gm = rad_to_hz(r.gamma_minus);
  CHECK(std::abs(lorentz_width_hz(py, gp) / gp - 1.0) < 0.05);
  CHECK(std::abs(lorentz_width_hz(px, gm) / gm - 1.0) < 0.05);

  double vy = 0.0, vx = 0.0;
  for (std::size_t k = 0; k < y.size(); ++k) { vy += y[k] * y[k]; vx += x[k] * x[k]; }
  vy /= y.size();
  vx /= x.size();
  CHECK(vy == approx(squeezed_variance(2.0, 0.5)).epsilon(0.05));
  CHECK(vx == approx(antisqueezed_variance(2.0, 0.5)).epsilon(0.05));
}

TEST_CASE("Welch: sinusoid power") {
  const double fs = 1000.0, f0 = 125.0, amp = 2.0;
  std::vector<double> x(1 << 16);
  for (std::size_t k = 0; k < x.size(); ++k) x[k] = amp * std::cos(kTwoPi * f0 * k / fs);
  const auto p = welch_psd(x, fs, 1024);
  double power = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (std::abs(p.freq_hz[i] - f0) < 5.0) power += p.psd[i] * p.resolution_hz;
  CHECK(power == approx(amp * amp / 2.0).epsilon(0.01));
  CHECK(p.resolution_hz == approx(fs / 1024));
}

TEST_CASE("Welch: white noise level") {
  const double fs = 200.0, sigma = 1.5;
  std::mt19937_64 eng(2);
  std::normal_distribution<double> nd(0.0, sigma);
  std::vector<double> x(1 << 18);
  for (auto& v : x) v = nd(eng);
  const auto p = welch_psd(x, fs, 512);
  double mean = 0.0;
  for (std::size_t i = 1; i + 1 < p.size(); ++i) mean += p.psd[i];
  mean /= p.size() - 2;
  CHECK(mean == approx(2.0 * sigma * sigma / fs).epsilon(0.02));

  std::vector<cplx> z(1 << 16);
  for (auto& v : z) v = {nd(eng), nd(eng)};
  const auto pz = welch_psd(z, fs, 256);
  CHECK(pz.freq_hz.front() == approx(-fs / 2));
  double mz = std::accumulate(pz.psd.begin(), pz.psd.end(), 0.0) / pz.size();
  CHECK(mz == approx(2.0 * sigma * sigma / fs).epsilon(0.02));
}

TEST_CASE("Welch: OU process has the analytic Lorentzian width") {
  const auto r = phenomenological_rates(hz_to_rad(530e3), 2.0, 0.0, 1.0);
  const double dt = 0.005;
  const auto tr = sde_simulate(r, 1.0, 20000.0, dt, 9);
  std::vector<double> re(tr.samples.size());
  for (std::size_t k = 0; k < re.size(); ++k) re[k] = tr.samples[k].real();
  const auto p = welch_psd(re, 1.0 / dt, 1 << 14);
  CHECK(lorentz_width_hz(p, rad_to_hz(2.0)) == approx(rad_to_hz(2.0)).epsilon(0.05));
}

TEST_CASE("Welch rejects short traces") {
  std::vector<double> x(1000, 1.0);
  CHECK_THROWS_AS(welch_psd(x, 1.0, 800), PreconditionError);
}

TEST_CASE("trace round trip") {
  const auto r = phenomenological_rates(hz_to_rad(530e3), 1.0, 0.2, 1.0);
  const auto t = sde_simulate(r, 1.0, 100.0, 0.05, 42);
  std::stringstream ss;
  write_trace(ss, t);
  const auto back = read_trace(ss);
  CHECK(back.samples == t.samples);
  CHECK(back.dt == t.dt);
  CHECK(back.seed == 42);
}
