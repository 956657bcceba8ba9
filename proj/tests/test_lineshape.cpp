#include <doctest.h>

#include "approx.hpp"

#include <cmath>
#include <vector>

#include "omsqz/core.hpp"
#include "omsqz/errors.hpp"
#include "omsqz/lineshape.hpp"
#include "omsqz/units.hpp"
#include "oracles.hpp"

using namespace omsqz;

namespace {

std::vector<double> linspace(double a, double b, int n) {
  std::vector<double> v(n);
  for (int i = 0; i < n; ++i) v[i] = a + (b - a) * i / (n - 1);
  return v;
}

// Integral over d(offset)/2pi after the substitution offset = (w/2) tan(u),
// midpoint rule in u; the integrand is smooth and bounded on (-pi/2, pi/2).
template <class F>
double numeric_area_hz(F&& f, double w) {
  const int n = 200000;
  const double h = std::numbers::pi / n;
  double acc = 0.0;
  for (int k = 0; k < n; ++k) {
    const double u = -0.5 * std::numbers::pi + (k + 0.5) * h;
    const double c = std::cos(u);
    acc += f(0.5 * w * std::tan(u)) * 0.5 * w / (c * c);
  }
  return acc * h / kTwoPi;
}

}  // namespace

TEST_CASE("Stokes sideband without squeezing") {
  const double ge = hz_to_rad(100.0);
  const auto r = phenomenological_rates(hz_to_rad(530e3), ge, 0.0, 5.8);
  const auto t = stokes_terms(r, 5.8);
  CHECK(t.area() == approx(6.8).epsilon(1e-14));
  const std::vector<double> zero{0.0};
  CHECK(stokes_spectrum(r, 5.8, zero)[0] == approx(4.0 * 6.8 / ge).epsilon(1e-14));
}

TEST_CASE("Stokes component areas at n=5.8, s=0.53") {
  const auto r = phenomenological_rates(hz_to_rad(530e3), hz_to_rad(100.0), 0.53, 5.8);
  const auto t = stokes_terms(r, 5.8);
  CHECK(t.area_narrow() == approx(testref::term_area(r.gamma_eff, 1.0 + 5.8 - 0.265, r.gamma_minus)).epsilon(1e-14));
  CHECK(t.area_narrow() == approx(6.952).epsilon(1e-3));
  CHECK(t.area_broad() == approx(2.309).epsilon(1e-3));

  // The closed-form areas agree with numerical integration of the sampled curve.
  CHECK(numeric_area_hz([&](double d) { return t.value(d); }, r.gamma_eff) ==
        approx(t.area()).epsilon(1e-8));
}

TEST_CASE("anti-Stokes with a negative broad component") {
  const auto r = phenomenological_rates(hz_to_rad(530e3), hz_to_rad(100.0), 0.4, 0.12);
  const auto t = antistokes_terms(r, 0.12);
  CHECK(t.weight_broad == approx(-0.08).epsilon(1e-12));
  const auto grid = linspace(-20.0 * r.gamma_eff, 20.0 * r.gamma_eff, 2001);
  const auto psd = antistokes_spectrum(r, 0.12, grid);
  for (double v : psd) CHECK(v >= 0.0);
  CHECK(stokes_terms(r, 0.12).area() - t.area() == approx(1.0).epsilon(1e-14));

  const auto r0 = phenomenological_rates(hz_to_rad(530e3), hz_to_rad(100.0), 0.0, 0.12);
  CHECK(antistokes_terms(r0, 0.12).area() == approx(0.12).epsilon(1e-14));
}

TEST_CASE("quadrature spectra and variances") {
  const double phi = 0.7;
  const auto r = phenomenological_rates(hz_to_rad(530e3), hz_to_rad(100.0), 0.53, 5.8, phi);
  const double n = 5.8;
  const double ty = -0.5 * phi;
  const double tx = ty + 0.5 * std::numbers::pi;

  for (double d : {0.0, 0.3 * r.gamma_eff, 2.0 * r.gamma_eff}) {
    const double syy = r.gamma_eff * (2 * n + 1) / (4.0 * (d * d + 0.25 * r.gamma_plus * r.gamma_plus));
    const double sxx = r.gamma_eff * (2 * n + 1) / (4.0 * (d * d + 0.25 * r.gamma_minus * r.gamma_minus));
    CHECK(quadrature_psd(r, n, ty, d) == approx(syy).epsilon(1e-13));
    CHECK(quadrature_psd(r, n, tx, d) == approx(sxx).epsilon(1e-13));
    for (double th : {0.1, 1.0, 2.5})
      CHECK(quadrature_psd(r, n, th, d) ==
            approx(testref::quadrature_from_transfer(r.gamma_eff, r.s, phi, n, th, d)).epsilon(1e-12));
  }

  CHECK(quadrature_variance(r, n, ty).variance == approx((2 * n + 1) / (4 * 1.53)).epsilon(1e-14));
  CHECK(squeezed_variance(n, 0.53) == approx(2.059).epsilon(1e-3));
  CHECK(antisqueezed_variance(n, 0.53) == approx(6.702).epsilon(1e-3));
  CHECK(zero_point_variance(n) == approx(3.15));

  const auto iso = phenomenological_rates(hz_to_rad(530e3), hz_to_rad(100.0), 0.0, n, phi);
  CHECK(quadrature_psd(iso, n, 0.2, 50.0) == approx(quadrature_psd(iso, n, 1.3, 50.0)).epsilon(1e-14));
}

TEST_CASE("quadrature spectrum integrates to the variance") {
  const auto r = phenomenological_rates(hz_to_rad(530e3), hz_to_rad(100.0), 0.53, 5.8, 0.0);
  const double area = numeric_area_hz([&](double d) { return quadrature_psd(r, 5.8, 0.0, d); }, r.gamma_eff);
  CHECK(area == approx(squeezed_variance(5.8, 0.53)).epsilon(1e-8));
  const double ax = numeric_area_hz([&](double d) { return quadrature_psd(r, 5.8, 0.5 * std::numbers::pi, d); }, r.gamma_eff);
  CHECK(ax == approx(antisqueezed_variance(5.8, 0.53)).epsilon(1e-8));
}

TEST_CASE("sideband ratios") {
  auto r = sideband_ratios(5.8, 0.0);
  CHECK(r.r0 == approx(1.0 + 1.0 / 5.8).epsilon(1e-15));
  CHECK(r.r0 == approx(1.172).epsilon(1e-3));
  CHECK(r.r_plus == r.r0);
  CHECK(r.r_minus == r.r0);

  r = sideband_ratios(5.8, 0.53);
  CHECK(r.r_plus == approx(7.065 / 5.535).epsilon(1e-12));
  CHECK(r.r_minus == approx(6.535 / 6.065).epsilon(1e-12));
  CHECK(r.r_plus == approx(1.276).epsilon(1e-3));
  CHECK(r.r_minus == approx(1.078).epsilon(1e-3));

  CHECK(sideband_ratios(0.12, 0.4).r_plus == approx(-16.5).epsilon(1e-12));
  CHECK(std::isinf(sideband_ratios(0.0, 0.0).r0));
}

TEST_CASE("squeezing criterion") {
  auto c = squeezing_criterion(0.12, 0.4);
  CHECK(c.below_zero_point);
  CHECK(c.margin == approx(0.16));
  CHECK_FALSE(squeezing_criterion(5.8, 0.53).below_zero_point);
  CHECK_FALSE(squeezing_criterion(0.0, 0.0).below_zero_point);
  CHECK(squeezed_variance(0.12, 0.4) < 0.25);
}

TEST_CASE("heterodyne composite") {
  const double wm = hz_to_rad(530e3);
  const double dlo = hz_to_rad(11e3);
  const auto r = phenomenological_rates(wm, hz_to_rad(100.0), 0.0, 5.8);
  const auto grid = linspace(530e3 - 12e3, 530e3 + 12e3, 24001);
  const auto comp = heterodyne_composite(r, 5.8, dlo, 1.0, 0.0, grid);
  REQUIRE(comp.model.components.size() == 4);
  CHECK(rad_to_hz(comp.model.components[0].center - comp.model.components[2].center) ==
        approx(22e3).epsilon(1e-12));
  const double a_st = comp.model.components[0].area + comp.model.components[1].area;
  const double a_as = comp.model.components[2].area + comp.model.components[3].area;
  CHECK(a_st / a_as == approx(1.172).epsilon(1e-3));
  CHECK(comp.model.components[0].width == comp.model.components[2].width);

  const auto flat = heterodyne_composite(r, 5.8, dlo, 0.0, 3.0, grid);
  for (double v : flat.psd) CHECK(v == 3.0);

  const auto narrow = linspace(530e3 - 5e3, 530e3 + 12e3, 101);
  CHECK_THROWS_AS(heterodyne_composite(r, 5.8, dlo, 1.0, 0.0, narrow), PreconditionError);
}
