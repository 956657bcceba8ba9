#include "omsqz/fitter.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include <Eigen/Dense>
#include <boost/math/tools/minima.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "omsqz/errors.hpp"
#include "omsqz/rng.hpp"
#include "omsqz/units.hpp"

namespace omsqz {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kSMax = 0.999;
constexpr double kBoundaryS = 0.998;
// Fraction of a Lorentzian's area within +-5 FWHM: (2/pi) atan(10).
const double kFiveWidthCoverage = 2.0 / std::numbers::pi * std::atan(10.0);
constexpr int kMaxDampingTries = 60;
constexpr int kSmoothHalfWidth = 3;
constexpr double kMaxMaskedPeakFraction = 0.8;
constexpr double kStepTolerance = 1e-9;  // internal parameters are O(1)
constexpr int kProfileBits = 14;
constexpr double kProfileFloorS = 1e-3;
constexpr double kProfileGradientTolerance = 1e-8;
constexpr double kProfileStepTolerance = 1e-6;
constexpr double kProfileScanStop = 100.0;  // log-likelihood units
constexpr std::array<double, 11> kProfileGrid{kProfileFloorS, 0.02, 0.05, 0.1, 0.2, 0.35, 0.5, 0.65, 0.8, 0.9, kBoundaryS};
constexpr std::uintmax_t kMaxProfileEvaluations = 40;

// Unmasked bins only.
struct Bins {
  std::vector<double> f;
  std::vector<double> y;
  double n_avg = 1.0;
  double resolution = 0.0;
};

Bins usable_bins(const SpectrumData& d) {
  d.validate();
  Bins b;
  b.n_avg = d.n_avg;
  b.resolution = d.resolution_hz;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.masked(i)) continue;
    b.f.push_back(d.freq_hz[i]);
    b.y.push_back(d.psd[i]);
  }
  return b;
}

struct LorentzEval {
  double v, dc, dw, da;
};

// area * w / (2pi ((f - c)^2 + w^2/4)) and its partials.
inline LorentzEval lorentz_hz(double f, double c, double w, double a) {
  const double d = f - c;
  const double q = d * d + 0.25 * w * w;
  const double base = w / (kTwoPi * q);
  LorentzEval e{};
  e.da = base;
  e.v = a * base;
  e.dc = e.v * 2.0 * d / q;
  e.dw = a / (kTwoPi * q) * (1.0 - 0.5 * w * w / q);
  return e;
}

inline double lorentz_value(double f, double c, double w, double a) {
  const double d = f - c;
  return a * w / (kTwoPi * (d * d + 0.25 * w * w));
}

// Internal parametrizations. Centers are offsets from a reference, areas and
// the floor are in units of a scale fixed at initialization.

struct SinglePairModel {
  static constexpr int P = 6;  // dc_st, dc_as, ln W, a_st, a_as, floor
  using Vec = Eigen::Matrix<double, P, 1>;
  double ref_st = 0.0, ref_as = 0.0, area_scale = 1.0, floor_scale = 1.0;

  double eval(const Vec& p, double f, Vec* g) const {
    const double w = std::exp(p[2]);
    const auto st = lorentz_hz(f - ref_st, p[0], w, area_scale * p[3]);
    const auto as = lorentz_hz(f - ref_as, p[1], w, area_scale * p[4]);
    if (g) {
      (*g)[0] = st.dc;
      (*g)[1] = as.dc;
      (*g)[2] = w * (st.dw + as.dw);
      (*g)[3] = area_scale * st.da;
      (*g)[4] = area_scale * as.da;
      (*g)[5] = floor_scale;
    }
    return floor_scale * p[5] + st.v + as.v;
  }
};

struct DoublePairModel {
  static constexpr int P = 8;  // dc_st, dc_as, xi, a_st_n, a_st_b, a_as_n, a_as_b, floor
  using Vec = Eigen::Matrix<double, P, 1>;
  double ref_st = 0.0, ref_as = 0.0, gamma = 0.0, area_scale = 1.0, floor_scale = 1.0;

  double eval(const Vec& p, double f, Vec* g) const {
    const double t = std::tanh(p[2]);
    const double s = kSMax * t;
    const double ds = kSMax * (1.0 - t * t);
    const double wn = gamma * (1.0 - s);
    const double wb = gamma * (1.0 + s);
    // Offsets from the references are exact, which keeps the centers precise.
    const double fs = f - ref_st;
    const double fa = f - ref_as;
    const auto sn = lorentz_hz(fs, p[0], wn, area_scale * p[3]);
    const auto sb = lorentz_hz(fs, p[0], wb, area_scale * p[4]);
    const auto an = lorentz_hz(fa, p[1], wn, area_scale * p[5]);
    const auto ab = lorentz_hz(fa, p[1], wb, area_scale * p[6]);
    if (g) {
      (*g)[0] = sn.dc + sb.dc;
      (*g)[1] = an.dc + ab.dc;
      (*g)[2] = gamma * ds * (sb.dw + ab.dw - sn.dw - an.dw);
      (*g)[3] = area_scale * sn.da;
      (*g)[4] = area_scale * sb.da;
      (*g)[5] = area_scale * an.da;
      (*g)[6] = area_scale * ab.da;
      (*g)[7] = floor_scale;
    }
    return floor_scale * p[7] + sn.v + sb.v + an.v + ab.v;
  }
};

// The double pair at a fixed s, for the profile likelihood. Areas enter as
// sum and difference of the narrow and broad terms: as s -> 0 the difference
// column vanishes instead of becoming collinear with the sum.
struct FixedSModel {
  static constexpr int P = 7;  // dc_st, dc_as, A_st, D_st, A_as, D_as, floor
  using Vec = Eigen::Matrix<double, P, 1>;
  DoublePairModel full;
  double xi = 0.0;

  static DoublePairModel::Vec expand(const Vec& p, double xi) {
    DoublePairModel::Vec q;
    q << p[0], p[1], xi, 0.5 * (p[2] - p[3]), 0.5 * (p[2] + p[3]), 0.5 * (p[4] - p[5]), 0.5 * (p[4] + p[5]), p[6];
    return q;
  }

  double eval(const Vec& p, double f, Vec* g) const {
    DoublePairModel::Vec gf;
    const double mu = full.eval(expand(p, xi), f, g ? &gf : nullptr);
    if (g)
      *g << gf[0], gf[1], 0.5 * (gf[3] + gf[4]), 0.5 * (gf[4] - gf[3]), 0.5 * (gf[5] + gf[6]),
          0.5 * (gf[6] - gf[5]), gf[7];
    return mu;
  }
};

struct SinglePeakModel {
  static constexpr int P = 4;  // dc, ln W, a, floor
  using Vec = Eigen::Matrix<double, P, 1>;
  double ref = 0.0, area_scale = 1.0, floor_scale = 1.0;

  double eval(const Vec& p, double f, Vec* g) const {
    const double w = std::exp(p[1]);
    const auto l = lorentz_hz(f - ref, p[0], w, area_scale * p[2]);
    if (g) {
      (*g)[0] = l.dc;
      (*g)[1] = w * l.dw;
      (*g)[2] = area_scale * l.da;
      (*g)[3] = floor_scale;
    }
    return floor_scale * p[3] + l.v;
  }
};

template <class M>
struct EngineResult {
  typename M::Vec p;
  Eigen::Matrix<double, M::P, M::P> fisher;
  double cost = 0.0;
  int iterations = 0;
  double gradient_norm = 0.0;
  bool converged = false;
  bool stalled = false;
};

// Gamma negative log-likelihood n sum(y/mu + log mu); +inf if mu <= 0 anywhere.
template <class M>
double nll(const M& model, const typename M::Vec& p, const Bins& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < b.f.size(); ++i) {
    const double mu = model.eval(p, b.f[i], nullptr);
    if (!(mu > 0.0)) return std::numeric_limits<double>::infinity();
    acc += b.y[i] / mu + std::log(mu);
  }
  return b.n_avg * acc;
}

template <class M>
double nll_with_derivatives(const M& model, const typename M::Vec& p, const Bins& b, typename M::Vec& grad,
                            Eigen::Matrix<double, M::P, M::P>& fisher) {
  typename M::Vec g;
  grad.setZero();
  fisher.setZero();
  double acc = 0.0;
  for (std::size_t i = 0; i < b.f.size(); ++i) {
    const double mu = model.eval(p, b.f[i], &g);
    if (!(mu > 0.0)) return std::numeric_limits<double>::infinity();
    const double inv = 1.0 / mu;
    acc += b.y[i] * inv + std::log(mu);
    grad += ((mu - b.y[i]) * inv * inv) * g;
    fisher.template selfadjointView<Eigen::Lower>().rankUpdate(g, inv * inv);
  }
  fisher = fisher.template selfadjointView<Eigen::Lower>();
  grad *= b.n_avg;
  fisher *= b.n_avg;
  return b.n_avg * acc;
}

template <class Vec, class Mat>
double scaled_gradient_norm(const Vec& g, const Mat& fisher, std::size_t n) {
  // Directions without Fisher information (the s direction at s = 0) only
  // carry rounding noise and are left out.
  const double cutoff = 1e-20 * fisher.diagonal().maxCoeff();
  double acc = 0.0;
  for (int k = 0; k < g.size(); ++k) {
    const double d = fisher(k, k);
    if (d > cutoff) acc += g[k] * g[k] / d;
  }
  return std::sqrt(acc / static_cast<double>(n));
}

// Levenberg-Marquardt on the Fisher-scoring normal equations. Each accepted
// step does not increase the likelihood objective.
template <class M>
EngineResult<M> run_engine(const M& model, typename M::Vec p, const Bins& b, const FitOptions& opt,
                           double step_tolerance = kStepTolerance, double lambda = 1e-3) {
  using Vec = typename M::Vec;
  using Mat = Eigen::Matrix<double, M::P, M::P>;
  EngineResult<M> r;
  Vec grad;
  Mat fisher;
  double cost = nll_with_derivatives(model, p, b, grad, fisher);
  if (!std::isfinite(cost)) throw FitError("initial guess gives a non-positive model");
  // Objective differences below this are rounding noise; there the quadratic
  // model is trusted and a step is accepted without a strict decrease.
  const double rounding = 64.0 * std::numeric_limits<double>::epsilon() *
                          (std::abs(cost) + b.n_avg * static_cast<double>(b.f.size()));
  double last_step = std::numeric_limits<double>::infinity();
  int it = 0;
  for (; it < opt.max_iterations; ++it) {
    r.gradient_norm = scaled_gradient_norm(grad, fisher, b.f.size());
    // Along the s = 0 valley the objective is quartic and the gradient test
    // alone stops early, so the last step must also be negligible.
    if (r.gradient_norm <= opt.gradient_tolerance && last_step <= step_tolerance) {
      r.converged = true;
      break;
    }
    bool accepted = false;
    for (int t = 0; t < kMaxDampingTries; ++t) {
      // Jacobi-scaled damped system; the s direction loses curvature as s -> 0.
      Vec d = fisher.diagonal().cwiseMax(std::numeric_limits<double>::min()).cwiseSqrt().cwiseInverse();
      Mat a = d.asDiagonal() * fisher * d.asDiagonal();
      a.diagonal().array() += lambda;
      const Vec step = d.asDiagonal() * a.ldlt().solve(-(d.asDiagonal() * grad));
      const Vec q = p + step;
      const double c = nll(model, q, b);
      const double predicted = -0.5 * grad.dot(step);
      const bool within_rounding = predicted < rounding && c <= cost + rounding;
      if (std::isfinite(c) && (c <= cost || within_rounding)) {
        p = q;
        last_step = step.cwiseAbs().maxCoeff();
        accepted = true;
        lambda = std::max(lambda * 0.3, 1e-15);
        break;
      }
      lambda *= 8.0;
    }
    if (!accepted) {
      r.stalled = true;
      cost = nll_with_derivatives(model, p, b, grad, fisher);
      r.gradient_norm = scaled_gradient_norm(grad, fisher, b.f.size());
      r.converged = r.gradient_norm <= opt.gradient_tolerance;
      ++it;
      break;
    }
    cost = nll_with_derivatives(model, p, b, grad, fisher);
  }
  if (it == opt.max_iterations && !r.converged) {
    r.gradient_norm = scaled_gradient_norm(grad, fisher, b.f.size());
    r.converged = r.gradient_norm <= opt.gradient_tolerance;
  }
  r.p = p;
  r.fisher = fisher;
  r.cost = cost;
  r.iterations = it;
  return r;
}

template <class M>
Eigen::MatrixXd covariance(const EngineResult<M>& r) {
  const Eigen::MatrixXd f = r.fisher;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(f);
  if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
    Eigen::MatrixXd c = ldlt.solve(Eigen::MatrixXd::Identity(f.rows(), f.cols()));
    if (c.allFinite()) return c;
  }
  return f.completeOrthogonalDecomposition().pseudoInverse();
}

template <class M>
void goodness(const M& model, const typename M::Vec& p, const Bins& b, FitResult& out) {
  double pearson = 0.0, dev = 0.0;
  for (std::size_t i = 0; i < b.f.size(); ++i) {
    const double mu = model.eval(p, b.f[i], nullptr);
    const double r = (b.y[i] - mu) / mu;
    pearson += r * r;
    dev += r - (b.y[i] > 0.0 ? std::log(b.y[i] / mu) : 0.0);
  }
  const double dof = static_cast<double>(b.f.size()) - M::P;
  out.chi2_reduced = dof > 0.0 ? b.n_avg * pearson / dof : std::numeric_limits<double>::quiet_NaN();
  out.deviance = 2.0 * b.n_avg * dev;
  out.n_bins = static_cast<int>(b.f.size());
}

// Starting values from a smoothed copy of the data.
struct Guess {
  std::vector<double> smooth;
  double floor = 0.0;
};

Guess smooth_and_floor(const Bins& b) {
  Guess g;
  const auto n = static_cast<long>(b.y.size());
  g.smooth.resize(b.y.size());
  for (long i = 0; i < n; ++i) {
    const long lo = std::max(0L, i - kSmoothHalfWidth), hi = std::min(n - 1, i + kSmoothHalfWidth);
    double acc = 0.0;
    for (long k = lo; k <= hi; ++k) acc += b.y[k];
    g.smooth[i] = acc / static_cast<double>(hi - lo + 1);
  }
  auto sorted = g.smooth;
  const auto q = sorted.begin() + static_cast<long>(0.1 * static_cast<double>(sorted.size()));
  std::nth_element(sorted.begin(), q, sorted.end());
  g.floor = *q;
  return g;
}

std::size_t nearest_bin(const Bins& b, double f) {
  const auto it = std::lower_bound(b.f.begin(), b.f.end(), f);
  if (it == b.f.begin()) return 0;
  if (it == b.f.end()) return b.f.size() - 1;
  const auto i = static_cast<std::size_t>(it - b.f.begin());
  return (f - b.f[i - 1] < b.f[i] - f) ? i - 1 : i;
}

// Highest smoothed bin outside |f - exclude| < radius.
std::size_t highest_bin(const Bins& b, const Guess& g, std::optional<double> exclude, double radius) {
  std::size_t best = b.f.size();
  for (std::size_t i = 0; i < b.f.size(); ++i) {
    if (exclude && std::abs(b.f[i] - *exclude) < radius) continue;
    if (best == b.f.size() || g.smooth[i] > g.smooth[best]) best = i;
  }
  if (best == b.f.size()) throw FitError("no bins left to locate a second peak");
  return best;
}

double fwhm_at(const Bins& b, const Guess& g, std::size_t i) {
  const double half = g.floor + 0.5 * (g.smooth[i] - g.floor);
  std::size_t lo = i, hi = i;
  while (lo > 0 && g.smooth[lo - 1] > half) --lo;
  while (hi + 1 < b.f.size() && g.smooth[hi + 1] > half) ++hi;
  return std::max(b.f[hi] - b.f[lo], b.resolution);
}

// Trapezoid area above the floor over +-5 FWHM, corrected for the Lorentzian tails.
double area_estimate(const Bins& b, double floor, double center, double fwhm) {
  double acc = 0.0;
  for (std::size_t i = 1; i < b.f.size(); ++i) {
    if (std::abs(b.f[i - 1] - center) > 5.0 * fwhm || std::abs(b.f[i] - center) > 5.0 * fwhm) continue;
    acc += 0.5 * (b.y[i - 1] + b.y[i] - 2.0 * floor) * (b.f[i] - b.f[i - 1]);
  }
  return acc / kFiveWidthCoverage;
}

struct PairGuess {
  double c_st = 0.0, c_as = 0.0, width = 0.0, a_st = 0.0, a_as = 0.0, floor = 0.0;
};

PairGuess guess_pair(const Bins& b, const FitHint& hint) {
  const auto g = smooth_and_floor(b);
  PairGuess out;
  double w1 = 0.0, w2 = 0.0, c1 = 0.0, c2 = 0.0;
  if (hint.center_stokes_hz && hint.center_antistokes_hz) {
    c1 = *hint.center_stokes_hz;
    c2 = *hint.center_antistokes_hz;
    w1 = fwhm_at(b, g, nearest_bin(b, c1));
    w2 = fwhm_at(b, g, nearest_bin(b, c2));
  } else {
    const auto i1 = highest_bin(b, g, std::nullopt, 0.0);
    w1 = fwhm_at(b, g, i1);
    c1 = b.f[i1];
    const double span = b.f.back() - b.f.front();
    const auto i2 = highest_bin(b, g, c1, std::min(5.0 * w1, 0.25 * span));
    w2 = fwhm_at(b, g, i2);
    c2 = b.f[i2];
    if (c2 > c1) {
      std::swap(c1, c2);
      std::swap(w1, w2);
    }
  }
  out.c_st = c1;
  out.c_as = c2;
  out.width = hint.gamma_eff_hz ? *hint.gamma_eff_hz : 0.5 * (w1 + w2);
  out.floor = hint.floor ? *hint.floor : g.floor;
  out.a_st = area_estimate(b, out.floor, c1, out.width);
  out.a_as = area_estimate(b, out.floor, c2, out.width);
  return out;
}

double positive_scale(double v, double fallback) {
  const double a = std::abs(v);
  return a > 0.0 && std::isfinite(a) ? a : fallback;
}

double peak_height_scale(const Bins& b) {
  const double m = *std::max_element(b.y.begin(), b.y.end());
  return m > 0.0 ? m : 1.0;
}

// Value and variance of sum(num)/sum(den) from a covariance over user parameters.
std::pair<double, double> ratio_with_variance(const Eigen::VectorXd& v, const Eigen::MatrixXd& cov,
                                              const std::vector<int>& num, const std::vector<int>& den) {
  double a = 0.0, b = 0.0;
  for (int k : num) a += v[k];
  for (int k : den) b += v[k];
  const double r = a / b;
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(v.size());
  for (int k : num) grad[k] += 1.0 / b;
  for (int k : den) grad[k] -= a / (b * b);
  return {r, grad.dot(cov * grad)};
}

struct WeightedArea {
  int index;
  double weight;
  double dweight;  // derivative of the weight with respect to parameter `wrt`
};

// Same for sum(w v) / sum(w v) with weights depending on one further parameter.
std::pair<double, double> ratio_with_variance(const Eigen::VectorXd& v, const Eigen::MatrixXd& cov,
                                              const std::vector<WeightedArea>& num,
                                              const std::vector<WeightedArea>& den, int wrt) {
  double a = 0.0, b = 0.0, da = 0.0, db = 0.0;
  for (const auto& t : num) a += t.weight * v[t.index], da += t.dweight * v[t.index];
  for (const auto& t : den) b += t.weight * v[t.index], db += t.dweight * v[t.index];
  const double r = a / b;
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(v.size());
  for (const auto& t : num) grad[t.index] += t.weight / b;
  for (const auto& t : den) grad[t.index] -= t.weight * a / (b * b);
  grad[wrt] += (da * b - a * db) / (b * b);
  return {r, grad.dot(cov * grad)};
}

void require_bins(const Bins& b, int params, const char* who) {
  if (static_cast<int>(b.f.size()) <= params)
    throw FitError(fmt::format("{}: {} unmasked bins for {} parameters", who, b.f.size(), params));
}

void finish_engine_flags(FitResult& out, bool converged, bool stalled, int iters, double gnorm,
                         const FitOptions& opt) {
  out.converged = converged;
  out.n_iter = iters;
  out.gradient_norm = gnorm;
  if (!converged)
    out.warnings.push_back(fmt::format("not converged: scaled gradient {:.3g} > {:.3g} after {} iterations{}",
                                       gnorm, opt.gradient_tolerance, iters, stalled ? " (stalled)" : ""));
}

void store(FitResult& out, const std::vector<std::string>& names, const Eigen::VectorXd& v,
           const Eigen::MatrixXd& cov) {
  for (std::size_t k = 0; k < names.size(); ++k) {
    out.params[names[k]] = v[static_cast<int>(k)];
    const double var = cov(static_cast<int>(k), static_cast<int>(k));
    out.sigmas[names[k]] = var > 0.0 ? std::sqrt(var) : 0.0;
  }
}

// Warns when most of the bins within one FWHM of a peak are masked.
// Rejects the fit when a peak has no unmasked data under it.
void check_peak_coverage(const SpectrumData& d, double center, double fwhm, const char* which, FitResult& out) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.masked(i)) continue;
    lo = std::min(lo, d.freq_hz[i]);
    hi = std::max(hi, d.freq_hz[i]);
  }
  if (!(center >= lo && center <= hi)) {
    out.warnings.push_back(fmt::format("{}peak center {:.6g} Hz lies outside the unmasked data, fit rejected", which,
                                       center));
    out.converged = false;
    return;
  }
  if (d.mask.empty()) return;
  std::size_t total = 0, masked = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (std::abs(d.freq_hz[i] - center) > fwhm) continue;
    ++total;
    masked += d.masked(i) ? 1 : 0;
  }
  if (total == 0 || masked == total) {
    out.warnings.push_back(fmt::format("no unmasked bins within one width of the {}peak, fit rejected", which));
    out.converged = false;
    return;
  }
  if (masked > kMaxMaskedPeakFraction * static_cast<double>(total))
    out.warnings.push_back(fmt::format("{:.0f}% of the {}peak region is masked; uncertainties are inflated",
                                       100.0 * static_cast<double>(masked) / static_cast<double>(total), which));
}

void infer_occupancy(FitResult& out, double r0, double r0_var) {
  if (r0 > 1.0 && std::isfinite(r0)) {
    out.n_bar_inferred = 1.0 / (r0 - 1.0);
    out.sigmas["n_bar"] = std::sqrt(std::max(r0_var, 0.0)) / ((r0 - 1.0) * (r0 - 1.0));
  } else {
    out.warnings.push_back(fmt::format("R0 = {:.6g} <= 1, occupancy not inferred", r0));
  }
}

}  // namespace

FitResult fit_single_pair(const SpectrumData& data, const FitHint& hint, const FitOptions& opt) {
  const auto b = usable_bins(data);
  require_bins(b, SinglePairModel::P, "fit_single_pair");
  const auto g = guess_pair(b, hint);

  SinglePairModel m;
  m.ref_st = g.c_st;
  m.ref_as = g.c_as;
  m.area_scale = positive_scale(std::max(g.a_st, g.a_as), peak_height_scale(b) * b.resolution);
  m.floor_scale = positive_scale(g.floor, 1e-3 * peak_height_scale(b));
  SinglePairModel::Vec p;
  p << 0.0, 0.0, std::log(g.width), std::max(g.a_st, 1e-3 * m.area_scale) / m.area_scale,
      std::max(g.a_as, 1e-3 * m.area_scale) / m.area_scale, std::max(g.floor, 0.0) / m.floor_scale;
  const auto r = run_engine(m, p, b, opt);

  FitResult out;
  out.model = "single_pair";
  finish_engine_flags(out, r.converged, r.stalled, r.iterations, r.gradient_norm, opt);
  goodness(m, r.p, b, out);

  const double w = std::exp(r.p[2]);
  Eigen::VectorXd v(6);
  v << m.ref_st + r.p[0], m.ref_as + r.p[1], w, m.area_scale * r.p[3], m.area_scale * r.p[4],
      m.floor_scale * r.p[5];
  Eigen::VectorXd jac(6);
  jac << 1.0, 1.0, w, m.area_scale, m.area_scale, m.floor_scale;
  const Eigen::MatrixXd cov = jac.asDiagonal() * covariance(r) * jac.asDiagonal();
  store(out, {"center_stokes_hz", "center_antistokes_hz", "gamma_eff_hz", "area_stokes", "area_antistokes", "floor"},
        v, cov);

  if (v[4] > 0.0 && v[3] > 0.0) {
    const auto [r0, var] = ratio_with_variance(v, cov, {3}, {4});
    const double c = opt.ratio_correction;
    Ratios rt;
    rt.r0 = c * r0;
    rt.r_plus = rt.r_minus = rt.r0;
    out.ratios = rt;
    out.sigmas["r0"] = c * std::sqrt(std::max(var, 0.0));
    infer_occupancy(out, rt.r0, c * c * var);
  } else {
    out.warnings.push_back("non-positive sideband area, fit rejected");
    out.converged = false;
  }
  if (v[2] < 0.01 * b.resolution) out.warnings.push_back("fitted width below 1% of the bin spacing");
  check_peak_coverage(data, v[0], v[2], "Stokes ", out);
  check_peak_coverage(data, v[1], v[2], "anti-Stokes ", out);
  return out;
}

FitResult fit_double_pair(const SpectrumData& data, double gamma_eff_hz_fixed, const FitHint& hint,
                          const FitOptions& opt) {
  if (!(gamma_eff_hz_fixed > 0.0) || !std::isfinite(gamma_eff_hz_fixed))
    throw PreconditionError("fit_double_pair: fixed Gamma_eff must be > 0");
  const auto b = usable_bins(data);
  require_bins(b, DoublePairModel::P, "fit_double_pair");
  FitHint h = hint;
  h.gamma_eff_hz = gamma_eff_hz_fixed;
  const auto g = guess_pair(b, h);

  DoublePairModel m;
  m.ref_st = g.c_st;
  m.ref_as = g.c_as;
  m.gamma = gamma_eff_hz_fixed;
  m.area_scale = positive_scale(std::max(g.a_st, g.a_as), peak_height_scale(b) * b.resolution);
  m.floor_scale = positive_scale(g.floor, 1e-3 * peak_height_scale(b));
  const double a_st = std::max(g.a_st, 1e-3 * m.area_scale) / m.area_scale;
  const double a_as = std::max(g.a_as, 1e-3 * m.area_scale) / m.area_scale;
  FixedSModel::Vec start;
  start << 0.0, 0.0, a_st, 0.0, a_as, 0.0, std::max(g.floor, 0.0) / m.floor_scale;

  // Profile likelihood over s. With four free areas the limit s -> 0+ is
  // degenerate: a diverging narrow/broad difference acts as an independent
  // width change of each sideband. The profile is therefore scanned on
  // [kProfileFloorS, kBoundaryS] and a minimum at the lower end is reported
  // as s = 0 with evenly split areas.
  FixedSModel pm{m, 0.0};
  FitOptions inner_opt = opt;
  inner_opt.gradient_tolerance = std::max(opt.gradient_tolerance, kProfileGradientTolerance);
  int iterations = 0;
  FixedSModel::Vec warm = start;
  auto profile_fit = [&](double t) {
    pm.xi = std::atanh(t / kSMax);
    EngineResult<FixedSModel> r;
    try {
      r = run_engine(pm, warm, b, inner_opt, kProfileStepTolerance, 1e-8);
    } catch (const FitError&) {
      r = run_engine(pm, start, b, inner_opt, kProfileStepTolerance);
    }
    iterations += r.iterations;
    return r;
  };
  auto profile = [&](double t) {
    const auto r = profile_fit(t);
    if (r.converged) warm = r.p;
    return r.cost;
  };
  // Coarse scan, then Brent inside the bracket around the best grid point.
  // The scan stops once the profile has risen far above its running minimum.
  std::vector<double> scan;
  for (double t : kProfileGrid) {
    scan.push_back(profile(t));
    if (scan.back() > *std::min_element(scan.begin(), scan.end()) + kProfileScanStop) break;
  }
  const auto k = static_cast<std::size_t>(std::min_element(scan.begin(), scan.end()) - scan.begin());
  const double lo = kProfileGrid[k == 0 ? 0 : k - 1];
  const double hi = kProfileGrid[std::min(k + 1, scan.size() - 1)];
  std::uintmax_t brent_iter = kMaxProfileEvaluations;
  auto [t_best, cost_best] = boost::math::tools::brent_find_minima(profile, lo, hi, kProfileBits, brent_iter);
  if (scan[k] < cost_best) {
    t_best = kProfileGrid[k];
    cost_best = scan[k];
  }
  const double cost_floor = scan.front();

  EngineResult<DoublePairModel> r;
  if (cost_floor <= cost_best) {
    pm.xi = 0.0;
    auto zero = run_engine(pm, start, b, opt);
    iterations += zero.iterations;
    zero.p[3] = zero.p[5] = 0.0;  // the split carries no information at s = 0
    FitOptions evaluate_only = opt;
    evaluate_only.max_iterations = 0;
    r = run_engine(m, FixedSModel::expand(zero.p, 0.0), b, evaluate_only);
    r.converged = r.converged && zero.converged;
  } else {
    const auto inner = profile_fit(t_best);
    r = run_engine(m, FixedSModel::expand(inner.p, pm.xi), b, opt);
  }
  iterations += r.iterations;
  r.iterations = iterations;

  FitResult out;
  out.model = "double_pair";
  finish_engine_flags(out, r.converged, r.stalled, r.iterations, r.gradient_norm, opt);
  goodness(m, r.p, b, out);

  const double t = std::tanh(r.p[2]);
  const double s_signed = kSMax * t;
  // User vector: c_st, c_as, s, a_st_n, a_st_b, a_as_n, a_as_b, floor.
  Eigen::VectorXd v(8);
  v << m.ref_st + r.p[0], m.ref_as + r.p[1], s_signed, m.area_scale * r.p[3], m.area_scale * r.p[4],
      m.area_scale * r.p[5], m.area_scale * r.p[6], m.floor_scale * r.p[7];
  Eigen::VectorXd jac(8);
  jac << 1.0, 1.0, kSMax * (1.0 - t * t), m.area_scale, m.area_scale, m.area_scale, m.area_scale,
      m.floor_scale;
  Eigen::MatrixXd cov = jac.asDiagonal() * covariance(r) * jac.asDiagonal();

  // The likelihood is symmetric under s -> -s with narrow and broad swapped;
  // report the folded branch.
  if (s_signed < 0.0) {
    Eigen::VectorXi order(8);
    order << 0, 1, 2, 4, 3, 6, 5, 7;
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(order);
    v = perm.transpose() * v;
    cov = perm.transpose() * cov * perm;
    v[2] = -v[2];
    cov.row(2) *= -1.0;
    cov.col(2) *= -1.0;
  }
  const double s = v[2];
  store(out, {"center_stokes_hz", "center_antistokes_hz", "s", "area_stokes_narrow", "area_stokes_broad",
              "area_antistokes_narrow", "area_antistokes_broad", "floor"},
        v, cov);
  out.params["s_signed"] = s_signed;
  out.sigmas["s_signed"] = out.sigmas["s"];
  out.params["gamma_eff_hz"] = gamma_eff_hz_fixed;
  out.sigmas["gamma_eff_hz"] = 0.0;
  out.params["gamma_minus_hz"] = gamma_eff_hz_fixed * (1.0 - s);
  out.params["gamma_plus_hz"] = gamma_eff_hz_fixed * (1.0 + s);
  out.sigmas["gamma_minus_hz"] = out.sigmas["gamma_plus_hz"] = gamma_eff_hz_fixed * out.sigmas["s"];

  const double c = opt.ratio_correction;
  // Area times (1 -/+ s) is the occupation weight of each term; the summed
  // weights are 2(n_bar + 1) and 2 n_bar whatever s is.
  const auto [r0, v0] = ratio_with_variance(v, cov, {{3, 1.0 - s, -1.0}, {4, 1.0 + s, 1.0}},
                                            {{5, 1.0 - s, -1.0}, {6, 1.0 + s, 1.0}}, 2);
  const auto [rp, vp] = ratio_with_variance(v, cov, {4}, {6});
  const auto [rm, vm] = ratio_with_variance(v, cov, {3}, {5});
  out.ratios = Ratios{c * r0, c * rp, c * rm};
  out.sigmas["r0"] = c * std::sqrt(std::max(v0, 0.0));
  out.sigmas["r_plus"] = c * std::sqrt(std::max(vp, 0.0));
  out.sigmas["r_minus"] = c * std::sqrt(std::max(vm, 0.0));
  check_peak_coverage(data, v[0], gamma_eff_hz_fixed, "Stokes ", out);
  check_peak_coverage(data, v[1], gamma_eff_hz_fixed, "anti-Stokes ", out);

  if (s == 0.0) {
    out.at_boundary = true;
    out.sigmas["s"] = out.sigmas["s_signed"] = std::numeric_limits<double>::quiet_NaN();
    out.sigmas["gamma_minus_hz"] = out.sigmas["gamma_plus_hz"] = std::numeric_limits<double>::quiet_NaN();
    out.warnings.push_back("s pinned at 0; narrow and broad areas are split evenly and s has no standard error");
  } else if (s >= kBoundaryS) {
    out.at_boundary = true;
    out.warnings.push_back(fmt::format("s = {:.6f} at the transform boundary", s));
  }
  return out;
}

FitResult fit_single_peak(const SpectrumData& data, const FitHint& hint, const FitOptions& opt) {
  const auto b = usable_bins(data);
  require_bins(b, SinglePeakModel::P, "fit_single_peak");
  const auto g = smooth_and_floor(b);
  const double floor0 = hint.floor ? *hint.floor : g.floor;
  const auto i = hint.center_stokes_hz ? nearest_bin(b, *hint.center_stokes_hz) : highest_bin(b, g, std::nullopt, 0.0);
  const double c0 = hint.center_stokes_hz ? *hint.center_stokes_hz : b.f[i];
  const double w0 = hint.gamma_eff_hz ? *hint.gamma_eff_hz : fwhm_at(b, g, i);
  const double a0 = area_estimate(b, floor0, c0, w0);

  SinglePeakModel m;
  m.ref = c0;
  m.area_scale = positive_scale(a0, peak_height_scale(b) * b.resolution);
  m.floor_scale = positive_scale(floor0, 1e-3 * peak_height_scale(b));
  SinglePeakModel::Vec p;
  p << 0.0, std::log(w0), std::max(a0, 1e-3 * m.area_scale) / m.area_scale, std::max(floor0, 0.0) / m.floor_scale;
  const auto r = run_engine(m, p, b, opt);

  FitResult out;
  out.model = "single_peak";
  finish_engine_flags(out, r.converged, r.stalled, r.iterations, r.gradient_norm, opt);
  goodness(m, r.p, b, out);
  const double w = std::exp(r.p[1]);
  Eigen::VectorXd v(4);
  v << m.ref + r.p[0], w, m.area_scale * r.p[2], m.floor_scale * r.p[3];
  Eigen::VectorXd jac(4);
  jac << 1.0, w, m.area_scale, m.floor_scale;
  const Eigen::MatrixXd cov = jac.asDiagonal() * covariance(r) * jac.asDiagonal();
  store(out, {"center_hz", "width_hz", "area", "floor"}, v, cov);
  check_peak_coverage(data, v[0], v[1], "", out);
  if (!(v[2] > 0.0)) {
    out.warnings.push_back("non-positive peak area, fit rejected");
    out.converged = false;
  }
  return out;
}

std::vector<std::vector<double>> fit_curves(const FitResult& fit, const std::vector<double>& freq_hz) {
  struct Comp {
    double c, w, a;
  };
  std::vector<Comp> comps;
  const auto& p = fit.params;
  if (fit.model == "single_pair") {
    const double w = p.at("gamma_eff_hz");
    comps = {{p.at("center_stokes_hz"), w, p.at("area_stokes")},
             {p.at("center_antistokes_hz"), w, p.at("area_antistokes")}};
  } else if (fit.model == "double_pair") {
    const double wn = p.at("gamma_minus_hz"), wb = p.at("gamma_plus_hz");
    comps = {{p.at("center_stokes_hz"), wn, p.at("area_stokes_narrow")},
             {p.at("center_stokes_hz"), wb, p.at("area_stokes_broad")},
             {p.at("center_antistokes_hz"), wn, p.at("area_antistokes_narrow")},
             {p.at("center_antistokes_hz"), wb, p.at("area_antistokes_broad")}};
  } else if (fit.model == "single_peak") {
    comps = {{p.at("center_hz"), p.at("width_hz"), p.at("area")}};
  } else {
    throw PreconditionError("fit_curves: unknown model '" + fit.model + "'");
  }
  const double floor = p.at("floor");
  std::vector<std::vector<double>> out(comps.size() + 1, std::vector<double>(freq_hz.size(), 0.0));
  for (std::size_t i = 0; i < freq_hz.size(); ++i) {
    double total = floor;
    for (std::size_t k = 0; k < comps.size(); ++k) {
      const double v = lorentz_value(freq_hz[i], comps[k].c, comps[k].w, comps[k].a);
      out[k + 1][i] = v;
      total += v;
    }
    out[0][i] = total;
  }
  return out;
}

SpectrumData apply_mask(const SpectrumData& data, const std::vector<std::pair<double, double>>& windows) {
  SpectrumData out = data;
  if (out.mask.size() != out.size()) out.mask.assign(out.size(), 0);
  for (const auto& [lo, hi] : windows) {
    if (!(hi >= lo)) throw PreconditionError(fmt::format("mask window [{}, {}] is empty", lo, hi));
    for (std::size_t i = 0; i < out.size(); ++i)
      if (out.freq_hz[i] >= lo && out.freq_hz[i] <= hi) out.mask[i] = 1;
  }
  return out;
}

std::string to_json(const FitResult& fit) {
  nlohmann::ordered_json j;
  j["model"] = fit.model;
  j["converged"] = fit.converged;
  j["iterations"] = fit.n_iter;
  j["gradient_norm"] = fit.gradient_norm;
  j["n_bins"] = fit.n_bins;
  j["chi2_reduced"] = fit.chi2_reduced;
  j["deviance"] = fit.deviance;
  j["at_boundary"] = fit.at_boundary;
  auto& params = j["params"];
  for (const auto& [k, v] : fit.params) {
    params[k]["value"] = v;
    const auto it = fit.sigmas.find(k);
    params[k]["sigma"] = it != fit.sigmas.end() ? it->second : 0.0;
  }
  if (fit.ratios) {
    auto sig = [&](const char* k) {
      const auto it = fit.sigmas.find(k);
      return it != fit.sigmas.end() ? it->second : 0.0;
    };
    j["ratios"]["r0"] = {{"value", fit.ratios->r0}, {"sigma", sig("r0")}};
    if (fit.model == "double_pair") {
      j["ratios"]["r_plus"] = {{"value", fit.ratios->r_plus}, {"sigma", sig("r_plus")}};
      j["ratios"]["r_minus"] = {{"value", fit.ratios->r_minus}, {"sigma", sig("r_minus")}};
    }
  }
  if (fit.n_bar_inferred) j["n_bar_inferred"] = {{"value", *fit.n_bar_inferred}, {"sigma", fit.sigmas.at("n_bar")}};
  j["warnings"] = fit.warnings;
  return j.dump(2);
}

SampleMoments sample_moments(const std::vector<double>& x) {
  SampleMoments m;
  const auto n = static_cast<double>(x.size());
  if (x.empty()) return m;
  for (double v : x) m.mean += v;
  m.mean /= n;
  double m2 = 0.0, m3 = 0.0;
  for (double v : x) {
    const double d = v - m.mean;
    m2 += d * d;
    m3 += d * d * d;
  }
  if (x.size() > 1) m.std = std::sqrt(m2 / (n - 1.0));
  m2 /= n;
  m3 /= n;
  m.skewness = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
  return m;
}

double floor_below_stokes_peak(const BiasStudyConfig& cfg, double db) {
  const auto rates = phenomenological_rates(cfg.omega_m, cfg.gamma_eff, cfg.s, cfg.n_bar);
  const auto m = heterodyne_model(rates, cfg.n_bar, cfg.acq.delta_lo, cfg.acq.calibration, 0.0);
  return m.value(cfg.omega_m + cfg.acq.delta_lo) * std::pow(10.0, -db / 10.0);
}

BiasStudyConfig default_bias_config() {
  BiasStudyConfig c;
  c.omega_m = hz_to_rad(530e3);
  const double gamma_m = c.omega_m / 6.4e6;
  const double n_th = thermal_occupation(7.0, c.omega_m);
  c.n_bar = 5.8;
  c.gamma_eff = gamma_m * n_th / c.n_bar;
  c.s = 0.0;
  c.acq.delta_lo = hz_to_rad(11e3);
  c.acq.resolution_hz = 0.2;
  c.acq.n_avg = 10;
  c.acq.half_window_hz = 20e3;
  c.acq.calibration = 1.0;
  c.acq.floor = floor_below_stokes_peak(c, 15.0);
  c.rebin = 200;
  c.n_trials = 6000;
  c.root_seed = 1;
  return c;
}

BiasStudyReport bias_study(const BiasStudyConfig& cfg, bool noiseless) {
  if (cfg.n_trials < 100) throw PreconditionError("bias_study: need at least 100 trials");
  if (cfg.s != 0.0) throw PreconditionError("bias_study: the truth must have s = 0");
  if (cfg.rebin < 1) throw PreconditionError("bias_study: rebin must be >= 1");
  const auto start = std::chrono::steady_clock::now();
  const auto rates = phenomenological_rates(cfg.omega_m, cfg.gamma_eff, cfg.s, cfg.n_bar);
  const auto grid = cfg.acq.grid_hz(cfg.omega_m);
  const auto model =
      heterodyne_model(rates, cfg.n_bar, cfg.acq.delta_lo, cfg.acq.calibration, cfg.acq.floor).sample_hz(grid);

  // Only the windows around the two sidebands enter the fits.
  const double f_st = rad_to_hz(cfg.omega_m + cfg.acq.delta_lo);
  const double f_as = rad_to_hz(cfg.omega_m - cfg.acq.delta_lo);
  std::vector<std::uint8_t> outside(grid.size(), 0);
  for (std::size_t i = 0; i < grid.size(); ++i)
    outside[i] = std::abs(grid[i] - f_st) > cfg.acq.half_window_hz && std::abs(grid[i] - f_as) > cfg.acq.half_window_hz;

  BiasStudyReport rep;
  rep.n_trials = cfg.n_trials;
  rep.s_values.assign(static_cast<std::size_t>(cfg.n_trials), std::numeric_limits<double>::quiet_NaN());
  const auto n = static_cast<std::ptrdiff_t>(cfg.n_trials);
#pragma omp parallel for schedule(dynamic, 4)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      SpectrumData d;
      if (noiseless) {
        d = SpectrumData::uniform(grid.front(), cfg.acq.resolution_hz, grid.size(), cfg.acq.n_avg);
        d.freq_hz = grid;
        d.psd = model;
        d.mask = outside;
      } else {
        d = synth_periodogram(grid, model, cfg.acq.n_avg, task_seed(cfg.root_seed, static_cast<std::uint64_t>(i)),
                              outside);
      }
      if (cfg.rebin > 1) d = d.rebin(cfg.rebin);
      const auto single = fit_single_pair(d, {}, cfg.fit);
      if (!single.converged) continue;
      FitHint h;
      h.center_stokes_hz = single.get("center_stokes_hz");
      h.center_antistokes_hz = single.get("center_antistokes_hz");
      const auto dbl = fit_double_pair(d, single.get("gamma_eff_hz"), h, cfg.fit);
      if (!dbl.converged) continue;
      rep.s_values[static_cast<std::size_t>(i)] = dbl.get("s");
    } catch (const Error&) {
      // counted as failed below
    }
  }

  std::vector<double> ok;
  for (double v : rep.s_values)
    if (std::isfinite(v)) ok.push_back(v);
  rep.n_failed = cfg.n_trials - static_cast<int>(ok.size());
  rep.valid = rep.n_failed <= 0.05 * cfg.n_trials;
  const auto mom = sample_moments(ok);
  rep.mean_s = mom.mean;
  rep.std_s = mom.std;
  rep.skewness_s = mom.skewness;

  constexpr double bin = 0.005;
  const double top = ok.empty() ? 0.1 : std::max(0.1, *std::max_element(ok.begin(), ok.end()));
  const int nb = static_cast<int>(std::ceil(top / bin - 1e-12));
  for (int k = 0; k <= nb; ++k) rep.hist_edges.push_back(k * bin);
  rep.hist_counts.assign(static_cast<std::size_t>(nb), 0);
  for (double v : ok) {
    auto k = static_cast<int>(v / bin);
    k = std::clamp(k, 0, nb - 1);
    ++rep.hist_counts[static_cast<std::size_t>(k)];
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

std::string to_json(const BiasStudyReport& r, const BiasStudyConfig& cfg) {
  nlohmann::ordered_json j;
  j["truth"] = {{"omega_m_hz", rad_to_hz(cfg.omega_m)},
                {"gamma_eff_hz", rad_to_hz(cfg.gamma_eff)},
                {"n_bar", cfg.n_bar},
                {"s", cfg.s}};
  j["acquisition"] = {{"delta_lo_hz", rad_to_hz(cfg.acq.delta_lo)},
                      {"resolution_hz", cfg.acq.resolution_hz},
                      {"half_window_hz", cfg.acq.half_window_hz},
                      {"calibration", cfg.acq.calibration},
                      {"floor", cfg.acq.floor},
                      {"n_avg", cfg.acq.n_avg},
                      {"rebin", cfg.rebin}};
  j["root_seed"] = cfg.root_seed;
  j["n_trials"] = r.n_trials;
  j["n_failed"] = r.n_failed;
  j["valid"] = r.valid;
  j["mean_s"] = r.mean_s;
  j["std_s"] = r.std_s;
  j["skewness_s"] = r.skewness_s;
  j["histogram"] = {{"edges", r.hist_edges}, {"counts", r.hist_counts}};
  return j.dump(2);
}

std::string histogram_csv(const BiasStudyReport& r) {
  std::ostringstream os;
  os << "lo,hi,count\n";
  for (std::size_t k = 0; k < r.hist_counts.size(); ++k)
    os << fmt::format("{},{},{}\n", r.hist_edges[k], r.hist_edges[k + 1], r.hist_counts[k]);
  return os.str();
}

}  // namespace omsqz
