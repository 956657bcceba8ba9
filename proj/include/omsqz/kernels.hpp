#pragma once

// Element-wise grid kernels. Every kernel comes as a serial reference and an
// OpenMP version with a static schedule; both write out[i] = f(in[i]) so the
// results are bit-identical regardless of thread count.

#include <cstddef>
#include <span>
#include <vector>

#include "omsqz/errors.hpp"

namespace omsqz::kernels {

/// Number of OpenMP threads available (1 without OpenMP).
int max_threads();

template <class F>
void map_serial(std::span<const double> in, std::span<double> out, F&& f) {
  if (in.size() != out.size()) throw PreconditionError("map_serial: size mismatch");
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
}

template <class F>
void map_parallel(std::span<const double> in, std::span<double> out, F&& f) {
  if (in.size() != out.size()) throw PreconditionError("map_parallel: size mismatch");
  const auto n = static_cast<std::ptrdiff_t>(in.size());
  // The outlined OpenMP body does not vectorize as well as the plain loop,
  // so a single thread takes the serial path.
  if (max_threads() == 1) {
    for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = f(in[i]);
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = f(in[i]);
}

template <class F>
std::vector<double> sample(std::span<const double> grid, F&& f) {
  std::vector<double> out(grid.size());
  map_parallel(grid, out, f);
  return out;
}

template <class F>
std::vector<double> sample_serial(std::span<const double> grid, F&& f) {
  std::vector<double> out(grid.size());
  map_serial(grid, out, f);
  return out;
}

}  // namespace omsqz::kernels
