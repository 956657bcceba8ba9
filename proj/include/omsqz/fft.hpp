#pragma once

#include <complex>
#include <span>
#include <vector>

namespace omsqz {

/// Forward DFT, X[k] = sum_n x[n] exp(-2 pi i k n / N). Backed by FFTW; plans
/// are cached per length and creation is serialized, execution is reentrant.
std::vector<std::complex<double>> fft(std::span<const std::complex<double>> x);

}  // namespace omsqz
