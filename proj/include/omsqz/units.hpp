#pragma once

#include <numbers>

namespace omsqz {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;
inline constexpr double kHbar = 1.054571817e-34;    // J s
inline constexpr double kBoltzmann = 1.380649e-23;  // J / K

// User-facing frequencies are in Hz, everything inside the library is rad/s.
constexpr double hz_to_rad(double hz) { return kTwoPi * hz; }
constexpr double rad_to_hz(double rad_per_s) { return rad_per_s / kTwoPi; }

}  // namespace omsqz
