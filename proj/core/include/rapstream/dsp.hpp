#ifndef RAPSTREAM_DSP_HPP
#define RAPSTREAM_DSP_HPP

#include <vector>

#include "rapstream/errors.hpp"
#include "rapstream/linalg.hpp"

namespace rapstream::dsp {

using linalg::Matrix;

/// One biquad section, direct form II transposed coefficients
/// (a0 normalized to 1).
struct Biquad {
    double b0, b1, b2;
    double a1, a2;
};

/// Butterworth bandpass as a cascade of second-order sections
/// (analog prototype of the given order, bilinear transform).
std::vector<Biquad> butterworth_bandpass(int order, double low_hz, double high_hz,
                                         double fs_hz);

/// Analytic magnitude response of the bilinear-transformed Butterworth
/// bandpass (prewarped closed form); used as an independent oracle.
double butterworth_bandpass_magnitude(int order, double low_hz, double high_hz,
                                      double fs_hz, double f_hz);

/// Zero-phase forward-backward filtering through a biquad cascade with
/// odd-reflection padding and steady-state initial conditions.
std::vector<double> filtfilt(const std::vector<Biquad>& sos, const std::vector<double>& x);

/// Zero-phase 4th-order Butterworth bandpass over each channel row.
/// Band edges must satisfy 0 < low < high < fs/2.
Matrix bandpass(const Matrix& x, double fs_hz, double low_hz, double high_hz);

/// Polyphase rational resampler (Kaiser-windowed FIR anti-alias filter,
/// cutoff 0.45 * to_hz, edge-replicated boundaries, per-phase DC
/// normalization so constants are preserved exactly).
/// Only downsampling (from >= to) is supported.
Matrix resample(const Matrix& x, double from_hz, double to_hz);

/// Output length of resample for an input of n samples: round(n * to / from).
std::int64_t resampled_length(std::int64_t n, double from_hz, double to_hz);

}  // namespace rapstream::dsp

#endif
