#include "rapstream/dsp.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

namespace rapstream::dsp {

namespace {

using cplx = std::complex<double>;
constexpr double kPi = std::numbers::pi;

void check_band(double low_hz, double high_hz, double fs_hz) {
    if (!(fs_hz > 0.0)) throw DomainError("sampling frequency must be positive");
    if (!(0.0 < low_hz && low_hz < high_hz && high_hz < fs_hz / 2.0)) {
        throw DomainError("band [" + std::to_string(low_hz) + ", " + std::to_string(high_hz) +
                          "] Hz must satisfy 0 < low < high < fs/2 at fs = " +
                          std::to_string(fs_hz));
    }
}

double prewarp(double f_hz, double fs_hz) {
    return 2.0 * fs_hz * std::tan(kPi * f_hz / fs_hz);
}

// Steady-state filter state for a unit-amplitude constant input; scaling this
// by the first sample removes the startup transient for step-like inputs.
std::array<double, 2> step_steady_state(const Biquad& s) {
    const double h1 = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
    return {s.b1 + s.b2 - (s.a1 + s.a2) * h1, s.b2 - s.a2 * h1};
}

void sosfilt_inplace(const std::vector<Biquad>& sos, std::vector<double>& x) {
    if (x.empty()) return;
    for (const Biquad& s : sos) {
        // Scale the steady-state by the section's first input sample (which,
        // processing in place, is x.front() at this point).
        const auto zi = step_steady_state(s);
        double state0 = x.front() * zi[0];
        double state1 = x.front() * zi[1];
        for (double& v : x) {
            const double in = v;
            const double out = s.b0 * in + state0;
            state0 = s.b1 * in - s.a1 * out + state1;
            state1 = s.b2 * in - s.a2 * out;
            v = out;
        }
    }
}

double bessel_i0(double x) {
    // Series expansion; converges quickly for the beta values used here.
    double sum = 1.0;
    double term = 1.0;
    const double q = x * x / 4.0;
    for (int k = 1; k < 64; ++k) {
        term *= q / (static_cast<double>(k) * k);
        sum += term;
        if (term < 1e-18 * sum) break;
    }
    return sum;
}

std::vector<double> kaiser_lowpass(int numtaps, double cutoff_norm, double beta) {
    // cutoff_norm in (0, 1), relative to Nyquist of the design rate.
    std::vector<double> h(numtaps);
    const int mid = (numtaps - 1) / 2;
    const double denom = bessel_i0(beta);
    for (int n = 0; n < numtaps; ++n) {
        const double m = n - mid;
        const double sinc = m == 0.0 ? cutoff_norm
                                     : std::sin(kPi * cutoff_norm * m) / (kPi * m);
        const double r = 2.0 * n / (numtaps - 1) - 1.0;
        const double w = bessel_i0(beta * std::sqrt(std::max(0.0, 1.0 - r * r))) / denom;
        h[n] = sinc * w;
    }
    return h;
}

}  // namespace

std::vector<Biquad> butterworth_bandpass(int order, double low_hz, double high_hz,
                                         double fs_hz) {
    check_band(low_hz, high_hz, fs_hz);
    if (order < 1) throw DomainError("filter order must be >= 1");

    const double w1 = prewarp(low_hz, fs_hz);
    const double w2 = prewarp(high_hz, fs_hz);
    const double bw = w2 - w1;
    const double w0sq = w1 * w2;

    // Analog Butterworth prototype poles, then lowpass -> bandpass: each
    // prototype pole p yields the roots of s^2 - p*bw*s + w0^2.
    std::vector<cplx> poles;
    poles.reserve(2 * order);
    for (int k = 0; k < order; ++k) {
        const double theta = kPi * (2.0 * k + 1.0) / (2.0 * order) + kPi / 2.0;
        const cplx p = std::polar(1.0, theta);
        const cplx pb = p * bw;
        const cplx disc = std::sqrt(pb * pb - 4.0 * w0sq);
        poles.push_back((pb + disc) / 2.0);
        poles.push_back((pb - disc) / 2.0);
    }

    // Bilinear transform. Zeros: order at z=1 (from s=0) and order at z=-1.
    const double k2fs = 2.0 * fs_hz;
    std::vector<cplx> zpoles;
    zpoles.reserve(poles.size());
    for (const cplx& p : poles) {
        zpoles.push_back((k2fs + p) / (k2fs - p));
    }

    // Gain fixed so the digital magnitude is exactly 1 at the (warped)
    // geometric center frequency, matching the analog prototype.
    const double wc = 2.0 * std::atan(std::sqrt(w0sq) / k2fs);
    const cplx zc = std::polar(1.0, wc);
    cplx resp = std::pow(zc - 1.0, order) * std::pow(zc + 1.0, order);
    for (const cplx& zp : zpoles) resp /= (zc - zp);
    const double gain = 1.0 / std::abs(resp);

    // Pair each pole with the one nearest its conjugate; every section takes
    // one zero at +1 and one at -1, i.e. numerator z^2 - 1.
    std::vector<Biquad> sos;
    std::vector<cplx> remaining = zpoles;
    while (remaining.size() >= 2) {
        const cplx p = remaining.back();
        remaining.pop_back();
        std::size_t best = 0;
        double best_dist = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < remaining.size(); ++i) {
            const double d = std::abs(remaining[i] - std::conj(p));
            if (d < best_dist) {
                best_dist = d;
                best = i;
            }
        }
        const cplx q = remaining[best];
        remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(best));
        sos.push_back(Biquad{1.0, 0.0, -1.0, -(p + q).real(), (p * q).real()});
    }
    const double section_gain = std::pow(gain, 1.0 / static_cast<double>(sos.size()));
    for (Biquad& s : sos) {
        s.b0 *= section_gain;
        s.b1 *= section_gain;
        s.b2 *= section_gain;
    }
    return sos;
}

double butterworth_bandpass_magnitude(int order, double low_hz, double high_hz,
                                      double fs_hz, double f_hz) {
    check_band(low_hz, high_hz, fs_hz);
    const double wl = prewarp(low_hz, fs_hz);
    const double wh = prewarp(high_hz, fs_hz);
    const double w = prewarp(f_hz, fs_hz);
    const double ratio = (w * w - wl * wh) / (w * (wh - wl));
    return 1.0 / std::sqrt(1.0 + std::pow(ratio, 2.0 * order));
}

std::vector<double> filtfilt(const std::vector<Biquad>& sos, const std::vector<double>& x) {
    if (x.empty()) return {};
    const std::size_t padlen =
        std::min(x.size() - 1, 3 * (2 * sos.size() + 1));

    // Odd reflection about the endpoints suppresses edge transients.
    std::vector<double> ext;
    ext.reserve(x.size() + 2 * padlen);
    for (std::size_t i = padlen; i >= 1; --i) ext.push_back(2.0 * x.front() - x[i]);
    ext.insert(ext.end(), x.begin(), x.end());
    for (std::size_t i = 1; i <= padlen; ++i) {
        ext.push_back(2.0 * x.back() - x[x.size() - 1 - i]);
    }

    sosfilt_inplace(sos, ext);
    std::reverse(ext.begin(), ext.end());
    sosfilt_inplace(sos, ext);
    std::reverse(ext.begin(), ext.end());

    return {ext.begin() + static_cast<std::ptrdiff_t>(padlen),
            ext.begin() + static_cast<std::ptrdiff_t>(padlen + x.size())};
}

Matrix bandpass(const Matrix& x, double fs_hz, double low_hz, double high_hz) {
    const std::vector<Biquad> sos = butterworth_bandpass(4, low_hz, high_hz, fs_hz);
    Matrix out(x.rows(), x.cols());
    std::vector<double> row(static_cast<std::size_t>(x.cols()));
    for (Eigen::Index c = 0; c < x.rows(); ++c) {
        for (Eigen::Index t = 0; t < x.cols(); ++t) row[static_cast<std::size_t>(t)] = x(c, t);
        const std::vector<double> filtered = filtfilt(sos, row);
        for (Eigen::Index t = 0; t < x.cols(); ++t) out(c, t) = filtered[static_cast<std::size_t>(t)];
    }
    return out;
}

std::int64_t resampled_length(std::int64_t n, double from_hz, double to_hz) {
    return static_cast<std::int64_t>(std::floor(static_cast<double>(n) * to_hz / from_hz + 0.5));
}

Matrix resample(const Matrix& x, double from_hz, double to_hz) {
    if (!(to_hz > 0.0) || !(from_hz > 0.0)) {
        throw DomainError("sampling rates must be positive");
    }
    if (to_hz > from_hz) {
        throw DomainError("upsampling is not supported (" + std::to_string(from_hz) +
                          " -> " + std::to_string(to_hz) + " Hz)");
    }
    if (to_hz == from_hz) return x;

    // Rational ratio L/M; EEG rates are integral in practice.
    const auto from_i = static_cast<long long>(std::llround(from_hz));
    const auto to_i = static_cast<long long>(std::llround(to_hz));
    if (std::abs(from_hz - static_cast<double>(from_i)) > 1e-9 ||
        std::abs(to_hz - static_cast<double>(to_i)) > 1e-9) {
        throw DomainError("resample requires integer sampling rates");
    }
    const long long g = std::gcd(from_i, to_i);
    const long long up = to_i / g;
    const long long down = from_i / g;

    // Kaiser-windowed lowpass at the upsampled rate, cutoff 0.45 * to.
    const long long half = 10 * std::max(up, down);
    const int numtaps = static_cast<int>(2 * half + 1);
    const double cutoff_norm = 2.0 * (0.45 * to_hz) / (from_hz * static_cast<double>(up));
    std::vector<double> h = kaiser_lowpass(numtaps, cutoff_norm, 5.0);
    for (double& v : h) v *= static_cast<double>(up);

    // Normalize each polyphase branch to unit DC gain so constant signals
    // survive bit-for-bit.
    for (long long r = 0; r < up; ++r) {
        double s = 0.0;
        for (long long m = r; m < numtaps; m += up) s += h[static_cast<std::size_t>(m)];
        if (s != 0.0) {
            for (long long m = r; m < numtaps; m += up) h[static_cast<std::size_t>(m)] /= s;
        }
    }

    const std::int64_t n_in = x.cols();
    const std::int64_t n_out = resampled_length(n_in, from_hz, to_hz);
    Matrix out(x.rows(), n_out);
    const long long center = half;

    for (Eigen::Index c = 0; c < x.rows(); ++c) {
        for (std::int64_t k = 0; k < n_out; ++k) {
            const long long pos = k * down + center;  // index on the upsampled grid
            long long m = pos % up;                   // first tap in this branch
            double acc = 0.0;
            for (; m < numtaps; m += up) {
                long long j = (pos - m) / up;
                j = std::clamp<long long>(j, 0, n_in - 1);  // replicate edges
                acc += h[static_cast<std::size_t>(m)] * x(c, j);
            }
            out(c, k) = acc;
        }
    }
    return out;
}

}  // namespace rapstream::dsp
