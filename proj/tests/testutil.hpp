#ifndef RAPSTREAM_TESTS_TESTUTIL_HPP
#define RAPSTREAM_TESTS_TESTUTIL_HPP

#include <cmath>
#include <numbers>
#include <random>

#include "rapstream/linalg.hpp"
#include "rapstream/model.hpp"
#include "rapstream/rap.hpp"

namespace testutil {

using rapstream::linalg::Matrix;
using rapstream::linalg::SpdMatrix;

inline Matrix random_matrix(std::mt19937_64& rng, int rows, int cols, double scale = 1.0) {
    std::normal_distribution<double> normal(0.0, scale);
    Matrix m(rows, cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) m(r, c) = normal(rng);
    }
    return m;
}

// Well-conditioned random SPD matrix.
inline SpdMatrix random_spd(std::mt19937_64& rng, int dim, double spread = 1.0) {
    const Matrix a = random_matrix(rng, dim, dim, spread);
    Matrix m = a * a.transpose() + Matrix::Identity(dim, dim) * (0.5 * spread * spread);
    return SpdMatrix(m);
}

inline Matrix random_invertible(std::mt19937_64& rng, int dim) {
    for (;;) {
        Matrix w = random_matrix(rng, dim, dim);
        if (std::abs(w.determinant()) > 0.1) return w;
    }
}

// Amplitude of the component at f_hz (exact single-bin projection).
inline double tone_amplitude(const std::vector<double>& x, double fs_hz, double f_hz) {
    double re = 0.0, im = 0.0;
    const double w = 2.0 * std::numbers::pi * f_hz / fs_hz;
    for (std::size_t n = 0; n < x.size(); ++n) {
        re += x[n] * std::cos(w * static_cast<double>(n));
        im += x[n] * std::sin(w * static_cast<double>(n));
    }
    return 2.0 * std::sqrt(re * re + im * im) / static_cast<double>(x.size());
}

// Signal power inside [lo_hz, hi_hz], via projection on the DFT bins there.
inline double band_power(const Eigen::Ref<const Eigen::RowVectorXd>& x, double fs_hz,
                         double lo_hz, double hi_hz) {
    const auto n = static_cast<std::size_t>(x.size());
    const double df = fs_hz / static_cast<double>(n);
    double power = 0.0;
    for (int bin = static_cast<int>(std::ceil(lo_hz / df));
         bin <= static_cast<int>(std::floor(hi_hz / df)); ++bin) {
        double re = 0.0, im = 0.0;
        const double w = 2.0 * std::numbers::pi * bin / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            re += x(static_cast<Eigen::Index>(i)) * std::cos(w * static_cast<double>(i));
            im += x(static_cast<Eigen::Index>(i)) * std::sin(w * static_cast<double>(i));
        }
        power += (re * re + im * im) / static_cast<double>(n * n);
    }
    return power;
}

// Small model geometry used across model/train/stream tests:
// fs 32 Hz, one downsampling stage of 2, 0.5 s windows at 8 Hz updates.
inline rapstream::model::ModelConfig tiny_model_config(
    int channels = 3, rapstream::model::PaddingMode pad = rapstream::model::PaddingMode::valid) {
    rapstream::rap::OnlineTaskSpec task;
    task.window_length_s = 0.5;
    task.update_frequency_hz = 8.0;
    rapstream::model::ModelConfig cfg;
    cfg.channel_count = channels;
    cfg.temporal_filters = 2;
    cfg.temporal_kernel = 8;
    cfg.depth_multiplier = 2;
    cfg.second_block_filters = 3;
    cfg.second_kernel = 2;
    cfg.dropout_rate = 0.0;
    cfg.padding_mode = pad;
    cfg.rap_plan = rapstream::rap::plan_rap(32, {2}, task);
    return cfg;
}

// Dreyer-like geometry: 256 Hz, [8] downsampling, 1 s windows at 16 Hz.
inline rapstream::model::ModelConfig dreyer_model_config(
    int channels = 27,
    rapstream::model::PaddingMode pad = rapstream::model::PaddingMode::valid) {
    rapstream::rap::OnlineTaskSpec task;
    task.window_length_s = 1.0;
    task.update_frequency_hz = 16.0;
    task.trial_length_s = 4.75;
    rapstream::model::ModelConfig cfg;
    cfg.channel_count = channels;
    cfg.padding_mode = pad;
    cfg.rap_plan = rapstream::rap::plan_rap(256, {8}, task);
    return cfg;
}

}  // namespace testutil

#endif
