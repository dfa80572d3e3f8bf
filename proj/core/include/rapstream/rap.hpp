#ifndef RAPSTREAM_RAP_HPP
#define RAPSTREAM_RAP_HPP

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "rapstream/errors.hpp"

namespace rapstream::rap {

/// Requirements of the online decoding task: window length, prediction
/// update rate, and (optionally) the trial length used for window-count
/// and gain arithmetic.
struct OnlineTaskSpec {
    double window_length_s = 1.0;
    double update_frequency_hz = 16.0;
    std::optional<double> trial_length_s;

    void validate() const;
};

/// Pooling re-parameterization derived from an OnlineTaskSpec.
///
/// The first P-1 kernel/stride pairs downsample the input from f_s to
/// f_inter (kernel == stride); the final pair extracts overlapping windows:
/// kernel = f_inter * T_w, stride = f_inter / f_u.
struct RapPlan {
    std::vector<int> kernel_sizes;
    std::vector<int> strides;
    int intermediate_frequency_hz = 0;
    int pooling_layer_count = 0;

    int final_kernel() const { return kernel_sizes.back(); }
    int final_stride() const { return strides.back(); }
    /// Product of the downsampling kernels (1 when P == 1).
    int downsampling_factor() const;
    /// Sampling rate the plan was derived for.
    int sampling_frequency_hz() const {
        return intermediate_frequency_hz * downsampling_factor();
    }

    bool operator==(const RapPlan&) const = default;
};

/// Derive the pooling plan for a model with the given downsampling kernels
/// (length P-1; empty for single-pool models) running at f_s on the given
/// online task. Throws IncompatibleTaskError when the geometry cannot meet
/// the task exactly; the message names the smallest compatible f_u where
/// one exists.
RapPlan plan_rap(int sampling_frequency_hz, const std::vector<int>& downsampling_kernels,
                 const OnlineTaskSpec& task);

/// N_w = (T_t - T_w) * f_u + 1, flooring a non-integral product (a window
/// must be fully observed before it is predicted).
int windows_per_trial(const OnlineTaskSpec& task);

/// Training-cost reduction of joint decoding: (T_w / T_t) * N_w.
double computational_gain(const OnlineTaskSpec& task);

/// Raw-sample range [start, end) covered by window j.
std::pair<std::int64_t, std::int64_t> window_sample_range(int window_index,
                                                          const OnlineTaskSpec& task,
                                                          int sampling_frequency_hz);

}  // namespace rapstream::rap

#endif
