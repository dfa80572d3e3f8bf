#include "rapstream/rap.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace rapstream::rap {

namespace {

// Guard against 4.75*16 = 75.99999... style representation error before
// integrality checks and floors.
constexpr double kIntEps = 1e-9;

bool nearly_integer(double x) { return std::abs(x - std::round(x)) < kIntEps; }

}  // namespace

void OnlineTaskSpec::validate() const {
    if (!(window_length_s > 0.0)) {
        throw DomainError("window length must be positive");
    }
    if (!(update_frequency_hz > 0.0)) {
        throw DomainError("update frequency must be positive");
    }
    if (trial_length_s && *trial_length_s < window_length_s - kIntEps) {
        throw DomainError("trial length must be at least the window length");
    }
}

int RapPlan::downsampling_factor() const {
    int product = 1;
    for (int i = 0; i + 1 < pooling_layer_count; ++i) product *= kernel_sizes[i];
    return product;
}

RapPlan plan_rap(int sampling_frequency_hz, const std::vector<int>& downsampling_kernels,
                 const OnlineTaskSpec& task) {
    task.validate();
    if (sampling_frequency_hz <= 0) {
        throw DomainError("sampling frequency must be positive");
    }
    long long product = 1;
    for (int k : downsampling_kernels) {
        if (k <= 0) throw DomainError("downsampling kernels must be positive");
        product *= k;
    }
    if (sampling_frequency_hz % product != 0) {
        throw IncompatibleTaskError(
            "sampling frequency " + std::to_string(sampling_frequency_hz) +
            " is not divisible by the downsampling product " + std::to_string(product));
    }
    const double f_inter_exact = static_cast<double>(sampling_frequency_hz) /
                                 static_cast<double>(product);
    const int f_inter = static_cast<int>(f_inter_exact);

    // f_inter must be an integer multiple of f_u, so the final stride is a
    // positive integer.
    const double stride_exact = f_inter_exact / task.update_frequency_hz;
    if (!nearly_integer(stride_exact) || stride_exact < 1.0 - kIntEps) {
        // Name the smallest compatible f_u (the largest divisor of f_inter
        // not exceeding the request, when any exists).
        int suggestion = 0;
        for (int d = 1; d <= f_inter; ++d) {
            if (f_inter % d == 0 && d <= task.update_frequency_hz + kIntEps) suggestion = d;
        }
        std::string hint = suggestion > 0
                               ? "; nearest compatible update frequency is " +
                                     std::to_string(suggestion) + " Hz"
                               : "";
        throw IncompatibleTaskError(
            "intermediate frequency " + std::to_string(f_inter_exact) +
            " Hz is not an integer multiple of the update frequency " +
            std::to_string(task.update_frequency_hz) + " Hz" + hint);
    }

    const double kernel_exact = f_inter_exact * task.window_length_s;
    if (!nearly_integer(kernel_exact) || kernel_exact < 1.0 - kIntEps) {
        throw IncompatibleTaskError(
            "window length " + std::to_string(task.window_length_s) +
            " s does not span an integer number of frames at " +
            std::to_string(f_inter_exact) + " Hz");
    }

    RapPlan plan;
    plan.kernel_sizes = downsampling_kernels;
    plan.strides = downsampling_kernels;  // k_i = s_i for the downsampling stage
    plan.kernel_sizes.push_back(static_cast<int>(std::llround(kernel_exact)));
    plan.strides.push_back(static_cast<int>(std::llround(stride_exact)));
    plan.intermediate_frequency_hz = f_inter;
    plan.pooling_layer_count = static_cast<int>(downsampling_kernels.size()) + 1;
    return plan;
}

int windows_per_trial(const OnlineTaskSpec& task) {
    task.validate();
    if (!task.trial_length_s) {
        throw DomainError("windows_per_trial requires a trial length");
    }
    const double hops = (*task.trial_length_s - task.window_length_s) *
                        task.update_frequency_hz;
    return static_cast<int>(std::floor(hops + kIntEps)) + 1;
}

double computational_gain(const OnlineTaskSpec& task) {
    task.validate();
    if (!task.trial_length_s) {
        throw DomainError("computational_gain requires a trial length");
    }
    return task.window_length_s / *task.trial_length_s *
           static_cast<double>(windows_per_trial(task));
}

std::pair<std::int64_t, std::int64_t> window_sample_range(int window_index,
                                                          const OnlineTaskSpec& task,
                                                          int sampling_frequency_hz) {
    task.validate();
    const double hop_exact = static_cast<double>(sampling_frequency_hz) /
                             task.update_frequency_hz;
    if (!nearly_integer(hop_exact)) {
        throw DomainError("sampling frequency must be divisible by the update frequency");
    }
    const int n_w = task.trial_length_s ? windows_per_trial(task)
                                        : std::numeric_limits<int>::max();
    if (window_index < 0 || window_index >= n_w) {
        throw IndexError("window index " + std::to_string(window_index) +
                         " outside [0, " + std::to_string(n_w) + ")");
    }
    const auto hop = static_cast<std::int64_t>(std::llround(hop_exact));
    const auto length = static_cast<std::int64_t>(
        std::llround(task.window_length_s * sampling_frequency_hz));
    const std::int64_t start = hop * window_index;
    return {start, start + length};
}

}  // namespace rapstream::rap
