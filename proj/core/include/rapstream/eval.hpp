#ifndef RAPSTREAM_EVAL_HPP
#define RAPSTREAM_EVAL_HPP

#include <optional>
#include <string>
#include <vector>

#include "rapstream/data.hpp"
#include "rapstream/model.hpp"

namespace rapstream::eval {

struct TrialPrediction {
    model::Prediction prediction;
    int label = 0;
};

// Scoring convention throughout: an exact probability tie is counted as
// incorrect (argmax alone would favor the lowest class index and flatter the
// score).

/// TAcc: average the probability rows of each trial, compare the argmax of
/// the mean row to the label.
double trial_accuracy(const std::vector<TrialPrediction>& preds);

/// uTAcc(majority): per-window argmax votes, majority decides, vote tie is
/// incorrect.
double unaveraged_trial_accuracy(const std::vector<TrialPrediction>& preds);

/// WAcc over all windows plus the per-window-index accuracy curve (curve
/// only when every trial shares one window count).
struct WindowAccuracy {
    double wacc = 0.0;
    std::vector<double> curve;  // empty when window counts are ragged
};
WindowAccuracy window_accuracy(const std::vector<TrialPrediction>& preds);

struct MetricReport {
    double tacc = 0.0;
    double utacc = 0.0;
    double wacc = 0.0;
    std::vector<double> per_window_accuracy;
    std::int64_t n_trials = 0;
    std::int64_t n_windows = 0;
};
MetricReport compute_metrics(const std::vector<TrialPrediction>& preds);

/// Electrode discriminancy score: TAcc drop when one channel is zeroed at
/// inference. Negative values are meaningful and preserved. The optional
/// label restricts the evaluation to one class (class-wise EDS).
double eds(const model::ModelState& state, const std::vector<data::Trial>& trials,
           int channel, std::optional<int> class_label = std::nullopt);

std::vector<double> eds_all_channels(const model::ModelState& state,
                                     const std::vector<data::Trial>& trials,
                                     std::optional<int> class_label = std::nullopt);

// ---- statistics -------------------------------------------------------------

struct TTestResult {
    double t = 0.0;
    double p = 0.0;  // one-sided, alternative mean(a-b) > 0
    int n = 0;
};

/// One-sided paired t-test on per-subject metrics (d = a - b,
/// t = mean(d)/(sd(d)/sqrt(n)), p = P(T_{n-1} > t)). Throws NumericalError
/// when every difference is identical (sd = 0).
TTestResult paired_ttest_onesided(const std::vector<double>& a,
                                  const std::vector<double>& b);

/// Survival function of Student's t (regularized incomplete beta).
double student_t_sf(double t, int df);

/// P(X >= k) for X ~ Binomial(n, p).
double binomial_sf_at_least(int k, int n, double p);

}  // namespace rapstream::eval

#endif
