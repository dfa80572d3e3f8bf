#include "rapstream/eval.hpp"

#include <algorithm>
#include <cmath>

namespace rapstream::eval {

namespace {

// argmax with the tie reported; ties resolve to the lowest index.
struct ArgMax {
    int index = 0;
    bool tied = false;
};

ArgMax argmax_row(const double* row, int classes) {
    ArgMax out;
    double best = row[0];
    for (int k = 1; k < classes; ++k) {
        if (row[k] > best) {
            best = row[k];
            out.index = k;
            out.tied = false;
        } else if (row[k] == best) {
            out.tied = true;
        }
    }
    return out;
}

void check_nonempty(const std::vector<TrialPrediction>& preds) {
    if (preds.empty()) throw DomainError("metric over an empty prediction set");
    for (const TrialPrediction& p : preds) {
        if (p.prediction.positions < 1 || p.prediction.classes < 2) {
            throw ShapeError("trial prediction without rows");
        }
    }
}

}  // namespace

double trial_accuracy(const std::vector<TrialPrediction>& preds) {
    check_nonempty(preds);
    std::int64_t correct = 0;
    std::vector<double> mean_row;
    for (const TrialPrediction& tp : preds) {
        const model::Prediction& p = tp.prediction;
        mean_row.assign(static_cast<std::size_t>(p.classes), 0.0);
        for (int j = 0; j < p.positions; ++j) {
            for (int k = 0; k < p.classes; ++k) mean_row[static_cast<std::size_t>(k)] += p.at(j, k);
        }
        for (double& v : mean_row) v /= static_cast<double>(p.positions);
        const ArgMax am = argmax_row(mean_row.data(), p.classes);
        if (!am.tied && am.index == tp.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

double unaveraged_trial_accuracy(const std::vector<TrialPrediction>& preds) {
    check_nonempty(preds);
    std::int64_t correct = 0;
    for (const TrialPrediction& tp : preds) {
        const model::Prediction& p = tp.prediction;
        std::vector<int> votes(static_cast<std::size_t>(p.classes), 0);
        for (int j = 0; j < p.positions; ++j) {
            const ArgMax am = argmax_row(p.probs.data() + static_cast<std::size_t>(j) * p.classes,
                                         p.classes);
            ++votes[static_cast<std::size_t>(am.index)];
        }
        int best = 0;
        bool tied = false;
        for (int k = 1; k < p.classes; ++k) {
            if (votes[static_cast<std::size_t>(k)] > votes[static_cast<std::size_t>(best)]) {
                best = k;
                tied = false;
            } else if (votes[static_cast<std::size_t>(k)] == votes[static_cast<std::size_t>(best)]) {
                tied = true;
            }
        }
        if (!tied && best == tp.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

WindowAccuracy window_accuracy(const std::vector<TrialPrediction>& preds) {
    check_nonempty(preds);
    WindowAccuracy out;
    const int n_w = preds.front().prediction.positions;
    bool uniform = true;
    std::int64_t windows = 0, correct = 0;
    for (const TrialPrediction& tp : preds) {
        uniform = uniform && tp.prediction.positions == n_w;
        windows += tp.prediction.positions;
        for (int j = 0; j < tp.prediction.positions; ++j) {
            const ArgMax am = argmax_row(
                tp.prediction.probs.data() + static_cast<std::size_t>(j) * tp.prediction.classes,
                tp.prediction.classes);
            if (!am.tied && am.index == tp.label) ++correct;
        }
    }
    out.wacc = static_cast<double>(correct) / static_cast<double>(windows);
    if (uniform) {
        out.curve.assign(static_cast<std::size_t>(n_w), 0.0);
        for (const TrialPrediction& tp : preds) {
            for (int j = 0; j < n_w; ++j) {
                const ArgMax am = argmax_row(
                    tp.prediction.probs.data() +
                        static_cast<std::size_t>(j) * tp.prediction.classes,
                    tp.prediction.classes);
                if (!am.tied && am.index == tp.label) {
                    out.curve[static_cast<std::size_t>(j)] += 1.0;
                }
            }
        }
        for (double& v : out.curve) v /= static_cast<double>(preds.size());
    }
    return out;
}

MetricReport compute_metrics(const std::vector<TrialPrediction>& preds) {
    MetricReport report;
    report.tacc = trial_accuracy(preds);
    report.utacc = unaveraged_trial_accuracy(preds);
    const WindowAccuracy wa = window_accuracy(preds);
    report.wacc = wa.wacc;
    report.per_window_accuracy = wa.curve;
    report.n_trials = static_cast<std::int64_t>(preds.size());
    for (const TrialPrediction& tp : preds) report.n_windows += tp.prediction.positions;
    return report;
}

namespace {

std::vector<TrialPrediction> decode_trials(const model::ModelState& state,
                                           const std::vector<data::Trial>& trials,
                                           std::optional<int> class_label, int zero_channel) {
    std::vector<TrialPrediction> preds;
    for (const data::Trial& t : trials) {
        if (class_label && t.label != *class_label) continue;
        const linalg::Matrix input =
            zero_channel < 0 ? t.data
                             : model::zero_electrode(state.config, t.data, zero_channel);
        preds.push_back(TrialPrediction{model::forward(state, input), t.label});
    }
    if (preds.empty()) throw DomainError("no trials left after class filtering");
    return preds;
}

}  // namespace

double eds(const model::ModelState& state, const std::vector<data::Trial>& trials,
           int channel, std::optional<int> class_label) {
    if (channel < 0 || channel >= state.config.channel_count) {
        throw IndexError("channel index " + std::to_string(channel) + " outside [0, " +
                         std::to_string(state.config.channel_count) + ")");
    }
    const double base = trial_accuracy(decode_trials(state, trials, class_label, -1));
    const double dropped = trial_accuracy(decode_trials(state, trials, class_label, channel));
    return base - dropped;
}

std::vector<double> eds_all_channels(const model::ModelState& state,
                                     const std::vector<data::Trial>& trials,
                                     std::optional<int> class_label) {
    const double base = trial_accuracy(decode_trials(state, trials, class_label, -1));
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(state.config.channel_count));
    for (int c = 0; c < state.config.channel_count; ++c) {
        out.push_back(base - trial_accuracy(decode_trials(state, trials, class_label, c)));
    }
    return out;
}

// ---- statistics --------------------------------------------------------------

namespace {

double log_gamma(double x) { return std::lgamma(x); }

// Continued-fraction regularized incomplete beta I_x(a, b) (Lentz).
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-14;
    constexpr double kFpMin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) return h;
    }
    throw NumericalError("incomplete beta continued fraction did not converge");
}

double betainc(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front = log_gamma(a + b) - log_gamma(a) - log_gamma(b) +
                            a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * betacf(a, b, x) / a;
    }
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace

double student_t_sf(double t, int df) {
    if (df < 1) throw DomainError("degrees of freedom must be >= 1");
    const double x = static_cast<double>(df) / (static_cast<double>(df) + t * t);
    const double half_tail = 0.5 * betainc(0.5 * df, 0.5, x);
    return t >= 0.0 ? half_tail : 1.0 - half_tail;
}

double binomial_sf_at_least(int k, int n, double p) {
    if (n < 0 || k < 0 || p < 0.0 || p > 1.0) throw DomainError("invalid binomial parameters");
    if (k > n) return 0.0;
    if (p == 0.0) return k == 0 ? 1.0 : 0.0;
    if (p == 1.0) return 1.0;
    double total = 0.0;
    for (int i = k; i <= n; ++i) {
        const double log_term = log_gamma(n + 1.0) - log_gamma(i + 1.0) -
                                log_gamma(n - i + 1.0) + i * std::log(p) +
                                (n - i) * std::log1p(-p);
        total += std::exp(log_term);
    }
    return std::min(1.0, total);
}

TTestResult paired_ttest_onesided(const std::vector<double>& a,
                                  const std::vector<double>& b) {
    if (a.size() != b.size()) throw ShapeError("paired t-test needs equal-length inputs");
    if (a.size() < 2) throw DomainError("paired t-test needs n >= 2");
    const int n = static_cast<int>(a.size());
    double mean = 0.0;
    for (int i = 0; i < n; ++i) mean += a[static_cast<std::size_t>(i)] - b[static_cast<std::size_t>(i)];
    mean /= n;
    double ss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = a[static_cast<std::size_t>(i)] - b[static_cast<std::size_t>(i)] - mean;
        ss += d * d;
    }
    const double sd = std::sqrt(ss / (n - 1));
    TTestResult result;
    result.n = n;
    // Representation noise on constant differences still counts as sd = 0.
    if (sd <= 1e-12 * std::max(1.0, std::abs(mean))) {
        // Identical inputs are the symmetric null (t = 0); a constant nonzero
        // difference has no spread to test against.
        if (mean == 0.0) {
            result.t = 0.0;
            result.p = 0.5;
            return result;
        }
        throw NumericalError("degenerate paired t-test: constant nonzero differences (sd = 0)");
    }
    result.t = mean / (sd / std::sqrt(static_cast<double>(n)));
    result.p = student_t_sf(result.t, n - 1);
    return result;
}

}  // namespace rapstream::eval
