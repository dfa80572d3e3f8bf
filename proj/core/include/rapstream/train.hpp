#ifndef RAPSTREAM_TRAIN_HPP
#define RAPSTREAM_TRAIN_HPP

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rapstream/adapt.hpp"
#include "rapstream/data.hpp"
#include "rapstream/model.hpp"

namespace rapstream::train {

enum class Split { within_subject, cross_subject_loso };

Split split_from_string(const std::string& s);
std::string to_string(Split split);

struct TrainConfig {
    double learning_rate = 1e-3;
    int epochs = 100;
    int warmup_epochs = 20;
    int batch_size = 64;
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    Split split = Split::cross_subject_loso;
    adapt::AlignMethod alignment = adapt::AlignMethod::none;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
};

/// Linear warmup to learning_rate over warmup_epochs, then cosine decay to
/// ~0 at the final epoch. Continuous at the junction (both sides equal lr).
double lr_at(int epoch, const TrainConfig& cfg);

struct AdamState {
    std::vector<model::NamedTensor<float>> m;
    std::vector<model::NamedTensor<float>> v;
    std::int64_t step = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

AdamState init_adam(const model::ModelState& state, double beta1 = 0.9,
                    double beta2 = 0.999, double eps = 1e-8);

/// Bias-corrected Adam on one flat tensor; step is 1-based.
template <typename S>
void adam_update(std::span<S> params, std::span<const S> grads, std::span<S> m,
                 std::span<S> v, std::int64_t step, double lr, double beta1, double beta2,
                 double eps) {
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = static_cast<double>(grads[i]);
        const double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * g;
        const double vi = beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * g * g;
        m[i] = static_cast<S>(mi);
        v[i] = static_cast<S>(vi);
        params[i] -= static_cast<S>(lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
    }
}

/// One optimizer step over every model parameter. Throws
/// TrainingDivergedError (naming the tensor) on non-finite gradients.
void adam_step(model::ModelState& state, const model::Gradients<float>& grads,
               AdamState& adam, double lr);

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
    double wall_ms = 0.0;
};

/// One line of JSON per epoch: {"epoch":..,"lr":..,"loss":..,"wall_ms":..}.
std::string epoch_log_json(const EpochLog& log);
void write_training_log(const std::string& path, const std::vector<EpochLog>& log);

/// Cross-entropy over all positions of jointly decoded trials; every
/// position inherits the trial label. Returns the loss and fills the
/// per-sample upstream gradients (dL/dprobabilities) for backward.
double joint_cross_entropy(const std::vector<model::Prediction>& preds,
                           const std::vector<int>& labels,
                           std::vector<std::vector<double>>& upstream);

struct InnerLoopConfig {
    double learning_rate = 1e-3;
    int epochs = 100;
    int warmup_epochs = 20;
    int batch_size = 64;
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
    std::uint64_t shuffle_seed = 0;
};

/// Epoch/batch loop over the given trials (joint decoding, Adam,
/// warmup+cosine schedule); mutates the state in place.
std::vector<EpochLog> train_on_trials(model::ModelState& state,
                                      const std::vector<const data::Trial*>& trials,
                                      const InnerLoopConfig& cfg);

struct TrainingRun {
    std::uint64_t seed = 0;
    model::ModelState state;
    std::vector<EpochLog> log;
    std::optional<adapt::AlignmentReference> source_reference;  // pooled, when aligned
};

/// Source training. cross_subject_loso trains on the offline trials of every
/// subject except `target_subject` (whose data, online in particular, is
/// never requested from the cohort); within_subject trains on the target's
/// offline trials. One run per seed, deterministic per seed.
std::vector<TrainingRun> run_training(data::LazyCohort& cohort,
                                      const std::string& target_subject,
                                      const model::ModelConfig& mcfg,
                                      const TrainConfig& cfg);

struct Aggregate {
    double mean = 0.0;
    double stddev = 0.0;  // sample std; 0 (flagged) for a single seed
    bool single_value = false;
};

Aggregate multi_seed_aggregate(const std::vector<double>& values);
std::map<std::string, Aggregate> multi_seed_aggregate(
    const std::map<std::string, std::vector<double>>& per_metric);

}  // namespace rapstream::train

#endif
