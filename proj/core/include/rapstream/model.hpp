#ifndef RAPSTREAM_MODEL_HPP
#define RAPSTREAM_MODEL_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rapstream/linalg.hpp"
#include "rapstream/rap.hpp"
#include "rapstream/tensor.hpp"

namespace rapstream::model {

using linalg::Matrix;
using tensor::NamedTensor;
using tensor::Tensor;

enum class PaddingMode { valid, same };
enum class Mode { train, infer };

std::string to_string(PaddingMode mode);
PaddingMode padding_mode_from_string(const std::string& s);

/// Shallow two-block convolutional decoder whose final pooling layer is
/// RAP-planned: temporal conv + BN, depthwise spatial conv + BN + ELU,
/// downsampling mean-pool, dropout, separable conv (depthwise temporal +
/// pointwise) + BN + ELU, window-extraction mean-pool, dropout, per-position
/// linear readout, softmax.
struct ModelConfig {
    int channel_count = 0;
    int temporal_filters = 16;     // F1
    int temporal_kernel = 64;      // samples at f_s
    int depth_multiplier = 2;      // D
    int second_block_filters = 32; // F2
    int second_kernel = 16;        // frames at f_inter
    std::string activation = "elu";
    std::string pooling = "mean";
    double dropout_rate = 0.25;
    PaddingMode padding_mode = PaddingMode::valid;
    rap::RapPlan rap_plan;
    int class_count = 2;
    double bn_momentum = 0.1;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

/// Per-position class probabilities (one row per window position).
struct Prediction {
    int positions = 0;
    int classes = 0;
    std::vector<double> probs;  // row-major positions x classes
    // True where the row's receptive field would touch zero padding. With
    // the window-centered pooling used here this is empty-by-construction
    // for any geometry the config validator accepts; kept for reporting.
    std::vector<bool> boundary;

    double at(int position, int cls) const {
        return probs[static_cast<std::size_t>(position) * classes + cls];
    }
};

template <typename S>
struct BasicModelState {
    ModelConfig config;
    std::vector<NamedTensor<S>> params;   // learnable tensors
    std::vector<NamedTensor<S>> buffers;  // BN running statistics
    std::uint64_t rng_seed = 0;
    std::uint64_t rng_counter = 0;  // advanced by dropout draws
    std::uint64_t version = 0;      // bumped on any parameter mutation

    Tensor<S>& param(const std::string& name);
    const Tensor<S>& param(const std::string& name) const;
    Tensor<S>& buffer(const std::string& name);
    const Tensor<S>& buffer(const std::string& name) const;
};

using ModelState = BasicModelState<float>;
using ModelStateD = BasicModelState<double>;

template <typename S>
struct Gradients {
    std::vector<NamedTensor<S>> tensors;  // aligned with ModelState::params
};

template <typename S>
struct ForwardCache;  // defined in model.cpp

template <typename S>
using CachePtr = std::shared_ptr<ForwardCache<S>>;

/// Hook invoked at every BN layer during an adapting forward pass with the
/// per-feature statistics of that layer's input batch. The running-stat
/// spans may be mutated; normalization then uses the mutated values.
template <typename S>
using BnAdaptHook =
    std::function<void(int bn_layer, const std::vector<double>& batch_mean,
                       const std::vector<double>& batch_var, std::span<S> running_mean,
                       std::span<S> running_var)>;

template <typename S>
BasicModelState<S> init_model(const ModelConfig& cfg, std::uint64_t seed);

ModelStateD to_double(const ModelState& state);

/// Output row count for an input of the given sample length; throws
/// ShapeError (listing the expected divisibilities) when the length is not
/// window + n * hop.
int output_positions(const ModelConfig& cfg, std::int64_t input_samples);

/// Inference forward: running BN statistics, no dropout. Deterministic.
template <typename S>
Prediction forward(const BasicModelState<S>& state, const Matrix& x);

template <typename S>
std::vector<Prediction> forward_batch(const BasicModelState<S>& state,
                                      const std::vector<Matrix>& batch);

/// Training forward on a batch: batch-statistic BN (running stats updated in
/// place), dropout on, activations cached for backward.
template <typename S>
std::pair<std::vector<Prediction>, CachePtr<S>> forward_train(
    BasicModelState<S>& state, const std::vector<Matrix>& batch);

/// Backpropagate per-sample upstream gradients (dL/dprobabilities, one
/// positions*classes row-major vector per batch sample) through the cached
/// forward. Gradients are summed over the batch. Throws InvalidStateError if
/// the state changed since the forward.
template <typename S>
Gradients<S> backward(const BasicModelState<S>& state, ForwardCache<S>& cache,
                      const std::vector<std::vector<double>>& upstream);

/// Inference forward over a batch that surfaces each BN layer's input batch
/// statistics to `hook` (which may rewrite the running stats in place before
/// they are used). Dropout stays off.
template <typename S>
std::vector<Prediction> forward_batch_adapt(BasicModelState<S>& state,
                                            const std::vector<Matrix>& batch,
                                            const BnAdaptHook<S>& hook);

/// Re-plan the pooling stage. Learned parameters are copied bit-identically;
/// only pooling metadata changes. The new plan must imply the same sampling
/// frequency and leave a valid window geometry.
template <typename S>
BasicModelState<S> apply_rap(const BasicModelState<S>& state, const rap::RapPlan& new_plan);

/// Copy of x with one channel row zeroed.
Matrix zero_electrode(const ModelConfig& cfg, const Matrix& x, int channel_index);

/// Names of the BN layers in hook order (bn1, bn2, bn3).
std::vector<std::string> bn_layer_names();
int bn_feature_count(const ModelConfig& cfg, int bn_layer);

extern template struct BasicModelState<float>;
extern template struct BasicModelState<double>;

}  // namespace rapstream::model

#endif
