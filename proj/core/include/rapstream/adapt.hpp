#ifndef RAPSTREAM_ADAPT_HPP
#define RAPSTREAM_ADAPT_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rapstream/data.hpp"
#include "rapstream/linalg.hpp"
#include "rapstream/model.hpp"

namespace rapstream::adapt {

using linalg::Matrix;
using linalg::SpdMatrix;

enum class AlignMethod { none, euclidean, riemannian };

std::string to_string(AlignMethod m);
AlignMethod align_method_from_string(const std::string& s);

/// Window covariance X*X^T normalized by the sample count. The uniform
/// normalization rescales the reference (and hence the aligned data) by a
/// constant that batch norm absorbs; it keeps small-window covariances well
/// conditioned.
SpdMatrix window_covariance(const Matrix& window);

/// A domain's reference state: mean covariance, its cached inverse square
/// root, and the number of windows absorbed so far (fractional values carry
/// prior weight for seeded online estimators).
struct AlignmentReference {
    AlignMethod method = AlignMethod::euclidean;
    SpdMatrix rbar;
    Matrix rbar_inv_sqrt;
    double sample_count = 0.0;

    AlignmentReference(AlignMethod method, SpdMatrix rbar_in, double n);
    int dim() const { return static_cast<int>(rbar.dim()); }
};

/// Batch reference: arithmetic (euclidean) or Karcher (riemannian) mean of
/// the window covariances.
AlignmentReference fit_reference(const std::vector<Matrix>& windows, AlignMethod method);

/// Re-center one window: X~ = Rbar^{-1/2} X.
Matrix align(const Matrix& window, const AlignmentReference& ref);

/// Single-instance streaming update, equal weighting, no buffer:
/// euclidean keeps the exact running arithmetic mean; riemannian takes a
/// 1/(n+1) geodesic step toward the new covariance. std::nullopt cold-starts
/// from the window's own covariance with `cold_start_method`. The inverse
/// square root is recomputed on every update.
AlignmentReference update_reference_online(
    const std::optional<AlignmentReference>& ref, const Matrix& new_window,
    AlignMethod cold_start_method = AlignMethod::euclidean);

/// Slice the T_w*f_s sample windows of a trial at the task hop.
std::vector<Matrix> slice_windows(const Matrix& trial, int window_samples, int hop_samples);

// ---- Adaptive batch normalization ------------------------------------------

struct BnLayerStats {
    std::vector<double> mean;
    std::vector<double> var;
};

/// Target-domain BN statistics, exponentially tracked per layer
/// (mu_i = (1-alpha) mu_{i-1} + alpha E[X], seeded from the source stats).
struct AdaBnState {
    std::vector<BnLayerStats> layers;
    double momentum = 0.001;
    std::int64_t update_count = 0;
    std::int64_t clamp_warnings = 0;  // non-positive variance estimates clamped
};

AdaBnState init_adabn(const model::ModelState& state, double momentum = 0.001);

/// One exponential update of every layer from the given batch statistics.
AdaBnState adabn_update(const AdaBnState& state, const std::vector<BnLayerStats>& batch);

/// Write the tracked statistics into the model's running-stat buffers.
void adabn_apply(const AdaBnState& state, model::ModelState& target);

/// Replace the running statistics with exact statistics of the calibration
/// windows (layer by layer, each computed under the already-replaced earlier
/// layers).
void adabn_replace(model::ModelState& state, const std::vector<Matrix>& calibration);

/// Online single-instance step: update the tracked statistics with this
/// window's layer statistics, install them, and decode the window.
model::Prediction forward_adabn_online(model::ModelState& state, AdaBnState& adabn,
                                       const Matrix& window);

// ---- Supervised fine-tuning -------------------------------------------------

struct FineTuneConfig {
    double learning_rate = 1e-4;
    int epochs = 20;
    int warmup_epochs = 0;  // cosine decay from the first epoch
    int batch_size = 64;
    std::uint64_t shuffle_seed = 0;
    AlignMethod alignment = AlignMethod::none;
};

struct FineTuneResult {
    model::ModelState state;
    std::optional<AlignmentReference> reference;  // fit on the calibration set
    std::vector<double> epoch_loss;
};

/// Continue joint-decoding training from a source checkpoint on the target's
/// labeled calibration trials only (BN statistics update implicitly). With
/// alignment enabled the reference is fit on the calibration windows and the
/// trials are aligned before training.
FineTuneResult supervised_finetune(const model::ModelState& source,
                                   const data::TrialSet& calibration,
                                   const FineTuneConfig& cfg);

// ---- Mode grammar -----------------------------------------------------------

/// `none | ft | ea | ra | adabn | ea+adabn | ra+adabn | ft+ea | ft+ra`
struct AdaptationMode {
    bool finetune = false;
    AlignMethod alignment = AlignMethod::none;
    bool adabn = false;

    bool operator==(const AdaptationMode&) const = default;
};

AdaptationMode parse_adaptation_mode(const std::string& text);
std::string to_string(const AdaptationMode& mode);

}  // namespace rapstream::adapt

#endif
