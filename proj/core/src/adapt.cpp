#include "rapstream/adapt.hpp"

#include <algorithm>
#include <cmath>

#include "rapstream/train.hpp"

namespace rapstream::adapt {

namespace {
constexpr double kVarClamp = 1e-8;
}

std::string to_string(AlignMethod m) {
    switch (m) {
        case AlignMethod::none: return "none";
        case AlignMethod::euclidean: return "euclidean";
        case AlignMethod::riemannian: return "riemannian";
    }
    return "none";
}

AlignMethod align_method_from_string(const std::string& s) {
    if (s == "none") return AlignMethod::none;
    if (s == "euclidean" || s == "ea") return AlignMethod::euclidean;
    if (s == "riemannian" || s == "ra") return AlignMethod::riemannian;
    throw ConfigError("unknown alignment method '" + s + "'");
}

SpdMatrix window_covariance(const Matrix& window) {
    if (window.cols() < 1) throw ShapeError("covariance of an empty window");
    Matrix cov = window * window.transpose() / static_cast<double>(window.cols());
    try {
        return SpdMatrix(cov);
    } catch (const NumericalError& e) {
        throw NumericalError(std::string("degenerate window covariance: ") + e.what(),
                             e.residual());
    }
}

AlignmentReference::AlignmentReference(AlignMethod method_in, SpdMatrix rbar_in, double n)
    : method(method_in),
      rbar(std::move(rbar_in)),
      rbar_inv_sqrt(linalg::spd_power(rbar, -0.5).values()),
      sample_count(n) {
    if (method == AlignMethod::none) {
        throw ConfigError("alignment reference requires euclidean or riemannian method");
    }
    if (n < 0.0) throw DomainError("reference sample count must be non-negative");
}

AlignmentReference fit_reference(const std::vector<Matrix>& windows, AlignMethod method) {
    if (windows.empty()) throw DomainError("fit_reference needs at least one window");
    const auto dim = windows.front().rows();
    std::vector<SpdMatrix> covs;
    covs.reserve(windows.size());
    for (const Matrix& w : windows) {
        if (w.rows() != dim) throw ShapeError("windows have mixed channel counts");
        covs.push_back(window_covariance(w));
    }
    if (method == AlignMethod::euclidean) {
        Matrix acc = Matrix::Zero(dim, dim);
        for (const SpdMatrix& c : covs) acc += c.values();
        acc /= static_cast<double>(covs.size());
        return AlignmentReference(method, SpdMatrix(acc),
                                  static_cast<double>(covs.size()));
    }
    if (method == AlignMethod::riemannian) {
        return AlignmentReference(method, linalg::geometric_mean(covs),
                                  static_cast<double>(covs.size()));
    }
    throw ConfigError("fit_reference requires euclidean or riemannian method");
}

Matrix align(const Matrix& window, const AlignmentReference& ref) {
    if (window.rows() != ref.dim()) {
        throw ShapeError("window channel count " + std::to_string(window.rows()) +
                         " does not match reference dimension " + std::to_string(ref.dim()));
    }
    return ref.rbar_inv_sqrt * window;
}

AlignmentReference update_reference_online(const std::optional<AlignmentReference>& ref,
                                           const Matrix& new_window,
                                           AlignMethod cold_start_method) {
    const SpdMatrix cov = window_covariance(new_window);
    if (!ref || ref->sample_count <= 0.0) {
        const AlignMethod method = ref ? ref->method : cold_start_method;
        return AlignmentReference(method, cov, 1.0);
    }
    const double n = ref->sample_count + 1.0;
    if (ref->method == AlignMethod::euclidean) {
        Matrix updated =
            (ref->rbar.values() * (n - 1.0) + cov.values()) / n;
        return AlignmentReference(ref->method, SpdMatrix(updated), n);
    }
    const SpdMatrix stepped = linalg::geodesic_step(ref->rbar, cov, 1.0 / n);
    return AlignmentReference(ref->method, stepped, n);
}

std::vector<Matrix> slice_windows(const Matrix& trial, int window_samples, int hop_samples) {
    if (window_samples < 1 || hop_samples < 1) {
        throw DomainError("window and hop must be positive");
    }
    std::vector<Matrix> windows;
    for (std::int64_t start = 0; start + window_samples <= trial.cols();
         start += hop_samples) {
        windows.push_back(trial.middleCols(start, window_samples));
    }
    return windows;
}

// ---- AdaBN -----------------------------------------------------------------

AdaBnState init_adabn(const model::ModelState& state, double momentum) {
    if (momentum <= 0.0 || momentum >= 1.0) {
        throw ConfigError("AdaBN momentum must lie in (0, 1)");
    }
    AdaBnState s;
    s.momentum = momentum;
    for (const std::string& name : model::bn_layer_names()) {
        const auto& mean = state.buffer(name + ".running_mean").v;
        const auto& var = state.buffer(name + ".running_var").v;
        BnLayerStats layer;
        layer.mean.assign(mean.begin(), mean.end());
        layer.var.assign(var.begin(), var.end());
        s.layers.push_back(std::move(layer));
    }
    return s;
}

AdaBnState adabn_update(const AdaBnState& state, const std::vector<BnLayerStats>& batch) {
    if (batch.size() != state.layers.size()) {
        throw ShapeError("batch statistics layer count mismatch");
    }
    AdaBnState out = state;
    const double a = state.momentum;
    for (std::size_t layer = 0; layer < batch.size(); ++layer) {
        auto& dst = out.layers[layer];
        const auto& src = batch[layer];
        if (src.mean.size() != dst.mean.size() || src.var.size() != dst.var.size()) {
            throw ShapeError("batch statistics feature count mismatch at BN layer " +
                             std::to_string(layer));
        }
        for (std::size_t f = 0; f < dst.mean.size(); ++f) {
            dst.mean[f] = (1.0 - a) * dst.mean[f] + a * src.mean[f];
            double v = src.var[f];
            if (v <= 0.0) {
                v = kVarClamp;
                ++out.clamp_warnings;
            }
            dst.var[f] = (1.0 - a) * dst.var[f] + a * v;
        }
    }
    ++out.update_count;
    return out;
}

void adabn_apply(const AdaBnState& state, model::ModelState& target) {
    const auto names = model::bn_layer_names();
    if (state.layers.size() != names.size()) {
        throw ShapeError("AdaBN state layer count mismatch");
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
        auto& mean = target.buffer(names[i] + ".running_mean").v;
        auto& var = target.buffer(names[i] + ".running_var").v;
        if (mean.size() != state.layers[i].mean.size()) {
            throw ShapeError("AdaBN feature count mismatch at " + names[i]);
        }
        for (std::size_t f = 0; f < mean.size(); ++f) {
            mean[f] = static_cast<float>(state.layers[i].mean[f]);
            var[f] = static_cast<float>(std::max(state.layers[i].var[f], kVarClamp));
        }
    }
}

void adabn_replace(model::ModelState& state, const std::vector<Matrix>& calibration) {
    if (calibration.empty()) {
        throw ConfigError("AdaBN replacement needs at least one calibration window");
    }
    const model::BnAdaptHook<float> hook =
        [](int, const std::vector<double>& mean, const std::vector<double>& var,
           std::span<float> running_mean, std::span<float> running_var) {
            for (std::size_t f = 0; f < running_mean.size(); ++f) {
                running_mean[f] = static_cast<float>(mean[f]);
                running_var[f] = static_cast<float>(std::max(var[f], kVarClamp));
            }
        };
    model::forward_batch_adapt(state, calibration, hook);
}

model::Prediction forward_adabn_online(model::ModelState& state, AdaBnState& adabn,
                                       const Matrix& window) {
    AdaBnState* tracker = &adabn;
    const model::BnAdaptHook<float> hook =
        [tracker](int layer, const std::vector<double>& mean,
                  const std::vector<double>& var, std::span<float> running_mean,
                  std::span<float> running_var) {
            auto& dst = tracker->layers[static_cast<std::size_t>(layer)];
            const double a = tracker->momentum;
            for (std::size_t f = 0; f < dst.mean.size(); ++f) {
                dst.mean[f] = (1.0 - a) * dst.mean[f] + a * mean[f];
                double v = var[f];
                if (v <= 0.0) {
                    v = kVarClamp;
                    ++tracker->clamp_warnings;
                }
                dst.var[f] = (1.0 - a) * dst.var[f] + a * v;
                running_mean[f] = static_cast<float>(dst.mean[f]);
                running_var[f] = static_cast<float>(std::max(dst.var[f], kVarClamp));
            }
        };
    std::vector<Matrix> batch{window};
    model::Prediction pred = model::forward_batch_adapt(state, batch, hook).front();
    ++adabn.update_count;
    return pred;
}

// ---- Supervised fine-tuning --------------------------------------------------

FineTuneResult supervised_finetune(const model::ModelState& source,
                                   const data::TrialSet& calibration,
                                   const FineTuneConfig& cfg) {
    if (calibration.trials.empty()) {
        throw ConfigError("fine-tuning needs at least one labeled calibration trial");
    }
    FineTuneResult result;
    result.state = source;

    std::vector<data::Trial> aligned_storage;
    std::vector<const data::Trial*> trials;
    if (cfg.alignment != AlignMethod::none) {
        const auto& plan = source.config.rap_plan;
        const int window = plan.final_kernel() * plan.downsampling_factor();
        const int hop = plan.downsampling_factor() * plan.final_stride();
        std::vector<Matrix> windows;
        for (const data::Trial& t : calibration.trials) {
            auto w = slice_windows(t.data, window, hop);
            std::move(w.begin(), w.end(), std::back_inserter(windows));
        }
        result.reference = fit_reference(windows, cfg.alignment);
        aligned_storage.reserve(calibration.trials.size());
        for (const data::Trial& t : calibration.trials) {
            data::Trial a = t;
            a.data = align(t.data, *result.reference);
            aligned_storage.push_back(std::move(a));
        }
        for (const data::Trial& t : aligned_storage) trials.push_back(&t);
    } else {
        for (const data::Trial& t : calibration.trials) trials.push_back(&t);
    }

    if (cfg.epochs == 0) return result;  // nothing to do; model unchanged

    train::InnerLoopConfig loop;
    loop.learning_rate = cfg.learning_rate;
    loop.epochs = cfg.epochs;
    loop.warmup_epochs = cfg.warmup_epochs;
    loop.batch_size = cfg.batch_size;
    loop.shuffle_seed = cfg.shuffle_seed;
    const auto log = train::train_on_trials(result.state, trials, loop);
    for (const auto& entry : log) result.epoch_loss.push_back(entry.loss);
    return result;
}

// ---- Mode grammar -------------------------------------------------------------

AdaptationMode parse_adaptation_mode(const std::string& text) {
    AdaptationMode mode;
    if (text.empty() || text == "none") return mode;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t plus = text.find('+', start);
        const std::string tok = text.substr(
            start, plus == std::string::npos ? std::string::npos : plus - start);
        if (tok == "ft") {
            if (mode.finetune) throw ConfigError("duplicate 'ft' in adaptation mode");
            mode.finetune = true;
        } else if (tok == "ea" || tok == "ra") {
            if (mode.alignment != AlignMethod::none) {
                throw ConfigError("at most one alignment method in adaptation mode");
            }
            mode.alignment = tok == "ea" ? AlignMethod::euclidean : AlignMethod::riemannian;
        } else if (tok == "adabn") {
            if (mode.adabn) throw ConfigError("duplicate 'adabn' in adaptation mode");
            mode.adabn = true;
        } else {
            throw ConfigError("unknown adaptation token '" + tok + "' in '" + text + "'");
        }
        if (plus == std::string::npos) break;
        start = plus + 1;
    }
    if (mode.finetune && mode.adabn) {
        throw ConfigError("ft+adabn is not a supported combination");
    }
    return mode;
}

std::string to_string(const AdaptationMode& mode) {
    std::vector<std::string> parts;
    if (mode.finetune) parts.push_back("ft");
    if (mode.alignment == AlignMethod::euclidean) parts.push_back("ea");
    if (mode.alignment == AlignMethod::riemannian) parts.push_back("ra");
    if (mode.adabn) parts.push_back("adabn");
    if (parts.empty()) return "none";
    std::string out = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) out += "+" + parts[i];
    return out;
}

}  // namespace rapstream::adapt
