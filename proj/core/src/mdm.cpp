#include "rapstream/mdm.hpp"

#include <algorithm>
#include <cmath>

namespace rapstream::mdm {

MdmModel mdm_fit(const std::vector<Matrix>& aligned_windows, const std::vector<int>& labels,
                 int class_count, adapt::AlignmentReference source_reference) {
    if (aligned_windows.size() != labels.size() || aligned_windows.empty()) {
        throw ShapeError("windows and labels must pair up");
    }
    if (class_count < 2) throw ConfigError("class count must be >= 2");

    std::vector<std::vector<SpdMatrix>> per_class(static_cast<std::size_t>(class_count));
    for (std::size_t i = 0; i < aligned_windows.size(); ++i) {
        const int y = labels[i];
        if (y < 0 || y >= class_count) throw DomainError("label outside the class range");
        per_class[static_cast<std::size_t>(y)].push_back(
            adapt::window_covariance(aligned_windows[i]));
    }
    MdmModel model{.class_means = {}, .source_reference = std::move(source_reference)};
    for (int k = 0; k < class_count; ++k) {
        auto& covs = per_class[static_cast<std::size_t>(k)];
        if (covs.empty()) {
            throw ConfigError("class " + std::to_string(k) + " has no training windows");
        }
        model.class_means.push_back(linalg::geometric_mean(covs));
    }
    return model;
}

std::vector<double> mdm_distances(const Matrix& window, const MdmModel& model,
                                  const adapt::AlignmentReference& ref) {
    if (model.class_means.empty()) throw ConfigError("MDM model is not fitted");
    const SpdMatrix cov = adapt::window_covariance(adapt::align(window, ref));
    std::vector<double> distances;
    distances.reserve(model.class_means.size());
    for (const SpdMatrix& mean : model.class_means) {
        distances.push_back(linalg::airm_distance(cov, mean));
    }
    return distances;
}

std::vector<double> mdm_predict(const Matrix& window, const MdmModel& model,
                                const adapt::AlignmentReference& ref) {
    const std::vector<double> d = mdm_distances(window, model, ref);
    const double tau = model.softmax_temperature;
    double mn = *std::min_element(d.begin(), d.end());
    double z = 0.0;
    std::vector<double> probs(d.size());
    for (std::size_t k = 0; k < d.size(); ++k) {
        probs[k] = std::exp(-(d[k] - mn) / tau);
        z += probs[k];
    }
    for (double& p : probs) p /= z;
    return probs;
}

adapt::AlignmentReference make_gr_reference(const adapt::AlignmentReference& source,
                                            double prior_weight) {
    if (prior_weight < 0.0) throw DomainError("prior weight must be non-negative");
    adapt::AlignmentReference ref(adapt::AlignMethod::riemannian, source.rbar, prior_weight);
    return ref;
}

adapt::AlignmentReference gr_update(const adapt::AlignmentReference& ref,
                                    const Matrix& window) {
    return adapt::update_reference_online(ref, window);
}

ParResult par_update(const MdmModel& model, const std::vector<Matrix>& calibration_windows,
                     const std::vector<int>& labels, double blend_weight) {
    if (calibration_windows.size() != labels.size() || calibration_windows.empty()) {
        throw ShapeError("calibration windows and labels must pair up");
    }
    if (blend_weight < 0.0 || blend_weight > 1.0) {
        throw DomainError("blend weight must lie in [0, 1]");
    }
    const int class_count = static_cast<int>(model.class_means.size());

    ParResult result{
        .model = model,
        .reference = adapt::fit_reference(calibration_windows,
                                          model.source_reference.method),
        .class_from_source = std::vector<bool>(static_cast<std::size_t>(class_count), false)};

    std::vector<std::vector<SpdMatrix>> per_class(static_cast<std::size_t>(class_count));
    for (std::size_t i = 0; i < calibration_windows.size(); ++i) {
        const int y = labels[i];
        if (y < 0 || y >= class_count) throw DomainError("label outside the class range");
        per_class[static_cast<std::size_t>(y)].push_back(adapt::window_covariance(
            adapt::align(calibration_windows[i], result.reference)));
    }
    for (int k = 0; k < class_count; ++k) {
        auto& covs = per_class[static_cast<std::size_t>(k)];
        if (covs.empty()) {
            result.class_from_source[static_cast<std::size_t>(k)] = true;
            continue;  // keep the source mean
        }
        const SpdMatrix target_mean = linalg::geometric_mean(covs);
        result.model.class_means[static_cast<std::size_t>(k)] = linalg::geodesic_step(
            model.class_means[static_cast<std::size_t>(k)], target_mean, blend_weight);
    }
    return result;
}

}  // namespace rapstream::mdm
