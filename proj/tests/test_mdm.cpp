#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "rapstream/mdm.hpp"
#include "testutil.hpp"

using namespace rapstream;
using namespace rapstream::mdm;
using testutil::random_invertible;
using testutil::random_matrix;
using testutil::random_spd;

namespace {

adapt::AlignmentReference identity_ref(int dim) {
    return adapt::AlignmentReference(adapt::AlignMethod::riemannian,
                                     SpdMatrix(Matrix::Identity(dim, dim)), 1.0);
}

// Window whose (normalized) covariance equals the given SPD matrix.
Matrix window_with_covariance(const SpdMatrix& cov, int samples) {
    const int dim = static_cast<int>(cov.dim());
    Matrix e = Matrix::Zero(dim, samples);
    for (int c = 0; c < dim; ++c) {
        e(c, 2 * c) = std::sqrt(static_cast<double>(samples) / 2.0);
        e(c, 2 * c + 1) = -std::sqrt(static_cast<double>(samples) / 2.0);
    }
    // e * e^T = samples * I, so (Lc e)(Lc e)^T / samples = cov.
    const Matrix root = linalg::spd_power(cov, 0.5).values();
    return root * e;
}

Matrix scalar_window(double var, int samples = 4) {
    Matrix w(1, samples);
    const double a = std::sqrt(var);
    for (int i = 0; i < samples; ++i) w(0, i) = (i % 2 == 0 ? a : -a);
    return w;
}

}  // namespace

TEST(MdmFit, OneWindowPerClassUsesItsCovariance) {
    std::mt19937_64 rng(1);
    const Matrix w0 = random_matrix(rng, 3, 64);
    const Matrix w1 = random_matrix(rng, 3, 64);
    const MdmModel model = mdm_fit({w0, w1}, {0, 1}, 2, identity_ref(3));
    EXPECT_LT((model.class_means[0].values() - adapt::window_covariance(w0).values()).norm(),
              1e-10);
    EXPECT_LT((model.class_means[1].values() - adapt::window_covariance(w1).values()).norm(),
              1e-10);
}

TEST(MdmFit, ScalarClassMeans) {
    const MdmModel model =
        mdm_fit({scalar_window(1.0), scalar_window(std::exp(4.0))}, {0, 1}, 2,
                identity_ref(1));
    EXPECT_NEAR(model.class_means[0].values()(0, 0), 1.0, 1e-9);
    EXPECT_NEAR(model.class_means[1].values()(0, 0), std::exp(4.0), 1e-6);
}

TEST(MdmFit, OrderInvariant) {
    std::mt19937_64 rng(2);
    std::vector<Matrix> windows;
    std::vector<int> labels;
    for (int i = 0; i < 12; ++i) {
        windows.push_back(random_matrix(rng, 3, 48));
        labels.push_back(i % 2);
    }
    const MdmModel a = mdm_fit(windows, labels, 2, identity_ref(3));

    std::vector<std::size_t> perm(windows.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Matrix> shuffled;
    std::vector<int> shuffled_labels;
    for (const std::size_t i : perm) {
        shuffled.push_back(windows[i]);
        shuffled_labels.push_back(labels[i]);
    }
    const MdmModel b = mdm_fit(shuffled, shuffled_labels, 2, identity_ref(3));
    for (int k = 0; k < 2; ++k) {
        EXPECT_LT((a.class_means[static_cast<std::size_t>(k)].values() -
                   b.class_means[static_cast<std::size_t>(k)].values())
                      .norm(),
                  1e-8);
    }
}

TEST(MdmFit, MissingClassRejected) {
    std::mt19937_64 rng(3);
    EXPECT_THROW(mdm_fit({random_matrix(rng, 2, 32)}, {0}, 2, identity_ref(2)),
                 ConfigError);
}

TEST(MdmPredict, WindowAtClassMeanWins) {
    std::mt19937_64 rng(4);
    const SpdMatrix mean0 = random_spd(rng, 3);
    const SpdMatrix mean1 = random_spd(rng, 3);
    MdmModel model{.class_means = {mean0, mean1},
                   .source_reference = identity_ref(3),
                   .softmax_temperature = 1.0};
    const Matrix w = window_with_covariance(mean0, 64);
    const std::vector<double> probs = mdm_predict(w, model, identity_ref(3));
    EXPECT_GT(probs[0], 0.5);
    const std::vector<double> d = mdm_distances(w, model, identity_ref(3));
    EXPECT_NEAR(d[0], 0.0, 1e-6);
}

TEST(MdmPredict, EquidistantWindowSplitsEvenly) {
    // Scalar classes e^{-1} and e^{+1}: variance 1 is equidistant in log space.
    MdmModel model{.class_means = {SpdMatrix(Matrix::Constant(1, 1, std::exp(-1.0))),
                                   SpdMatrix(Matrix::Constant(1, 1, std::exp(1.0)))},
                   .source_reference = identity_ref(1),
                   .softmax_temperature = 1.0};
    const std::vector<double> probs = mdm_predict(scalar_window(1.0), model, identity_ref(1));
    EXPECT_NEAR(probs[0], 0.5, 1e-9);
    EXPECT_NEAR(probs[1], 0.5, 1e-9);
}

TEST(MdmPredict, SeparatedClustersClassifyPerfectly) {
    std::mt19937_64 rng(5);
    // Clusters around two well-separated anchors.
    const SpdMatrix anchor0(Matrix(Matrix::Identity(3, 3) * 1.0));
    const SpdMatrix anchor1(Matrix(Matrix::Identity(3, 3) * 50.0));
    std::vector<Matrix> train_windows;
    std::vector<int> train_labels;
    std::vector<Matrix> test_windows;
    std::vector<int> test_labels;
    for (int i = 0; i < 20; ++i) {
        const double jitter = 0.8 + 0.4 * static_cast<double>(rng() % 100) / 100.0;
        const SpdMatrix cov(Matrix((i % 2 ? anchor1 : anchor0).values() * jitter));
        auto& windows = i < 10 ? train_windows : test_windows;
        auto& labels = i < 10 ? train_labels : test_labels;
        windows.push_back(window_with_covariance(cov, 48));
        labels.push_back(i % 2);
    }
    const MdmModel model = mdm_fit(train_windows, train_labels, 2, identity_ref(3));
    for (std::size_t i = 0; i < test_windows.size(); ++i) {
        const auto probs = mdm_predict(test_windows[i], model, identity_ref(3));
        const int pred = probs[1] > probs[0] ? 1 : 0;
        EXPECT_EQ(pred, test_labels[i]);
    }
}

TEST(MdmPredict, ArgmaxInvariantUnderCommonCongruence) {
    std::mt19937_64 rng(6);
    for (int rep = 0; rep < 10; ++rep) {
        const SpdMatrix mean0 = random_spd(rng, 3);
        const SpdMatrix mean1 = random_spd(rng, 3);
        const Matrix w = random_matrix(rng, 3, 48);
        MdmModel model{.class_means = {mean0, mean1},
                       .source_reference = identity_ref(3),
                       .softmax_temperature = 1.0};
        const auto base = mdm_predict(w, model, identity_ref(3));

        const Matrix t = random_invertible(rng, 3).transpose();
        MdmModel congruent{
            .class_means = {SpdMatrix(Matrix(t * mean0.values() * t.transpose())),
                            SpdMatrix(Matrix(t * mean1.values() * t.transpose()))},
            .source_reference = identity_ref(3),
            .softmax_temperature = 1.0};
        const auto moved = mdm_predict(t * w, congruent, identity_ref(3));
        EXPECT_EQ(base[0] > base[1], moved[0] > moved[1]);
        // Softmax over negative distances never flips the argmin.
        const auto d = mdm_distances(t * w, congruent, identity_ref(3));
        EXPECT_EQ(moved[0] > moved[1], d[0] < d[1]);
    }
}

TEST(GenericRecentering, ZeroPriorMatchesOnlineEstimator) {
    std::mt19937_64 rng(7);
    const adapt::AlignmentReference source(adapt::AlignMethod::riemannian,
                                           random_spd(rng, 3), 10.0);
    adapt::AlignmentReference gr = make_gr_reference(source, 0.0);
    std::optional<adapt::AlignmentReference> online;
    for (int i = 0; i < 5; ++i) {
        const Matrix w = random_matrix(rng, 3, 48);
        gr = gr_update(gr, w);
        online = adapt::update_reference_online(online, w, adapt::AlignMethod::riemannian);
        EXPECT_LT((gr.rbar.values() - online->rbar.values()).norm(), 1e-9);
    }
}

TEST(GenericRecentering, ContractsTowardConstantStream) {
    std::mt19937_64 rng(8);
    const SpdMatrix target = random_spd(rng, 3);
    const Matrix w = window_with_covariance(target, 48);
    adapt::AlignmentReference ref =
        make_gr_reference(adapt::AlignmentReference(adapt::AlignMethod::riemannian,
                                                    random_spd(rng, 3), 1.0),
                          4.0);
    double last = linalg::airm_distance(ref.rbar, target);
    EXPECT_GT(last, 0.0);
    for (int i = 0; i < 8; ++i) {
        ref = gr_update(ref, w);
        const double now = linalg::airm_distance(ref.rbar, target);
        EXPECT_LT(now, last);
        last = now;
    }
}

TEST(GenericRecentering, NoUpdatesKeepsSource) {
    std::mt19937_64 rng(9);
    const adapt::AlignmentReference source(adapt::AlignMethod::riemannian,
                                           random_spd(rng, 3), 5.0);
    const adapt::AlignmentReference gr = make_gr_reference(source, 3.0);
    EXPECT_LT((gr.rbar.values() - source.rbar.values()).norm(), 1e-12);
}

TEST(Par, BlendZeroKeepsSourceMeans) {
    std::mt19937_64 rng(10);
    std::vector<Matrix> windows;
    std::vector<int> labels;
    for (int i = 0; i < 8; ++i) {
        windows.push_back(random_matrix(rng, 3, 48));
        labels.push_back(i % 2);
    }
    const MdmModel model = mdm_fit(windows, labels, 2, identity_ref(3));
    const ParResult blended = par_update(model, windows, labels, 0.0);
    for (int k = 0; k < 2; ++k) {
        EXPECT_LT((blended.model.class_means[static_cast<std::size_t>(k)].values() -
                   model.class_means[static_cast<std::size_t>(k)].values())
                      .norm(),
                  1e-10);
    }
}

TEST(Par, BlendOneTakesTargetMeans) {
    std::mt19937_64 rng(11);
    std::vector<Matrix> source_windows, target_windows;
    std::vector<int> labels;
    for (int i = 0; i < 8; ++i) {
        source_windows.push_back(random_matrix(rng, 3, 48));
        target_windows.push_back(random_matrix(rng, 3, 48) * 2.0);
        labels.push_back(i % 2);
    }
    const MdmModel model = mdm_fit(source_windows, labels, 2, identity_ref(3));
    const ParResult blended = par_update(model, target_windows, labels, 1.0);

    // Expected: class means of the target windows aligned by the refit reference.
    const auto ref = adapt::fit_reference(target_windows, adapt::AlignMethod::riemannian);
    std::vector<std::vector<SpdMatrix>> per_class(2);
    for (std::size_t i = 0; i < target_windows.size(); ++i) {
        per_class[static_cast<std::size_t>(labels[i])].push_back(
            adapt::window_covariance(adapt::align(target_windows[i], ref)));
    }
    for (int k = 0; k < 2; ++k) {
        const SpdMatrix expected = linalg::geometric_mean(per_class[static_cast<std::size_t>(k)]);
        EXPECT_LT((blended.model.class_means[static_cast<std::size_t>(k)].values() -
                   expected.values())
                      .norm(),
                  1e-6);
    }
}

TEST(Par, MissingClassFallsBackToSource) {
    std::mt19937_64 rng(12);
    std::vector<Matrix> windows;
    std::vector<int> labels;
    for (int i = 0; i < 8; ++i) {
        windows.push_back(random_matrix(rng, 3, 48));
        labels.push_back(i % 2);
    }
    const MdmModel model = mdm_fit(windows, labels, 2, identity_ref(3));

    std::vector<Matrix> calib(windows.begin(), windows.begin() + 3);
    const ParResult result = par_update(model, calib, {0, 0, 0}, 0.7);
    EXPECT_FALSE(result.class_from_source[0]);
    EXPECT_TRUE(result.class_from_source[1]);
    EXPECT_LT((result.model.class_means[1].values() - model.class_means[1].values()).norm(),
              1e-12);
}
