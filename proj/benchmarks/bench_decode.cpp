#include <benchmark/benchmark.h>

#include <random>

#include "rapstream/adapt.hpp"
#include "rapstream/mdm.hpp"
#include "rapstream/model.hpp"
#include "rapstream/rap.hpp"
#include "rapstream/train.hpp"

using namespace rapstream;

namespace {

linalg::Matrix random_matrix(std::mt19937_64& rng, int rows, int cols) {
    std::normal_distribution<double> normal(0.0, 1.0);
    linalg::Matrix m(rows, cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) m(r, c) = normal(rng);
    }
    return m;
}

model::ModelConfig dreyer_config() {
    rap::OnlineTaskSpec task;
    task.window_length_s = 1.0;
    task.update_frequency_hz = 16.0;
    model::ModelConfig cfg;
    cfg.channel_count = 27;
    cfg.rap_plan = rap::plan_rap(256, {8}, task);
    return cfg;
}

void BM_SingleWindowForward(benchmark::State& state) {
    const model::ModelState m = model::init_model<float>(dreyer_config(), 1);
    std::mt19937_64 rng(2);
    const linalg::Matrix window = random_matrix(rng, 27, 256);
    for (auto _ : state) {
        benchmark::DoNotOptimize(model::forward(m, window));
    }
}
BENCHMARK(BM_SingleWindowForward)->Unit(benchmark::kMillisecond);

void BM_JointTrialForward(benchmark::State& state) {
    const model::ModelState m = model::init_model<float>(dreyer_config(), 1);
    std::mt19937_64 rng(3);
    const linalg::Matrix trial = random_matrix(rng, 27, 1216);
    for (auto _ : state) {
        benchmark::DoNotOptimize(model::forward(m, trial));
    }
}
BENCHMARK(BM_JointTrialForward)->Unit(benchmark::kMillisecond);

void BM_JointTrainStep(benchmark::State& state) {
    model::ModelState m = model::init_model<float>(dreyer_config(), 1);
    std::mt19937_64 rng(4);
    std::vector<linalg::Matrix> batch;
    for (int i = 0; i < 4; ++i) batch.push_back(random_matrix(rng, 27, 1216));
    const std::vector<int> labels(batch.size(), 0);
    for (auto _ : state) {
        auto [preds, cache] = model::forward_train(m, batch);
        std::vector<std::vector<double>> upstream;
        train::joint_cross_entropy(preds, labels, upstream);
        benchmark::DoNotOptimize(model::backward(m, *cache, upstream));
    }
}
BENCHMARK(BM_JointTrainStep)->Unit(benchmark::kMillisecond);

void BM_OnlineAlignmentUpdate(benchmark::State& state) {
    std::mt19937_64 rng(5);
    const linalg::Matrix window = random_matrix(rng, 27, 256);
    std::optional<adapt::AlignmentReference> ref;
    for (auto _ : state) {
        ref = adapt::update_reference_online(ref, window, adapt::AlignMethod::euclidean);
        benchmark::DoNotOptimize(ref);
    }
}
BENCHMARK(BM_OnlineAlignmentUpdate)->Unit(benchmark::kMicrosecond);

void BM_MdmPredict(benchmark::State& state) {
    std::mt19937_64 rng(6);
    std::vector<linalg::Matrix> windows;
    std::vector<int> labels;
    for (int i = 0; i < 8; ++i) {
        windows.push_back(random_matrix(rng, 27, 256) * (i % 2 ? 2.0 : 1.0));
        labels.push_back(i % 2);
    }
    const auto ref = adapt::fit_reference(windows, adapt::AlignMethod::riemannian);
    const mdm::MdmModel model = mdm::mdm_fit(windows, labels, 2, ref);
    const linalg::Matrix probe = random_matrix(rng, 27, 256);
    for (auto _ : state) {
        benchmark::DoNotOptimize(mdm::mdm_predict(probe, model, ref));
    }
}
BENCHMARK(BM_MdmPredict)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
