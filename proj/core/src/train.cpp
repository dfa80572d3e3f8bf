#include "rapstream/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

namespace rapstream::train {

using Clock = std::chrono::steady_clock;

Split split_from_string(const std::string& s) {
    if (s == "within_subject" || s == "within") return Split::within_subject;
    if (s == "cross_subject_loso" || s == "loso") return Split::cross_subject_loso;
    throw ConfigError("unknown split '" + s + "'");
}

std::string to_string(Split split) {
    return split == Split::within_subject ? "within_subject" : "cross_subject_loso";
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs >= epochs) {
        throw ConfigError("warmup_epochs must lie in [0, epochs)");
    }
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (seeds.empty()) throw ConfigError("at least one seed required");
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
}

namespace {

double schedule(int epoch, int epochs, int warmup, double lr) {
    if (epoch < warmup) {
        return lr * static_cast<double>(epoch + 1) / static_cast<double>(warmup);
    }
    const double progress = static_cast<double>(epoch - warmup) /
                            static_cast<double>(epochs - warmup);
    return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace

double lr_at(int epoch, const TrainConfig& cfg) {
    cfg.validate();
    if (epoch < 0 || epoch >= cfg.epochs) {
        throw DomainError("epoch " + std::to_string(epoch) + " outside [0, " +
                          std::to_string(cfg.epochs) + ")");
    }
    return schedule(epoch, cfg.epochs, cfg.warmup_epochs, cfg.learning_rate);
}

AdamState init_adam(const model::ModelState& state, double beta1, double beta2,
                    double eps) {
    AdamState adam;
    adam.beta1 = beta1;
    adam.beta2 = beta2;
    adam.eps = eps;
    for (const auto& p : state.params) {
        model::NamedTensor<float> zero;
        zero.name = p.name;
        zero.t.resize(p.t.shape);
        adam.m.push_back(zero);
        adam.v.push_back(std::move(zero));
    }
    return adam;
}

void adam_step(model::ModelState& state, const model::Gradients<float>& grads,
               AdamState& adam, double lr) {
    if (grads.tensors.size() != state.params.size()) {
        throw ShapeError("gradient tensor count does not match the model");
    }
    for (const auto& g : grads.tensors) {
        for (float v : g.t.v) {
            if (!std::isfinite(v)) throw TrainingDivergedError(g.name);
        }
    }
    ++adam.step;
    for (std::size_t i = 0; i < state.params.size(); ++i) {
        auto& p = state.params[i];
        const auto& g = grads.tensors[i];
        if (g.t.shape != p.t.shape) {
            throw ShapeError("gradient shape mismatch for " + p.name);
        }
        adam_update<float>(std::span<float>(p.t.v), std::span<const float>(g.t.v),
                           std::span<float>(adam.m[i].t.v), std::span<float>(adam.v[i].t.v),
                           adam.step, lr, adam.beta1, adam.beta2, adam.eps);
    }
    ++state.version;
}

std::string epoch_log_json(const EpochLog& log) {
    nlohmann::json j;
    j["epoch"] = log.epoch;
    j["lr"] = log.lr;
    j["loss"] = log.loss;
    j["wall_ms"] = log.wall_ms;
    return j.dump();
}

void write_training_log(const std::string& path, const std::vector<EpochLog>& log) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ParseError("cannot open training log for writing", path, 0);
    for (const EpochLog& entry : log) out << epoch_log_json(entry) << "\n";
}

double joint_cross_entropy(const std::vector<model::Prediction>& preds,
                           const std::vector<int>& labels,
                           std::vector<std::vector<double>>& upstream) {
    if (preds.size() != labels.size() || preds.empty()) {
        throw ShapeError("predictions and labels must pair up");
    }
    const int batch = static_cast<int>(preds.size());
    upstream.assign(preds.size(), {});
    double loss = 0.0;
    std::int64_t total_positions = 0;
    for (const auto& p : preds) total_positions += p.positions;

    for (int n = 0; n < batch; ++n) {
        const model::Prediction& p = preds[static_cast<std::size_t>(n)];
        const int y = labels[static_cast<std::size_t>(n)];
        if (y < 0 || y >= p.classes) throw DomainError("label outside the class range");
        auto& u = upstream[static_cast<std::size_t>(n)];
        u.assign(static_cast<std::size_t>(p.positions) * p.classes, 0.0);
        for (int j = 0; j < p.positions; ++j) {
            // Clamp keeps the materialized 1/p finite; the softmax chain rule
            // cancels it analytically.
            const double py = std::max(p.at(j, y), 1e-12);
            loss -= std::log(py);
            u[static_cast<std::size_t>(j) * p.classes + y] =
                -1.0 / (py * static_cast<double>(total_positions));
        }
    }
    return loss / static_cast<double>(total_positions);
}

std::vector<EpochLog> train_on_trials(model::ModelState& state,
                                      const std::vector<const data::Trial*>& trials,
                                      const InnerLoopConfig& cfg) {
    if (trials.empty()) throw ConfigError("empty training partition");
    TrainConfig check;
    check.learning_rate = cfg.learning_rate;
    check.epochs = cfg.epochs;
    check.warmup_epochs = cfg.warmup_epochs;
    check.batch_size = cfg.batch_size;
    check.validate();

    AdamState adam = init_adam(state, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    std::vector<std::size_t> order(trials.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<EpochLog> logs;
    std::uint64_t shuffle_stream = tensor::derive_stream(cfg.shuffle_seed, 0xb10c);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto start = Clock::now();
        const double lr = schedule(epoch, cfg.epochs, cfg.warmup_epochs, cfg.learning_rate);

        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = tensor::splitmix64(shuffle_stream) % i;
            std::swap(order[i - 1], order[j]);
        }

        double epoch_loss = 0.0;
        int batches = 0;
        for (std::size_t begin = 0; begin < order.size();
             begin += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
            std::vector<linalg::Matrix> batch;
            std::vector<int> labels;
            batch.reserve(end - begin);
            for (std::size_t i = begin; i < end; ++i) {
                batch.push_back(trials[order[i]]->data);
                labels.push_back(trials[order[i]]->label);
            }
            auto [preds, cache] = model::forward_train(state, batch);
            std::vector<std::vector<double>> upstream;
            epoch_loss += joint_cross_entropy(preds, labels, upstream);
            const auto grads = model::backward(state, *cache, upstream);
            adam_step(state, grads, adam, lr);
            ++batches;
        }

        EpochLog log;
        log.epoch = epoch;
        log.lr = lr;
        log.loss = epoch_loss / std::max(1, batches);
        log.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
        logs.push_back(log);
    }
    return logs;
}

namespace {

// Per-subject alignment of the training partition (Eq.-style window
// reference per source domain), then whole-trial re-centering (alignment is
// linear and time-invariant, so aligning the trial aligns all its windows).
struct AlignedPartition {
    std::vector<data::Trial> storage;
    std::vector<const data::Trial*> trials;
    std::vector<adapt::AlignmentReference> references;
};

AlignedPartition build_partition(
    const std::vector<std::pair<std::string, const data::TrialSet*>>& groups,
    adapt::AlignMethod method, const model::ModelConfig& mcfg) {
    AlignedPartition out;
    if (method == adapt::AlignMethod::none) {
        for (const auto& [subject, set] : groups) {
            for (const data::Trial& t : set->trials) out.trials.push_back(&t);
        }
        return out;
    }
    const auto& plan = mcfg.rap_plan;
    const int window = plan.final_kernel() * plan.downsampling_factor();
    const int hop = plan.downsampling_factor() * plan.final_stride();
    for (const auto& [subject, set] : groups) {
        std::vector<linalg::Matrix> windows;
        for (const data::Trial& t : set->trials) {
            auto w = adapt::slice_windows(t.data, window, hop);
            std::move(w.begin(), w.end(), std::back_inserter(windows));
        }
        const adapt::AlignmentReference ref = adapt::fit_reference(windows, method);
        for (const data::Trial& t : set->trials) {
            data::Trial aligned = t;
            aligned.data = adapt::align(t.data, ref);
            out.storage.push_back(std::move(aligned));
        }
        out.references.push_back(ref);
    }
    out.trials.reserve(out.storage.size());
    for (const data::Trial& t : out.storage) out.trials.push_back(&t);
    return out;
}

}  // namespace

std::vector<TrainingRun> run_training(data::LazyCohort& cohort,
                                      const std::string& target_subject,
                                      const model::ModelConfig& mcfg,
                                      const TrainConfig& cfg) {
    cfg.validate();
    mcfg.validate();

    std::vector<std::pair<std::string, const data::TrialSet*>> groups;
    if (cfg.split == Split::cross_subject_loso) {
        if (cohort.subject_ids().size() < 2) {
            throw ConfigError("cross-subject training needs at least two subjects");
        }
        for (const std::string& subject : cohort.subject_ids()) {
            if (subject == target_subject) continue;  // target stays untouched
            if (!cohort.has_group(subject, data::Role::offline)) continue;
            groups.emplace_back(subject, &cohort.group(subject, data::Role::offline));
        }
        if (groups.empty()) {
            throw ConfigError("cross-subject training needs at least one non-target subject");
        }
    } else {
        if (!cohort.has_group(target_subject, data::Role::offline)) {
            throw ConfigError("within-subject training needs the target's offline data");
        }
        groups.emplace_back(target_subject,
                            &cohort.group(target_subject, data::Role::offline));
    }

    AlignedPartition partition = build_partition(groups, cfg.alignment, mcfg);
    if (partition.trials.empty()) throw ConfigError("empty training partition");

    std::optional<adapt::AlignmentReference> pooled_reference;
    if (cfg.alignment != adapt::AlignMethod::none) {
        // Reference over the pooled aligned windows, used to seed online
        // estimators; after per-subject alignment it sits near the identity.
        const auto& plan = mcfg.rap_plan;
        const int window = plan.final_kernel() * plan.downsampling_factor();
        const int hop = plan.downsampling_factor() * plan.final_stride();
        std::vector<linalg::Matrix> windows;
        for (const data::Trial* t : partition.trials) {
            auto w = adapt::slice_windows(t->data, window, hop);
            std::move(w.begin(), w.end(), std::back_inserter(windows));
        }
        pooled_reference = adapt::fit_reference(windows, cfg.alignment);
    }

    std::vector<TrainingRun> runs;
    for (const std::uint64_t seed : cfg.seeds) {
        TrainingRun run;
        run.seed = seed;
        run.state = model::init_model<float>(mcfg, seed);
        InnerLoopConfig loop;
        loop.learning_rate = cfg.learning_rate;
        loop.epochs = cfg.epochs;
        loop.warmup_epochs = cfg.warmup_epochs;
        loop.batch_size = cfg.batch_size;
        loop.adam_beta1 = cfg.adam_beta1;
        loop.adam_beta2 = cfg.adam_beta2;
        loop.adam_eps = cfg.adam_eps;
        loop.shuffle_seed = seed;
        run.log = train_on_trials(run.state, partition.trials, loop);
        run.source_reference = pooled_reference;
        runs.push_back(std::move(run));
    }
    return runs;
}

Aggregate multi_seed_aggregate(const std::vector<double>& values) {
    if (values.empty()) throw DomainError("aggregate of an empty list");
    Aggregate agg;
    agg.single_value = values.size() == 1;
    double sum = 0.0;
    for (double v : values) sum += v;
    agg.mean = sum / static_cast<double>(values.size());
    if (!agg.single_value) {
        double ss = 0.0;
        for (double v : values) ss += (v - agg.mean) * (v - agg.mean);
        agg.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return agg;
}

std::map<std::string, Aggregate> multi_seed_aggregate(
    const std::map<std::string, std::vector<double>>& per_metric) {
    if (per_metric.empty()) throw DomainError("aggregate of an empty metric map");
    std::size_t expected = per_metric.begin()->second.size();
    std::map<std::string, Aggregate> out;
    for (const auto& [name, values] : per_metric) {
        if (values.size() != expected) {
            throw ShapeError("ragged per-seed metric lists (metric '" + name + "')");
        }
        out.emplace(name, multi_seed_aggregate(values));
    }
    return out;
}

}  // namespace rapstream::train
