#include "rapstream/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace rapstream::synth {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kSignalAmplitude = 1.0;
constexpr double kNoiseGain = 0.4;
constexpr double kSuppression = 0.8;  // fraction of amplitude removed at separability 1

// Hand-rolled draws keep cohorts bit-identical across standard libraries
// (distribution implementations are not pinned by the standard).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform() {  // [0, 1)
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal() {
        // Box-Muller, one value per call pair cached.
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * kPi * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * kPi * u2);
    }
    std::uint64_t integer() { return engine_(); }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Paul Kellet's economy pink-noise filter over white Gaussian input.
class PinkNoise {
public:
    explicit PinkNoise(Rng& rng) : rng_(rng) {}
    double next() {
        const double w = rng_.normal();
        b0_ = 0.99765 * b0_ + w * 0.0990460;
        b1_ = 0.96300 * b1_ + w * 0.2965164;
        b2_ = 0.57000 * b2_ + w * 1.0526913;
        return 0.2 * (b0_ + b1_ + b2_ + w * 0.1848);
    }

private:
    Rng& rng_;
    double b0_ = 0.0, b1_ = 0.0, b2_ = 0.0;
};

// SPD mixing exp(scale * S) with a diagonally dominant random symmetric S:
// per-channel gain shifts with mild cross-channel leakage. SPD mixings keep
// the generator faithful to the premise behind alignment (domains differ
// mainly in their reference state, which whitening removes).
linalg::Matrix random_mixing(Rng& rng, int dim, double scale) {
    linalg::Matrix s(dim, dim);
    for (int i = 0; i < dim; ++i) s(i, i) = rng.normal();
    for (int i = 0; i < dim; ++i) {
        for (int j = i + 1; j < dim; ++j) {
            const double v = 0.3 * rng.normal();
            s(i, j) = v;
            s(j, i) = v;
        }
    }
    if (scale == 0.0) return linalg::Matrix::Identity(dim, dim);
    return linalg::spd_exp_symmetric(scale * s).values();
}

}  // namespace

void SynthConfig::validate() const {
    if (subject_count < 1 || trials_per_subject < 1 || channel_count < 2) {
        throw ConfigError("synthetic cohort needs >=1 subject, >=1 trial, >=2 channels");
    }
    if (class_separability < 0.0 || class_separability > 1.0) {
        throw ConfigError("class_separability must lie in [0, 1]");
    }
    if (subject_shift_scale < 0.0 || session_shift_scale < 0.0) {
        throw ConfigError("shift scales must be non-negative");
    }
    if (!(sampling_frequency_hz > 0.0) || !(trial_length_s > 0.0)) {
        throw ConfigError("sampling frequency and trial length must be positive");
    }
}

data::Cohort generate_synth_cohort(const SynthConfig& cfg) {
    cfg.validate();

    data::RecordingSpec spec;
    spec.sampling_frequency_hz = cfg.sampling_frequency_hz;
    spec.channel_names = {"C3", "C4"};
    for (int c = 2; c < cfg.channel_count; ++c) {
        spec.channel_names.push_back("ch" + std::to_string(c));
    }

    const auto n_samples = static_cast<std::int64_t>(
        std::llround(cfg.trial_length_s * cfg.sampling_frequency_hz));
    const double dt = 1.0 / cfg.sampling_frequency_hz;

    data::Cohort cohort;
    cohort.manifest.task_classes = {"left_hand", "right_hand"};

    Rng rng(cfg.rng_seed ^ 0x9e3779b97f4a7c15ULL);

    for (int s = 0; s < cfg.subject_count; ++s) {
        const std::string subject_id = "S" + std::string(s < 10 ? "0" : "") + std::to_string(s);
        const linalg::Matrix subject_mix =
            random_mixing(rng, cfg.channel_count, cfg.subject_shift_scale);
        const linalg::Matrix session_mix =
            random_mixing(rng, cfg.channel_count, cfg.session_shift_scale);

        for (const data::Role role : {data::Role::offline, data::Role::online}) {
            // Balanced labels, deterministically shuffled.
            std::vector<int> labels(static_cast<std::size_t>(cfg.trials_per_subject));
            for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 2);
            for (std::size_t i = labels.size(); i > 1; --i) {
                std::swap(labels[i - 1], labels[rng.integer() % i]);
            }

            std::vector<PinkNoise> noise;
            noise.reserve(static_cast<std::size_t>(cfg.channel_count));
            for (int c = 0; c < cfg.channel_count; ++c) noise.emplace_back(rng);

            data::TrialSet set;
            set.spec = spec;
            for (int trial_i = 0; trial_i < cfg.trials_per_subject; ++trial_i) {
                const int label = labels[static_cast<std::size_t>(trial_i)];
                const double suppression = 1.0 - kSuppression * cfg.class_separability;

                linalg::Matrix sources(cfg.channel_count, n_samples);
                for (int c = 0; c < cfg.channel_count; ++c) {
                    for (std::int64_t t = 0; t < n_samples; ++t) {
                        sources(c, t) = kNoiseGain * noise[static_cast<std::size_t>(c)].next();
                    }
                }
                // Independent left/right rhythms; the one matching the class
                // label desynchronizes.
                for (int lateral = 0; lateral < 2; ++lateral) {
                    const double freq = rng.uniform(10.0, 12.0);
                    const double phase = rng.uniform(0.0, 2.0 * kPi);
                    const double envelope = kSignalAmplitude * rng.uniform(0.9, 1.1);
                    const double amp = label == lateral ? envelope * suppression : envelope;
                    for (std::int64_t t = 0; t < n_samples; ++t) {
                        sources(lateral, t) += amp * std::sin(2.0 * kPi * freq * (t * dt) + phase);
                    }
                }

                linalg::Matrix mixed = subject_mix * sources;
                if (role == data::Role::online) mixed = session_mix * mixed;

                data::Trial trial;
                trial.data = std::move(mixed);
                trial.label = label;
                trial.trial_length_s = cfg.trial_length_s;
                set.trials.push_back(std::move(trial));
            }

            cohort.manifest.entries.push_back(
                data::ManifestEntry{subject_id, "(synthetic)", role});
            cohort.groups.emplace(data::CohortKey{subject_id, role}, std::move(set));
        }
    }
    return cohort;
}

}  // namespace rapstream::synth
