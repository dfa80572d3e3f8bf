#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <random>
#include <thread>

#include "rapstream/stream.hpp"
#include "rapstream/synth.hpp"
#include "testutil.hpp"

using namespace rapstream;
using namespace rapstream::stream;
using testutil::random_matrix;
using rapstream::linalg::Matrix;

namespace {

// 3-channel tiny geometry: 32 Hz, 0.5 s windows, 8 Hz updates, hop 4.
SessionConfig tiny_session(adapt::AdaptationMode mode = {}) {
    SessionConfig cfg;
    cfg.task.window_length_s = 0.5;
    cfg.task.update_frequency_hz = 8.0;
    cfg.sampling_frequency_hz = 32.0;
    cfg.mode = mode;
    return cfg;
}

data::TrialSet tiny_trials(int count, std::uint64_t seed, int samples = 48) {
    data::TrialSet set;
    set.spec.sampling_frequency_hz = 32.0;
    set.spec.channel_names = {"a", "b", "c"};
    std::mt19937_64 rng(seed);
    for (int i = 0; i < count; ++i) {
        data::Trial t;
        t.data = random_matrix(rng, 3, samples);
        t.label = i % 2;
        t.trial_length_s = samples / 32.0;
        set.trials.push_back(std::move(t));
    }
    return set;
}

ModelDecoder tiny_decoder(std::uint64_t seed = 1) {
    return ModelDecoder{model::init_model<float>(testutil::tiny_model_config(), seed)};
}

}  // namespace

TEST(StreamSession, EmitsOneEventPerWindowInOrder) {
    const data::TrialSet trials = tiny_trials(2, 3);
    StreamSession session(tiny_session(), tiny_decoder());
    const auto events = session.run(trials);
    // 48 samples, window 16, hop 4 -> 9 windows per trial.
    ASSERT_EQ(events.size(), 18u);
    for (std::size_t i = 0; i < events.size(); ++i) {
        EXPECT_EQ(events[i].tick, static_cast<std::int64_t>(i));
        EXPECT_EQ(events[i].trial_index, static_cast<std::int64_t>(i / 9));
        EXPECT_EQ(events[i].window_index, static_cast<int>(i % 9));
        EXPECT_EQ(events[i].label, static_cast<int>(i / 9) % 2);
        double sum = 0.0;
        for (double p : events[i].probabilities) sum += p;
        EXPECT_NEAR(sum, 1.0, 1e-6);
    }
}

TEST(StreamSession, NoHooksMatchesBatchedWindowInferenceBitExactly) {
    const data::TrialSet trials = tiny_trials(2, 5);
    const ModelDecoder decoder = tiny_decoder(7);
    StreamSession session(tiny_session(), decoder);
    const auto events = session.run(trials);

    std::size_t e = 0;
    for (const data::Trial& trial : trials.trials) {
        for (int j = 0; j * 4 + 16 <= trial.data.cols(); ++j, ++e) {
            const model::Prediction direct =
                model::forward(decoder.state, Matrix(trial.data.middleCols(4 * j, 16)));
            ASSERT_LT(e, events.size());
            for (int k = 0; k < direct.classes; ++k) {
                EXPECT_EQ(events[e].probabilities[static_cast<std::size_t>(k)],
                          direct.at(0, k))
                    << "window " << j;
            }
        }
    }
    EXPECT_EQ(e, events.size());
}

TEST(StreamSession, PrefixDeterminismUnderTruncation) {
    const data::TrialSet trials = tiny_trials(3, 11);
    adapt::AdaptationMode ea;
    ea.alignment = adapt::AlignMethod::euclidean;
    StreamSession session(tiny_session(ea), tiny_decoder(13));
    const auto full = session.run(trials);

    std::mt19937_64 rng(17);
    for (int rep = 0; rep < 20; ++rep) {
        // Cut the raw sample stream mid-trial and replay.
        const std::size_t cut_trial = rng() % trials.trials.size();
        const std::int64_t cut_samples = 16 + static_cast<std::int64_t>(rng() % 32);
        data::TrialSet truncated;
        truncated.spec = trials.spec;
        for (std::size_t i = 0; i < cut_trial; ++i) {
            truncated.trials.push_back(trials.trials[i]);
        }
        data::Trial partial = trials.trials[cut_trial];
        partial.data = partial.data.leftCols(cut_samples).eval();
        truncated.trials.push_back(std::move(partial));

        const auto prefix = session.run(truncated);
        ASSERT_LE(prefix.size(), full.size());
        for (std::size_t i = 0; i < prefix.size(); ++i) {
            EXPECT_EQ(prefix[i].probabilities, full[i].probabilities)
                << "event " << i << " after cutting trial " << cut_trial << " at "
                << cut_samples;
        }
    }
}

TEST(StreamSession, HookStatePersistsAcrossTrialsByDefault) {
    const data::TrialSet trials = tiny_trials(2, 19);
    adapt::AdaptationMode ea;
    ea.alignment = adapt::AlignMethod::euclidean;
    const ModelDecoder decoder = tiny_decoder(23);

    StreamSession persistent(tiny_session(ea), decoder);
    const auto events = persistent.run(trials);

    // Manual replay: one running reference across both trials.
    std::optional<adapt::AlignmentReference> ref;
    std::size_t e = 0;
    for (const data::Trial& trial : trials.trials) {
        for (int j = 0; j * 4 + 16 <= trial.data.cols(); ++j, ++e) {
            const Matrix window = trial.data.middleCols(4 * j, 16);
            ref = adapt::update_reference_online(ref, window, adapt::AlignMethod::euclidean);
            const model::Prediction direct =
                model::forward(decoder.state, adapt::align(window, *ref));
            for (int k = 0; k < direct.classes; ++k) {
                EXPECT_EQ(events[e].probabilities[static_cast<std::size_t>(k)], direct.at(0, k));
            }
        }
    }

    SessionConfig reset_cfg = tiny_session(ea);
    reset_cfg.reset_hooks_at_trial_boundaries = true;
    StreamSession resetting(reset_cfg, decoder);
    const auto reset_events = resetting.run(trials);
    // With resetting, trial 1's first window must match a fresh session fed
    // only trial 1.
    data::TrialSet only_second;
    only_second.spec = trials.spec;
    only_second.trials.push_back(trials.trials[1]);
    const auto fresh = StreamSession(tiny_session(ea), decoder).run(only_second);
    EXPECT_EQ(reset_events[9].probabilities, fresh[0].probabilities);
    // ...and must differ from the persistent session (reference warm vs cold).
    EXPECT_NE(reset_events[9].probabilities, events[9].probabilities);
}

TEST(StreamSession, EventCountConservation) {
    const data::TrialSet trials = tiny_trials(5, 29, 64);  // 13 windows each
    StreamSession session(tiny_session(), tiny_decoder());
    EXPECT_EQ(session.run(trials).size(), 5u * 13u);
}

TEST(StreamSession, PacedAndUnpacedProduceIdenticalProbabilities) {
    const data::TrialSet trials = tiny_trials(1, 31);
    SessionConfig paced_cfg = tiny_session();
    paced_cfg.paced = true;
    const ModelDecoder decoder = tiny_decoder(37);
    const auto paced_events = StreamSession(paced_cfg, decoder).run(trials);
    const auto unpaced_events = StreamSession(tiny_session(), decoder).run(trials);
    ASSERT_EQ(paced_events.size(), unpaced_events.size());
    for (std::size_t i = 0; i < paced_events.size(); ++i) {
        EXPECT_EQ(paced_events[i].probabilities, unpaced_events[i].probabilities);
    }
}

TEST(StreamSession, PacedSessionLandsOnTickGrid) {
    // 1.5 s of samples at 32 Hz: the paced session should take ~1.5 s.
    const data::TrialSet trials = tiny_trials(1, 41);
    SessionConfig cfg = tiny_session();
    cfg.paced = true;
    StreamSession session(cfg, tiny_decoder());
    const auto start = std::chrono::steady_clock::now();
    const auto events = session.run(trials);
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    EXPECT_NEAR(elapsed, 1.5, 0.3);
    for (const auto& ev : events) EXPECT_LT(ev.jitter_ms, 50.0);
}

TEST(StreamSession, InjectedStallMissesOnlyItsOwnDeadline) {
    const data::TrialSet trials = tiny_trials(1, 43);
    SessionConfig cfg = tiny_session();
    cfg.tick_probe = [](std::int64_t tick) {
        if (tick == 3) std::this_thread::sleep_for(std::chrono::milliseconds(150));
    };
    StreamSession session(cfg, tiny_decoder());
    const auto events = session.run(trials);
    ASSERT_GT(events.size(), 4u);
    EXPECT_FALSE(events[3].deadline_met);
    for (std::size_t i = 0; i < events.size(); ++i) {
        if (i != 3) EXPECT_TRUE(events[i].deadline_met) << "event " << i;
    }
    EXPECT_EQ(count_deadline_misses(events), 1);
}

TEST(StreamSession, MeasureLatencyValidatesRepetitions) {
    const data::TrialSet trials = tiny_trials(1, 47);
    StreamSession session(tiny_session(), tiny_decoder());
    EXPECT_THROW(session.measure_latency(trials, 0), DomainError);
    const LatencyStats stats = session.measure_latency(trials, 3, 2);
    EXPECT_GT(stats.window_count, 0);
    EXPECT_LE(stats.mean_ms, stats.max_ms);
    EXPECT_LE(stats.p95_ms, stats.max_ms);
    EXPECT_LT(stats.p95_ms, 62.5);
}

TEST(StreamSession, MdmDecoderWithGenericRecentering) {
    std::mt19937_64 rng(53);
    std::vector<Matrix> windows;
    std::vector<int> labels;
    for (int i = 0; i < 8; ++i) {
        windows.push_back(random_matrix(rng, 3, 16) * (i % 2 ? 3.0 : 1.0));
        labels.push_back(i % 2);
    }
    const auto source_ref = adapt::fit_reference(windows, adapt::AlignMethod::riemannian);
    const mdm::MdmModel mdl = mdm::mdm_fit(windows, labels, 2, source_ref);

    adapt::AdaptationMode ra;
    ra.alignment = adapt::AlignMethod::riemannian;
    SessionConfig cfg = tiny_session(ra);
    cfg.gr_prior_weight = 2.0;
    StreamSession session(cfg, MdmDecoder{mdl});
    const auto events = session.run(tiny_trials(1, 59));
    ASSERT_EQ(events.size(), 9u);
    for (const auto& ev : events) {
        EXPECT_EQ(ev.probabilities.size(), 2u);
        EXPECT_NEAR(ev.probabilities[0] + ev.probabilities[1], 1.0, 1e-9);
    }

    adapt::AdaptationMode with_adabn;
    with_adabn.adabn = true;
    EXPECT_THROW(StreamSession(tiny_session(with_adabn), MdmDecoder{mdl}), ConfigError);
}

TEST(StreamEvents, JsonlRoundTripAndSummary) {
    namespace fs = std::filesystem;
    const data::TrialSet trials = tiny_trials(1, 61);
    StreamSession session(tiny_session(), tiny_decoder());
    const auto events = session.run(trials);

    const auto path = fs::temp_directory_path() /
                      ("rapstream_events_" + std::to_string(std::random_device{}()) + ".jsonl");
    write_events_jsonl(path.string(), events);
    const auto loaded = read_events_jsonl(path.string());
    ASSERT_EQ(loaded.size(), events.size());
    for (std::size_t i = 0; i < events.size(); ++i) {
        EXPECT_EQ(loaded[i].tick, events[i].tick);
        EXPECT_EQ(loaded[i].probabilities, events[i].probabilities);
        EXPECT_EQ(loaded[i].label, events[i].label);
    }
    fs::remove(path);

    const std::string summary = summary_json(events, session.config().task, false);
    EXPECT_NE(summary.find("\"deadline_ms\":125.0"), std::string::npos);
    EXPECT_NE(summary.find("latency_ms"), std::string::npos);

    const auto grouped = group_into_trials(events);
    ASSERT_EQ(grouped.size(), 1u);
    EXPECT_EQ(grouped[0].prediction.positions, 9);
    EXPECT_EQ(grouped[0].label, 0);
}
