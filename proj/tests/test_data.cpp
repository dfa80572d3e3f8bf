#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "rapstream/adapt.hpp"
#include "rapstream/data.hpp"
#include "rapstream/synth.hpp"
#include "testutil.hpp"

using namespace rapstream;
using namespace rapstream::data;
using testutil::band_power;

namespace fs = std::filesystem;

namespace {

class TempDir {
public:
    TempDir() {
        dir_ = fs::temp_directory_path() /
               ("rapstream_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(dir_);
    }
    ~TempDir() { fs::remove_all(dir_); }
    std::string path(const std::string& name) const { return (dir_ / name).string(); }

private:
    fs::path dir_;
};

Matrix ramp_matrix(int channels, int samples) {
    Matrix m(channels, samples);
    for (int c = 0; c < channels; ++c) {
        for (int s = 0; s < samples; ++s) {
            m(c, s) = static_cast<float>(c * 10000 + s);  // f32 representable
        }
    }
    return m;
}

}  // namespace

TEST(ExtractEpochs, PaperTimingSliceIsSampleExact) {
    const Matrix continuous = ramp_matrix(2, 2100);
    const auto trials =
        extract_epochs(continuous, {{0, 1}}, 3.25, 4.75, 256.0);
    ASSERT_EQ(trials.size(), 1u);
    EXPECT_EQ(trials[0].data.cols(), 1216);  // samples [832, 2048)
    EXPECT_DOUBLE_EQ(trials[0].data(0, 0), continuous(0, 832));
    EXPECT_DOUBLE_EQ(trials[0].data(0, 1215), continuous(0, 2047));
    EXPECT_EQ(trials[0].label, 1);
}

TEST(ExtractEpochs, IdentitySlice) {
    const Matrix continuous = ramp_matrix(3, 512);
    const auto trials = extract_epochs(continuous, {{0, 0}}, 0.0, 2.0, 256.0);
    ASSERT_EQ(trials.size(), 1u);
    EXPECT_TRUE(trials[0].data == continuous);
}

TEST(ExtractEpochs, MarkerTooCloseToEndThrows) {
    const Matrix continuous = ramp_matrix(1, 1000);
    try {
        extract_epochs(continuous, {{0, 0}, {900, 1}}, 0.0, 1.0, 256.0);
        FAIL() << "expected IndexError";
    } catch (const IndexError& e) {
        EXPECT_NE(std::string(e.what()).find("marker 1"), std::string::npos);
    }
}

TEST(ExtractEpochs, FuzzNeverReadsOutOfBounds) {
    std::mt19937_64 rng(7);
    const Matrix continuous = ramp_matrix(2, 4096);
    for (int i = 0; i < 50; ++i) {
        const double fs = 128.0;
        const double t_t = 0.25 + static_cast<double>(rng() % 8) * 0.25;
        const auto length = static_cast<std::int64_t>(t_t * fs);
        const std::int64_t max_start = 4096 - length;
        const std::int64_t start = static_cast<std::int64_t>(rng() % (max_start + 1));
        const auto trials = extract_epochs(continuous, {{start, 0}}, 0.0, t_t, fs);
        ASSERT_EQ(trials[0].data.cols(), length);
        EXPECT_DOUBLE_EQ(trials[0].data(1, 0), continuous(1, start));
        EXPECT_DOUBLE_EQ(trials[0].data(1, length - 1), continuous(1, start + length - 1));
    }
}

TEST(Eegb, TrialSetRoundTripIsBitIdentical) {
    TempDir tmp;
    TrialSet set;
    set.spec.sampling_frequency_hz = 256.0;
    set.spec.channel_names = {"C3", "C4", "Cz"};
    for (int t = 0; t < 3; ++t) {
        Trial trial;
        trial.data = ramp_matrix(3, 512) * (t + 1);
        trial.label = t % 2;
        trial.trial_length_s = 2.0;
        set.trials.push_back(std::move(trial));
    }
    const std::string path = tmp.path("set.eegb");
    write_trialset(path, set);

    const Recording rec = read_eegb(path);
    ASSERT_EQ(rec.markers.size(), 3u);
    const auto trials =
        extract_epochs(rec.data, rec.markers, 0.0, 2.0, rec.spec.sampling_frequency_hz);
    ASSERT_EQ(trials.size(), 3u);
    for (int t = 0; t < 3; ++t) {
        EXPECT_EQ(trials[static_cast<std::size_t>(t)].label, t % 2);
        EXPECT_TRUE(trials[static_cast<std::size_t>(t)].data ==
                    set.trials[static_cast<std::size_t>(t)].data)
            << "bit-exact float round trip failed for trial " << t;
    }
}

TEST(Eegb, TruncatedFileReportsOffset) {
    TempDir tmp;
    TrialSet set;
    set.spec.sampling_frequency_hz = 128.0;
    set.spec.channel_names = {"a", "b"};
    Trial trial;
    trial.data = ramp_matrix(2, 256);
    trial.trial_length_s = 2.0;
    set.trials.push_back(trial);
    const std::string path = tmp.path("trunc.eegb");
    write_trialset(path, set);

    const auto full_size = fs::file_size(path);
    fs::resize_file(path, full_size - 64);
    EXPECT_THROW(read_eegb(path), ParseError);
}

TEST(Eegb, BadMagicRejected) {
    TempDir tmp;
    const std::string path = tmp.path("junk.eegb");
    std::ofstream(path) << "this is not an EEGB file";
    EXPECT_THROW(read_eegb(path), ParseError);
}

TEST(Manifest, GroupsBySubjectAndRole) {
    TempDir tmp;
    TrialSet set;
    set.spec.sampling_frequency_hz = 128.0;
    set.spec.channel_names = {"a", "b"};
    Trial trial;
    trial.data = ramp_matrix(2, 128);
    trial.label = 0;
    trial.trial_length_s = 1.0;
    set.trials.push_back(trial);

    CohortManifest manifest;
    manifest.task_classes = {"left", "right"};
    for (const std::string subject : {"S00", "S01"}) {
        for (const Role role : {Role::offline, Role::online}) {
            const std::string name = subject + "_" + to_string(role) + ".eegb";
            write_trialset(tmp.path(name), set);
            manifest.entries.push_back(ManifestEntry{subject, name, role});
        }
    }
    const std::string mpath = tmp.path("manifest.json");
    write_manifest(mpath, manifest);

    const Cohort cohort = load_cohort(mpath, EpochingParams{0.0, 1.0});
    EXPECT_EQ(cohort.groups.size(), 4u);
    EXPECT_EQ(cohort.subject_ids(), (std::vector<std::string>{"S00", "S01"}));
    EXPECT_EQ(cohort.group("S01", Role::online).trials.size(), 1u);
}

TEST(Manifest, UnknownRoleRejected) {
    TempDir tmp;
    const std::string path = tmp.path("m.json");
    std::ofstream(path) << R"({"task":["l","r"],"entries":[{"subject":"S0","path":"x","role":"weird"}]})";
    EXPECT_THROW(read_manifest(path), Error);
}

TEST(Synth, SameSeedGivesIdenticalCohorts) {
    synth::SynthConfig cfg;
    cfg.subject_count = 2;
    cfg.trials_per_subject = 4;
    cfg.rng_seed = 42;
    const Cohort a = synth::generate_synth_cohort(cfg);
    const Cohort b = synth::generate_synth_cohort(cfg);
    for (const auto& [key, set] : a.groups) {
        const auto& other = b.groups.at(key);
        ASSERT_EQ(set.trials.size(), other.trials.size());
        for (std::size_t i = 0; i < set.trials.size(); ++i) {
            EXPECT_TRUE(set.trials[i].data == other.trials[i].data);
            EXPECT_EQ(set.trials[i].label, other.trials[i].label);
        }
    }
}

namespace {

// Lower 10-12 Hz band power marks the suppressed (class-matching) channel.
double lateral_oracle_accuracy(const Cohort& cohort, const synth::SynthConfig& cfg) {
    std::int64_t correct = 0, total = 0;
    for (const auto& [key, set] : cohort.groups) {
        for (const auto& trial : set.trials) {
            const double p0 = band_power(trial.data.row(0), cfg.sampling_frequency_hz, 9.5, 12.5);
            const double p1 = band_power(trial.data.row(1), cfg.sampling_frequency_hz, 9.5, 12.5);
            const int predicted = p0 < p1 ? 0 : 1;
            correct += predicted == trial.label;
            ++total;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace

TEST(Synth, BandPowerOracleSeparatesClasses) {
    synth::SynthConfig cfg;
    cfg.subject_count = 4;
    cfg.trials_per_subject = 30;
    cfg.class_separability = 1.0;
    cfg.rng_seed = 11;
    const Cohort cohort = synth::generate_synth_cohort(cfg);
    EXPECT_GE(lateral_oracle_accuracy(cohort, cfg), 0.95);
}

TEST(Synth, ZeroSeparabilityIsChance) {
    synth::SynthConfig cfg;
    cfg.subject_count = 4;
    cfg.trials_per_subject = 50;
    cfg.class_separability = 0.0;
    cfg.rng_seed = 12;
    const Cohort cohort = synth::generate_synth_cohort(cfg);
    const double acc = lateral_oracle_accuracy(cohort, cfg);
    EXPECT_GT(acc, 0.45);
    EXPECT_LT(acc, 0.55);
}

TEST(Synth, AlignmentShrinksBetweenSubjectSpread) {
    synth::SynthConfig cfg;
    cfg.subject_count = 4;
    cfg.trials_per_subject = 12;
    cfg.subject_shift_scale = 1.0;
    cfg.rng_seed = 13;
    const Cohort cohort = synth::generate_synth_cohort(cfg);

    const int window = static_cast<int>(cfg.sampling_frequency_hz);  // 1 s
    const int hop = window / 4;
    std::vector<adapt::AlignmentReference> raw_refs;
    std::vector<adapt::AlignmentReference> aligned_refs;
    for (const auto& [key, set] : cohort.groups) {
        if (key.role != Role::offline) continue;
        std::vector<Matrix> windows;
        for (const auto& trial : set.trials) {
            auto w = adapt::slice_windows(trial.data, window, hop);
            std::move(w.begin(), w.end(), std::back_inserter(windows));
        }
        const auto ref = adapt::fit_reference(windows, adapt::AlignMethod::euclidean);
        std::vector<Matrix> aligned;
        aligned.reserve(windows.size());
        for (const Matrix& w : windows) aligned.push_back(adapt::align(w, ref));
        raw_refs.push_back(ref);
        aligned_refs.push_back(adapt::fit_reference(aligned, adapt::AlignMethod::euclidean));
    }
    const auto mean_pairwise = [](const std::vector<adapt::AlignmentReference>& refs) {
        double total = 0.0;
        int pairs = 0;
        for (std::size_t i = 0; i < refs.size(); ++i) {
            for (std::size_t j = i + 1; j < refs.size(); ++j) {
                total += linalg::airm_distance(refs[i].rbar, refs[j].rbar);
                ++pairs;
            }
        }
        return total / pairs;
    };
    EXPECT_LT(mean_pairwise(aligned_refs), mean_pairwise(raw_refs));
}
