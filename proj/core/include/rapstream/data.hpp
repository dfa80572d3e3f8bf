#ifndef RAPSTREAM_DATA_HPP
#define RAPSTREAM_DATA_HPP

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "rapstream/errors.hpp"
#include "rapstream/linalg.hpp"

namespace rapstream::data {

using linalg::Matrix;

struct RecordingSpec {
    double sampling_frequency_hz = 0.0;
    std::vector<std::string> channel_names;

    int channel_count() const { return static_cast<int>(channel_names.size()); }
    void validate() const;
};

/// One labeled epoch: channels x samples.
struct Trial {
    Matrix data;
    int label = 0;
    double trial_length_s = 0.0;
};

enum class Role { offline, online };

std::string to_string(Role role);
Role role_from_string(const std::string& s);

struct TrialSet {
    RecordingSpec spec;
    std::vector<Trial> trials;
};

struct ManifestEntry {
    std::string subject_id;
    std::string file_path;  // relative paths resolve against the manifest directory
    Role role = Role::offline;
};

struct CohortManifest {
    std::vector<std::string> task_classes;  // two class names
    std::vector<ManifestEntry> entries;

    void validate() const;
};

struct Marker {
    std::int64_t sample = 0;
    int label = 0;
};

/// Continuous multichannel recording with event markers (EEGB file contents).
struct Recording {
    RecordingSpec spec;
    Matrix data;  // channels x samples
    std::vector<Marker> markers;
};

// ---- EEGB container -------------------------------------------------------
// bytes 0-3 magic "EEGB", byte 4 version=1, u32-LE length-prefixed UTF-8 JSON
// header {fs, channels, n_samples, markers}, then n_samples x C little-endian
// f32, sample-major.

Recording read_eegb(const std::string& path);
void write_eegb(const std::string& path, const Recording& recording);

/// Serialize a trial set as one gapless recording with a marker at each
/// trial start; reading back with extract_epochs(offset 0, trial length)
/// reproduces the trials bit-for-bit (modulo the f32 storage width).
void write_trialset(const std::string& path, const TrialSet& set);

// ---- Epoching -------------------------------------------------------------

/// Slice one trial per marker: samples [marker + round(offset * fs),
/// + round(T_t * fs)). Sample indices round half-up. Throws IndexError when
/// an epoch exceeds the recording bounds, naming the marker.
std::vector<Trial> extract_epochs(const Matrix& continuous,
                                  const std::vector<Marker>& markers,
                                  double start_offset_s, double trial_length_s,
                                  double fs_hz);

// ---- Cohort loading -------------------------------------------------------

struct EpochingParams {
    double start_offset_s = 0.0;
    double trial_length_s = 0.0;  // <= 0 means markers delimit whole-recording trials
};

struct CohortKey {
    std::string subject_id;
    Role role;
    auto operator<=>(const CohortKey&) const = default;
};

struct Cohort {
    CohortManifest manifest;
    std::map<CohortKey, TrialSet> groups;

    std::vector<std::string> subject_ids() const;
    const TrialSet& group(const std::string& subject, Role role) const;
    bool has_group(const std::string& subject, Role role) const;
};

CohortManifest read_manifest(const std::string& path);
void write_manifest(const std::string& path, const CohortManifest& manifest);

/// Load every entry of a manifest eagerly, epoch it, and group by
/// (subject, role) in deterministic (subject, role, file-order) order.
Cohort load_cohort(const std::string& manifest_path, const EpochingParams& epoching);

/// Deferred per-entry access; entries are opened only when requested. Used by
/// training code so that never-consumed files (e.g. the evaluation subject's
/// online data) are never read.
class LazyCohort {
public:
    LazyCohort(std::string manifest_path, EpochingParams epoching);
    /// Build an in-memory cohort (no files involved).
    LazyCohort(CohortManifest manifest, std::map<CohortKey, TrialSet> groups);

    const CohortManifest& manifest() const { return manifest_; }
    std::vector<std::string> subject_ids() const;
    /// Loads (and caches) the group on first access.
    const TrialSet& group(const std::string& subject, Role role);
    bool has_group(const std::string& subject, Role role) const;

private:
    CohortManifest manifest_;
    std::string manifest_dir_;
    EpochingParams epoching_;
    std::map<CohortKey, TrialSet> cache_;
    std::map<CohortKey, std::vector<std::string>> pending_paths_;
};

}  // namespace rapstream::data

#endif
