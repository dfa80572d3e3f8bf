#include "rapstream/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace rapstream::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'E', 'E', 'G', 'B'};
constexpr std::uint8_t kVersion = 1;

std::int64_t round_half_up(double x) {
    return static_cast<std::int64_t>(std::floor(x + 0.5));
}

std::string resolve_path(const std::string& base_dir, const std::string& path) {
    fs::path p(path);
    if (p.is_absolute() || base_dir.empty()) return path;
    return (fs::path(base_dir) / p).string();
}

}  // namespace

void RecordingSpec::validate() const {
    if (!(sampling_frequency_hz > 0.0)) {
        throw DomainError("sampling frequency must be positive");
    }
    if (channel_names.empty()) {
        throw DomainError("at least one channel required");
    }
    std::set<std::string> unique(channel_names.begin(), channel_names.end());
    if (unique.size() != channel_names.size()) {
        throw DomainError("channel names must be unique");
    }
}

std::string to_string(Role role) {
    return role == Role::offline ? "offline" : "online";
}

Role role_from_string(const std::string& s) {
    if (s == "offline") return Role::offline;
    if (s == "online") return Role::online;
    throw DomainError("unknown role '" + s + "' (expected offline|online)");
}

void CohortManifest::validate() const {
    if (task_classes.size() != 2) {
        throw ConfigError("manifest task must name exactly two classes");
    }
    if (entries.empty()) {
        throw ConfigError("manifest has no entries");
    }
}

Recording read_eegb(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open file", path, 0);

    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw ParseError("bad magic (not an EEGB file)", path, 0);
    }
    std::uint8_t version = 0;
    in.read(reinterpret_cast<char*>(&version), 1);
    if (!in || version != kVersion) {
        throw ParseError("unsupported EEGB version " + std::to_string(version), path, 4);
    }
    std::uint32_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), 4);
    if (!in) throw ParseError("truncated header length", path, 5);

    std::string header_text(header_len, '\0');
    in.read(header_text.data(), header_len);
    if (!in) throw ParseError("truncated JSON header", path, 9);

    json header;
    try {
        header = json::parse(header_text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("invalid JSON header: ") + e.what(), path, 9);
    }

    Recording rec;
    try {
        rec.spec.sampling_frequency_hz = header.at("fs").get<double>();
        rec.spec.channel_names = header.at("channels").get<std::vector<std::string>>();
        for (const json& m : header.at("markers")) {
            rec.markers.push_back(
                Marker{m.at("sample").get<std::int64_t>(), m.at("label").get<int>()});
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("header missing field: ") + e.what(), path, 9);
    }
    rec.spec.validate();

    const auto n_samples = header.at("n_samples").get<std::int64_t>();
    const int channels = rec.spec.channel_count();
    const std::size_t data_offset = 9 + header_len;
    const std::int64_t n_values = n_samples * channels;

    std::vector<float> raw(static_cast<std::size_t>(n_values));
    in.read(reinterpret_cast<char*>(raw.data()),
            static_cast<std::streamsize>(n_values * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(n_values * sizeof(float))) {
        throw ParseError("file shorter than header's n_samples",
                         path, data_offset + static_cast<std::size_t>(in.gcount()));
    }

    // Sample-major on disk -> channel-major rows in memory.
    rec.data.resize(channels, n_samples);
    for (std::int64_t s = 0; s < n_samples; ++s) {
        for (int c = 0; c < channels; ++c) {
            rec.data(c, s) = static_cast<double>(raw[static_cast<std::size_t>(s * channels + c)]);
        }
    }
    return rec;
}

void write_eegb(const std::string& path, const Recording& recording) {
    recording.spec.validate();
    const int channels = recording.spec.channel_count();
    if (recording.data.rows() != channels) {
        throw ShapeError("recording data rows do not match the channel list");
    }

    json header;
    header["fs"] = recording.spec.sampling_frequency_hz;
    header["channels"] = recording.spec.channel_names;
    header["n_samples"] = recording.data.cols();
    header["markers"] = json::array();
    for (const Marker& m : recording.markers) {
        header["markers"].push_back({{"sample", m.sample}, {"label", m.label}});
    }
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ParseError("cannot open file for writing", path, 0);
    out.write(kMagic, 4);
    out.put(static_cast<char>(kVersion));
    const auto header_len = static_cast<std::uint32_t>(header_text.size());
    out.write(reinterpret_cast<const char*>(&header_len), 4);
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));

    std::vector<float> raw(static_cast<std::size_t>(recording.data.size()));
    for (std::int64_t s = 0; s < recording.data.cols(); ++s) {
        for (int c = 0; c < channels; ++c) {
            raw[static_cast<std::size_t>(s * channels + c)] =
                static_cast<float>(recording.data(c, s));
        }
    }
    out.write(reinterpret_cast<const char*>(raw.data()),
              static_cast<std::streamsize>(raw.size() * sizeof(float)));
    if (!out) throw ParseError("short write", path, 0);
}

void write_trialset(const std::string& path, const TrialSet& set) {
    set.spec.validate();
    std::int64_t total = 0;
    for (const Trial& t : set.trials) {
        if (t.data.rows() != set.spec.channel_count()) {
            throw ShapeError("trial channel count does not match the recording spec");
        }
        total += t.data.cols();
    }
    Recording rec;
    rec.spec = set.spec;
    rec.data.resize(set.spec.channel_count(), total);
    std::int64_t cursor = 0;
    for (const Trial& t : set.trials) {
        rec.markers.push_back(Marker{cursor, t.label});
        rec.data.middleCols(cursor, t.data.cols()) = t.data;
        cursor += t.data.cols();
    }
    write_eegb(path, rec);
}

std::vector<Trial> extract_epochs(const Matrix& continuous,
                                  const std::vector<Marker>& markers,
                                  double start_offset_s, double trial_length_s,
                                  double fs_hz) {
    if (!(fs_hz > 0.0)) throw DomainError("sampling frequency must be positive");
    const std::int64_t offset = round_half_up(start_offset_s * fs_hz);
    const std::int64_t length = round_half_up(trial_length_s * fs_hz);
    if (length <= 0) throw DomainError("trial length must span at least one sample");

    std::vector<Trial> trials;
    trials.reserve(markers.size());
    for (std::size_t i = 0; i < markers.size(); ++i) {
        const std::int64_t start = markers[i].sample + offset;
        const std::int64_t end = start + length;
        if (start < 0 || end > continuous.cols()) {
            throw IndexError("epoch for marker " + std::to_string(i) + " (sample " +
                             std::to_string(markers[i].sample) + ") spans [" +
                             std::to_string(start) + ", " + std::to_string(end) +
                             ") outside the recording of " +
                             std::to_string(continuous.cols()) + " samples");
        }
        Trial t;
        t.data = continuous.middleCols(start, length);
        t.label = markers[i].label;
        t.trial_length_s = trial_length_s;
        trials.push_back(std::move(t));
    }
    return trials;
}

CohortManifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open manifest", path, 0);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError(std::string("invalid manifest JSON: ") + e.what(), path, 0);
    }
    CohortManifest manifest;
    try {
        manifest.task_classes = j.at("task").get<std::vector<std::string>>();
        for (const json& e : j.at("entries")) {
            manifest.entries.push_back(ManifestEntry{
                e.at("subject").get<std::string>(), e.at("path").get<std::string>(),
                role_from_string(e.at("role").get<std::string>())});
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("manifest missing field: ") + e.what(), path, 0);
    }
    manifest.validate();
    return manifest;
}

void write_manifest(const std::string& path, const CohortManifest& manifest) {
    manifest.validate();
    json j;
    j["task"] = manifest.task_classes;
    j["entries"] = json::array();
    for (const ManifestEntry& e : manifest.entries) {
        j["entries"].push_back(
            {{"subject", e.subject_id}, {"path", e.file_path}, {"role", to_string(e.role)}});
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ParseError("cannot open manifest for writing", path, 0);
    out << j.dump(2) << "\n";
}

namespace {

TrialSet load_entry_files(const std::vector<std::string>& paths,
                          const EpochingParams& epoching) {
    TrialSet set;
    for (const std::string& path : paths) {
        Recording rec = read_eegb(path);
        if (set.trials.empty()) {
            set.spec = rec.spec;
        } else if (set.spec.channel_names != rec.spec.channel_names ||
                   set.spec.sampling_frequency_hz != rec.spec.sampling_frequency_hz) {
            throw ParseError("recording spec differs from earlier files of the same group",
                             path, 0);
        }
        double trial_len = epoching.trial_length_s;
        if (trial_len <= 0.0) {
            // Markers delimit back-to-back trials covering the whole recording.
            for (std::size_t i = 0; i < rec.markers.size(); ++i) {
                const std::int64_t start = rec.markers[i].sample;
                const std::int64_t end = i + 1 < rec.markers.size()
                                             ? rec.markers[i + 1].sample
                                             : rec.data.cols();
                Trial t;
                t.data = rec.data.middleCols(start, end - start);
                t.label = rec.markers[i].label;
                t.trial_length_s = static_cast<double>(end - start) /
                                   rec.spec.sampling_frequency_hz;
                set.trials.push_back(std::move(t));
            }
        } else {
            std::vector<Trial> trials =
                extract_epochs(rec.data, rec.markers, epoching.start_offset_s, trial_len,
                               rec.spec.sampling_frequency_hz);
            std::move(trials.begin(), trials.end(), std::back_inserter(set.trials));
        }
    }
    return set;
}

std::map<CohortKey, std::vector<std::string>> group_paths(const CohortManifest& manifest,
                                                          const std::string& base_dir) {
    std::map<CohortKey, std::vector<std::string>> grouped;
    for (const ManifestEntry& e : manifest.entries) {
        grouped[CohortKey{e.subject_id, e.role}].push_back(
            resolve_path(base_dir, e.file_path));
    }
    return grouped;
}

}  // namespace

std::vector<std::string> Cohort::subject_ids() const {
    std::vector<std::string> ids;
    for (const auto& [key, unused] : groups) {
        if (ids.empty() || ids.back() != key.subject_id) ids.push_back(key.subject_id);
    }
    return ids;
}

const TrialSet& Cohort::group(const std::string& subject, Role role) const {
    const auto it = groups.find(CohortKey{subject, role});
    if (it == groups.end()) {
        throw ConfigError("cohort has no (" + subject + ", " + to_string(role) + ") group");
    }
    return it->second;
}

bool Cohort::has_group(const std::string& subject, Role role) const {
    return groups.contains(CohortKey{subject, role});
}

Cohort load_cohort(const std::string& manifest_path, const EpochingParams& epoching) {
    Cohort cohort;
    cohort.manifest = read_manifest(manifest_path);
    const std::string base_dir = fs::path(manifest_path).parent_path().string();
    for (const auto& [key, paths] : group_paths(cohort.manifest, base_dir)) {
        cohort.groups.emplace(key, load_entry_files(paths, epoching));
    }
    return cohort;
}

LazyCohort::LazyCohort(std::string manifest_path, EpochingParams epoching)
    : manifest_(read_manifest(manifest_path)),
      manifest_dir_(fs::path(manifest_path).parent_path().string()),
      epoching_(epoching),
      pending_paths_(group_paths(manifest_, manifest_dir_)) {}

LazyCohort::LazyCohort(CohortManifest manifest, std::map<CohortKey, TrialSet> groups)
    : manifest_(std::move(manifest)), cache_(std::move(groups)) {}

std::vector<std::string> LazyCohort::subject_ids() const {
    std::vector<std::string> ids;
    std::set<std::string> seen;
    for (const auto& [key, unused] : pending_paths_) {
        if (seen.insert(key.subject_id).second) ids.push_back(key.subject_id);
    }
    for (const auto& [key, unused] : cache_) {
        if (seen.insert(key.subject_id).second) ids.push_back(key.subject_id);
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

bool LazyCohort::has_group(const std::string& subject, Role role) const {
    const CohortKey key{subject, role};
    return cache_.contains(key) || pending_paths_.contains(key);
}

const TrialSet& LazyCohort::group(const std::string& subject, Role role) {
    const CohortKey key{subject, role};
    if (const auto it = cache_.find(key); it != cache_.end()) return it->second;
    const auto pending = pending_paths_.find(key);
    if (pending == pending_paths_.end()) {
        throw ConfigError("cohort has no (" + subject + ", " + to_string(role) + ") group");
    }
    const auto [it, unused] = cache_.emplace(key, load_entry_files(pending->second, epoching_));
    return it->second;
}

}  // namespace rapstream::data
