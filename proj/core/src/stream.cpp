#include "rapstream/stream.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <thread>

#include <json.hpp>

namespace rapstream::stream {

using Clock = std::chrono::steady_clock;
using nlohmann::json;

namespace {

// One-window circular sample buffer, column (sample) oriented.
class RingBuffer {
public:
    RingBuffer(int channels, std::int64_t capacity)
        : channels_(channels), capacity_(capacity),
          data_(static_cast<std::size_t>(channels * capacity), 0.0) {}

    void clear() {
        head_ = 0;
        count_ = 0;
    }

    void push_sample(const linalg::Matrix& trial, std::int64_t column) {
        double* slot = data_.data() + static_cast<std::size_t>(head_) * channels_;
        for (int c = 0; c < channels_; ++c) slot[c] = trial(c, column);
        head_ = (head_ + 1) % capacity_;
        if (count_ < capacity_) ++count_;
    }

    bool full() const { return count_ == capacity_; }

    // Oldest-to-newest copy into a channels x capacity matrix.
    void snapshot(linalg::Matrix& out) const {
        const std::int64_t oldest = count_ == capacity_ ? head_ : 0;
        for (std::int64_t i = 0; i < capacity_; ++i) {
            const double* slot =
                data_.data() + static_cast<std::size_t>((oldest + i) % capacity_) * channels_;
            for (int c = 0; c < channels_; ++c) out(c, i) = slot[c];
        }
    }

private:
    int channels_;
    std::int64_t capacity_;
    std::int64_t head_ = 0;
    std::int64_t count_ = 0;
    std::vector<double> data_;
};

// Mutable per-run adaptation + decoder state, rebuilt for every replay.
struct RunState {
    std::optional<model::ModelState> model;
    std::optional<adapt::AdaBnState> adabn;
    const mdm::MdmModel* mdm = nullptr;
    std::optional<adapt::AlignmentReference> ref;
    bool online_align = false;
    adapt::AlignMethod align_method = adapt::AlignMethod::none;
    bool online_adabn = false;
};

RunState make_run_state(const SessionConfig& cfg, const DecoderSpec& decoder) {
    RunState rs;
    rs.align_method = cfg.mode.alignment;
    rs.online_align = cfg.mode.alignment != adapt::AlignMethod::none && !cfg.fixed_reference;
    if (cfg.fixed_reference && cfg.mode.alignment != adapt::AlignMethod::none) {
        rs.ref = cfg.fixed_reference;
    }
    if (const auto* model_decoder = std::get_if<ModelDecoder>(&decoder)) {
        rs.model = model_decoder->state;
        rs.online_adabn = cfg.mode.adabn;
        if (rs.online_adabn) {
            rs.adabn = adapt::init_adabn(*rs.model, cfg.adabn_momentum);
        }
    } else {
        const auto& mdm_decoder = std::get<MdmDecoder>(decoder);
        rs.mdm = &mdm_decoder.model;
        if (cfg.mode.adabn) {
            throw ConfigError("AdaBN does not apply to the MDM decoder");
        }
        if (rs.online_align && !rs.ref) {
            // GR seeding: source reference with prior pseudo-observations.
            rs.ref = mdm::make_gr_reference(mdm_decoder.model.source_reference,
                                            cfg.gr_prior_weight);
        }
    }
    return rs;
}

std::vector<double> decode_window(RunState& rs, const linalg::Matrix& window) {
    // The tick path runs serially: thread startup would dominate and jitter
    // the per-window latency.
    tensor::ThreadLimit serial(1);
    if (rs.align_method != adapt::AlignMethod::none && rs.online_align) {
        rs.ref = adapt::update_reference_online(rs.ref, window, rs.align_method);
    }
    if (rs.mdm) {
        // MDM aligns internally against the current reference.
        const adapt::AlignmentReference& ref = rs.ref ? *rs.ref : rs.mdm->source_reference;
        return mdm::mdm_predict(window, *rs.mdm, ref);
    }
    const linalg::Matrix* input = &window;
    linalg::Matrix aligned;
    if (rs.align_method != adapt::AlignMethod::none) {
        aligned = adapt::align(window, *rs.ref);
        input = &aligned;
    }
    model::Prediction pred;
    if (rs.online_adabn) {
        pred = adapt::forward_adabn_online(*rs.model, *rs.adabn, *input);
    } else {
        pred = model::forward(*rs.model, *input);
    }
    return std::vector<double>(pred.probs.begin(), pred.probs.end());
}

}  // namespace

double deadline_ms(const rap::OnlineTaskSpec& task) {
    return 1000.0 / task.update_frequency_hz;
}

StreamSession::StreamSession(SessionConfig config, DecoderSpec decoder)
    : config_(std::move(config)), decoder_(std::move(decoder)) {
    config_.task.validate();
    if (!(config_.sampling_frequency_hz > 0.0)) {
        throw ConfigError("session needs a positive sampling frequency");
    }
    const double hop_exact = config_.sampling_frequency_hz / config_.task.update_frequency_hz;
    if (std::abs(hop_exact - std::round(hop_exact)) > 1e-9) {
        throw ConfigError("sampling frequency must be an integer multiple of f_u");
    }
    // Surface decoder/config mismatches at construction.
    make_run_state(config_, decoder_);
}

std::vector<StreamEvent> StreamSession::run(const data::TrialSet& trials) const {
    const int channels = trials.spec.channel_count();
    const double fs = config_.sampling_frequency_hz;
    if (std::abs(trials.spec.sampling_frequency_hz - fs) > 1e-9) {
        throw ConfigError("trial sampling frequency does not match the session");
    }
    const auto window_len =
        static_cast<std::int64_t>(std::llround(config_.task.window_length_s * fs));
    const auto hop = static_cast<std::int64_t>(
        std::llround(fs / config_.task.update_frequency_hz));
    const double budget_ms = deadline_ms(config_.task);

    RunState rs = make_run_state(config_, decoder_);
    RingBuffer ring(channels, window_len);
    linalg::Matrix window(channels, window_len);

    std::vector<StreamEvent> events;
    std::int64_t tick = 0;
    std::int64_t global_samples = 0;
    const auto session_start = Clock::now();

    for (std::size_t trial_i = 0; trial_i < trials.trials.size(); ++trial_i) {
        const data::Trial& trial = trials.trials[trial_i];
        if (trial.data.rows() != channels) {
            throw ConfigError("trial channel count does not match the recording spec");
        }
        if (config_.reset_hooks_at_trial_boundaries) {
            rs = make_run_state(config_, decoder_);
        }
        ring.clear();
        int window_index = 0;
        for (std::int64_t s = 0; s < trial.data.cols(); ++s) {
            ring.push_sample(trial.data, s);
            ++global_samples;
            if (!ring.full() || (s + 1 - window_len) % hop != 0) continue;

            double jitter_ms = 0.0;
            if (config_.paced) {
                const auto scheduled =
                    session_start + std::chrono::duration_cast<Clock::duration>(
                                        std::chrono::duration<double>(
                                            static_cast<double>(global_samples) / fs));
                std::this_thread::sleep_until(scheduled);
                jitter_ms =
                    std::chrono::duration<double, std::milli>(Clock::now() - scheduled)
                        .count();
            }

            const auto t0 = Clock::now();
            if (config_.tick_probe) config_.tick_probe(tick);
            ring.snapshot(window);
            std::vector<double> probs = decode_window(rs, window);
            const double latency_ms =
                std::chrono::duration<double, std::milli>(Clock::now() - t0).count();

            StreamEvent ev;
            ev.tick = tick++;
            ev.trial_index = static_cast<std::int64_t>(trial_i);
            ev.window_index = window_index++;
            ev.probabilities = std::move(probs);
            ev.label = trial.label;
            ev.latency_ms = latency_ms;
            ev.deadline_met = latency_ms <= budget_ms;
            ev.jitter_ms = jitter_ms;
            events.push_back(std::move(ev));
        }
    }
    return events;
}

LatencyStats StreamSession::measure_latency(const data::TrialSet& trials, int repetitions,
                                            int warmup_exclude) const {
    if (repetitions < 1) {
        throw DomainError("latency measurement needs at least one repetition");
    }
    SessionConfig unpaced = config_;
    unpaced.paced = false;
    StreamSession probe(unpaced, decoder_);

    std::vector<double> latencies;
    for (int rep = 0; rep < repetitions; ++rep) {
        const std::vector<StreamEvent> events = probe.run(trials);
        for (std::size_t i = static_cast<std::size_t>(std::max(0, warmup_exclude));
             i < events.size(); ++i) {
            latencies.push_back(events[i].latency_ms);
        }
    }
    if (latencies.empty()) {
        throw DomainError("no windows left after warmup exclusion");
    }
    std::sort(latencies.begin(), latencies.end());
    LatencyStats stats;
    stats.window_count = static_cast<std::int64_t>(latencies.size());
    stats.max_ms = latencies.back();
    double sum = 0.0;
    for (double v : latencies) sum += v;
    stats.mean_ms = sum / static_cast<double>(latencies.size());
    const std::size_t p95_index = static_cast<std::size_t>(
        std::ceil(0.95 * static_cast<double>(latencies.size()))) - 1;
    stats.p95_ms = latencies[std::min(p95_index, latencies.size() - 1)];
    return stats;
}

std::int64_t count_deadline_misses(const std::vector<StreamEvent>& events) {
    std::int64_t misses = 0;
    for (const StreamEvent& ev : events) {
        if (!ev.deadline_met) ++misses;
    }
    return misses;
}

std::vector<eval::TrialPrediction> group_into_trials(const std::vector<StreamEvent>& events) {
    std::vector<eval::TrialPrediction> trials;
    for (const StreamEvent& ev : events) {
        if (trials.empty() || ev.window_index == 0) {
            eval::TrialPrediction tp;
            tp.label = ev.label;
            tp.prediction.positions = 0;
            tp.prediction.classes = static_cast<int>(ev.probabilities.size());
            trials.push_back(std::move(tp));
        }
        eval::TrialPrediction& tp = trials.back();
        if (static_cast<int>(ev.probabilities.size()) != tp.prediction.classes) {
            throw ShapeError("event probability width changed mid-trial");
        }
        tp.prediction.positions += 1;
        tp.prediction.probs.insert(tp.prediction.probs.end(), ev.probabilities.begin(),
                                   ev.probabilities.end());
        tp.prediction.boundary.push_back(false);
    }
    return trials;
}

void write_events_jsonl(const std::string& path, const std::vector<StreamEvent>& events) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ParseError("cannot open event log for writing", path, 0);
    for (const StreamEvent& ev : events) {
        json j;
        j["tick"] = ev.tick;
        j["trial"] = ev.trial_index;
        j["window"] = ev.window_index;
        j["probs"] = ev.probabilities;
        j["label"] = ev.label;
        j["latency_ms"] = ev.latency_ms;
        j["deadline_met"] = ev.deadline_met;
        j["jitter_ms"] = ev.jitter_ms;
        out << j.dump() << "\n";
    }
}

std::vector<StreamEvent> read_events_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open event log", path, 0);
    std::vector<StreamEvent> events;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(std::string("invalid event JSON: ") + e.what(), path, line_no);
        }
        StreamEvent ev;
        ev.tick = j.at("tick").get<std::int64_t>();
        ev.trial_index = j.at("trial").get<std::int64_t>();
        ev.window_index = j.at("window").get<int>();
        ev.probabilities = j.at("probs").get<std::vector<double>>();
        ev.label = j.at("label").get<int>();
        ev.latency_ms = j.at("latency_ms").get<double>();
        ev.deadline_met = j.at("deadline_met").get<bool>();
        ev.jitter_ms = j.value("jitter_ms", 0.0);
        events.push_back(std::move(ev));
    }
    return events;
}

std::string summary_json(const std::vector<StreamEvent>& events,
                         const rap::OnlineTaskSpec& task, bool paced) {
    json j;
    j["events"] = events.size();
    j["deadline_ms"] = deadline_ms(task);
    j["deadline_misses"] = count_deadline_misses(events);
    j["paced"] = paced;
    if (!events.empty()) {
        std::vector<double> lat;
        lat.reserve(events.size());
        double sum = 0.0;
        for (const StreamEvent& ev : events) {
            lat.push_back(ev.latency_ms);
            sum += ev.latency_ms;
        }
        std::sort(lat.begin(), lat.end());
        j["latency_ms"] = {
            {"mean", sum / static_cast<double>(lat.size())},
            {"p95", lat[std::min(lat.size() - 1,
                                 static_cast<std::size_t>(
                                     std::ceil(0.95 * static_cast<double>(lat.size()))) -
                                     1)]},
            {"max", lat.back()}};
    }
    return j.dump();
}

}  // namespace rapstream::stream
