#ifndef RAPSTREAM_STREAM_HPP
#define RAPSTREAM_STREAM_HPP

#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "rapstream/adapt.hpp"
#include "rapstream/data.hpp"
#include "rapstream/eval.hpp"
#include "rapstream/mdm.hpp"
#include "rapstream/model.hpp"
#include "rapstream/rap.hpp"

namespace rapstream::stream {

/// One decoded window of the pseudo-online replay.
struct StreamEvent {
    std::int64_t tick = 0;         // global window counter within the session
    std::int64_t trial_index = 0;
    int window_index = 0;
    std::vector<double> probabilities;
    int label = 0;
    double latency_ms = 0.0;
    bool deadline_met = true;      // latency <= 1000 / f_u
    double jitter_ms = 0.0;        // paced mode: wakeup lag behind the tick grid
};

struct LatencyStats {
    double mean_ms = 0.0;
    double p95_ms = 0.0;
    double max_ms = 0.0;
    std::int64_t window_count = 0;
};

struct ModelDecoder {
    model::ModelState state;
};

struct MdmDecoder {
    mdm::MdmModel model;
};

using DecoderSpec = std::variant<ModelDecoder, MdmDecoder>;

struct SessionConfig {
    rap::OnlineTaskSpec task;
    double sampling_frequency_hz = 0.0;
    /// Online hooks; the finetune flag is ignored here (fine-tuning happens
    /// before a session, on the checkpoint).
    adapt::AdaptationMode mode;
    /// Offline-calibrated reference: aligns every window, no online updates.
    /// Without it, alignment runs the single-instance online estimator
    /// (cold start from the first window; MDM seeds from its source
    /// reference with gr_prior_weight pseudo-observations).
    std::optional<adapt::AlignmentReference> fixed_reference;
    double adabn_momentum = 0.001;
    double gr_prior_weight = 0.0;
    bool paced = false;
    /// Hook state persists across trials by default; reset per trial for
    /// ablations.
    bool reset_hooks_at_trial_boundaries = false;
    /// Instrumentation probe invoked just before each decode (stall
    /// injection, progress reporting). Its cost counts toward the latency.
    std::function<void(std::int64_t tick)> tick_probe;
};

/// Replays trials as a gapless sample stream through a one-window ring
/// buffer, decoding every hop with the adaptation hooks applied in order
/// (alignment, then AdaBN) strictly window-by-window. Each run() starts
/// from the decoder's initial state, so replays are deterministic.
class StreamSession {
public:
    StreamSession(SessionConfig config, DecoderSpec decoder);

    const SessionConfig& config() const { return config_; }

    std::vector<StreamEvent> run(const data::TrialSet& trials) const;

    /// Wall-clock stats over unpaced replays; the first `warmup_exclude`
    /// windows of each repetition are discarded. repetitions must be >= 1.
    LatencyStats measure_latency(const data::TrialSet& trials, int repetitions,
                                 int warmup_exclude = 5) const;

private:
    SessionConfig config_;
    DecoderSpec decoder_;
};

/// Deadline budget in milliseconds (1000 / f_u).
double deadline_ms(const rap::OnlineTaskSpec& task);

std::int64_t count_deadline_misses(const std::vector<StreamEvent>& events);

/// Regroup a session's events into per-trial prediction rows for the metric
/// pipeline.
std::vector<eval::TrialPrediction> group_into_trials(const std::vector<StreamEvent>& events);

void write_events_jsonl(const std::string& path, const std::vector<StreamEvent>& events);
std::vector<StreamEvent> read_events_jsonl(const std::string& path);

/// Summary JSON: latency stats, deadline budget and miss count, event count.
std::string summary_json(const std::vector<StreamEvent>& events,
                         const rap::OnlineTaskSpec& task, bool paced);

}  // namespace rapstream::stream

#endif
