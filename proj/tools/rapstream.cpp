// rapstream: plan RAP pooling, generate synthetic cohorts, train and adapt
// decoders, replay pseudo-online sessions, and score them.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "rapstream/adapt.hpp"
#include "rapstream/checkpoint.hpp"
#include "rapstream/data.hpp"
#include "rapstream/eval.hpp"
#include "rapstream/mdm.hpp"
#include "rapstream/model.hpp"
#include "rapstream/rap.hpp"
#include "rapstream/stream.hpp"
#include "rapstream/synth.hpp"
#include "rapstream/train.hpp"

namespace rs = rapstream;
using nlohmann::json;

namespace {

std::string default_out_dir() {
    const char* cache = std::getenv("RAPSTREAM_CACHE_DIR");
    return cache && *cache ? std::string(cache) : std::string(".");
}

// ---- JSON config file -> injected command-line tokens ----------------------
// The config file is a flat JSON object whose keys are long option names of
// the invoked subcommand. Injected tokens precede the user's own flags, and
// every option takes the last occurrence, so explicit flags win.

std::vector<std::string> config_tokens(const json& cfg) {
    std::vector<std::string> tokens;
    for (const auto& [key, value] : cfg.items()) {
        if (value.is_boolean()) {
            if (value.get<bool>()) tokens.push_back("--" + key);
            continue;
        }
        std::string text;
        if (value.is_array()) {
            for (const auto& item : value) {
                if (!text.empty()) text += ",";
                text += item.is_string() ? item.get<std::string>() : item.dump();
            }
        } else if (value.is_string()) {
            text = value.get<std::string>();
        } else {
            text = value.dump();
        }
        tokens.push_back("--" + key);
        tokens.push_back(text);
    }
    return tokens;
}

std::vector<std::string> rebuild_args(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    std::string config_path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            config_path = args[i + 1];
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i),
                       args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
            break;
        }
        if (args[i].rfind("--config=", 0) == 0) {
            config_path = args[i].substr(9);
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
            break;
        }
    }
    if (config_path.empty()) return args;

    std::ifstream in(config_path);
    if (!in) throw rs::ParseError("cannot open config file", config_path, 0);
    json cfg;
    try {
        in >> cfg;
    } catch (const json::exception& e) {
        throw rs::ParseError(std::string("invalid config JSON: ") + e.what(), config_path, 0);
    }
    // Insert right after the subcommand token.
    std::size_t insert_at = 0;
    while (insert_at < args.size() && !args[insert_at].empty() && args[insert_at][0] == '-') {
        ++insert_at;
    }
    ++insert_at;  // past the subcommand itself
    insert_at = std::min(insert_at, args.size());
    const std::vector<std::string> injected = config_tokens(cfg);
    args.insert(args.begin() + static_cast<std::ptrdiff_t>(insert_at), injected.begin(),
                injected.end());
    return args;
}

// ---- shared option bundles ---------------------------------------------------

struct TaskFlags {
    double window_len = 1.0;
    double update_freq = 16.0;
    double trial_len = 0.0;

    rs::rap::OnlineTaskSpec to_task() const {
        rs::rap::OnlineTaskSpec task;
        task.window_length_s = window_len;
        task.update_frequency_hz = update_freq;
        if (trial_len > 0.0) task.trial_length_s = trial_len;
        return task;
    }
};

void add_task_flags(CLI::App* sub, TaskFlags& flags, bool trial_required) {
    sub->add_option("--window-len", flags.window_len, "Window length T_w in seconds")
        ->check(CLI::PositiveNumber);
    sub->add_option("--update-freq", flags.update_freq, "Update frequency f_u in Hz")
        ->check(CLI::PositiveNumber);
    auto* opt = sub->add_option("--trial-len", flags.trial_len,
                                "Effective trial length T_t in seconds");
    if (trial_required) opt->required();
}

struct ModelFlags {
    int f1 = 16;
    int temporal_kernel = 64;
    int depth = 2;
    int f2 = 32;
    int second_kernel = 16;
    double dropout = 0.25;
    std::string padding = "valid";
    double bn_momentum = 0.1;

    rs::model::ModelConfig to_config(int channels, const rs::rap::RapPlan& plan) const {
        rs::model::ModelConfig cfg;
        cfg.channel_count = channels;
        cfg.temporal_filters = f1;
        cfg.temporal_kernel = temporal_kernel;
        cfg.depth_multiplier = depth;
        cfg.second_block_filters = f2;
        cfg.second_kernel = second_kernel;
        cfg.dropout_rate = dropout;
        cfg.padding_mode = rs::model::padding_mode_from_string(padding);
        cfg.bn_momentum = bn_momentum;
        cfg.rap_plan = plan;
        return cfg;
    }
};

void add_model_flags(CLI::App* sub, ModelFlags& flags) {
    sub->add_option("--f1", flags.f1, "Temporal filter count");
    sub->add_option("--temporal-kernel", flags.temporal_kernel, "Temporal kernel (samples)");
    sub->add_option("--depth", flags.depth, "Depth multiplier of the spatial conv");
    sub->add_option("--f2", flags.f2, "Second-block filter count");
    sub->add_option("--second-kernel", flags.second_kernel,
                    "Second-block kernel (frames at f_inter)");
    sub->add_option("--dropout", flags.dropout, "Dropout rate");
    sub->add_option("--padding", flags.padding, "Padding mode: valid|same")
        ->check(CLI::IsMember({"valid", "same"}));
    sub->add_option("--bn-momentum", flags.bn_momentum, "BN running-stat momentum");
}

struct EpochFlags {
    double offset = 0.0;
    double length = 0.0;  // 0: markers delimit whole trials
};

void add_epoch_flags(CLI::App* sub, EpochFlags& flags) {
    sub->add_option("--epoch-offset", flags.offset, "Epoch start offset after marker (s)");
    sub->add_option("--epoch-len", flags.length,
                    "Epoch length in seconds (0: trials span marker to marker)");
}

// Derive the online task implied by a checkpointed plan.
rs::rap::OnlineTaskSpec task_from_plan(const rs::rap::RapPlan& plan) {
    rs::rap::OnlineTaskSpec task;
    task.window_length_s = static_cast<double>(plan.final_kernel()) /
                           plan.intermediate_frequency_hz;
    task.update_frequency_hz = static_cast<double>(plan.intermediate_frequency_hz) /
                               plan.final_stride();
    return task;
}

json plan_to_json(const rs::rap::RapPlan& plan) {
    return json{{"k", plan.kernel_sizes},
                {"s", plan.strides},
                {"f_inter", plan.intermediate_frequency_hz}};
}

// Alignment reference <-> checkpoint tensors ("align." prefix).
void store_reference(rs::checkpoint::Container& c, const rs::adapt::AlignmentReference& ref) {
    const auto dim = ref.rbar.dim();
    rs::checkpoint::TensorEntry rbar{"align.rbar", {dim, dim}, {}};
    rs::checkpoint::TensorEntry inv{"align.rbar_inv_sqrt", {dim, dim}, {}};
    for (Eigen::Index r = 0; r < dim; ++r) {
        for (Eigen::Index col = 0; col < dim; ++col) {
            rbar.data.push_back(static_cast<float>(ref.rbar.values()(r, col)));
            inv.data.push_back(static_cast<float>(ref.rbar_inv_sqrt(r, col)));
        }
    }
    c.tensors.push_back(std::move(rbar));
    c.tensors.push_back(std::move(inv));
    json meta = c.meta_json.empty() ? json::object() : json::parse(c.meta_json);
    meta["alignment"] = rs::adapt::to_string(ref.method);
    meta["alignment_samples"] = ref.sample_count;
    c.meta_json = meta.dump();
}

std::optional<rs::adapt::AlignmentReference> load_reference(
    const rs::checkpoint::Container& c) {
    const auto* rbar = c.find("align.rbar");
    if (!rbar) return std::nullopt;
    const auto dim = rbar->shape.at(0);
    rs::linalg::Matrix m(dim, dim);
    for (Eigen::Index r = 0; r < dim; ++r) {
        for (Eigen::Index col = 0; col < dim; ++col) {
            m(r, col) = rbar->data[static_cast<std::size_t>(r * dim + col)];
        }
    }
    const json meta = c.meta_json.empty() ? json::object() : json::parse(c.meta_json);
    const auto method = rs::adapt::align_method_from_string(
        meta.value("alignment", std::string("euclidean")));
    const double n = meta.value("alignment_samples", 1.0);
    return rs::adapt::AlignmentReference(method, rs::linalg::SpdMatrix(m), std::max(1.0, n));
}

void store_mdm(rs::checkpoint::Container& c, const rs::mdm::MdmModel& model) {
    for (std::size_t k = 0; k < model.class_means.size(); ++k) {
        const auto& mean = model.class_means[k];
        const auto dim = mean.dim();
        rs::checkpoint::TensorEntry t{"mdm.class_mean_" + std::to_string(k), {dim, dim}, {}};
        for (Eigen::Index r = 0; r < dim; ++r) {
            for (Eigen::Index col = 0; col < dim; ++col) {
                t.data.push_back(static_cast<float>(mean.values()(r, col)));
            }
        }
        c.tensors.push_back(std::move(t));
    }
    json meta = c.meta_json.empty() ? json::object() : json::parse(c.meta_json);
    meta["mdm_classes"] = model.class_means.size();
    meta["mdm_temperature"] = model.softmax_temperature;
    c.meta_json = meta.dump();
}

rs::mdm::MdmModel load_mdm(const rs::checkpoint::Container& c) {
    const json meta = c.meta_json.empty() ? json::object() : json::parse(c.meta_json);
    const auto classes = meta.value("mdm_classes", std::size_t{0});
    if (classes < 2) throw rs::ParseError("checkpoint has no MDM model", "<container>", 0);
    std::vector<rs::linalg::SpdMatrix> means;
    for (std::size_t k = 0; k < classes; ++k) {
        const auto* t = c.find("mdm.class_mean_" + std::to_string(k));
        if (!t) throw rs::ParseError("missing MDM class mean tensor", "<container>", 0);
        const auto dim = t->shape.at(0);
        rs::linalg::Matrix m(dim, dim);
        for (Eigen::Index r = 0; r < dim; ++r) {
            for (Eigen::Index col = 0; col < dim; ++col) {
                m(r, col) = t->data[static_cast<std::size_t>(r * dim + col)];
            }
        }
        means.emplace_back(m);
    }
    auto ref = load_reference(c);
    if (!ref) throw rs::ParseError("MDM checkpoint lacks its reference", "<container>", 0);
    return rs::mdm::MdmModel{std::move(means), *std::move(ref),
                             meta.value("mdm_temperature", 1.0)};
}

std::vector<rs::linalg::Matrix> subject_windows(const rs::data::TrialSet& set,
                                                const rs::rap::RapPlan& plan) {
    const int window = plan.final_kernel() * plan.downsampling_factor();
    const int hop = plan.downsampling_factor() * plan.final_stride();
    std::vector<rs::linalg::Matrix> windows;
    for (const auto& trial : set.trials) {
        auto w = rs::adapt::slice_windows(trial.data, window, hop);
        std::move(w.begin(), w.end(), std::back_inserter(windows));
    }
    return windows;
}

// ---- eval report -------------------------------------------------------------

struct SubjectScore {
    std::string id;
    rs::eval::MetricReport report;
};

json report_json(const std::string& method, const std::vector<SubjectScore>& scores) {
    json out;
    out["method"] = method;
    out["utacc_definition"] = "majority";  // per-window argmax votes, ties incorrect
    out["per_subject"] = json::array();
    std::map<std::string, std::vector<double>> metrics;
    std::vector<double> curve;
    bool curve_uniform = !scores.empty();
    for (const SubjectScore& s : scores) {
        out["per_subject"].push_back({{"id", s.id},
                                      {"tacc", s.report.tacc},
                                      {"utacc", s.report.utacc},
                                      {"wacc", s.report.wacc},
                                      {"n_trials", s.report.n_trials}});
        metrics["tacc"].push_back(s.report.tacc);
        metrics["utacc"].push_back(s.report.utacc);
        metrics["wacc"].push_back(s.report.wacc);
        if (s.report.per_window_accuracy.empty()) {
            curve_uniform = false;
        } else if (curve.empty()) {
            curve = s.report.per_window_accuracy;
        } else if (curve.size() != s.report.per_window_accuracy.size()) {
            curve_uniform = false;
        } else {
            for (std::size_t i = 0; i < curve.size(); ++i) {
                curve[i] += s.report.per_window_accuracy[i];
            }
        }
    }
    const auto agg = rs::train::multi_seed_aggregate(metrics);
    out["mean"] = {{"tacc", agg.at("tacc").mean},
                   {"utacc", agg.at("utacc").mean},
                   {"wacc", agg.at("wacc").mean}};
    out["std"] = {{"tacc", agg.at("tacc").stddev},
                  {"utacc", agg.at("utacc").stddev},
                  {"wacc", agg.at("wacc").stddev}};
    if (curve_uniform && !curve.empty()) {
        for (double& v : curve) v /= static_cast<double>(scores.size());
        out["curve"] = curve;
    }
    return out;
}

// Percentages to one decimal, table style; the JSON report keeps full precision.
void write_report_csv(const std::string& path, const std::vector<SubjectScore>& scores) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw rs::ParseError("cannot open CSV for writing", path, 0);
    out << "id,tacc_pct,utacc_pct,wacc_pct,n_trials\n";
    char line[160];
    for (const SubjectScore& s : scores) {
        std::snprintf(line, sizeof(line), "%s,%.1f,%.1f,%.1f,%lld\n", s.id.c_str(),
                      100.0 * s.report.tacc, 100.0 * s.report.utacc, 100.0 * s.report.wacc,
                      static_cast<long long>(s.report.n_trials));
        out << line;
    }
}

std::vector<double> metric_series_from_file(const std::string& path,
                                            const std::string& metric) {
    std::ifstream in(path);
    if (!in) throw rs::ParseError("cannot open metric file", path, 0);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw rs::ParseError(std::string("invalid JSON: ") + e.what(), path, 0);
    }
    std::vector<double> values;
    if (j.is_array()) {
        for (const auto& v : j) values.push_back(v.get<double>());
    } else if (j.contains("per_subject")) {
        for (const auto& s : j["per_subject"]) values.push_back(s.at(metric).get<double>());
    } else {
        throw rs::ParseError("expected a JSON array or an eval report", path, 0);
    }
    return values;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Real-time adaptive pooling for streaming EEG decoding"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");
    app.footer("A JSON --config file supplies defaults; explicit flags win.");

    int exit_code = 0;
    bool json_out = false;
    int jobs = 1;

    // plan-rap ------------------------------------------------------------
    auto* plan_cmd = app.add_subcommand("plan-rap", "Derive pooling kernels from a task");
    int plan_fs = 256;
    std::vector<int> plan_down;
    TaskFlags plan_task;
    bool plan_print_config = false;
    plan_cmd->add_option("--fs", plan_fs, "Sampling frequency in Hz")->required();
    plan_cmd->add_option("--down", plan_down, "Downsampling kernels (comma separated)")
        ->delimiter(',');
    add_task_flags(plan_cmd, plan_task, false);
    plan_cmd->add_flag("--print-config", plan_print_config, "Dump effective config");
    plan_cmd->callback([&] {
        if (plan_print_config) {
            std::cout << json{{"fs", plan_fs},
                              {"down", plan_down},
                              {"window-len", plan_task.window_len},
                              {"update-freq", plan_task.update_freq},
                              {"trial-len", plan_task.trial_len}}
                             .dump(2)
                      << "\n";
            return;
        }
        const auto plan = rs::rap::plan_rap(plan_fs, plan_down, plan_task.to_task());
        json out = plan_to_json(plan);
        if (plan_task.trial_len > 0.0) {
            out["n_w"] = rs::rap::windows_per_trial(plan_task.to_task());
            out["gain"] = rs::rap::computational_gain(plan_task.to_task());
        }
        std::cout << out.dump() << "\n";
    });

    // gain ------------------------------------------------------------------
    auto* gain_cmd = app.add_subcommand("gain", "Computational gain of joint decoding");
    TaskFlags gain_task;
    add_task_flags(gain_cmd, gain_task, true);
    gain_cmd->callback([&] {
        const double gain = rs::rap::computational_gain(gain_task.to_task());
        if (json_out) {
            std::cout << json{{"gain", gain},
                              {"n_w", rs::rap::windows_per_trial(gain_task.to_task())}}
                             .dump()
                      << "\n";
        } else {
            char buffer[64];
            std::snprintf(buffer, sizeof(buffer), "%.4f", gain);
            std::cout << buffer << "\n";
        }
    });

    // synth -------------------------------------------------------------------
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic EEG cohort");
    rs::synth::SynthConfig synth_cfg;
    std::string synth_out = default_out_dir();
    synth_cmd->add_option("--subjects", synth_cfg.subject_count, "Subjects");
    synth_cmd->add_option("--trials", synth_cfg.trials_per_subject, "Trials per role");
    synth_cmd->add_option("--separability", synth_cfg.class_separability,
                          "Class separability in [0,1]");
    synth_cmd->add_option("--subject-shift", synth_cfg.subject_shift_scale,
                          "Between-subject mixing scale");
    synth_cmd->add_option("--session-shift", synth_cfg.session_shift_scale,
                          "Offline-to-online mixing scale");
    synth_cmd->add_option("--seed", synth_cfg.rng_seed, "RNG seed");
    synth_cmd->add_option("--channels", synth_cfg.channel_count, "Channel count");
    synth_cmd->add_option("--fs", synth_cfg.sampling_frequency_hz, "Sampling frequency");
    synth_cmd->add_option("--trial-len", synth_cfg.trial_length_s, "Trial length (s)");
    synth_cmd->add_option("--out", synth_out, "Output directory");
    bool synth_print_config = false;
    synth_cmd->add_flag("--print-config", synth_print_config, "Dump effective config");
    synth_cmd->callback([&] {
        namespace fs = std::filesystem;
        if (synth_print_config) {
            std::cout << json{{"subjects", synth_cfg.subject_count},
                              {"trials", synth_cfg.trials_per_subject},
                              {"separability", synth_cfg.class_separability},
                              {"subject-shift", synth_cfg.subject_shift_scale},
                              {"session-shift", synth_cfg.session_shift_scale},
                              {"seed", synth_cfg.rng_seed},
                              {"channels", synth_cfg.channel_count},
                              {"fs", synth_cfg.sampling_frequency_hz},
                              {"trial-len", synth_cfg.trial_length_s},
                              {"out", synth_out}}
                             .dump(2)
                      << "\n";
            return;
        }
        fs::create_directories(synth_out);
        const rs::data::Cohort cohort = rs::synth::generate_synth_cohort(synth_cfg);
        rs::data::CohortManifest manifest;
        manifest.task_classes = cohort.manifest.task_classes;
        for (const auto& [key, set] : cohort.groups) {
            const std::string name =
                key.subject_id + "_" + rs::data::to_string(key.role) + ".eegb";
            rs::data::write_trialset((fs::path(synth_out) / name).string(), set);
            manifest.entries.push_back(rs::data::ManifestEntry{key.subject_id, name, key.role});
        }
        const std::string mpath = (fs::path(synth_out) / "manifest.json").string();
        rs::data::write_manifest(mpath, manifest);
        std::cout << json{{"manifest", mpath},
                          {"subjects", synth_cfg.subject_count},
                          {"trials_per_role", synth_cfg.trials_per_subject}}
                         .dump()
                  << "\n";
    });

    // train ----------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "Source training (within or LOSO)");
    std::string train_manifest, train_target, train_split = "loso", train_mode = "none";
    std::string train_out = default_out_dir();
    std::string train_decoder = "basenet";
    std::vector<int> train_down = {8};
    TaskFlags train_task;
    ModelFlags train_model;
    EpochFlags train_epochs_flags;
    rs::train::TrainConfig train_cfg;
    std::vector<std::uint64_t> train_seeds = {1, 2, 3, 4, 5};
    train_cmd->add_option("--manifest", train_manifest, "Cohort manifest")->required();
    train_cmd->add_option("--target", train_target, "Target (held-out) subject")->required();
    train_cmd->add_option("--split", train_split, "loso|within")
        ->check(CLI::IsMember({"loso", "within"}));
    train_cmd->add_option("--mode", train_mode,
                          "Source-side alignment: none|ea|ra (adaptation grammar)");
    train_cmd->add_option("--decoder", train_decoder, "basenet|mdm")
        ->check(CLI::IsMember({"basenet", "mdm"}));
    train_cmd->add_option("--down", train_down, "Downsampling kernels")->delimiter(',');
    add_task_flags(train_cmd, train_task, false);
    add_model_flags(train_cmd, train_model);
    add_epoch_flags(train_cmd, train_epochs_flags);
    train_cmd->add_option("--lr", train_cfg.learning_rate, "Learning rate");
    train_cmd->add_option("--epochs", train_cfg.epochs, "Training epochs");
    train_cmd->add_option("--warmup", train_cfg.warmup_epochs, "Warmup epochs");
    train_cmd->add_option("--batch", train_cfg.batch_size, "Batch size (trials)");
    train_cmd->add_option("--seeds", train_seeds, "Random seeds")->delimiter(',');
    train_cmd->add_option("--out", train_out, "Checkpoint/log directory");
    bool train_print_config = false;
    train_cmd->add_flag("--print-config", train_print_config, "Dump effective config");
    train_cmd->callback([&] {
        namespace fs = std::filesystem;
        if (train_print_config) {
            std::cout << json{{"manifest", train_manifest},
                              {"target", train_target},
                              {"split", train_split},
                              {"mode", train_mode},
                              {"decoder", train_decoder},
                              {"down", train_down},
                              {"window-len", train_task.window_len},
                              {"update-freq", train_task.update_freq},
                              {"f1", train_model.f1},
                              {"temporal-kernel", train_model.temporal_kernel},
                              {"depth", train_model.depth},
                              {"f2", train_model.f2},
                              {"second-kernel", train_model.second_kernel},
                              {"dropout", train_model.dropout},
                              {"padding", train_model.padding},
                              {"lr", train_cfg.learning_rate},
                              {"epochs", train_cfg.epochs},
                              {"warmup", train_cfg.warmup_epochs},
                              {"batch", train_cfg.batch_size},
                              {"seeds", train_seeds},
                              {"out", train_out}}
                             .dump(2)
                      << "\n";
            return;
        }
        fs::create_directories(train_out);
        const auto mode = rs::adapt::parse_adaptation_mode(train_mode);
        rs::data::LazyCohort cohort(train_manifest,
                                    rs::data::EpochingParams{train_epochs_flags.offset,
                                                             train_epochs_flags.length});
        // Probe one group for the recording geometry.
        const auto subjects = cohort.subject_ids();
        if (subjects.empty()) throw rs::ConfigError("empty cohort");
        std::string probe_subject;
        for (const auto& s : subjects) {
            if (s != train_target && cohort.has_group(s, rs::data::Role::offline)) {
                probe_subject = s;
                break;
            }
        }
        if (probe_subject.empty()) probe_subject = train_target;
        const auto& probe = cohort.group(probe_subject, rs::data::Role::offline);
        const int channels = probe.spec.channel_count();
        const int fs_hz = static_cast<int>(probe.spec.sampling_frequency_hz);

        const auto plan = rs::rap::plan_rap(fs_hz, train_down, train_task.to_task());

        if (train_decoder == "mdm") {
            // Benchmark fit: per-subject aligned windows pooled over sources.
            const auto align_method = mode.alignment == rs::adapt::AlignMethod::none
                                          ? rs::adapt::AlignMethod::riemannian
                                          : mode.alignment;
            const int window = plan.final_kernel() * plan.downsampling_factor();
            const int hop = plan.downsampling_factor() * plan.final_stride();
            std::vector<rs::linalg::Matrix> aligned;
            std::vector<int> labels;
            for (const auto& subject : subjects) {
                if (train_split == "loso" && subject == train_target) continue;
                if (train_split == "within" && subject != train_target) continue;
                if (!cohort.has_group(subject, rs::data::Role::offline)) continue;
                const auto& set = cohort.group(subject, rs::data::Role::offline);
                const auto ref =
                    rs::adapt::fit_reference(subject_windows(set, plan), align_method);
                for (const auto& trial : set.trials) {
                    for (const auto& win :
                         rs::adapt::slice_windows(trial.data, window, hop)) {
                        aligned.push_back(rs::adapt::align(win, ref));
                        labels.push_back(trial.label);
                    }
                }
            }
            const auto pooled_ref = rs::adapt::fit_reference(aligned, align_method);
            const auto model = rs::mdm::mdm_fit(aligned, labels, 2, pooled_ref);
            rs::checkpoint::Container c;
            c.kind = "mdm";
            store_mdm(c, model);
            store_reference(c, pooled_ref);
            json meta = json::parse(c.meta_json);
            meta["window_samples"] = window;
            meta["hop_samples"] = hop;
            c.meta_json = meta.dump();
            const std::string path = (fs::path(train_out) / "mdm.rapc").string();
            rs::checkpoint::write_container(path, c);
            std::cout << json{{"checkpoint", path}, {"windows", aligned.size()}}.dump()
                      << "\n";
            return;
        }

        rs::train::TrainConfig cfg = train_cfg;
        cfg.seeds = train_seeds;
        cfg.split = train_split == "within" ? rs::train::Split::within_subject
                                            : rs::train::Split::cross_subject_loso;
        cfg.alignment = mode.alignment;
        const auto mcfg = train_model.to_config(channels, plan);

        std::vector<rs::train::TrainingRun> runs;
        if (jobs > 1 && cfg.seeds.size() > 1) {
            std::vector<rs::train::TrainingRun> slots(cfg.seeds.size());
            std::vector<std::thread> pool;
            std::atomic<std::size_t> next{0};
            // Pre-load the shared groups once; training itself is read-only.
            for (const auto& s : subjects) {
                if (cohort.has_group(s, rs::data::Role::offline) &&
                    !(cfg.split == rs::train::Split::cross_subject_loso && s == train_target)) {
                    cohort.group(s, rs::data::Role::offline);
                }
            }
            for (int t = 0; t < std::min<int>(jobs, static_cast<int>(cfg.seeds.size())); ++t) {
                pool.emplace_back([&] {
                    for (;;) {
                        const std::size_t i = next.fetch_add(1);
                        if (i >= cfg.seeds.size()) return;
                        rs::train::TrainConfig one = cfg;
                        one.seeds = {cfg.seeds[i]};
                        slots[i] = std::move(
                            rs::train::run_training(cohort, train_target, mcfg, one)[0]);
                    }
                });
            }
            for (auto& th : pool) th.join();
            runs = std::move(slots);
        } else {
            runs = rs::train::run_training(cohort, train_target, mcfg, cfg);
        }

        json out;
        out["checkpoints"] = json::array();
        for (const auto& run : runs) {
            const std::string ckpt =
                (fs::path(train_out) / ("ckpt_seed" + std::to_string(run.seed) + ".rapc"))
                    .string();
            rs::checkpoint::Container c = rs::checkpoint::pack_model(run.state);
            if (run.source_reference) store_reference(c, *run.source_reference);
            rs::checkpoint::write_container(ckpt, c);
            rs::train::write_training_log(
                (fs::path(train_out) / ("train_log_seed" + std::to_string(run.seed) + ".jsonl"))
                    .string(),
                run.log);
            out["checkpoints"].push_back(ckpt);
            out["final_loss"].push_back(run.log.back().loss);
        }
        std::cout << out.dump() << "\n";
    });

    // adapt -----------------------------------------------------------------
    auto* adapt_cmd = app.add_subcommand("adapt", "Source-free adaptation of a checkpoint");
    std::string adapt_ckpt, adapt_manifest, adapt_target, adapt_mode_str = "ea";
    std::string adapt_out;
    EpochFlags adapt_epochs;
    double adapt_ft_lr = 1e-4;
    int adapt_ft_epochs = 20;
    int adapt_ft_batch = 64;
    double adapt_par_blend = 0.5;
    adapt_cmd->add_option("--ckpt", adapt_ckpt, "Source checkpoint")->required();
    adapt_cmd->add_option("--manifest", adapt_manifest, "Cohort manifest")->required();
    adapt_cmd->add_option("--target", adapt_target, "Target subject")->required();
    adapt_cmd->add_option("--mode", adapt_mode_str,
                          "none|ft|ea|ra|adabn|ea+adabn|ra+adabn|ft+ea|ft+ra");
    adapt_cmd->add_option("--out", adapt_out, "Adapted checkpoint path")->required();
    add_epoch_flags(adapt_cmd, adapt_epochs);
    adapt_cmd->add_option("--ft-lr", adapt_ft_lr, "Fine-tune learning rate");
    adapt_cmd->add_option("--ft-epochs", adapt_ft_epochs, "Fine-tune epochs");
    adapt_cmd->add_option("--ft-batch", adapt_ft_batch, "Fine-tune batch size");
    adapt_cmd->add_option("--par-blend", adapt_par_blend, "MDM PAR blend weight");
    bool adapt_print_config = false;
    adapt_cmd->add_flag("--print-config", adapt_print_config, "Dump effective config");
    adapt_cmd->callback([&] {
        if (adapt_print_config) {
            std::cout << json{{"ckpt", adapt_ckpt},
                              {"manifest", adapt_manifest},
                              {"target", adapt_target},
                              {"mode", adapt_mode_str},
                              {"ft-lr", adapt_ft_lr},
                              {"ft-epochs", adapt_ft_epochs},
                              {"ft-batch", adapt_ft_batch},
                              {"par-blend", adapt_par_blend},
                              {"out", adapt_out}}
                             .dump(2)
                      << "\n";
            return;
        }
        const auto mode = rs::adapt::parse_adaptation_mode(adapt_mode_str);
        rs::data::LazyCohort cohort(
            adapt_manifest, rs::data::EpochingParams{adapt_epochs.offset, adapt_epochs.length});
        const auto& calibration = cohort.group(adapt_target, rs::data::Role::offline);

        rs::checkpoint::Container c = rs::checkpoint::read_container(adapt_ckpt);
        if (c.kind == "mdm") {
            // The MDM benchmark: PAR when labels are used (ft), plain
            // reference refit on the target calibration otherwise.
            rs::mdm::MdmModel model = load_mdm(c);
            const json meta = json::parse(c.meta_json);
            rs::checkpoint::Container out_c;
            out_c.kind = "mdm";
            const int window = meta.value("window_samples", 0);
            const int hop = meta.value("hop_samples", 0);
            if (window <= 0 || hop <= 0) {
                throw rs::ConfigError("MDM checkpoint lacks window geometry metadata");
            }
            std::vector<rs::linalg::Matrix> windows;
            std::vector<int> labels;
            for (const auto& trial : calibration.trials) {
                for (const auto& w : rs::adapt::slice_windows(trial.data, window, hop)) {
                    windows.push_back(w);
                    labels.push_back(trial.label);
                }
            }
            if (mode.finetune) {
                const auto par = rs::mdm::par_update(model, windows, labels, adapt_par_blend);
                store_mdm(out_c, par.model);
                store_reference(out_c, par.reference);
            } else {
                const auto ref = rs::adapt::fit_reference(
                    windows, model.source_reference.method);
                store_mdm(out_c, model);
                store_reference(out_c, ref);
            }
            json out_meta = json::parse(out_c.meta_json);
            out_meta["window_samples"] = window;
            out_meta["hop_samples"] = hop;
            out_meta["adapted"] = true;
            out_c.meta_json = out_meta.dump();
            rs::checkpoint::write_container(adapt_out, out_c);
            std::cout << json{{"checkpoint", adapt_out},
                              {"mode", rs::adapt::to_string(mode)}}
                             .dump()
                      << "\n";
            return;
        }

        rs::model::ModelState state = rs::checkpoint::unpack_model(c);
        std::optional<rs::adapt::AlignmentReference> reference;
        std::vector<rs::linalg::Matrix> windows = subject_windows(calibration, state.config.rap_plan);

        if (mode.alignment != rs::adapt::AlignMethod::none) {
            reference = rs::adapt::fit_reference(windows, mode.alignment);
        }
        if (mode.finetune) {
            rs::adapt::FineTuneConfig ft;
            ft.learning_rate = adapt_ft_lr;
            ft.epochs = adapt_ft_epochs;
            ft.batch_size = adapt_ft_batch;
            ft.alignment = mode.alignment;
            const auto result = rs::adapt::supervised_finetune(state, calibration, ft);
            state = result.state;
            if (result.reference) reference = result.reference;
        } else if (mode.adabn) {
            std::vector<rs::linalg::Matrix> calib = windows;
            if (reference) {
                for (auto& w : calib) w = rs::adapt::align(w, *reference);
            }
            rs::adapt::adabn_replace(state, calib);
        }

        rs::checkpoint::Container out_c = rs::checkpoint::pack_model(state);
        if (reference) store_reference(out_c, *reference);
        json out_meta = out_c.meta_json.empty() ? json::object() : json::parse(out_c.meta_json);
        out_meta["adaptation_mode"] = rs::adapt::to_string(mode);
        out_c.meta_json = out_meta.dump();
        rs::checkpoint::write_container(adapt_out, out_c);
        std::cout << json{{"checkpoint", adapt_out}, {"mode", rs::adapt::to_string(mode)}}.dump()
                  << "\n";
    });

    // stream ----------------------------------------------------------------
    auto* stream_cmd = app.add_subcommand("stream", "Pseudo-online replay of a subject");
    std::string stream_ckpt, stream_manifest, stream_target, stream_mode_str = "none";
    std::string stream_events_path, stream_summary_path;
    EpochFlags stream_epochs;
    bool stream_paced = false, stream_strict = false, stream_reset = false;
    double stream_gr_prior = 0.0, stream_adabn_momentum = 0.001;
    stream_cmd->add_option("--ckpt", stream_ckpt, "Decoder checkpoint")->required();
    stream_cmd->add_option("--manifest", stream_manifest, "Cohort manifest")->required();
    stream_cmd->add_option("--target", stream_target, "Subject whose online data is replayed")
        ->required();
    stream_cmd->add_option("--mode", stream_mode_str, "Online hooks: none|ea|ra|adabn|...");
    stream_cmd->add_option("--events", stream_events_path, "Event log (JSON lines) output");
    stream_cmd->add_option("--summary", stream_summary_path, "Summary JSON output");
    add_epoch_flags(stream_cmd, stream_epochs);
    stream_cmd->add_flag("--paced", stream_paced, "Pace ticks on the 1/f_u grid");
    stream_cmd->add_flag("--strict", stream_strict,
                         "Exit nonzero on any paced deadline miss");
    stream_cmd->add_flag("--reset-at-trials", stream_reset,
                         "Reset adaptation hooks at trial boundaries");
    stream_cmd->add_option("--gr-prior", stream_gr_prior, "MDM GR prior weight");
    stream_cmd->add_option("--adabn-momentum", stream_adabn_momentum, "Online AdaBN momentum");
    bool stream_print_config = false;
    stream_cmd->add_flag("--print-config", stream_print_config, "Dump effective config");
    stream_cmd->callback([&] {
        if (stream_print_config) {
            std::cout << json{{"ckpt", stream_ckpt},
                              {"manifest", stream_manifest},
                              {"target", stream_target},
                              {"mode", stream_mode_str},
                              {"paced", stream_paced},
                              {"strict", stream_strict},
                              {"reset-at-trials", stream_reset},
                              {"gr-prior", stream_gr_prior},
                              {"adabn-momentum", stream_adabn_momentum}}
                             .dump(2)
                      << "\n";
            return;
        }
        const auto mode = rs::adapt::parse_adaptation_mode(stream_mode_str);
        rs::data::LazyCohort cohort(
            stream_manifest,
            rs::data::EpochingParams{stream_epochs.offset, stream_epochs.length});
        const auto& online = cohort.group(stream_target, rs::data::Role::online);

        const rs::checkpoint::Container c = rs::checkpoint::read_container(stream_ckpt);
        const json meta = c.meta_json.empty() ? json::object() : json::parse(c.meta_json);
        rs::stream::SessionConfig scfg;
        scfg.mode = mode;
        scfg.mode.finetune = false;  // fine-tuning happened at the adapt step
        scfg.paced = stream_paced;
        scfg.reset_hooks_at_trial_boundaries = stream_reset;
        scfg.gr_prior_weight = stream_gr_prior;
        scfg.adabn_momentum = stream_adabn_momentum;
        scfg.sampling_frequency_hz = online.spec.sampling_frequency_hz;
        // A reference written by the adapt step is a target calibration and
        // stays fixed; anything else (e.g. a pooled source reference from
        // aligned training) leaves the online estimator in charge.
        const bool calibrated =
            meta.contains("adaptation_mode") || meta.value("adapted", false);
        if (mode.alignment != rs::adapt::AlignMethod::none && calibrated) {
            scfg.fixed_reference = load_reference(c);
        }

        rs::stream::DecoderSpec decoder{rs::stream::ModelDecoder{}};
        if (c.kind == "mdm") {
            const int window = meta.value("window_samples", 0);
            const int hop = meta.value("hop_samples", 0);
            if (window <= 0 || hop <= 0) {
                throw rs::ConfigError("MDM checkpoint lacks window geometry metadata");
            }
            scfg.task.window_length_s = window / online.spec.sampling_frequency_hz;
            scfg.task.update_frequency_hz = online.spec.sampling_frequency_hz / hop;
            decoder = rs::stream::MdmDecoder{load_mdm(c)};
        } else {
            rs::stream::ModelDecoder d{rs::checkpoint::unpack_model(c)};
            scfg.task = task_from_plan(d.state.config.rap_plan);
            decoder = std::move(d);
        }

        rs::stream::StreamSession session(scfg, std::move(decoder));
        const auto events = session.run(online);
        if (!stream_events_path.empty()) {
            rs::stream::write_events_jsonl(stream_events_path, events);
        }
        const std::string summary = rs::stream::summary_json(events, scfg.task, scfg.paced);
        if (!stream_summary_path.empty()) {
            std::ofstream(stream_summary_path) << summary << "\n";
        }
        std::cout << summary << "\n";
        if (stream_strict && scfg.paced && rs::stream::count_deadline_misses(events) > 0) {
            throw rs::DomainError("deadline missed in strict paced mode");
        }
    });

    // eval ------------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("eval", "Score event logs (TAcc, uTAcc, WAcc)");
    std::vector<std::string> eval_events;
    std::string eval_report_path, eval_csv_path, eval_method = "unnamed";
    std::string eval_eds_path;
    eval_cmd->add_option("--events", eval_events,
                         "Event logs, one per subject (id=path or path)")
        ->required();
    eval_cmd->add_option("--method", eval_method, "Method label for the report");
    eval_cmd->add_option("--report", eval_report_path, "Report JSON output");
    eval_cmd->add_option("--csv", eval_csv_path, "Report CSV output");
    eval_cmd->add_option("--eds", eval_eds_path,
                         "Merge per-channel scores from an eds report into the output");
    eval_cmd->callback([&] {
        std::vector<SubjectScore> scores;
        for (const std::string& spec : eval_events) {
            SubjectScore score;
            std::string path = spec;
            if (const auto eq = spec.find('='); eq != std::string::npos) {
                score.id = spec.substr(0, eq);
                path = spec.substr(eq + 1);
            } else {
                score.id = std::filesystem::path(spec).stem().string();
            }
            const auto events = rs::stream::read_events_jsonl(path);
            score.report = rs::eval::compute_metrics(rs::stream::group_into_trials(events));
            scores.push_back(std::move(score));
        }
        json out = report_json(eval_method, scores);
        if (!eval_eds_path.empty()) {
            std::ifstream in(eval_eds_path);
            if (!in) throw rs::ParseError("cannot open eds report", eval_eds_path, 0);
            json eds_report;
            in >> eds_report;
            out["eds"] = eds_report.value("eds", json::array());
        }
        if (!eval_report_path.empty()) std::ofstream(eval_report_path) << out.dump(2) << "\n";
        if (!eval_csv_path.empty()) write_report_csv(eval_csv_path, scores);
        std::cout << out.dump() << "\n";
    });

    // eds -------------------------------------------------------------------
    auto* eds_cmd = app.add_subcommand("eds", "Electrode discriminancy scores");
    std::string eds_ckpt, eds_manifest, eds_target, eds_report_path, eds_csv_path;
    EpochFlags eds_epochs;
    eds_cmd->add_option("--ckpt", eds_ckpt, "Model checkpoint")->required();
    eds_cmd->add_option("--manifest", eds_manifest, "Cohort manifest")->required();
    eds_cmd->add_option("--target", eds_target, "Subject to evaluate")->required();
    eds_cmd->add_option("--report", eds_report_path, "Report JSON output");
    eds_cmd->add_option("--csv", eds_csv_path, "Report CSV output");
    add_epoch_flags(eds_cmd, eds_epochs);
    eds_cmd->callback([&] {
        rs::data::LazyCohort cohort(
            eds_manifest, rs::data::EpochingParams{eds_epochs.offset, eds_epochs.length});
        const auto& online = cohort.group(eds_target, rs::data::Role::online);
        const auto state =
            rs::checkpoint::unpack_model(rs::checkpoint::read_container(eds_ckpt));
        json out;
        out["channels"] = online.spec.channel_names;
        out["eds"] = rs::eval::eds_all_channels(state, online.trials);
        out["eds_class0"] = rs::eval::eds_all_channels(state, online.trials, 0);
        out["eds_class1"] = rs::eval::eds_all_channels(state, online.trials, 1);
        if (!eds_report_path.empty()) std::ofstream(eds_report_path) << out.dump(2) << "\n";
        if (!eds_csv_path.empty()) {
            std::ofstream csv(eds_csv_path);
            csv << "channel,eds,eds_class0,eds_class1\n";
            for (std::size_t i = 0; i < online.spec.channel_names.size(); ++i) {
                csv << online.spec.channel_names[i] << "," << out["eds"][i].get<double>()
                    << "," << out["eds_class0"][i].get<double>() << ","
                    << out["eds_class1"][i].get<double>() << "\n";
            }
        }
        std::cout << out.dump() << "\n";
    });

    // ttest -----------------------------------------------------------------
    auto* ttest_cmd = app.add_subcommand("ttest", "One-sided paired t-test a > b");
    std::string ttest_a, ttest_b, ttest_metric = "tacc";
    ttest_cmd->add_option("--a", ttest_a, "First metric file (JSON array or eval report)")
        ->required();
    ttest_cmd->add_option("--b", ttest_b, "Second metric file")->required();
    ttest_cmd->add_option("--metric", ttest_metric, "Metric key inside eval reports");
    ttest_cmd->callback([&] {
        const auto a = metric_series_from_file(ttest_a, ttest_metric);
        const auto b = metric_series_from_file(ttest_b, ttest_metric);
        const auto r = rs::eval::paired_ttest_onesided(a, b);
        std::cout << json{{"t", r.t}, {"p", r.p}, {"n", r.n}}.dump() << "\n";
    });

    // bench-gain --------------------------------------------------------------
    auto* bench_cmd = app.add_subcommand(
        "bench-gain", "Measured joint-vs-individual training-step speedup");
    int bench_fs = 256, bench_channels = 27, bench_batch = 4, bench_reps = 3;
    std::vector<int> bench_down = {8};
    TaskFlags bench_task;
    ModelFlags bench_model;
    bench_task.trial_len = 4.75;
    bench_cmd->add_option("--fs", bench_fs, "Sampling frequency");
    bench_cmd->add_option("--channels", bench_channels, "Channel count");
    bench_cmd->add_option("--down", bench_down, "Downsampling kernels")->delimiter(',');
    add_task_flags(bench_cmd, bench_task, false);
    add_model_flags(bench_cmd, bench_model);
    bench_cmd->add_option("--batch", bench_batch, "Batch size");
    bench_cmd->add_option("--reps", bench_reps, "Measured repetitions");
    bench_cmd->callback([&] {
        using Clock = std::chrono::steady_clock;
        const auto task = bench_task.to_task();
        const auto plan = rs::rap::plan_rap(bench_fs, bench_down, task);
        const auto mcfg = bench_model.to_config(bench_channels, plan);
        rs::model::ModelState state = rs::model::init_model<float>(mcfg, 1);

        const auto trial_samples =
            static_cast<std::int64_t>(std::llround(*task.trial_length_s * bench_fs));
        const auto window_samples =
            static_cast<std::int64_t>(std::llround(task.window_length_s * bench_fs));
        const int n_w = rs::rap::windows_per_trial(task);
        const auto hop = static_cast<std::int64_t>(
            std::llround(bench_fs / task.update_frequency_hz));

        std::mt19937_64 rng(7);
        std::normal_distribution<double> normal(0.0, 1.0);
        std::vector<rs::linalg::Matrix> trials;
        for (int b = 0; b < bench_batch; ++b) {
            rs::linalg::Matrix t(bench_channels, trial_samples);
            for (Eigen::Index r = 0; r < t.rows(); ++r) {
                for (Eigen::Index s = 0; s < t.cols(); ++s) t(r, s) = normal(rng);
            }
            trials.push_back(std::move(t));
        }
        const std::vector<int> labels(static_cast<std::size_t>(bench_batch), 0);

        const auto step_time = [&](const std::vector<rs::linalg::Matrix>& batch) {
            const auto t0 = Clock::now();
            auto [preds, cache] = rs::model::forward_train(state, batch);
            std::vector<std::vector<double>> upstream;
            rs::train::joint_cross_entropy(
                preds, std::vector<int>(batch.size(), 0), upstream);
            rs::model::backward(state, *cache, upstream);
            return std::chrono::duration<double>(Clock::now() - t0).count();
        };

        double joint_s = 0.0, windowed_s = 0.0;
        step_time(trials);  // warmup
        for (int rep = 0; rep < bench_reps; ++rep) joint_s += step_time(trials);
        std::vector<rs::linalg::Matrix> windows;
        for (const auto& t : trials) {
            for (int j = 0; j < n_w; ++j) {
                windows.push_back(t.middleCols(hop * j, window_samples));
            }
        }
        for (int rep = 0; rep < bench_reps; ++rep) {
            // Per-window training decodes every window separately.
            const auto t0 = Clock::now();
            for (int j = 0; j < n_w; ++j) {
                std::vector<rs::linalg::Matrix> batch;
                for (int b = 0; b < bench_batch; ++b) {
                    batch.push_back(windows[static_cast<std::size_t>(b) * n_w + j]);
                }
                auto [preds, cache] = rs::model::forward_train(state, batch);
                std::vector<std::vector<double>> upstream;
                rs::train::joint_cross_entropy(preds, labels, upstream);
                rs::model::backward(state, *cache, upstream);
            }
            windowed_s += std::chrono::duration<double>(Clock::now() - t0).count();
        }
        const double theoretical = rs::rap::computational_gain(task);
        const double measured = windowed_s / joint_s;
        std::cout << json{{"theoretical_gain", theoretical},
                          {"measured_speedup", measured},
                          {"joint_step_s", joint_s / bench_reps},
                          {"windowed_step_s", windowed_s / bench_reps}}
                         .dump()
                  << "\n";
    });

    // global flags ------------------------------------------------------------
    app.add_flag("--json", json_out, "Machine-readable JSON on stdout");
    app.add_option("--jobs", jobs, "Parallelism across independent units (subjects, seeds)")
        ->check(CLI::PositiveNumber);

    // Flags win over --config-injected tokens; repeated scalar options keep
    // the last value. Container options (--events, --down, ...) still gather
    // every occurrence.
    for (CLI::App* sub : app.get_subcommands([](CLI::App*) { return true; })) {
        sub->fallthrough();  // global flags may follow the subcommand
        for (CLI::Option* opt : sub->get_options()) {
            if (opt->get_expected_max() == 1) {
                opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
            }
        }
    }

    try {
        const std::vector<std::string> args = rebuild_args(argc, argv);
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const rs::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
    return exit_code;
}
