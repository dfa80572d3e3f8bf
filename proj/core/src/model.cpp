#include "rapstream/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

namespace rapstream::model {

namespace {

using tensor::parallel_for;

template <typename S>
S elu(S v) {
    return v > S{0} ? v : static_cast<S>(std::expm1(static_cast<double>(v)));
}

template <typename S>
S elu_grad(S v) {  // derivative w.r.t. the pre-activation value v
    return v > S{0} ? S{1} : static_cast<S>(std::exp(static_cast<double>(v)));
}

constexpr double kBnEps = 1e-5;

// Static geometry of one configured network. All sequence lengths flow from
// here; the window-extraction pool uses the margin-reduced kernel k_eff so
// that each output row depends only on samples inside its own window (this
// is what keeps jointly and individually decoded windows identical).
struct Geometry {
    int channels = 0;
    int f1 = 0, depth = 0, groups = 0, f2 = 0, classes = 0;
    int kt = 0, k2 = 0;
    PaddingMode pad = PaddingMode::valid;
    int q = 1;       // downsampling fold (product of the first P-1 kernels)
    int sp = 1;      // final pooling stride
    int window = 0;  // window length in raw samples (k_P * q)
    int keff = 0;    // effective final pooling kernel (frames)
    int off = 0;     // first pooled frame of window 0
    int pl1 = 0, pr1 = 0;  // temporal conv padding (same mode)
    int pl2 = 0, pr2 = 0;  // separable conv padding (same mode)

    std::int64_t conv1_len(std::int64_t t) const {
        return pad == PaddingMode::valid ? t - kt + 1 : t;
    }
    std::int64_t pooled_len(std::int64_t t1) const { return q == 1 ? t1 : t1 / q; }
    std::int64_t sep_len(std::int64_t m) const {
        return pad == PaddingMode::valid ? m - k2 + 1 : m;
    }
    std::int64_t hop() const { return static_cast<std::int64_t>(q) * sp; }

    std::int64_t positions(std::int64_t t) const {
        if (t < window || (t - window) % hop() != 0) {
            throw ShapeError("input length " + std::to_string(t) +
                             " must be window (" + std::to_string(window) +
                             ") plus a multiple of the hop (" + std::to_string(hop()) +
                             ") samples");
        }
        return (t - window) / hop() + 1;
    }
};

Geometry make_geometry(const ModelConfig& cfg) {
    Geometry g;
    g.channels = cfg.channel_count;
    g.f1 = cfg.temporal_filters;
    g.depth = cfg.depth_multiplier;
    g.groups = g.f1 * g.depth;
    g.f2 = cfg.second_block_filters;
    g.classes = cfg.class_count;
    g.kt = cfg.temporal_kernel;
    g.k2 = cfg.second_kernel;
    g.pad = cfg.padding_mode;
    g.q = cfg.rap_plan.downsampling_factor();
    g.sp = cfg.rap_plan.final_stride();
    g.window = cfg.rap_plan.final_kernel() * g.q;

    if (g.pad == PaddingMode::valid) {
        const std::int64_t frames_in_window = (g.window - g.kt + 1) / g.q;
        g.keff = static_cast<int>(frames_in_window) - g.k2 + 1;
        g.off = 0;
    } else {
        g.pl1 = (g.kt - 1) / 2;
        g.pr1 = g.kt - 1 - g.pl1;
        g.pl2 = (g.k2 - 1) / 2;
        g.pr2 = g.k2 - 1 - g.pl2;
        // Frames of a single window whose receptive field stays inside it.
        const int m_lo = (g.pl1 + g.q - 1) / g.q;
        const int m_hi = static_cast<int>((g.window - g.q - g.pr1) / g.q);
        const int clean = m_hi - m_lo + 1;
        g.keff = clean - g.k2 + 1;
        g.off = m_lo + g.pl2;
    }
    if (g.window < g.kt || g.keff < 1) {
        throw IncompatibleTaskError(
            "window of " + std::to_string(g.window) +
            " samples is too short for temporal kernel " + std::to_string(g.kt) +
            " with downsampling x" + std::to_string(g.q) + " and second kernel " +
            std::to_string(g.k2));
    }
    return g;
}

template <typename S>
struct ParamView {
    S* conv1_w;
    S* conv1_b;
    S* bn1_g;
    S* bn1_b;
    S* spat_w;
    S* spat_b;
    S* bn2_g;
    S* bn2_b;
    S* sep_w;
    S* point_w;
    S* point_b;
    S* bn3_g;
    S* bn3_b;
    S* read_w;
    S* read_b;
};

template <typename S, typename State>
ParamView<S> view_params(State& state) {
    ParamView<S> v;
    v.conv1_w = state.param("conv_temporal.weight").v.data();
    v.conv1_b = state.param("conv_temporal.bias").v.data();
    v.bn1_g = state.param("bn1.gamma").v.data();
    v.bn1_b = state.param("bn1.beta").v.data();
    v.spat_w = state.param("conv_spatial.weight").v.data();
    v.spat_b = state.param("conv_spatial.bias").v.data();
    v.bn2_g = state.param("bn2.gamma").v.data();
    v.bn2_b = state.param("bn2.beta").v.data();
    v.sep_w = state.param("conv_separable.weight").v.data();
    v.point_w = state.param("conv_pointwise.weight").v.data();
    v.point_b = state.param("conv_pointwise.bias").v.data();
    v.bn3_g = state.param("bn3.gamma").v.data();
    v.bn3_b = state.param("bn3.beta").v.data();
    v.read_w = state.param("readout.weight").v.data();
    v.read_b = state.param("readout.bias").v.data();
    return v;
}

template <typename S>
struct BnBatchStats {
    std::vector<double> mean, var;  // biased variance, as used for normalization
};

}  // namespace

// Everything backward needs to replay the forward pass.
template <typename S>
struct ForwardCache {
    Geometry geo;
    std::uint64_t version = 0;
    int batch = 0;
    std::int64_t t = 0, t1 = 0, m = 0, l = 0, pos = 0;
    std::vector<S> x0;    // (N, C, T)
    std::vector<S> a1;    // (N, F1, C, T1) pre-bn1
    std::vector<S> a2;    // (N, G, T1)     pre-bn2
    std::vector<S> d1;    // (N, G, M)      post-dropout1
    std::vector<S> a3;    // (N, G, L)      separable depthwise out
    std::vector<S> a4;    // (N, F2, L)     pre-bn3
    std::vector<S> d2;    // (N, F2, P)     post-dropout2
    std::vector<S> probs; // (N, K, P)
    std::vector<std::uint8_t> mask1, mask2;
    BnBatchStats<S> bn1, bn2, bn3;
};

namespace {

template <typename S>
void check_activation_config(const ModelConfig& cfg) {
    if (cfg.activation != "elu") {
        throw ConfigError("unsupported activation '" + cfg.activation + "'");
    }
    if (cfg.pooling != "mean") {
        throw ConfigError("unsupported pooling '" + cfg.pooling + "'");
    }
    (void)sizeof(S);
}

// ---- layer kernels --------------------------------------------------------

// Temporal convolution: (N,C,T) -> (N,F1,C,T1), kernel shared across rows.
template <typename S>
void conv_temporal_fwd(const Geometry& g, int batch, std::int64_t t, std::int64_t t1,
                       const std::vector<S>& x0, const S* w, const S* b,
                       std::vector<S>& out) {
    out.assign(static_cast<std::size_t>(batch) * g.f1 * g.channels * t1, S{0});
    parallel_for(static_cast<std::int64_t>(batch) * g.f1, [&](std::int64_t nf) {
        const int n = static_cast<int>(nf / g.f1);
        const int f = static_cast<int>(nf % g.f1);
        const S* wf = w + static_cast<std::size_t>(f) * g.kt;
        for (int c = 0; c < g.channels; ++c) {
            const S* xr = x0.data() + (static_cast<std::size_t>(n) * g.channels + c) * t;
            S* yr = out.data() +
                    ((static_cast<std::size_t>(n) * g.f1 + f) * g.channels + c) * t1;
            if (g.pad == PaddingMode::valid) {
                for (std::int64_t i = 0; i < t1; ++i) {
                    S acc = b[f];
                    const S* xi = xr + i;
                    for (int k = 0; k < g.kt; ++k) acc += wf[k] * xi[k];
                    yr[i] = acc;
                }
            } else {
                for (std::int64_t i = 0; i < t1; ++i) {
                    S acc = b[f];
                    const std::int64_t base = i - g.pl1;
                    const int k_lo = static_cast<int>(std::max<std::int64_t>(0, -base));
                    const int k_hi = static_cast<int>(
                        std::min<std::int64_t>(g.kt, t - base));
                    for (int k = k_lo; k < k_hi; ++k) acc += wf[k] * xr[base + k];
                    yr[i] = acc;
                }
            }
        }
    });
}

template <typename S>
void conv_temporal_bwd(const Geometry& g, int batch, std::int64_t t, std::int64_t t1,
                       const std::vector<S>& x0, const std::vector<S>& dy, S* dw, S* db) {
    parallel_for(g.f1, [&](std::int64_t f) {
        S* dwf = dw + static_cast<std::size_t>(f) * g.kt;
        S dbf{0};
        for (int n = 0; n < batch; ++n) {
            for (int c = 0; c < g.channels; ++c) {
                const S* xr = x0.data() + (static_cast<std::size_t>(n) * g.channels + c) * t;
                const S* dyr = dy.data() +
                               ((static_cast<std::size_t>(n) * g.f1 + f) * g.channels + c) * t1;
                for (std::int64_t i = 0; i < t1; ++i) dbf += dyr[i];
                const std::int64_t shift = g.pad == PaddingMode::valid ? 0 : -g.pl1;
                for (int k = 0; k < g.kt; ++k) {
                    const std::int64_t base = shift + k;
                    const std::int64_t i_lo = std::max<std::int64_t>(0, -base);
                    const std::int64_t i_hi = std::min<std::int64_t>(t1, t - base);
                    S acc{0};
                    for (std::int64_t i = i_lo; i < i_hi; ++i) acc += dyr[i] * xr[i + base];
                    dwf[k] += acc;
                }
            }
        }
        db[f] += dbf;
    });
}

// Depthwise spatial collapse: (N,F1,C,T1) -> (N,F1*D,T1).
template <typename S>
void conv_spatial_fwd(const Geometry& g, int batch, std::int64_t t1,
                      const std::vector<S>& y1, const S* w, const S* b,
                      std::vector<S>& out) {
    out.assign(static_cast<std::size_t>(batch) * g.groups * t1, S{0});
    parallel_for(static_cast<std::int64_t>(batch) * g.groups, [&](std::int64_t ng) {
        const int n = static_cast<int>(ng / g.groups);
        const int gi = static_cast<int>(ng % g.groups);
        const int f = gi / g.depth;
        const int d = gi % g.depth;
        const S* wv = w + (static_cast<std::size_t>(f) * g.depth + d) * g.channels;
        S* yr = out.data() + (static_cast<std::size_t>(n) * g.groups + gi) * t1;
        for (std::int64_t i = 0; i < t1; ++i) yr[i] = b[gi];
        for (int c = 0; c < g.channels; ++c) {
            const S* xr = y1.data() +
                          ((static_cast<std::size_t>(n) * g.f1 + f) * g.channels + c) * t1;
            const S wc = wv[c];
            for (std::int64_t i = 0; i < t1; ++i) yr[i] += wc * xr[i];
        }
    });
}

// Separable depthwise temporal conv: (N,G,M) -> (N,G,L), no bias.
template <typename S>
void conv_sep_fwd(const Geometry& g, int batch, std::int64_t m, std::int64_t l,
                  const std::vector<S>& in, const S* w, std::vector<S>& out) {
    out.assign(static_cast<std::size_t>(batch) * g.groups * l, S{0});
    parallel_for(static_cast<std::int64_t>(batch) * g.groups, [&](std::int64_t ng) {
        const int n = static_cast<int>(ng / g.groups);
        const int gi = static_cast<int>(ng % g.groups);
        const S* wg = w + static_cast<std::size_t>(gi) * g.k2;
        const S* xr = in.data() + (static_cast<std::size_t>(n) * g.groups + gi) * m;
        S* yr = out.data() + (static_cast<std::size_t>(n) * g.groups + gi) * l;
        const std::int64_t shift = g.pad == PaddingMode::valid ? 0 : -g.pl2;
        for (std::int64_t i = 0; i < l; ++i) {
            S acc{0};
            const std::int64_t base = i + shift;
            const int k_lo = static_cast<int>(std::max<std::int64_t>(0, -base));
            const int k_hi = static_cast<int>(std::min<std::int64_t>(g.k2, m - base));
            for (int k = k_lo; k < k_hi; ++k) acc += wg[k] * xr[base + k];
            yr[i] = acc;
        }
    });
}

// Pointwise mix: (N,G,L) -> (N,F2,L).
template <typename S>
void conv_point_fwd(const Geometry& g, int batch, std::int64_t l, const std::vector<S>& in,
                    const S* w, const S* b, std::vector<S>& out) {
    out.assign(static_cast<std::size_t>(batch) * g.f2 * l, S{0});
    parallel_for(static_cast<std::int64_t>(batch) * g.f2, [&](std::int64_t no) {
        const int n = static_cast<int>(no / g.f2);
        const int o = static_cast<int>(no % g.f2);
        const S* wo = w + static_cast<std::size_t>(o) * g.groups;
        S* yr = out.data() + (static_cast<std::size_t>(n) * g.f2 + o) * l;
        for (std::int64_t i = 0; i < l; ++i) yr[i] = b[o];
        for (int gi = 0; gi < g.groups; ++gi) {
            const S* xr = in.data() + (static_cast<std::size_t>(n) * g.groups + gi) * l;
            const S wv = wo[gi];
            for (std::int64_t i = 0; i < l; ++i) yr[i] += wv * xr[i];
        }
    });
}

// ---- batch normalization --------------------------------------------------

// Stats over all axes but the feature axis. `spatial` is the per-sample,
// per-feature extent; feature stride is `spatial`, sample stride
// features*spatial.
template <typename S>
BnBatchStats<S> bn_batch_stats(const std::vector<S>& x, int batch, int features,
                               std::int64_t spatial) {
    BnBatchStats<S> st;
    st.mean.assign(static_cast<std::size_t>(features), 0.0);
    st.var.assign(static_cast<std::size_t>(features), 0.0);
    const double count = static_cast<double>(batch) * static_cast<double>(spatial);
    for (int f = 0; f < features; ++f) {
        double sum = 0.0, sumsq = 0.0;
        for (int n = 0; n < batch; ++n) {
            const S* row = x.data() +
                           (static_cast<std::size_t>(n) * features + f) * spatial;
            for (std::int64_t i = 0; i < spatial; ++i) {
                const double v = static_cast<double>(row[i]);
                sum += v;
                sumsq += v * v;
            }
        }
        const double mean = sum / count;
        st.mean[static_cast<std::size_t>(f)] = mean;
        st.var[static_cast<std::size_t>(f)] = std::max(0.0, sumsq / count - mean * mean);
    }
    return st;
}

template <typename S>
void bn_apply(const std::vector<S>& x, std::vector<S>& y, int batch, int features,
              std::int64_t spatial, const double* mean, const double* var, const S* gamma,
              const S* beta) {
    y.resize(x.size());
    parallel_for(static_cast<std::int64_t>(batch) * features, [&](std::int64_t nf) {
        const int f = static_cast<int>(nf % features);
        const std::size_t base = static_cast<std::size_t>(nf) * spatial;
        const S scale = static_cast<S>(static_cast<double>(gamma[f]) /
                                       std::sqrt(var[f] + kBnEps));
        const S shiftv = static_cast<S>(static_cast<double>(beta[f]) -
                                        mean[f] * static_cast<double>(scale));
        for (std::int64_t i = 0; i < spatial; ++i) {
            y[base + i] = scale * x[base + i] + shiftv;
        }
    });
}

// Backward through train-mode BN (batch statistics). Returns dx in place of dy.
template <typename S>
void bn_bwd(const std::vector<S>& x, std::vector<S>& dy, int batch, int features,
            std::int64_t spatial, const BnBatchStats<S>& st, const S* gamma, S* dgamma,
            S* dbeta) {
    const double count = static_cast<double>(batch) * static_cast<double>(spatial);
    for (int f = 0; f < features; ++f) {
        const double mean = st.mean[static_cast<std::size_t>(f)];
        const double inv_std = 1.0 / std::sqrt(st.var[static_cast<std::size_t>(f)] + kBnEps);
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int n = 0; n < batch; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * features + f) * spatial;
            for (std::int64_t i = 0; i < spatial; ++i) {
                const double d = static_cast<double>(dy[base + i]);
                const double xh = (static_cast<double>(x[base + i]) - mean) * inv_std;
                sum_dy += d;
                sum_dy_xhat += d * xh;
            }
        }
        dgamma[f] += static_cast<S>(sum_dy_xhat);
        dbeta[f] += static_cast<S>(sum_dy);
        const double gf = static_cast<double>(gamma[f]);
        for (int n = 0; n < batch; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * features + f) * spatial;
            for (std::int64_t i = 0; i < spatial; ++i) {
                const double d = static_cast<double>(dy[base + i]);
                const double xh = (static_cast<double>(x[base + i]) - mean) * inv_std;
                const double dx =
                    gf * inv_std * (d - sum_dy / count - xh * sum_dy_xhat / count);
                dy[base + i] = static_cast<S>(dx);
            }
        }
    }
}

}  // namespace

// ---- public API -----------------------------------------------------------

std::string to_string(PaddingMode mode) {
    return mode == PaddingMode::valid ? "valid" : "same";
}

PaddingMode padding_mode_from_string(const std::string& s) {
    if (s == "valid") return PaddingMode::valid;
    if (s == "same") return PaddingMode::same;
    throw ConfigError("unknown padding mode '" + s + "' (expected valid|same)");
}

void ModelConfig::validate() const {
    if (channel_count < 1 || temporal_filters < 1 || temporal_kernel < 1 ||
        depth_multiplier < 1 || second_block_filters < 1 || second_kernel < 1) {
        throw ConfigError("model layer sizes must be positive");
    }
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
        throw ConfigError("dropout rate must lie in [0, 1)");
    }
    if (class_count < 2) throw ConfigError("class count must be >= 2");
    if (rap_plan.pooling_layer_count < 1 ||
        rap_plan.kernel_sizes.size() != static_cast<std::size_t>(rap_plan.pooling_layer_count)) {
        throw ConfigError("model config carries an invalid rap plan");
    }
    check_activation_config<float>(*this);
    make_geometry(*this);  // throws IncompatibleTaskError on bad window geometry
}

template <typename S>
Tensor<S>& BasicModelState<S>::param(const std::string& name) {
    for (auto& nt : params) {
        if (nt.name == name) return nt.t;
    }
    throw ConfigError("unknown parameter '" + name + "'");
}

template <typename S>
const Tensor<S>& BasicModelState<S>::param(const std::string& name) const {
    return const_cast<BasicModelState<S>*>(this)->param(name);
}

template <typename S>
Tensor<S>& BasicModelState<S>::buffer(const std::string& name) {
    for (auto& nt : buffers) {
        if (nt.name == name) return nt.t;
    }
    throw ConfigError("unknown buffer '" + name + "'");
}

template <typename S>
const Tensor<S>& BasicModelState<S>::buffer(const std::string& name) const {
    return const_cast<BasicModelState<S>*>(this)->buffer(name);
}

std::vector<std::string> bn_layer_names() { return {"bn1", "bn2", "bn3"}; }

int bn_feature_count(const ModelConfig& cfg, int bn_layer) {
    switch (bn_layer) {
        case 0: return cfg.temporal_filters;
        case 1: return cfg.temporal_filters * cfg.depth_multiplier;
        case 2: return cfg.second_block_filters;
        default: throw IndexError("bn layer index out of range");
    }
}

template <typename S>
BasicModelState<S> init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    BasicModelState<S> state;
    state.config = cfg;
    state.rng_seed = seed;

    const int f1 = cfg.temporal_filters;
    const int groups = f1 * cfg.depth_multiplier;
    const int f2 = cfg.second_block_filters;

    const auto add_param = [&](const std::string& name, std::vector<std::int64_t> shape,
                               double fan_in) {
        NamedTensor<S> nt;
        nt.name = name;
        nt.t.resize(std::move(shape));
        if (fan_in > 0.0) {
            const double bound = 1.0 / std::sqrt(fan_in);
            std::uint64_t stream =
                tensor::derive_stream(seed, 0x100 + state.params.size());
            for (S& v : nt.t.v) {
                const double u =
                    static_cast<double>(tensor::splitmix64(stream) >> 11) * 0x1.0p-53;
                v = static_cast<S>((2.0 * u - 1.0) * bound);
            }
        } else if (fan_in < 0.0) {
            std::fill(nt.t.v.begin(), nt.t.v.end(), S{1});  // BN gamma
        }
        state.params.push_back(std::move(nt));
    };

    add_param("conv_temporal.weight", {f1, cfg.temporal_kernel}, cfg.temporal_kernel);
    add_param("conv_temporal.bias", {f1}, 0.0);
    add_param("bn1.gamma", {f1}, -1.0);
    add_param("bn1.beta", {f1}, 0.0);
    add_param("conv_spatial.weight", {f1, cfg.depth_multiplier, cfg.channel_count},
              cfg.channel_count);
    add_param("conv_spatial.bias", {groups}, 0.0);
    add_param("bn2.gamma", {groups}, -1.0);
    add_param("bn2.beta", {groups}, 0.0);
    add_param("conv_separable.weight", {groups, cfg.second_kernel}, cfg.second_kernel);
    add_param("conv_pointwise.weight", {f2, groups}, groups);
    add_param("conv_pointwise.bias", {f2}, 0.0);
    add_param("bn3.gamma", {f2}, -1.0);
    add_param("bn3.beta", {f2}, 0.0);
    add_param("readout.weight", {cfg.class_count, f2}, f2);
    add_param("readout.bias", {cfg.class_count}, 0.0);

    const auto add_buffer = [&](const std::string& name, int n, S fill) {
        NamedTensor<S> nt;
        nt.name = name;
        nt.t.resize({n});
        std::fill(nt.t.v.begin(), nt.t.v.end(), fill);
        state.buffers.push_back(std::move(nt));
    };
    add_buffer("bn1.running_mean", f1, S{0});
    add_buffer("bn1.running_var", f1, S{1});
    add_buffer("bn2.running_mean", groups, S{0});
    add_buffer("bn2.running_var", groups, S{1});
    add_buffer("bn3.running_mean", f2, S{0});
    add_buffer("bn3.running_var", f2, S{1});
    return state;
}

ModelStateD to_double(const ModelState& state) {
    ModelStateD out;
    out.config = state.config;
    out.rng_seed = state.rng_seed;
    out.rng_counter = state.rng_counter;
    out.version = state.version;
    const auto widen = [](const std::vector<NamedTensor<float>>& src,
                          std::vector<NamedTensor<double>>& dst) {
        for (const auto& nt : src) {
            NamedTensor<double> d;
            d.name = nt.name;
            d.t.shape = nt.t.shape;
            d.t.v.assign(nt.t.v.begin(), nt.t.v.end());
            dst.push_back(std::move(d));
        }
    };
    widen(state.params, out.params);
    widen(state.buffers, out.buffers);
    return out;
}

int output_positions(const ModelConfig& cfg, std::int64_t input_samples) {
    return static_cast<int>(make_geometry(cfg).positions(input_samples));
}

namespace {

enum class BnSource { running, batch, adapt };

template <typename S>
struct RunContext {
    const Geometry geo;
    int batch;
    std::int64_t t, t1, m, l, pos;
};

template <typename S>
std::vector<S> pack_input(const ModelConfig& cfg, const std::vector<Matrix>& batch,
                          std::int64_t& t_out) {
    if (batch.empty()) throw ShapeError("empty input batch");
    const std::int64_t t = batch.front().cols();
    std::vector<S> x0(batch.size() * static_cast<std::size_t>(cfg.channel_count) *
                      static_cast<std::size_t>(t));
    for (std::size_t n = 0; n < batch.size(); ++n) {
        const Matrix& x = batch[n];
        if (x.rows() != cfg.channel_count) {
            throw ShapeError("input has " + std::to_string(x.rows()) +
                             " channels, model expects " + std::to_string(cfg.channel_count));
        }
        if (x.cols() != t) {
            throw ShapeError("all batch inputs must share one length");
        }
        for (int c = 0; c < cfg.channel_count; ++c) {
            S* row = x0.data() + (n * static_cast<std::size_t>(cfg.channel_count) +
                                  static_cast<std::size_t>(c)) *
                                     static_cast<std::size_t>(t);
            for (std::int64_t i = 0; i < t; ++i) row[i] = static_cast<S>(x(c, i));
        }
    }
    t_out = t;
    return x0;
}

// Mean pool kernel==stride==q over the last axis.
template <typename S>
void pool_fold(int batch, int maps, std::int64_t t1, int q, const std::vector<S>& in,
               std::vector<S>& out, std::int64_t m) {
    if (q == 1) {
        out = in;
        return;
    }
    out.assign(static_cast<std::size_t>(batch) * maps * m, S{0});
    const S inv = S{1} / static_cast<S>(q);
    parallel_for(static_cast<std::int64_t>(batch) * maps, [&](std::int64_t nm) {
        const S* xr = in.data() + static_cast<std::size_t>(nm) * t1;
        S* yr = out.data() + static_cast<std::size_t>(nm) * m;
        for (std::int64_t i = 0; i < m; ++i) {
            S acc{0};
            const S* xi = xr + i * q;
            for (int k = 0; k < q; ++k) acc += xi[k];
            yr[i] = acc * inv;
        }
    });
}

// Window-extraction pool: kernel keff, stride sp, offset off.
template <typename S>
void pool_window(const Geometry& g, int batch, int maps, std::int64_t l,
                 const std::vector<S>& in, std::vector<S>& out, std::int64_t pos) {
    out.assign(static_cast<std::size_t>(batch) * maps * pos, S{0});
    const S inv = S{1} / static_cast<S>(g.keff);
    parallel_for(static_cast<std::int64_t>(batch) * maps, [&](std::int64_t nm) {
        const S* xr = in.data() + static_cast<std::size_t>(nm) * l;
        S* yr = out.data() + static_cast<std::size_t>(nm) * pos;
        for (std::int64_t j = 0; j < pos; ++j) {
            S acc{0};
            const S* xi = xr + g.off + j * g.sp;
            for (int k = 0; k < g.keff; ++k) acc += xi[k];
            yr[j] = acc * inv;
        }
    });
}

template <typename S>
void dropout_fwd(std::uint64_t seed, std::uint64_t counter_salt, double rate,
                 std::vector<S>& x, std::vector<std::uint8_t>& mask) {
    mask.assign(x.size(), 1);
    if (rate <= 0.0) return;
    std::uint64_t stream = tensor::derive_stream(seed, counter_salt);
    const S scale = S{1} / static_cast<S>(1.0 - rate);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double u = static_cast<double>(tensor::splitmix64(stream) >> 11) * 0x1.0p-53;
        if (u < rate) {
            mask[i] = 0;
            x[i] = S{0};
        } else {
            x[i] *= scale;
        }
    }
}

template <typename S>
std::vector<Prediction> emit_predictions(const Geometry& g, int batch, std::int64_t pos,
                                         const std::vector<S>& logits,
                                         std::vector<S>* probs_cache) {
    std::vector<Prediction> preds(static_cast<std::size_t>(batch));
    if (probs_cache) probs_cache->assign(logits.size(), S{0});
    for (int n = 0; n < batch; ++n) {
        Prediction& p = preds[static_cast<std::size_t>(n)];
        p.positions = static_cast<int>(pos);
        p.classes = g.classes;
        p.probs.assign(static_cast<std::size_t>(pos) * g.classes, 0.0);
        p.boundary.assign(static_cast<std::size_t>(pos), false);
        for (std::int64_t j = 0; j < pos; ++j) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int k = 0; k < g.classes; ++k) {
                mx = std::max(mx, static_cast<double>(
                                      logits[(static_cast<std::size_t>(n) * g.classes + k) * pos + j]));
            }
            double z = 0.0;
            for (int k = 0; k < g.classes; ++k) {
                z += std::exp(static_cast<double>(
                                  logits[(static_cast<std::size_t>(n) * g.classes + k) * pos + j]) -
                              mx);
            }
            for (int k = 0; k < g.classes; ++k) {
                const double pr =
                    std::exp(static_cast<double>(
                                 logits[(static_cast<std::size_t>(n) * g.classes + k) * pos + j]) -
                             mx) /
                    z;
                p.probs[static_cast<std::size_t>(j) * g.classes + k] = pr;
                if (probs_cache) {
                    (*probs_cache)[(static_cast<std::size_t>(n) * g.classes + k) * pos + j] =
                        static_cast<S>(pr);
                }
            }
        }
    }
    return preds;
}

// One full forward pass. `mode` selects BN statistics and dropout; when
// cache is non-null every backward dependency is recorded.
template <typename S, typename State>
std::vector<Prediction> run_forward(State& state, const std::vector<Matrix>& batch,
                                    Mode mode, ForwardCache<S>* cache,
                                    const BnAdaptHook<S>* hook) {
    const ModelConfig& cfg = state.config;
    const Geometry g = make_geometry(cfg);
    const int n = static_cast<int>(batch.size());

    std::int64_t t = 0;
    std::vector<S> x0 = pack_input<S>(cfg, batch, t);
    const std::int64_t pos = g.positions(t);  // validates the length up front
    const std::int64_t t1 = g.conv1_len(t);
    const std::int64_t m = g.pooled_len(t1);
    const std::int64_t l = g.sep_len(m);
    if (g.off + (pos - 1) * g.sp + g.keff > l) {
        throw NumericalError("internal geometry inconsistency: pooled frames exceed input");
    }

    auto& mstate = const_cast<BasicModelState<S>&>(static_cast<const BasicModelState<S>&>(state));
    ParamView<S> pv = view_params<S>(mstate);

    const bool train = mode == Mode::train;

    // BN statistics source per layer.
    const auto bn_forward = [&](int layer, const std::vector<S>& x, std::vector<S>& y,
                                int features, std::int64_t spatial, const S* gamma,
                                const S* beta, BnBatchStats<S>* stats_out) {
        const std::string name = bn_layer_names()[static_cast<std::size_t>(layer)];
        auto& rmean = mstate.buffer(name + ".running_mean").v;
        auto& rvar = mstate.buffer(name + ".running_var").v;
        if (train || hook) {
            BnBatchStats<S> st = bn_batch_stats(x, n, features, spatial);
            if (hook) {
                (*hook)(layer, st.mean, st.var, std::span<S>(rmean), std::span<S>(rvar));
                std::vector<double> mean(rmean.begin(), rmean.end());
                std::vector<double> var(rvar.begin(), rvar.end());
                bn_apply(x, y, n, features, spatial, mean.data(), var.data(), gamma, beta);
            } else {
                // Torch-style EMA: biased var normalizes, unbiased var persists.
                const double count = static_cast<double>(n) * static_cast<double>(spatial);
                const double unbias = count > 1.0 ? count / (count - 1.0) : 1.0;
                for (int f = 0; f < features; ++f) {
                    rmean[static_cast<std::size_t>(f)] = static_cast<S>(
                        (1.0 - cfg.bn_momentum) * static_cast<double>(rmean[static_cast<std::size_t>(f)]) +
                        cfg.bn_momentum * st.mean[static_cast<std::size_t>(f)]);
                    rvar[static_cast<std::size_t>(f)] = static_cast<S>(
                        (1.0 - cfg.bn_momentum) * static_cast<double>(rvar[static_cast<std::size_t>(f)]) +
                        cfg.bn_momentum * st.var[static_cast<std::size_t>(f)] * unbias);
                }
                bn_apply(x, y, n, features, spatial, st.mean.data(), st.var.data(), gamma,
                         beta);
            }
            if (stats_out) *stats_out = std::move(st);
        } else {
            std::vector<double> mean(rmean.begin(), rmean.end());
            std::vector<double> var(rvar.begin(), rvar.end());
            bn_apply(x, y, n, features, spatial, mean.data(), var.data(), gamma, beta);
        }
    };

    // Block 1.
    std::vector<S> a1;
    conv_temporal_fwd(g, n, t, t1, x0, pv.conv1_w, pv.conv1_b, a1);
    std::vector<S> y1;
    BnBatchStats<S> st1;
    bn_forward(0, a1, y1, g.f1, static_cast<std::int64_t>(g.channels) * t1, pv.bn1_g,
               pv.bn1_b, &st1);
    std::vector<S> a2;
    conv_spatial_fwd(g, n, t1, y1, pv.spat_w, pv.spat_b, a2);
    y1.clear();
    y1.shrink_to_fit();
    std::vector<S> y2;
    BnBatchStats<S> st2;
    bn_forward(1, a2, y2, g.groups, t1, pv.bn2_g, pv.bn2_b, &st2);
    parallel_for(static_cast<std::int64_t>(y2.size()), [&](std::int64_t i) {
        y2[static_cast<std::size_t>(i)] = elu(y2[static_cast<std::size_t>(i)]);
    });
    std::vector<S> p1;
    pool_fold(n, g.groups, t1, g.q, y2, p1, m);
    y2.clear();
    y2.shrink_to_fit();

    std::vector<std::uint8_t> mask1;
    if (train) {
        dropout_fwd(state.rng_seed, mstate.rng_counter++, cfg.dropout_rate, p1, mask1);
    }

    // Block 2.
    std::vector<S> a3;
    conv_sep_fwd(g, n, m, l, p1, pv.sep_w, a3);
    std::vector<S> a4;
    conv_point_fwd(g, n, l, a3, pv.point_w, pv.point_b, a4);
    std::vector<S> y3;
    BnBatchStats<S> st3;
    bn_forward(2, a4, y3, g.f2, l, pv.bn3_g, pv.bn3_b, &st3);
    parallel_for(static_cast<std::int64_t>(y3.size()), [&](std::int64_t i) {
        y3[static_cast<std::size_t>(i)] = elu(y3[static_cast<std::size_t>(i)]);
    });
    std::vector<S> p2;
    pool_window(g, n, g.f2, l, y3, p2, pos);
    y3.clear();
    y3.shrink_to_fit();

    std::vector<std::uint8_t> mask2;
    if (train) {
        dropout_fwd(state.rng_seed, mstate.rng_counter++, cfg.dropout_rate, p2, mask2);
    }

    // Per-position readout.
    std::vector<S> logits(static_cast<std::size_t>(n) * g.classes * pos, S{0});
    parallel_for(static_cast<std::int64_t>(n) * g.classes, [&](std::int64_t nk) {
        const int ni = static_cast<int>(nk / g.classes);
        const int k = static_cast<int>(nk % g.classes);
        S* yr = logits.data() + (static_cast<std::size_t>(ni) * g.classes + k) * pos;
        for (std::int64_t j = 0; j < pos; ++j) yr[j] = pv.read_b[k];
        for (int f = 0; f < g.f2; ++f) {
            const S w = pv.read_w[static_cast<std::size_t>(k) * g.f2 + f];
            const S* xr = p2.data() + (static_cast<std::size_t>(ni) * g.f2 + f) * pos;
            for (std::int64_t j = 0; j < pos; ++j) yr[j] += w * xr[j];
        }
    });

    std::vector<Prediction> preds =
        emit_predictions(g, n, pos, logits, cache ? &cache->probs : nullptr);

    if (cache) {
        cache->geo = g;
        cache->version = state.version;
        cache->batch = n;
        cache->t = t;
        cache->t1 = t1;
        cache->m = m;
        cache->l = l;
        cache->pos = pos;
        cache->x0 = std::move(x0);
        cache->a1 = std::move(a1);
        cache->a2 = std::move(a2);
        cache->d1 = std::move(p1);
        cache->a3 = std::move(a3);
        cache->a4 = std::move(a4);
        cache->d2 = std::move(p2);
        cache->mask1 = std::move(mask1);
        cache->mask2 = std::move(mask2);
        cache->bn1 = std::move(st1);
        cache->bn2 = std::move(st2);
        cache->bn3 = std::move(st3);
    }
    return preds;
}

}  // namespace

template <typename S>
Prediction forward(const BasicModelState<S>& state, const Matrix& x) {
    std::vector<Matrix> batch{x};
    return run_forward<S>(state, batch, Mode::infer, static_cast<ForwardCache<S>*>(nullptr),
                          nullptr)
        .front();
}

template <typename S>
std::vector<Prediction> forward_batch(const BasicModelState<S>& state,
                                      const std::vector<Matrix>& batch) {
    return run_forward<S>(state, batch, Mode::infer, static_cast<ForwardCache<S>*>(nullptr),
                          nullptr);
}

template <typename S>
std::pair<std::vector<Prediction>, CachePtr<S>> forward_train(
    BasicModelState<S>& state, const std::vector<Matrix>& batch) {
    auto cache = std::make_shared<ForwardCache<S>>();
    auto preds = run_forward<S>(state, batch, Mode::train, cache.get(), nullptr);
    return {std::move(preds), std::move(cache)};
}

template <typename S>
std::vector<Prediction> forward_batch_adapt(BasicModelState<S>& state,
                                            const std::vector<Matrix>& batch,
                                            const BnAdaptHook<S>& hook) {
    return run_forward<S>(state, batch, Mode::infer, static_cast<ForwardCache<S>*>(nullptr),
                          &hook);
}

template <typename S>
Gradients<S> backward(const BasicModelState<S>& state, ForwardCache<S>& cache,
                      const std::vector<std::vector<double>>& upstream) {
    if (cache.version != state.version) {
        throw InvalidStateError("forward cache is stale: model parameters changed");
    }
    const Geometry& g = cache.geo;
    const int n = cache.batch;
    const std::int64_t t = cache.t, t1 = cache.t1, m = cache.m, l = cache.l,
                       pos = cache.pos;
    if (static_cast<int>(upstream.size()) != n) {
        throw ShapeError("upstream gradient batch size mismatch");
    }
    for (const auto& u : upstream) {
        if (u.size() != static_cast<std::size_t>(pos) * g.classes) {
            throw ShapeError("upstream gradient must be positions*classes per sample");
        }
    }

    Gradients<S> grads;
    for (const auto& p : state.params) {
        NamedTensor<S> zero;
        zero.name = p.name;
        zero.t.resize(p.t.shape);
        grads.tensors.push_back(std::move(zero));
    }
    const auto gptr = [&](const std::string& name) -> S* {
        for (auto& nt : grads.tensors) {
            if (nt.name == name) return nt.t.v.data();
        }
        throw ConfigError("missing gradient tensor " + name);
    };
    ParamView<S> pv = view_params<S>(const_cast<BasicModelState<S>&>(state));
    ParamView<S> gv;
    gv.conv1_w = gptr("conv_temporal.weight");
    gv.conv1_b = gptr("conv_temporal.bias");
    gv.bn1_g = gptr("bn1.gamma");
    gv.bn1_b = gptr("bn1.beta");
    gv.spat_w = gptr("conv_spatial.weight");
    gv.spat_b = gptr("conv_spatial.bias");
    gv.bn2_g = gptr("bn2.gamma");
    gv.bn2_b = gptr("bn2.beta");
    gv.sep_w = gptr("conv_separable.weight");
    gv.point_w = gptr("conv_pointwise.weight");
    gv.point_b = gptr("conv_pointwise.bias");
    gv.bn3_g = gptr("bn3.gamma");
    gv.bn3_b = gptr("bn3.beta");
    gv.read_w = gptr("readout.weight");
    gv.read_b = gptr("readout.bias");

    // Softmax backward: dlogit_k = p_k * (du_k - sum_j du_j p_j).
    std::vector<S> dlogits(static_cast<std::size_t>(n) * g.classes * pos, S{0});
    for (int ni = 0; ni < n; ++ni) {
        const auto& u = upstream[static_cast<std::size_t>(ni)];
        for (std::int64_t j = 0; j < pos; ++j) {
            double dot = 0.0;
            for (int k = 0; k < g.classes; ++k) {
                const double pk = static_cast<double>(
                    cache.probs[(static_cast<std::size_t>(ni) * g.classes + k) * pos + j]);
                dot += u[static_cast<std::size_t>(j) * g.classes + k] * pk;
            }
            for (int k = 0; k < g.classes; ++k) {
                const double pk = static_cast<double>(
                    cache.probs[(static_cast<std::size_t>(ni) * g.classes + k) * pos + j]);
                dlogits[(static_cast<std::size_t>(ni) * g.classes + k) * pos + j] =
                    static_cast<S>(pk * (u[static_cast<std::size_t>(j) * g.classes + k] - dot));
            }
        }
    }

    // Readout backward.
    std::vector<S> dd2(cache.d2.size(), S{0});
    for (int k = 0; k < g.classes; ++k) {
        S db{0};
        for (int ni = 0; ni < n; ++ni) {
            const S* dl = dlogits.data() + (static_cast<std::size_t>(ni) * g.classes + k) * pos;
            for (std::int64_t j = 0; j < pos; ++j) db += dl[j];
        }
        gv.read_b[k] += db;
    }
    parallel_for(g.classes * static_cast<std::int64_t>(g.f2), [&](std::int64_t kf) {
        const int k = static_cast<int>(kf / g.f2);
        const int f = static_cast<int>(kf % g.f2);
        S acc{0};
        for (int ni = 0; ni < n; ++ni) {
            const S* dl = dlogits.data() + (static_cast<std::size_t>(ni) * g.classes + k) * pos;
            const S* xr = cache.d2.data() + (static_cast<std::size_t>(ni) * g.f2 + f) * pos;
            for (std::int64_t j = 0; j < pos; ++j) acc += dl[j] * xr[j];
        }
        gv.read_w[static_cast<std::size_t>(k) * g.f2 + f] += acc;
    });
    parallel_for(static_cast<std::int64_t>(n) * g.f2, [&](std::int64_t nf) {
        const int ni = static_cast<int>(nf / g.f2);
        const int f = static_cast<int>(nf % g.f2);
        S* dr = dd2.data() + (static_cast<std::size_t>(ni) * g.f2 + f) * pos;
        for (int k = 0; k < g.classes; ++k) {
            const S w = pv.read_w[static_cast<std::size_t>(k) * g.f2 + f];
            const S* dl = dlogits.data() + (static_cast<std::size_t>(ni) * g.classes + k) * pos;
            for (std::int64_t j = 0; j < pos; ++j) dr[j] += w * dl[j];
        }
    });

    // Dropout 2.
    if (!cache.mask2.empty()) {
        const S scale = S{1} / static_cast<S>(1.0 - state.config.dropout_rate);
        for (std::size_t i = 0; i < dd2.size(); ++i) {
            dd2[i] = cache.mask2[i] ? dd2[i] * scale : S{0};
        }
    }

    // Window pool backward (scatter mean) into ELU(bn3) space.
    std::vector<S> dy3(static_cast<std::size_t>(n) * g.f2 * l, S{0});
    {
        const S inv = S{1} / static_cast<S>(g.keff);
        parallel_for(static_cast<std::int64_t>(n) * g.f2, [&](std::int64_t nm) {
            const S* dr = dd2.data() + static_cast<std::size_t>(nm) * pos;
            S* dyr = dy3.data() + static_cast<std::size_t>(nm) * l;
            for (std::int64_t j = 0; j < pos; ++j) {
                const S v = dr[j] * inv;
                S* base = dyr + g.off + j * g.sp;
                for (int k = 0; k < g.keff; ++k) base[k] += v;
            }
        });
    }

    // ELU backward needs bn3's output; rebuild it from a4 and the batch stats.
    {
        parallel_for(static_cast<std::int64_t>(n) * g.f2, [&](std::int64_t nf) {
            const int f = static_cast<int>(nf % g.f2);
            const double mean = cache.bn3.mean[static_cast<std::size_t>(f)];
            const double inv_std = 1.0 / std::sqrt(cache.bn3.var[static_cast<std::size_t>(f)] + kBnEps);
            const double gamma = static_cast<double>(pv.bn3_g[f]);
            const double beta = static_cast<double>(pv.bn3_b[f]);
            const std::size_t base = static_cast<std::size_t>(nf) * l;
            for (std::int64_t i = 0; i < l; ++i) {
                const double v =
                    gamma * (static_cast<double>(cache.a4[base + i]) - mean) * inv_std + beta;
                dy3[base + i] *= elu_grad(static_cast<S>(v));
            }
        });
    }

    // BN3 backward (in place) then pointwise/separable.
    bn_bwd(cache.a4, dy3, n, g.f2, l, cache.bn3, pv.bn3_g, gv.bn3_g, gv.bn3_b);

    std::vector<S> da3(cache.a3.size(), S{0});
    for (int o = 0; o < g.f2; ++o) {
        S db{0};
        for (int ni = 0; ni < n; ++ni) {
            const S* dr = dy3.data() + (static_cast<std::size_t>(ni) * g.f2 + o) * l;
            for (std::int64_t i = 0; i < l; ++i) db += dr[i];
        }
        gv.point_b[o] += db;
    }
    parallel_for(static_cast<std::int64_t>(g.f2) * g.groups, [&](std::int64_t og) {
        const int o = static_cast<int>(og / g.groups);
        const int gi = static_cast<int>(og % g.groups);
        S acc{0};
        for (int ni = 0; ni < n; ++ni) {
            const S* dr = dy3.data() + (static_cast<std::size_t>(ni) * g.f2 + o) * l;
            const S* xr = cache.a3.data() + (static_cast<std::size_t>(ni) * g.groups + gi) * l;
            for (std::int64_t i = 0; i < l; ++i) acc += dr[i] * xr[i];
        }
        gv.point_w[static_cast<std::size_t>(o) * g.groups + gi] += acc;
    });
    parallel_for(static_cast<std::int64_t>(n) * g.groups, [&](std::int64_t ng) {
        const int ni = static_cast<int>(ng / g.groups);
        const int gi = static_cast<int>(ng % g.groups);
        S* dr = da3.data() + (static_cast<std::size_t>(ni) * g.groups + gi) * l;
        for (int o = 0; o < g.f2; ++o) {
            const S w = pv.point_w[static_cast<std::size_t>(o) * g.groups + gi];
            const S* dy = dy3.data() + (static_cast<std::size_t>(ni) * g.f2 + o) * l;
            for (std::int64_t i = 0; i < l; ++i) dr[i] += w * dy[i];
        }
    });

    // Separable depthwise backward.
    std::vector<S> dd1(cache.d1.size(), S{0});
    const std::int64_t shift2 = g.pad == PaddingMode::valid ? 0 : -g.pl2;
    parallel_for(g.groups, [&](std::int64_t gi) {
        S* dwg = gv.sep_w + static_cast<std::size_t>(gi) * g.k2;
        for (int ni = 0; ni < n; ++ni) {
            const S* dr = da3.data() + (static_cast<std::size_t>(ni) * g.groups + gi) * l;
            const S* xr = cache.d1.data() + (static_cast<std::size_t>(ni) * g.groups + gi) * m;
            for (int k = 0; k < g.k2; ++k) {
                const std::int64_t base = shift2 + k;
                const std::int64_t i_lo = std::max<std::int64_t>(0, -base);
                const std::int64_t i_hi = std::min<std::int64_t>(l, m - base);
                S acc{0};
                for (std::int64_t i = i_lo; i < i_hi; ++i) acc += dr[i] * xr[i + base];
                dwg[k] += acc;
            }
        }
    });
    parallel_for(static_cast<std::int64_t>(n) * g.groups, [&](std::int64_t ng) {
        const int ni = static_cast<int>(ng / g.groups);
        const int gi = static_cast<int>(ng % g.groups);
        const S* wg = pv.sep_w + static_cast<std::size_t>(gi) * g.k2;
        const S* dr = da3.data() + (static_cast<std::size_t>(ni) * g.groups + gi) * l;
        S* dx = dd1.data() + (static_cast<std::size_t>(ni) * g.groups + gi) * m;
        for (std::int64_t i = 0; i < l; ++i) {
            const std::int64_t base = i + shift2;
            const int k_lo = static_cast<int>(std::max<std::int64_t>(0, -base));
            const int k_hi = static_cast<int>(std::min<std::int64_t>(g.k2, m - base));
            const S d = dr[i];
            for (int k = k_lo; k < k_hi; ++k) dx[base + k] += wg[k] * d;
        }
    });

    // Dropout 1 backward, then un-pool the downsampling stage.
    if (!cache.mask1.empty()) {
        const S scale = S{1} / static_cast<S>(1.0 - state.config.dropout_rate);
        for (std::size_t i = 0; i < dd1.size(); ++i) {
            dd1[i] = cache.mask1[i] ? dd1[i] * scale : S{0};
        }
    }
    std::vector<S> dy2;
    if (g.q == 1) {
        dy2 = std::move(dd1);
    } else {
        dy2.assign(static_cast<std::size_t>(n) * g.groups * t1, S{0});
        const S inv = S{1} / static_cast<S>(g.q);
        parallel_for(static_cast<std::int64_t>(n) * g.groups, [&](std::int64_t nm) {
            const S* dr = dd1.data() + static_cast<std::size_t>(nm) * m;
            S* dyr = dy2.data() + static_cast<std::size_t>(nm) * t1;
            for (std::int64_t i = 0; i < m; ++i) {
                const S v = dr[i] * inv;
                S* base = dyr + i * g.q;
                for (int k = 0; k < g.q; ++k) base[k] += v;
            }
        });
    }

    // ELU backward at bn2 output (rebuilt on the fly).
    parallel_for(static_cast<std::int64_t>(n) * g.groups, [&](std::int64_t nf) {
        const int f = static_cast<int>(nf % g.groups);
        const double mean = cache.bn2.mean[static_cast<std::size_t>(f)];
        const double inv_std = 1.0 / std::sqrt(cache.bn2.var[static_cast<std::size_t>(f)] + kBnEps);
        const double gamma = static_cast<double>(pv.bn2_g[f]);
        const double beta = static_cast<double>(pv.bn2_b[f]);
        const std::size_t base = static_cast<std::size_t>(nf) * t1;
        for (std::int64_t i = 0; i < t1; ++i) {
            const double v =
                gamma * (static_cast<double>(cache.a2[base + i]) - mean) * inv_std + beta;
            dy2[base + i] *= elu_grad(static_cast<S>(v));
        }
    });

    bn_bwd(cache.a2, dy2, n, g.groups, t1, cache.bn2, pv.bn2_g, gv.bn2_g, gv.bn2_b);

    // Spatial conv backward; rebuild bn1's output once for the weight grads.
    std::vector<S> y1(cache.a1.size());
    parallel_for(static_cast<std::int64_t>(n) * g.f1, [&](std::int64_t nf) {
        const int f = static_cast<int>(nf % g.f1);
        const double mean = cache.bn1.mean[static_cast<std::size_t>(f)];
        const double inv_std = 1.0 / std::sqrt(cache.bn1.var[static_cast<std::size_t>(f)] + kBnEps);
        const double gamma = static_cast<double>(pv.bn1_g[f]);
        const double beta = static_cast<double>(pv.bn1_b[f]);
        const std::size_t base = static_cast<std::size_t>(nf) * g.channels * t1;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(g.channels) * t1; ++i) {
            y1[base + i] = static_cast<S>(
                gamma * (static_cast<double>(cache.a1[base + i]) - mean) * inv_std + beta);
        }
    });

    for (int gi = 0; gi < g.groups; ++gi) {
        S db{0};
        for (int ni = 0; ni < n; ++ni) {
            const S* dr = dy2.data() + (static_cast<std::size_t>(ni) * g.groups + gi) * t1;
            for (std::int64_t i = 0; i < t1; ++i) db += dr[i];
        }
        gv.spat_b[gi] += db;
    }
    parallel_for(static_cast<std::int64_t>(g.groups) * g.channels, [&](std::int64_t gc) {
        const int gi = static_cast<int>(gc / g.channels);
        const int c = static_cast<int>(gc % g.channels);
        const int f = gi / g.depth;
        const int d = gi % g.depth;
        S acc{0};
        for (int ni = 0; ni < n; ++ni) {
            const S* dr = dy2.data() + (static_cast<std::size_t>(ni) * g.groups + gi) * t1;
            const S* xr = y1.data() +
                          ((static_cast<std::size_t>(ni) * g.f1 + f) * g.channels + c) * t1;
            for (std::int64_t i = 0; i < t1; ++i) acc += dr[i] * xr[i];
        }
        gv.spat_w[(static_cast<std::size_t>(f) * g.depth + d) * g.channels + c] += acc;
    });
    std::vector<S> dy1(cache.a1.size(), S{0});
    parallel_for(static_cast<std::int64_t>(n) * g.f1, [&](std::int64_t nf) {
        const int ni = static_cast<int>(nf / g.f1);
        const int f = static_cast<int>(nf % g.f1);
        for (int d = 0; d < g.depth; ++d) {
            const int gi = f * g.depth + d;
            const S* dr = dy2.data() + (static_cast<std::size_t>(ni) * g.groups + gi) * t1;
            const S* wv = pv.spat_w + (static_cast<std::size_t>(f) * g.depth + d) * g.channels;
            for (int c = 0; c < g.channels; ++c) {
                S* dx = dy1.data() +
                        ((static_cast<std::size_t>(ni) * g.f1 + f) * g.channels + c) * t1;
                const S w = wv[c];
                for (std::int64_t i = 0; i < t1; ++i) dx[i] += w * dr[i];
            }
        }
    });
    y1.clear();
    y1.shrink_to_fit();

    bn_bwd(cache.a1, dy1, n, g.f1, static_cast<std::int64_t>(g.channels) * t1, cache.bn1,
           pv.bn1_g, gv.bn1_g, gv.bn1_b);

    conv_temporal_bwd(g, n, t, t1, cache.x0, dy1, gv.conv1_w, gv.conv1_b);

    return grads;
}

template <typename S>
BasicModelState<S> apply_rap(const BasicModelState<S>& state, const rap::RapPlan& new_plan) {
    const rap::RapPlan& old_plan = state.config.rap_plan;
    if (new_plan.sampling_frequency_hz() != old_plan.sampling_frequency_hz()) {
        throw IncompatibleTaskError(
            "new plan implies sampling frequency " +
            std::to_string(new_plan.sampling_frequency_hz()) + " Hz, model was built for " +
            std::to_string(old_plan.sampling_frequency_hz()) + " Hz");
    }
    BasicModelState<S> out = state;
    out.config.rap_plan = new_plan;
    out.config.validate();  // re-derives geometry; throws when the plan cannot fit
    return out;
}

Matrix zero_electrode(const ModelConfig& cfg, const Matrix& x, int channel_index) {
    if (x.rows() != cfg.channel_count) {
        throw ShapeError("input channel count does not match the model");
    }
    if (channel_index < 0 || channel_index >= cfg.channel_count) {
        throw IndexError("channel index " + std::to_string(channel_index) +
                         " outside [0, " + std::to_string(cfg.channel_count) + ")");
    }
    Matrix out = x;
    out.row(channel_index).setZero();
    return out;
}

// ---- explicit instantiations ----------------------------------------------

template struct BasicModelState<float>;
template struct BasicModelState<double>;

template BasicModelState<float> init_model<float>(const ModelConfig&, std::uint64_t);
template BasicModelState<double> init_model<double>(const ModelConfig&, std::uint64_t);

template Prediction forward<float>(const BasicModelState<float>&, const Matrix&);
template Prediction forward<double>(const BasicModelState<double>&, const Matrix&);

template std::vector<Prediction> forward_batch<float>(const BasicModelState<float>&,
                                                      const std::vector<Matrix>&);
template std::vector<Prediction> forward_batch<double>(const BasicModelState<double>&,
                                                       const std::vector<Matrix>&);

template std::pair<std::vector<Prediction>, CachePtr<float>> forward_train<float>(
    BasicModelState<float>&, const std::vector<Matrix>&);
template std::pair<std::vector<Prediction>, CachePtr<double>> forward_train<double>(
    BasicModelState<double>&, const std::vector<Matrix>&);

template Gradients<float> backward<float>(const BasicModelState<float>&,
                                          ForwardCache<float>&,
                                          const std::vector<std::vector<double>>&);
template Gradients<double> backward<double>(const BasicModelState<double>&,
                                            ForwardCache<double>&,
                                            const std::vector<std::vector<double>>&);

template std::vector<Prediction> forward_batch_adapt<float>(BasicModelState<float>&,
                                                            const std::vector<Matrix>&,
                                                            const BnAdaptHook<float>&);
template std::vector<Prediction> forward_batch_adapt<double>(BasicModelState<double>&,
                                                             const std::vector<Matrix>&,
                                                             const BnAdaptHook<double>&);

template BasicModelState<float> apply_rap<float>(const BasicModelState<float>&,
                                                 const rap::RapPlan&);
template BasicModelState<double> apply_rap<double>(const BasicModelState<double>&,
                                                   const rap::RapPlan&);

}  // namespace rapstream::model
