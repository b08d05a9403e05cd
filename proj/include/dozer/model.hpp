#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dozer/attention.hpp"
#include "dozer/data.hpp"
#include "dozer/errors.hpp"
#include "dozer/mask.hpp"
#include "dozer/tensor.hpp"

namespace dozer {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Full pipeline hyperparameters. Token width (d_model) is c*p: every patch
/// of p steps across c feature maps is flattened into one token.
struct DozerformerConfig {
    int I = 96;   // look-back length
    int L = 24;   // decoder label length
    int O = 24;   // forecast horizon
    int D = 1;    // variables
    int p = 24;   // patch size
    int c = 4;    // feature maps from the embedding conv
    int heads = 4;
    int enc_layers = 2;
    int dec_layers = 1;
    SparsityParams sparsity;
    std::vector<int> kernels = {13, 17};  // decomposition moving-average sizes
    int d_ff = 0;                         // 0 means 2 * d_model
    double dropout = 0.1;
    bool per_variable_trend = false;

    int d_model() const { return c * p; }
    int d_ff_effective() const { return d_ff > 0 ? d_ff : 2 * d_model(); }
    int n_enc() const { return detail::ceil_div(I, p); }
    int n_dec() const { return (L + O) / p; }
    int label_patches() const { return L / p; }

    void validate() const {
        if (I < 1 || L < 1 || O < 1 || D < 1 || p < 1 || c < 1)
            throw ConfigError("DozerformerConfig: I, L, O, D, p, c must all be >= 1");
        if (enc_layers < 1 || dec_layers < 1)
            throw ConfigError("DozerformerConfig: need at least one encoder and decoder layer");
        if (L % p != 0)
            throw ConfigError("DozerformerConfig: patch size " + std::to_string(p) +
                              " must divide label length " + std::to_string(L));
        if (O % p != 0)
            throw ConfigError("DozerformerConfig: patch size " + std::to_string(p) +
                              " must divide horizon " + std::to_string(O));
        if (L > I)
            throw ConfigError("DozerformerConfig: label length " + std::to_string(L) +
                              " exceeds look-back " + std::to_string(I));
        if (kernels.empty())
            throw ConfigError("DozerformerConfig: need at least one decomposition kernel");
        for (int k : kernels)
            if (k < 1 || k % 2 == 0)
                throw ConfigError("DozerformerConfig: decomposition kernels must be odd, got " +
                                  std::to_string(k));
        if (dropout < 0.0 || dropout >= 1.0)
            throw ConfigError("DozerformerConfig: dropout must lie in [0, 1)");
        HeadConfig hc{d_model(), heads};
        hc.validate();
        sparsity.validate();
    }
};

// ---------------------------------------------------------------------------
// Decomposition and raw-series helpers (no gradients flow through these)
// ---------------------------------------------------------------------------

struct SeasonalTrend {
    Series seasonal;
    Series trend;
};

/// Splits a series into trend (mean of replicate-padded moving averages,
/// one per kernel) and seasonal remainder. seasonal + trend == input.
inline SeasonalTrend decompose(const Series& x, const std::vector<int>& kernels) {
    if (kernels.empty()) throw ConfigError("decompose: kernel list is empty");
    for (int k : kernels)
        if (k < 1 || k % 2 == 0)
            throw ConfigError("decompose: kernel sizes must be odd, got " + std::to_string(k));
    SeasonalTrend st;
    st.trend.T = st.seasonal.T = x.T;
    st.trend.D = st.seasonal.D = x.D;
    st.trend.values.assign(x.values.size(), 0.0);
    st.seasonal.values.resize(x.values.size());
    const double inv_k = 1.0 / static_cast<double>(kernels.size());
    for (int k : kernels) {
        const int half = k / 2;
        for (int d = 0; d < x.D; ++d) {
            for (int t = 0; t < x.T; ++t) {
                double acc = 0.0;
                for (int o = -half; o <= half; ++o) {
                    int idx = std::clamp(t + o, 0, x.T - 1);
                    acc += x.at(idx, d);
                }
                st.trend.at(t, d) += acc / k * inv_k;
            }
        }
    }
    for (size_t i = 0; i < x.values.size(); ++i)
        st.seasonal.values[i] = x.values[i] - st.trend.values[i];
    return st;
}

/// Last L seasonal steps followed by O zero rows.
inline Series build_decoder_input(const Series& x_s, int L, int O) {
    if (L < 0 || O < 0) throw ConfigError("build_decoder_input: L and O must be >= 0");
    if (L > x_s.T)
        throw ConfigError("build_decoder_input: label length " + std::to_string(L) +
                          " exceeds series length " + std::to_string(x_s.T));
    Series out;
    out.T = L + O;
    out.D = x_s.D;
    out.values.assign(static_cast<size_t>(out.T) * out.D, 0.0);
    for (int t = 0; t < L; ++t)
        for (int d = 0; d < x_s.D; ++d) out.at(t, d) = x_s.at(x_s.T - L + t, d);
    return out;
}

// ---------------------------------------------------------------------------
// Differentiable pipeline stages
// ---------------------------------------------------------------------------

namespace detail {
// Flat index into a {c, N, p, D} tensor.
inline size_t idx4(int f, int n, int t, int d, int N, int p, int D) {
    return ((static_cast<size_t>(f) * N + n) * p + t) * D + d;
}
}  // namespace detail

/// Per-variable time convolution with width-3 kernels and replicate padding:
/// c feature maps per variable, kernels shared across variables.
/// kernels: {c, 3}; bias: {c}; result: {c, T, D}.
inline Tensor di_embed(const Series& x, const Tensor& kernels, const Tensor& bias) {
    if (kernels.rank() != 2 || kernels.dim(1) != 3)
        throw ShapeError("di_embed: kernels must have shape {c, 3}");
    const int c = kernels.dim(0);
    if (static_cast<int>(bias.numel()) != c)
        throw ShapeError("di_embed: bias length " + std::to_string(bias.numel()) +
                         " does not match " + std::to_string(c) + " maps");
    const int T = x.T, D = x.D;
    Tensor out = detail::make_node({c, T, D}, {kernels, bias});
    auto& v = out.node()->value;
    auto kv = kernels.values();
    auto bv = bias.values();
    auto pick = [&](int t, int d) { return x.at(std::clamp(t, 0, T - 1), d); };
    for (int f = 0; f < c; ++f)
        for (int t = 0; t < T; ++t)
            for (int d = 0; d < D; ++d)
                v[(static_cast<size_t>(f) * T + t) * D + d] =
                    kv[f * 3 + 0] * pick(t - 1, d) + kv[f * 3 + 1] * pick(t, d) +
                    kv[f * 3 + 2] * pick(t + 1, d) + bv[f];
    out.node()->backward = [xv = x.values, c, T, D](detail::Node& self) {
        auto& pk = self.parents[0];
        auto& pb = self.parents[1];
        auto pick = [&](int t, int d) {
            return xv[static_cast<size_t>(std::clamp(t, 0, T - 1)) * D + d];
        };
        for (int f = 0; f < c; ++f)
            for (int t = 0; t < T; ++t)
                for (int d = 0; d < D; ++d) {
                    const double g = self.grad[(static_cast<size_t>(f) * T + t) * D + d];
                    if (pk->requires_grad) {
                        pk->ensure_grad();
                        pk->grad[f * 3 + 0] += g * pick(t - 1, d);
                        pk->grad[f * 3 + 1] += g * pick(t, d);
                        pk->grad[f * 3 + 2] += g * pick(t + 1, d);
                    }
                    if (pb->requires_grad) {
                        pb->ensure_grad();
                        pb->grad[f] += g;
                    }
                }
    };
    return out;
}

/// {c, T, D} -> {c, N, p, D} with N = ceil(T/p); steps past T are zero.
inline Tensor patchify(const Tensor& x, int p) {
    if (x.rank() != 3) throw ShapeError("patchify: expected a {c, T, D} tensor");
    if (p < 1) throw ConfigError("patchify: patch size must be positive");
    const int c = x.dim(0), T = x.dim(1), D = x.dim(2);
    const int N = detail::ceil_div(T, p);
    Tensor out = detail::make_node({c, N, p, D}, {x});
    auto& v = out.node()->value;
    auto xv = x.values();
    for (int f = 0; f < c; ++f)
        for (int n = 0; n < N; ++n)
            for (int t = 0; t < p; ++t) {
                const int src = n * p + t;
                for (int d = 0; d < D; ++d)
                    v[detail::idx4(f, n, t, d, N, p, D)] =
                        src < T ? xv[(static_cast<size_t>(f) * T + src) * D + d] : 0.0;
            }
    out.node()->backward = [c, T, D, N, p](detail::Node& self) {
        auto& px = self.parents[0];
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (int f = 0; f < c; ++f)
            for (int n = 0; n < N; ++n)
                for (int t = 0; t < p; ++t) {
                    const int src = n * p + t;
                    if (src >= T) continue;
                    for (int d = 0; d < D; ++d)
                        px->grad[(static_cast<size_t>(f) * T + src) * D + d] +=
                            self.grad[detail::idx4(f, n, t, d, N, p, D)];
                }
    };
    return out;
}

/// Inverse of patchify: {c, N, p, D} -> {c, T, D}, dropping the zero tail.
inline Tensor unpatchify(const Tensor& x, int T) {
    if (x.rank() != 4) throw ShapeError("unpatchify: expected a {c, N, p, D} tensor");
    const int c = x.dim(0), N = x.dim(1), p = x.dim(2), D = x.dim(3);
    if (T < 1 || T > N * p)
        throw ShapeError("unpatchify: T=" + std::to_string(T) + " outside (0, " +
                         std::to_string(N * p) + "]");
    Tensor out = detail::make_node({c, T, D}, {x});
    auto& v = out.node()->value;
    auto xv = x.values();
    for (int f = 0; f < c; ++f)
        for (int t = 0; t < T; ++t)
            for (int d = 0; d < D; ++d)
                v[(static_cast<size_t>(f) * T + t) * D + d] =
                    xv[detail::idx4(f, t / p, t % p, d, N, p, D)];
    out.node()->backward = [c, T, D, N, p](detail::Node& self) {
        auto& px = self.parents[0];
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (int f = 0; f < c; ++f)
            for (int t = 0; t < T; ++t)
                for (int d = 0; d < D; ++d)
                    px->grad[detail::idx4(f, t / p, t % p, d, N, p, D)] +=
                        self.grad[(static_cast<size_t>(f) * T + t) * D + d];
    };
    return out;
}

/// Tokens for one variable: patch n becomes a row of width c*p, laid out as
/// map-major (entry f*p + t holds map f, step t of the patch).
inline Tensor var_tokens(const Tensor& x, int d) {
    if (x.rank() != 4) throw ShapeError("var_tokens: expected a {c, N, p, D} tensor");
    const int c = x.dim(0), N = x.dim(1), p = x.dim(2), D = x.dim(3);
    if (d < 0 || d >= D)
        throw ShapeError("var_tokens: variable " + std::to_string(d) + " outside 0.." +
                         std::to_string(D - 1));
    Tensor out = detail::make_node({N, c * p}, {x});
    auto& v = out.node()->value;
    auto xv = x.values();
    for (int n = 0; n < N; ++n)
        for (int f = 0; f < c; ++f)
            for (int t = 0; t < p; ++t)
                v[static_cast<size_t>(n) * c * p + f * p + t] =
                    xv[detail::idx4(f, n, t, d, N, p, D)];
    out.node()->backward = [c, N, p, D, d](detail::Node& self) {
        auto& px = self.parents[0];
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int f = 0; f < c; ++f)
                for (int t = 0; t < p; ++t)
                    px->grad[detail::idx4(f, n, t, d, N, p, D)] +=
                        self.grad[static_cast<size_t>(n) * c * p + f * p + t];
    };
    return out;
}

/// Reassembles per-variable token matrices {N, c*p} into maps {c, N, p, D}.
inline Tensor maps_from_tokens(const std::vector<Tensor>& tokens, int c, int p) {
    if (tokens.empty()) throw ShapeError("maps_from_tokens: empty token list");
    const int N = tokens[0].dim(0);
    const int D = static_cast<int>(tokens.size());
    for (const auto& t : tokens)
        if (t.rank() != 2 || t.dim(0) != N || t.dim(1) != c * p)
            throw ShapeError("maps_from_tokens: token shape " + detail::shape_str(t.shape()) +
                             " does not match {" + std::to_string(N) + ", " +
                             std::to_string(c * p) + "}");
    Tensor out = detail::make_node({c, N, p, D}, tokens);
    auto& v = out.node()->value;
    for (int d = 0; d < D; ++d) {
        auto tv = tokens[static_cast<size_t>(d)].values();
        for (int n = 0; n < N; ++n)
            for (int f = 0; f < c; ++f)
                for (int t = 0; t < p; ++t)
                    v[detail::idx4(f, n, t, d, N, p, D)] =
                        tv[static_cast<size_t>(n) * c * p + f * p + t];
    }
    out.node()->backward = [c, N, p, D](detail::Node& self) {
        for (int d = 0; d < D; ++d) {
            auto& pt = self.parents[static_cast<size_t>(d)];
            if (!pt->requires_grad) continue;
            pt->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int f = 0; f < c; ++f)
                    for (int t = 0; t < p; ++t)
                        pt->grad[static_cast<size_t>(n) * c * p + f * p + t] +=
                            self.grad[detail::idx4(f, n, t, d, N, p, D)];
        }
    };
    return out;
}

/// Affine projection over the time dimension, shared across variables:
/// weight {I, O}, bias {O}, input {I, D}, output {O, D}.
inline Tensor trend_forecast(const Series& x_t, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 2 || weight.dim(0) != x_t.T)
        throw ConfigError("trend_forecast: weight " + detail::shape_str(weight.shape()) +
                          " does not project from " + std::to_string(x_t.T) + " steps");
    if (static_cast<int>(bias.numel()) != weight.dim(1))
        throw ConfigError("trend_forecast: bias length " + std::to_string(bias.numel()) +
                          " vs horizon " + std::to_string(weight.dim(1)));
    // Rows are variables so one matmul covers all of them.
    std::vector<double> xv(static_cast<size_t>(x_t.D) * x_t.T);
    for (int d = 0; d < x_t.D; ++d)
        for (int t = 0; t < x_t.T; ++t) xv[static_cast<size_t>(d) * x_t.T + t] = x_t.at(t, d);
    Tensor x = Tensor::from_values({x_t.D, x_t.T}, std::move(xv));
    return transpose(add_row_bias(matmul(x, weight), bias));
}

/// Pointwise map combination: c maps collapse to one via weights {c} and a
/// scalar bias, then the last O of the N*p unpatched steps are kept.
inline Tensor output_head(const Tensor& h, const Tensor& weight, const Tensor& bias, int O) {
    if (h.rank() != 4) throw ShapeError("output_head: expected a {c, N, p, D} tensor");
    const int c = h.dim(0), N = h.dim(1), p = h.dim(2), D = h.dim(3);
    if (static_cast<int>(weight.numel()) != c)
        throw ShapeError("output_head: weight length " + std::to_string(weight.numel()) +
                         " vs " + std::to_string(c) + " maps");
    if (bias.numel() != 1) throw ShapeError("output_head: bias must be a scalar");
    if (O < 1 || O > N * p)
        throw ShapeError("output_head: horizon " + std::to_string(O) + " outside (0, " +
                         std::to_string(N * p) + "]");
    const int start = N * p - O;
    Tensor out = detail::make_node({O, D}, {h, weight, bias});
    auto& v = out.node()->value;
    auto hv = h.values();
    auto wv = weight.values();
    const double b = bias.values()[0];
    for (int tau = 0; tau < O; ++tau) {
        const int n = (start + tau) / p, t = (start + tau) % p;
        for (int d = 0; d < D; ++d) {
            double acc = b;
            for (int f = 0; f < c; ++f) acc += wv[f] * hv[detail::idx4(f, n, t, d, N, p, D)];
            v[static_cast<size_t>(tau) * D + d] = acc;
        }
    }
    out.node()->backward = [c, N, p, D, O, start](detail::Node& self) {
        auto& ph = self.parents[0];
        auto& pw = self.parents[1];
        auto& pb = self.parents[2];
        for (int tau = 0; tau < O; ++tau) {
            const int n = (start + tau) / p, t = (start + tau) % p;
            for (int d = 0; d < D; ++d) {
                const double g = self.grad[static_cast<size_t>(tau) * D + d];
                for (int f = 0; f < c; ++f) {
                    const size_t hi = detail::idx4(f, n, t, d, N, p, D);
                    if (ph->requires_grad) {
                        ph->ensure_grad();
                        ph->grad[hi] += g * pw->value[f];
                    }
                    if (pw->requires_grad) {
                        pw->ensure_grad();
                        pw->grad[f] += g * ph->value[hi];
                    }
                }
                if (pb->requires_grad) {
                    pb->ensure_grad();
                    pb->grad[0] += g;
                }
            }
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// Parameter bundles
// ---------------------------------------------------------------------------

struct FeedForwardParams {
    Tensor w1, b1, w2, b2;
};

struct LayerNormWeights {
    Tensor gain, offset;
};

struct EncoderLayerParams {
    AttentionParams att;
    LayerNormWeights ln1;
    FeedForwardParams ffn;
    LayerNormWeights ln2;
};

struct DecoderLayerParams {
    AttentionParams self_att;
    LayerNormWeights ln1;
    AttentionParams cross_att;
    LayerNormWeights ln2;
    FeedForwardParams ffn;
    LayerNormWeights ln3;
};

struct CostReport {
    long long params = 0;
    long long attn_pairs = 0;
    long long flops_estimate = 0;
};

inline ClosedFormPairs closed_form_pairs(const DozerformerConfig& cfg) {
    return closed_form_pairs(cfg.I, cfg.L, cfg.O, cfg.p, cfg.sparsity);
}

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

class Dozerformer {
public:
    explicit Dozerformer(DozerformerConfig cfg, std::uint64_t seed = 1)
        : cfg_(std::move(cfg)), dropout_rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
        cfg_.validate();
        std::mt19937_64 rng(seed);
        init_params(rng);
        build_masks();
    }

    const DozerformerConfig& config() const { return cfg_; }
    const AttnMask& enc_self_mask() const { return enc_self_; }
    const AttnMask& dec_self_mask() const { return dec_self_; }
    const AttnMask& cross_mask() const { return cross_; }

    const std::vector<std::pair<std::string, Tensor>>& named_params() const { return params_; }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    /// One encoder stack pass over a single variable's tokens.
    Tensor encoder_forward(Tensor x, bool training = false) {
        const HeadConfig hc{cfg_.d_model(), cfg_.heads};
        for (auto& layer : enc_layers_) {
            Tensor a = multi_head_attention(x, x, layer.att, hc, enc_self_);
            x = layer_norm(add(x, drop(a, training)), layer.ln1.gain, layer.ln1.offset);
            Tensor f = ffn(x, layer.ffn);
            x = layer_norm(add(x, drop(f, training)), layer.ln2.gain, layer.ln2.offset);
        }
        return x;
    }

    /// One decoder stack pass: sparse self-attention, sparse cross-attention
    /// against the encoder output, then the feed-forward block.
    Tensor decoder_forward(Tensor x, const Tensor& enc_out, bool training = false) {
        const HeadConfig hc{cfg_.d_model(), cfg_.heads};
        for (auto& layer : dec_layers_) {
            Tensor a = multi_head_attention(x, x, layer.self_att, hc, dec_self_);
            x = layer_norm(add(x, drop(a, training)), layer.ln1.gain, layer.ln1.offset);
            Tensor cr = multi_head_attention(x, enc_out, layer.cross_att, hc, cross_);
            x = layer_norm(add(x, drop(cr, training)), layer.ln2.gain, layer.ln2.offset);
            Tensor f = ffn(x, layer.ffn);
            x = layer_norm(add(x, drop(f, training)), layer.ln3.gain, layer.ln3.offset);
        }
        return x;
    }

    /// Whole pipeline on one window of shape {I, D}; returns predictions
    /// {O, D} wired for backprop into the parameters.
    Tensor forward(const Series& window, bool training = false) {
        if (window.T != cfg_.I || window.D != cfg_.D)
            throw ShapeError("forward: window is " + std::to_string(window.T) + "x" +
                             std::to_string(window.D) + ", config wants " +
                             std::to_string(cfg_.I) + "x" + std::to_string(cfg_.D));
        SeasonalTrend st = decompose(window, cfg_.kernels);

        Tensor trend_pred = cfg_.per_variable_trend ? per_variable_trend(st.trend)
                                                    : trend_forecast(st.trend, trend_w_[0], trend_b_[0]);

        Series dec_in = build_decoder_input(st.seasonal, cfg_.L, cfg_.O);
        Tensor enc_maps = patchify(di_embed(st.seasonal, enc_embed_k_, enc_embed_b_), cfg_.p);
        Tensor dec_maps = patchify(di_embed(dec_in, dec_embed_k_, dec_embed_b_), cfg_.p);

        std::vector<Tensor> dec_tokens;
        dec_tokens.reserve(static_cast<size_t>(cfg_.D));
        for (int d = 0; d < cfg_.D; ++d) {
            Tensor enc_out = encoder_forward(var_tokens(enc_maps, d), training);
            dec_tokens.push_back(decoder_forward(var_tokens(dec_maps, d), enc_out, training));
        }
        Tensor h = maps_from_tokens(dec_tokens, cfg_.c, cfg_.p);
        Tensor seasonal_pred = output_head(h, head_w_, head_b_, cfg_.O);
        return add(seasonal_pred, trend_pred);
    }

    /// Convenience wrapper: raw window in, plain forecast values out.
    Series predict(const Series& window) {
        Tensor y = forward(window, false);
        Series out;
        out.T = cfg_.O;
        out.D = cfg_.D;
        out.values.assign(y.values().begin(), y.values().end());
        return out;
    }

    /// Exact learnable-parameter count, mask-level attention pair count, and
    /// a matmul-dominated FLOPs estimate for one forward pass.
    static CostReport model_cost_report(const DozerformerConfig& cfg) {
        Dozerformer probe(cfg, 1);
        CostReport r;
        for (auto& [name, t] : probe.params_) r.params += static_cast<long long>(t.numel());

        const long long self_e = count_pairs(probe.enc_self_).counted;
        const long long self_d = count_pairs(probe.dec_self_).counted;
        const long long cross = count_pairs(probe.cross_).counted;
        const long long sites_pairs =
            cfg.enc_layers * self_e + cfg.dec_layers * (self_d + cross);
        r.attn_pairs = static_cast<long long>(cfg.D) * sites_pairs;

        const long long d = cfg.d_model(), dff = cfg.d_ff_effective();
        const long long ne = cfg.n_enc(), nd = cfg.n_dec();
        // Per variable: score + value products cost 2*pairs*d_k per head,
        // summed over heads and both products that is 4*pairs*d_model.
        long long fl = 4 * sites_pairs * d;
        // q/k/v/o projections per attention site, then the feed-forward pair.
        const long long proj_e = 2 * ne * d * d * 4 + 2 * ne * d * dff * 2;
        const long long proj_d_self = 2 * nd * d * d * 4;
        const long long proj_d_cross = 2 * nd * d * d * 2 + 2 * ne * d * d * 2;
        const long long proj_d_ffn = 2 * nd * d * dff * 2;
        fl += cfg.enc_layers * proj_e + cfg.dec_layers * (proj_d_self + proj_d_cross + proj_d_ffn);
        fl *= cfg.D;
        // Embedding convs, trend projection, and the map-combining head.
        fl += 2LL * 3 * cfg.I * cfg.c * cfg.D + 2LL * 3 * (cfg.L + cfg.O) * cfg.c * cfg.D;
        fl += 2LL * cfg.I * cfg.O * cfg.D;
        fl += 2LL * cfg.c * (cfg.L + cfg.O) * cfg.D;
        r.flops_estimate = fl;
        return r;
    }

    void save_checkpoint(const std::string& path) const;
    static Dozerformer load_checkpoint(const std::string& path);

    /// Dropout stream control so repeated training runs are reproducible.
    void reseed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed ^ 0x9e3779b97f4a7c15ULL); }

private:
    Tensor drop(const Tensor& x, bool training) {
        return training ? dropout(x, cfg_.dropout, dropout_rng_) : x;
    }

    Tensor ffn(const Tensor& x, const FeedForwardParams& f) {
        Tensor h = gelu(add_row_bias(matmul(x, f.w1), f.b1));
        return add_row_bias(matmul(h, f.w2), f.b2);
    }

    Tensor per_variable_trend(const Series& x_t) {
        std::vector<Tensor> rows;
        rows.reserve(static_cast<size_t>(cfg_.D));
        for (int d = 0; d < cfg_.D; ++d) {
            Series col;
            col.T = x_t.T;
            col.D = 1;
            col.values.resize(static_cast<size_t>(x_t.T));
            for (int t = 0; t < x_t.T; ++t) col.values[static_cast<size_t>(t)] = x_t.at(t, d);
            rows.push_back(transpose(trend_forecast(col, trend_w_[static_cast<size_t>(d)],
                                                    trend_b_[static_cast<size_t>(d)])));
        }
        return transpose(concat_rows(rows));
    }

    Tensor reg(const std::string& name, Tensor t) {
        params_.emplace_back(name, t);
        return t;
    }
    Tensor uniform(const std::string& name, Shape shape, int fan_in, std::mt19937_64& rng) {
        return reg(name, Tensor::parameter(std::move(shape), fan_in, rng));
    }
    LayerNormWeights make_ln(const std::string& prefix) {
        LayerNormWeights ln;
        ln.gain = reg(prefix + ".g", Tensor::full({cfg_.d_model()}, 1.0, true));
        ln.offset = reg(prefix + ".b", Tensor::zeros({cfg_.d_model()}, true));
        return ln;
    }
    AttentionParams make_att(const std::string& prefix, std::mt19937_64& rng) {
        const int d = cfg_.d_model();
        AttentionParams p;
        p.wq = uniform(prefix + ".wq", {d, d}, d, rng);
        p.bq = uniform(prefix + ".bq", {d}, d, rng);
        p.wk = uniform(prefix + ".wk", {d, d}, d, rng);
        p.bk = uniform(prefix + ".bk", {d}, d, rng);
        p.wv = uniform(prefix + ".wv", {d, d}, d, rng);
        p.bv = uniform(prefix + ".bv", {d}, d, rng);
        p.wo = uniform(prefix + ".wo", {d, d}, d, rng);
        p.bo = uniform(prefix + ".bo", {d}, d, rng);
        return p;
    }
    FeedForwardParams make_ffn(const std::string& prefix, std::mt19937_64& rng) {
        const int d = cfg_.d_model(), dff = cfg_.d_ff_effective();
        FeedForwardParams f;
        f.w1 = uniform(prefix + ".w1", {d, dff}, d, rng);
        f.b1 = uniform(prefix + ".b1", {dff}, d, rng);
        f.w2 = uniform(prefix + ".w2", {dff, d}, dff, rng);
        f.b2 = uniform(prefix + ".b2", {d}, dff, rng);
        return f;
    }

    void init_params(std::mt19937_64& rng) {
        if (cfg_.per_variable_trend) {
            for (int d = 0; d < cfg_.D; ++d) {
                const std::string prefix = "trend." + std::to_string(d);
                trend_w_.push_back(uniform(prefix + ".w", {cfg_.I, cfg_.O}, cfg_.I, rng));
                trend_b_.push_back(uniform(prefix + ".b", {cfg_.O}, cfg_.I, rng));
            }
        } else {
            trend_w_.push_back(uniform("trend.w", {cfg_.I, cfg_.O}, cfg_.I, rng));
            trend_b_.push_back(uniform("trend.b", {cfg_.O}, cfg_.I, rng));
        }
        enc_embed_k_ = uniform("embed.enc.k", {cfg_.c, 3}, 3, rng);
        enc_embed_b_ = uniform("embed.enc.b", {cfg_.c}, 3, rng);
        dec_embed_k_ = uniform("embed.dec.k", {cfg_.c, 3}, 3, rng);
        dec_embed_b_ = uniform("embed.dec.b", {cfg_.c}, 3, rng);
        for (int l = 0; l < cfg_.enc_layers; ++l) {
            const std::string prefix = "enc." + std::to_string(l);
            EncoderLayerParams layer;
            layer.att = make_att(prefix + ".att", rng);
            layer.ln1 = make_ln(prefix + ".ln1");
            layer.ffn = make_ffn(prefix + ".ffn", rng);
            layer.ln2 = make_ln(prefix + ".ln2");
            enc_layers_.push_back(std::move(layer));
        }
        for (int l = 0; l < cfg_.dec_layers; ++l) {
            const std::string prefix = "dec." + std::to_string(l);
            DecoderLayerParams layer;
            layer.self_att = make_att(prefix + ".self", rng);
            layer.ln1 = make_ln(prefix + ".ln1");
            layer.cross_att = make_att(prefix + ".cross", rng);
            layer.ln2 = make_ln(prefix + ".ln2");
            layer.ffn = make_ffn(prefix + ".ffn", rng);
            layer.ln3 = make_ln(prefix + ".ln3");
            dec_layers_.push_back(std::move(layer));
        }
        head_w_ = uniform("head.w", {cfg_.c}, cfg_.c, rng);
        head_b_ = uniform("head.b", {1}, cfg_.c, rng);
    }

    void build_masks() {
        enc_self_ = dozer_self_mask(cfg_.n_enc(), cfg_.sparsity);
        dec_self_ = dozer_self_mask(cfg_.n_dec(), cfg_.sparsity);
        cross_ = dozer_cross_mask(CrossCoords::make(cfg_.n_enc(), cfg_.n_dec(), cfg_.label_patches()),
                                  cfg_.sparsity);
    }

    DozerformerConfig cfg_;
    std::mt19937_64 dropout_rng_;
    std::vector<std::pair<std::string, Tensor>> params_;

    std::vector<Tensor> trend_w_, trend_b_;
    Tensor enc_embed_k_, enc_embed_b_, dec_embed_k_, dec_embed_b_;
    std::vector<EncoderLayerParams> enc_layers_;
    std::vector<DecoderLayerParams> dec_layers_;
    Tensor head_w_, head_b_;

    AttnMask enc_self_{1, 1, true};
    AttnMask dec_self_{1, 1, true};
    AttnMask cross_{1, 1, true};
};

// ---------------------------------------------------------------------------
// Checkpointing: self-describing binary, bit-exact round trip
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline std::uint32_t read_u32(std::istream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw DataError("checkpoint: truncated file");
    return v;
}
inline std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw DataError("checkpoint: truncated file");
    return v;
}

inline std::string config_to_text(const DozerformerConfig& c) {
    std::ostringstream os;
    os << "I=" << c.I << "\nL=" << c.L << "\nO=" << c.O << "\nD=" << c.D << "\np=" << c.p
       << "\nc=" << c.c << "\nheads=" << c.heads << "\nenc_layers=" << c.enc_layers
       << "\ndec_layers=" << c.dec_layers << "\nw=" << c.sparsity.w
       << "\ninterval=" << c.sparsity.interval << "\nv=" << c.sparsity.v
       << "\ncross_stride_end_anchored=" << (c.sparsity.cross_stride_end_anchored ? 1 : 0)
       << "\nkernels=";
    for (size_t i = 0; i < c.kernels.size(); ++i) os << (i ? "," : "") << c.kernels[i];
    char drop[40];
    std::snprintf(drop, sizeof drop, "%.17g", c.dropout);
    os << "\nd_ff=" << c.d_ff << "\ndropout=" << drop
       << "\nper_variable_trend=" << (c.per_variable_trend ? 1 : 0) << "\n";
    return os.str();
}

inline DozerformerConfig config_from_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto want = [&](const char* key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw DataError(std::string("checkpoint: config missing key ") + key);
        return it->second;
    };
    DozerformerConfig c;
    c.I = std::stoi(want("I"));
    c.L = std::stoi(want("L"));
    c.O = std::stoi(want("O"));
    c.D = std::stoi(want("D"));
    c.p = std::stoi(want("p"));
    c.c = std::stoi(want("c"));
    c.heads = std::stoi(want("heads"));
    c.enc_layers = std::stoi(want("enc_layers"));
    c.dec_layers = std::stoi(want("dec_layers"));
    c.sparsity.w = std::stoi(want("w"));
    c.sparsity.interval = std::stoi(want("interval"));
    c.sparsity.v = std::stoi(want("v"));
    c.sparsity.cross_stride_end_anchored = std::stoi(want("cross_stride_end_anchored")) != 0;
    c.kernels.clear();
    std::istringstream ks(want("kernels"));
    std::string tok;
    while (std::getline(ks, tok, ',')) c.kernels.push_back(std::stoi(tok));
    c.d_ff = std::stoi(want("d_ff"));
    c.dropout = std::stod(want("dropout"));
    c.per_variable_trend = std::stoi(want("per_variable_trend")) != 0;
    return c;
}

}  // namespace detail

inline void Dozerformer::save_checkpoint(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("checkpoint: cannot open " + path + " for writing");
    out.write("DZFCKPT1", 8);
    const std::string cfg_text = detail::config_to_text(cfg_);
    detail::write_u32(out, static_cast<std::uint32_t>(cfg_text.size()));
    out.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
    detail::write_u64(out, params_.size());
    for (const auto& [name, t] : params_) {
        detail::write_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_u32(out, static_cast<std::uint32_t>(t.shape().size()));
        for (int d : t.shape()) detail::write_u32(out, static_cast<std::uint32_t>(d));
        out.write(reinterpret_cast<const char*>(t.values().data()),
                  static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    if (!out) throw DataError("checkpoint: write to " + path + " failed");
}

inline Dozerformer Dozerformer::load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "DZFCKPT1", 8) != 0)
        throw DataError("checkpoint: " + path + " is not a model checkpoint");
    const std::uint32_t cfg_len = detail::read_u32(in);
    std::string cfg_text(cfg_len, '\0');
    in.read(cfg_text.data(), cfg_len);
    if (!in) throw DataError("checkpoint: truncated config block");
    Dozerformer model(detail::config_from_text(cfg_text), 1);

    const std::uint64_t count = detail::read_u64(in);
    if (count != model.params_.size())
        throw DataError("checkpoint: holds " + std::to_string(count) + " tensors, model has " +
                        std::to_string(model.params_.size()));
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::read_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const std::uint32_t rank = detail::read_u32(in);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<int>(detail::read_u32(in));
        auto& [expect_name, tensor] = model.params_[static_cast<size_t>(i)];
        if (name != expect_name)
            throw DataError("checkpoint: tensor " + std::to_string(i) + " is '" + name +
                            "', expected '" + expect_name + "'");
        if (shape != tensor.shape())
            throw DataError("checkpoint: tensor '" + name + "' has shape " +
                            detail::shape_str(shape) + ", expected " +
                            detail::shape_str(tensor.shape()));
        in.read(reinterpret_cast<char*>(tensor.values_mut().data()),
                static_cast<std::streamsize>(tensor.numel() * sizeof(double)));
        if (!in) throw DataError("checkpoint: truncated tensor '" + name + "'");
    }
    return model;
}

}  // namespace dozer
