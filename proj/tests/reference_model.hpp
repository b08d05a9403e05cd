#pragma once

// A deliberately independent re-implementation of the forecasting pipeline
// with dense (unmasked) attention on plain double buffers. It shares nothing
// with the library's graph code except the parameter values, which it reads
// by name, so agreement between the two is meaningful evidence that the
// sparse path computes canonical attention wherever the masks allow.

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dozer/model.hpp"

namespace refmodel {

using Mat = std::vector<double>;  // row-major

inline Mat matmul(const Mat& a, const Mat& b, int m, int k, int n) {
    Mat c(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
            const double av = a[static_cast<size_t>(i) * k + l];
            for (int j = 0; j < n; ++j)
                c[static_cast<size_t>(i) * n + j] += av * b[static_cast<size_t>(l) * n + j];
        }
    return c;
}

inline void add_bias_rows(Mat& x, const Mat& b, int m, int n) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) x[static_cast<size_t>(i) * n + j] += b[static_cast<size_t>(j)];
}

inline void softmax_rows(Mat& x, int m, int n) {
    for (int i = 0; i < m; ++i) {
        double mx = x[static_cast<size_t>(i) * n];
        for (int j = 1; j < n; ++j) mx = std::max(mx, x[static_cast<size_t>(i) * n + j]);
        double den = 0.0;
        for (int j = 0; j < n; ++j) den += std::exp(x[static_cast<size_t>(i) * n + j] - mx);
        for (int j = 0; j < n; ++j)
            x[static_cast<size_t>(i) * n + j] = std::exp(x[static_cast<size_t>(i) * n + j] - mx) / den;
    }
}

inline void layer_norm_rows(Mat& x, const Mat& g, const Mat& b, int m, int n,
                            double eps = 1e-6) {
    for (int i = 0; i < m; ++i) {
        double mu = 0.0;
        for (int j = 0; j < n; ++j) mu += x[static_cast<size_t>(i) * n + j];
        mu /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = x[static_cast<size_t>(i) * n + j] - mu;
            var += d * d;
        }
        var /= n;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < n; ++j)
            x[static_cast<size_t>(i) * n + j] =
                (x[static_cast<size_t>(i) * n + j] - mu) * inv * g[static_cast<size_t>(j)] +
                b[static_cast<size_t>(j)];
    }
}

inline void gelu_inplace(Mat& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (auto& v : x) v = v * 0.5 * (1.0 + std::erf(v * inv_sqrt2));
}

struct ParamBook {
    std::map<std::string, Mat> by_name;

    static ParamBook from(const dozer::Dozerformer& model) {
        ParamBook book;
        for (const auto& [name, t] : model.named_params())
            book.by_name.emplace(name, Mat(t.values().begin(), t.values().end()));
        return book;
    }

    const Mat& at(const std::string& name) const {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw std::runtime_error("reference: missing parameter " + name);
        return it->second;
    }
};

// Dense multi-head attention with identical projection layout to the library.
inline Mat full_attention(const Mat& x_q, const Mat& x_kv, int n_q, int n_kv, int d, int heads,
                          const ParamBook& book, const std::string& prefix) {
    Mat q = matmul(x_q, book.at(prefix + ".wq"), n_q, d, d);
    add_bias_rows(q, book.at(prefix + ".bq"), n_q, d);
    Mat k = matmul(x_kv, book.at(prefix + ".wk"), n_kv, d, d);
    add_bias_rows(k, book.at(prefix + ".bk"), n_kv, d);
    Mat v = matmul(x_kv, book.at(prefix + ".wv"), n_kv, d, d);
    add_bias_rows(v, book.at(prefix + ".bv"), n_kv, d);

    const int dk = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    Mat cat(static_cast<size_t>(n_q) * d, 0.0);
    for (int h = 0; h < heads; ++h) {
        Mat scores(static_cast<size_t>(n_q) * n_kv, 0.0);
        for (int i = 0; i < n_q; ++i)
            for (int j = 0; j < n_kv; ++j) {
                double s = 0.0;
                for (int l = 0; l < dk; ++l)
                    s += q[static_cast<size_t>(i) * d + h * dk + l] *
                         k[static_cast<size_t>(j) * d + h * dk + l];
                scores[static_cast<size_t>(i) * n_kv + j] = s * scale;
            }
        softmax_rows(scores, n_q, n_kv);
        for (int i = 0; i < n_q; ++i)
            for (int j = 0; j < n_kv; ++j) {
                const double p = scores[static_cast<size_t>(i) * n_kv + j];
                for (int l = 0; l < dk; ++l)
                    cat[static_cast<size_t>(i) * d + h * dk + l] +=
                        p * v[static_cast<size_t>(j) * d + h * dk + l];
            }
    }
    Mat out = matmul(cat, book.at(prefix + ".wo"), n_q, d, d);
    add_bias_rows(out, book.at(prefix + ".bo"), n_q, d);
    return out;
}

inline void residual_norm(Mat& x, const Mat& sub, const ParamBook& book,
                          const std::string& ln_prefix, int m, int n) {
    for (size_t i = 0; i < x.size(); ++i) x[i] += sub[i];
    layer_norm_rows(x, book.at(ln_prefix + ".g"), book.at(ln_prefix + ".b"), m, n);
}

inline Mat feed_forward(const Mat& x, int m, int d, int dff, const ParamBook& book,
                        const std::string& prefix) {
    Mat h = matmul(x, book.at(prefix + ".w1"), m, d, dff);
    add_bias_rows(h, book.at(prefix + ".b1"), m, dff);
    gelu_inplace(h);
    Mat out = matmul(h, book.at(prefix + ".w2"), m, dff, d);
    add_bias_rows(out, book.at(prefix + ".b2"), m, d);
    return out;
}

// Moving-average decomposition, replicate padding, mean over kernels.
inline void decompose(const Mat& x, int T, int D, const std::vector<int>& kernels, Mat& seasonal,
                      Mat& trend) {
    trend.assign(x.size(), 0.0);
    seasonal.resize(x.size());
    for (int k : kernels) {
        const int half = k / 2;
        for (int d = 0; d < D; ++d)
            for (int t = 0; t < T; ++t) {
                double acc = 0.0;
                for (int o = -half; o <= half; ++o) {
                    int idx = t + o;
                    idx = idx < 0 ? 0 : (idx >= T ? T - 1 : idx);
                    acc += x[static_cast<size_t>(idx) * D + d];
                }
                trend[static_cast<size_t>(t) * D + d] +=
                    acc / k / static_cast<double>(kernels.size());
            }
    }
    for (size_t i = 0; i < x.size(); ++i) seasonal[i] = x[i] - trend[i];
}

// Width-3 conv over time with replicate ends; maps laid out [(f*T+t)*D+d].
inline Mat conv3(const Mat& x, int T, int D, const Mat& k, const Mat& b, int c) {
    Mat out(static_cast<size_t>(c) * T * D);
    auto pick = [&](int t, int d) {
        t = t < 0 ? 0 : (t >= T ? T - 1 : t);
        return x[static_cast<size_t>(t) * D + d];
    };
    for (int f = 0; f < c; ++f)
        for (int t = 0; t < T; ++t)
            for (int d = 0; d < D; ++d)
                out[(static_cast<size_t>(f) * T + t) * D + d] =
                    k[static_cast<size_t>(f) * 3] * pick(t - 1, d) +
                    k[static_cast<size_t>(f) * 3 + 1] * pick(t, d) +
                    k[static_cast<size_t>(f) * 3 + 2] * pick(t + 1, d) + b[static_cast<size_t>(f)];
    return out;
}

// Patch tokens for one variable: row n, column f*p + tt; zero past T.
inline Mat tokens_for_var(const Mat& maps, int c, int T, int D, int p, int N, int d) {
    Mat tok(static_cast<size_t>(N) * c * p, 0.0);
    for (int n = 0; n < N; ++n)
        for (int f = 0; f < c; ++f)
            for (int tt = 0; tt < p; ++tt) {
                const int src = n * p + tt;
                if (src < T)
                    tok[static_cast<size_t>(n) * c * p + f * p + tt] =
                        maps[(static_cast<size_t>(f) * T + src) * D + d];
            }
    return tok;
}

/// Dense-attention forward pass over one window, matching the library's
/// dataflow: returns O x D predictions.
inline Mat forward(const dozer::DozerformerConfig& cfg, const ParamBook& book, const Mat& window) {
    const int I = cfg.I, L = cfg.L, O = cfg.O, D = cfg.D, p = cfg.p, c = cfg.c;
    const int d_model = cfg.d_model(), dff = cfg.d_ff_effective();
    const int n_enc = cfg.n_enc(), n_dec = cfg.n_dec();

    Mat seasonal, trend;
    decompose(window, I, D, cfg.kernels, seasonal, trend);

    // Trend branch: per-variable affine projection over time.
    Mat trend_pred(static_cast<size_t>(O) * D, 0.0);
    if (cfg.per_variable_trend) {
        for (int d = 0; d < D; ++d) {
            const Mat& w = book.at("trend." + std::to_string(d) + ".w");
            const Mat& b = book.at("trend." + std::to_string(d) + ".b");
            for (int tau = 0; tau < O; ++tau) {
                double acc = b[static_cast<size_t>(tau)];
                for (int i = 0; i < I; ++i)
                    acc += trend[static_cast<size_t>(i) * D + d] * w[static_cast<size_t>(i) * O + tau];
                trend_pred[static_cast<size_t>(tau) * D + d] = acc;
            }
        }
    } else {
        const Mat& w = book.at("trend.w");
        const Mat& b = book.at("trend.b");
        for (int d = 0; d < D; ++d)
            for (int tau = 0; tau < O; ++tau) {
                double acc = b[static_cast<size_t>(tau)];
                for (int i = 0; i < I; ++i)
                    acc += trend[static_cast<size_t>(i) * D + d] * w[static_cast<size_t>(i) * O + tau];
                trend_pred[static_cast<size_t>(tau) * D + d] = acc;
            }
    }

    // Seasonal branch.
    Mat dec_in(static_cast<size_t>(L + O) * D, 0.0);
    for (int t = 0; t < L; ++t)
        for (int d = 0; d < D; ++d)
            dec_in[static_cast<size_t>(t) * D + d] = seasonal[static_cast<size_t>(I - L + t) * D + d];

    Mat enc_maps = conv3(seasonal, I, D, book.at("embed.enc.k"), book.at("embed.enc.b"), c);
    Mat dec_maps = conv3(dec_in, L + O, D, book.at("embed.dec.k"), book.at("embed.dec.b"), c);

    Mat out(static_cast<size_t>(O) * D, 0.0);
    const Mat& head_w = book.at("head.w");
    const double head_b = book.at("head.b")[0];
    const int start = n_dec * p - O;

    for (int d = 0; d < D; ++d) {
        Mat x = tokens_for_var(enc_maps, c, I, D, p, n_enc, d);
        for (int l = 0; l < cfg.enc_layers; ++l) {
            const std::string prefix = "enc." + std::to_string(l);
            Mat a = full_attention(x, x, n_enc, n_enc, d_model, cfg.heads, book, prefix + ".att");
            residual_norm(x, a, book, prefix + ".ln1", n_enc, d_model);
            Mat f = feed_forward(x, n_enc, d_model, dff, book, prefix + ".ffn");
            residual_norm(x, f, book, prefix + ".ln2", n_enc, d_model);
        }
        Mat y = tokens_for_var(dec_maps, c, L + O, D, p, n_dec, d);
        for (int l = 0; l < cfg.dec_layers; ++l) {
            const std::string prefix = "dec." + std::to_string(l);
            Mat a = full_attention(y, y, n_dec, n_dec, d_model, cfg.heads, book, prefix + ".self");
            residual_norm(y, a, book, prefix + ".ln1", n_dec, d_model);
            Mat cr = full_attention(y, x, n_dec, n_enc, d_model, cfg.heads, book, prefix + ".cross");
            residual_norm(y, cr, book, prefix + ".ln2", n_dec, d_model);
            Mat f = feed_forward(y, n_dec, d_model, dff, book, prefix + ".ffn");
            residual_norm(y, f, book, prefix + ".ln3", n_dec, d_model);
        }
        for (int tau = 0; tau < O; ++tau) {
            const int n = (start + tau) / p, tt = (start + tau) % p;
            double acc = head_b;
            for (int f = 0; f < c; ++f)
                acc += head_w[static_cast<size_t>(f)] * y[static_cast<size_t>(n) * c * p + f * p + tt];
            out[static_cast<size_t>(tau) * D + d] = acc + trend_pred[static_cast<size_t>(tau) * D + d];
        }
    }
    return out;
}

}  // namespace refmodel
