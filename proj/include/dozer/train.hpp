#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dozer/data.hpp"
#include "dozer/errors.hpp"
#include "dozer/model.hpp"
#include "dozer/tensor.hpp"

namespace dozer {

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam moment buffers, one pair per parameter, aligned with the model's
/// named-parameter order.
struct OptimizerState {
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double base_lr = 1e-3;
    long long step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    static OptimizerState init(const std::vector<std::pair<std::string, Tensor>>& params,
                               double base_lr) {
        OptimizerState s;
        s.base_lr = base_lr;
        s.m.reserve(params.size());
        s.v.reserve(params.size());
        for (const auto& [name, t] : params) {
            s.m.emplace_back(t.numel(), 0.0);
            s.v.emplace_back(t.numel(), 0.0);
        }
        return s;
    }
};

/// One bias-corrected Adam update at the given learning rate. All gradients
/// are validated before anything mutates, so a non-finite gradient leaves
/// parameters and moments untouched.
inline void adam_step(std::vector<std::pair<std::string, Tensor>>& params,
                      OptimizerState& state, double lr) {
    if (params.size() != state.m.size())
        throw ConfigError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                          " tensors, model has " + std::to_string(params.size()));
    for (auto& [name, t] : params) {
        for (double g : t.grad())
            if (!std::isfinite(g))
                throw NumericError("adam_step: non-finite gradient in parameter '" + name + "'");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (size_t k = 0; k < params.size(); ++k) {
        auto values = params[k].second.values_mut();
        auto grads = params[k].second.grad();
        auto& m = state.m[k];
        auto& v = state.v[k];
        for (size_t i = 0; i < values.size(); ++i) {
            const double g = grads[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            values[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

/// Cosine annealing: lr_max at step 0 falling to lr_min at total_steps.
inline double cosine_lr(long long step, long long total_steps, double lr_max, double lr_min) {
    if (total_steps < 1) throw ConfigError("cosine_lr: total_steps must be positive");
    if (step < 0 || step > total_steps)
        throw ConfigError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                          std::to_string(total_steps) + "]");
    constexpr double kPi = 3.14159265358979323846;
    return lr_min + 0.5 * (lr_max - lr_min) *
                        (1.0 + std::cos(kPi * static_cast<double>(step) / total_steps));
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricsReport {
    double mse = 0.0;
    double mae = 0.0;
    double mase = 0.0;
    double qk_ratio_self = 0.0;
    double qk_ratio_cross = 0.0;
    long long params = 0;
    long long flops_estimate = 0;
    double wall_seconds = 0.0;
};

namespace detail {
inline std::string fmt_g17(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}
}  // namespace detail

/// Flat key=value lines. wall_seconds is intentionally excluded so the text
/// is byte-identical across repeated seeded runs; timing lives in the log.
inline std::string metrics_to_kv(const MetricsReport& r) {
    std::string out;
    out += "mse=" + detail::fmt_g17(r.mse) + "\n";
    out += "mae=" + detail::fmt_g17(r.mae) + "\n";
    out += "mase=" + detail::fmt_g17(r.mase) + "\n";
    out += "qk_ratio_self=" + detail::fmt_g17(r.qk_ratio_self) + "\n";
    out += "qk_ratio_cross=" + detail::fmt_g17(r.qk_ratio_cross) + "\n";
    out += "params=" + std::to_string(r.params) + "\n";
    out += "flops_estimate=" + std::to_string(r.flops_estimate) + "\n";
    return out;
}

/// Machine-readable record with the same fields (and the same omission).
inline nlohmann::json metrics_to_json(const MetricsReport& r) {
    nlohmann::json j;
    j["mse"] = r.mse;
    j["mae"] = r.mae;
    j["mase"] = r.mase;
    j["qk_ratio_self"] = r.qk_ratio_self;
    j["qk_ratio_cross"] = r.qk_ratio_cross;
    j["params"] = r.params;
    j["flops_estimate"] = r.flops_estimate;
    return j;
}

namespace detail {
inline void fill_cost_fields(MetricsReport& r, const Dozerformer& model) {
    const auto& cfg = model.config();
    CostReport cost = Dozerformer::model_cost_report(cfg);
    r.params = cost.params;
    r.flops_estimate = cost.flops_estimate;
    const PairCountReport se = count_pairs(model.enc_self_mask());
    const PairCountReport sd = count_pairs(model.dec_self_mask());
    const PairCountReport cr = count_pairs(model.cross_mask());
    const long long self_counted = cfg.enc_layers * se.counted + cfg.dec_layers * sd.counted;
    const long long self_full = cfg.enc_layers * se.full + cfg.dec_layers * sd.full;
    r.qk_ratio_self = static_cast<double>(self_counted) / static_cast<double>(self_full);
    r.qk_ratio_cross = static_cast<double>(cr.counted) / static_cast<double>(cr.full);
}

inline Series window_series(const std::vector<double>& values, int T, int D) {
    Series s;
    s.T = T;
    s.D = D;
    s.values = values;
    return s;
}
}  // namespace detail

/// Pooled MSE/MAE over every horizon step and variable of every window,
/// plus the scaled absolute error against a one-step naive denominator
/// computed on the training split. A zero denominator yields a NaN sentinel.
inline MetricsReport evaluate(Dozerformer& model, const std::vector<Window>& windows,
                              double naive_denom) {
    if (windows.empty()) throw DataError("evaluate: no windows to score");
    const auto t0 = std::chrono::steady_clock::now();
    const auto& cfg = model.config();
    double se = 0.0, ae = 0.0;
    long long count = 0;
    for (const Window& w : windows) {
        Series pred = model.predict(detail::window_series(w.input, cfg.I, cfg.D));
        for (size_t i = 0; i < w.target.size(); ++i) {
            const double d = pred.values[i] - w.target[i];
            se += d * d;
            ae += std::abs(d);
            ++count;
        }
    }
    MetricsReport r;
    r.mse = se / static_cast<double>(count);
    r.mae = ae / static_cast<double>(count);
    r.mase = naive_denom > 0.0 ? r.mae / naive_denom
                               : std::numeric_limits<double>::quiet_NaN();
    detail::fill_cost_fields(r, model);
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Windows and scaling for one dataset, ready to train on.
struct ForecastData {
    Splits splits;
    std::vector<Window> train_w, val_w, test_w;
    double naive_denom = 0.0;

    static ForecastData make(const Series& raw, const DozerformerConfig& cfg,
                             double train_frac = 0.7, double val_frac = 0.1,
                             int train_stride = 1) {
        ForecastData d;
        d.splits = split_and_standardize(raw, train_frac, val_frac);
        d.train_w = sample_windows(d.splits.train, cfg.I, cfg.O, train_stride);
        d.val_w = sample_windows(d.splits.val, cfg.I, cfg.O, 1);
        d.test_w = sample_windows(d.splits.test, cfg.I, cfg.O, 1);
        auto check = [&](const std::vector<Window>& w, const char* split, int rows) {
            if (w.empty())
                throw DataError(std::string("ForecastData: ") + split + " split has " +
                                std::to_string(rows) + " rows, need at least " +
                                std::to_string(cfg.I + cfg.O) + " for one window");
        };
        check(d.train_w, "train", d.splits.train.T);
        check(d.val_w, "val", d.splits.val.T);
        check(d.test_w, "test", d.splits.test.T);
        d.naive_denom = naive_abs_diff_mean(d.splits.train);
        return d;
    }
};

struct TrainOptions {
    int epochs = 10;
    int batch = 16;
    double lr = 1e-3;
    double lr_min = 0.0;
    std::uint64_t seed = 1;
};

struct TrainOutcome {
    MetricsReport val_report;            // of the parameters left in the model
    std::vector<std::string> epoch_log;  // one line per epoch
    int best_epoch = -1;
    long long steps = 0;
    bool diverged = false;
    double wall_seconds = 0.0;
};

namespace detail {
inline double validation_mse(Dozerformer& model, const std::vector<Window>& windows) {
    double se = 0.0;
    long long count = 0;
    const auto& cfg = model.config();
    for (const Window& w : windows) {
        Series pred = model.predict(window_series(w.input, cfg.I, cfg.D));
        for (size_t i = 0; i < w.target.size(); ++i) {
            const double d = pred.values[i] - w.target[i];
            se += d * d;
            ++count;
        }
    }
    return se / static_cast<double>(count);
}

inline std::vector<std::vector<double>> snapshot_params(
    const std::vector<std::pair<std::string, Tensor>>& params) {
    std::vector<std::vector<double>> snap;
    snap.reserve(params.size());
    for (const auto& [name, t] : params)
        snap.emplace_back(t.values().begin(), t.values().end());
    return snap;
}

inline void restore_params(std::vector<std::pair<std::string, Tensor>>& params,
                           const std::vector<std::vector<double>>& snap) {
    for (size_t k = 0; k < params.size(); ++k) {
        auto values = params[k].second.values_mut();
        std::copy(snap[k].begin(), snap[k].end(), values.begin());
    }
}
}  // namespace detail

/// Minimizes MSE over the training windows with Adam under cosine annealing,
/// tracking validation MSE each epoch and restoring the best-validation
/// parameters at the end. Deterministic for a fixed seed. If the loss or a
/// gradient goes non-finite, training stops with the last finite parameters.
inline TrainOutcome train(Dozerformer& model, const ForecastData& data, const TrainOptions& opt) {
    if (opt.epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (opt.batch < 1) throw ConfigError("train: batch must be >= 1");
    if (data.train_w.empty()) throw DataError("train: no training windows");
    if (data.val_w.empty()) throw DataError("train: no validation windows");

    const auto t0 = std::chrono::steady_clock::now();
    const auto& cfg = model.config();
    auto params = model.named_params();  // handles share the model's nodes
    OptimizerState state = OptimizerState::init(params, opt.lr);
    model.reseed_dropout(opt.seed);

    const long long chunks = (static_cast<long long>(data.train_w.size()) + opt.batch - 1) / opt.batch;
    const long long total_steps = std::max<long long>(1, chunks * opt.epochs);

    std::mt19937_64 shuffle_rng(opt.seed);
    std::vector<size_t> order(data.train_w.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainOutcome out;
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> best_snapshot = detail::snapshot_params(params);
    {
        // Epoch 0 baseline so a 0-epoch run still reports a real number.
        best_val = detail::validation_mse(model, data.val_w);
        out.best_epoch = -1;
    }

    for (int epoch = 0; epoch < opt.epochs && !out.diverged; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_loss = 0.0;
        long long epoch_batches = 0;
        double lr = state.base_lr;
        for (long long b = 0; b < chunks && !out.diverged; ++b) {
            const size_t lo = static_cast<size_t>(b) * opt.batch;
            const size_t hi = std::min(lo + opt.batch, order.size());
            model.zero_grad();
            Tensor loss;
            for (size_t i = lo; i < hi; ++i) {
                const Window& w = data.train_w[order[i]];
                Tensor pred = model.forward(detail::window_series(w.input, cfg.I, cfg.D), true);
                Tensor target = Tensor::from_values({cfg.O, cfg.D}, w.target);
                Tensor diff = sub(pred, target);
                Tensor l = mean(mul(diff, diff));
                loss = loss.defined() ? add(loss, l) : l;
            }
            loss = scale(loss, 1.0 / static_cast<double>(hi - lo));
            const double loss_value = loss.scalar();
            if (!std::isfinite(loss_value)) {
                out.diverged = true;
                out.epoch_log.push_back("epoch=" + std::to_string(epoch) +
                                        " diverged: non-finite loss, keeping last finite parameters");
                break;
            }
            loss.backward();
            lr = cosine_lr(out.steps, total_steps, opt.lr, opt.lr_min);
            try {
                adam_step(params, state, lr);
            } catch (const NumericError&) {
                out.diverged = true;
                out.epoch_log.push_back("epoch=" + std::to_string(epoch) +
                                        " diverged: non-finite gradient, keeping last finite parameters");
                break;
            }
            ++out.steps;
            epoch_loss += loss_value;
            ++epoch_batches;
        }
        if (out.diverged) break;
        const double train_loss = epoch_loss / static_cast<double>(std::max<long long>(1, epoch_batches));
        const double val_mse = detail::validation_mse(model, data.val_w);
        if (val_mse < best_val) {
            best_val = val_mse;
            best_snapshot = detail::snapshot_params(params);
            out.best_epoch = epoch;
        }
        out.epoch_log.push_back("epoch=" + std::to_string(epoch) +
                                " step=" + std::to_string(out.steps) +
                                " lr=" + detail::fmt_g17(lr) +
                                " train_loss=" + detail::fmt_g17(train_loss) +
                                " val_mse=" + detail::fmt_g17(val_mse));
    }

    detail::restore_params(params, best_snapshot);
    out.val_report = evaluate(model, data.val_w, data.naive_denom);
    out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

}  // namespace dozer
