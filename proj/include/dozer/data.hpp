#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dozer/errors.hpp"

namespace dozer {

/// A multivariate series: T time steps by D variables, row-major.
struct Series {
    int T = 0;
    int D = 0;
    std::vector<double> values;
    std::vector<std::string> timestamps;

    double at(int t, int d) const { return values[static_cast<size_t>(t) * D + d]; }
    double& at(int t, int d) { return values[static_cast<size_t>(t) * D + d]; }

    Series rows(int t0, int count) const {
        Series out;
        out.T = count;
        out.D = D;
        out.values.assign(values.begin() + static_cast<size_t>(t0) * D,
                          values.begin() + static_cast<size_t>(t0 + count) * D);
        if (!timestamps.empty())
            out.timestamps.assign(timestamps.begin() + t0, timestamps.begin() + t0 + count);
        return out;
    }
};

namespace detail {
inline std::string format_hour(long long epoch_seconds) {
    std::time_t t = static_cast<std::time_t>(epoch_seconds);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%d %H:%M:%S", &tm);
    return buf;
}
}  // namespace detail

/// Sinusoid plus linear drift plus Gaussian noise; variable d is phase
/// shifted by 2*pi*d/D. Timestamps are hourly from 2020-01-01 00:00:00.
inline Series synth_series(int T, int D, double period, double slope, double noise_sigma,
                           std::uint64_t seed) {
    if (T < 1 || D < 1) throw ConfigError("synth_series: T and D must be positive");
    if (period < 2.0) throw ConfigError("synth_series: period must be at least 2");
    if (noise_sigma < 0.0) throw ConfigError("synth_series: noise_sigma must be >= 0");
    constexpr long long kEpoch2020 = 1577836800;  // 2020-01-01 00:00:00 UTC
    constexpr double kTwoPi = 6.283185307179586477;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    Series s;
    s.T = T;
    s.D = D;
    s.values.resize(static_cast<size_t>(T) * D);
    s.timestamps.reserve(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
        s.timestamps.push_back(detail::format_hour(kEpoch2020 + 3600LL * t));
        for (int d = 0; d < D; ++d) {
            const double phase = kTwoPi * d / D;
            double v = std::sin(kTwoPi * t / period + phase) + slope * t;
            if (noise_sigma > 0.0) v += noise_sigma * noise(rng);
            s.at(t, d) = v;
        }
    }
    return s;
}

/// Parses a CSV whose header row is "date,<name>,..." and whose first column
/// is an opaque timestamp string. Failures name the offending row and column
/// (1-based, header is row 1).
inline Series load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("load_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError("load_csv: " + path + " is empty");
    int cols = 1;
    for (char ch : line)
        if (ch == ',') ++cols;
    if (cols < 2)
        throw DataError("load_csv: " + path + " header has no value columns");

    Series s;
    s.D = cols - 1;
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        size_t pos = 0;
        int col = 0;
        while (col < cols) {
            size_t next = line.find(',', pos);
            std::string field = line.substr(pos, next == std::string::npos
                                                     ? std::string::npos
                                                     : next - pos);
            if (col == 0) {
                s.timestamps.push_back(field);
            } else {
                double v = 0.0;
                auto [p, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
                if (ec != std::errc() || p != field.data() + field.size())
                    throw DataError("load_csv: " + path + " row " + std::to_string(row) +
                                    " column " + std::to_string(col + 1) +
                                    ": cannot parse '" + field + "' as a number");
                if (!std::isfinite(v))
                    throw DataError("load_csv: " + path + " row " + std::to_string(row) +
                                    " column " + std::to_string(col + 1) +
                                    ": non-finite value '" + field + "'");
                s.values.push_back(v);
            }
            ++col;
            if (next == std::string::npos) break;
            pos = next + 1;
        }
        if (col != cols)
            throw DataError("load_csv: " + path + " row " + std::to_string(row) + " has " +
                            std::to_string(col) + " fields, expected " + std::to_string(cols));
        ++s.T;
    }
    if (s.T == 0) throw DataError("load_csv: " + path + " has no data rows");
    return s;
}

inline void save_csv(const Series& s, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("save_csv: cannot open " + path + " for writing");
    out << "date";
    for (int d = 0; d < s.D; ++d) out << ",var_" << d;
    out << "\n";
    char buf[32];
    for (int t = 0; t < s.T; ++t) {
        if (t < static_cast<int>(s.timestamps.size())) out << s.timestamps[t];
        else out << t;
        for (int d = 0; d < s.D; ++d) {
            std::snprintf(buf, sizeof(buf), "%.12g", s.at(t, d));
            out << ',' << buf;
        }
        out << "\n";
    }
}

/// Per-variable affine transform fit on the training rows. Variables that
/// are constant in training fall back to a divisor floor so the transform
/// stays invertible.
struct Scaler {
    std::vector<double> mean;
    std::vector<double> stdev;
    std::vector<int> degenerate;  // variables whose train stdev hit the floor
    static constexpr double kMinStdev = 1e-8;

    static Scaler fit(const Series& train) {
        if (train.T < 1) throw DataError("Scaler::fit: empty training split");
        Scaler sc;
        sc.mean.assign(static_cast<size_t>(train.D), 0.0);
        sc.stdev.assign(static_cast<size_t>(train.D), 0.0);
        for (int d = 0; d < train.D; ++d) {
            double m = 0.0;
            for (int t = 0; t < train.T; ++t) m += train.at(t, d);
            m /= train.T;
            double var = 0.0;
            for (int t = 0; t < train.T; ++t) {
                const double x = train.at(t, d) - m;
                var += x * x;
            }
            var /= train.T;
            sc.mean[d] = m;
            const double sd = std::sqrt(var);
            if (sd < kMinStdev) sc.degenerate.push_back(d);
            sc.stdev[d] = std::max(sd, kMinStdev);
        }
        return sc;
    }

    void transform(Series& s) const {
        if (s.D != static_cast<int>(mean.size()))
            throw DataError("Scaler::transform: series has " + std::to_string(s.D) +
                            " variables, scaler has " + std::to_string(mean.size()));
        for (int t = 0; t < s.T; ++t)
            for (int d = 0; d < s.D; ++d) s.at(t, d) = (s.at(t, d) - mean[d]) / stdev[d];
    }

    void inverse(Series& s) const {
        if (s.D != static_cast<int>(mean.size()))
            throw DataError("Scaler::inverse: series has " + std::to_string(s.D) +
                            " variables, scaler has " + std::to_string(mean.size()));
        for (int t = 0; t < s.T; ++t)
            for (int d = 0; d < s.D; ++d) s.at(t, d) = s.at(t, d) * stdev[d] + mean[d];
    }
};

/// Chronological train/val/test split, standardized with statistics from the
/// training rows only. Sizes are floored; the remainder goes to test.
struct Splits {
    Series train, val, test;
    Scaler scaler;
};

inline Splits split_and_standardize(const Series& s, double train_frac = 0.7,
                                    double val_frac = 0.1) {
    if (train_frac <= 0.0 || val_frac <= 0.0 || train_frac + val_frac >= 1.0)
        throw ConfigError("split_and_standardize: fractions must be positive and sum below 1");
    const int n_train = static_cast<int>(std::floor(s.T * train_frac));
    const int n_val = static_cast<int>(std::floor(s.T * val_frac));
    const int n_test = s.T - n_train - n_val;
    if (n_train < 1 || n_val < 1 || n_test < 1)
        throw DataError("split_and_standardize: " + std::to_string(s.T) +
                        " rows leave an empty split (" + std::to_string(n_train) + "/" +
                        std::to_string(n_val) + "/" + std::to_string(n_test) + ")");
    Splits sp;
    sp.train = s.rows(0, n_train);
    sp.val = s.rows(n_train, n_val);
    sp.test = s.rows(n_train + n_val, n_test);
    sp.scaler = Scaler::fit(sp.train);
    sp.scaler.transform(sp.train);
    sp.scaler.transform(sp.val);
    sp.scaler.transform(sp.test);
    return sp;
}

/// One supervised example: I history rows and the O rows that follow.
struct Window {
    std::vector<double> input;   // I x D, row-major
    std::vector<double> target;  // O x D, row-major
    int origin = 0;              // index of the first history row in its split
};

/// Slides a window of I+O rows with the given stride. Yields exactly
/// floor((T - I - O) / stride) + 1 windows, or none (with a warning) when
/// the split is too short.
inline std::vector<Window> sample_windows(const Series& s, int I, int O, int stride = 1) {
    if (I < 1 || O < 1) throw ConfigError("sample_windows: I and O must be positive");
    if (stride < 1) throw ConfigError("sample_windows: stride must be positive");
    if (s.T < I + O) {
        std::cerr << "warning: sample_windows: split has " << s.T << " rows, need at least "
                  << I + O << " for one window\n";
        return {};
    }
    const int count = (s.T - I - O) / stride + 1;
    std::vector<Window> out;
    out.reserve(static_cast<size_t>(count));
    for (int w = 0; w < count; ++w) {
        const int t0 = w * stride;
        Window win;
        win.origin = t0;
        win.input.assign(s.values.begin() + static_cast<size_t>(t0) * s.D,
                         s.values.begin() + static_cast<size_t>(t0 + I) * s.D);
        win.target.assign(s.values.begin() + static_cast<size_t>(t0 + I) * s.D,
                          s.values.begin() + static_cast<size_t>(t0 + I + O) * s.D);
        out.push_back(std::move(win));
    }
    return out;
}

/// Mean absolute one-step difference over a split; the denominator of the
/// scaled absolute error metric.
inline double naive_abs_diff_mean(const Series& s) {
    if (s.T < 2) throw DataError("naive_abs_diff_mean: need at least 2 rows");
    double acc = 0.0;
    for (int t = 1; t < s.T; ++t)
        for (int d = 0; d < s.D; ++d) acc += std::abs(s.at(t, d) - s.at(t - 1, d));
    return acc / (static_cast<double>(s.T - 1) * s.D);
}

}  // namespace dozer
