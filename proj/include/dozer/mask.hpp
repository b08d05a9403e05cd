#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dozer/errors.hpp"

namespace dozer {

/// Hyperparameters of the three sparse attention components, measured in
/// patches: `w` is the local window (odd), `interval` the stride period,
/// `v` the starting key count of the growing cross window.
struct SparsityParams {
    int w = 3;
    int interval = 2;
    int v = 1;
    /// Anchor cross-stride keys at the sequence end instead of aligning them
    /// to the query's phase (experimental alternative).
    bool cross_stride_end_anchored = false;

    void validate() const {
        if (w < 1 || w % 2 == 0)
            throw ConfigError("SparsityParams: w must be an odd positive integer, got " +
                              std::to_string(w));
        if (interval < 1)
            throw ConfigError("SparsityParams: interval must be >= 1, got " +
                              std::to_string(interval));
        if (v < 1)
            throw ConfigError("SparsityParams: v must be >= 1, got " + std::to_string(v));
    }
};

/// Boolean support of an attention matrix over query x key patches.
class AttnMask {
public:
    AttnMask() = default;
    AttnMask(int rows, int cols, bool value = false) : rows_(rows), cols_(cols) {
        if (rows < 1 || cols < 1)
            throw ConfigError("AttnMask: dimensions must be positive, got " +
                              std::to_string(rows) + "x" + std::to_string(cols));
        bits_.assign(static_cast<size_t>(rows) * cols, value ? 1 : 0);
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }

    bool at(int i, int j) const { return bits_[static_cast<size_t>(i) * cols_ + j] != 0; }
    void set(int i, int j, bool value) {
        bits_[static_cast<size_t>(i) * cols_ + j] = value ? 1 : 0;
    }

    /// Number of allowed entries in row i.
    int row_count(int i) const {
        int n = 0;
        for (int j = 0; j < cols_; ++j) n += at(i, j) ? 1 : 0;
        return n;
    }

    /// Total allowed entries.
    long long count() const {
        long long n = 0;
        for (auto b : bits_) n += b;
        return n;
    }

    /// Returns true and sets `row` if some row has no allowed entry.
    bool find_empty_row(int& row) const {
        for (int i = 0; i < rows_; ++i) {
            if (row_count(i) == 0) {
                row = i;
                return true;
            }
        }
        return false;
    }

    static AttnMask full(int rows, int cols) { return AttnMask(rows, cols, true); }

    friend bool operator==(const AttnMask& a, const AttnMask& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.bits_ == b.bits_;
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<std::uint8_t> bits_;
};

/// Patch-grid coordinates shared by the cross-attention mask builders.
/// `t_patch` is the last encoder patch, the point at which forecasting starts.
struct CrossCoords {
    int n_enc = 0;
    int n_dec = 0;
    int label_patches = 0;
    int t_patch = 0;

    void validate() const {
        if (n_enc < 1 || n_dec < 1)
            throw ConfigError("CrossCoords: patch counts must be positive");
        if (label_patches < 0 || label_patches > n_dec)
            throw ConfigError("CrossCoords: label_patches out of range");
        if (t_patch != n_enc - 1)
            throw ConfigError("CrossCoords: t_patch must equal n_enc - 1");
    }

    int forecast_patches() const { return n_dec - label_patches; }

    static CrossCoords make(int n_enc, int n_dec, int label_patches) {
        CrossCoords c{n_enc, n_dec, label_patches, n_enc - 1};
        c.validate();
        return c;
    }
};

namespace detail {
inline void check_window(int w) {
    if (w < 1 || w % 2 == 0)
        throw ConfigError("window size must be an odd positive integer, got " +
                          std::to_string(w));
}
inline void check_interval(int interval) {
    if (interval < 1)
        throw ConfigError("stride interval must be >= 1, got " + std::to_string(interval));
}
inline long long ceil_div(long long a, long long b) { return (a + b - 1) / b; }
}  // namespace detail

/// Self-attention Local component: query i attends to keys within the
/// window, |i - j| <= floor(w/2).
inline AttnMask local_self_mask(int n, int w) {
    detail::check_window(w);
    const int half = w / 2;
    AttnMask m(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = std::max(0, i - half); j <= std::min(n - 1, i + half); ++j)
            m.set(i, j, true);
    return m;
}

/// Self-attention Stride component: query i attends to keys at multiples of
/// `interval` from it, (i - j) mod interval == 0.
inline AttnMask stride_self_mask(int n, int interval) {
    detail::check_interval(interval);
    AttnMask m(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = i % interval; j < n; j += interval) m.set(i, j, true);
    return m;
}

/// Cross-attention Local component: every decoder query attends to the most
/// recent encoder patches, 0 <= t_patch - j <= floor(w/2).
inline AttnMask local_cross_mask(const CrossCoords& coords, int w) {
    coords.validate();
    detail::check_window(w);
    const int half = w / 2;
    const int first = std::max(0, coords.t_patch - half);
    AttnMask m(coords.n_dec, coords.n_enc);
    for (int i = 0; i < coords.n_dec; ++i)
        for (int j = first; j <= coords.t_patch; ++j) m.set(i, j, true);
    return m;
}

/// Cross-attention Stride component. A key patch is allowed when it shares
/// the query's phase modulo `interval`; the query's absolute patch index is
/// (n_enc - label_patches) + i so that label-region queries line up with the
/// encoder patches they overlap. With `end_anchored`, keys are instead
/// counted backwards from the last encoder patch for every query.
inline AttnMask stride_cross_mask(const CrossCoords& coords, int interval,
                                  bool end_anchored = false) {
    coords.validate();
    detail::check_interval(interval);
    AttnMask m(coords.n_dec, coords.n_enc);
    for (int i = 0; i < coords.n_dec; ++i) {
        if (end_anchored) {
            for (int j = coords.t_patch; j >= 0; j -= interval) m.set(i, j, true);
        } else {
            const int abs_idx = (coords.n_enc - coords.label_patches) + i;
            for (int j = 0; j < coords.n_enc; ++j) {
                const int diff = abs_idx - j;
                if (((diff % interval) + interval) % interval == 0) m.set(i, j, true);
            }
        }
    }
    return m;
}

/// Cross-attention Vary component: the horizon-h forecast query attends to
/// the last min(v + h - 1, n_enc) encoder patches; label-region queries get
/// no keys (pre-union) since they precede the forecast start.
inline AttnMask vary_cross_mask(const CrossCoords& coords, int v) {
    coords.validate();
    if (v < 1) throw ConfigError("vary start size must be >= 1, got " + std::to_string(v));
    AttnMask m(coords.n_dec, coords.n_enc);
    for (int i = coords.label_patches; i < coords.n_dec; ++i) {
        const int horizon = i - coords.label_patches + 1;
        const int keys = std::min(v + horizon - 1, coords.n_enc);
        for (int j = coords.n_enc - keys; j < coords.n_enc; ++j) m.set(i, j, true);
    }
    return m;
}

/// Bitwise OR of equally shaped masks.
inline AttnMask union_masks(std::span<const AttnMask> masks) {
    if (masks.empty()) throw MaskError("union_masks: empty mask list");
    AttnMask out = masks[0];
    for (size_t k = 1; k < masks.size(); ++k) {
        const AttnMask& m = masks[k];
        if (m.rows() != out.rows() || m.cols() != out.cols())
            throw MaskError("union_masks: mask " + std::to_string(k) + " is " +
                            std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                            ", expected " + std::to_string(out.rows()) + "x" +
                            std::to_string(out.cols()));
        for (int i = 0; i < out.rows(); ++i)
            for (int j = 0; j < out.cols(); ++j)
                if (m.at(i, j)) out.set(i, j, true);
    }
    return out;
}

inline AttnMask union_masks(std::initializer_list<AttnMask> masks) {
    std::vector<AttnMask> v(masks);
    return union_masks(std::span<const AttnMask>(v));
}

/// Local + Stride self-attention support used by both encoder and decoder.
inline AttnMask dozer_self_mask(int n, const SparsityParams& sp) {
    sp.validate();
    return union_masks({local_self_mask(n, sp.w), stride_self_mask(n, sp.interval)});
}

/// Local + Stride + Vary cross-attention support.
inline AttnMask dozer_cross_mask(const CrossCoords& coords, const SparsityParams& sp) {
    sp.validate();
    return union_masks({local_cross_mask(coords, sp.w),
                        stride_cross_mask(coords, sp.interval, sp.cross_stride_end_anchored),
                        vary_cross_mask(coords, sp.v)});
}

/// Exact query-key pair accounting for one mask. `closed_form` is the
/// matching analytic bound when the caller has one (0 otherwise).
struct PairCountReport {
    long long counted = 0;
    long long full = 0;
    double ratio = 0.0;
    long long closed_form = 0;
};

inline PairCountReport count_pairs(const AttnMask& mask, long long closed_form = 0) {
    PairCountReport r;
    r.counted = mask.count();
    r.full = static_cast<long long>(mask.rows()) * mask.cols();
    r.ratio = static_cast<double>(r.counted) / static_cast<double>(r.full);
    r.closed_form = closed_form;
    return r;
}

/// Analytic pair-count bounds with s = ceil(N_enc / interval) stride keys
/// per query: self (w + s) * N_enc, cross (w + s) * N_dec plus the growing
/// window's (O/p)^2 / 2 + (v - 1) * O/p term. Upper bounds on the exact
/// union counts (the union deduplicates, windows clip at the edges).
struct ClosedFormPairs {
    long long self_pairs = 0;
    long long cross_pairs = 0;
};

inline ClosedFormPairs closed_form_pairs(int I, int L, int O, int p, const SparsityParams& sp) {
    sp.validate();
    if (I < 1 || p < 1 || L < 0 || O < 1)
        throw ConfigError("closed_form_pairs: I, O, p must be positive and L >= 0");
    const long long n_enc = detail::ceil_div(I, p);
    const long long n_dec = detail::ceil_div(L + O, p);
    const long long o_p = detail::ceil_div(O, p);
    const long long s = detail::ceil_div(n_enc, sp.interval);
    ClosedFormPairs r;
    r.self_pairs = (sp.w + s) * n_enc;
    r.cross_pairs = (sp.w + s) * n_dec + (o_p * o_p + 1) / 2 + (sp.v - 1) * o_p;
    return r;
}

/// Plain-text grid: one "rows cols" header line, then '#' (allowed) and
/// '.' (disallowed) per cell.
inline std::string mask_to_text(const AttnMask& mask) {
    std::string out = std::to_string(mask.rows()) + " " + std::to_string(mask.cols()) + "\n";
    out.reserve(out.size() + static_cast<size_t>(mask.rows()) * (mask.cols() + 1));
    for (int i = 0; i < mask.rows(); ++i) {
        for (int j = 0; j < mask.cols(); ++j) out.push_back(mask.at(i, j) ? '#' : '.');
        out.push_back('\n');
    }
    return out;
}

/// Binary PGM (P5), 255 = allowed, 0 = disallowed.
inline std::string mask_to_pgm(const AttnMask& mask) {
    std::string out = "P5\n" + std::to_string(mask.cols()) + " " + std::to_string(mask.rows()) +
                      "\n255\n";
    for (int i = 0; i < mask.rows(); ++i)
        for (int j = 0; j < mask.cols(); ++j)
            out.push_back(mask.at(i, j) ? static_cast<char>(255) : static_cast<char>(0));
    return out;
}

}  // namespace dozer
