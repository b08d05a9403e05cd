#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dozer/errors.hpp"
#include "dozer/mask.hpp"
#include "dozer/tensor.hpp"

namespace dozer {

/// Head geometry for multi-head attention. d_model must split evenly.
struct HeadConfig {
    int d_model = 64;
    int heads = 4;

    void validate() const {
        if (d_model < 1) throw ConfigError("HeadConfig: d_model must be positive");
        if (heads < 1) throw ConfigError("HeadConfig: heads must be positive");
        if (d_model % heads != 0)
            throw ConfigError("HeadConfig: d_model " + std::to_string(d_model) +
                              " not divisible by heads " + std::to_string(heads));
    }
    int d_k() const { return d_model / heads; }
};

/// softmax(Q K^T / sqrt(d_k), mask) V for one head. Scores outside the mask
/// never reach the softmax denominator.
inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   const AttnMask& mask) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw ShapeError("scaled_dot_attention: expected rank-2 q, k, v");
    if (q.dim(1) != k.dim(1))
        throw ShapeError("scaled_dot_attention: q width " + std::to_string(q.dim(1)) +
                         " vs k width " + std::to_string(k.dim(1)));
    if (k.dim(0) != v.dim(0))
        throw ShapeError("scaled_dot_attention: k rows " + std::to_string(k.dim(0)) +
                         " vs v rows " + std::to_string(v.dim(0)));
    if (mask.rows() != q.dim(0) || mask.cols() != k.dim(0))
        throw MaskError("scaled_dot_attention: mask " + std::to_string(mask.rows()) + "x" +
                        std::to_string(mask.cols()) + " does not cover " +
                        std::to_string(q.dim(0)) + " queries x " + std::to_string(k.dim(0)) +
                        " keys");
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_dk);
    return matmul(masked_softmax(scores, mask), v);
}

/// Projection weights for one attention block. Biases are row vectors.
struct AttentionParams {
    Tensor wq, bq;
    Tensor wk, bk;
    Tensor wv, bv;
    Tensor wo, bo;

    static AttentionParams init(const HeadConfig& cfg, std::mt19937_64& rng) {
        cfg.validate();
        const int d = cfg.d_model;
        AttentionParams p;
        p.wq = Tensor::parameter({d, d}, d, rng);
        p.bq = Tensor::parameter({d}, d, rng);
        p.wk = Tensor::parameter({d, d}, d, rng);
        p.bk = Tensor::parameter({d}, d, rng);
        p.wv = Tensor::parameter({d, d}, d, rng);
        p.bv = Tensor::parameter({d}, d, rng);
        p.wo = Tensor::parameter({d, d}, d, rng);
        p.bo = Tensor::parameter({d}, d, rng);
        return p;
    }

    std::vector<Tensor> all() const { return {wq, bq, wk, bk, wv, bv, wo, bo}; }
};

/// Projects queries/keys/values, runs every head against the same mask,
/// concatenates the heads and applies the output projection.
inline Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv,
                                   const AttentionParams& p, const HeadConfig& cfg,
                                   const AttnMask& mask) {
    cfg.validate();
    if (x_q.rank() != 2 || x_kv.rank() != 2)
        throw ShapeError("multi_head_attention: expected rank-2 inputs");
    if (x_q.dim(1) != cfg.d_model || x_kv.dim(1) != cfg.d_model)
        throw ShapeError("multi_head_attention: input width " + std::to_string(x_q.dim(1)) +
                         "/" + std::to_string(x_kv.dim(1)) + " vs d_model " +
                         std::to_string(cfg.d_model));
    Tensor q = add_row_bias(matmul(x_q, p.wq), p.bq);
    Tensor k = add_row_bias(matmul(x_kv, p.wk), p.bk);
    Tensor v = add_row_bias(matmul(x_kv, p.wv), p.bv);
    const int dk = cfg.d_k();
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(cfg.heads));
    for (int h = 0; h < cfg.heads; ++h) {
        Tensor qh = slice_cols(q, h * dk, dk);
        Tensor kh = slice_cols(k, h * dk, dk);
        Tensor vh = slice_cols(v, h * dk, dk);
        heads.push_back(scaled_dot_attention(qh, kh, vh, mask));
    }
    Tensor cat = cfg.heads == 1 ? heads[0] : concat_cols(heads);
    return add_row_bias(matmul(cat, p.wo), p.bo);
}

}  // namespace dozer
