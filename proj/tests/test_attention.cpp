#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <random>

#include "dozer/attention.hpp"

using namespace dozer;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    std::vector<double> v(detail::shape_numel(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor::from_values(std::move(shape), std::move(v));
}

AttentionParams identity_params(int d) {
    AttentionParams p;
    std::vector<double> eye(static_cast<size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i) eye[static_cast<size_t>(i) * d + i] = 1.0;
    p.wq = Tensor::from_values({d, d}, eye);
    p.wk = Tensor::from_values({d, d}, eye);
    p.wv = Tensor::from_values({d, d}, eye);
    p.wo = Tensor::from_values({d, d}, std::move(eye));
    p.bq = Tensor::zeros({d});
    p.bk = Tensor::zeros({d});
    p.bv = Tensor::zeros({d});
    p.bo = Tensor::zeros({d});
    return p;
}

}  // namespace

TEST_CASE("scaled dot attention matches the hand-worked 1x2 case") {
    // scores = [1/sqrt(2), 0], softmax weights frozen from a reference
    // evaluation, output = weights * v.
    Tensor q = Tensor::from_values({1, 2}, {1, 0});
    Tensor k = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    Tensor v = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    Tensor out = scaled_dot_attention(q, k, v, AttnMask::full(1, 2));
    REQUIRE_THAT(out.values()[0], Catch::Matchers::WithinAbs(1.6604769013466862, 1e-14));
    REQUIRE_THAT(out.values()[1], Catch::Matchers::WithinAbs(2.6604769013466862, 1e-14));
}

TEST_CASE("a one-key-per-row mask copies value rows through") {
    std::mt19937_64 rng(3);
    Tensor q = random_tensor({4, 3}, rng);
    Tensor k = random_tensor({4, 3}, rng);
    Tensor v = random_tensor({4, 3}, rng);
    AttnMask diag(4, 4);
    for (int i = 0; i < 4; ++i) diag.set(i, i, true);
    Tensor out = scaled_dot_attention(q, k, v, diag);
    for (size_t i = 0; i < v.numel(); ++i) REQUIRE(out.values()[i] == v.values()[i]);
}

TEST_CASE("zero values produce zero attention output") {
    std::mt19937_64 rng(4);
    Tensor q = random_tensor({3, 2}, rng);
    Tensor k = random_tensor({5, 2}, rng);
    Tensor v = Tensor::zeros({5, 2});
    Tensor out = scaled_dot_attention(q, k, v, AttnMask::full(3, 5));
    for (double x : out.values()) REQUIRE(x == 0.0);
}

TEST_CASE("attention rejects inconsistent shapes and masks") {
    Tensor q = Tensor::zeros({2, 3});
    Tensor k = Tensor::zeros({4, 3});
    Tensor v = Tensor::zeros({4, 3});
    REQUIRE_THROWS_AS(scaled_dot_attention(q, Tensor::zeros({4, 2}), v, AttnMask::full(2, 4)),
                      ShapeError);
    REQUIRE_THROWS_AS(scaled_dot_attention(q, k, Tensor::zeros({3, 3}), AttnMask::full(2, 4)),
                      ShapeError);
    REQUIRE_THROWS_MATCHES(scaled_dot_attention(q, k, v, AttnMask::full(2, 3)), MaskError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("2x3")));
    AttnMask hole = AttnMask::full(2, 4);
    for (int j = 0; j < 4; ++j) hole.set(1, j, false);
    REQUIRE_THROWS_MATCHES(scaled_dot_attention(q, k, v, hole), MaskError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("row 1")));
}

TEST_CASE("head config validation") {
    REQUIRE_NOTHROW(HeadConfig{8, 4}.validate());
    REQUIRE(HeadConfig{8, 4}.d_k() == 2);
    REQUIRE_THROWS_MATCHES((HeadConfig{10, 4}.validate()), ConfigError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("10") &&
                               Catch::Matchers::ContainsSubstring("4")));
    REQUIRE_THROWS_AS((HeadConfig{0, 1}.validate()), ConfigError);
    REQUIRE_THROWS_AS((HeadConfig{8, 0}.validate()), ConfigError);
}

TEST_CASE("single head with identity projections reduces to scaled dot attention") {
    std::mt19937_64 rng(7);
    Tensor x_q = random_tensor({3, 4}, rng);
    Tensor x_kv = random_tensor({5, 4}, rng);
    AttnMask mask = AttnMask::full(3, 5);
    Tensor via_mha = multi_head_attention(x_q, x_kv, identity_params(4), HeadConfig{4, 1}, mask);
    Tensor direct = scaled_dot_attention(x_q, x_kv, x_kv, mask);
    for (size_t i = 0; i < direct.numel(); ++i)
        REQUIRE(via_mha.values()[i] == direct.values()[i]);
}

TEST_CASE("multi-head output is finite and well-shaped across head counts") {
    std::mt19937_64 rng(11);
    Tensor x_q = random_tensor({6, 8}, rng);
    Tensor x_kv = random_tensor({9, 8}, rng);
    AttnMask mask = AttnMask::full(6, 9);
    for (int heads : {1, 2, 4, 8}) {
        std::mt19937_64 prng(100 + heads);
        AttentionParams p = AttentionParams::init(HeadConfig{8, heads}, prng);
        Tensor out = multi_head_attention(x_q, x_kv, p, HeadConfig{8, heads}, mask);
        REQUIRE(out.dim(0) == 6);
        REQUIRE(out.dim(1) == 8);
        for (double x : out.values()) REQUIRE(std::isfinite(x));
    }
}

TEST_CASE("every head sees the same mask") {
    // Key 1 is disallowed for every query, so its x_kv row must be inert in
    // every head: perturbing it cannot change a single output bit.
    std::mt19937_64 rng(13);
    Tensor x_q = random_tensor({2, 6}, rng);
    std::vector<double> kv(3 * 6);
    for (auto& x : kv) x = std::uniform_real_distribution<double>(-1, 1)(rng);
    AttnMask mask(2, 3);
    mask.set(0, 0, true);
    mask.set(0, 2, true);
    mask.set(1, 0, true);
    mask.set(1, 2, true);
    std::mt19937_64 prng(5);
    AttentionParams p = AttentionParams::init(HeadConfig{6, 2}, prng);

    Tensor base = multi_head_attention(x_q, Tensor::from_values({3, 6}, kv),
                                       p, HeadConfig{6, 2}, mask);
    for (int f = 0; f < 6; ++f) kv[6 + f] += 37.5;  // rewrite the masked key row
    Tensor poked = multi_head_attention(x_q, Tensor::from_values({3, 6}, kv),
                                        p, HeadConfig{6, 2}, mask);
    for (size_t i = 0; i < base.numel(); ++i)
        REQUIRE(base.values()[i] == poked.values()[i]);
}

TEST_CASE("a saturated sparse mask reproduces full attention exactly") {
    // With w >= 2n-1 the local window covers every pair, so the sparse mask
    // equals the all-true mask and the two attention runs are identical.
    for (int n : {2, 4, 6}) {
        SparsityParams sp{2 * n - 1, 1, 1, false};
        AttnMask sparse = dozer_self_mask(n, sp);
        REQUIRE(sparse == AttnMask::full(n, n));

        std::mt19937_64 rng(20 + n);
        Tensor x = random_tensor({n, 4}, rng);
        std::mt19937_64 prng(30 + n);
        AttentionParams p = AttentionParams::init(HeadConfig{4, 2}, prng);
        Tensor with_sparse = multi_head_attention(x, x, p, HeadConfig{4, 2}, sparse);
        Tensor with_full = multi_head_attention(x, x, p, HeadConfig{4, 2},
                                                AttnMask::full(n, n));
        for (size_t i = 0; i < with_sparse.numel(); ++i)
            REQUIRE(with_sparse.values()[i] == with_full.values()[i]);
    }
}

TEST_CASE("full attention is invariant to key reordering") {
    std::mt19937_64 rng(17);
    Tensor q = random_tensor({3, 4}, rng);
    Tensor k = random_tensor({5, 4}, rng);
    Tensor v = random_tensor({5, 4}, rng);
    Tensor base = scaled_dot_attention(q, k, v, AttnMask::full(3, 5));

    std::vector<int> perm(5);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> kp(5 * 4), vp(5 * 4);
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 4; ++c) {
            kp[static_cast<size_t>(r) * 4 + c] = k.values()[static_cast<size_t>(perm[r]) * 4 + c];
            vp[static_cast<size_t>(r) * 4 + c] = v.values()[static_cast<size_t>(perm[r]) * 4 + c];
        }
    Tensor shuffled = scaled_dot_attention(q, Tensor::from_values({5, 4}, std::move(kp)),
                                           Tensor::from_values({5, 4}, std::move(vp)),
                                           AttnMask::full(3, 5));
    for (size_t i = 0; i < base.numel(); ++i)
        REQUIRE_THAT(shuffled.values()[i],
                     Catch::Matchers::WithinAbs(base.values()[i], 1e-12));
}

TEST_CASE("multi-head attention gradients pass a finite-difference check") {
    std::mt19937_64 rng(23);
    HeadConfig cfg{4, 2};
    std::mt19937_64 prng(24);
    AttentionParams p = AttentionParams::init(cfg, prng);
    Tensor x_q = random_tensor({3, 4}, rng);
    x_q.node()->requires_grad = true;
    Tensor x_kv = random_tensor({4, 4}, rng);
    x_kv.node()->requires_grad = true;
    AttnMask mask = dozer_cross_mask(CrossCoords::make(4, 3, 1), SparsityParams{3, 2, 1, false});
    Tensor probe = random_tensor({3, 4}, rng);

    std::vector<Tensor> params = p.all();
    params.push_back(x_q);
    params.push_back(x_kv);
    auto build_loss = [&]() {
        return sum(mul(multi_head_attention(x_q, x_kv, p, cfg, mask), probe));
    };
    GradCheckReport rep = grad_check(build_loss, params, 1e-5);
    INFO("worst entry " << rep.worst_parameter_index << " rel err " << rep.max_relative_error);
    REQUIRE(rep.max_relative_error <= 1e-4);
}
