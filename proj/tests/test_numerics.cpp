// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <span>
#include <vector>

#include "doctest.h"
#include "flowcast/autograd.hpp"
#include "flowcast/errors.hpp"
#include "flowcast/rng.hpp"
#include "flowcast/tensor.hpp"

using namespace flowcast;
namespace ag = flowcast::ag;

using DTensor = TensorT<double>;
using DParam = ParameterT<double>;
using DTape = ag::TapeT<double>;
using DVar = ag::VarT<double>;

namespace {

DTensor random_tensor(std::vector<size_t> shape, uint64_t seed, double lo = -1.0,
                      double hi = 1.0) {
    RngStream rng(seed);
    return DTensor::uniform(std::move(shape), rng, lo, hi);
}

// Inputs bounded away from zero so kinked ops stay differentiable under the
// finite-difference step.
DTensor random_signed_tensor(std::vector<size_t> shape, uint64_t seed, double min_abs = 0.2) {
    RngStream rng(seed);
    DTensor t(std::move(shape));
    for (size_t i = 0; i < t.numel(); ++i) {
        const double mag = rng.uniform(min_abs, min_abs + 1.0);
        t[i] = rng.below(2) ? mag : -mag;
    }
    return t;
}

// Fixed random weights turn a tensor output into a scalar that is sensitive
// to every element.
DVar weighted_sum(DTape& tape, DVar y, uint64_t seed) {
    return ag::sum(ag::mul(y, tape.leaf(random_tensor(y.val().shape(), seed, 0.5, 1.5))));
}

template <typename Fn>
double checked_rel_err(std::vector<DParam*> params, Fn&& fn) {
    ag::GradCheckOptions<double> opts;
    auto report = ag::grad_check<double>(fn, std::span<DParam* const>(params.data(),
                                                                      params.size()),
                                         opts);
    CHECK(report.coords_checked > 0);
    return report.max_rel_err;
}

}  // namespace

TEST_CASE("matmul value oracles") {
    DTape tape;
    DVar identity = tape.leaf(DTensor::eye(2));
    DVar m = tape.leaf(DTensor({2, 2}, {1, 2, 3, 4}));
    const DTensor prod = ag::matmul(identity, m).val();
    CHECK(prod == m.val());

    DVar row = tape.leaf(DTensor({1, 2}, {1, 2}));
    DVar col = tape.leaf(DTensor({2, 1}, {3, 4}));
    CHECK(ag::matmul(row, col).val()[0] == doctest::Approx(11.0));

    DVar zeros = tape.leaf(DTensor::zeros({2, 3}));
    DVar any = tape.leaf(random_tensor({3, 4}, 11));
    CHECK(ag::matmul(zeros, any).val().max_abs() == 0.0);

    DVar bad = tape.leaf(DTensor::zeros({3, 2}));
    CHECK_THROWS_AS((void)ag::matmul(row, bad), ShapeError);
}

TEST_CASE("conv1d_same value oracles") {
    DTape tape;
    DVar x = tape.leaf(DTensor({1, 1, 3}, {1, 2, 3}));
    DVar k = tape.leaf(DTensor({1, 1, 3}, {1, 1, 1}));
    DVar b = tape.leaf(DTensor::zeros({1}));
    const DTensor& y = ag::conv1d_same(x, k, b).val();
    CHECK(y.shape() == std::vector<size_t>{1, 1, 3});
    CHECK(y[0] == doctest::Approx(3.0));
    CHECK(y[1] == doctest::Approx(6.0));
    CHECK(y[2] == doctest::Approx(5.0));

    DVar ident = tape.leaf(DTensor({1, 1, 3}, {0, 1, 0}));
    CHECK(ag::conv1d_same(x, ident, b).val().max_abs_diff(x.val()) == 0.0);

    DVar zeros = tape.leaf(DTensor::zeros({2, 1, 4}));
    DVar bias = tape.leaf(DTensor({2}, {0.5, -1.5}));
    DVar kk = tape.leaf(random_tensor({2, 1, 3}, 5));
    const DTensor& yb = ag::conv1d_same(zeros, kk, bias).val();
    for (size_t n = 0; n < 2; ++n)
        for (size_t c = 0; c < 2; ++c)
            for (size_t t = 0; t < 4; ++t)
                CHECK(yb.at3(n, c, t) == doctest::Approx(bias.val()[c]));

    DVar even = tape.leaf(DTensor::zeros({1, 1, 4}));
    CHECK_THROWS_AS((void)ag::conv1d_same(x, even, b), ConfigError);
}

TEST_CASE("conv1d_same preserves time length for odd kernels up to 9") {
    for (size_t ksize : {1u, 3u, 5u, 7u, 9u}) {
        DTape tape;
        DVar x = tape.leaf(random_tensor({2, 3, 17}, 100 + ksize));
        DVar k = tape.leaf(random_tensor({4, 3, ksize}, 200 + ksize));
        DVar b = tape.leaf(random_tensor({4}, 300 + ksize));
        const DTensor& y = ag::conv1d_same(x, k, b).val();
        CHECK(y.shape() == std::vector<size_t>{2, 4, 17});
    }
}

TEST_CASE("layer_norm value oracles") {
    DTape tape;
    DVar constant = tape.leaf(DTensor::full({4}, 3.25));
    DVar gamma = tape.leaf(DTensor::full({4}, 1.0));
    DVar beta = tape.leaf(DTensor::zeros({4}));
    CHECK(ag::layer_norm(constant, gamma, beta, 1e-5).val().max_abs() < 1e-6);

    DVar two = tape.leaf(DTensor({2}, {1, 3}));
    DVar g2 = tape.leaf(DTensor::full({2}, 1.0));
    DVar b2 = tape.leaf(DTensor::zeros({2}));
    const DTensor& y = ag::layer_norm(two, g2, b2, 1e-10).val();
    CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-4));
    CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-4));

    DVar b5 = tape.leaf(DTensor::full({4}, 5.0));
    CHECK(ag::layer_norm(constant, gamma, b5, 1e-5).val().max_abs_diff(b5.val()) < 1e-6);

    CHECK_THROWS_AS((void)ag::layer_norm(two, gamma, beta, 1e-5), ShapeError);
    CHECK_THROWS_AS((void)ag::layer_norm(two, g2, b2, 0.0), ConfigError);
}

TEST_CASE("relu value oracles and kink margin") {
    DTape tape;
    DVar x = tape.leaf(DTensor({3}, {-1, 0, 2}));
    const DTensor& y = ag::relu(x).val();
    CHECK(y[0] == 0.0);
    CHECK(y[1] == 0.0);
    CHECK(y[2] == 2.0);
    CHECK(tape.kink_margin() == 0.0);

    DTape tape2;
    DVar x2 = tape2.leaf(DTensor({3}, {-1.5, 0.25, 2}));
    (void)ag::relu(x2);
    CHECK(tape2.kink_margin() == doctest::Approx(0.25));
}

TEST_CASE("softmax attention value oracles") {
    DTape tape;
    // Single token: softmax over one logit is 1, output equals V.
    DVar q1 = tape.leaf(random_tensor({2, 1, 3}, 1));
    DVar k1 = tape.leaf(random_tensor({2, 1, 3}, 2));
    DVar v1 = tape.leaf(random_tensor({2, 1, 3}, 3));
    CHECK(ag::softmax_attention(q1, k1, v1, ag::AttnMask::none).val().max_abs_diff(v1.val()) <
          1e-12);

    // Zero queries: uniform average of V rows.
    DVar q0 = tape.leaf(DTensor::zeros({1, 3, 2}));
    DVar k0 = tape.leaf(random_tensor({1, 3, 2}, 4));
    DVar v0 = tape.leaf(DTensor({1, 3, 2}, {1, 2, 3, 4, 5, 6}));
    const DTensor& avg = ag::softmax_attention(q0, k0, v0, ag::AttnMask::none).val();
    for (size_t t = 0; t < 3; ++t) {
        CHECK(avg.at3(0, t, 0) == doctest::Approx(3.0));
        CHECK(avg.at3(0, t, 1) == doctest::Approx(4.0));
    }

    // Hand-computed two-token case, d_head = 1 so the scale is 1:
    // logits of token 1 are [0, ln 3] -> probabilities [0.25, 0.75].
    DVar qh = tape.leaf(DTensor({1, 2, 1}, {0.0, 1.0}));
    DVar kh = tape.leaf(DTensor({1, 2, 1}, {0.0, std::log(3.0)}));
    DVar vh = tape.leaf(DTensor({1, 2, 1}, {1.0, 2.0}));
    const DTensor& none = ag::softmax_attention(qh, kh, vh, ag::AttnMask::none).val();
    CHECK(none.at3(0, 0, 0) == doctest::Approx(1.5));
    CHECK(none.at3(0, 1, 0) == doctest::Approx(1.75));
    const DTensor& causal = ag::softmax_attention(qh, kh, vh, ag::AttnMask::causal).val();
    CHECK(causal.at3(0, 0, 0) == doctest::Approx(1.0));  // token 0 sees only itself
    CHECK(causal.at3(0, 1, 0) == doctest::Approx(1.75));
}

TEST_CASE("attention rows sum to one") {
    DTape tape;
    DVar q = tape.leaf(random_tensor({2, 5, 3}, 21));
    DVar k = tape.leaf(random_tensor({2, 5, 3}, 22));
    DVar ones = tape.leaf(DTensor::full({2, 5, 3}, 1.0));
    for (ag::AttnMask mask : {ag::AttnMask::none, ag::AttnMask::causal}) {
        const DTensor& y = ag::softmax_attention(q, k, ones, mask).val();
        for (size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("causal attention ignores future tokens") {
    DTensor q = random_tensor({2, 4, 3}, 31);
    DTensor k = random_tensor({2, 4, 3}, 32);
    DTensor v = random_tensor({2, 4, 3}, 33);
    DTape t1;
    const DTensor y1 =
        ag::softmax_attention(t1.leaf(q), t1.leaf(k), t1.leaf(v), ag::AttnMask::causal).val();
    // Perturb everything at the last token.
    for (size_t h = 0; h < 2; ++h)
        for (size_t d = 0; d < 3; ++d) {
            k.at3(h, 3, d) += 5.0;
            v.at3(h, 3, d) -= 7.0;
        }
    DTape t2;
    const DTensor y2 =
        ag::softmax_attention(t2.leaf(q), t2.leaf(k), t2.leaf(v), ag::AttnMask::causal).val();
    for (size_t h = 0; h < 2; ++h)
        for (size_t t = 0; t < 3; ++t)
            for (size_t d = 0; d < 3; ++d)
                CHECK(y1.at3(h, t, d) == doctest::Approx(y2.at3(h, t, d)).epsilon(1e-12));
}

TEST_CASE("dropout contracts") {
    RngStream rng(99);
    DTape tape;
    DVar x = tape.leaf(random_tensor({8}, 41));

    DVar same_p0 = ag::dropout(x, 0.0, true, &rng);
    CHECK(same_p0.id == x.id);  // exact identity node
    DVar same_inference = ag::dropout(x, 0.7, false, &rng);
    CHECK(same_inference.id == x.id);

    CHECK_THROWS_AS((void)ag::dropout(x, 1.0, true, &rng), ConfigError);
    CHECK_THROWS_AS((void)ag::dropout(x, -0.1, true, &rng), ConfigError);
    CHECK_THROWS_AS((void)ag::dropout(x, 0.5, true, nullptr), ConfigError);

    // Survivors are scaled by 1/(1-p); Monte-Carlo mean stays near 1.
    DTape big;
    DVar ones = big.leaf(DTensor::full({100000}, 1.0));
    RngStream mc(12345);
    const DTensor& dropped = ag::dropout(ones, 0.5, true, &mc).val();
    double mean = 0.0;
    for (size_t i = 0; i < dropped.numel(); ++i) {
        CHECK((dropped[i] == 0.0 || dropped[i] == doctest::Approx(2.0)));
        mean += dropped[i];
    }
    mean /= static_cast<double>(dropped.numel());
    CHECK(mean == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("mean absolute error values and tie subgradient") {
    DTape tape;
    DVar pred = tape.leaf(DTensor({2}, {12, 18}));
    DVar loss = ag::mean_abs_error(pred, DTensor({2}, {10, 20}));
    CHECK(loss.val()[0] == doctest::Approx(2.0));
    CHECK(tape.kink_margin() == doctest::Approx(2.0));

    DTape tie;
    DVar p2 = tie.leaf(DTensor({3}, {1, 2, 3}));
    DVar l2 = ag::mean_abs_error(p2, DTensor({3}, {1, 2, 3}));
    CHECK(l2.val()[0] == 0.0);
    tie.backward(l2);
    CHECK(tie.grad(p2.id).max_abs() == 0.0);  // subgradient 0 at exact ties

    DVar bad = tie.leaf(DTensor({2}, {0, 0}));
    CHECK_THROWS_AS((void)ag::mean_abs_error(bad, DTensor({3}, {0, 0, 0})), ShapeError);
}

TEST_CASE("backward requires scalar root and one tape") {
    DTape t1, t2;
    DVar a = t1.leaf(DTensor({2}, {1, 2}));
    DVar b = t2.leaf(DTensor({2}, {3, 4}));
    CHECK_THROWS_AS((void)ag::add(a, b), ShapeError);
    CHECK_THROWS_AS(t1.backward(a), ShapeError);
}

TEST_CASE("gradient of sum of squares") {
    DParam x("x", DTensor({2}, {1, 2}));
    DTape tape;
    DVar xv = tape.param(x);
    DVar loss = ag::sum(ag::mul(xv, xv));
    tape.backward(loss);
    const DTensor& g = tape.param_grad(x);
    CHECK(g[0] == doctest::Approx(2.0));
    CHECK(g[1] == doctest::Approx(4.0));

    std::vector<DParam*> params{&x};
    const double err = checked_rel_err(params, [&](DTape& t) {
        DVar v = t.param(x);
        return ag::sum(ag::mul(v, v));
    });
    CHECK(err < 1e-6);
}

TEST_CASE("grad_check is exact for linear functions") {
    DParam x("x", random_tensor({3}, 55));
    std::vector<DParam*> params{&x};
    const double err = checked_rel_err(params, [&](DTape& t) {
        return weighted_sum(t, t.param(x), 56);
    });
    CHECK(err < 1e-8);
}

TEST_CASE("grad_check flags non-finite probe losses with the parameter name") {
    DParam x("culprit", DTensor({1}, {0.0}));
    std::vector<DParam*> params{&x};
    ag::GradCheckOptions<double> opts;
    bool thrown = false;
    try {
        (void)ag::grad_check<double>(
            [&](DTape& t) {
                DVar v = t.param(x);
                // Finite at the base point, but 1/(x - h) has its pole exactly
                // on the forward probe.
                DTensor inv = v.val();
                inv[0] = 1.0 / (inv[0] - static_cast<double>(opts.step));
                return ag::sum(ag::mul(v, t.leaf(inv)));
            },
            std::span<DParam* const>(params.data(), params.size()), opts);
    } catch (const NumericError& e) {
        thrown = true;
        CHECK(std::string(e.what()).find("culprit") != std::string::npos);
    }
    CHECK(thrown);
}

TEST_CASE("per-op gradient checks in 64-bit mode") {
    SUBCASE("add, scale, add_scalar") {
        DParam a("a", random_tensor({2, 3}, 60));
        DParam b("b", random_tensor({2, 3}, 61));
        std::vector<DParam*> params{&a, &b};
        const double err = checked_rel_err(params, [&](DTape& t) {
            DVar y = ag::add_scalar(ag::scale(ag::add(t.param(a), t.param(b)), 1.7), -0.3);
            return weighted_sum(t, y, 62);
        });
        CHECK(err < 1e-4);
    }
    SUBCASE("mul") {
        DParam a("a", random_tensor({4}, 63));
        DParam b("b", random_tensor({4}, 64));
        std::vector<DParam*> params{&a, &b};
        const double err = checked_rel_err(params, [&](DTape& t) {
            return weighted_sum(t, ag::mul(t.param(a), t.param(b)), 65);
        });
        CHECK(err < 1e-4);
    }
    SUBCASE("matmul") {
        DParam a("a", random_tensor({3, 4}, 66));
        DParam b("b", random_tensor({4, 2}, 67));
        std::vector<DParam*> params{&a, &b};
        const double err = checked_rel_err(params, [&](DTape& t) {
            return weighted_sum(t, ag::matmul(t.param(a), t.param(b)), 68);
        });
        CHECK(err < 1e-4);
    }
    SUBCASE("linear on rank-2 and rank-3 inputs") {
        DParam x2("x2", random_tensor({3, 4}, 69));
        DParam x3("x3", random_tensor({2, 3, 4}, 70));
        DParam w("w", random_tensor({4, 5}, 71));
        DParam b("b", random_tensor({5}, 72));
        std::vector<DParam*> params{&x2, &x3, &w, &b};
        const double err = checked_rel_err(params, [&](DTape& t) {
            DVar y2 = ag::linear(t.param(x2), t.param(w), t.param(b));
            DVar y3 = ag::linear(t.param(x3), t.param(w), t.param(b));
            return ag::add(weighted_sum(t, y2, 73), weighted_sum(t, y3, 74));
        });
        CHECK(err < 1e-4);
    }
    SUBCASE("relu away from kinks") {
        DParam x("x", random_signed_tensor({3, 3}, 75));
        std::vector<DParam*> params{&x};
        const double err = checked_rel_err(params, [&](DTape& t) {
            return weighted_sum(t, ag::relu(t.param(x)), 76);
        });
        CHECK(err < 1e-4);
    }
    SUBCASE("gelu") {
        DParam x("x", random_tensor({2, 5}, 77, -2.0, 2.0));
        std::vector<DParam*> params{&x};
        const double err = checked_rel_err(params, [&](DTape& t) {
            return weighted_sum(t, ag::gelu(t.param(x)), 78);
        });
        CHECK(err < 1e-4);
    }
    SUBCASE("layer_norm") {
        DParam x("x", random_tensor({3, 5}, 79));
        DParam g("g", random_tensor({5}, 80, 0.5, 1.5));
        DParam b("b", random_tensor({5}, 81));
        std::vector<DParam*> params{&x, &g, &b};
        const double err = checked_rel_err(params, [&](DTape& t) {
            return weighted_sum(t, ag::layer_norm(t.param(x), t.param(g), t.param(b), 1e-5), 82);
        });
        CHECK(err < 1e-4);
    }
    SUBCASE("conv1d_same") {
        DParam x("x", random_tensor({2, 2, 7}, 83));
        DParam k("k", random_tensor({3, 2, 3}, 84));
        DParam b("b", random_tensor({3}, 85));
        std::vector<DParam*> params{&x, &k, &b};
        const double err = checked_rel_err(params, [&](DTape& t) {
            return weighted_sum(t, ag::conv1d_same(t.param(x), t.param(k), t.param(b)), 86);
        });
        CHECK(err < 1e-4);
    }
    SUBCASE("expand_channels") {
        DParam s("s", random_tensor({3, 4}, 87));
        DParam w("w", random_tensor({1, 5}, 88));
        DParam b("b", random_tensor({5}, 89));
        std::vector<DParam*> params{&s, &w, &b};
        const double err = checked_rel_err(params, [&](DTape& t) {
            return weighted_sum(t, ag::expand_channels(t.param(s), t.param(w), t.param(b)), 90);
        });
        CHECK(err < 1e-4);
    }
    SUBCASE("head split and merge") {
        DParam x("x", random_tensor({4, 6}, 91));
        std::vector<DParam*> params{&x};
        const double err = checked_rel_err(params, [&](DTape& t) {
            return weighted_sum(t, ag::merge_heads(ag::split_heads(t.param(x), 3)), 92);
        });
        CHECK(err < 1e-4);
    }
    SUBCASE("reshape, take_rows, channel selection") {
        DParam x("x", random_tensor({3, 4, 2}, 93));
        std::vector<DParam*> params{&x};
        const double err = checked_rel_err(params, [&](DTape& t) {
            DVar v = t.param(x);
            DVar flat = ag::reshape(v, {6, 4});
            DVar top = ag::take_rows(flat, 4);
            DVar last = ag::select_channel(v, 3);
            DVar mean = ag::mean_channels(v);
            return ag::add(weighted_sum(t, top, 94),
                           ag::add(weighted_sum(t, last, 95), weighted_sum(t, mean, 96)));
        });
        CHECK(err < 1e-4);
    }
    SUBCASE("softmax attention, both masks") {
        DParam q("q", random_tensor({2, 3, 2}, 97));
        DParam k("k", random_tensor({2, 3, 2}, 98));
        DParam v("v", random_tensor({2, 3, 2}, 99));
        std::vector<DParam*> params{&q, &k, &v};
        for (ag::AttnMask mask : {ag::AttnMask::none, ag::AttnMask::causal}) {
            const double err = checked_rel_err(params, [&](DTape& t) {
                DVar y = ag::softmax_attention(t.param(q), t.param(k), t.param(v), mask);
                return weighted_sum(t, y, 100);
            });
            CHECK(err < 1e-4);
        }
    }
    SUBCASE("dropout with a fixed mask") {
        DParam x("x", random_tensor({4, 4}, 101));
        std::vector<DParam*> params{&x};
        const double err = checked_rel_err(params, [&](DTape& t) {
            RngStream rng(4242);  // same mask on every evaluation
            return weighted_sum(t, ag::dropout(t.param(x), 0.25, true, &rng), 102);
        });
        CHECK(err < 1e-4);
    }
    SUBCASE("mean_abs_error away from ties") {
        DParam x("x", random_signed_tensor({2, 3}, 103, 0.3));
        const DTensor target = DTensor::zeros({2, 3});
        std::vector<DParam*> params{&x};
        const double err = checked_rel_err(params, [&](DTape& t) {
            return ag::mean_abs_error(t.param(x), target);
        });
        CHECK(err < 1e-4);
    }
    SUBCASE("clamp_floor away from the hinge") {
        DParam x("x", random_signed_tensor({5}, 104, 0.4));
        std::vector<DParam*> params{&x};
        const double err = checked_rel_err(params, [&](DTape& t) {
            return weighted_sum(t, ag::clamp_floor(t.param(x), 0.05), 105);
        });
        CHECK(err < 1e-4);
    }
}

TEST_CASE("gradients accumulate across reuse of one value") {
    DParam x("x", DTensor({2}, {0.5, -1.5}));
    DTape tape;
    DVar v = tape.param(x);
    DVar y = ag::add(ag::mul(v, v), v);  // y = x^2 + x, dy/dx = 2x + 1
    tape.backward(ag::sum(y));
    const DTensor& g = tape.param_grad(x);
    CHECK(g[0] == doctest::Approx(2.0));
    CHECK(g[1] == doctest::Approx(-2.0));
}

TEST_CASE("sampled coordinate gradient checking") {
    DParam a("a", random_tensor({6, 6}, 106));
    DParam b("b", random_tensor({6, 6}, 107));
    std::vector<DParam*> params{&a, &b};
    ag::GradCheckOptions<double> opts;
    opts.max_coords = 10;
    auto report = ag::grad_check<double>(
        [&](DTape& t) { return weighted_sum(t, ag::matmul(t.param(a), t.param(b)), 108); },
        std::span<DParam* const>(params.data(), params.size()), opts);
    CHECK(report.coords_checked == 10);
    CHECK(report.max_rel_err < 1e-4);
}
