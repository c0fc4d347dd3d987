#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ccadepth/losses.hpp"
#include "ccadepth/rng.hpp"

using namespace ccadepth;

namespace {

RealGrid constant(int h, int w, double v) { return RealGrid(h, w, v); }

RealGrid ramp_x(int h, int w, double step) {
    RealGrid g(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) g(y, x) = step * x;
    return g;
}

RealGrid random_map(Rng& rng, int h, int w, double lo, double hi) {
    RealGrid g(h, w);
    for (size_t i = 0; i < g.size(); ++i) g[i] = rng.uniform(lo, hi);
    return g;
}

// Test-local Sobel on a replicate-padded map (independent arithmetic).
void ref_sobel(const RealGrid& m, int y, int x, double& gx, double& gy) {
    auto v = [&](int yy, int xx) {
        yy = std::clamp(yy, 0, m.rows() - 1);
        xx = std::clamp(xx, 0, m.cols() - 1);
        return m(yy, xx);
    };
    gx = v(y - 1, x + 1) + 2 * v(y, x + 1) + v(y + 1, x + 1) -
         (v(y - 1, x - 1) + 2 * v(y, x - 1) + v(y + 1, x - 1));
    gy = v(y + 1, x - 1) + 2 * v(y + 1, x) + v(y + 1, x + 1) -
         (v(y - 1, x - 1) + 2 * v(y - 1, x) + v(y - 1, x + 1));
}

}  // namespace

TEST_CASE("sobel: constants, ramps and transposes") {
    RealGrid gx, gy;
    sobel_grad(constant(5, 6, 3.2), gx, gy);
    for (size_t i = 0; i < gx.size(); ++i) {
        CHECK(gx[i] == 0.0);
        CHECK(gy[i] == 0.0);
    }

    // f(x, y) = x: interior Gx is 8 * step, Gy is 0
    const double step = 0.25;
    sobel_grad(ramp_x(6, 7, step), gx, gy);
    for (int y = 0; y < 6; ++y)
        for (int x = 1; x < 6; ++x) {
            CHECK(gx(y, x) == doctest::Approx(8.0 * step).epsilon(1e-13));
            CHECK(gy(y, x) == doctest::Approx(0.0).epsilon(1e-13));
        }

    // transposing the input swaps the components
    Rng rng(5);
    const RealGrid m = random_map(rng, 7, 7, 0.0, 1.0);
    RealGrid mt(7, 7);
    for (int y = 0; y < 7; ++y)
        for (int x = 0; x < 7; ++x) mt(y, x) = m(x, y);
    RealGrid ax, ay, bx, by;
    sobel_grad(m, ax, ay);
    sobel_grad(mt, bx, by);
    for (int y = 0; y < 7; ++y)
        for (int x = 0; x < 7; ++x) {
            CHECK(ax(y, x) == doctest::Approx(by(x, y)).epsilon(1e-13));
            CHECK(ay(y, x) == doctest::Approx(bx(x, y)).epsilon(1e-13));
        }

    CHECK_THROWS_AS(sobel_grad(constant(2, 5, 0.0), gx, gy), ShapeError);
}

TEST_CASE("grad loss: zeros and a hand-evaluated case") {
    Rng rng(6);
    const RealGrid y = random_map(rng, 6, 6, 0.2, 1.8);
    CHECK(grad_loss(y, y) == 0.0);

    RealGrid shifted = y;
    for (size_t i = 0; i < shifted.size(); ++i) shifted[i] += 0.37;
    CHECK(grad_loss(y, shifted) == doctest::Approx(0.0).epsilon(1e-18));

    // independent per-pixel evaluation
    const RealGrid y_hat = random_map(rng, 6, 6, 0.2, 1.8);
    double expected = 0.0;
    for (int yy = 0; yy < 6; ++yy)
        for (int xx = 0; xx < 6; ++xx) {
            double agx, agy, bgx, bgy;
            ref_sobel(y, yy, xx, agx, agy);
            ref_sobel(y_hat, yy, xx, bgx, bgy);
            expected += (agx - bgx) * (agx - bgx) + (agy - bgy) * (agy - bgy);
        }
    expected /= 36.0;
    CHECK(grad_loss(y, y_hat) == doctest::Approx(expected).epsilon(1e-13));

    CHECK_THROWS_AS(grad_loss(y, constant(5, 6, 1.0)), ShapeError);
}

TEST_CASE("normal loss: identity, flat offsets, opposing slopes, reference arithmetic") {
    Rng rng(7);
    const RealGrid y = random_map(rng, 6, 6, 0.2, 1.8);
    CHECK(normal_loss(y, y) == doctest::Approx(0.0).epsilon(1e-15));

    RealGrid flat_a = constant(6, 6, 0.5), flat_b = constant(6, 6, 1.25);
    CHECK(normal_loss(flat_a, flat_b) == doctest::Approx(0.0).epsilon(1e-15));

    // opposing unit gradients: <n, n~> = -1 + 0 + 1 = 0, so each interior
    // pixel contributes exactly 1
    {
        const int n = 32;
        const RealGrid up = ramp_x(n, n, 1.0 / 8.0);
        RealGrid down(n, n);
        for (int yy = 0; yy < n; ++yy)
            for (int xx = 0; xx < n; ++xx) down(yy, xx) = -up(yy, xx);
        double expected = 0.0;
        for (int yy = 0; yy < n; ++yy)
            for (int xx = 0; xx < n; ++xx) {
                double agx, agy, bgx, bgy;
                ref_sobel(up, yy, xx, agx, agy);
                ref_sobel(down, yy, xx, bgx, bgy);
                const double dot = agx * bgx + agy * bgy + 1.0;
                const double na = std::sqrt(agx * agx + agy * agy + 1.0);
                const double nb = std::sqrt(bgx * bgx + bgy * bgy + 1.0);
                expected += 1.0 - dot / (na * nb);
                if (xx > 0 && xx < n - 1) {
                    // interior: gradients are exactly (+1, 0) and (-1, 0)
                    CHECK(agx == doctest::Approx(1.0));
                    CHECK(bgx == doctest::Approx(-1.0));
                    CHECK(1.0 - dot / (na * nb) == doctest::Approx(1.0));
                }
            }
        expected /= double(n) * n;
        CHECK(normal_loss(up, down) == doctest::Approx(expected).epsilon(1e-12));
    }

    // the printed max-of-norms form evaluates to the mean of 1 - |n| and so
    // does not vanish for identical sloped maps; the cosine form does
    const RealGrid slope = ramp_x(6, 6, 0.5);
    double printed_expected = 0.0;
    for (int yy = 0; yy < 6; ++yy)
        for (int xx = 0; xx < 6; ++xx) {
            double gx2, gy2;
            ref_sobel(slope, yy, xx, gx2, gy2);
            printed_expected += 1.0 - std::sqrt(gx2 * gx2 + gy2 * gy2 + 1.0);
        }
    printed_expected /= 36.0;
    CHECK(normal_loss(slope, slope, true) == doctest::Approx(printed_expected).epsilon(1e-13));
    CHECK(normal_loss(slope, slope, true) != 0.0);
    CHECK(normal_loss(slope, slope, false) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("smooth loss: quadratic branch, linear branch, boundary") {
    const RealGrid zero = constant(4, 4, 0.0);
    CHECK(smooth_loss(constant(4, 4, 0.5), zero) == doctest::Approx(0.125).epsilon(1e-15));
    CHECK(smooth_loss(constant(4, 4, 2.0), zero) == doctest::Approx(1.5).epsilon(1e-15));
    // |d| = 1 uses the linear branch
    CHECK(smooth_loss(constant(4, 4, 1.0), zero) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(smooth_loss(zero, constant(4, 4, 1.0)) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("total loss: zero case, single-term weights, finite-difference adjoint") {
    Rng rng(8);
    const RealGrid y = random_map(rng, 8, 8, 0.3, 1.7);

    LossWeights w;
    RealGrid d;
    CHECK(total_loss(y, y, w, &d) == doctest::Approx(0.0).epsilon(1e-15));
    for (size_t i = 0; i < d.size(); ++i) CHECK(std::abs(d[i]) < 1e-14);

    const RealGrid y_hat = random_map(rng, 8, 8, 0.3, 1.7);
    LossWeights only_grad{1.0, 0.0, 0.0};
    CHECK(total_loss(y, y_hat, only_grad, nullptr) == doctest::Approx(grad_loss(y, y_hat)).epsilon(1e-13));

    auto fd_check = [&](const LossWeights& lw) {
        RealGrid grad;
        total_loss(y, y_hat, lw, &grad);
        const double h = 1e-6;
        Rng pick(19);
        for (int probe = 0; probe < 24; ++probe) {
            const size_t i = size_t(pick.below(y_hat.size()));
            RealGrid plus = y_hat, minus = y_hat;
            plus[i] += h;
            minus[i] -= h;
            const double fd = (total_loss(y, plus, lw, nullptr) - total_loss(y, minus, lw, nullptr)) / (2 * h);
            const double rel = std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-10});
            CHECK(rel < 1e-5);
        }
    };
    fd_check(LossWeights{1.0, 1.0, 1.0});
    fd_check(LossWeights{0.3, 2.0, 0.7});
    LossWeights printed{0.5, 1.5, 0.25};
    printed.normal_printed_form = true;
    fd_check(printed);

    LossWeights bad{0.0, 0.0, 0.0};
    CHECK_THROWS_AS(total_loss(y, y_hat, bad, nullptr), DomainError);
}

TEST_CASE("metrics: hand case, identity, thresholds, ordering, permutation invariance") {
    SUBCASE("identical maps") {
        RealGrid y(2, 2, 1.3);
        const MetricsReport m = evaluate_metrics(y, y);
        CHECK(m.mae == 0.0);
        CHECK(m.rel == 0.0);
        CHECK(m.log10 == 0.0);
        CHECK(m.rmse == 0.0);
        CHECK(m.delta1 == 1.0);
        CHECK(m.delta2 == 1.0);
        CHECK(m.delta3 == 1.0);
    }

    SUBCASE("Y=[1,2], Yhat=[2,2]") {
        RealGrid y(1, 2), y_hat(1, 2);
        y(0, 0) = 1.0;
        y(0, 1) = 2.0;
        y_hat(0, 0) = 2.0;
        y_hat(0, 1) = 2.0;
        const MetricsReport m = evaluate_metrics(y, y_hat);
        CHECK(m.mae == doctest::Approx(0.5).epsilon(1e-15));
        CHECK(m.rmse == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
        CHECK(m.rel == doctest::Approx(0.25).epsilon(1e-15));  // divides by the estimate
        CHECK(m.delta1 == doctest::Approx(0.5).epsilon(1e-15));
        CHECK(m.log10 == doctest::Approx(0.5 * std::log10(2.0)).epsilon(1e-13));
    }

    SUBCASE("delta threshold boundaries") {
        RealGrid y(2, 2, 1.0);
        RealGrid y_hat(2, 2, 1.25 * 1.25 * 1.25 - 1e-9);
        const MetricsReport m = evaluate_metrics(y, y_hat);
        CHECK(m.delta3 == 1.0);
        CHECK(m.delta2 == 0.0);
        CHECK(m.delta1 == 0.0);
    }

    SUBCASE("delta ordering and permutation invariance on random maps") {
        Rng rng(10);
        for (int trial = 0; trial < 20; ++trial) {
            RealGrid y = random_map(rng, 4, 4, 0.4, 1.6);
            RealGrid y_hat = random_map(rng, 4, 4, 0.4, 1.6);
            const MetricsReport m = evaluate_metrics(y, y_hat);
            CHECK(m.delta1 <= m.delta2);
            CHECK(m.delta2 <= m.delta3);

            // reverse both maps with the same permutation
            RealGrid yr(4, 4), hr(4, 4);
            for (size_t i = 0; i < y.size(); ++i) {
                yr[i] = y[y.size() - 1 - i];
                hr[i] = y_hat[y.size() - 1 - i];
            }
            const MetricsReport p = evaluate_metrics(yr, hr);
            CHECK(p.mae == doctest::Approx(m.mae).epsilon(1e-15));
            CHECK(p.rmse == doctest::Approx(m.rmse).epsilon(1e-15));
            CHECK(p.rel == doctest::Approx(m.rel).epsilon(1e-15));
            CHECK(p.delta1 == m.delta1);
        }
    }

    SUBCASE("non-positive depths are rejected") {
        RealGrid y(2, 2, 1.0), bad(2, 2, 0.0);
        CHECK_THROWS_AS(evaluate_metrics(y, bad), DomainError);
        CHECK_THROWS_AS(evaluate_metrics(bad, y), DomainError);
    }

    SUBCASE("report serialization carries every field") {
        RealGrid y(2, 2, 1.0), h(2, 2, 1.1);
        const MetricsReport m = evaluate_metrics(y, h);
        CHECK(m.to_key_values().find("rmse=") != std::string::npos);
        CHECK(m.to_tsv_row().find('\t') != std::string::npos);
    }
}
