#include "ccadepth/losses.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ccadepth/serialize.hpp"

namespace ccadepth {

namespace {

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

// Correlation with the 3x3 Sobel kernels on a replicate-padded map.
void sobel_at(const RealGrid& m, int y, int x, double& gx, double& gy) {
    const int h = m.rows(), w = m.cols();
    auto v = [&](int yy, int xx) { return m(clampi(yy, 0, h - 1), clampi(xx, 0, w - 1)); };
    const double a = v(y - 1, x - 1), b = v(y - 1, x), c = v(y - 1, x + 1);
    const double d = v(y, x - 1), f = v(y, x + 1);
    const double g = v(y + 1, x - 1), hh = v(y + 1, x), i = v(y + 1, x + 1);
    gx = (c + 2.0 * f + i) - (a + 2.0 * d + g);
    gy = (g + 2.0 * hh + i) - (a + 2.0 * b + c);
}

// Adjoint of sobel_at: scatters the upstream (dgx, dgy) back through the
// replicate padding (border contributions fold onto the clamped pixels).
void sobel_adjoint_add(RealGrid& dm, int y, int x, double dgx, double dgy) {
    const int h = dm.rows(), w = dm.cols();
    auto add = [&](int yy, int xx, double v) { dm(clampi(yy, 0, h - 1), clampi(xx, 0, w - 1)) += v; };
    add(y - 1, x - 1, -dgx - dgy);
    add(y - 1, x, -2.0 * dgy);
    add(y - 1, x + 1, dgx - dgy);
    add(y, x - 1, -2.0 * dgx);
    add(y, x + 1, 2.0 * dgx);
    add(y + 1, x - 1, -dgx + dgy);
    add(y + 1, x, 2.0 * dgy);
    add(y + 1, x + 1, dgx + dgy);
}

void require_same(const RealGrid& a, const RealGrid& b, const char* what) { a.require_shape(b, what); }

}  // namespace

void LossWeights::validate() const {
    if (alpha < 0 || mu < 0 || sigma < 0) throw DomainError("loss weights must be nonnegative");
    if (alpha == 0 && mu == 0 && sigma == 0) throw DomainError("at least one loss weight must be positive");
}

void sobel_grad(const RealGrid& map, RealGrid& gx, RealGrid& gy) {
    if (map.rows() < 3 || map.cols() < 3) throw ShapeError("sobel_grad: map must be at least 3x3");
    gx = RealGrid(map.rows(), map.cols());
    gy = RealGrid(map.rows(), map.cols());
    for (int y = 0; y < map.rows(); ++y)
        for (int x = 0; x < map.cols(); ++x) sobel_at(map, y, x, gx(y, x), gy(y, x));
}

double grad_loss(const RealGrid& y, const RealGrid& y_hat) {
    require_same(y, y_hat, "grad_loss");
    RealGrid gx, gy, hx, hy;
    sobel_grad(y, gx, gy);
    sobel_grad(y_hat, hx, hy);
    double acc = 0.0;
    for (size_t i = 0; i < gx.size(); ++i) {
        const double dx = gx[i] - hx[i], dy = gy[i] - hy[i];
        acc += dx * dx + dy * dy;
    }
    return acc / double(y.size());
}

double normal_loss(const RealGrid& y, const RealGrid& y_hat, bool printed_form) {
    require_same(y, y_hat, "normal_loss");
    RealGrid gx, gy, hx, hy;
    sobel_grad(y, gx, gy);
    sobel_grad(y_hat, hx, hy);
    double acc = 0.0;
    for (size_t i = 0; i < gx.size(); ++i) {
        // identical gradients have cosine exactly 1; skip the rounding residue
        if (!printed_form && gx[i] == hx[i] && gy[i] == hy[i]) continue;
        const double dot = gx[i] * hx[i] + gy[i] * hy[i] + 1.0;
        const double ny = std::sqrt(gx[i] * gx[i] + gy[i] * gy[i] + 1.0);
        const double nh = std::sqrt(hx[i] * hx[i] + hy[i] * hy[i] + 1.0);
        const double denom = printed_form ? std::max(ny, nh) : ny * nh;
        acc += 1.0 - dot / denom;
    }
    return acc / double(y.size());
}

double smooth_loss(const RealGrid& y, const RealGrid& y_hat) {
    require_same(y, y_hat, "smooth_loss");
    double acc = 0.0;
    for (size_t i = 0; i < y.size(); ++i) {
        const double d = y[i] - y_hat[i];
        const double a = std::abs(d);
        acc += a < 1.0 ? 0.5 * d * d : a - 0.5;
    }
    return acc / double(y.size());
}

double total_loss(const RealGrid& y, const RealGrid& y_hat, const LossWeights& w, RealGrid* d_y_hat) {
    require_same(y, y_hat, "total_loss");
    w.validate();
    const int h = y.rows(), wd = y.cols();
    const double inv_m = 1.0 / double(y.size());

    RealGrid gx, gy, hx, hy;
    sobel_grad(y, gx, gy);
    sobel_grad(y_hat, hx, hy);

    double lg = 0.0, ln = 0.0, ls = 0.0;
    RealGrid dhx, dhy;
    if (d_y_hat) {
        *d_y_hat = RealGrid(h, wd);
        dhx = RealGrid(h, wd);
        dhy = RealGrid(h, wd);
    }

    for (size_t i = 0; i < y.size(); ++i) {
        // gradient term
        const double ex = hx[i] - gx[i], ey = hy[i] - gy[i];
        lg += ex * ex + ey * ey;
        double dldhx = w.alpha * inv_m * 2.0 * ex;
        double dldhy = w.alpha * inv_m * 2.0 * ey;

        // normal term (identical gradients contribute exactly zero in the
        // cosine form, and their analytic gradient there is exactly zero too)
        const bool same_grad = gx[i] == hx[i] && gy[i] == hy[i];
        const double dot = gx[i] * hx[i] + gy[i] * hy[i] + 1.0;
        const double ny2 = gx[i] * gx[i] + gy[i] * gy[i] + 1.0;
        const double nh2 = hx[i] * hx[i] + hy[i] * hy[i] + 1.0;
        const double ny = std::sqrt(ny2), nh = std::sqrt(nh2);
        if (!w.normal_printed_form && same_grad) {
            // contributes 0 to the loss and 0 to the gradient
        } else if (w.normal_printed_form) {
            // max-of-norms denominator as printed (subgradient at ties)
            const double denom = std::max(ny, nh);
            ln += 1.0 - dot / denom;
            if (d_y_hat) {
                if (nh >= ny) {
                    dldhx += w.mu * inv_m * (-(gx[i] / nh - dot * hx[i] / (nh2 * nh)));
                    dldhy += w.mu * inv_m * (-(gy[i] / nh - dot * hy[i] / (nh2 * nh)));
                } else {
                    dldhx += w.mu * inv_m * (-(gx[i] / ny));
                    dldhy += w.mu * inv_m * (-(gy[i] / ny));
                }
            }
        } else {
            const double denom = ny * nh;
            ln += 1.0 - dot / denom;
            if (d_y_hat) {
                // d/dhx of dot/(ny*nh) = gx/(ny*nh) - dot*hx/(ny*nh^3)
                const double inv = 1.0 / denom;
                dldhx += w.mu * inv_m * (-(gx[i] * inv - dot * hx[i] / (ny * nh2 * nh)));
                dldhy += w.mu * inv_m * (-(gy[i] * inv - dot * hy[i] / (ny * nh2 * nh)));
            }
        }

        // smoothness term
        const double d = y[i] - y_hat[i];
        const double a = std::abs(d);
        ls += a < 1.0 ? 0.5 * d * d : a - 0.5;
        if (d_y_hat) {
            const double rho_prime = a < 1.0 ? d : (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0));
            (*d_y_hat)[i] += w.sigma * inv_m * (-rho_prime);
            dhx[i] = dldhx;
            dhy[i] = dldhy;
        }
    }

    if (d_y_hat) {
        for (int yy = 0; yy < h; ++yy)
            for (int xx = 0; xx < wd; ++xx) sobel_adjoint_add(*d_y_hat, yy, xx, dhx(yy, xx), dhy(yy, xx));
    }
    return (w.alpha * lg + w.mu * ln + w.sigma * ls) * inv_m;
}

MetricsReport evaluate_metrics(const RealGrid& y, const RealGrid& y_hat) {
    require_same(y, y_hat, "evaluate_metrics");
    const double n = double(y.size());
    MetricsReport r;
    for (size_t i = 0; i < y.size(); ++i) {
        if (y[i] <= 0.0 || y_hat[i] <= 0.0)
            throw DomainError("evaluate_metrics: depths must be positive for ratio and log metrics");
        const double e = std::abs(y[i] - y_hat[i]);
        r.mae += e;
        r.rel += e / y_hat[i];  // divides by the estimate, as printed
        r.log10 += std::abs(std::log10(y[i]) - std::log10(y_hat[i]));
        r.rmse += e * e;
        const double ratio = std::max(y_hat[i] / y[i], y[i] / y_hat[i]);
        if (ratio < 1.25) r.delta1 += 1.0;
        if (ratio < 1.25 * 1.25) r.delta2 += 1.0;
        if (ratio < 1.25 * 1.25 * 1.25) r.delta3 += 1.0;
    }
    r.mae /= n;
    r.rel /= n;
    r.log10 /= n;
    r.rmse = std::sqrt(r.rmse / n);
    r.delta1 /= n;
    r.delta2 /= n;
    r.delta3 /= n;
    return r;
}

std::string MetricsReport::to_key_values() const {
    std::ostringstream os;
    os << "mae=" << f64_to_text(mae) << "\nrel=" << f64_to_text(rel) << "\nlog10=" << f64_to_text(log10)
       << "\nrmse=" << f64_to_text(rmse) << "\ndelta1=" << f64_to_text(delta1)
       << "\ndelta2=" << f64_to_text(delta2) << "\ndelta3=" << f64_to_text(delta3) << "\n";
    return os.str();
}

std::string MetricsReport::tsv_header() { return "mae\trel\tlog10\trmse\tdelta1\tdelta2\tdelta3"; }

std::string MetricsReport::to_tsv_row() const {
    std::ostringstream os;
    os << f64_to_text(mae) << "\t" << f64_to_text(rel) << "\t" << f64_to_text(log10) << "\t"
       << f64_to_text(rmse) << "\t" << f64_to_text(delta1) << "\t" << f64_to_text(delta2) << "\t"
       << f64_to_text(delta3);
    return os.str();
}

}  // namespace ccadepth
