#pragma once

#include <string>

#include "ccadepth/array.hpp"

namespace ccadepth {

struct LossWeights {
    double alpha = 1.0;  // gradient loss
    double mu = 1.0;     // normal loss
    double sigma = 1.0;  // smoothness loss
    // The printed form of the normal loss divides by max(|n|, |n~|) and is
    // nonzero for identical inputs; the cosine form divides by the product of
    // norms. Cosine is the default.
    bool normal_printed_form = false;

    void validate() const;
};

struct MetricsReport {
    double mae = 0.0;
    double rel = 0.0;    // |y - y~| / y~ (divides by the estimate, as printed)
    double log10 = 0.0;
    double rmse = 0.0;
    double delta1 = 0.0, delta2 = 0.0, delta3 = 0.0;

    std::string to_key_values() const;
    std::string to_tsv_row() const;
    static std::string tsv_header();
};

// 3x3 Sobel derivatives, replicate-padded, same-size outputs. Gx responds
// positively to increase along +x (correlation convention).
void sobel_grad(const RealGrid& map, RealGrid& gx, RealGrid& gy);

double grad_loss(const RealGrid& y, const RealGrid& y_hat);
double normal_loss(const RealGrid& y, const RealGrid& y_hat, bool printed_form = false);
double smooth_loss(const RealGrid& y, const RealGrid& y_hat);

// Weighted sum of the three terms with its exact adjoint w.r.t. the estimate.
double total_loss(const RealGrid& y, const RealGrid& y_hat, const LossWeights& w, RealGrid* d_y_hat);

// MAE, REL, Log10, RMSE and the three delta thresholds. Requires positive
// depths everywhere.
MetricsReport evaluate_metrics(const RealGrid& y, const RealGrid& y_hat);

}  // namespace ccadepth
