#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <string>
#include <vector>

#include "ccadepth/error.hpp"

namespace ccadepth {

using cdouble = std::complex<double>;

// Dense row-major 2-D array.
template <typename T>
class Grid {
  public:
    Grid() = default;
    Grid(int rows, int cols, T fill = T{}) : rows_(rows), cols_(cols), v_(size_t(rows) * cols, fill) {}

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    size_t size() const { return v_.size(); }

    T& operator()(int y, int x) { return v_[size_t(y) * cols_ + x]; }
    const T& operator()(int y, int x) const { return v_[size_t(y) * cols_ + x]; }
    T& operator[](size_t i) { return v_[i]; }
    const T& operator[](size_t i) const { return v_[i]; }

    T* data() { return v_.data(); }
    const T* data() const { return v_.data(); }

    void fill(T value) { v_.assign(v_.size(), value); }

    bool same_shape(const Grid& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    void require_shape(const Grid& o, const char* what) const {
        if (!same_shape(o))
            throw ShapeError(std::string(what) + ": " + std::to_string(rows_) + "x" + std::to_string(cols_) +
                             " vs " + std::to_string(o.rows_) + "x" + std::to_string(o.cols_));
    }

  private:
    int rows_ = 0, cols_ = 0;
    std::vector<T> v_;
};

using RealGrid = Grid<double>;
using ComplexGrid = Grid<cdouble>;

// Dense (channels, rows, cols) tensor, channel-major.
struct Tensor3 {
    Tensor3() = default;
    Tensor3(int c, int h, int w, double fill = 0.0) : c(c), h(h), w(w), v(size_t(c) * h * w, fill) {}

    int c = 0, h = 0, w = 0;
    std::vector<double> v;

    double& at(int ci, int y, int x) { return v[(size_t(ci) * h + y) * w + x]; }
    double at(int ci, int y, int x) const { return v[(size_t(ci) * h + y) * w + x]; }
    double* channel(int ci) { return v.data() + size_t(ci) * h * w; }
    const double* channel(int ci) const { return v.data() + size_t(ci) * h * w; }
    size_t size() const { return v.size(); }
};

// Convolution kernel bank (out_ch, in_ch, kh, kw).
struct Tensor4 {
    Tensor4() = default;
    Tensor4(int co, int ci, int kh, int kw) : co(co), ci(ci), kh(kh), kw(kw), v(size_t(co) * ci * kh * kw, 0.0) {}

    int co = 0, ci = 0, kh = 0, kw = 0;
    std::vector<double> v;

    double& at(int o, int i, int y, int x) { return v[((size_t(o) * ci + i) * kh + y) * kw + x]; }
    double at(int o, int i, int y, int x) const { return v[((size_t(o) * ci + i) * kh + y) * kw + x]; }
    size_t size() const { return v.size(); }
};

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

template <typename T>
inline bool all_finite(const Grid<T>& g) {
    for (size_t i = 0; i < g.size(); ++i) {
        if constexpr (std::is_same_v<T, cdouble>) {
            if (!std::isfinite(g[i].real()) || !std::isfinite(g[i].imag())) return false;
        } else {
            if (!std::isfinite(g[i])) return false;
        }
    }
    return true;
}

}  // namespace ccadepth
