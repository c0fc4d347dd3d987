#pragma once

#include "ccadepth/array.hpp"

namespace ccadepth {

// 2-D complex FFT on top of FFTW (double precision, FFTW_ESTIMATE plans so the
// chosen algorithm is deterministic). Plans are cached per thread; FFTW plan
// creation is serialized internally.
//
// forward: unnormalized DFT with exp(-2*pi*i*(ux/M + vy/N)) kernel.
// inverse: normalized by 1/(rows*cols), so inverse(forward(x)) == x.
void fft2(ComplexGrid& g);
void ifft2(ComplexGrid& g);

// Signed FFT frequency index: k for k < n/2, k - n otherwise.
inline int fft_freq_index(int k, int n) { return k < (n + 1) / 2 ? k : k - n; }

}  // namespace ccadepth
