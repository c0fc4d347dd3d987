#include "ccadepth/fft.hpp"

#include <fftw3.h>

#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <utility>

namespace ccadepth {
namespace {

std::mutex g_plan_mutex;  // fftw_plan_* is not thread-safe

// One forward/backward plan pair with its own aligned buffer. fftw_execute on
// distinct plan objects is safe to run concurrently, so each thread keeps its
// own cache.
struct PlanPair {
    PlanPair(int rows, int cols) : rows(rows), cols(cols) {
        buf = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * size_t(rows) * cols));
        std::lock_guard<std::mutex> lock(g_plan_mutex);
        fwd = fftw_plan_dft_2d(rows, cols, buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
        bwd = fftw_plan_dft_2d(rows, cols, buf, buf, FFTW_BACKWARD, FFTW_ESTIMATE);
    }
    ~PlanPair() {
        std::lock_guard<std::mutex> lock(g_plan_mutex);
        fftw_destroy_plan(fwd);
        fftw_destroy_plan(bwd);
        fftw_free(buf);
    }
    PlanPair(const PlanPair&) = delete;
    PlanPair& operator=(const PlanPair&) = delete;

    int rows, cols;
    fftw_complex* buf;
    fftw_plan fwd, bwd;
};

PlanPair& plan_for(int rows, int cols) {
    thread_local std::map<std::pair<int, int>, std::unique_ptr<PlanPair>> cache;
    auto& slot = cache[{rows, cols}];
    if (!slot) slot = std::make_unique<PlanPair>(rows, cols);
    return *slot;
}

void run(ComplexGrid& g, bool forward) {
    if (g.rows() == 0 || g.cols() == 0) return;
    PlanPair& p = plan_for(g.rows(), g.cols());
    const size_t n = g.size();
    // std::complex<double> is layout-compatible with double[2] by the standard
    static_assert(sizeof(cdouble) == sizeof(fftw_complex));
    std::memcpy(static_cast<void*>(p.buf), static_cast<const void*>(g.data()), n * sizeof(fftw_complex));
    fftw_execute(forward ? p.fwd : p.bwd);
    std::memcpy(static_cast<void*>(g.data()), static_cast<const void*>(p.buf), n * sizeof(fftw_complex));
    if (!forward) {
        const double scale = 1.0 / double(n);
        for (size_t i = 0; i < n; ++i) g[i] *= scale;
    }
}

}  // namespace

void fft2(ComplexGrid& g) { run(g, true); }
void ifft2(ComplexGrid& g) { run(g, false); }

}  // namespace ccadepth
