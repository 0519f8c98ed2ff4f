#include "gradval/synth.hpp"

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <memory>
#include <mutex>
#include <stdexcept>

#include "gradval/rng.hpp"

namespace gradval {
namespace {

std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwDeleter {
  void operator()(void* p) const { fftw_free(p); }
};

// Spectral synthesiser for one grid shape. Owns its plan and buffers, so an
// instance must not be shared between threads.
class SpectralSynth {
 public:
  SpectralSynth(int ny, int nx, double slope) : ny_(ny), nx_(nx), nxh_(nx / 2 + 1) {
    spec_.reset(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * ny_ * nxh_)));
    out_.reset(static_cast<double*>(fftw_malloc(sizeof(double) * ny_ * nx_)));
    {
      std::lock_guard lock(planner_mutex());
      plan_ = fftw_plan_dft_c2r_2d(ny_, nx_, spec_.get(), out_.get(), FFTW_ESTIMATE);
    }
    if (!plan_) throw std::runtime_error("fftw plan creation failed");

    amplitude_.assign(static_cast<std::size_t>(ny_) * nxh_, 0.0);
    double variance = 0.0;
    for (int ky = 0; ky < ny_; ++ky) {
      const int fy = ky <= ny_ / 2 ? ky : ky - ny_;
      for (int kx = 0; kx < nxh_; ++kx) {
        if (self_conjugate(ky, kx)) continue;
        const double k = std::hypot(static_cast<double>(fy), static_cast<double>(kx));
        const double a = std::pow(k, -slope);
        amplitude_[static_cast<std::size_t>(ky) * nxh_ + kx] = a;
        // Edge columns store both members of each conjugate pair; interior
        // columns stand for themselves and their mirror image.
        variance += edge_column(kx) ? a * a : 2.0 * a * a;
      }
    }
    norm_ = 1.0 / std::sqrt(variance);
  }

  ~SpectralSynth() {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(plan_);
  }

  SpectralSynth(const SpectralSynth&) = delete;
  SpectralSynth& operator=(const SpectralSynth&) = delete;

  // Writes a unit-variance smooth field into `dst` (ny*nx values).
  void draw(Rng& rng, std::span<double> dst) {
    std::normal_distribution<double> normal(0.0, std::sqrt(0.5));
    auto* spec = spec_.get();
    for (int ky = 0; ky < ny_; ++ky) {
      for (int kx = 0; kx < nxh_; ++kx) {
        const std::size_t idx = static_cast<std::size_t>(ky) * nxh_ + kx;
        const double a = amplitude_[idx];
        const double re = normal(rng);
        const double im = normal(rng);
        spec[idx][0] = a * re;
        spec[idx][1] = a * im;
      }
    }
    // Hermitian symmetry on the kx = 0 and Nyquist columns.
    for (int kx = 0; kx < nxh_; ++kx) {
      if (!edge_column(kx)) continue;
      for (int ky = 1; ky < ny_; ++ky) {
        const int mirror = ny_ - ky;
        if (ky > mirror) break;
        if (ky == mirror) continue;
        const std::size_t src = static_cast<std::size_t>(ky) * nxh_ + kx;
        const std::size_t dst_idx = static_cast<std::size_t>(mirror) * nxh_ + kx;
        spec[dst_idx][0] = spec[src][0];
        spec[dst_idx][1] = -spec[src][1];
      }
    }
    fftw_execute_dft_c2r(plan_, spec, out_.get());
    const double* out = out_.get();
    for (std::size_t n = 0; n < dst.size(); ++n) dst[n] = out[n] * norm_;
  }

 private:
  bool edge_column(int kx) const { return kx == 0 || (nx_ % 2 == 0 && kx == nx_ / 2); }
  bool self_conjugate(int ky, int kx) const {
    if (!edge_column(kx)) return false;
    return ky == 0 || (ny_ % 2 == 0 && ky == ny_ / 2);
  }

  int ny_, nx_, nxh_;
  std::unique_ptr<fftw_complex, FftwDeleter> spec_;
  std::unique_ptr<double, FftwDeleter> out_;
  fftw_plan plan_ = nullptr;
  std::vector<double> amplitude_;
  double norm_ = 1.0;
};

FieldTensor draw_field(SpectralSynth& synth, std::uint64_t seed, const GridPtr& grid,
                       std::uint64_t stream, std::uint64_t index) {
  FieldTensor f(grid, static_cast<std::int64_t>(index));
  for (int v = 0; v < grid->n_vars(); ++v) {
    const VariableInfo info = variable_info(grid->variable(v));
    Rng rng = make_rng(seed, {stream, index, static_cast<std::uint64_t>(v)});
    auto dst = f.variable(v);
    synth.draw(rng, dst);
    for (double& x : dst) x = info.offset + info.scale * x;
  }
  return f;
}

}  // namespace

FieldTensor synth_field(std::uint64_t seed, const GridPtr& grid, std::uint64_t stream,
                        std::uint64_t index, const SynthOptions& options) {
  SpectralSynth synth(grid->n_lat(), grid->n_lon(), options.spectral_slope);
  return draw_field(synth, seed, grid, stream, index);
}

Climatology estimate_climatology(std::uint64_t seed, const GridPtr& grid, std::uint64_t stream,
                                 int draws, const SynthOptions& options) {
  if (draws < 1) throw std::invalid_argument("climatology needs at least one draw");
  SpectralSynth synth(grid->n_lat(), grid->n_lon(), options.spectral_slope);
  FieldTensor sum(grid, 0);
  auto acc = sum.values();
  for (int d = 0; d < draws; ++d) {
    FieldTensor f = draw_field(synth, seed, grid, stream, static_cast<std::uint64_t>(d));
    auto vals = f.values();
    for (std::size_t n = 0; n < acc.size(); ++n) acc[n] += vals[n];
  }
  for (double& x : acc) x /= draws;
  return Climatology(std::move(sum));
}

SynthResult synth_fields(std::uint64_t seed, const GridPtr& grid, int n_timestamps,
                         const SynthOptions& options) {
  if (!grid) throw std::invalid_argument("synth_fields needs a grid");
  if (n_timestamps < 1) throw std::invalid_argument("n_timestamps must be >= 1");
  SpectralSynth synth(grid->n_lat(), grid->n_lon(), options.spectral_slope);
  SynthResult out;
  out.fields.reserve(static_cast<std::size_t>(n_timestamps));
  for (int t = 0; t < n_timestamps; ++t) {
    out.fields.push_back(draw_field(synth, seed, grid, 0, static_cast<std::uint64_t>(t)));
  }
  out.climatology =
      estimate_climatology(seed, grid, options.climatology_stream, options.climatology_draws, options);
  return out;
}

}  // namespace gradval
