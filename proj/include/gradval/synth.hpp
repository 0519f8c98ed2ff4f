#pragma once

#include <cstdint>
#include <vector>

#include "gradval/grid.hpp"

namespace gradval {

struct SynthOptions {
  // Amplitude of wavenumber k is proportional to k^(-spectral_slope).
  double spectral_slope = 1.5;
  int climatology_draws = 1000;
  // Climatology draws use this stream offset so they never overlap the
  // evaluation timestamps.
  std::uint64_t climatology_stream = 0x5eed'c11aULL;
};

struct SynthResult {
  std::vector<FieldTensor> fields;
  Climatology climatology;
};

/// One smooth random field per variable: offset + scale * unit-variance
/// spectral field. `stream` and `index` select an independent draw.
FieldTensor synth_field(std::uint64_t seed, const GridPtr& grid, std::uint64_t stream,
                        std::uint64_t index, const SynthOptions& options = {});

/// Evaluation fields (timestamps 0..n-1) plus a climatology averaged over
/// independent draws.
SynthResult synth_fields(std::uint64_t seed, const GridPtr& grid, int n_timestamps,
                         const SynthOptions& options = {});

/// Mean of `draws` independent fields from the given stream.
Climatology estimate_climatology(std::uint64_t seed, const GridPtr& grid, std::uint64_t stream,
                                 int draws, const SynthOptions& options = {});

}  // namespace gradval
