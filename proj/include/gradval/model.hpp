#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gradval/grid.hpp"

namespace gradval {

enum class ModelKind { desk, linear };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& s);

/// Everything needed to rebuild a model bit-for-bit; weights are never stored.
struct ModelConfig {
  ModelKind kind = ModelKind::desk;
  std::uint64_t seed = 1;
  int depth = 3;
  int hidden = 4;
  int stencil_radius = 2;
  double readout_length_km = 500.0;
  // Chebyshev radius (cells) of the readout around the target; 0 means the
  // whole grid contributes.
  int readout_radius = 0;
  double readout_scale = 1.0;
  double target_activation_std = 0.8;
  // Multiplier applied to each variable's physical units (empty = all 1).
  std::vector<double> unit_factors;
  std::vector<std::string> masked_variables;
  // Truth-model weight perturbation: each weight is multiplied by (1 + d),
  // d ~ U(-weight_mismatch, weight_mismatch) drawn from mismatch_seed.
  double weight_mismatch = 0.0;
  std::uint64_t mismatch_seed = 0;
};

/// Half-open rectangle of cells [i0, i1) x [j0, j1).
struct CellBox {
  int i0 = 0, i1 = 0, j0 = 0, j1 = 0;
  bool empty() const { return i0 >= i1 || j0 >= j1; }
  CellBox dilate(int r) const { return {i0 - r, i1 + r, j0 - r, j1 + r}; }
  CellBox intersect(const CellBox& o) const;
  CellBox hull(const CellBox& o) const;
  bool contains(int i, int j) const { return i >= i0 && i < i1 && j >= j0 && j < j1; }
};

/// Activations of one forward pass, reused to evaluate local perturbations.
struct ForwardState {
  FieldTensor input;
  std::vector<std::vector<double>> activations;  // layer 0 = normalised input
  double prediction = 0.0;
};

/// Differentiable surrogate forecast F(x): a stack of local stencil layers with
/// tanh activations and a distance-weighted readout around the target cell, or
/// a plain linear map with the same distance decay.
class ForecastModel {
 public:
  ForecastModel(GridPtr grid, TargetSpec target, ModelConfig config);

  const GridSpec& grid() const { return *grid_; }
  const GridPtr& grid_ptr() const { return grid_; }
  const TargetSpec& target() const { return target_; }
  const ModelConfig& config() const { return config_; }
  std::string id() const;

  double forward(const FieldTensor& x) const;
  /// forward() minus its constant output offset. Same derivative, but
  /// without the rounding of a large offset (msl is ~1e5 Pa).
  double forward_anomaly(const FieldTensor& x) const;
  /// dF/dx; `value`, if given, receives F(x) from the same forward pass.
  FieldTensor gradient(const FieldTensor& x, double* value = nullptr) const;

  ForwardState forward_state(const FieldTensor& x) const;
  /// Prediction for `perturbed`, which may differ from `base.input` only
  /// inside `boxes`. Only the affected cone of activations is recomputed.
  double forward_patched(const ForwardState& base, const FieldTensor& perturbed,
                         std::span<const CellBox> boxes) const;

  /// Chebyshev distance (cells) from the target beyond which inputs cannot
  /// affect the prediction; -1 when the whole grid contributes.
  int receptive_radius() const;

  /// Std of each hidden layer's activations on the calibration probe.
  const std::vector<double>& activation_std() const { return activation_std_; }

 private:
  struct Layer {
    int in_ch = 0;
    int out_ch = 0;
    std::vector<double> weights;  // [out][in][tap]
    std::vector<double> bias;
  };

  void build_desk();
  void build_linear();
  void apply_mismatch();
  CellBox readout_box() const;
  CellBox layer_box(int layer) const;
  CellBox grid_box() const { return {0, grid_->n_lat(), 0, grid_->n_lon()}; }
  void normalise_input(const FieldTensor& x, const CellBox& box, std::span<double> out,
                       int out_i0, int out_j0, int out_cols) const;
  double readout(std::span<const double> last, const CellBox& box) const;
  void run_desk(const FieldTensor& x, std::vector<std::vector<double>>& acts) const;

  GridPtr grid_;
  TargetSpec target_;
  ModelConfig config_;

  std::vector<double> in_offset_;
  std::vector<double> in_gain_;  // multiplies (x - offset)
  std::vector<Layer> layers_;
  std::vector<double> readout_channel_;
  std::vector<double> readout_spatial_;  // per cell, zero outside support
  double out_offset_ = 0.0;
  double out_scale_ = 1.0;
  std::vector<double> linear_weights_;  // variable-major, linear kind only
  std::vector<double> activation_std_;
};

ForecastModel make_desk_model(std::uint64_t seed, GridPtr grid, TargetSpec target, int depth,
                              ModelConfig base = {});
ForecastModel make_linear_model(std::uint64_t seed, GridPtr grid, TargetSpec target,
                                ModelConfig base = {});

double forward(const ForecastModel& model, const FieldTensor& x);
FieldTensor gradient(const ForecastModel& model, const FieldTensor& x);

/// Copy of `model` whose physical units for variable `v` are multiplied by
/// `factor`; apply the same change to inputs with rescale_variable().
ForecastModel rescale_units(const ForecastModel& model, int v, double factor);
FieldTensor rescale_variable(const FieldTensor& x, int v, double factor);

struct ForecastOutcome {
  double prediction = 0.0;
  double verification = 0.0;
  double abs_error = 0.0;
};

/// Supplies verification values y*(x) = F_truth(x) + gaussian noise, where the
/// noise draw is keyed on the field timestamp.
class TruthModel {
 public:
  TruthModel(ForecastModel truth, double noise_std, std::uint64_t seed);
  double verification(const FieldTensor& x) const;
  const ForecastModel& model() const { return truth_; }
  double noise_std() const { return noise_std_; }

 private:
  ForecastModel truth_;
  double noise_std_;
  std::uint64_t seed_;
};

TruthModel make_truth(const ForecastModel& model, std::uint64_t seed, double noise_std,
                      double mismatch = 0.05);

ForecastOutcome evaluate(const ForecastModel& model, const TruthModel& truth, const FieldTensor& x);

/// JSON document holding grid, target and model configuration.
void save_model(const std::filesystem::path& path, const ForecastModel& model);
ForecastModel load_model(const std::filesystem::path& path);

}  // namespace gradval
