#include "gradval/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "gradval/rng.hpp"
#include "gradval/synth.hpp"

namespace gradval {
namespace {

constexpr std::uint64_t kProbeStream = 0x9a0b'e5ULL;
constexpr double kGainRatio = 1.6;

struct PlaneRef {
  const double* data;
  int i0, j0, rows, cols;
  std::size_t channel_stride() const { return static_cast<std::size_t>(rows) * cols; }
};

struct PlaneMut {
  double* data;
  int i0, j0, rows, cols;
  std::size_t channel_stride() const { return static_cast<std::size_t>(rows) * cols; }
  operator PlaneRef() const { return {data, i0, j0, rows, cols}; }
};

// out[co] = tanh(bias[co] + sum_{ci,taps} w * in[ci](i+di, j+dj)) over `box`.
// Cells of `in` outside its plane read as zero.
void conv_forward(const std::vector<double>& weights, const std::vector<double>& bias, int in_ch,
                  int out_ch, int radius, const PlaneRef& in, const PlaneMut& out,
                  const CellBox& box, bool activate = true) {
  const int width = 2 * radius + 1;
  const int taps = width * width;
  for (int co = 0; co < out_ch; ++co) {
    double* o = out.data + co * out.channel_stride();
    for (int i = box.i0; i < box.i1; ++i) {
      double* row = o + static_cast<std::size_t>(i - out.i0) * out.cols + (box.j0 - out.j0);
      std::fill(row, row + (box.j1 - box.j0), bias.empty() ? 0.0 : bias[co]);
    }
    for (int ci = 0; ci < in_ch; ++ci) {
      const double* src = in.data + ci * in.channel_stride();
      const double* w = weights.data() + (static_cast<std::size_t>(co) * in_ch + ci) * taps;
      for (int di = -radius; di <= radius; ++di) {
        for (int dj = -radius; dj <= radius; ++dj) {
          const double wt = w[(di + radius) * width + (dj + radius)];
          if (wt == 0.0) continue;
          const int jlo = std::max(box.j0, in.j0 - dj);
          const int jhi = std::min(box.j1, in.j0 + in.cols - dj);
          if (jlo >= jhi) continue;
          const int n = jhi - jlo;
          for (int i = box.i0; i < box.i1; ++i) {
            const int si = i + di;
            if (si < in.i0 || si >= in.i0 + in.rows) continue;
            double* __restrict orow =
                o + static_cast<std::size_t>(i - out.i0) * out.cols + (jlo - out.j0);
            const double* __restrict srow =
                src + static_cast<std::size_t>(si - in.i0) * in.cols + (jlo + dj - in.j0);
            for (int k = 0; k < n; ++k) orow[k] += wt * srow[k];
          }
        }
      }
    }
    if (activate) {
      for (int i = box.i0; i < box.i1; ++i) {
        double* row = o + static_cast<std::size_t>(i - out.i0) * out.cols + (box.j0 - out.j0);
        for (int k = 0; k < box.j1 - box.j0; ++k) row[k] = std::tanh(row[k]);
      }
    }
  }
}

// Adjoint of conv_forward's linear part: prev[ci](i+di, j+dj) += w * grad[co](i, j)
// for (i, j) in `box`, restricted to the grid (both planes span the grid).
void conv_backward(const std::vector<double>& weights, int in_ch, int out_ch, int radius,
                   const PlaneRef& grad, const PlaneMut& prev, const CellBox& box) {
  const int width = 2 * radius + 1;
  const int taps = width * width;
  for (int co = 0; co < out_ch; ++co) {
    const double* g = grad.data + co * grad.channel_stride();
    for (int ci = 0; ci < in_ch; ++ci) {
      double* p = prev.data + ci * prev.channel_stride();
      const double* w = weights.data() + (static_cast<std::size_t>(co) * in_ch + ci) * taps;
      for (int di = -radius; di <= radius; ++di) {
        for (int dj = -radius; dj <= radius; ++dj) {
          const double wt = w[(di + radius) * width + (dj + radius)];
          if (wt == 0.0) continue;
          const int jlo = std::max(box.j0, prev.j0 - dj);
          const int jhi = std::min(box.j1, prev.j0 + prev.cols - dj);
          if (jlo >= jhi) continue;
          const int n = jhi - jlo;
          for (int i = box.i0; i < box.i1; ++i) {
            const int si = i + di;
            if (si < prev.i0 || si >= prev.i0 + prev.rows) continue;
            double* __restrict prow =
                p + static_cast<std::size_t>(si - prev.i0) * prev.cols + (jlo + dj - prev.j0);
            const double* __restrict grow =
                g + static_cast<std::size_t>(i - grad.i0) * grad.cols + (jlo - grad.j0);
            for (int k = 0; k < n; ++k) prow[k] += wt * grow[k];
          }
        }
      }
    }
  }
}

double std_dev(std::span<const double> v) {
  if (v.empty()) return 0.0;
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

double unit_factor(const ModelConfig& c, int v) {
  if (c.unit_factors.empty()) return 1.0;
  return c.unit_factors.at(static_cast<std::size_t>(v));
}

}  // namespace

std::string to_string(ModelKind kind) { return kind == ModelKind::desk ? "desk" : "linear"; }

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "desk") return ModelKind::desk;
  if (s == "linear") return ModelKind::linear;
  throw std::invalid_argument("unknown model kind: " + s);
}

CellBox CellBox::intersect(const CellBox& o) const {
  return {std::max(i0, o.i0), std::min(i1, o.i1), std::max(j0, o.j0), std::min(j1, o.j1)};
}

CellBox CellBox::hull(const CellBox& o) const {
  if (empty()) return o;
  if (o.empty()) return *this;
  return {std::min(i0, o.i0), std::max(i1, o.i1), std::min(j0, o.j0), std::max(j1, o.j1)};
}

ForecastModel::ForecastModel(GridPtr grid, TargetSpec target, ModelConfig config)
    : grid_(std::move(grid)), target_(std::move(target)), config_(std::move(config)) {
  if (!grid_) throw std::invalid_argument("model needs a grid");
  if (!grid_->contains(target_.lat_index, target_.lon_index)) {
    throw std::invalid_argument("target outside grid");
  }
  if (config_.kind == ModelKind::desk && (config_.depth < 1 || config_.depth > 6)) {
    throw std::invalid_argument("depth must be in [1, 6]");
  }
  if (config_.stencil_radius < 1) throw std::invalid_argument("stencil radius must be >= 1");
  if (config_.hidden < 1) throw std::invalid_argument("hidden width must be >= 1");
  if (!config_.unit_factors.empty() &&
      config_.unit_factors.size() != static_cast<std::size_t>(grid_->n_vars())) {
    throw std::invalid_argument("unit_factors must have one entry per variable");
  }
  for (const auto& name : config_.masked_variables) grid_->variable_index(name);

  const int n_vars = grid_->n_vars();
  const VariableInfo tinfo = variable_info(grid_->variable(target_.variable_index));
  out_offset_ = tinfo.offset * unit_factor(config_, target_.variable_index);
  out_scale_ = tinfo.scale * unit_factor(config_, target_.variable_index);

  // Distance-decaying readout weights, normalised to sum to one.
  readout_spatial_.assign(grid_->n_cells(), 0.0);
  const CellBox support = readout_box();
  double total = 0.0;
  const double tlat = grid_->lat(target_.lat_index);
  const double tlon = grid_->lon(target_.lon_index);
  for (int i = support.i0; i < support.i1; ++i) {
    for (int j = support.j0; j < support.j1; ++j) {
      const double d = haversine(tlat, tlon, grid_->lat(i), grid_->lon(j));
      const double w = std::exp(-d / config_.readout_length_km);
      readout_spatial_[grid_->cell(i, j)] = w;
      total += w;
    }
  }
  for (double& w : readout_spatial_) w /= total;

  // Per-variable gains 1.6^-rank under a seeded permutation keep variable
  // importances well separated.
  Rng rng = make_rng(config_.seed, {0xdecc});
  std::vector<int> rank(static_cast<std::size_t>(n_vars));
  std::iota(rank.begin(), rank.end(), 0);
  std::shuffle(rank.begin(), rank.end(), rng);
  in_offset_.resize(static_cast<std::size_t>(n_vars));
  in_gain_.resize(static_cast<std::size_t>(n_vars));
  for (int v = 0; v < n_vars; ++v) {
    const VariableInfo info = variable_info(grid_->variable(v));
    const bool masked = std::find(config_.masked_variables.begin(), config_.masked_variables.end(),
                                  grid_->variable(v)) != config_.masked_variables.end();
    const double gain = masked ? 0.0 : std::pow(kGainRatio, -rank[static_cast<std::size_t>(v)]);
    in_offset_[static_cast<std::size_t>(v)] = info.offset * unit_factor(config_, v);
    in_gain_[static_cast<std::size_t>(v)] = gain / (info.scale * unit_factor(config_, v));
  }

  if (config_.kind == ModelKind::desk) {
    build_desk();
  } else {
    build_linear();
  }
  if (config_.weight_mismatch != 0.0) apply_mismatch();
}

CellBox ForecastModel::readout_box() const {
  if (config_.readout_radius <= 0) return grid_box();
  const int r = config_.readout_radius;
  return CellBox{target_.lat_index, target_.lat_index + 1, target_.lon_index, target_.lon_index + 1}
      .dilate(r)
      .intersect(grid_box());
}

CellBox ForecastModel::layer_box(int layer) const {
  const int depth = static_cast<int>(layers_.size());
  return readout_box().dilate((depth - layer) * config_.stencil_radius).intersect(grid_box());
}

void ForecastModel::build_desk() {
  const int n_vars = grid_->n_vars();
  const int radius = config_.stencil_radius;
  const int taps = (2 * radius + 1) * (2 * radius + 1);
  Rng rng = make_rng(config_.seed, {0x1a7e5});
  std::normal_distribution<double> normal(0.0, 1.0);

  layers_.resize(static_cast<std::size_t>(config_.depth));
  for (int l = 0; l < config_.depth; ++l) {
    Layer& layer = layers_[static_cast<std::size_t>(l)];
    layer.in_ch = l == 0 ? n_vars : config_.hidden;
    layer.out_ch = config_.hidden;
    layer.weights.resize(static_cast<std::size_t>(layer.out_ch) * layer.in_ch * taps);
    for (double& w : layer.weights) w = normal(rng);
    layer.bias.resize(static_cast<std::size_t>(layer.out_ch));
    for (double& b : layer.bias) b = 0.1 * normal(rng);
  }
  readout_channel_.resize(static_cast<std::size_t>(config_.hidden));
  double norm = 0.0;
  for (double& r : readout_channel_) {
    r = normal(rng);
    norm += r * r;
  }
  for (double& r : readout_channel_) r /= std::sqrt(norm);

  // Calibrate each layer on a probe field so pre-activations have the target
  // std and tanh stays in its smooth region.
  const FieldTensor probe = synth_field(config_.seed, grid_, kProbeStream, 0);
  const std::size_t cells = grid_->n_cells();
  std::vector<double> prev(static_cast<std::size_t>(n_vars) * cells);
  for (int v = 0; v < n_vars; ++v) {
    const VariableInfo info = variable_info(grid_->variable(v));
    const double gain = in_gain_[static_cast<std::size_t>(v)] * info.scale * unit_factor(config_, v);
    auto src = probe.variable(v);
    for (std::size_t n = 0; n < cells; ++n) {
      prev[static_cast<std::size_t>(v) * cells + n] = gain * (src[n] - info.offset) / info.scale;
    }
  }
  const CellBox all = grid_box();
  const int rows = grid_->n_lat();
  const int cols = grid_->n_lon();
  activation_std_.clear();
  for (auto& layer : layers_) {
    std::vector<double> z(static_cast<std::size_t>(layer.out_ch) * cells);
    conv_forward(layer.weights, {}, layer.in_ch, layer.out_ch, radius,
                 PlaneRef{prev.data(), 0, 0, rows, cols}, PlaneMut{z.data(), 0, 0, rows, cols}, all,
                 false);
    const double s = std_dev(z);
    if (s > 0.0) {
      for (double& w : layer.weights) w *= config_.target_activation_std / s;
    }
    conv_forward(layer.weights, layer.bias, layer.in_ch, layer.out_ch, radius,
                 PlaneRef{prev.data(), 0, 0, rows, cols}, PlaneMut{z.data(), 0, 0, rows, cols}, all);
    activation_std_.push_back(std_dev(z));
    prev = std::move(z);
  }
}

void ForecastModel::build_linear() {
  const int n_vars = grid_->n_vars();
  Rng rng = make_rng(config_.seed, {0x11ea4});
  std::uniform_int_distribution<int> coin(0, 1);
  const std::size_t cells = grid_->n_cells();
  linear_weights_.assign(static_cast<std::size_t>(n_vars) * cells, 0.0);
  for (int v = 0; v < n_vars; ++v) {
    const double sign = coin(rng) ? 1.0 : -1.0;
    // in_gain_ already holds rank gain / (scale * unit).
    const double coeff = sign * in_gain_[static_cast<std::size_t>(v)] * out_scale_ * config_.readout_scale;
    for (std::size_t n = 0; n < cells; ++n) {
      linear_weights_[static_cast<std::size_t>(v) * cells + n] = coeff * readout_spatial_[n];
    }
  }
}

void ForecastModel::apply_mismatch() {
  Rng rng = make_rng(config_.mismatch_seed, {0x7a0e});
  std::uniform_real_distribution<double> u(-config_.weight_mismatch, config_.weight_mismatch);
  auto perturb = [&](std::vector<double>& ws) {
    for (double& w : ws) w *= 1.0 + u(rng);
  };
  for (auto& layer : layers_) {
    perturb(layer.weights);
    perturb(layer.bias);
  }
  perturb(readout_channel_);
  perturb(linear_weights_);
}

std::string ForecastModel::id() const {
  std::string s = to_string(config_.kind);
  if (config_.kind == ModelKind::desk) s += "-d" + std::to_string(config_.depth);
  s += "-s" + std::to_string(config_.seed) + "/" + target_.name + "/" + target_.variable;
  return s;
}

int ForecastModel::receptive_radius() const {
  if (config_.readout_radius <= 0) return -1;
  const int depth = config_.kind == ModelKind::desk ? config_.depth : 0;
  return config_.readout_radius + depth * config_.stencil_radius;
}

void ForecastModel::normalise_input(const FieldTensor& x, const CellBox& box, std::span<double> out,
                                    int out_i0, int out_j0, int out_cols) const {
  const int n_vars = grid_->n_vars();
  const std::size_t rows = static_cast<std::size_t>(box.i1 - box.i0);
  const std::size_t stride = out.size() / static_cast<std::size_t>(n_vars);
  (void)rows;
  for (int v = 0; v < n_vars; ++v) {
    const double off = in_offset_[static_cast<std::size_t>(v)];
    const double gain = in_gain_[static_cast<std::size_t>(v)];
    for (int i = box.i0; i < box.i1; ++i) {
      for (int j = box.j0; j < box.j1; ++j) {
        out[static_cast<std::size_t>(v) * stride +
            static_cast<std::size_t>(i - out_i0) * out_cols + (j - out_j0)] =
            gain * (x.at(v, i, j) - off);
      }
    }
  }
}

double ForecastModel::readout(std::span<const double> last, const CellBox& box) const {
  const std::size_t cells = grid_->n_cells();
  double total = 0.0;
  for (std::size_t c = 0; c < readout_channel_.size(); ++c) {
    double s = 0.0;
    for (int i = box.i0; i < box.i1; ++i) {
      for (int j = box.j0; j < box.j1; ++j) {
        const std::size_t n = grid_->cell(i, j);
        s += readout_spatial_[n] * last[c * cells + n];
      }
    }
    total += readout_channel_[c] * s;
  }
  return total;
}

void ForecastModel::run_desk(const FieldTensor& x, std::vector<std::vector<double>>& acts) const {
  const std::size_t cells = grid_->n_cells();
  const int rows = grid_->n_lat();
  const int cols = grid_->n_lon();
  acts.assign(layers_.size() + 1, {});
  acts[0].assign(static_cast<std::size_t>(grid_->n_vars()) * cells, 0.0);
  normalise_input(x, layer_box(0), acts[0], 0, 0, cols);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    acts[l + 1].assign(static_cast<std::size_t>(layer.out_ch) * cells, 0.0);
    conv_forward(layer.weights, layer.bias, layer.in_ch, layer.out_ch, config_.stencil_radius,
                 PlaneRef{acts[l].data(), 0, 0, rows, cols},
                 PlaneMut{acts[l + 1].data(), 0, 0, rows, cols}, layer_box(static_cast<int>(l) + 1));
  }
}

double ForecastModel::forward(const FieldTensor& x) const {
  if (config_.kind == ModelKind::linear) return forward_anomaly(x);
  return out_offset_ + forward_anomaly(x);
}

double ForecastModel::forward_anomaly(const FieldTensor& x) const {
  if (x.size() != grid_->size()) throw std::invalid_argument("shape mismatch");
  if (config_.kind == ModelKind::linear) {
    long double s = 0.0L;
    auto vals = x.values();
    for (std::size_t n = 0; n < vals.size(); ++n) {
      s += static_cast<long double>(linear_weights_[n]) * vals[n];
    }
    return static_cast<double>(s);
  }
  std::vector<std::vector<double>> acts;
  run_desk(x, acts);
  return out_scale_ * config_.readout_scale * readout(acts.back(), readout_box());
}

FieldTensor ForecastModel::gradient(const FieldTensor& x, double* value) const {
  if (x.size() != grid_->size()) throw std::invalid_argument("shape mismatch");
  FieldTensor g(grid_, x.timestamp());
  if (config_.kind == ModelKind::linear) {
    std::copy(linear_weights_.begin(), linear_weights_.end(), g.values().begin());
    if (value) *value = forward(x);
    return g;
  }
  const std::size_t cells = grid_->n_cells();
  const int rows = grid_->n_lat();
  const int cols = grid_->n_lon();
  std::vector<std::vector<double>> acts;
  run_desk(x, acts);
  if (value) *value = out_offset_ + out_scale_ * config_.readout_scale * readout(acts.back(), readout_box());

  const double k = out_scale_ * config_.readout_scale;
  std::vector<double> grad(static_cast<std::size_t>(config_.hidden) * cells, 0.0);
  const CellBox rbox = readout_box();
  for (std::size_t c = 0; c < readout_channel_.size(); ++c) {
    for (int i = rbox.i0; i < rbox.i1; ++i) {
      for (int j = rbox.j0; j < rbox.j1; ++j) {
        const std::size_t n = grid_->cell(i, j);
        grad[c * cells + n] = k * readout_channel_[c] * readout_spatial_[n];
      }
    }
  }
  for (int l = static_cast<int>(layers_.size()); l >= 1; --l) {
    const Layer& layer = layers_[static_cast<std::size_t>(l - 1)];
    const CellBox box = layer_box(l);
    const auto& h = acts[static_cast<std::size_t>(l)];
    for (int c = 0; c < layer.out_ch; ++c) {
      for (int i = box.i0; i < box.i1; ++i) {
        const std::size_t base = static_cast<std::size_t>(c) * cells + grid_->cell(i, box.j0);
        for (int n = 0; n < box.j1 - box.j0; ++n) {
          const double a = h[base + n];
          grad[base + n] *= 1.0 - a * a;
        }
      }
    }
    std::vector<double> prev(static_cast<std::size_t>(layer.in_ch) * cells, 0.0);
    conv_backward(layer.weights, layer.in_ch, layer.out_ch, config_.stencil_radius,
                  PlaneRef{grad.data(), 0, 0, rows, cols}, PlaneMut{prev.data(), 0, 0, rows, cols},
                  box);
    grad = std::move(prev);
  }
  auto out = g.values();
  for (int v = 0; v < grid_->n_vars(); ++v) {
    const double gain = in_gain_[static_cast<std::size_t>(v)];
    for (std::size_t n = 0; n < cells; ++n) {
      out[static_cast<std::size_t>(v) * cells + n] = gain * grad[static_cast<std::size_t>(v) * cells + n];
    }
  }
  return g;
}

ForwardState ForecastModel::forward_state(const FieldTensor& x) const {
  if (x.size() != grid_->size()) throw std::invalid_argument("shape mismatch");
  ForwardState st;
  st.input = x;
  if (config_.kind == ModelKind::linear) {
    st.prediction = forward(x);
    return st;
  }
  run_desk(x, st.activations);
  st.prediction =
      out_offset_ + out_scale_ * config_.readout_scale * readout(st.activations.back(), readout_box());
  return st;
}

double ForecastModel::forward_patched(const ForwardState& base, const FieldTensor& perturbed,
                                      std::span<const CellBox> boxes) const {
  require_same_shape(base.input, perturbed);
  CellBox changed{};
  for (const auto& b : boxes) changed = changed.hull(b.intersect(grid_box()));
  if (changed.empty()) return base.prediction;

  if (config_.kind == ModelKind::linear) {
    long double delta = 0.0L;
    const std::size_t cells = grid_->n_cells();
    for (int i = changed.i0; i < changed.i1; ++i) {
      for (int j = changed.j0; j < changed.j1; ++j) {
        const bool inside = std::any_of(boxes.begin(), boxes.end(),
                                        [&](const CellBox& b) { return b.contains(i, j); });
        if (!inside) continue;
        for (int v = 0; v < grid_->n_vars(); ++v) {
          const std::size_t n = static_cast<std::size_t>(v) * cells + grid_->cell(i, j);
          delta += static_cast<long double>(linear_weights_[n]) *
                   (static_cast<long double>(perturbed.values()[n]) - base.input.values()[n]);
        }
      }
    }
    return static_cast<double>(static_cast<long double>(base.prediction) + delta);
  }

  const int radius = config_.stencil_radius;
  const CellBox grid_all = grid_box();
  const std::size_t cells = grid_->n_cells();
  const int cols = grid_->n_lon();

  CellBox prev_box = changed.intersect(layer_box(0));
  if (prev_box.empty()) return base.prediction;
  const int n_vars = grid_->n_vars();
  auto area = [](const CellBox& b) {
    return static_cast<std::size_t>(b.i1 - b.i0) * static_cast<std::size_t>(b.j1 - b.j0);
  };
  std::vector<double> prev_new(static_cast<std::size_t>(n_vars) * area(prev_box));
  normalise_input(perturbed, prev_box, prev_new, prev_box.i0, prev_box.j0, prev_box.j1 - prev_box.j0);

  std::vector<double> window;
  std::vector<double> next;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    const CellBox box = prev_box.dilate(radius).intersect(layer_box(static_cast<int>(l) + 1));
    if (box.empty()) return base.prediction;
    const CellBox win = box.dilate(radius).intersect(grid_all);
    const int wcols = win.j1 - win.j0;
    const std::size_t warea = area(win);
    window.assign(static_cast<std::size_t>(layer.in_ch) * warea, 0.0);
    const auto& old = base.activations[l];
    const int pcols = prev_box.j1 - prev_box.j0;
    const std::size_t parea = area(prev_box);
    for (int c = 0; c < layer.in_ch; ++c) {
      for (int i = win.i0; i < win.i1; ++i) {
        for (int j = win.j0; j < win.j1; ++j) {
          const double val =
              prev_box.contains(i, j)
                  ? prev_new[static_cast<std::size_t>(c) * parea +
                             static_cast<std::size_t>(i - prev_box.i0) * pcols + (j - prev_box.j0)]
                  : old[static_cast<std::size_t>(c) * cells + grid_->cell(i, j)];
          window[static_cast<std::size_t>(c) * warea + static_cast<std::size_t>(i - win.i0) * wcols +
                 (j - win.j0)] = val;
        }
      }
    }
    next.assign(static_cast<std::size_t>(layer.out_ch) * area(box), 0.0);
    conv_forward(layer.weights, layer.bias, layer.in_ch, layer.out_ch, radius,
                 PlaneRef{window.data(), win.i0, win.j0, win.i1 - win.i0, wcols},
                 PlaneMut{next.data(), box.i0, box.j0, box.i1 - box.i0, box.j1 - box.j0}, box);
    prev_new.swap(next);
    prev_box = box;
  }

  const CellBox rbox = prev_box.intersect(readout_box());
  const auto& last = base.activations.back();
  const int pcols = prev_box.j1 - prev_box.j0;
  const std::size_t parea = area(prev_box);
  double delta = 0.0;
  for (std::size_t c = 0; c < readout_channel_.size(); ++c) {
    double s = 0.0;
    for (int i = rbox.i0; i < rbox.i1; ++i) {
      for (int j = rbox.j0; j < rbox.j1; ++j) {
        const std::size_t n = grid_->cell(i, j);
        const double fresh = prev_new[c * parea + static_cast<std::size_t>(i - prev_box.i0) * pcols +
                                      (j - prev_box.j0)];
        s += readout_spatial_[n] * (fresh - last[c * cells + n]);
      }
    }
    delta += readout_channel_[c] * s;
  }
  (void)cols;
  return base.prediction + out_scale_ * config_.readout_scale * delta;
}

ForecastModel make_desk_model(std::uint64_t seed, GridPtr grid, TargetSpec target, int depth,
                              ModelConfig base) {
  base.kind = ModelKind::desk;
  base.seed = seed;
  base.depth = depth;
  return ForecastModel(std::move(grid), std::move(target), std::move(base));
}

ForecastModel make_linear_model(std::uint64_t seed, GridPtr grid, TargetSpec target, ModelConfig base) {
  base.kind = ModelKind::linear;
  base.seed = seed;
  return ForecastModel(std::move(grid), std::move(target), std::move(base));
}

double forward(const ForecastModel& model, const FieldTensor& x) { return model.forward(x); }

FieldTensor gradient(const ForecastModel& model, const FieldTensor& x) { return model.gradient(x); }

ForecastModel rescale_units(const ForecastModel& model, int v, double factor) {
  if (!(factor > 0.0)) throw std::invalid_argument("unit factor must be positive");
  ModelConfig cfg = model.config();
  if (cfg.unit_factors.empty()) cfg.unit_factors.assign(static_cast<std::size_t>(model.grid().n_vars()), 1.0);
  cfg.unit_factors.at(static_cast<std::size_t>(v)) *= factor;
  return ForecastModel(model.grid_ptr(), model.target(), std::move(cfg));
}

FieldTensor rescale_variable(const FieldTensor& x, int v, double factor) {
  FieldTensor out = x;
  for (double& val : out.variable(v)) val *= factor;
  return out;
}

TruthModel::TruthModel(ForecastModel truth, double noise_std, std::uint64_t seed)
    : truth_(std::move(truth)), noise_std_(noise_std), seed_(seed) {
  if (!(noise_std >= 0.0)) throw std::invalid_argument("noise_std must be >= 0");
}

double TruthModel::verification(const FieldTensor& x) const {
  double y = truth_.forward(x);
  if (noise_std_ > 0.0) {
    Rng rng = make_rng(seed_, {0x9015e, static_cast<std::uint64_t>(x.timestamp())});
    std::normal_distribution<double> normal(0.0, noise_std_);
    y += normal(rng);
  }
  return y;
}

TruthModel make_truth(const ForecastModel& model, std::uint64_t seed, double noise_std, double mismatch) {
  ModelConfig cfg = model.config();
  cfg.weight_mismatch = mismatch;
  cfg.mismatch_seed = seed;
  return TruthModel(ForecastModel(model.grid_ptr(), model.target(), std::move(cfg)), noise_std, seed);
}

ForecastOutcome evaluate(const ForecastModel& model, const TruthModel& truth, const FieldTensor& x) {
  ForecastOutcome o;
  o.prediction = model.forward(x);
  o.verification = truth.verification(x);
  o.abs_error = std::abs(o.prediction - o.verification);
  return o;
}

}  // namespace gradval
