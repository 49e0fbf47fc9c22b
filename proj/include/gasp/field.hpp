#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "gasp/geom.hpp"
#include "gasp/queries.hpp"
#include "gasp/scene.hpp"

namespace gasp {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class OutOfRegionError : public Error {
 public:
  using Error::Error;
};

enum class FieldMode : std::uint8_t { kFitPerScene = 0, kAmortized = 1 };

const char* mode_name(FieldMode m);
FieldMode mode_from_name(const std::string& name);

struct FieldConfig {
  double region = 16.0;  // grid covers [-region, region]^2
  double cell = 0.5;
  int channels = 32;
  int hidden = 32;
  int feature_dim = 16;
  int past_count = 3;
  int fourier_freqs = 4;
  /// Frequencies are pi 2^k / scale, so the lowest one does not alias over
  /// a span shorter than 2 scale.
  double z_scale = 4.0;
  double t_scale = 4.0;
  double leaky_slope = 0.01;
  FieldMode mode = FieldMode::kAmortized;

  int grid_size() const;
  int cells() const { return grid_size() * grid_size(); }
  int input_channels() const { return 2 * past_count; }
  int head_input() const { return channels + 4 * fourier_freqs; }
  void validate() const;
};

nlohmann::json field_config_to_json(const FieldConfig& c);
FieldConfig field_config_from_json(const nlohmann::json& j);

/// Named slice of the flat parameter vector; a rows x cols row-major tensor.
struct Section {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

/// Flat parameter storage shared by the encoder, the grid and the heads.
/// Gradients and optimizer moments use the same layout.
class FieldParams {
 public:
  FieldParams() = default;
  /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) from the seed, biases and
  /// the fit-per-scene grid zero.
  static FieldParams initialize(const FieldConfig& cfg, std::uint64_t seed);
  /// Every parameter zero; all logits are 0.
  static FieldParams zeros(const FieldConfig& cfg);

  const FieldConfig& config() const { return cfg_; }
  const std::vector<Section>& sections() const { return sections_; }
  const Section& section(const std::string& name) const;
  bool has_section(const std::string& name) const;

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }
  std::size_t size() const { return data_.size(); }

  Eigen::Map<RowMatrix> matrix(const std::string& name) { return matrix_in(data_, name); }
  Eigen::Map<const RowMatrix> matrix(const std::string& name) const { return matrix_in(data_, name); }
  /// Same section, viewed inside another buffer with this layout.
  Eigen::Map<RowMatrix> matrix_in(std::vector<double>& buffer, const std::string& name) const;
  Eigen::Map<const RowMatrix> matrix_in(const std::vector<double>& buffer, const std::string& name) const;

  /// Builds the section table for a config with zero-filled storage.
  explicit FieldParams(const FieldConfig& cfg);

 private:
  void add(const std::string& name, std::size_t rows, std::size_t cols);

  FieldConfig cfg_;
  std::vector<Section> sections_;
  std::vector<double> data_;
};

/// BEV grid: channels x cells, column j*W + i holds cell (i, j) whose centre
/// is (-R + (i + 0.5) cell, -R + (j + 0.5) cell).
using Grid = Eigen::MatrixXd;

/// Per-cell log1p(point count) and mean point height of each past scan:
/// 2K x cells. Hits outside the grid are ignored; missing scans leave zeros.
Eigen::MatrixXd pillar_histogram(const FieldConfig& cfg, std::span<const LidarScan> past_scans);

struct EncoderCache {
  Eigen::MatrixXd input;      // 2K x cells
  Eigen::MatrixXd embedded;   // C x cells
  Eigen::MatrixXd cols1;      // 9C x cells
  Eigen::MatrixXd pre1;       // C x cells
  Eigen::MatrixXd cols2;
  Eigen::MatrixXd pre2;
  Grid z;
};

/// Histogram -> linear embedding -> conv3x3 -> leaky -> conv3x3 -> leaky.
EncoderCache encode(const FieldParams& params, const Eigen::MatrixXd& histogram);
Grid encode_grid(const FieldParams& params, const Eigen::MatrixXd& histogram);
/// Accumulates d(loss)/d(encoder params) into `grad` given d(loss)/dZ.
void encode_backward(const FieldParams& params, const EncoderCache& cache, const Grid& dz,
                     std::vector<double>& grad);

/// The fit-per-scene grid parameter, copied out as a Grid.
Grid stored_grid(const FieldParams& params);

/// Bilinear sample of the grid at (x, y). Throws OutOfRegionError outside
/// [-R, R]^2. Coordinates within half a cell of the border clamp to the
/// outermost centres.
struct BilinearTap {
  int index[4] = {0, 0, 0, 0};
  double weight[4] = {0, 0, 0, 0};
};
BilinearTap bilinear_tap(const FieldConfig& cfg, double x, double y);
Eigen::VectorXd interpolate(const FieldConfig& cfg, const Grid& z, double x, double y);

/// [sin(w_k z), cos(w_k z)]_k followed by the same for t.
Eigen::VectorXd fourier_features(const FieldConfig& cfg, double z, double t);

enum class Head { kOccupancy = 0, kFeature = 1, kEgo = 2 };
const char* head_prefix(Head h);
int head_output(const FieldConfig& cfg, Head h);

struct FieldOutput {
  double occ_logit = 0.0;
  Eigen::VectorXd feature;
  double ego_logit = 0.0;
};

FieldOutput query_field(const FieldParams& params, const Grid& z, const Vec3& position, double t);

/// Head outputs for many points at once: out x N.
Eigen::MatrixXd evaluate_head(const FieldParams& params, const Grid& z, Head head,
                              std::span<const Vec3> positions, std::span<const double> times);

/// d(head output component)/d(z, t) at one point.
struct InputGradient {
  Eigen::VectorXd d_dz;
  Eigen::VectorXd d_dt;
};
InputGradient head_input_gradient(const FieldParams& params, const Grid& z, Head head, const Vec3& position,
                                  double t);

struct LossWeights {
  double occ = 1.0;
  double dino = 0.5;
  double ego = 0.1;
  /// Per-term means (default) or one mean over the whole batch.
  bool per_term_average = true;
};

struct LossBreakdown {
  double total = 0.0;
  double occ = 0.0;   // mean BCE over occupancy queries
  double dino = 0.0;  // mean L1 over feature queries
  double ego = 0.0;   // mean BCE over ego queries
  std::size_t n_occ = 0;
  std::size_t n_feat = 0;
  std::size_t n_ego = 0;
};

/// log(1 + exp(-|x|)) + max(x, 0) - x y.
double stable_bce(double logit, double label);
double sigmoid(double x);

/// Loss for a batch against a given grid. When `grad` is non-null the head
/// gradients are accumulated into it and dL/dZ into `dz` (both required).
LossBreakdown grid_loss(const FieldParams& params, const Grid& z, std::span<const Query> batch,
                        const LossWeights& w, std::vector<double>* grad = nullptr, Grid* dz = nullptr,
                        int workers = 1);

/// Full loss of one sample: encodes the histogram in amortized mode or uses
/// the stored grid in fit-per-scene mode. `grad` receives the full gradient.
LossBreakdown sample_loss(const FieldParams& params, const Eigen::MatrixXd& histogram,
                          std::span<const Query> batch, const LossWeights& w, std::vector<double>* grad = nullptr,
                          int workers = 1);

/// Grid the model uses for a sample.
Grid field_grid(const FieldParams& params, const Eigen::MatrixXd& histogram);

}  // namespace gasp
