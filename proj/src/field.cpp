#include "gasp/field.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "gasp/parallel.hpp"
#include "gasp/rng.hpp"
#include "gasp/scene_io.hpp"

namespace gasp {

using nlohmann::json;

const char* mode_name(FieldMode m) { return m == FieldMode::kFitPerScene ? "fit_per_scene" : "amortized"; }

FieldMode mode_from_name(const std::string& name) {
  if (name == "fit_per_scene") return FieldMode::kFitPerScene;
  if (name == "amortized") return FieldMode::kAmortized;
  throw ConfigError("unknown field mode '" + name + "' (expected fit_per_scene or amortized)");
}

int FieldConfig::grid_size() const { return static_cast<int>(std::lround(2.0 * region / cell)); }

void FieldConfig::validate() const {
  if (!(region > 0.0) || !(cell > 0.0)) throw Error("FieldConfig: region and cell must be positive");
  if (std::abs(grid_size() * cell - 2.0 * region) > 1e-9 * region) {
    throw Error("FieldConfig: 2 * region must be a multiple of cell");
  }
  if (grid_size() < 2) throw Error("FieldConfig: grid needs at least 2 cells per side");
  if (channels < 1 || hidden < 1 || feature_dim < 0 || past_count < 1 || fourier_freqs < 1) {
    throw Error("FieldConfig: channels, hidden, past_count and fourier_freqs must be positive");
  }
  if (!(z_scale > 0.0) || !(t_scale > 0.0)) throw Error("FieldConfig: Fourier scales must be positive");
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw Error("FieldConfig: leaky_slope must be in [0, 1)");
}

json field_config_to_json(const FieldConfig& c) {
  return {{"region", c.region},
          {"cell", c.cell},
          {"channels", c.channels},
          {"hidden", c.hidden},
          {"feature_dim", c.feature_dim},
          {"past_count", c.past_count},
          {"fourier_freqs", c.fourier_freqs},
          {"z_scale", c.z_scale},
          {"t_scale", c.t_scale},
          {"leaky_slope", c.leaky_slope},
          {"mode", mode_name(c.mode)}};
}

FieldConfig field_config_from_json(const json& j) {
  using namespace json_util;
  const std::string p = "field";
  FieldConfig c;
  c.region = number_or(j, "region", c.region, p);
  c.cell = number_or(j, "cell", c.cell, p);
  c.channels = integer_or(j, "channels", c.channels, p);
  c.hidden = integer_or(j, "hidden", c.hidden, p);
  c.feature_dim = integer_or(j, "feature_dim", c.feature_dim, p);
  c.past_count = integer_or(j, "past_count", c.past_count, p);
  c.fourier_freqs = integer_or(j, "fourier_freqs", c.fourier_freqs, p);
  c.z_scale = number_or(j, "z_scale", c.z_scale, p);
  c.t_scale = number_or(j, "t_scale", c.t_scale, p);
  c.leaky_slope = number_or(j, "leaky_slope", c.leaky_slope, p);
  if (j.contains("mode")) {
    if (!j.at("mode").is_string()) throw ConfigError(p + ".mode: expected a string");
    c.mode = mode_from_name(j.at("mode").get<std::string>());
  }
  try {
    c.validate();
  } catch (const Error& e) {
    throw ConfigError(p + ": " + e.what());
  }
  return c;
}

// ---- parameters -------------------------------------------------------------

const char* head_prefix(Head h) {
  switch (h) {
    case Head::kOccupancy: return "occ";
    case Head::kFeature: return "feat";
    case Head::kEgo: return "ego";
  }
  return "";
}

int head_output(const FieldConfig& cfg, Head h) { return h == Head::kFeature ? cfg.feature_dim : 1; }

FieldParams::FieldParams(const FieldConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  const std::size_t c = static_cast<std::size_t>(cfg.channels);
  if (cfg.mode == FieldMode::kAmortized) {
    add("enc.embed.w", c, static_cast<std::size_t>(cfg.input_channels()));
    add("enc.embed.b", c, 1);
    add("enc.conv1.w", c, 9 * c);
    add("enc.conv1.b", c, 1);
    add("enc.conv2.w", c, 9 * c);
    add("enc.conv2.b", c, 1);
  } else {
    add("grid.z", static_cast<std::size_t>(cfg.cells()), c);
  }
  const std::size_t in = static_cast<std::size_t>(cfg.head_input());
  const std::size_t hid = static_cast<std::size_t>(cfg.hidden);
  for (Head h : {Head::kOccupancy, Head::kFeature, Head::kEgo}) {
    const std::string p = head_prefix(h);
    const std::size_t out = static_cast<std::size_t>(head_output(cfg, h));
    add(p + ".l1.w", hid, in);
    add(p + ".l1.b", hid, 1);
    add(p + ".l2.w", hid, hid);
    add(p + ".l2.b", hid, 1);
    add(p + ".out.w", out, hid);
    add(p + ".out.b", out, 1);
  }
  data_.assign(sections_.empty() ? 0 : sections_.back().offset + sections_.back().size(), 0.0);
}

void FieldParams::add(const std::string& name, std::size_t rows, std::size_t cols) {
  const std::size_t offset = sections_.empty() ? 0 : sections_.back().offset + sections_.back().size();
  sections_.push_back({name, offset, rows, cols});
}

FieldParams FieldParams::zeros(const FieldConfig& cfg) { return FieldParams(cfg); }

FieldParams FieldParams::initialize(const FieldConfig& cfg, std::uint64_t seed) {
  FieldParams p(cfg);
  for (std::size_t s = 0; s < p.sections_.size(); ++s) {
    const Section& sec = p.sections_[s];
    if (!sec.name.ends_with(".w")) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(sec.cols));
    RandomStream rng(seed, stream_id(StreamDomain::kInit, s));
    for (std::size_t i = 0; i < sec.size(); ++i) p.data_[sec.offset + i] = rng.uniform(-bound, bound);
  }
  return p;
}

const Section& FieldParams::section(const std::string& name) const {
  for (const Section& s : sections_) {
    if (s.name == name) return s;
  }
  throw Error("FieldParams: no section named '" + name + "'");
}

bool FieldParams::has_section(const std::string& name) const {
  return std::any_of(sections_.begin(), sections_.end(), [&](const Section& s) { return s.name == name; });
}

Eigen::Map<RowMatrix> FieldParams::matrix_in(std::vector<double>& buffer, const std::string& name) const {
  const Section& s = section(name);
  if (buffer.size() != data_.size()) throw Error("FieldParams: buffer layout mismatch");
  return {buffer.data() + s.offset, static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols)};
}

Eigen::Map<const RowMatrix> FieldParams::matrix_in(const std::vector<double>& buffer, const std::string& name) const {
  const Section& s = section(name);
  if (buffer.size() != data_.size()) throw Error("FieldParams: buffer layout mismatch");
  return {buffer.data() + s.offset, static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols)};
}

// ---- encoder ----------------------------------------------------------------

Eigen::MatrixXd pillar_histogram(const FieldConfig& cfg, std::span<const LidarScan> past_scans) {
  const int n = cfg.grid_size();
  Eigen::MatrixXd hist = Eigen::MatrixXd::Zero(cfg.input_channels(), cfg.cells());
  const std::size_t used = std::min(past_scans.size(), static_cast<std::size_t>(cfg.past_count));
  for (std::size_t k = 0; k < used; ++k) {
    Eigen::VectorXd count = Eigen::VectorXd::Zero(cfg.cells());
    Eigen::VectorXd height = Eigen::VectorXd::Zero(cfg.cells());
    for (const Ray& ray : past_scans[k].rays) {
      if (ray.miss) continue;
      const double gx = std::floor((ray.endpoint.x() + cfg.region) / cfg.cell);
      const double gy = std::floor((ray.endpoint.y() + cfg.region) / cfg.cell);
      if (!(gx >= 0.0 && gx < n && gy >= 0.0 && gy < n)) continue;
      const int cell = static_cast<int>(gy) * n + static_cast<int>(gx);
      count(cell) += 1.0;
      height(cell) += ray.endpoint.z();
    }
    for (int c = 0; c < cfg.cells(); ++c) {
      hist(2 * static_cast<Eigen::Index>(k), c) = std::log1p(count(c));
      hist(2 * static_cast<Eigen::Index>(k) + 1, c) = count(c) > 0.0 ? height(c) / count(c) : 0.0;
    }
  }
  return hist;
}

namespace {

// 3x3 zero-padded neighbourhoods: rows (ky * 3 + kx) * C + c.
Eigen::MatrixXd im2col(const Eigen::MatrixXd& src, int n) {
  const Eigen::Index c = src.rows();
  Eigen::MatrixXd cols = Eigen::MatrixXd::Zero(9 * c, src.cols());
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      double* dst = cols.col(j * n + i).data();
      for (int ky = 0; ky < 3; ++ky) {
        const int sj = j + ky - 1;
        if (sj < 0 || sj >= n) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int si = i + kx - 1;
          if (si < 0 || si >= n) continue;
          std::memcpy(dst + (ky * 3 + kx) * c, src.col(sj * n + si).data(), sizeof(double) * c);
        }
      }
    }
  }
  return cols;
}

Eigen::MatrixXd col2im(const Eigen::MatrixXd& cols, int n, Eigen::Index c) {
  Eigen::MatrixXd dst = Eigen::MatrixXd::Zero(c, cols.cols());
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      const double* src = cols.col(j * n + i).data();
      for (int ky = 0; ky < 3; ++ky) {
        const int sj = j + ky - 1;
        if (sj < 0 || sj >= n) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int si = i + kx - 1;
          if (si < 0 || si >= n) continue;
          dst.col(sj * n + si) += Eigen::Map<const Eigen::VectorXd>(src + (ky * 3 + kx) * c, c);
        }
      }
    }
  }
  return dst;
}

Eigen::MatrixXd leaky(const Eigen::MatrixXd& a, double slope) {
  return a.unaryExpr([slope](double v) { return v > 0.0 ? v : slope * v; });
}

Eigen::MatrixXd leaky_backward(const Eigen::MatrixXd& pre, const Eigen::MatrixXd& upstream, double slope) {
  return upstream.binaryExpr(pre, [slope](double g, double v) { return v > 0.0 ? g : slope * g; });
}

Eigen::VectorXd as_vector(const Eigen::Map<const RowMatrix>& m) {
  return Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
}

}  // namespace

EncoderCache encode(const FieldParams& params, const Eigen::MatrixXd& histogram) {
  const FieldConfig& cfg = params.config();
  if (cfg.mode != FieldMode::kAmortized) throw Error("encode: field has no encoder (fit_per_scene mode)");
  if (histogram.rows() != cfg.input_channels() || histogram.cols() != cfg.cells()) {
    throw Error("encode: histogram shape does not match the field config");
  }
  const int n = cfg.grid_size();
  EncoderCache cache;
  cache.input = histogram;
  cache.embedded = params.matrix("enc.embed.w") * histogram;
  cache.embedded.colwise() += as_vector(params.matrix("enc.embed.b"));
  cache.cols1 = im2col(cache.embedded, n);
  cache.pre1 = params.matrix("enc.conv1.w") * cache.cols1;
  cache.pre1.colwise() += as_vector(params.matrix("enc.conv1.b"));
  cache.cols2 = im2col(leaky(cache.pre1, cfg.leaky_slope), n);
  cache.pre2 = params.matrix("enc.conv2.w") * cache.cols2;
  cache.pre2.colwise() += as_vector(params.matrix("enc.conv2.b"));
  cache.z = leaky(cache.pre2, cfg.leaky_slope);
  return cache;
}

Grid encode_grid(const FieldParams& params, const Eigen::MatrixXd& histogram) {
  return encode(params, histogram).z;
}

void encode_backward(const FieldParams& params, const EncoderCache& cache, const Grid& dz,
                     std::vector<double>& grad) {
  const FieldConfig& cfg = params.config();
  const int n = cfg.grid_size();
  const Eigen::Index c = cfg.channels;
  const Eigen::MatrixXd da2 = leaky_backward(cache.pre2, dz, cfg.leaky_slope);
  params.matrix_in(grad, "enc.conv2.w").noalias() += da2 * cache.cols2.transpose();
  params.matrix_in(grad, "enc.conv2.b") += da2.rowwise().sum();
  const Eigen::MatrixXd dh1 = col2im(params.matrix("enc.conv2.w").transpose() * da2, n, c);
  const Eigen::MatrixXd da1 = leaky_backward(cache.pre1, dh1, cfg.leaky_slope);
  params.matrix_in(grad, "enc.conv1.w").noalias() += da1 * cache.cols1.transpose();
  params.matrix_in(grad, "enc.conv1.b") += da1.rowwise().sum();
  const Eigen::MatrixXd de = col2im(params.matrix("enc.conv1.w").transpose() * da1, n, c);
  params.matrix_in(grad, "enc.embed.w").noalias() += de * cache.input.transpose();
  params.matrix_in(grad, "enc.embed.b") += de.rowwise().sum();
}

Grid stored_grid(const FieldParams& params) {
  const FieldConfig& cfg = params.config();
  const Section& s = params.section("grid.z");
  return Eigen::Map<const Eigen::MatrixXd>(params.data().data() + s.offset, cfg.channels, cfg.cells());
}

Grid field_grid(const FieldParams& params, const Eigen::MatrixXd& histogram) {
  return params.config().mode == FieldMode::kAmortized ? encode_grid(params, histogram) : stored_grid(params);
}

// ---- interpolation and encodings ------------------------------------------------

BilinearTap bilinear_tap(const FieldConfig& cfg, double x, double y) {
  if (!(std::abs(x) <= cfg.region) || !(std::abs(y) <= cfg.region)) {
    throw OutOfRegionError("query (" + std::to_string(x) + ", " + std::to_string(y) + ") outside the grid region ±" +
                           std::to_string(cfg.region));
  }
  const int n = cfg.grid_size();
  auto axis = [&](double v, int& i0, double& f) {
    const double g = std::clamp((v + cfg.region) / cfg.cell - 0.5, 0.0, static_cast<double>(n - 1));
    i0 = std::min(static_cast<int>(std::floor(g)), n - 2);
    f = g - i0;
  };
  int i0 = 0, j0 = 0;
  double fx = 0.0, fy = 0.0;
  axis(x, i0, fx);
  axis(y, j0, fy);
  BilinearTap tap;
  tap.index[0] = j0 * n + i0;
  tap.index[1] = j0 * n + i0 + 1;
  tap.index[2] = (j0 + 1) * n + i0;
  tap.index[3] = (j0 + 1) * n + i0 + 1;
  tap.weight[0] = (1.0 - fx) * (1.0 - fy);
  tap.weight[1] = fx * (1.0 - fy);
  tap.weight[2] = (1.0 - fx) * fy;
  tap.weight[3] = fx * fy;
  return tap;
}

Eigen::VectorXd interpolate(const FieldConfig& cfg, const Grid& z, double x, double y) {
  const BilinearTap tap = bilinear_tap(cfg, x, y);
  Eigen::VectorXd out = tap.weight[0] * z.col(tap.index[0]);
  for (int k = 1; k < 4; ++k) out += tap.weight[k] * z.col(tap.index[k]);
  return out;
}

Eigen::VectorXd fourier_features(const FieldConfig& cfg, double z, double t) {
  const int f = cfg.fourier_freqs;
  Eigen::VectorXd out(4 * f);
  for (int k = 0; k < f; ++k) {
    const double wz = std::numbers::pi * std::ldexp(1.0, k) / cfg.z_scale;
    const double wt = std::numbers::pi * std::ldexp(1.0, k) / cfg.t_scale;
    out(2 * k) = std::sin(wz * z);
    out(2 * k + 1) = std::cos(wz * z);
    out(2 * f + 2 * k) = std::sin(wt * t);
    out(2 * f + 2 * k + 1) = std::cos(wt * t);
  }
  return out;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_bce(double logit, double label) {
  return std::log1p(std::exp(-std::abs(logit))) + std::max(logit, 0.0) - logit * label;
}

// ---- heads --------------------------------------------------------------------

namespace {

struct HeadWeights {
  Eigen::Map<const RowMatrix> w1, b1, w2, b2, w3, b3;
  HeadWeights(const FieldParams& p, Head h)
      : w1(p.matrix(std::string(head_prefix(h)) + ".l1.w")),
        b1(p.matrix(std::string(head_prefix(h)) + ".l1.b")),
        w2(p.matrix(std::string(head_prefix(h)) + ".l2.w")),
        b2(p.matrix(std::string(head_prefix(h)) + ".l2.b")),
        w3(p.matrix(std::string(head_prefix(h)) + ".out.w")),
        b3(p.matrix(std::string(head_prefix(h)) + ".out.b")) {}
};

struct HeadPass {
  std::vector<BilinearTap> taps;
  Eigen::MatrixXd u, a1, h1, a2, h2, out;
};

double silu(double a) { return a * sigmoid(a); }
double silu_grad(double a) {
  const double s = sigmoid(a);
  return s * (1.0 + a * (1.0 - s));
}

HeadPass head_forward(const FieldParams& params, const HeadWeights& hw, const Grid& z,
                      std::span<const Vec3> positions, std::span<const double> times) {
  const FieldConfig& cfg = params.config();
  const Eigen::Index b = static_cast<Eigen::Index>(positions.size());
  HeadPass pass;
  pass.taps.resize(positions.size());
  pass.u.resize(cfg.head_input(), b);
  for (Eigen::Index q = 0; q < b; ++q) {
    const Vec3& p = positions[q];
    const BilinearTap tap = bilinear_tap(cfg, p.x(), p.y());
    pass.taps[q] = tap;
    auto col = pass.u.col(q);
    col.head(cfg.channels) = tap.weight[0] * z.col(tap.index[0]) + tap.weight[1] * z.col(tap.index[1]) +
                             tap.weight[2] * z.col(tap.index[2]) + tap.weight[3] * z.col(tap.index[3]);
    col.tail(4 * cfg.fourier_freqs) = fourier_features(cfg, p.z(), times[q]);
  }
  pass.a1 = hw.w1 * pass.u;
  pass.a1.colwise() += as_vector(hw.b1);
  pass.h1 = pass.a1.unaryExpr(&silu);
  pass.a2 = hw.w2 * pass.h1;
  pass.a2.colwise() += as_vector(hw.b2);
  pass.h2 = pass.a2.unaryExpr(&silu);
  pass.out = hw.w3 * pass.h2;
  pass.out.colwise() += as_vector(hw.b3);
  return pass;
}

void head_backward(const FieldParams& params, const HeadWeights& hw, Head head, const HeadPass& pass,
                   const Eigen::MatrixXd& dout, std::vector<double>& grad, Grid& dz) {
  const FieldConfig& cfg = params.config();
  const std::string p = head_prefix(head);
  params.matrix_in(grad, p + ".out.w").noalias() += dout * pass.h2.transpose();
  params.matrix_in(grad, p + ".out.b") += dout.rowwise().sum();
  const Eigen::MatrixXd da2 = (hw.w3.transpose() * dout).cwiseProduct(pass.a2.unaryExpr(&silu_grad));
  params.matrix_in(grad, p + ".l2.w").noalias() += da2 * pass.h1.transpose();
  params.matrix_in(grad, p + ".l2.b") += da2.rowwise().sum();
  const Eigen::MatrixXd da1 = (hw.w2.transpose() * da2).cwiseProduct(pass.a1.unaryExpr(&silu_grad));
  params.matrix_in(grad, p + ".l1.w").noalias() += da1 * pass.u.transpose();
  params.matrix_in(grad, p + ".l1.b") += da1.rowwise().sum();
  const Eigen::MatrixXd du = hw.w1.leftCols(cfg.channels).transpose() * da1;
  for (std::size_t q = 0; q < pass.taps.size(); ++q) {
    const BilinearTap& tap = pass.taps[q];
    for (int k = 0; k < 4; ++k) {
      if (tap.weight[k] != 0.0) dz.col(tap.index[k]) += tap.weight[k] * du.col(static_cast<Eigen::Index>(q));
    }
  }
}

}  // namespace

Eigen::MatrixXd evaluate_head(const FieldParams& params, const Grid& z, Head head, std::span<const Vec3> positions,
                              std::span<const double> times) {
  if (positions.size() != times.size()) throw Error("evaluate_head: positions and times differ in length");
  const HeadWeights hw(params, head);
  constexpr std::size_t kBlock = 4096;
  Eigen::MatrixXd out(head_output(params.config(), head), static_cast<Eigen::Index>(positions.size()));
  for (std::size_t begin = 0; begin < positions.size(); begin += kBlock) {
    const std::size_t len = std::min(kBlock, positions.size() - begin);
    const HeadPass pass = head_forward(params, hw, z, positions.subspan(begin, len), times.subspan(begin, len));
    out.middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(len)) = pass.out;
  }
  return out;
}

FieldOutput query_field(const FieldParams& params, const Grid& z, const Vec3& position, double t) {
  FieldOutput out;
  const std::span<const Vec3> pos(&position, 1);
  const std::span<const double> time(&t, 1);
  out.occ_logit = evaluate_head(params, z, Head::kOccupancy, pos, time)(0, 0);
  out.feature = evaluate_head(params, z, Head::kFeature, pos, time).col(0);
  out.ego_logit = evaluate_head(params, z, Head::kEgo, pos, time)(0, 0);
  return out;
}

InputGradient head_input_gradient(const FieldParams& params, const Grid& z, Head head, const Vec3& position,
                                  double t) {
  const FieldConfig& cfg = params.config();
  const HeadWeights hw(params, head);
  const HeadPass pass = head_forward(params, hw, z, std::span(&position, 1), std::span(&t, 1));
  const Eigen::VectorXd s1 = pass.a1.col(0).unaryExpr(&silu_grad);
  const Eigen::VectorXd s2 = pass.a2.col(0).unaryExpr(&silu_grad);
  const Eigen::MatrixXd jac = hw.w3 * s2.asDiagonal() * hw.w2 * s1.asDiagonal() * hw.w1;
  const int f = cfg.fourier_freqs;
  Eigen::VectorXd dfz = Eigen::VectorXd::Zero(cfg.head_input());
  Eigen::VectorXd dft = Eigen::VectorXd::Zero(cfg.head_input());
  for (int k = 0; k < f; ++k) {
    const double wz = std::numbers::pi * std::ldexp(1.0, k) / cfg.z_scale;
    const double wt = std::numbers::pi * std::ldexp(1.0, k) / cfg.t_scale;
    dfz(cfg.channels + 2 * k) = wz * std::cos(wz * position.z());
    dfz(cfg.channels + 2 * k + 1) = -wz * std::sin(wz * position.z());
    dft(cfg.channels + 2 * f + 2 * k) = wt * std::cos(wt * t);
    dft(cfg.channels + 2 * f + 2 * k + 1) = -wt * std::sin(wt * t);
  }
  return {jac * dfz, jac * dft};
}

// ---- loss -----------------------------------------------------------------------

namespace {

struct HeadBatch {
  std::vector<Vec3> positions;
  std::vector<double> times;
  std::vector<const Query*> queries;
};

struct PartialLoss {
  double occ_sum = 0.0;
  double dino_sum = 0.0;
  double ego_sum = 0.0;
};

// Loss sums and, optionally, gradients of one contiguous chunk of each head
// batch. `scale` holds the per-query coefficient of each term.
PartialLoss chunk_loss(const FieldParams& params, const Grid& z, const HeadBatch (&batches)[3],
                       const std::size_t (&begin)[3], const std::size_t (&end)[3], const double (&scale)[3],
                       std::vector<double>* grad, Grid* dz) {
  PartialLoss loss;
  const int d = params.config().feature_dim;
  for (int h = 0; h < 3; ++h) {
    if (end[h] <= begin[h]) continue;
    const Head head = static_cast<Head>(h);
    const HeadBatch& hb = batches[h];
    const std::size_t len = end[h] - begin[h];
    const HeadWeights hw(params, head);
    const HeadPass pass = head_forward(params, hw, z, std::span(hb.positions).subspan(begin[h], len),
                                       std::span(hb.times).subspan(begin[h], len));
    Eigen::MatrixXd dout;
    if (grad) dout.resize(pass.out.rows(), pass.out.cols());
    for (std::size_t k = 0; k < len; ++k) {
      const Query& q = *hb.queries[begin[h] + k];
      const Eigen::Index col = static_cast<Eigen::Index>(k);
      if (head == Head::kFeature) {
        double l1 = 0.0;
        for (int c = 0; c < d; ++c) {
          const double diff = pass.out(c, col) - q.feature[static_cast<std::size_t>(c)];
          l1 += std::abs(diff);
          if (grad) dout(c, col) = scale[h] * (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0)) / d;
        }
        loss.dino_sum += d > 0 ? l1 / d : 0.0;
      } else {
        const double logit = pass.out(0, col);
        const double y = q.label;
        (head == Head::kOccupancy ? loss.occ_sum : loss.ego_sum) += stable_bce(logit, y);
        if (grad) dout(0, col) = scale[h] * (sigmoid(logit) - y);
      }
    }
    if (grad) head_backward(params, hw, head, pass, dout, *grad, *dz);
  }
  return loss;
}

}  // namespace

LossBreakdown grid_loss(const FieldParams& params, const Grid& z, std::span<const Query> batch, const LossWeights& w,
                        std::vector<double>* grad, Grid* dz, int workers) {
  const FieldConfig& cfg = params.config();
  if (grad && !dz) throw Error("grid_loss: gradient requested without a dz buffer");
  if (grad && grad->size() != params.size()) throw Error("grid_loss: gradient buffer size mismatch");
  if (dz && (dz->rows() != cfg.channels || dz->cols() != cfg.cells())) {
    throw Error("grid_loss: dz shape mismatch");
  }

  HeadBatch batches[3];
  for (const Query& q : batch) {
    const int h = is_occupancy(q.tag) ? 0 : (is_feature(q.tag) ? 1 : 2);
    if (h == 1 && static_cast<int>(q.feature.size()) != cfg.feature_dim) {
      throw Error("grid_loss: feature target dimension does not match the field");
    }
    batches[h].positions.push_back(q.position);
    batches[h].times.push_back(q.time);
    batches[h].queries.push_back(&q);
  }
  LossBreakdown out;
  out.n_occ = batches[0].queries.size();
  out.n_feat = batches[1].queries.size();
  out.n_ego = batches[2].queries.size();
  const double lambda[3] = {w.occ, w.dino, w.ego};
  const std::size_t counts[3] = {out.n_occ, out.n_feat, out.n_ego};
  double scale[3];
  for (int h = 0; h < 3; ++h) {
    const double denom = w.per_term_average ? static_cast<double>(counts[h]) : static_cast<double>(batch.size());
    scale[h] = counts[h] > 0 ? lambda[h] / denom : 0.0;
  }

  // Static partition of each head batch; chunk results are summed in order.
  const std::size_t chunks = chunk_count(std::max({counts[0], counts[1], counts[2]}), workers);
  std::vector<PartialLoss> partial(std::max<std::size_t>(chunks, 1));
  std::vector<std::vector<double>> grads(grad && chunks > 1 ? chunks : 0);
  std::vector<Grid> dzs(grad && chunks > 1 ? chunks : 0);
  auto bounds = [&](std::size_t chunk, std::size_t count, std::size_t n_chunks) {
    return std::make_pair(count * chunk / n_chunks, count * (chunk + 1) / n_chunks);
  };
  auto run = [&](std::size_t chunk, std::size_t n_chunks, std::vector<double>* g, Grid* d) {
    std::size_t b[3], e[3];
    for (int h = 0; h < 3; ++h) std::tie(b[h], e[h]) = bounds(chunk, counts[h], n_chunks);
    partial[chunk] = chunk_loss(params, z, batches, b, e, scale, g, d);
  };
  if (chunks <= 1) {
    run(0, 1, grad, dz);
  } else {
    parallel_for(chunks, static_cast<int>(chunks), [&](std::size_t begin, std::size_t end, std::size_t) {
      for (std::size_t c = begin; c < end; ++c) {
        if (grad) {
          grads[c].assign(params.size(), 0.0);
          dzs[c] = Grid::Zero(cfg.channels, cfg.cells());
          run(c, chunks, &grads[c], &dzs[c]);
        } else {
          run(c, chunks, nullptr, nullptr);
        }
      }
    });
    if (grad) {
      for (std::size_t c = 0; c < chunks; ++c) {
        for (std::size_t i = 0; i < grad->size(); ++i) (*grad)[i] += grads[c][i];
        *dz += dzs[c];
      }
    }
  }

  PartialLoss sum;
  for (const PartialLoss& p : partial) {
    sum.occ_sum += p.occ_sum;
    sum.dino_sum += p.dino_sum;
    sum.ego_sum += p.ego_sum;
  }
  out.occ = out.n_occ ? sum.occ_sum / static_cast<double>(out.n_occ) : 0.0;
  out.dino = out.n_feat ? sum.dino_sum / static_cast<double>(out.n_feat) : 0.0;
  out.ego = out.n_ego ? sum.ego_sum / static_cast<double>(out.n_ego) : 0.0;
  if (w.per_term_average) {
    out.total = w.occ * out.occ + w.dino * out.dino + w.ego * out.ego;
  } else if (!batch.empty()) {
    out.total = (w.occ * sum.occ_sum + w.dino * sum.dino_sum + w.ego * sum.ego_sum) / static_cast<double>(batch.size());
  }
  return out;
}

LossBreakdown sample_loss(const FieldParams& params, const Eigen::MatrixXd& histogram, std::span<const Query> batch,
                          const LossWeights& w, std::vector<double>* grad, int workers) {
  const FieldConfig& cfg = params.config();
  if (cfg.mode == FieldMode::kAmortized) {
    const EncoderCache cache = encode(params, histogram);
    if (!grad) return grid_loss(params, cache.z, batch, w, nullptr, nullptr, workers);
    Grid dz = Grid::Zero(cfg.channels, cfg.cells());
    const LossBreakdown out = grid_loss(params, cache.z, batch, w, grad, &dz, workers);
    encode_backward(params, cache, dz, *grad);
    return out;
  }
  const Grid z = stored_grid(params);
  if (!grad) return grid_loss(params, z, batch, w, nullptr, nullptr, workers);
  Grid dz = Grid::Zero(cfg.channels, cfg.cells());
  const LossBreakdown out = grid_loss(params, z, batch, w, grad, &dz, workers);
  const Section& s = params.section("grid.z");
  Eigen::Map<Eigen::MatrixXd>(grad->data() + s.offset, cfg.channels, cfg.cells()) += dz;
  return out;
}

}  // namespace gasp
