#include "sbtip/fbsde.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <memory>
#include <numbers>

#include "sbtip/error.hpp"
#include "sbtip/text.hpp"

namespace sbtip {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

// Offsets of the parameter blocks for hidden width w.
struct Layout {
  std::size_t w;
  std::size_t w1() const { return 0; }
  std::size_t b1() const { return 4 * w; }
  std::size_t w2() const { return 5 * w; }
  std::size_t b2() const { return 5 * w + w * w; }
  std::size_t w3() const { return 6 * w + w * w; }
  std::size_t b3() const { return 8 * w + w * w; }
  std::size_t total() const { return 8 * w + w * w + 2; }
};

// tanh through the vectorized exponential. The absolute error stays at the
// rounding level, which is all the network needs.
void tanh_inplace(Eigen::MatrixXd& a) {
  const Eigen::ArrayXXd e = (-2.0 * a.array().abs()).exp();
  a.array() = ((1.0 - e) / (1.0 + e)) * a.array().sign();
}

Eigen::MatrixXd features(const InputScaling& s, double t, const Batch2& x) {
  Eigen::MatrixXd f(4, x.cols());
  f.row(0) = (x.row(0).array() - s.center.x) / s.scale.x;
  f.row(1) = (x.row(1).array() - s.center.y) / s.scale.y;
  f.row(2).setConstant(t / s.horizon);
  f.row(3).setConstant(1.0 - t / s.horizon);
  return f;
}

Vec2 column(const Batch2& b, Eigen::Index m) { return {b(0, m), b(1, m)}; }

void set_column(Batch2& b, Eigen::Index m, Vec2 v) {
  b(0, m) = v.x;
  b(1, m) = v.y;
}

// Backward-policy values and divergence estimates at step n. Columns of
// `stacked` are X_n followed by X_n + h e_p and X_n - h e_p for each probe.
struct StepTerms {
  Batch2 stacked;
  Batch2 zhat;
  Batch2 f_probe;  // drift at the probe points, same order as stacked minus block 0
  Eigen::VectorXd div;
};

StepTerms step_terms(const RolloutBatch& b, int n, const SdeModel& model, const Approximator& Zhat,
                     Approximator::Tape* tape) {
  const Eigen::Index M = static_cast<Eigen::Index>(b.size());
  const int P = b.options.probes;
  const double h = b.options.fd_step;
  const double t = b.time_grid.time(n);
  const Batch2& X = b.X[static_cast<std::size_t>(n)];
  StepTerms s;
  s.stacked.resize(2, M * (1 + 2 * P));
  s.stacked.leftCols(M) = X;
  for (int p = 0; p < P; ++p) {
    const Batch2& e = b.probe[static_cast<std::size_t>(n * P + p)];
    s.stacked.middleCols(M * (1 + 2 * p), M) = X + h * e;
    s.stacked.middleCols(M * (2 + 2 * p), M) = X - h * e;
  }
  s.zhat = tape ? Zhat.forward(t, s.stacked, *tape) : Zhat.evaluate(t, s.stacked);
  s.f_probe.resize(2, 2 * P * M);
  for (Eigen::Index c = 0; c < 2 * P * M; ++c) {
    const Vec2 f = model.drift(t, column(s.stacked, M + c));
    if (!is_finite(f)) throw NonFiniteDriftError(t, static_cast<std::size_t>(c % M), static_cast<std::size_t>(n));
    set_column(s.f_probe, c, f);
  }
  const Vec2 sig = model.sigma(t);
  s.div = Eigen::VectorXd::Zero(M);
  for (int p = 0; p < P; ++p) {
    const Batch2& e = b.probe[static_cast<std::size_t>(n * P + p)];
    const auto plus = M * (1 + 2 * p), minus = M * (2 + 2 * p);
    for (Eigen::Index m = 0; m < M; ++m) {
      const double vx = sig.x * (s.zhat(0, plus + m) - s.zhat(0, minus + m)) -
                        (s.f_probe(0, plus - M + m) - s.f_probe(0, minus - M + m));
      const double vy = sig.y * (s.zhat(1, plus + m) - s.zhat(1, minus + m)) -
                        (s.f_probe(1, plus - M + m) - s.f_probe(1, minus - M + m));
      s.div(m) += e(0, m) * vx + e(1, m) * vy;
    }
  }
  s.div /= 2.0 * h * P;
  return s;
}

void require_same_size(const RolloutBatch& b, const Approximator& Z, const Approximator& Zhat) {
  if (b.X.empty() || b.size() == 0) throw Error(ErrorCode::EmptyInput, "rollout batch is empty");
  if (Z.width() < 1 || Zhat.width() < 1)
    throw Error(ErrorCode::InvalidArgument, "policy has no parameters");
}

void put_u32(std::ostream& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.put(static_cast<char>((v >> (8 * k)) & 0xff));
}

void put_u64(std::ostream& out, std::uint64_t v) {
  for (int k = 0; k < 8; ++k) out.put(static_cast<char>((v >> (8 * k)) & 0xff));
}

void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

std::uint64_t get_bytes(std::istream& in, int n, const std::string& path) {
  std::uint64_t v = 0;
  for (int k = 0; k < n; ++k) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof())
      throw Error(ErrorCode::ParseError, "checkpoint " + path + " is truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * k);
  }
  return v;
}

double get_f64(std::istream& in, const std::string& path) {
  return std::bit_cast<double>(get_bytes(in, 8, path));
}

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

Approximator::Approximator(int width, InputScaling scaling) : width_(width), scaling_(scaling) {
  if (width < 1) throw Error(ErrorCode::InvalidArgument, "hidden width must be >= 1");
  if (!(scaling.scale.x > 0.0) || !(scaling.scale.y > 0.0) || !(scaling.horizon > 0.0))
    throw Error(ErrorCode::InvalidArgument, "input scales and horizon must be > 0");
  theta_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(parameter_count(width)));
}

std::size_t Approximator::parameter_count(int width) {
  return Layout{static_cast<std::size_t>(width)}.total();
}

Approximator Approximator::initialized(int width, InputScaling scaling, std::uint64_t seed,
                                       double output_scale) {
  Approximator a(width, scaling);
  const Layout L{static_cast<std::size_t>(width)};
  RandomStream rs(seed, 0, StreamPurpose::Initialization);
  const auto fill = [&](std::size_t from, std::size_t to, double bound) {
    for (std::size_t k = from; k < to; ++k)
      a.theta_(static_cast<Eigen::Index>(k)) = bound * (2.0 * rs.uniform() - 1.0);
  };
  const double in_bound = 0.5, hidden_bound = 1.0 / std::sqrt(static_cast<double>(width));
  fill(L.w1(), L.w2(), in_bound);  // W1 and b1
  fill(L.w2(), L.w3(), hidden_bound);
  fill(L.w3(), L.b3(), hidden_bound * output_scale);
  return a;
}

Batch2 Approximator::forward(double t, const Batch2& x, Tape& tape) const {
  if (width_ < 1) throw Error(ErrorCode::InvalidArgument, "policy has no parameters");
  const Layout L{static_cast<std::size_t>(width_)};
  const double* p = theta_.data();
  const ConstRowMap W1(p + L.w1(), width_, kInputs), W2(p + L.w2(), width_, width_),
      W3(p + L.w3(), kOutputs, width_);
  const ConstVecMap b1(p + L.b1(), width_), b2(p + L.b2(), width_), b3(p + L.b3(), kOutputs);
  tape.input = features(scaling_, t, x);
  tape.h1.noalias() = W1 * tape.input;
  tape.h1.colwise() += b1;
  tanh_inplace(tape.h1);
  tape.h2.noalias() = W2 * tape.h1;
  tape.h2.colwise() += b2;
  tanh_inplace(tape.h2);
  Batch2 out = W3 * tape.h2;
  out.colwise() += b3;
  return out;
}

Batch2 Approximator::evaluate(double t, const Batch2& x) const {
  Tape tape;
  return forward(t, x, tape);
}

Vec2 Approximator::evaluate(double t, Vec2 x) const {
  Batch2 b(2, 1);
  b << x.x, x.y;
  const Batch2 out = evaluate(t, b);
  return {out(0, 0), out(1, 0)};
}

Batch2 Approximator::backward(const Tape& tape, const Batch2& d_out, Eigen::VectorXd* grad) const {
  const Layout L{static_cast<std::size_t>(width_)};
  const double* p = theta_.data();
  const ConstRowMap W1(p + L.w1(), width_, kInputs), W2(p + L.w2(), width_, width_),
      W3(p + L.w3(), kOutputs, width_);
  if (grad && grad->size() != theta_.size())
    throw Error(ErrorCode::InvalidArgument, "gradient buffer has the wrong size");
  double* g = grad ? grad->data() : nullptr;

  if (g) {
    RowMap(g + L.w3(), kOutputs, width_).noalias() += d_out * tape.h2.transpose();
    VecMap(g + L.b3(), kOutputs) += d_out.rowwise().sum();
  }
  Eigen::MatrixXd d2 = W3.transpose() * d_out;
  d2.array() *= 1.0 - tape.h2.array().square();
  if (g) {
    RowMap(g + L.w2(), width_, width_).noalias() += d2 * tape.h1.transpose();
    VecMap(g + L.b2(), width_) += d2.rowwise().sum();
  }
  Eigen::MatrixXd d1 = W2.transpose() * d2;
  d1.array() *= 1.0 - tape.h1.array().square();
  if (g) {
    RowMap(g + L.w1(), width_, kInputs).noalias() += d1 * tape.input.transpose();
    VecMap(g + L.b1(), width_) += d1.rowwise().sum();
  }
  Batch2 dx = W1.leftCols(2).transpose() * d1;
  dx.row(0) /= scaling_.scale.x;
  dx.row(1) /= scaling_.scale.y;
  return dx;
}

void save_checkpoint(const std::string& path, const Approximator& a) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  out.write("SBPZ", 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, Approximator::kInputs);
  put_u32(out, static_cast<std::uint32_t>(a.width()));
  put_u32(out, static_cast<std::uint32_t>(a.width()));
  put_u32(out, Approximator::kOutputs);
  const auto& s = a.scaling();
  for (double v : {s.center.x, s.center.y, s.scale.x, s.scale.y, s.horizon}) put_f64(out, v);
  put_u64(out, static_cast<std::uint64_t>(a.parameters().size()));
  for (Eigen::Index k = 0; k < a.parameters().size(); ++k) put_f64(out, a.parameters()(k));
  if (!out) throw Error(ErrorCode::IoError, "failed writing " + path);
}

Approximator load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  if (!in || std::string(magic.data(), 4) != "SBPZ")
    throw Error(ErrorCode::ParseError, path + " is not a policy checkpoint");
  const auto version = get_bytes(in, 4, path);
  if (version != kCheckpointVersion)
    throw Error(ErrorCode::ParseError, "unsupported checkpoint version " + std::to_string(version));
  const auto inputs = get_bytes(in, 4, path), w1 = get_bytes(in, 4, path),
             w2 = get_bytes(in, 4, path), outputs = get_bytes(in, 4, path);
  if (inputs != Approximator::kInputs || outputs != Approximator::kOutputs || w1 != w2 || w1 < 1 ||
      w1 > 65536)
    throw Error(ErrorCode::ParseError, "unsupported layer widths in " + path);
  InputScaling s;
  s.center.x = get_f64(in, path);
  s.center.y = get_f64(in, path);
  s.scale.x = get_f64(in, path);
  s.scale.y = get_f64(in, path);
  s.horizon = get_f64(in, path);
  Approximator a(static_cast<int>(w1), s);
  const auto count = get_bytes(in, 8, path);
  if (count != static_cast<std::uint64_t>(a.parameters().size()))
    throw Error(ErrorCode::ParseError, "parameter count does not match the widths in " + path);
  for (Eigen::Index k = 0; k < a.parameters().size(); ++k) a.parameters()(k) = get_f64(in, path);
  return a;
}

Batch2 sample_initial_states(const StateSampler& sampler, std::size_t M, std::uint64_t seed) {
  if (M < 1) throw Error(ErrorCode::InvalidArgument, "batch size must be >= 1");
  Batch2 x(2, static_cast<Eigen::Index>(M));
  for (std::size_t m = 0; m < M; ++m) {
    RandomStream init(seed, m, StreamPurpose::InitialState);
    set_column(x, static_cast<Eigen::Index>(m), sampler(init));
  }
  return x;
}

std::vector<Vec2> to_points(const Batch2& x) {
  std::vector<Vec2> out(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index m = 0; m < x.cols(); ++m) out[static_cast<std::size_t>(m)] = column(x, m);
  return out;
}

Batch2 to_batch(const std::vector<Vec2>& points) {
  Batch2 x(2, static_cast<Eigen::Index>(points.size()));
  for (std::size_t m = 0; m < points.size(); ++m) set_column(x, static_cast<Eigen::Index>(m), points[m]);
  return x;
}

double hutchinson_divergence(const std::function<Vec2(Vec2)>& V, Vec2 x, int probes, double h,
                             RandomStream& rs) {
  if (probes < 1 || !(h > 0.0)) throw Error(ErrorCode::InvalidArgument, "need probes >= 1 and h > 0");
  double acc = 0.0;
  for (int p = 0; p < probes; ++p) {
    const Vec2 e{rs.rademacher(), rs.rademacher()};
    acc += dot(e, V(x + h * e) - V(x - h * e));
  }
  return acc / (2.0 * h * probes);
}

RolloutBatch forward_rollout(const SdeModel& model, const Approximator& Z, const Batch2& x0,
                             const TimeGrid& tg, std::uint64_t seed, const RolloutOptions& options,
                             const Approximator* Zhat) {
  if (x0.cols() < 1) throw Error(ErrorCode::EmptyInput, "no initial states");
  if (options.probes < 1 || !(options.fd_step > 0.0))
    throw Error(ErrorCode::InvalidArgument, "need probes >= 1 and fd_step > 0");
  model.validate();
  const Eigen::Index M = x0.cols();
  const int N = tg.steps(), P = options.probes;
  const double dt = tg.dt();
  RolloutBatch b;
  b.time_grid = tg;
  b.seed = seed;
  b.options = options;
  b.X.assign(static_cast<std::size_t>(N) + 1, Batch2(2, M));
  b.xi.assign(static_cast<std::size_t>(N), Batch2(2, M));
  b.probe.assign(static_cast<std::size_t>(N) * P, Batch2(2, M));
  b.Z.assign(static_cast<std::size_t>(N), Batch2(2, M));
  b.inside.assign(static_cast<std::size_t>(N), Batch2(2, M));
  for (Eigen::Index m = 0; m < M; ++m) {
    const auto id = static_cast<std::uint64_t>(m);
    RandomStream noise(seed, id, StreamPurpose::Increments), probes(seed, id, StreamPurpose::Probes);
    for (auto& xi : b.xi) {
      xi(0, m) = noise.normal();
      xi(1, m) = noise.normal();
    }
    for (auto& e : b.probe) {
      e(0, m) = probes.rademacher();
      e(1, m) = probes.rademacher();
    }
    set_column(b.X[0], m, model.clamp(column(x0, m)));
  }
  if (Zhat) {
    b.Y = Eigen::MatrixXd::Zero(N + 1, M);
    b.Yhat = Eigen::MatrixXd::Zero(N + 1, M);
  }
  const double sq = std::sqrt(dt);
  for (int n = 0; n < N; ++n) {
    const auto sn = static_cast<std::size_t>(n);
    const double t = tg.time(n);
    const Vec2 sig = model.sigma(t);
    const Batch2& X = b.X[sn];
    b.Z[sn] = Z.evaluate(t, X);
    for (Eigen::Index m = 0; m < M; ++m) {
      const Vec2 x = column(X, m), z = column(b.Z[sn], m);
      if (!is_finite(z)) throw NonFinitePolicyError(t, x.x, x.y, static_cast<std::size_t>(m));
      const Vec2 f = model.drift(t, x);
      if (!is_finite(f)) throw NonFiniteDriftError(t, static_cast<std::size_t>(m), sn);
      const Vec2 pre = euler_increment(x, f + hadamard(sig, z), sig, dt, column(b.xi[sn], m));
      const Vec2 post = model.clamp(pre);
      set_column(b.X[sn + 1], m, post);
      set_column(b.inside[sn], m, {pre.x == post.x ? 1.0 : 0.0, pre.y == post.y ? 1.0 : 0.0});
    }
    if (Zhat) {
      const StepTerms s = step_terms(b, n, model, *Zhat, nullptr);
      for (Eigen::Index m = 0; m < M; ++m) {
        const Vec2 z = column(b.Z[sn], m), zh = column(s.zhat, m);
        const Vec2 dw = sq * column(b.xi[sn], m);
        b.Y(n + 1, m) = b.Y(n, m) + 0.5 * squared_norm(z) * dt + dot(z, dw);
        b.Yhat(n + 1, m) =
            b.Yhat(n, m) + (0.5 * squared_norm(zh) + s.div(m) + dot(zh, z)) * dt + dot(zh, dw);
      }
    }
  }
  return b;
}

LogDensityFn gaussian_log_density(Vec2 mean, Vec2 sd) {
  if (!(sd.x >= 0.0) || !(sd.y >= 0.0) || (sd.x == 0.0 && sd.y == 0.0))
    throw Error(ErrorCode::InvalidArgument, "Gaussian needs a positive standard deviation");
  return [mean, sd](Vec2 x, Vec2* grad) {
    double l = 0.0;
    Vec2 g{0.0, 0.0};
    if (sd.x > 0.0) {
      const double z = (x.x - mean.x) / sd.x;
      l += -0.5 * z * z - std::log(sd.x * std::sqrt(2.0 * std::numbers::pi));
      g.x = -z / sd.x;
    }
    if (sd.y > 0.0) {
      const double z = (x.y - mean.y) / sd.y;
      l += -0.5 * z * z - std::log(sd.y * std::sqrt(2.0 * std::numbers::pi));
      g.y = -z / sd.y;
    }
    if (grad) *grad = g;
    return l;
  };
}

LogDensityFn grid_log_density(const DensityField& rho) {
  const DensityField p = normalize(rho);
  const Grid2D g = p.grid();
  const double area = g.dx() * g.dy();
  auto logs = std::make_shared<std::vector<double>>(g.cells());
  for (std::size_t c = 0; c < g.cells(); ++c) (*logs)[c] = std::log(std::max(p[c] / area, 1e-300));
  // Per axis: bracketing centres, weight of the upper one and d(weight)/d(coordinate).
  const auto bracket = [](double pos, int n, double d, int& i0, int& i1, double& w, double& dw) {
    dw = 0.0;
    if (n == 1 || pos <= 0.0) {
      i0 = i1 = 0;
      w = 0.0;
    } else if (pos >= n - 1) {
      i0 = i1 = n - 1;
      w = 0.0;
    } else {
      i0 = static_cast<int>(pos);
      i1 = i0 + 1;
      w = pos - i0;
      dw = 1.0 / d;
    }
  };
  return [g, logs, bracket](Vec2 x, Vec2* grad) {
    int x0, x1, y0, y1;
    double wx, wy, dwx, dwy;
    bracket((x.x - g.xmin()) / g.dx() - 0.5, g.nx(), g.dx(), x0, x1, wx, dwx);
    bracket((x.y - g.ymin()) / g.dy() - 0.5, g.ny(), g.dy(), y0, y1, wy, dwy);
    const auto at = [&](int ix, int iy) { return (*logs)[g.index(ix, iy)]; };
    const double l00 = at(x0, y0), l10 = at(x1, y0), l01 = at(x0, y1), l11 = at(x1, y1);
    if (grad) {
      grad->x = dwx * ((1 - wy) * (l10 - l00) + wy * (l11 - l01));
      grad->y = dwy * ((1 - wx) * (l01 - l00) + wx * (l11 - l10));
    }
    return (1 - wy) * ((1 - wx) * l00 + wx * l10) + wy * ((1 - wx) * l01 + wx * l11);
  };
}

LogDensityTerminal::LogDensityTerminal(LogDensityFn f, double log_floor)
    : f_(std::move(f)), floor_(log_floor) {
  if (!f_) throw Error(ErrorCode::InvalidArgument, "terminal log density is empty");
}

double LogDensityTerminal::evaluate(const Batch2& xN, Batch2* grad) const {
  const Eigen::Index M = xN.cols();
  if (M < 1) throw Error(ErrorCode::EmptyInput, "empty terminal batch");
  if (grad) grad->setZero(2, M);
  double sum = 0.0;
  Eigen::Index under = 0;
  for (Eigen::Index m = 0; m < M; ++m) {
    Vec2 g;
    double l = f_(column(xN, m), &g);
    if (!(l >= floor_)) {
      l = floor_;
      g = {0.0, 0.0};
      ++under;
    }
    sum += l;
    if (grad) set_column(*grad, m, (-1.0 / static_cast<double>(M)) * g);
  }
  if (2 * under > M)
    throw Error(ErrorCode::TerminalDensityUnderflow,
                std::to_string(under) + " of " + std::to_string(M) +
                    " terminal states have ln rho1 below the floor " + format_double(floor_));
  return -sum / static_cast<double>(M);
}

TargetTerminal::TargetTerminal(std::vector<Vec2> targets) : targets_(std::move(targets)) {}

double TargetTerminal::evaluate(const Batch2& xN, Batch2* grad) const {
  const Eigen::Index M = xN.cols();
  if (M < 1) throw Error(ErrorCode::EmptyInput, "empty terminal batch");
  if (targets_.size() != static_cast<std::size_t>(M))
    throw Error(ErrorCode::UnassignedSample, std::to_string(M) + " trajectories but " +
                                                 std::to_string(targets_.size()) +
                                                 " assigned targets");
  if (grad) grad->resize(2, M);
  double sum = 0.0;
  for (Eigen::Index m = 0; m < M; ++m) {
    const Vec2 y = targets_[static_cast<std::size_t>(m)];
    if (!is_finite(y))
      throw Error(ErrorCode::UnassignedSample, "trajectory " + std::to_string(m) + " has no target");
    const Vec2 d = column(xN, m) - y;
    sum += squared_norm(d);
    if (grad) set_column(*grad, m, (2.0 / static_cast<double>(M)) * d);
  }
  return sum / static_cast<double>(M);
}

LossParts sb_likelihood_loss(const RolloutBatch& b, const SdeModel& model, const Approximator& Z,
                             const Approximator& Zhat, const TerminalObjective& terminal) {
  require_same_size(b, Z, Zhat);
  const Eigen::Index M = static_cast<Eigen::Index>(b.size());
  const double dt = b.time_grid.dt();
  LossParts L;
  for (int n = 0; n < b.time_grid.steps(); ++n) {
    const StepTerms s = step_terms(b, n, model, Zhat, nullptr);
    const Batch2 sum = b.Z[static_cast<std::size_t>(n)] + s.zhat.leftCols(M);
    L.running += dt * (0.5 * sum.colwise().squaredNorm().sum() + s.div.sum()) / static_cast<double>(M);
  }
  L.terminal = terminal.evaluate(b.X.back(), nullptr);
  return L;
}

LossParts sdot_terminal_loss(const RolloutBatch& batch, const SdeModel& model, const Approximator& Z,
                             const Approximator& Zhat, const std::vector<Vec2>& targets) {
  return sb_likelihood_loss(batch, model, Z, Zhat, TargetTerminal(targets));
}

LossGradient loss_gradient(const RolloutBatch& b, const SdeModel& model, const Approximator& Z,
                           const Approximator& Zhat, const TerminalObjective& terminal,
                           bool through_states) {
  require_same_size(b, Z, Zhat);
  const Eigen::Index M = static_cast<Eigen::Index>(b.size());
  const int N = b.time_grid.steps(), P = b.options.probes;
  const double dt = b.time_grid.dt(), h = b.options.fd_step;
  const double inv_m = 1.0 / static_cast<double>(M);
  const double c = dt * inv_m / (2.0 * h * P);

  LossGradient out;
  out.grad_Z = Eigen::VectorXd::Zero(Z.parameters().size());
  out.grad_Zhat = Eigen::VectorXd::Zero(Zhat.parameters().size());
  Batch2 a;  // dL/dX_{n+1}
  out.loss.terminal = terminal.evaluate(b.X.back(), through_states ? &a : nullptr);

  for (int n = N - 1; n >= 0; --n) {
    const auto sn = static_cast<std::size_t>(n);
    const double t = b.time_grid.time(n);
    const Vec2 sig = model.sigma(t);
    const Batch2& X = b.X[sn];

    Approximator::Tape tz, th;
    const Batch2 z = Z.forward(t, X, tz);
    const StepTerms s = step_terms(b, n, model, Zhat, &th);
    const Batch2 sum = z + s.zhat.leftCols(M);
    out.loss.running += dt * (0.5 * sum.colwise().squaredNorm().sum() + s.div.sum()) * inv_m;

    Batch2 dz = (dt * inv_m) * sum;
    Batch2 a_pre;
    if (through_states) {
      a_pre = a.cwiseProduct(b.inside[sn]);
      dz.row(0) += dt * sig.x * a_pre.row(0);
      dz.row(1) += dt * sig.y * a_pre.row(1);
    }
    Batch2 dzh(2, s.zhat.cols());
    dzh.leftCols(M) = (dt * inv_m) * sum;
    for (int p = 0; p < P; ++p) {
      const Batch2& e = b.probe[static_cast<std::size_t>(n * P + p)];
      Batch2 se(2, M);
      se.row(0) = (c * sig.x) * e.row(0);
      se.row(1) = (c * sig.y) * e.row(1);
      dzh.middleCols(M * (1 + 2 * p), M) = se;
      dzh.middleCols(M * (2 + 2 * p), M) = -se;
    }
    const Batch2 dx_z = Z.backward(tz, dz, &out.grad_Z);
    const Batch2 dx_zh = Zhat.backward(th, dzh, &out.grad_Zhat);
    if (!through_states) continue;

    Batch2 next = a_pre + dx_z;
    for (int k = 0; k < 1 + 2 * P; ++k) next += dx_zh.middleCols(M * k, M);
    for (Eigen::Index m = 0; m < M; ++m) {
      Vec2 acc = dt * (model.drift_jacobian(t, column(X, m)).transposed() * column(a_pre, m));
      for (int p = 0; p < P; ++p) {
        const Vec2 e = column(b.probe[static_cast<std::size_t>(n * P + p)], m);
        const Mat2 jp = model.drift_jacobian(t, column(s.stacked, M * (1 + 2 * p) + m)).transposed();
        const Mat2 jm = model.drift_jacobian(t, column(s.stacked, M * (2 + 2 * p) + m)).transposed();
        acc += (-c) * (jp * e - jm * e);
      }
      next(0, m) += acc.x;
      next(1, m) += acc.y;
    }
    a = std::move(next);
  }
  return out;
}

LossParts evaluate_loss(const SdeModel& model, const Approximator& Z, const Approximator& Zhat,
                        const Batch2& x0, const TimeGrid& tg, std::uint64_t seed,
                        const TerminalObjective& terminal, const RolloutOptions& options) {
  const RolloutBatch b = forward_rollout(model, Z, x0, tg, seed, options);
  return sb_likelihood_loss(b, model, Z, Zhat, terminal);
}

TerminalSpec TerminalSpec::density(LogDensityFn f, double log_floor) {
  if (!f) throw Error(ErrorCode::InvalidArgument, "terminal log density is empty");
  TerminalSpec s;
  s.log_density = std::move(f);
  s.log_floor = log_floor;
  return s;
}

TerminalSpec TerminalSpec::cells(DiscreteTarget target, HeightVector heights) {
  target.validate();
  if (heights.size() != target.size())
    throw Error(ErrorCode::InvalidArgument, "height vector size does not match the target");
  TerminalSpec s;
  s.target = std::move(target);
  s.heights = std::move(heights);
  s.semi_discrete = true;
  return s;
}

std::vector<Vec2> TerminalSpec::assigned_targets(const Batch2& x0) const {
  if (!semi_discrete) throw Error(ErrorCode::InvalidArgument, "terminal spec has no cell targets");
  std::vector<Vec2> y(static_cast<std::size_t>(x0.cols()));
  for (Eigen::Index m = 0; m < x0.cols(); ++m)
    y[static_cast<std::size_t>(m)] = target.points[assign_cell(column(x0, m), target, heights)];
  return y;
}

std::string to_string(TrainStage stage) {
  switch (stage) {
    case TrainStage::Forward:
      return "forward";
    case TrainStage::Backward:
      return "backward";
    case TrainStage::Joint:
      return "joint";
  }
  return "unknown";
}

void TrainConfig::validate() const {
  std::vector<std::string> bad;
  if (iterations < 0) bad.push_back("iterations must be >= 0");
  if (batch < 1) bad.push_back("batch must be >= 1");
  if (width < 1) bad.push_back("width must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) bad.push_back("lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) bad.push_back("momentum must lie in [0, 1)");
  if (stage_length < 1) bad.push_back("stage_length must be >= 1");
  if (rollout.probes < 1) bad.push_back("probes must be >= 1");
  if (!(rollout.fd_step > 0.0)) bad.push_back("fd_step must be > 0");
  if (!std::isfinite(output_scale)) bad.push_back("output_scale must be finite");
  if (!bad.empty()) throw ValidationError(std::move(bad));
}

TrainResult train(const SdeModel& model, const TimeGrid& tg, const StateSampler& rho0,
                  const TerminalSpec& terminal, const TrainConfig& cfg) {
  cfg.validate();
  model.validate();
  if (!terminal.semi_discrete && !terminal.log_density)
    throw Error(ErrorCode::InvalidArgument, "terminal spec is empty");
  TrainResult r;
  r.Z = Approximator::initialized(cfg.width, cfg.scaling, derive_seed(cfg.seed, 1), cfg.output_scale);
  r.Zhat =
      Approximator::initialized(cfg.width, cfg.scaling, derive_seed(cfg.seed, 2), cfg.output_scale);
  Eigen::VectorXd vz = Eigen::VectorXd::Zero(r.Z.parameters().size());
  Eigen::VectorXd vzh = Eigen::VectorXd::Zero(r.Zhat.parameters().size());
  const std::uint64_t stream_seed = derive_seed(cfg.seed, 3);
  double initial = 0.0;
  for (int k = 0; k < cfg.iterations; ++k) {
    const TrainStage stage = cfg.joint ? TrainStage::Joint
                             : (k / cfg.stage_length) % 2 == 0 ? TrainStage::Forward
                                                               : TrainStage::Backward;
    const std::uint64_t seed = derive_seed(stream_seed, static_cast<std::uint64_t>(k));
    const Batch2 x0 = sample_initial_states(rho0, cfg.batch, seed);
    std::unique_ptr<TerminalObjective> objective;
    if (terminal.semi_discrete)
      objective = std::make_unique<TargetTerminal>(terminal.assigned_targets(x0));
    else
      objective = std::make_unique<LogDensityTerminal>(terminal.log_density, terminal.log_floor);
    const RolloutBatch batch = forward_rollout(model, r.Z, x0, tg, seed, cfg.rollout);
    const LossGradient g =
        loss_gradient(batch, model, r.Z, r.Zhat, *objective, stage != TrainStage::Backward);
    const double loss = g.loss.total();
    if (k == 0) initial = loss;
    if (!std::isfinite(loss) || (k > 0 && std::abs(loss) > 10.0 * std::abs(initial)))
      throw DivergedTrainingError(k, loss, initial);
    r.loss_history.push_back(loss);
    r.stages.push_back(stage);

    const double lr =
        cfg.cosine_decay
            ? cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * k / cfg.iterations))
            : cfg.lr;
    const double norm = std::sqrt(g.grad_Z.squaredNorm() + g.grad_Zhat.squaredNorm());
    const double scale = cfg.grad_clip > 0.0 && norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;
    if (stage != TrainStage::Backward) {
      vz = cfg.momentum * vz + scale * g.grad_Z;
      r.Z.parameters() -= lr * vz;
    }
    if (stage != TrainStage::Forward) {
      vzh = cfg.momentum * vzh + scale * g.grad_Zhat;
      r.Zhat.parameters() -= lr * vzh;
    }
  }
  return r;
}

double relative_control_error(const Approximator& Z, const BridgeSolution& sol) {
  const Grid2D& g = sol.grid();
  const auto& tg = sol.time_grid();
  if (sol.control.size() != static_cast<std::size_t>(tg.steps()) + 1 ||
      sol.marginals.size() != sol.control.size())
    throw Error(ErrorCode::InvalidArgument, "bridge solution has no controls");
  Batch2 centres(2, static_cast<Eigen::Index>(g.cells()));
  for (std::size_t c = 0; c < g.cells(); ++c) set_column(centres, static_cast<Eigen::Index>(c), g.center(c));
  double num = 0.0, den = 0.0;
  for (int n = 0; n <= tg.steps(); ++n) {
    const auto sn = static_cast<std::size_t>(n);
    const double t = tg.time(n);
    const Vec2 sig = sol.model.sigma(t);
    const Batch2 z = Z.evaluate(t, centres);
    for (std::size_t c = 0; c < g.cells(); ++c) {
      const double w = sol.marginals[sn][c];
      const Vec2 u = sol.control[sn][c];
      const Vec2 d = hadamard(sig, column(z, static_cast<Eigen::Index>(c))) - u;
      num += w * squared_norm(d);
      den += w * squared_norm(u);
    }
  }
  if (!(den > 0.0)) throw Error(ErrorCode::ZeroMass, "reference control vanishes");
  return num / den;
}

void write_loss_csv(const std::string& path, const TrainResult& result) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  out << "iteration,loss,stage\n";
  for (std::size_t k = 0; k < result.loss_history.size(); ++k)
    out << k << ',' << format_double(result.loss_history[k]) << ',' << to_string(result.stages[k])
        << '\n';
}

}  // namespace sbtip
