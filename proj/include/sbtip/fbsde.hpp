#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sbtip/grid.hpp"
#include "sbtip/ipf.hpp"
#include "sbtip/sde.hpp"
#include "sbtip/sdot.hpp"

namespace sbtip {

using Batch2 = Eigen::Matrix2Xd;  // one column per trajectory

/// Affine map from states to network inputs, plus the horizon used for the
/// two time features (t / T, 1 - t / T).
struct InputScaling {
  Vec2 center{0.0, 0.0};
  Vec2 scale{1.0, 1.0};
  double horizon = 1.0;
};

/// Two-hidden-layer tanh network (t, x) -> R^2. Parameters live in one flat
/// vector: W1 (width x 4), b1, W2 (width x width), b2, W3 (2 x width), b3,
/// matrices row-major.
class Approximator {
 public:
  static constexpr int kInputs = 4;
  static constexpr int kOutputs = 2;

  Approximator() = default;
  Approximator(int width, InputScaling scaling);
  /// Uniform(+-1/sqrt(fan_in)) weights and biases from the Initialization
  /// stream of `seed`; the output layer is multiplied by output_scale and
  /// its bias zeroed.
  static Approximator initialized(int width, InputScaling scaling, std::uint64_t seed,
                                  double output_scale = 0.1);
  static std::size_t parameter_count(int width);

  int width() const { return width_; }
  const InputScaling& scaling() const { return scaling_; }
  const Eigen::VectorXd& parameters() const { return theta_; }
  Eigen::VectorXd& parameters() { return theta_; }

  /// Activations kept for a backward pass.
  struct Tape {
    Eigen::MatrixXd input, h1, h2;
  };

  Batch2 evaluate(double t, const Batch2& x) const;
  Vec2 evaluate(double t, Vec2 x) const;
  Batch2 forward(double t, const Batch2& x, Tape& tape) const;
  /// Vector-Jacobian product for output cotangents `d_out`: adds the
  /// parameter gradient into *grad (when given) and returns d/dx.
  Batch2 backward(const Tape& tape, const Batch2& d_out, Eigen::VectorXd* grad) const;

 private:
  int width_ = 0;
  InputScaling scaling_;
  Eigen::VectorXd theta_;
};

/// Flat binary checkpoint: "SBPZ", u32 version, u32 inputs, u32 width,
/// u32 width, u32 outputs, 5 f64 scaling values (cx, cy, sx, sy, T),
/// u64 parameter count, f64 parameters; all little-endian.
void save_checkpoint(const std::string& path, const Approximator& a);
Approximator load_checkpoint(const std::string& path);

/// Initial states drawn exactly as simulate_ensemble draws them.
Batch2 sample_initial_states(const StateSampler& sampler, std::size_t M, std::uint64_t seed);
std::vector<Vec2> to_points(const Batch2& x);
Batch2 to_batch(const std::vector<Vec2>& points);

struct RolloutOptions {
  int probes = 4;          // Hutchinson probes per step
  double fd_step = 1e-3;   // central-difference step of the divergence
};

/// Euler-Maruyama trajectories under f + sigma_t * Z with everything needed
/// to evaluate and differentiate the loss. Noise comes from the streams
/// (seed, m, Increments) and probes from (seed, m, Probes).
struct RolloutBatch {
  TimeGrid time_grid{1.0, 1};
  std::uint64_t seed = 0;
  RolloutOptions options;
  std::vector<Batch2> X;      // N + 1 slices
  std::vector<Batch2> xi;     // N standard normal increments
  std::vector<Batch2> probe;  // N * probes Rademacher vectors, step-major
  std::vector<Batch2> Z;      // policy outputs at X[n], n < N
  std::vector<Batch2> inside; // 1 where the clamp left a coordinate untouched
  /// Diagnostic accumulators Y_n and Yhat_n (rows: slices), filled when a
  /// backward policy is supplied.
  Eigen::MatrixXd Y, Yhat;

  std::size_t size() const { return X.empty() ? 0 : static_cast<std::size_t>(X[0].cols()); }
};

RolloutBatch forward_rollout(const SdeModel& model, const Approximator& Z, const Batch2& x0,
                             const TimeGrid& tg, std::uint64_t seed, const RolloutOptions& options = {},
                             const Approximator* Zhat = nullptr);

/// Hutchinson estimate (1/P) sum_p e_p . (V(x + h e_p) - V(x - h e_p)) / (2h)
/// of div V at x with Rademacher probes e_p drawn from rs.
double hutchinson_divergence(const std::function<Vec2(Vec2)>& V, Vec2 x, int probes, double h,
                             RandomStream& rs);

/// Terminal part of the loss. evaluate returns the batch mean and, when
/// grad is given, writes d(mean)/dX_N.
class TerminalObjective {
 public:
  virtual ~TerminalObjective() = default;
  virtual double evaluate(const Batch2& xN, Batch2* grad) const = 0;
};

/// ln rho1 and its gradient at a point.
using LogDensityFn = std::function<double(Vec2 x, Vec2* grad)>;

/// Axis-aligned Gaussian; an axis with sd 0 is ignored.
LogDensityFn gaussian_log_density(Vec2 mean, Vec2 sd);
/// Bilinear interpolation of ln(mass / cell area), floored at ln 1e-300.
LogDensityFn grid_log_density(const DensityField& rho);

// Same floor as grid_log_density, so a clamped value means the density
// vanished numerically rather than merely being small.
inline constexpr double kDefaultTerminalLogFloor = -690.7755278982137;  // ln 1e-300

/// -mean ln rho1(X_N). Values below the floor are clamped (zero gradient);
/// TerminalDensityUnderflow when more than half the batch is clamped.
class LogDensityTerminal : public TerminalObjective {
 public:
  explicit LogDensityTerminal(LogDensityFn f, double log_floor = kDefaultTerminalLogFloor);
  double evaluate(const Batch2& xN, Batch2* grad) const override;

 private:
  LogDensityFn f_;
  double floor_;
};

/// mean |X_N - y_m|^2 with one assigned target per trajectory.
class TargetTerminal : public TerminalObjective {
 public:
  explicit TargetTerminal(std::vector<Vec2> targets);
  double evaluate(const Batch2& xN, Batch2* grad) const override;

 private:
  std::vector<Vec2> targets_;
};

struct LossParts {
  double running = 0.0;   // mean over trajectories of the time integral
  double terminal = 0.0;
  double total() const { return running + terminal; }
};

/// sum_n dt (1/2 |Z + Zhat|^2 + div(sigma Zhat - f)) averaged over the batch,
/// plus the terminal objective. The divergence is the Hutchinson estimate
/// with the batch's probes and central differences.
LossParts sb_likelihood_loss(const RolloutBatch& batch, const SdeModel& model, const Approximator& Z,
                             const Approximator& Zhat, const TerminalObjective& terminal);

/// Same running terms with the terminal term replaced by the mean squared
/// distance to each trajectory's assigned target. UnassignedSample when the
/// assignment does not cover the batch.
LossParts sdot_terminal_loss(const RolloutBatch& batch, const SdeModel& model, const Approximator& Z,
                             const Approximator& Zhat, const std::vector<Vec2>& targets);

struct LossGradient {
  LossParts loss;
  Eigen::VectorXd grad_Z, grad_Zhat;
};

/// Parameter gradients of sb_likelihood_loss for the batch's noise. With
/// through_states the dependence of the trajectory on Z is differentiated
/// (backpropagation through time); otherwise states are held fixed.
LossGradient loss_gradient(const RolloutBatch& batch, const SdeModel& model, const Approximator& Z,
                           const Approximator& Zhat, const TerminalObjective& terminal,
                           bool through_states = true);

/// Rollout plus loss for fixed initial states and noise seed; convenient for
/// finite-difference checks.
LossParts evaluate_loss(const SdeModel& model, const Approximator& Z, const Approximator& Zhat,
                        const Batch2& x0, const TimeGrid& tg, std::uint64_t seed,
                        const TerminalObjective& terminal, const RolloutOptions& options = {});

/// Terminal condition for training: a log density, or a semi-discrete target
/// whose cells assign each initial state its target point.
struct TerminalSpec {
  LogDensityFn log_density;
  double log_floor = kDefaultTerminalLogFloor;
  DiscreteTarget target;
  HeightVector heights;
  bool semi_discrete = false;

  static TerminalSpec density(LogDensityFn f, double log_floor = kDefaultTerminalLogFloor);
  static TerminalSpec cells(DiscreteTarget target, HeightVector heights);
  std::vector<Vec2> assigned_targets(const Batch2& x0) const;
};

enum class TrainStage { Forward, Backward, Joint };
std::string to_string(TrainStage stage);

struct TrainConfig {
  int iterations = 2000;       // K
  std::size_t batch = 256;     // M
  int width = 32;
  double lr = 3e-3;
  double momentum = 0.9;
  bool cosine_decay = true;
  double grad_clip = 1.0;      // on the joint gradient norm; <= 0 disables
  int stage_length = 200;      // alternate Z and Zhat every this many iterations
  bool joint = false;
  double output_scale = 0.1;
  RolloutOptions rollout;
  InputScaling scaling;
  std::uint64_t seed = 0;
  void validate() const;
};

struct TrainResult {
  Approximator Z, Zhat;
  std::vector<double> loss_history;
  std::vector<TrainStage> stages;
};

/// Alternating (or joint) stochastic gradient descent with momentum, cosine
/// step decay and gradient-norm clipping. Iteration k draws fresh initial
/// states and noise from derive_seed(seed, k). DivergedTraining when the
/// loss stops being finite or exceeds 10 |L_0|.
TrainResult train(const SdeModel& model, const TimeGrid& tg, const StateSampler& rho0,
                  const TerminalSpec& terminal, const TrainConfig& config);

/// rho_n-weighted mean of |sigma * Z(t_n, x) - u_n(x)|^2 over cells and
/// slices, divided by the weighted mean of |u_n|^2.
double relative_control_error(const Approximator& Z, const BridgeSolution& sol);

void write_loss_csv(const std::string& path, const TrainResult& result);

}  // namespace sbtip
