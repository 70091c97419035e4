#pragma once

#include "bites/common.hpp"
#include "bites/cox.hpp"
#include "bites/data.hpp"
#include "bites/ot.hpp"
#include "bites/rng.hpp"

#include <array>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace bites {

enum class Mode { Train, Eval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;  // weight on the old running value

/// Writable view of one parameter tensor, flattened.
struct ParamView {
  std::span<double> values;
  bool decay;  // dense weights take decoupled weight decay; biases and norm params do not
};

// ---------------------------------------------------------------------------
// Dense block: Linear -> ReLU -> Dropout -> BatchNorm for hidden blocks,
// Linear only for the output unit.

struct DenseBlock {
  Matrix weight;  // out x in
  Vector bias;
  bool hidden = true;
  bool batch_norm = true;
  Vector bn_scale;
  Vector bn_shift;
  Vector running_mean;
  Vector running_var;

  Index in_dim() const { return weight.cols(); }
  Index out_dim() const { return weight.rows(); }
  bool has_norm() const { return hidden && batch_norm; }
};

struct BlockCache {
  Matrix input;
  Matrix pre;         // before ReLU
  Matrix mask;        // dropout multipliers; empty when dropout inactive
  Matrix normalized;  // x-hat of batch norm
  Vector inv_std;
  Vector batch_mean;
  Vector batch_var;   // biased batch variance
  Mode mode = Mode::Eval;
};

/// Feedforward stack. Also serves as its own gradient container: a
/// gradient is an Mlp of identical shape whose parameters hold derivatives.
class Mlp {
 public:
  Mlp() = default;

  Mlp(Index input_dim, const std::vector<int>& widths, bool output_unit, bool batch_norm, Rng& rng)
      : input_dim_(input_dim) {
    Index in = input_dim;
    auto add = [&](Index out, bool hidden) {
      DenseBlock b;
      b.hidden = hidden;
      b.batch_norm = batch_norm;
      const double bound = std::sqrt(6.0 / static_cast<double>(in));
      b.weight.resize(out, in);
      for (Index i = 0; i < out; ++i)
        for (Index j = 0; j < in; ++j) b.weight(i, j) = bound * (2.0 * rng.uniform() - 1.0);
      b.bias = Vector::Zero(out);
      if (b.has_norm()) {
        b.bn_scale = Vector::Ones(out);
        b.bn_shift = Vector::Zero(out);
        b.running_mean = Vector::Zero(out);
        b.running_var = Vector::Ones(out);
      }
      blocks_.push_back(std::move(b));
      in = out;
    };
    for (int w : widths) {
      if (w < 1) throw ConfigError("network: layer widths must be >= 1");
      add(w, true);
    }
    if (output_unit) add(1, false);
  }

  Mlp(Index input_dim, std::vector<DenseBlock> blocks) : input_dim_(input_dim), blocks_(std::move(blocks)) {
    Index in = input_dim;
    for (const auto& b : blocks_) {
      if (b.in_dim() != in || b.bias.size() != b.out_dim()) throw DataError("network: inconsistent block shapes");
      if (b.has_norm() && (b.bn_scale.size() != b.out_dim() || b.bn_shift.size() != b.out_dim() ||
                           b.running_mean.size() != b.out_dim() || b.running_var.size() != b.out_dim()))
        throw DataError("network: inconsistent batch-norm shapes");
      in = b.out_dim();
    }
  }

  Index input_dim() const { return input_dim_; }
  Index output_dim() const { return blocks_.empty() ? input_dim_ : blocks_.back().out_dim(); }
  bool empty() const { return blocks_.empty(); }
  std::vector<DenseBlock>& blocks() { return blocks_; }
  const std::vector<DenseBlock>& blocks() const { return blocks_; }

  Mlp zeros_like() const {
    Mlp z = *this;
    for (auto& p : z.parameters()) std::fill(p.values.begin(), p.values.end(), 0.0);
    return z;
  }

  std::vector<ParamView> parameters() {
    std::vector<ParamView> out;
    for (auto& b : blocks_) {
      out.push_back({{b.weight.data(), static_cast<std::size_t>(b.weight.size())}, true});
      out.push_back({{b.bias.data(), static_cast<std::size_t>(b.bias.size())}, false});
      if (b.has_norm()) {
        out.push_back({{b.bn_scale.data(), static_cast<std::size_t>(b.bn_scale.size())}, false});
        out.push_back({{b.bn_shift.data(), static_cast<std::size_t>(b.bn_shift.size())}, false});
      }
    }
    return out;
  }

  /// Applies the stack. Train mode uses batch statistics and, when `rng` is
  /// given and dropout > 0, inverted dropout; Eval mode uses running
  /// statistics and no dropout.
  Matrix forward(const Matrix& x, Mode mode, double dropout, Rng* rng, std::vector<BlockCache>* cache) const {
    if (x.cols() != input_dim_) throw DataError("network: input has wrong column count");
    if (cache) cache->assign(blocks_.size(), BlockCache{});
    Matrix h = x;
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const auto& b = blocks_[l];
      BlockCache* c = cache ? &(*cache)[l] : nullptr;
      if (c) {
        c->mode = mode;
        c->input = h;
      }
      Matrix z = h * b.weight.transpose();
      z.rowwise() += b.bias.transpose();
      if (!b.hidden) {
        h = std::move(z);
        continue;
      }
      if (c) c->pre = z;
      Matrix a = z.cwiseMax(0.0);
      if (mode == Mode::Train && rng && dropout > 0.0) {
        Matrix mask(a.rows(), a.cols());
        const double keep = 1.0 / (1.0 - dropout);
        for (Index i = 0; i < mask.rows(); ++i)
          for (Index j = 0; j < mask.cols(); ++j) mask(i, j) = rng->uniform() < dropout ? 0.0 : keep;
        a = a.cwiseProduct(mask);
        if (c) c->mask = std::move(mask);
      }
      if (!b.has_norm()) {
        h = std::move(a);
        continue;
      }
      Vector mean, var;
      if (mode == Mode::Train) {
        mean = a.colwise().mean().transpose();
        var = (a.rowwise() - mean.transpose()).array().square().colwise().mean().transpose();
      } else {
        mean = b.running_mean;
        var = b.running_var;
      }
      const Vector inv_std = (var.array() + kBatchNormEps).rsqrt().matrix();
      Matrix xhat = (a.rowwise() - mean.transpose()).array().rowwise() * inv_std.transpose().array();
      h = (xhat.array().rowwise() * b.bn_scale.transpose().array()).rowwise() + b.bn_shift.transpose().array();
      if (c) {
        c->normalized = std::move(xhat);
        c->inv_std = inv_std;
        c->batch_mean = std::move(mean);
        c->batch_var = std::move(var);
      }
    }
    if (!h.allFinite()) throw NumericalError("network: non-finite activation");
    return h;
  }

  /// Reverse pass. Accumulates into `grad` and returns d loss / d input.
  Matrix backward(const Matrix& grad_out, const std::vector<BlockCache>& cache, Mlp& grad) const {
    Matrix g = grad_out;
    for (std::size_t l = blocks_.size(); l-- > 0;) {
      const auto& b = blocks_[l];
      const auto& c = cache[l];
      auto& gb = grad.blocks_[l];
      if (b.hidden) {
        if (b.has_norm()) {
          gb.bn_scale += g.cwiseProduct(c.normalized).colwise().sum().transpose();
          gb.bn_shift += g.colwise().sum().transpose();
          Matrix dxhat = g.array().rowwise() * b.bn_scale.transpose().array();
          if (c.mode == Mode::Train) {
            const double n = static_cast<double>(g.rows());
            const Eigen::RowVectorXd sum_d = dxhat.colwise().sum();
            const Eigen::RowVectorXd sum_dx = dxhat.cwiseProduct(c.normalized).colwise().sum();
            Matrix t = (dxhat * n).rowwise() - sum_d;
            t -= c.normalized.array().rowwise().operator*(sum_dx.array()).matrix();
            g = (t.array().rowwise() * (c.inv_std.transpose().array() / n)).matrix();
          } else {
            g = dxhat.array().rowwise() * c.inv_std.transpose().array();
          }
        }
        if (c.mask.size() > 0) g = g.cwiseProduct(c.mask);
        g = g.cwiseProduct((c.pre.array() > 0.0).cast<double>().matrix());
      }
      gb.weight += g.transpose() * c.input;
      gb.bias += g.colwise().sum().transpose();
      g = g * b.weight;
      if (!g.allFinite()) throw NumericalError("network: non-finite gradient in block " + std::to_string(l));
    }
    return g;
  }

  /// Folds the batch statistics of a train-mode pass into the running ones.
  void update_running_stats(const std::vector<BlockCache>& cache) {
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      auto& b = blocks_[l];
      const auto& c = cache[l];
      if (!b.has_norm() || c.mode != Mode::Train) continue;
      const double n = static_cast<double>(c.input.rows());
      const Vector unbiased = n > 1 ? Vector(c.batch_var * (n / (n - 1.0))) : c.batch_var;
      b.running_mean = kBatchNormMomentum * b.running_mean + (1.0 - kBatchNormMomentum) * c.batch_mean;
      b.running_var = kBatchNormMomentum * b.running_var + (1.0 - kBatchNormMomentum) * unbiased;
    }
  }

 private:
  Index input_dim_ = 0;
  std::vector<DenseBlock> blocks_;
};

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay

struct AdamState {
  std::vector<Vector> m;
  std::vector<Vector> v;
  long step = 0;
};

inline void adam_step(std::vector<ParamView> params, const std::vector<ParamView>& grads, AdamState& state,
                      double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Vector::Zero(static_cast<Index>(p.values.size())));
      state.v.push_back(Vector::Zero(static_cast<Index>(p.values.size())));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    const auto& g = grads[k].values;
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      const auto ii = static_cast<Index>(i);
      m[ii] = beta1 * m[ii] + (1.0 - beta1) * g[i];
      v[ii] = beta2 * v[ii] + (1.0 - beta2) * g[i] * g[i];
      double update = (m[ii] / c1) / (std::sqrt(v[ii] / c2) + eps);
      if (p.decay) update += weight_decay * p.values[i];
      p.values[i] -= lr * update;
    }
  }
}

// ---------------------------------------------------------------------------
// Configuration types

struct NetworkSpec {
  Index input_dim = 0;
  std::vector<int> shared_layers;
  std::vector<int> head_layers;
  double dropout_rate = 0.1;
  bool use_batch_norm = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (input_dim < 1) throw ConfigError("network: input_dim must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("network: dropout must lie in [0, 1)");
    for (int w : shared_layers)
      if (w < 1) throw ConfigError("network: layer widths must be >= 1");
    for (int w : head_layers)
      if (w < 1) throw ConfigError("network: layer widths must be >= 1");
  }
};

struct BitesLossConfig {
  double alpha = 0.0;
  std::optional<double> q;  // empty: control fraction of the data the loss is evaluated on
  SinkhornConfig sinkhorn{2.0, 0.1, 100, 1e-6, 0.5};
  /// Per-arm cap on the points entering the Sinkhorn term; larger arms are
  /// subsampled uniformly for each evaluation. 0 disables the cap.
  int ipm_max_points = 256;

  void validate() const {
    if (!(alpha >= 0.0)) throw ConfigError("loss: alpha must be >= 0");
    if (q && !(*q > 0.0 && *q < 1.0)) throw ConfigError("loss: q must lie in (0, 1)");
    if (ipm_max_points < 0) throw ConfigError("loss: ipm_max_points must be >= 0");
    sinkhorn.validate();
  }
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  int batch_size = 0;  // 0: full batch
  int max_epochs = 1000;
  int patience = 50;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
    if (batch_size < 0) throw ConfigError("train: batch_size must be >= 0");
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
    if (patience < 1) throw ConfigError("train: patience must be >= 1");
  }
};

struct TrainingHistory {
  std::vector<double> train_loss;
  std::vector<double> validation_loss;
  int best_epoch = 0;     // 1-based
  int stopped_epoch = 0;  // last epoch run
  long skipped_ipm_steps = 0;
  long skipped_cox_terms = 0;
};

/// Patience-based early stopping on a loss to be minimized.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}

  /// Records the loss of `epoch` (1-based). Returns true when improved.
  bool observe(int epoch, double loss) {
    if (loss < best_) {
      best_ = loss;
      best_epoch_ = epoch;
      return true;
    }
    return false;
  }

  bool should_stop(int epoch) const { return epoch - best_epoch_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best() const { return best_; }

 private:
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int best_epoch_ = 0;
};

class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(const std::string& what, TrainingHistory h) : NumericalError(what), history(std::move(h)) {}
  TrainingDiverged(const TrainingDiverged&) = default;
  TrainingHistory history;
};

/// Mini-batch Adam loop with early stopping and best-epoch restoration.
/// `Net` is a copyable network exposing parameters(). `step(net, rows, rng)`
/// returns {loss, gradient net} for one batch and may update running
/// statistics; `validate(net)` returns the validation loss.
template <typename Net, typename StepFn, typename ValidateFn>
TrainingHistory train_network(Net& net, Index n_train, const TrainConfig& cfg, StepFn&& step, ValidateFn&& validate) {
  cfg.validate();
  TrainingHistory history;
  AdamState adam;
  Rng rng(derive_seed(cfg.seed, {0x7121}));
  EarlyStopping stopper(cfg.patience);
  Net best = net;
  std::vector<Index> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), Index{0});
  const auto batch = cfg.batch_size == 0 ? static_cast<std::size_t>(n_train)
                                         : std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size());
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    if (batch < order.size()) rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      std::vector<Index> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                              order.begin() + static_cast<std::ptrdiff_t>(std::min(start + batch, order.size())));
      if (batch == order.size()) std::sort(rows.begin(), rows.end());
      auto [loss, grad] = step(net, rows, rng);
      if (!std::isfinite(loss)) {
        history.stopped_epoch = epoch;
        throw TrainingDiverged("training diverged: non-finite loss at epoch " + std::to_string(epoch), history);
      }
      adam_step(net.parameters(), grad.parameters(), adam, cfg.learning_rate, cfg.weight_decay);
      epoch_loss += loss;
      ++n_batches;
    }
    const double val = validate(net);
    history.train_loss.push_back(epoch_loss / static_cast<double>(n_batches));
    history.validation_loss.push_back(val);
    history.stopped_epoch = epoch;
    if (!std::isfinite(val)) throw TrainingDiverged("training diverged: non-finite validation loss", history);
    if (stopper.observe(epoch, val)) best = net;
    if (stopper.should_stop(epoch)) break;
  }
  history.best_epoch = stopper.best_epoch();
  net = std::move(best);
  return history;
}

// ---------------------------------------------------------------------------
// BITES network: shared trunk and one hazard head per arm

struct BitesNetwork {
  Mlp trunk;
  std::array<Mlp, 2> heads;

  std::vector<ParamView> parameters() {
    auto out = trunk.parameters();
    for (auto& h : heads) {
      auto p = h.parameters();
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }

  BitesNetwork zeros_like() const { return {trunk.zeros_like(), {heads[0].zeros_like(), heads[1].zeros_like()}}; }

  Index latent_dim() const { return trunk.output_dim(); }
};

struct ForwardResult {
  Matrix phi;
  Vector s0;
  Vector s1;
};

struct LossParts {
  double total = 0.0;
  double cox0 = 0.0;
  double cox1 = 0.0;
  double ipm = 0.0;
  double q = 0.0;
  bool cox0_skipped = false;  // arm present without events, or absent
  bool cox1_skipped = false;
  bool ipm_skipped = false;
};

class BitesModel {
 public:
  BitesModel() = default;

  BitesModel(const NetworkSpec& spec, const BitesLossConfig& loss_cfg) : spec_(spec), loss_cfg_(loss_cfg) {
    spec.validate();
    loss_cfg.validate();
    Rng rng(derive_seed(spec.seed, {0xB17E5}));
    net_.trunk = Mlp(spec.input_dim, spec.shared_layers, false, spec.use_batch_norm, rng);
    for (auto& h : net_.heads) h = Mlp(net_.trunk.output_dim(), spec.head_layers, true, spec.use_batch_norm, rng);
  }

  const NetworkSpec& spec() const { return spec_; }
  const BitesLossConfig& loss_config() const { return loss_cfg_; }
  BitesNetwork& network() { return net_; }
  const BitesNetwork& network() const { return net_; }
  const std::array<BaselineHazard, 2>& baselines() const { return baselines_; }
  std::array<BaselineHazard, 2>& baselines() { return baselines_; }
  const TrainingHistory& history() const { return history_; }
  TrainingHistory& history() { return history_; }
  bool fitted() const { return fitted_; }
  void set_fitted(bool f) { fitted_ = f; }

  /// Latent representation and both arms' log-hazard scores for every row.
  ForwardResult forward(const Matrix& x, Mode mode, Rng* dropout_rng = nullptr) const {
    ForwardResult r;
    r.phi = net_.trunk.forward(x, mode, spec_.dropout_rate, dropout_rng, nullptr);
    r.s0 = net_.heads[0].forward(r.phi, mode, spec_.dropout_rate, dropout_rng, nullptr).col(0);
    r.s1 = net_.heads[1].forward(r.phi, mode, spec_.dropout_rate, dropout_rng, nullptr).col(0);
    return r;
  }

  std::array<std::vector<SurvivalCurve>, 2> predict_curves(const Matrix& x) const {
    if (!fitted_) throw ConfigError("model is not fitted");
    const auto r = forward(x, Mode::Eval);
    std::array<std::vector<SurvivalCurve>, 2> out;
    for (Index i = 0; i < x.rows(); ++i) {
      out[0].push_back(survival_curve(baselines_[0], r.s0[i]));
      out[1].push_back(survival_curve(baselines_[1], r.s1[i]));
    }
    return out;
  }

 private:
  NetworkSpec spec_;
  BitesLossConfig loss_cfg_;
  BitesNetwork net_;
  std::array<BaselineHazard, 2> baselines_;
  TrainingHistory history_;
  bool fitted_ = false;
};

/// Control fraction used to weight the two Cox terms.
inline double resolve_q(const BitesLossConfig& cfg, const SurvivalDataset& data) {
  if (cfg.q) return *cfg.q;
  return static_cast<double>(data.arm_count(0)) / static_cast<double>(data.size());
}

struct LossEvaluation {
  LossParts parts;
  BitesNetwork grad;  // populated only when requested
};

namespace detail {

inline std::vector<Index> maybe_subsample(std::vector<Index> rows, int cap, Rng* rng) {
  if (cap <= 0 || static_cast<int>(rows.size()) <= cap || !rng) return rows;
  rng->shuffle(rows);
  rows.resize(static_cast<std::size_t>(cap));
  std::sort(rows.begin(), rows.end());
  return rows;
}

inline Matrix gather_rows(const Matrix& m, const std::vector<Index>& rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Index>(k)) = m.row(rows[k]);
  return out;
}

}  // namespace detail

/// Composite objective q*Cox0 + (1-q)*Cox1 + alpha*Sinkhorn(phi_control, phi_treated)
/// over the rows of `batch`, with optional exact reverse-mode gradient.
///
/// Each head sees only its own arm's rows. A nonempty arm without events
/// contributes 0 (flagged). When `strict` is set, alpha > 0 with an empty
/// arm is an error; otherwise the IPM term is skipped and flagged.
/// `ipm_rng` drives subsampling of large arms; without it every point is used.
inline LossEvaluation evaluate_bites_loss(const BitesModel& model, const SurvivalDataset& batch, double q,
                                          Mode mode, Rng* dropout_rng, Rng* ipm_rng, bool want_grad,
                                          bool strict, BitesNetwork* running_stats_sink = nullptr) {
  const auto& net = model.network();
  const auto& spec = model.spec();
  const auto& cfg = model.loss_config();
  LossEvaluation ev;
  ev.parts.q = q;
  if (want_grad) ev.grad = net.zeros_like();

  std::vector<BlockCache> trunk_cache;
  const Matrix phi = net.trunk.forward(batch.features, mode, spec.dropout_rate, dropout_rng,
                                       want_grad || running_stats_sink ? &trunk_cache : nullptr);
  if (running_stats_sink) running_stats_sink->trunk.update_running_stats(trunk_cache);
  Matrix dphi;
  if (want_grad) dphi = Matrix::Zero(phi.rows(), phi.cols());

  std::array<std::vector<Index>, 2> rows{batch.arm_rows(0), batch.arm_rows(1)};
  const std::array<double, 2> weight{q, 1.0 - q};
  std::array<double, 2> cox{0.0, 0.0};
  std::array<bool, 2> skipped{false, false};
  for (int arm : {0, 1}) {
    const auto& r = rows[static_cast<std::size_t>(arm)];
    int events = 0;
    for (Index i : r) events += batch.event[static_cast<std::size_t>(i)];
    if (r.empty() || events == 0) {
      skipped[static_cast<std::size_t>(arm)] = true;
      continue;
    }
    const Matrix phi_arm = detail::gather_rows(phi, r);
    Vector t(static_cast<Index>(r.size()));
    std::vector<int> e(r.size());
    for (std::size_t k = 0; k < r.size(); ++k) {
      t[static_cast<Index>(k)] = batch.time[r[k]];
      e[k] = batch.event[static_cast<std::size_t>(r[k])];
    }
    std::vector<BlockCache> head_cache;
    const auto& head = net.heads[static_cast<std::size_t>(arm)];
    const Vector s = head.forward(phi_arm, mode, spec.dropout_rate, dropout_rng,
                                  want_grad || running_stats_sink ? &head_cache : nullptr)
                         .col(0);
    if (running_stats_sink) running_stats_sink->heads[static_cast<std::size_t>(arm)].update_running_stats(head_cache);
    cox[static_cast<std::size_t>(arm)] = cox_nll(s, t, e);
    if (want_grad) {
      const Matrix ds = (weight[static_cast<std::size_t>(arm)] * cox_nll_grad(s, t, e)).eval();
      const Matrix dphi_arm = head.backward(ds, head_cache, ev.grad.heads[static_cast<std::size_t>(arm)]);
      for (std::size_t k = 0; k < r.size(); ++k) dphi.row(r[k]) += dphi_arm.row(static_cast<Index>(k));
    }
  }

  double ipm = 0.0;
  bool ipm_skipped = false;
  if (cfg.alpha > 0.0) {
    if (rows[0].empty() || rows[1].empty()) {
      if (strict) throw DataError("loss: IPM term needs samples from both arms");
      ipm_skipped = true;
    } else {
      const auto r0 = detail::maybe_subsample(rows[0], cfg.ipm_max_points, ipm_rng);
      const auto r1 = detail::maybe_subsample(rows[1], cfg.ipm_max_points, ipm_rng);
      const auto a = PointCloud::uniform(detail::gather_rows(phi, r0));
      const auto b = PointCloud::uniform(detail::gather_rows(phi, r1));
      const auto div = sinkhorn_divergence_with_grad(a, b, cfg.sinkhorn, want_grad);
      ipm = div.value;
      if (want_grad) {
        for (std::size_t k = 0; k < r0.size(); ++k) dphi.row(r0[k]) += cfg.alpha * div.grad_a.row(static_cast<Index>(k));
        for (std::size_t k = 0; k < r1.size(); ++k) dphi.row(r1[k]) += cfg.alpha * div.grad_b.row(static_cast<Index>(k));
      }
    }
  }

  if (want_grad && !net.trunk.empty()) net.trunk.backward(dphi, trunk_cache, ev.grad.trunk);

  ev.parts.cox0 = cox[0];
  ev.parts.cox1 = cox[1];
  ev.parts.cox0_skipped = skipped[0];
  ev.parts.cox1_skipped = skipped[1];
  ev.parts.ipm = ipm;
  ev.parts.ipm_skipped = ipm_skipped;
  ev.parts.total = q * cox[0] + (1.0 - q) * cox[1] + cfg.alpha * ipm;
  return ev;
}

/// Loss parts on a batch in evaluation mode, q resolved from the batch
/// unless fixed in the model's loss configuration.
inline LossParts bites_loss(const BitesModel& model, const SurvivalDataset& batch) {
  return evaluate_bites_loss(model, batch, resolve_q(model.loss_config(), batch), Mode::Eval, nullptr, nullptr,
                             false, true)
      .parts;
}

/// Exact gradients of the composite loss for every parameter of the model.
inline std::pair<LossParts, BitesNetwork> bites_backward(const BitesModel& model, const SurvivalDataset& batch,
                                                         Mode mode, std::optional<double> q = std::nullopt) {
  auto ev = evaluate_bites_loss(model, batch, q ? *q : resolve_q(model.loss_config(), batch), mode, nullptr, nullptr,
                                true, true);
  return {ev.parts, std::move(ev.grad)};
}

/// Trains a BITES model (ITES when alpha = 0) with Adam and early stopping
/// on the validation loss, then fits one Breslow baseline per arm on the
/// training data with the restored best-epoch parameters.
inline BitesModel fit_bites(const SurvivalDataset& train, const SurvivalDataset& val, const NetworkSpec& spec_in,
                            const BitesLossConfig& loss_cfg, const TrainConfig& train_cfg) {
  train.validate();
  val.validate();
  for (int arm : {0, 1}) {
    int events = 0;
    for (Index i = 0; i < train.size(); ++i)
      if (train.treatment[static_cast<std::size_t>(i)] == arm) events += train.event[static_cast<std::size_t>(i)];
    if (events == 0) throw DataError("fit: training arm " + std::to_string(arm) + " has no events");
  }
  NetworkSpec spec = spec_in;
  if (spec.input_dim == 0) spec.input_dim = train.dim();
  if (spec.input_dim != train.dim() || val.dim() != train.dim()) throw DataError("fit: feature count mismatch");
  BitesModel model(spec, loss_cfg);
  const double q = resolve_q(loss_cfg, train);
  Rng val_ipm_seed_source(derive_seed(train_cfg.seed, {0x1A7}));
  const std::uint64_t val_ipm_seed = val_ipm_seed_source.next_u64();
  TrainingHistory counters;

  auto step = [&](BitesNetwork& net, const std::vector<Index>& rows, Rng& rng) {
    model.network() = net;
    const SurvivalDataset batch = rows.size() == static_cast<std::size_t>(train.size()) ? train : train.subset(rows);
    auto ev = evaluate_bites_loss(model, batch, q, Mode::Train, &rng, &rng, true, false, &net);
    if (ev.parts.ipm_skipped) ++counters.skipped_ipm_steps;
    counters.skipped_cox_terms += (ev.parts.cox0_skipped ? 1 : 0) + (ev.parts.cox1_skipped ? 1 : 0);
    return std::pair<double, BitesNetwork>{ev.parts.total, std::move(ev.grad)};
  };
  auto validate = [&](BitesNetwork& net) {
    model.network() = net;
    Rng ipm_rng(val_ipm_seed);
    return evaluate_bites_loss(model, val, q, Mode::Eval, nullptr, &ipm_rng, false, false).parts.total;
  };

  BitesNetwork net = model.network();
  TrainingHistory history;
  try {
    history = train_network(net, train.size(), train_cfg, step, validate);
  } catch (TrainingDiverged& e) {
    e.history.skipped_ipm_steps = counters.skipped_ipm_steps;
    e.history.skipped_cox_terms = counters.skipped_cox_terms;
    throw;
  }
  history.skipped_ipm_steps = counters.skipped_ipm_steps;
  history.skipped_cox_terms = counters.skipped_cox_terms;
  model.network() = std::move(net);

  const auto scores = model.forward(train.features, Mode::Eval);
  for (int arm : {0, 1}) {
    const auto r = train.arm_rows(arm);
    Vector s(static_cast<Index>(r.size())), t(static_cast<Index>(r.size()));
    std::vector<int> e(r.size());
    for (std::size_t k = 0; k < r.size(); ++k) {
      s[static_cast<Index>(k)] = arm == 0 ? scores.s0[r[k]] : scores.s1[r[k]];
      t[static_cast<Index>(k)] = train.time[r[k]];
      e[k] = train.event[static_cast<std::size_t>(r[k])];
    }
    model.baselines()[static_cast<std::size_t>(arm)] = breslow_baseline(s, t, e);
  }
  model.history() = std::move(history);
  model.set_fitted(true);
  return model;
}

// ---------------------------------------------------------------------------
// Single-network DeepSurv with the treatment flag as an extra input column

inline Matrix append_treatment_column(const Matrix& x, double t) {
  Matrix out(x.rows(), x.cols() + 1);
  out.leftCols(x.cols()) = x;
  out.col(x.cols()).setConstant(t);
  return out;
}

inline Matrix append_treatment_column(const Matrix& x, const std::vector<int>& t) {
  Matrix out(x.rows(), x.cols() + 1);
  out.leftCols(x.cols()) = x;
  for (Index i = 0; i < x.rows(); ++i) out(i, x.cols()) = t[static_cast<std::size_t>(i)];
  return out;
}

struct DeepSurvNetwork {
  Mlp net;
  std::vector<ParamView> parameters() { return net.parameters(); }
};

class DeepSurvModel {
 public:
  DeepSurvModel() = default;

  /// `spec.input_dim` counts covariates only; the treatment column is added.
  explicit DeepSurvModel(const NetworkSpec& spec) : spec_(spec) {
    spec.validate();
    Rng rng(derive_seed(spec.seed, {0xD5}));
    net_.net = Mlp(spec.input_dim + 1, spec.shared_layers, true, spec.use_batch_norm, rng);
  }

  const NetworkSpec& spec() const { return spec_; }
  DeepSurvNetwork& network() { return net_; }
  const DeepSurvNetwork& network() const { return net_; }
  const BaselineHazard& baseline() const { return baseline_; }
  BaselineHazard& baseline() { return baseline_; }
  const TrainingHistory& history() const { return history_; }
  TrainingHistory& history() { return history_; }
  bool fitted() const { return fitted_; }
  void set_fitted(bool f) { fitted_ = f; }

  /// Log-hazard score h(T = t, x) for every row.
  Vector score(const Matrix& x, int t) const {
    return net_.net.forward(append_treatment_column(x, static_cast<double>(t)), Mode::Eval, 0.0, nullptr, nullptr)
        .col(0);
  }

  std::array<std::vector<SurvivalCurve>, 2> predict_curves(const Matrix& x) const {
    if (!fitted_) throw ConfigError("model is not fitted");
    std::array<std::vector<SurvivalCurve>, 2> out;
    for (int t : {0, 1}) {
      const Vector s = score(x, t);
      for (Index i = 0; i < x.rows(); ++i) out[static_cast<std::size_t>(t)].push_back(survival_curve(baseline_, s[i]));
    }
    return out;
  }

 private:
  NetworkSpec spec_;
  DeepSurvNetwork net_;
  BaselineHazard baseline_;
  TrainingHistory history_;
  bool fitted_ = false;
};

inline DeepSurvModel fit_deepsurv(const SurvivalDataset& train, const SurvivalDataset& val, const NetworkSpec& spec_in,
                                  const TrainConfig& train_cfg) {
  train.validate();
  val.validate();
  NetworkSpec spec = spec_in;
  if (spec.input_dim == 0) spec.input_dim = train.dim();
  if (spec.input_dim != train.dim() || val.dim() != train.dim()) throw DataError("fit: feature count mismatch");
  if (std::count(train.event.begin(), train.event.end(), 1) == 0) throw DataError("fit: no events in training data");
  DeepSurvModel model(spec);
  const Matrix x_train = append_treatment_column(train.features, train.treatment);
  const Matrix x_val = append_treatment_column(val.features, val.treatment);
  const bool val_has_events = std::count(val.event.begin(), val.event.end(), 1) > 0;

  auto step = [&](DeepSurvNetwork& net, const std::vector<Index>& rows, Rng& rng) {
    const bool full = rows.size() == static_cast<std::size_t>(train.size());
    const Matrix xb = full ? x_train : detail::gather_rows(x_train, rows);
    Vector t(static_cast<Index>(rows.size()));
    std::vector<int> e(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      t[static_cast<Index>(k)] = train.time[rows[k]];
      e[k] = train.event[static_cast<std::size_t>(rows[k])];
    }
    DeepSurvNetwork grad{net.net.zeros_like()};
    if (std::count(e.begin(), e.end(), 1) == 0) return std::pair<double, DeepSurvNetwork>{0.0, std::move(grad)};
    std::vector<BlockCache> cache;
    const Vector s = net.net.forward(xb, Mode::Train, spec.dropout_rate, &rng, &cache).col(0);
    const double loss = cox_nll(s, t, e);
    net.net.backward(Matrix(cox_nll_grad(s, t, e)), cache, grad.net);
    net.net.update_running_stats(cache);
    return std::pair<double, DeepSurvNetwork>{loss, std::move(grad)};
  };
  auto validate = [&](DeepSurvNetwork& net) {
    if (!val_has_events) return 0.0;
    const Vector s = net.net.forward(x_val, Mode::Eval, 0.0, nullptr, nullptr).col(0);
    return cox_nll(s, val.time, val.event);
  };

  DeepSurvNetwork net = model.network();
  model.history() = train_network(net, train.size(), train_cfg, step, validate);
  model.network() = std::move(net);
  const Vector s = model.network().net.forward(x_train, Mode::Eval, 0.0, nullptr, nullptr).col(0);
  model.baseline() = breslow_baseline(s, train.time, train.event);
  model.set_fitted(true);
  return model;
}

}  // namespace bites
