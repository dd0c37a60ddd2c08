#pragma once

#include "cytosae/geometric_median.hpp"
#include "cytosae/sae.hpp"
#include "cytosae/token_store.hpp"

#include <functional>

namespace cytosae {

// Adam first/second moments, kept in double regardless of parameter type.
struct AdamState {
  std::uint64_t t = 0;
  Matrix<double> m_W_enc, v_W_enc;
  Vector<double> m_b_enc, v_b_enc;
  Matrix<double> m_W_dec, v_W_dec;
  Vector<double> m_b_dec, v_b_dec;

  template <typename T>
  static AdamState zeros_like(const SaeModel<T>& m) {
    AdamState s;
    s.m_W_enc = s.v_W_enc = Matrix<double>::Zero(m.W_enc.rows(), m.W_enc.cols());
    s.m_b_enc = s.v_b_enc = Vector<double>::Zero(m.b_enc.size());
    s.m_W_dec = s.v_W_dec = Matrix<double>::Zero(m.W_dec.rows(), m.W_dec.cols());
    s.m_b_dec = s.v_b_dec = Vector<double>::Zero(m.b_dec.size());
    return s;
  }
};

template <typename T>
struct TrainState {
  SaeModel<T> model;
  AdamState adam;
};

inline double effective_learning_rate(const SaeConfig& c, std::uint64_t step) {
  if (c.warmup_steps == 0) return c.learning_rate;
  return c.learning_rate * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps));
}

namespace detail {

template <typename P, typename G, typename M>
void adam_update(P& param, const G& grad, M& m, M& v, double lr, double b1, double b2, double eps, double bc1,
                 double bc2) {
  using T = typename P::Scalar;
  for (Eigen::Index i = 0; i < param.size(); ++i) {
    const double g = static_cast<double>(grad.data()[i]);
    double& mi = m.data()[i];
    double& vi = v.data()[i];
    mi = b1 * mi + (1.0 - b1) * g;
    vi = b2 * vi + (1.0 - b2) * g * g;
    const double step = lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
    param.data()[i] = static_cast<T>(static_cast<double>(param.data()[i]) - step);
  }
}

}  // namespace detail

template <typename T>
void normalize_decoder_columns(SaeModel<T>& model) {
  for (Eigen::Index c = 0; c < model.W_dec.cols(); ++c) {
    const T n = model.W_dec.col(c).norm();
    if (n > T(0)) model.W_dec.col(c) /= n;
  }
}

struct StepResult {
  LossBreakdown loss;
  double lr = 0;
  double dead_fraction = 0;
};

// One optimisation step: loss/gradients (with ghost terms for latents dead
// before the step), Adam update under the warmup ramp, firing bookkeeping.
template <typename T>
StepResult train_step(TrainState<T>& state, const TokenBatch& batch, const SaeConfig& config) {
  auto& model = state.model;
  std::vector<bool> dead;
  if (config.ghost_grads_enabled) dead = detect_dead_latents(model, config.dead_window_steps);
  auto lg = loss_and_grads(model, batch.tokens, config.l1_coefficient, config.ghost_grads_enabled ? &dead : nullptr);

  StepResult out;
  out.loss = lg.loss;
  out.lr = effective_learning_rate(config, model.step);

  auto& a = state.adam;
  ++a.t;
  const double bc1 = 1.0 - std::pow(config.adam_beta1, static_cast<double>(a.t));
  const double bc2 = 1.0 - std::pow(config.adam_beta2, static_cast<double>(a.t));
  const double b1 = config.adam_beta1, b2 = config.adam_beta2, eps = config.adam_epsilon;
  detail::adam_update(model.W_enc, lg.grads.W_enc, a.m_W_enc, a.v_W_enc, out.lr, b1, b2, eps, bc1, bc2);
  detail::adam_update(model.b_enc, lg.grads.b_enc, a.m_b_enc, a.v_b_enc, out.lr, b1, b2, eps, bc1, bc2);
  detail::adam_update(model.W_dec, lg.grads.W_dec, a.m_W_dec, a.v_W_dec, out.lr, b1, b2, eps, bc1, bc2);
  detail::adam_update(model.b_dec, lg.grads.b_dec, a.m_b_dec, a.v_b_dec, out.lr, b1, b2, eps, bc1, bc2);

  if (config.normalize_decoder) normalize_decoder_columns(model);

  ++model.step;
  for (std::size_t s = 0; s < lg.fired.size(); ++s)
    if (lg.fired[s]) model.last_fired_step[s] = model.step;

  if (!model.all_finite())
    throw DivergenceError("non-finite parameters after step " + std::to_string(model.step) +
                          " (mse=" + format_real(out.loss.mse) + ", lr=" + format_real(out.lr) + ")");
  out.dead_fraction = fraction_true(detect_dead_latents(model, config.dead_window_steps));
  return out;
}

// Serves the batch for any step index: the training stream is the
// concatenation of epochs, each a seeded permutation of the filtered tokens,
// cut into consecutive batches of exactly `batch_size` tokens.
class TrainingBatchSource {
public:
  TrainingBatchSource(const DatasetHandle& handle, TokenFilter filter, std::size_t batch_size, std::uint64_t seed)
      : handle_(&handle), base_(handle.token_refs(filter)), batch_size_(batch_size), seed_(seed) {
    if (base_.empty()) throw DataError("dataset has no training tokens for the selected filter");
    if (batch_size_ == 0) throw ConfigError("batch_size must be positive");
  }

  TokenBatch batch_for_step(std::uint64_t step) {
    std::vector<TokenRef> refs;
    refs.reserve(batch_size_);
    const std::uint64_t n = base_.size();
    std::uint64_t pos = step * batch_size_;
    while (refs.size() < batch_size_) {
      const std::uint64_t epoch = pos / n;
      const auto& order = epoch_order(epoch);
      refs.push_back(order[pos % n]);
      ++pos;
    }
    return handle_->gather(refs);
  }

  std::size_t tokens_per_epoch() const { return base_.size(); }

private:
  const std::vector<TokenRef>& epoch_order(std::uint64_t epoch) {
    if (!cached_epoch_ || *cached_epoch_ != epoch) {
      order_ = base_;
      Rng rng(mix_seed(seed_, epoch + 1));
      shuffle_in_place(order_, rng);
      cached_epoch_ = epoch;
    }
    return order_;
  }

  const DatasetHandle* handle_;
  std::vector<TokenRef> base_;
  std::vector<TokenRef> order_;
  std::optional<std::uint64_t> cached_epoch_;
  std::size_t batch_size_;
  std::uint64_t seed_;
};

inline TokenFilter training_filter(const SaeConfig& c) { return token_filter_from_string(c.token_filter); }

// Tokens used to estimate b_dec: all filtered tokens, or a uniform sample of
// `cap` of them without replacement.
inline RowMatrix<double> bias_init_sample(const DatasetHandle& handle, const SaeConfig& config, Rng& rng) {
  auto refs = handle.token_refs(training_filter(config));
  if (refs.empty()) throw DataError("dataset has no training tokens for the selected filter");
  if (refs.size() > config.median_sample_cap) {
    for (std::size_t i = 0; i < config.median_sample_cap; ++i) {
      const auto j = i + static_cast<std::size_t>(uniform_index(rng, refs.size() - i));
      std::swap(refs[i], refs[j]);
    }
    refs.resize(config.median_sample_cap);
  }
  return handle.gather(refs).tokens;
}

template <typename T>
SaeModel<T> initialize_model(const SaeConfig& config, const DatasetHandle* handle, Rng& rng) {
  const auto d_m = config.d_m;
  const auto d_sae = config.d_sae();
  SaeModel<T> m(d_m, d_sae);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_m));
  Matrix<double> enc(static_cast<Eigen::Index>(d_sae), static_cast<Eigen::Index>(d_m));
  for (Eigen::Index r = 0; r < enc.rows(); ++r)
    for (Eigen::Index c = 0; c < enc.cols(); ++c) enc(r, c) = uniform_real(rng, -1.0, 1.0) * scale;
  Matrix<double> dec = enc.transpose();
  for (Eigen::Index c = 0; c < dec.cols(); ++c) {
    const double n = dec.col(c).norm();
    if (n > 0) dec.col(c) /= n;
  }
  m.W_enc = enc.cast<T>();
  m.W_dec = dec.cast<T>();

  if (config.b_dec_init != DecoderBiasInit::zeros) {
    if (!handle) throw ConfigError("b_dec initialisation from data requires a dataset");
    const auto sample = bias_init_sample(*handle, config, rng);
    if (config.b_dec_init == DecoderBiasInit::mean)
      m.b_dec = sample.colwise().mean().transpose().cast<T>();
    else
      m.b_dec = geometric_median(sample, config.median_tol, config.median_max_iter).point.cast<T>();
  }
  return m;
}

struct DatasetLoss {
  double mse = 0;
  double l1 = 0;
  double l0 = 0;
  std::size_t tokens = 0;
  std::vector<bool> ever_fired;
};

// Mean losses of `model` over every token admitted by `filter`, in dataset
// order (fixed summation order).
template <typename T>
DatasetLoss evaluate_dataset(const SaeModel<T>& model, const DatasetHandle& handle, TokenFilter filter,
                             std::size_t batch_size = 4096) {
  DatasetLoss out;
  out.ever_fired.assign(model.d_sae(), false);
  auto stream = iterate_batches(handle, batch_size, std::nullopt, filter);
  while (auto b = stream.next()) {
    const auto f = forward(model, b->tokens);
    out.mse += f.residual.template cast<double>().rowwise().squaredNorm().sum();
    out.l1 += f.z.template cast<double>().sum();
    out.l0 += static_cast<double>((f.z.array() > T(0)).count());
    for (Eigen::Index s = 0; s < f.z.cols(); ++s)
      if (!out.ever_fired[static_cast<std::size_t>(s)] && (f.z.col(s).array() > T(0)).any())
        out.ever_fired[static_cast<std::size_t>(s)] = true;
    out.tokens += b->size();
  }
  if (out.tokens > 0) {
    const double n = static_cast<double>(out.tokens);
    out.mse /= n;
    out.l1 /= n;
    out.l0 /= n;
  }
  return out;
}

struct StepMetrics {
  std::uint64_t step = 0;  // completed steps
  LossBreakdown loss;
  double dead_fraction = 0;
  double lr = 0;
};

inline std::string metrics_csv_header() { return "step,mse,l1,l0,ghost,dead_fraction,lr\n"; }

inline std::string metrics_csv_row(const StepMetrics& m) {
  return std::to_string(m.step) + "," + format_real(m.loss.mse) + "," + format_real(m.loss.l1) + "," +
         format_real(m.loss.l0) + "," + format_real(m.loss.ghost) + "," + format_real(m.dead_fraction) + "," +
         format_real(m.lr) + "\n";
}

}  // namespace cytosae
