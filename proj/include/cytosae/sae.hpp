#pragma once

// Sparse autoencoder over token embeddings:
//   z     = ReLU(W_enc (x - b_dec) + b_enc)
//   x_hat = W_dec z + b_dec
// trained on  mean_b ||x_b - x_hat_b||^2 + lambda * mean_b ||z_b||_1.

#include "cytosae/common.hpp"

#include <json.hpp>

namespace cytosae {

enum class DecoderBiasInit { geometric_median, mean, zeros };

inline std::string to_string(DecoderBiasInit v) {
  switch (v) {
    case DecoderBiasInit::geometric_median: return "geometric_median";
    case DecoderBiasInit::mean: return "mean";
    case DecoderBiasInit::zeros: return "zeros";
  }
  return "geometric_median";
}

inline DecoderBiasInit decoder_bias_init_from_string(const std::string& s) {
  if (s == "geometric_median") return DecoderBiasInit::geometric_median;
  if (s == "mean") return DecoderBiasInit::mean;
  if (s == "zeros") return DecoderBiasInit::zeros;
  throw ConfigError("unknown b_dec_init '" + s + "'");
}

struct SaeConfig {
  std::size_t d_m = 768;
  std::size_t expansion_factor = 64;
  double l1_coefficient = 8e-5;
  double learning_rate = 4e-4;
  std::size_t warmup_steps = 500;
  std::size_t total_steps = 10000;
  std::size_t batch_size = 4096;
  bool ghost_grads_enabled = true;
  std::size_t dead_window_steps = 1000;
  std::string token_filter = "all";  // "all" or "patch_only"
  std::uint64_t seed = 0;
  DecoderBiasInit b_dec_init = DecoderBiasInit::geometric_median;
  // Rescale W_dec columns to unit norm after every update; without it the
  // L1 term can be driven down by shrinking z while W_dec grows.
  bool normalize_decoder = true;

  // Adam and initialisation details.
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t median_sample_cap = 100000;
  double median_tol = 1e-6;
  std::size_t median_max_iter = 1000;

  std::size_t d_sae() const { return d_m * expansion_factor; }

  void validate() const {
    if (d_m == 0) throw ConfigError("d_m must be positive");
    if (expansion_factor == 0) throw ConfigError("expansion_factor must be positive");
    if (l1_coefficient < 0 || !std::isfinite(l1_coefficient)) throw ConfigError("l1_coefficient must be >= 0");
    if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (dead_window_steps == 0) throw ConfigError("dead_window_steps must be positive");
    if (warmup_steps > total_steps && total_steps > 0)
      throw ConfigError("warmup_steps must not exceed total_steps");
    if (token_filter != "all" && token_filter != "patch_only")
      throw ConfigError("token_filter must be 'all' or 'patch_only'");
  }
};

inline nlohmann::json to_json(const SaeConfig& c) {
  return {{"d_m", c.d_m},
          {"expansion_factor", c.expansion_factor},
          {"l1_coefficient", c.l1_coefficient},
          {"learning_rate", c.learning_rate},
          {"warmup_steps", c.warmup_steps},
          {"total_steps", c.total_steps},
          {"batch_size", c.batch_size},
          {"ghost_grads_enabled", c.ghost_grads_enabled},
          {"dead_window_steps", c.dead_window_steps},
          {"token_filter", c.token_filter},
          {"seed", c.seed},
          {"b_dec_init", to_string(c.b_dec_init)},
          {"normalize_decoder", c.normalize_decoder},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_epsilon", c.adam_epsilon},
          {"median_sample_cap", c.median_sample_cap},
          {"median_tol", c.median_tol},
          {"median_max_iter", c.median_max_iter}};
}

inline SaeConfig sae_config_from_json(const nlohmann::json& j) {
  SaeConfig c;
  try {
    c.d_m = j.at("d_m").get<std::size_t>();
    c.expansion_factor = j.at("expansion_factor").get<std::size_t>();
    c.l1_coefficient = j.at("l1_coefficient").get<double>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.warmup_steps = j.at("warmup_steps").get<std::size_t>();
    c.total_steps = j.at("total_steps").get<std::size_t>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.ghost_grads_enabled = j.at("ghost_grads_enabled").get<bool>();
    c.dead_window_steps = j.at("dead_window_steps").get<std::size_t>();
    c.token_filter = j.at("token_filter").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.b_dec_init = decoder_bias_init_from_string(j.at("b_dec_init").get<std::string>());
    c.normalize_decoder = j.value("normalize_decoder", c.normalize_decoder);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
    c.median_sample_cap = j.value("median_sample_cap", c.median_sample_cap);
    c.median_tol = j.value("median_tol", c.median_tol);
    c.median_max_iter = j.value("median_max_iter", c.median_max_iter);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed SAE config: ") + e.what());
  }
  return c;
}

template <typename T>
struct SaeModel {
  Matrix<T> W_enc;  // d_sae x d_m
  Vector<T> b_enc;  // d_sae
  Matrix<T> W_dec;  // d_m x d_sae
  Vector<T> b_dec;  // d_m
  std::uint64_t step = 0;
  std::vector<std::uint64_t> last_fired_step;  // d_sae

  SaeModel() = default;
  SaeModel(std::size_t d_m, std::size_t d_sae)
      : W_enc(Matrix<T>::Zero(static_cast<Eigen::Index>(d_sae), static_cast<Eigen::Index>(d_m))),
        b_enc(Vector<T>::Zero(static_cast<Eigen::Index>(d_sae))),
        W_dec(Matrix<T>::Zero(static_cast<Eigen::Index>(d_m), static_cast<Eigen::Index>(d_sae))),
        b_dec(Vector<T>::Zero(static_cast<Eigen::Index>(d_m))),
        last_fired_step(d_sae, 0) {}

  std::size_t d_m() const { return static_cast<std::size_t>(W_enc.cols()); }
  std::size_t d_sae() const { return static_cast<std::size_t>(W_enc.rows()); }

  bool all_finite() const {
    return W_enc.allFinite() && b_enc.allFinite() && W_dec.allFinite() && b_dec.allFinite();
  }

  template <typename U>
  SaeModel<U> cast() const {
    SaeModel<U> m;
    m.W_enc = W_enc.template cast<U>();
    m.b_enc = b_enc.template cast<U>();
    m.W_dec = W_dec.template cast<U>();
    m.b_dec = b_dec.template cast<U>();
    m.step = step;
    m.last_fired_step = last_fired_step;
    return m;
  }
};

template <typename T>
bool identical(const SaeModel<T>& a, const SaeModel<T>& b) {
  auto same = [](const auto& x, const auto& y) {
    return x.rows() == y.rows() && x.cols() == y.cols() &&
           std::memcmp(x.data(), y.data(), sizeof(T) * static_cast<std::size_t>(x.size())) == 0;
  };
  return same(a.W_enc, b.W_enc) && same(a.b_enc, b.b_enc) && same(a.W_dec, b.W_dec) &&
         same(a.b_dec, b.b_dec) && a.step == b.step && a.last_fired_step == b.last_fired_step;
}

template <typename T>
void check_input_dim(const SaeModel<T>& model, Eigen::Index n, const char* what) {
  if (static_cast<std::size_t>(n) != model.d_m())
    throw DataError(std::string("dimension mismatch: ") + what + " has " + std::to_string(n) +
                    " entries, model d_m = " + std::to_string(model.d_m()));
}

template <typename T, typename Derived>
Vector<T> encode(const SaeModel<T>& model, const Eigen::MatrixBase<Derived>& x) {
  check_input_dim(model, x.size(), "input");
  const Vector<T> centered = x.template cast<T>() - model.b_dec;
  return ((model.W_enc * centered) + model.b_enc).cwiseMax(T(0));
}

// Batched encode; rows of `x` are tokens. Returns B x d_sae.
template <typename T, typename Derived>
RowMatrix<T> encode_rows(const SaeModel<T>& model, const Eigen::MatrixBase<Derived>& x) {
  check_input_dim(model, x.cols(), "token rows");
  RowMatrix<T> pre = (x.template cast<T>().rowwise() - model.b_dec.transpose()) * model.W_enc.transpose();
  pre.rowwise() += model.b_enc.transpose();
  return pre.cwiseMax(T(0));
}

template <typename T, typename Derived>
Vector<T> decode(const SaeModel<T>& model, const Eigen::MatrixBase<Derived>& z) {
  if (static_cast<std::size_t>(z.size()) != model.d_sae())
    throw DataError("dimension mismatch: latent vector has " + std::to_string(z.size()) +
                    " entries, model d_sae = " + std::to_string(model.d_sae()));
  return model.W_dec * z.template cast<T>() + model.b_dec;
}

struct LossBreakdown {
  double mse = 0;
  double l1 = 0;
  double l0 = 0;
  double ghost = 0;
  double total = 0;
};

template <typename T>
struct Gradients {
  Matrix<T> W_enc;
  Vector<T> b_enc;
  Matrix<T> W_dec;
  Vector<T> b_dec;

  static Gradients zeros_like(const SaeModel<T>& m) {
    return {Matrix<T>::Zero(m.W_enc.rows(), m.W_enc.cols()), Vector<T>::Zero(m.b_enc.size()),
            Matrix<T>::Zero(m.W_dec.rows(), m.W_dec.cols()), Vector<T>::Zero(m.b_dec.size())};
  }
};

// Intermediate quantities of one batched forward pass.
template <typename T>
struct ForwardCache {
  RowMatrix<T> centered;  // B x d_m, x - b_dec
  RowMatrix<T> pre;       // B x d_sae
  RowMatrix<T> z;         // B x d_sae
  RowMatrix<T> residual;  // B x d_m, x - x_hat
};

template <typename T>
ForwardCache<T> forward(const SaeModel<T>& model, const RowMatrix<double>& x) {
  check_input_dim(model, x.cols(), "batch");
  ForwardCache<T> f;
  f.centered = x.cast<T>().rowwise() - model.b_dec.transpose();
  f.pre = f.centered * model.W_enc.transpose();
  f.pre.rowwise() += model.b_enc.transpose();
  f.z = f.pre.cwiseMax(T(0));
  RowMatrix<T> x_hat = f.z * model.W_dec.transpose();
  x_hat.rowwise() += model.b_dec.transpose();
  f.residual = x.cast<T>() - x_hat;
  return f;
}

struct GhostResult {
  double loss = 0;
};

// Ghost-gradient auxiliary term for latents flagged in `dead`. The residual
// e = x - x_hat is treated as a constant. Dead latents produce exp(pre)
// activations, decoded through their W_dec columns; the decoded vector is
// rescaled (constant factor) to half the residual norm, and the per-token
// squared error against e is rescaled (constant factor) to the main per-token
// squared error. Gradients reach only the dead latents' encoder rows, encoder
// biases, and decoder columns; they are accumulated into `grads`.
template <typename T>
GhostResult ghost_terms_from_cache(const SaeModel<T>& model, const ForwardCache<T>& f,
                                   const std::vector<bool>& dead, Gradients<T>& grads) {
  std::vector<Eigen::Index> idx;
  for (std::size_t s = 0; s < dead.size(); ++s)
    if (dead[s]) idx.push_back(static_cast<Eigen::Index>(s));
  GhostResult out;
  if (idx.empty()) return out;

  const Eigen::Index B = f.pre.rows();
  const Eigen::Index D = static_cast<Eigen::Index>(idx.size());
  RowMatrix<T> acts(B, D);
  for (Eigen::Index k = 0; k < D; ++k) acts.col(k) = f.pre.col(idx[k]).array().exp();
  Matrix<T> dec(model.W_dec.rows(), D);
  for (Eigen::Index k = 0; k < D; ++k) dec.col(k) = model.W_dec.col(idx[k]);

  const RowMatrix<T> u = acts * dec.transpose();  // B x d_m
  RowMatrix<T> d_u(B, u.cols());
  constexpr double eps = 1e-12;
  double total = 0;
  for (Eigen::Index b = 0; b < B; ++b) {
    const double res_sq = f.residual.row(b).template cast<double>().squaredNorm();
    const double u_norm = u.row(b).template cast<double>().norm();
    const double scale = std::sqrt(res_sq) / (2.0 * u_norm + eps);
    const auto diff = (u.row(b).template cast<double>() * scale - f.residual.row(b).template cast<double>()).eval();
    const double ghost_sq = diff.squaredNorm();
    const double ratio = res_sq / (ghost_sq + eps);
    total += ratio * ghost_sq;
    d_u.row(b) = (diff * (2.0 * ratio * scale / static_cast<double>(B))).template cast<T>();
  }
  out.loss = total / static_cast<double>(B);

  const Matrix<T> g_dec = d_u.transpose() * acts;                 // d_m x D
  const RowMatrix<T> d_pre = (d_u * dec).cwiseProduct(acts);      // B x D
  const Matrix<T> g_enc = d_pre.transpose() * f.centered;         // D x d_m
  const Vector<T> g_benc = d_pre.colwise().sum().transpose();
  for (Eigen::Index k = 0; k < D; ++k) {
    grads.W_dec.col(idx[k]) += g_dec.col(k);
    grads.W_enc.row(idx[k]) += g_enc.row(k);
    grads.b_enc(idx[k]) += g_benc(k);
  }
  return out;
}

template <typename T>
struct LossAndGrads {
  LossBreakdown loss;
  Gradients<T> grads;
  std::vector<bool> fired;  // z[s] > 0 on any token of the batch
};

// Loss and exact gradients of mse + lambda * l1 (+ ghost when `dead` is
// given), with subgradient 0 at ReLU kinks.
template <typename T>
LossAndGrads<T> loss_and_grads(const SaeModel<T>& model, const RowMatrix<double>& x, double lambda,
                               const std::vector<bool>* dead = nullptr) {
  if (x.rows() == 0) throw DataError("empty batch");
  const auto f = forward(model, x);
  const Eigen::Index B = x.rows();
  const double inv_b = 1.0 / static_cast<double>(B);

  LossAndGrads<T> r;
  r.loss.mse = f.residual.template cast<double>().rowwise().squaredNorm().sum() * inv_b;
  r.loss.l1 = f.z.template cast<double>().sum() * inv_b;
  r.loss.l0 = static_cast<double>((f.z.array() > T(0)).count()) * inv_b;
  r.fired.assign(model.d_sae(), false);
  for (Eigen::Index s = 0; s < f.z.cols(); ++s)
    r.fired[static_cast<std::size_t>(s)] = (f.z.col(s).array() > T(0)).any();

  // d(mse)/d(x_hat) = -2 e / B
  const RowMatrix<T> d_xhat = f.residual * T(-2.0 * inv_b);
  RowMatrix<T> d_pre = d_xhat * model.W_dec;
  d_pre.array() += T(lambda * inv_b);
  d_pre = (f.pre.array() > T(0)).select(d_pre, T(0));

  r.grads.W_dec = d_xhat.transpose() * f.z;
  r.grads.W_enc = d_pre.transpose() * f.centered;
  r.grads.b_enc = d_pre.colwise().sum().transpose();
  // b_dec enters both the decoder output and the encoder centering
  r.grads.b_dec = d_xhat.colwise().sum().transpose() - model.W_enc.transpose() * r.grads.b_enc;

  if (dead && std::any_of(dead->begin(), dead->end(), [](bool d) { return d; })) {
    if (dead->size() != model.d_sae()) throw DataError("dead mask length does not match d_sae");
    r.loss.ghost = ghost_terms_from_cache(model, f, *dead, r.grads).loss;
  }
  r.loss.total = r.loss.mse + lambda * r.loss.l1 + r.loss.ghost;
  if (!std::isfinite(r.loss.total))
    throw DivergenceError("non-finite loss (mse=" + format_real(r.loss.mse) + ", l1=" + format_real(r.loss.l1) +
                          ", ghost=" + format_real(r.loss.ghost) + ") at step " + std::to_string(model.step));
  return r;
}

// Ghost contribution and its gradients alone (zero gradients elsewhere).
template <typename T>
std::pair<double, Gradients<T>> ghost_grad_terms(const SaeModel<T>& model, const RowMatrix<double>& x,
                                                 const std::vector<bool>& dead) {
  if (x.rows() == 0) throw DataError("empty batch");
  auto grads = Gradients<T>::zeros_like(model);
  if (dead.size() != model.d_sae()) throw DataError("dead mask length does not match d_sae");
  const auto f = forward(model, x);
  const auto g = ghost_terms_from_cache(model, f, dead, grads);
  return {g.loss, std::move(grads)};
}

template <typename T>
std::vector<bool> detect_dead_latents(const SaeModel<T>& model, std::uint64_t window) {
  std::vector<bool> dead(model.d_sae(), false);
  for (std::size_t s = 0; s < dead.size(); ++s) dead[s] = model.step - model.last_fired_step[s] >= window;
  return dead;
}

inline double fraction_true(const std::vector<bool>& mask) {
  if (mask.empty()) return 0;
  return static_cast<double>(std::count(mask.begin(), mask.end(), true)) / static_cast<double>(mask.size());
}

}  // namespace cytosae
