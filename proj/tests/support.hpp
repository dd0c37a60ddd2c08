#pragma once

// Fixtures and independent reference computations shared by the unit tests
// and the acceptance binary. Oracles use plain loops over std::vector and
// never call into the library's math.

#include "cytosae/token_store.hpp"
#include "cytosae/sae.hpp"

#include <atomic>
#include <filesystem>
#include <unistd.h>

namespace testsupport {

namespace fs = std::filesystem;
using cytosae::Rng;

class TempDir {
public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("cytosae_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string str() const { return path_.string(); }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

private:
  fs::path path_;
};

struct RecordSpec {
  std::size_t n_images = 6;
  std::size_t n_tokens = 5;  // 2x2 grid + CLS
  std::size_t d_m = 4;
  bool has_cls = true;
  std::size_t images_per_patient = 2;
  std::size_t n_labels = 3;
  std::size_t n_diseases = 0;
  std::uint64_t seed = 0;
};

inline std::vector<cytosae::TokenRecord> random_records(const RecordSpec& s) {
  Rng rng(s.seed);
  std::vector<cytosae::TokenRecord> out;
  for (std::size_t i = 0; i < s.n_images; ++i) {
    cytosae::TokenRecord r;
    r.image_id = "im" + std::to_string(1000 + i);
    const auto patient = i / std::max<std::size_t>(1, s.images_per_patient);
    if (s.images_per_patient > 0) r.patient_id = "p" + std::to_string(100 + patient);
    r.dataset_id = "unit";
    if (s.n_labels > 0) r.class_label = "label" + std::to_string(cytosae::uniform_index(rng, s.n_labels));
    if (s.n_diseases > 0) r.disease_label = "dz" + std::to_string(patient % s.n_diseases);
    r.has_cls = s.has_cls;
    r.tokens.resize(static_cast<Eigen::Index>(s.n_tokens), static_cast<Eigen::Index>(s.d_m));
    for (Eigen::Index t = 0; t < r.tokens.size(); ++t) r.tokens.data()[t] = static_cast<float>(cytosae::standard_normal(rng));
    out.push_back(std::move(r));
  }
  return out;
}

template <typename T>
cytosae::SaeModel<T> random_model(std::size_t d_m, std::size_t d_sae, std::uint64_t seed, double bias_scale = 0.3) {
  Rng rng(seed);
  cytosae::SaeModel<T> m(d_m, d_sae);
  auto fill = [&](auto& a, double scale) {
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = static_cast<T>(scale * cytosae::standard_normal(rng));
  };
  fill(m.W_enc, 1.0 / std::sqrt(static_cast<double>(d_m)));
  fill(m.W_dec, 1.0 / std::sqrt(static_cast<double>(d_sae)));
  fill(m.b_enc, bias_scale);
  fill(m.b_dec, bias_scale);
  return m;
}

inline cytosae::RowMatrix<double> random_batch(std::size_t b, std::size_t d_m, std::uint64_t seed) {
  Rng rng(seed);
  cytosae::RowMatrix<double> x(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(d_m));
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = cytosae::standard_normal(rng);
  return x;
}

// Parameters copied into nested vectors so the oracles are loop-only.
struct PlainParams {
  std::vector<std::vector<double>> W_enc;  // d_sae x d_m
  std::vector<double> b_enc;               // d_sae
  std::vector<std::vector<double>> W_dec;  // d_m x d_sae
  std::vector<double> b_dec;               // d_m

  template <typename T>
  static PlainParams from(const cytosae::SaeModel<T>& m) {
    PlainParams p;
    p.W_enc.assign(m.d_sae(), std::vector<double>(m.d_m()));
    p.W_dec.assign(m.d_m(), std::vector<double>(m.d_sae()));
    p.b_enc.resize(m.d_sae());
    p.b_dec.resize(m.d_m());
    for (std::size_t s = 0; s < m.d_sae(); ++s) {
      p.b_enc[s] = static_cast<double>(m.b_enc(static_cast<Eigen::Index>(s)));
      for (std::size_t j = 0; j < m.d_m(); ++j) {
        p.W_enc[s][j] = static_cast<double>(m.W_enc(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(j)));
        p.W_dec[j][s] = static_cast<double>(m.W_dec(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(s)));
      }
    }
    for (std::size_t j = 0; j < m.d_m(); ++j) p.b_dec[j] = static_cast<double>(m.b_dec(static_cast<Eigen::Index>(j)));
    return p;
  }
  std::size_t d_sae() const { return b_enc.size(); }
  std::size_t d_m() const { return b_dec.size(); }
};

inline std::vector<double> naive_pre(const PlainParams& p, const std::vector<double>& x) {
  std::vector<double> pre(p.d_sae());
  for (std::size_t s = 0; s < p.d_sae(); ++s) {
    double acc = p.b_enc[s];
    for (std::size_t j = 0; j < p.d_m(); ++j) acc += p.W_enc[s][j] * (x[j] - p.b_dec[j]);
    pre[s] = acc;
  }
  return pre;
}

inline std::vector<double> naive_encode(const PlainParams& p, const std::vector<double>& x) {
  auto z = naive_pre(p, x);
  for (auto& v : z) v = v > 0 ? v : 0.0;
  return z;
}

inline std::vector<double> naive_decode(const PlainParams& p, const std::vector<double>& z) {
  std::vector<double> out(p.d_m());
  for (std::size_t j = 0; j < p.d_m(); ++j) {
    double acc = p.b_dec[j];
    for (std::size_t s = 0; s < p.d_sae(); ++s) acc += p.W_dec[j][s] * z[s];
    out[j] = acc;
  }
  return out;
}

inline std::vector<double> row(const cytosae::RowMatrix<double>& x, Eigen::Index i) {
  return std::vector<double>(x.row(i).begin(), x.row(i).end());
}

// mean_b ||x - x_hat||^2 + lambda * mean_b ||z||_1
inline double naive_loss(const PlainParams& p, const cytosae::RowMatrix<double>& x, double lambda) {
  double total = 0;
  for (Eigen::Index b = 0; b < x.rows(); ++b) {
    const auto xb = row(x, b);
    const auto z = naive_encode(p, xb);
    const auto xh = naive_decode(p, z);
    for (std::size_t j = 0; j < xb.size(); ++j) total += (xb[j] - xh[j]) * (xb[j] - xh[j]);
    for (double v : z) total += lambda * v;
  }
  return total / static_cast<double>(x.rows());
}

// Ghost term with the residual, the output scale and the error ratio frozen
// at `frozen` (and the encoder input x - b_dec frozen as well): only the dead
// latents' W_enc rows, b_enc entries and W_dec columns are live.
struct GhostFrozen {
  std::vector<std::vector<double>> residual, centered;
  std::vector<double> scale, ratio;
};

inline GhostFrozen ghost_freeze(const PlainParams& p, const cytosae::RowMatrix<double>& x,
                                const std::vector<bool>& dead) {
  GhostFrozen g;
  for (Eigen::Index b = 0; b < x.rows(); ++b) {
    const auto xb = row(x, b);
    const auto xh = naive_decode(p, naive_encode(p, xb));
    const auto pre = naive_pre(p, xb);
    std::vector<double> e(xb.size()), c(xb.size()), u(xb.size(), 0.0);
    for (std::size_t j = 0; j < xb.size(); ++j) {
      e[j] = xb[j] - xh[j];
      c[j] = xb[j] - p.b_dec[j];
    }
    for (std::size_t s = 0; s < dead.size(); ++s)
      if (dead[s])
        for (std::size_t j = 0; j < xb.size(); ++j) u[j] += std::exp(pre[s]) * p.W_dec[j][s];
    double e2 = 0, u2 = 0;
    for (std::size_t j = 0; j < xb.size(); ++j) {
      e2 += e[j] * e[j];
      u2 += u[j] * u[j];
    }
    const double scale = std::sqrt(e2) / (2.0 * std::sqrt(u2) + 1e-12);
    double g2 = 0;
    for (std::size_t j = 0; j < xb.size(); ++j) g2 += (scale * u[j] - e[j]) * (scale * u[j] - e[j]);
    g.residual.push_back(e);
    g.centered.push_back(c);
    g.scale.push_back(scale);
    g.ratio.push_back(e2 / (g2 + 1e-12));
  }
  return g;
}

inline double naive_ghost_loss(const PlainParams& p, const GhostFrozen& fz, const std::vector<bool>& dead) {
  double total = 0;
  for (std::size_t b = 0; b < fz.residual.size(); ++b) {
    std::vector<double> u(p.d_m(), 0.0);
    for (std::size_t s = 0; s < dead.size(); ++s) {
      if (!dead[s]) continue;
      double pre = p.b_enc[s];
      for (std::size_t j = 0; j < p.d_m(); ++j) pre += p.W_enc[s][j] * fz.centered[b][j];
      for (std::size_t j = 0; j < p.d_m(); ++j) u[j] += std::exp(pre) * p.W_dec[j][s];
    }
    double g2 = 0;
    for (std::size_t j = 0; j < p.d_m(); ++j) {
      const double d = fz.scale[b] * u[j] - fz.residual[b][j];
      g2 += d * d;
    }
    total += fz.ratio[b] * g2;
  }
  return total / static_cast<double>(fz.residual.size());
}

// Relative error between two gradient tensors, measured on their norms.
template <typename A, typename B>
double relative_error(const A& analytic, const B& numeric) {
  double diff = 0, na = 0, nn = 0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double a = static_cast<double>(analytic.data()[i]), n = numeric.data()[i];
    diff += (a - n) * (a - n);
    na += a * a;
    nn += n * n;
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  return std::sqrt(diff) / denom;
}

// Central differences of f over every entry of `param` (perturbed in place).
template <typename Param, typename F>
Eigen::MatrixXd central_differences(Param& param, F&& f, double eps) {
  Eigen::MatrixXd g(param.rows(), param.cols());
  for (Eigen::Index i = 0; i < param.rows(); ++i)
    for (Eigen::Index j = 0; j < param.cols(); ++j) {
      const double orig = param(i, j);
      param(i, j) = orig + eps;
      const double fp = f();
      param(i, j) = orig - eps;
      const double fm = f();
      param(i, j) = orig;
      g(i, j) = (fp - fm) / (2 * eps);
    }
  return g;
}

// Smallest |pre-activation| over a batch; FD checks skip configurations that
// put a pre-activation within reach of the ReLU kink.
template <typename T>
double min_abs_pre(const cytosae::SaeModel<T>& m, const cytosae::RowMatrix<double>& x) {
  const auto f = cytosae::forward(m, x);
  return f.pre.cwiseAbs().minCoeff();
}

// Sum-of-distances minimiser over 2-D points by a coarse grid over the
// bounding box, then repeated zooms around the best cell.
inline Eigen::Vector2d grid_search_median(const cytosae::RowMatrix<double>& pts) {
  Eigen::Vector2d lo = pts.colwise().minCoeff().transpose(), hi = pts.colwise().maxCoeff().transpose();
  Eigen::Vector2d best = (lo + hi) / 2;
  for (int level = 0; level < 12; ++level) {
    double best_f = std::numeric_limits<double>::infinity();
    const int n = 40;
    for (int i = 0; i <= n; ++i)
      for (int j = 0; j <= n; ++j) {
        Eigen::Vector2d c(lo(0) + (hi(0) - lo(0)) * i / n, lo(1) + (hi(1) - lo(1)) * j / n);
        double f = 0;
        for (Eigen::Index k = 0; k < pts.rows(); ++k) f += std::hypot(pts(k, 0) - c(0), pts(k, 1) - c(1));
        if (f < best_f) {
          best_f = f;
          best = c;
        }
      }
    const Eigen::Vector2d half = (hi - lo) / 10;
    lo = best - half;
    hi = best + half;
  }
  return best;
}

}  // namespace testsupport
