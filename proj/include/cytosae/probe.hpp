#pragma once

// L2-regularised multinomial logistic regression on patient barcodes,
// stratified cross-validation and the latent-threshold sweep.

#include "cytosae/common.hpp"
#include "cytosae/parallel.hpp"

#include <ceres/gradient_problem.h>
#include <ceres/gradient_problem_solver.h>
#include <json.hpp>

#include <map>
#include <set>

namespace cytosae {

// Inverse regularisation strength from the class count and training size.
inline double inverse_reg_strength(std::size_t n_classes, std::size_t n_train) {
  return static_cast<double>(n_classes) * static_cast<double>(n_train) / 100.0;
}

struct ProbeConfig {
  std::size_t max_iter = 1000;
  double tol = 1e-6;  // on the max-abs gradient of the objective
  std::size_t folds = 5;
  std::uint64_t seed = 0;
  bool standardize = false;
  std::size_t threads = 1;
  std::optional<double> inverse_reg_override;  // fixed C instead of c*n/100
};

struct ProbeModel {
  Matrix<double> weights;  // classes x features
  Vector<double> intercepts;
  Vector<double> feature_mean, feature_scale;  // identity unless standardised
  double inverse_reg_strength = 0;
  double objective = 0;
  double grad_norm = 0;
  std::size_t iterations = 0;
  bool converged = false;

  std::size_t n_classes() const { return static_cast<std::size_t>(weights.rows()); }
};

// Objective: sum of per-sample cross-entropy + ||W||^2 / (2C). Parameters are
// packed as [W row-major, b].
class LogisticObjective {
public:
  LogisticObjective(const RowMatrix<double>& x, const std::vector<int>& y, std::size_t n_classes, double C)
      : x_(x), y_(y), c_(static_cast<Eigen::Index>(n_classes)), C_(C) {}

  Eigen::Index size() const { return c_ * x_.cols() + c_; }

  double value(const Vector<double>& theta) const {
    return eval(theta, nullptr);
  }
  double value_and_grad(const Vector<double>& theta, Vector<double>& grad) const { return eval(theta, &grad); }

  RowMatrix<double> unpack_weights(const Vector<double>& theta) const {
    return Eigen::Map<const RowMatrix<double>>(theta.data(), c_, x_.cols());
  }
  Vector<double> unpack_intercepts(const Vector<double>& theta) const { return theta.tail(c_); }

private:
  double eval(const Vector<double>& theta, Vector<double>* grad) const {
    const Eigen::Index d = x_.cols();
    Eigen::Map<const RowMatrix<double>> W(theta.data(), c_, d);
    const auto b = theta.tail(c_);
    RowMatrix<double> logits = x_ * W.transpose();
    logits.rowwise() += b.transpose();
    double f = 0;
    RowMatrix<double> resid(x_.rows(), c_);  // softmax - onehot
    for (Eigen::Index i = 0; i < x_.rows(); ++i) {
      const double mx = logits.row(i).maxCoeff();
      const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
      f += lse - logits(i, y_[static_cast<std::size_t>(i)]);
      resid.row(i) = (logits.row(i).array() - lse).exp().matrix();
      resid(i, y_[static_cast<std::size_t>(i)]) -= 1.0;
    }
    f += W.squaredNorm() / (2.0 * C_);
    if (grad) {
      grad->resize(size());
      Eigen::Map<RowMatrix<double>> gW(grad->data(), c_, d);
      gW = resid.transpose() * x_ + W / C_;
      grad->tail(c_) = resid.colwise().sum().transpose();
    }
    return f;
  }

  const RowMatrix<double>& x_;
  const std::vector<int>& y_;
  Eigen::Index c_;
  double C_;
};

namespace detail {

struct LbfgsResult {
  Vector<double> x;
  double f = 0;
  double grad_norm = 0;
  std::size_t iterations = 0;
  bool converged = false;
};

template <typename Objective>
class CeresObjective final : public ceres::FirstOrderFunction {
 public:
  explicit CeresObjective(const Objective& obj) : obj_(obj) {}
  bool Evaluate(const double* params, double* cost, double* gradient) const override {
    const Eigen::Map<const Vector<double>> x(params, obj_.size());
    Vector<double> g;
    *cost = obj_.value_and_grad(x, g);
    if (gradient) Eigen::Map<Vector<double>>(gradient, obj_.size()) = g;
    return std::isfinite(*cost);
  }
  int NumParameters() const override { return static_cast<int>(obj_.size()); }

 private:
  const Objective& obj_;
};

// Ceres L-BFGS with a Wolfe line search. Its gradient tolerance on a flat
// parameter space is the max-abs gradient; the other stopping rules are off
// so only the gradient or max_iter ends the run.
template <typename Objective>
LbfgsResult lbfgs(const Objective& obj, Vector<double> x, std::size_t max_iter, double tol, std::size_t memory = 10) {
  ceres::GradientProblem problem(new CeresObjective<Objective>(obj));
  ceres::GradientProblemSolver::Options opt;
  opt.line_search_direction_type = ceres::LBFGS;
  opt.line_search_type = ceres::WOLFE;
  opt.max_lbfgs_rank = static_cast<int>(memory);
  opt.max_num_iterations = static_cast<int>(max_iter);
  opt.gradient_tolerance = tol;
  opt.function_tolerance = 0;
  opt.parameter_tolerance = 0;
  opt.logging_type = ceres::SILENT;
  ceres::GradientProblemSolver::Summary summary;
  ceres::Solve(opt, problem, x.data(), &summary);

  LbfgsResult r;
  Vector<double> g;
  r.f = obj.value_and_grad(x, g);
  r.grad_norm = g.lpNorm<Eigen::Infinity>();
  r.iterations = summary.iterations.empty() ? 0 : summary.iterations.size() - 1;
  r.converged = r.grad_norm < tol;
  r.x = std::move(x);
  return r;
}

}  // namespace detail

// Labels are class indices in [0, n_classes). C is the inverse
// regularisation strength.
inline ProbeModel fit_probe(const RowMatrix<double>& features, const std::vector<int>& labels, std::size_t n_classes,
                            double C, const ProbeConfig& config = {},
                            const std::optional<Vector<double>>& init = std::nullopt) {
  const auto n = static_cast<std::size_t>(features.rows());
  if (labels.size() != n) throw DataError("feature/label count mismatch");
  if (n_classes < 2) throw DataError("probe needs at least two classes");
  if (n < n_classes) throw DataError("fewer training samples than classes");
  if (!(C > 0)) throw ConfigError("inverse regularisation strength must be positive");
  std::vector<bool> present(n_classes, false);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes) throw DataError("label index out of range");
    present[static_cast<std::size_t>(y)] = true;
  }
  for (std::size_t c = 0; c < n_classes; ++c)
    if (!present[c]) throw DataError("class " + std::to_string(c) + " absent from training labels");
  if (!features.allFinite()) throw DataError("non-finite probe features");

  ProbeModel m;
  m.inverse_reg_strength = C;
  const auto d = features.cols();
  m.feature_mean = Vector<double>::Zero(d);
  m.feature_scale = Vector<double>::Ones(d);
  RowMatrix<double> x = features;
  if (config.standardize) {
    m.feature_mean = features.colwise().mean().transpose();
    for (Eigen::Index j = 0; j < d; ++j) {
      const double sd = std::sqrt((features.col(j).array() - m.feature_mean(j)).square().mean());
      m.feature_scale(j) = sd > 0 ? sd : 1.0;
    }
    x = (features.rowwise() - m.feature_mean.transpose()).array().rowwise() / m.feature_scale.transpose().array();
  }

  LogisticObjective obj(x, labels, n_classes, C);
  Vector<double> theta0 = init ? *init : Vector<double>::Zero(obj.size());
  if (theta0.size() != obj.size()) throw ConfigError("probe initialisation has the wrong size");
  const auto r = detail::lbfgs(obj, theta0, config.max_iter, config.tol);
  m.weights = obj.unpack_weights(r.x);
  m.intercepts = obj.unpack_intercepts(r.x);
  m.intercepts.array() -= m.intercepts.mean();  // softmax is shift invariant in b
  m.objective = r.f;
  m.grad_norm = r.grad_norm;
  m.iterations = r.iterations;
  m.converged = r.converged;
  return m;
}

inline RowMatrix<double> predict_proba(const ProbeModel& m, const RowMatrix<double>& features) {
  RowMatrix<double> x =
      (features.rowwise() - m.feature_mean.transpose()).array().rowwise() / m.feature_scale.transpose().array();
  RowMatrix<double> logits = x * m.weights.transpose();
  logits.rowwise() += m.intercepts.transpose();
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    logits.row(i) = (logits.row(i).array() - mx).exp().matrix();
    logits.row(i) /= logits.row(i).sum();
  }
  return logits;
}

// Argmax of the probabilities; ties go to the lower class index.
inline std::vector<int> predict(const ProbeModel& m, const RowMatrix<double>& features) {
  const auto p = predict_proba(m, features);
  std::vector<int> out(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < p.cols(); ++c)
      if (p(i, c) > p(i, best)) best = c;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

// Per-class F1 weighted by true support. Classes appearing only in the
// predictions have zero support and so zero weight.
inline double weighted_f1(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.empty() || predictions.size() != labels.size())
    throw DataError("weighted F1 needs equal, nonempty prediction and label lists");
  std::map<int, std::size_t> tp, fp, fn, support;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++support[labels[i]];
    if (predictions[i] == labels[i]) {
      ++tp[labels[i]];
    } else {
      ++fp[predictions[i]];
      ++fn[labels[i]];
    }
  }
  double total = 0;
  for (const auto& [c, sup] : support) {
    const double denom = 2.0 * static_cast<double>(tp[c]) + static_cast<double>(fp[c]) + static_cast<double>(fn[c]);
    const double f1 = denom > 0 ? 2.0 * static_cast<double>(tp[c]) / denom : 0.0;
    total += f1 * static_cast<double>(sup);
  }
  return total / static_cast<double>(labels.size());
}

using ConfusionMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;  // rows true, cols predicted

inline ConfusionMatrix confusion_matrix(const std::vector<int>& predictions, const std::vector<int>& labels,
                                       std::size_t n_classes) {
  ConfusionMatrix m = ConfusionMatrix::Zero(static_cast<Eigen::Index>(n_classes), static_cast<Eigen::Index>(n_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) ++m(labels[i], predictions[i]);
  return m;
}

// Fold index per sample. Each class is shuffled with the seed and dealt
// round-robin, continuing from where the previous class stopped so fold
// sizes stay balanced.
inline std::vector<std::size_t> stratified_folds(const std::vector<int>& labels, std::size_t folds, std::uint64_t seed,
                                                 const std::vector<std::string>* class_names = nullptr) {
  if (folds < 2) throw ConfigError("cross-validation needs at least 2 folds");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  for (const auto& [c, members] : by_class)
    if (members.size() < folds) {
      const std::string name = class_names && static_cast<std::size_t>(c) < class_names->size()
                                   ? (*class_names)[static_cast<std::size_t>(c)]
                                   : std::to_string(c);
      throw DataError("class '" + name + "' has " + std::to_string(members.size()) + " patients, fewer than " +
                      std::to_string(folds) + " folds");
    }
  std::vector<std::size_t> fold(labels.size(), 0);
  Rng rng(seed);
  std::size_t next = 0;
  for (auto& [c, members] : by_class) {
    shuffle_in_place(members, rng);
    for (auto i : members) {
      fold[i] = next;
      next = (next + 1) % folds;
    }
  }
  return fold;
}

struct FoldResult {
  double f1 = 0;
  ConfusionMatrix confusion;
  double inverse_reg_strength = 0;
  bool converged = false;
  std::size_t iterations = 0;
};

struct EvalResult {
  std::optional<double> theta;  // nullopt: no latent filtering
  std::size_t retained_latents = 0;
  std::vector<std::string> classes;
  std::vector<FoldResult> folds;
  double mean_f1 = 0;
  double std_f1 = 0;  // population standard deviation across folds

  bool all_converged() const {
    return std::all_of(folds.begin(), folds.end(), [](const FoldResult& f) { return f.converged; });
  }
};

// Latents kept at threshold theta: log10(mean activation) > theta.
inline std::vector<bool> retained_latent_mask(std::span<const double> mean_activation, std::optional<double> theta) {
  std::vector<bool> keep(mean_activation.size(), true);
  if (!theta) return keep;
  for (std::size_t s = 0; s < keep.size(); ++s)
    keep[s] = mean_activation[s] > 0 && std::log10(mean_activation[s]) > *theta;
  return keep;
}

struct LabelEncoding {
  std::vector<std::string> classes;  // sorted
  std::vector<int> y;
};

inline LabelEncoding encode_labels(const std::vector<std::string>& labels) {
  LabelEncoding e;
  std::set<std::string> uniq(labels.begin(), labels.end());
  e.classes.assign(uniq.begin(), uniq.end());
  for (const auto& l : labels)
    e.y.push_back(static_cast<int>(std::lower_bound(e.classes.begin(), e.classes.end(), l) - e.classes.begin()));
  return e;
}

// Stratified k-fold evaluation on patient features. Latents failing the
// threshold are zeroed (columns kept, so the model shape is fixed).
inline EvalResult evaluate_cv(const RowMatrix<double>& features, const std::vector<std::string>& labels,
                              std::span<const double> mean_activation, std::optional<double> theta,
                              const ProbeConfig& config = {}) {
  if (static_cast<std::size_t>(features.rows()) != labels.size()) throw DataError("feature/label count mismatch");
  if (static_cast<std::size_t>(features.cols()) != mean_activation.size())
    throw DataError("barcode length does not match the latent statistics");
  const auto enc = encode_labels(labels);
  if (enc.classes.size() < 2) throw DataError("probe needs at least two disease classes");
  const auto fold_of = stratified_folds(enc.y, config.folds, config.seed, &enc.classes);

  EvalResult res;
  res.theta = theta;
  res.classes = enc.classes;
  const auto keep = retained_latent_mask(mean_activation, theta);
  res.retained_latents = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true));
  RowMatrix<double> x = features;
  for (std::size_t s = 0; s < keep.size(); ++s)
    if (!keep[s]) x.col(static_cast<Eigen::Index>(s)).setZero();

  const std::size_t k = enc.classes.size();
  res.folds.resize(config.folds);
  parallel_for(config.folds, config.threads, [&](std::size_t f) {
    std::vector<Eigen::Index> tr, te;
    for (std::size_t i = 0; i < fold_of.size(); ++i) (fold_of[i] == f ? te : tr).push_back(static_cast<Eigen::Index>(i));
    RowMatrix<double> xtr = x(tr, Eigen::all), xte = x(te, Eigen::all);
    std::vector<int> ytr, yte;
    for (auto i : tr) ytr.push_back(enc.y[static_cast<std::size_t>(i)]);
    for (auto i : te) yte.push_back(enc.y[static_cast<std::size_t>(i)]);
    const double C = config.inverse_reg_override ? *config.inverse_reg_override : inverse_reg_strength(k, tr.size());
    const auto model = fit_probe(xtr, ytr, k, C, config);
    const auto pred = predict(model, xte);
    auto& out = res.folds[f];
    out.f1 = weighted_f1(pred, yte);
    out.confusion = confusion_matrix(pred, yte, k);
    out.inverse_reg_strength = C;
    out.converged = model.converged;
    out.iterations = model.iterations;
  });
  double sum = 0;
  for (const auto& f : res.folds) sum += f.f1;
  res.mean_f1 = sum / static_cast<double>(res.folds.size());
  double var = 0;
  for (const auto& f : res.folds) var += (f.f1 - res.mean_f1) * (f.f1 - res.mean_f1);
  res.std_f1 = std::sqrt(var / static_cast<double>(res.folds.size()));
  return res;
}

inline std::vector<EvalResult> threshold_sweep(const RowMatrix<double>& features, const std::vector<std::string>& labels,
                                               std::span<const double> mean_activation,
                                               std::span<const double> theta_grid, const ProbeConfig& config = {}) {
  if (theta_grid.empty()) throw ConfigError("threshold grid is empty");
  std::vector<EvalResult> out;
  for (double t : theta_grid) out.push_back(evaluate_cv(features, labels, mean_activation, t, config));
  return out;
}

inline nlohmann::json to_json(const EvalResult& r) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.folds) {
    nlohmann::json cm = nlohmann::json::array();
    for (Eigen::Index i = 0; i < f.confusion.rows(); ++i) {
      std::vector<std::int64_t> row(f.confusion.row(i).begin(), f.confusion.row(i).end());
      cm.push_back(row);
    }
    folds.push_back({{"weighted_f1", f.f1},
                     {"confusion", cm},
                     {"inverse_reg_strength", f.inverse_reg_strength},
                     {"converged", f.converged},
                     {"iterations", f.iterations}});
  }
  nlohmann::json j{{"retained_latents", r.retained_latents}, {"classes", r.classes}, {"folds", folds},
                   {"mean_f1", r.mean_f1}, {"std_f1", r.std_f1}};
  j["theta"] = r.theta ? nlohmann::json(*r.theta) : nlohmann::json(nullptr);
  return j;
}

inline std::string sweep_csv(std::span<const EvalResult> sweep) {
  std::string out = "theta,retained_latents,mean_f1,std_f1\n";
  for (const auto& r : sweep)
    out += (r.theta ? format_real(*r.theta) : std::string("none")) + "," + std::to_string(r.retained_latents) + "," +
           format_real(r.mean_f1) + "," + format_real(r.std_f1) + "\n";
  return out;
}

}  // namespace cytosae
