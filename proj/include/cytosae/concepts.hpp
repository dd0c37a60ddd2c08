#pragma once

// Per-latent statistics, latent clustering/sampling for review, reference
// image retrieval, and patch attribution grids.

#include "cytosae/sae.hpp"
#include "cytosae/token_store.hpp"

#include <queue>
#include <sstream>

namespace cytosae {

struct LatentStat {
  double activation_frequency = 0;
  double mean_activation = 0;  // over activating tokens only
  double label_entropy = 0;    // nats, over the top-K reference images
  std::uint64_t fired_token_count = 0;
  std::uint64_t fired_image_count = 0;
};

struct LatentStatsTable {
  std::vector<LatentStat> latents;
  std::uint64_t total_tokens = 0;
  std::uint64_t total_images = 0;
  bool has_entropy = false;
  bool per_image_frequency = false;
  std::size_t label_vocabulary_size = 0;
};

struct StatsOptions {
  std::size_t top_k_for_entropy = 25;
  bool per_image_frequency = false;
  TokenFilter token_filter = TokenFilter::all;
};

// Ranking of images for one latent: more active patches first, then larger
// maximum patch activation, then lexicographically smaller image id.
struct ImageScore {
  std::uint32_t count = 0;
  float max_activation = 0;
  std::size_t image = 0;  // dataset ordinal
  const std::string* image_id = nullptr;
};

inline bool ranks_before(const ImageScore& a, const ImageScore& b) {
  if (a.count != b.count) return a.count > b.count;
  if (a.max_activation != b.max_activation) return a.max_activation > b.max_activation;
  return *a.image_id < *b.image_id;
}

namespace detail {

// Bounded keep-best container; the heap top is the worst retained entry.
class TopImages {
public:
  explicit TopImages(std::size_t k) : k_(k) {}
  void offer(const ImageScore& s) {
    if (k_ == 0) return;
    if (heap_.size() < k_) {
      heap_.push_back(s);
      std::push_heap(heap_.begin(), heap_.end(), ranks_before);
    } else if (ranks_before(s, heap_.front())) {
      std::pop_heap(heap_.begin(), heap_.end(), ranks_before);
      heap_.back() = s;
      std::push_heap(heap_.begin(), heap_.end(), ranks_before);
    }
  }
  std::vector<ImageScore> sorted() const {
    auto v = heap_;
    std::sort(v.begin(), v.end(), ranks_before);
    return v;
  }

private:
  std::size_t k_;
  std::vector<ImageScore> heap_;
};

inline std::size_t patch_start(const RecordMeta& m) { return m.has_cls ? 1 : 0; }

}  // namespace detail

inline double entropy_nats(const std::map<std::string, std::size_t>& counts) {
  std::size_t total = 0;
  for (const auto& [_, c] : counts) total += c;
  if (total == 0) return 0;
  double h = 0;
  for (const auto& [_, c] : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  return h;
}

// One streaming pass over all images in dataset order. Frequency and mean use
// tokens admitted by `opts.token_filter`; the image-level activation used for
// the entropy ranking counts patches (CLS excluded) with z > 0.
template <typename T>
LatentStatsTable compute_latent_stats(const SaeModel<T>& model, const DatasetHandle& handle,
                                      const StatsOptions& opts = {}) {
  if (handle.d_m() != model.d_m())
    throw DataError("dimension mismatch: dataset d_m = " + std::to_string(handle.d_m()) + ", model d_m = " +
                    std::to_string(model.d_m()));
  const std::size_t d_sae = model.d_sae();
  LatentStatsTable table;
  table.latents.resize(d_sae);
  table.per_image_frequency = opts.per_image_frequency;
  table.has_entropy = handle.has_labels();
  table.label_vocabulary_size = handle.manifest().label_vocabulary.size();

  std::vector<double> sums(d_sae, 0.0);
  std::vector<detail::TopImages> tops(d_sae, detail::TopImages(opts.top_k_for_entropy));

  for (std::size_t i = 0; i < handle.image_count(); ++i) {
    const auto& meta = handle.meta(i);
    const auto z = encode_rows(model, handle.tokens(i));
    const std::size_t first_patch = detail::patch_start(meta);
    ++table.total_images;
    for (Eigen::Index t = 0; t < z.rows(); ++t) {
      const bool is_cls = meta.has_cls && t == 0;
      if (opts.token_filter == TokenFilter::patch_only && is_cls) continue;
      if (opts.token_filter == TokenFilter::cls_only && !is_cls) continue;
      ++table.total_tokens;
      for (std::size_t s = 0; s < d_sae; ++s) {
        const T v = z(t, static_cast<Eigen::Index>(s));
        if (v > T(0)) {
          ++table.latents[s].fired_token_count;
          sums[s] += static_cast<double>(v);
        }
      }
    }
    for (std::size_t s = 0; s < d_sae; ++s) {
      const auto col = z.col(static_cast<Eigen::Index>(s));
      std::uint32_t count = 0;
      float mx = 0;
      bool any_token = false;
      for (Eigen::Index t = 0; t < z.rows(); ++t) {
        const bool is_cls = meta.has_cls && t == 0;
        const bool admitted = !(opts.token_filter == TokenFilter::patch_only && is_cls) &&
                              !(opts.token_filter == TokenFilter::cls_only && !is_cls);
        if (admitted && col(t) > T(0)) any_token = true;
        if (static_cast<std::size_t>(t) < first_patch) continue;
        if (col(t) > T(0)) {
          ++count;
          mx = std::max(mx, static_cast<float>(col(t)));
        }
      }
      if (any_token) ++table.latents[s].fired_image_count;
      if (count > 0) tops[s].offer({count, mx, i, &meta.image_id});
    }
  }

  for (std::size_t s = 0; s < d_sae; ++s) {
    auto& st = table.latents[s];
    if (opts.per_image_frequency)
      st.activation_frequency =
          table.total_images ? static_cast<double>(st.fired_image_count) / static_cast<double>(table.total_images) : 0;
    else
      st.activation_frequency =
          table.total_tokens ? static_cast<double>(st.fired_token_count) / static_cast<double>(table.total_tokens) : 0;
    st.mean_activation = st.fired_token_count ? sums[s] / static_cast<double>(st.fired_token_count) : 0.0;
    if (table.has_entropy) {
      std::map<std::string, std::size_t> labels;
      for (const auto& sc : tops[s].sorted())
        if (const auto& l = handle.meta(sc.image).class_label) ++labels[*l];
      st.label_entropy = entropy_nats(labels);
    }
  }
  return table;
}

inline double log10_or_neg_inf(double v) {
  return v > 0 ? std::log10(v) : -std::numeric_limits<double>::infinity();
}

// Latents whose log10(mean_activation) exceeds theta; never-active latents
// are not counted.
inline std::size_t count_above_threshold(const LatentStatsTable& table, double theta) {
  std::size_t n = 0;
  for (const auto& s : table.latents)
    if (s.mean_activation > 0 && std::log10(s.mean_activation) > theta) ++n;
  return n;
}

struct KMeansResult {
  std::vector<std::size_t> point_ids;  // caller's ids for each clustered point
  std::vector<std::size_t> assignment;
  RowMatrix<double> centroids;         // k x dim
  std::size_t iterations = 0;
  bool converged = false;
  std::vector<double> inertia_history;  // after each assignment step
};

inline double within_cluster_ss(const RowMatrix<double>& pts, const RowMatrix<double>& centroids,
                                const std::vector<std::size_t>& assign) {
  double ss = 0;
  for (Eigen::Index i = 0; i < pts.rows(); ++i)
    ss += (pts.row(i) - centroids.row(static_cast<Eigen::Index>(assign[static_cast<std::size_t>(i)]))).squaredNorm();
  return ss;
}

// Lloyd iterations from k-means++ seeding. Ties in assignment go to the
// lowest cluster index; an emptied cluster keeps its previous centroid.
inline KMeansResult kmeans(const RowMatrix<double>& pts, std::size_t k, std::uint64_t seed,
                           std::size_t max_iter = 300) {
  const auto n = static_cast<std::size_t>(pts.rows());
  if (k == 0) throw ConfigError("k-means requires k >= 1");
  if (n < k) throw DataError("k-means: fewer points (" + std::to_string(n) + ") than clusters (" + std::to_string(k) + ")");
  KMeansResult r;
  r.centroids.resize(static_cast<Eigen::Index>(k), pts.cols());
  Rng rng(seed);

  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t first = static_cast<std::size_t>(uniform_index(rng, n));
  r.centroids.row(0) = pts.row(static_cast<Eigen::Index>(first));
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (pts.row(static_cast<Eigen::Index>(i)) - r.centroids.row(static_cast<Eigen::Index>(c - 1))).squaredNorm());
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0) {
      double target = uniform01(rng) * total;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        target -= d2[i];
        if (target < 0 && d2[i] > 0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<std::size_t>(uniform_index(rng, n));
    }
    r.centroids.row(static_cast<Eigen::Index>(c)) = pts.row(static_cast<Eigen::Index>(pick));
  }

  r.assignment.assign(n, k);  // sentinel: nothing assigned yet
  for (r.iterations = 0; r.iterations < max_iter;) {
    ++r.iterations;
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = (pts.row(static_cast<Eigen::Index>(i)) - r.centroids.row(static_cast<Eigen::Index>(c))).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (r.assignment[i] != best) {
        r.assignment[i] = best;
        changed = true;
      }
    }
    r.inertia_history.push_back(within_cluster_ss(pts, r.centroids, r.assignment));
    if (!changed) {
      r.converged = true;
      break;
    }
    RowMatrix<double> sums = RowMatrix<double>::Zero(static_cast<Eigen::Index>(k), pts.cols());
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(static_cast<Eigen::Index>(r.assignment[i])) += pts.row(static_cast<Eigen::Index>(i));
      ++counts[r.assignment[i]];
    }
    for (std::size_t c = 0; c < k; ++c)
      if (counts[c] > 0) r.centroids.row(static_cast<Eigen::Index>(c)) = sums.row(static_cast<Eigen::Index>(c)) / static_cast<double>(counts[c]);
  }
  r.point_ids.resize(n);
  std::iota(r.point_ids.begin(), r.point_ids.end(), std::size_t{0});
  return r;
}

// Clusters latents above theta_min in the (log10 frequency, log10 mean
// activation) plane; point_ids are latent ids.
inline KMeansResult kmeans_cluster_latents(const LatentStatsTable& table, std::size_t k, double theta_min,
                                           std::uint64_t seed, std::size_t max_iter = 300) {
  std::vector<std::size_t> ids;
  for (std::size_t s = 0; s < table.latents.size(); ++s) {
    const auto& st = table.latents[s];
    if (st.mean_activation > 0 && st.activation_frequency > 0 && std::log10(st.mean_activation) > theta_min)
      ids.push_back(s);
  }
  if (ids.size() < k)
    throw DataError("k-means: only " + std::to_string(ids.size()) + " latents above threshold " +
                    format_real(theta_min) + ", need at least k = " + std::to_string(k));
  RowMatrix<double> pts(static_cast<Eigen::Index>(ids.size()), 2);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    pts(static_cast<Eigen::Index>(i), 0) = std::log10(table.latents[ids[i]].activation_frequency);
    pts(static_cast<Eigen::Index>(i), 1) = std::log10(table.latents[ids[i]].mean_activation);
  }
  auto r = kmeans(pts, k, seed, max_iter);
  r.point_ids = std::move(ids);
  return r;
}

struct SampledLatent {
  std::size_t latent = 0;
  std::size_t cluster = 0;
  friend bool operator==(const SampledLatent&, const SampledLatent&) = default;
};

// Uniform sample without replacement of up to n_per_cluster latents from each
// cluster, cluster by cluster; each cluster draws from its own seeded stream.
inline std::vector<SampledLatent> sample_latents_per_cluster(const KMeansResult& clusters, std::size_t n_per_cluster,
                                                             std::uint64_t seed) {
  const std::size_t k = static_cast<std::size_t>(clusters.centroids.rows());
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < clusters.assignment.size(); ++i)
    members[clusters.assignment[i]].push_back(clusters.point_ids[i]);
  std::vector<SampledLatent> out;
  for (std::size_t c = 0; c < k; ++c) {
    auto& m = members[c];
    Rng rng(mix_seed(seed, c));
    const std::size_t take = std::min(n_per_cluster, m.size());
    for (std::size_t i = 0; i < take; ++i) std::swap(m[i], m[i + static_cast<std::size_t>(uniform_index(rng, m.size() - i))]);
    std::vector<std::size_t> chosen(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(take));
    std::sort(chosen.begin(), chosen.end());
    for (auto id : chosen) out.push_back({id, c});
  }
  return out;
}

struct AttributionGrid {
  std::string image_id;
  std::size_t latent_id = 0;
  RowMatrix<double> grid;  // g x g, row-major patch order
  double cls_activation = 0;

  std::size_t side() const { return static_cast<std::size_t>(grid.rows()); }
};

// Latent activations laid out on the patch grid. Patch j (after the CLS
// token, if any) goes to row j / g, column j % g.
template <typename T>
AttributionGrid patch_attribution(const SaeModel<T>& model, const TokenRecord& record, std::size_t latent_id) {
  if (latent_id >= model.d_sae()) throw DataError("latent id " + std::to_string(latent_id) + " out of range");
  const auto g = grid_side(record.n_tokens(), record.has_cls);
  if (!g)
    throw DataError("record '" + record.image_id + "' has a non-square patch count (" +
                    std::to_string(record.n_tokens() - (record.has_cls ? 1 : 0)) + ")");
  check_input_dim(model, record.tokens.cols(), "record tokens");
  const auto s = static_cast<Eigen::Index>(latent_id);
  const Vector<T> acts =
      (((record.tokens.template cast<T>().rowwise() - model.b_dec.transpose()) * model.W_enc.row(s).transpose()).array() +
       model.b_enc(s))
          .cwiseMax(T(0))
          .matrix();
  AttributionGrid out;
  out.image_id = record.image_id;
  out.latent_id = latent_id;
  out.grid.resize(static_cast<Eigen::Index>(*g), static_cast<Eigen::Index>(*g));
  const Eigen::Index first = record.has_cls ? 1 : 0;
  for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(*g * *g); ++j)
    out.grid(j / static_cast<Eigen::Index>(*g), j % static_cast<Eigen::Index>(*g)) = static_cast<double>(acts(first + j));
  out.cls_activation = record.has_cls ? static_cast<double>(acts(0)) : 0.0;
  return out;
}

// Per-image patch activation counts (h > tau, CLS excluded) and maxima for a
// set of latents; rows follow dataset order, columns follow `latents`.
struct ImageActivationTable {
  std::vector<std::size_t> latents;
  Eigen::Matrix<std::uint32_t, Eigen::Dynamic, Eigen::Dynamic> counts;  // images x latents
  Matrix<float> maxima;                                                 // images x latents
};

template <typename T>
ImageActivationTable image_activation_table(const SaeModel<T>& model, const DatasetHandle& handle,
                                            std::span<const std::size_t> latents, double tau) {
  if (handle.d_m() != model.d_m()) throw DataError("dimension mismatch between model and dataset");
  ImageActivationTable t;
  t.latents.assign(latents.begin(), latents.end());
  const auto L = static_cast<Eigen::Index>(latents.size());
  Matrix<T> enc(L, model.W_enc.cols());
  Vector<T> benc(L);
  for (Eigen::Index j = 0; j < L; ++j) {
    const auto s = latents[static_cast<std::size_t>(j)];
    if (s >= model.d_sae()) throw DataError("latent id " + std::to_string(s) + " out of range");
    enc.row(j) = model.W_enc.row(static_cast<Eigen::Index>(s));
    benc(j) = model.b_enc(static_cast<Eigen::Index>(s));
  }
  const auto n_img = static_cast<Eigen::Index>(handle.image_count());
  t.counts.setZero(n_img, L);
  t.maxima.setZero(n_img, L);
  for (Eigen::Index i = 0; i < n_img; ++i) {
    const auto& meta = handle.meta(static_cast<std::size_t>(i));
    RowMatrix<T> h = (handle.tokens(static_cast<std::size_t>(i)).template cast<T>().rowwise() - model.b_dec.transpose()) *
                     enc.transpose();
    h.rowwise() += benc.transpose();
    h = h.cwiseMax(T(0));
    for (Eigen::Index r = static_cast<Eigen::Index>(detail::patch_start(meta)); r < h.rows(); ++r)
      for (Eigen::Index j = 0; j < L; ++j) {
        const double v = static_cast<double>(h(r, j));
        if (v > tau) ++t.counts(i, j);
        t.maxima(i, j) = std::max(t.maxima(i, j), static_cast<float>(h(r, j)));
      }
  }
  return t;
}

struct ReferenceEntry {
  std::string image_id;
  std::uint32_t score = 0;  // active patch count
  double max_activation = 0;
  std::optional<AttributionGrid> grid;
};

struct ReferenceSet {
  std::size_t latent_id = 0;
  double tau = 0;
  std::vector<ReferenceEntry> entries;  // best first
};

// Maximally activating images for each latent in `latents`; only images with
// at least one patch above tau are eligible.
template <typename T>
std::vector<ReferenceSet> top_reference_images(const SaeModel<T>& model, const DatasetHandle& handle,
                                               std::span<const std::size_t> latents, std::size_t k, double tau,
                                               bool attach_grids = true) {
  const auto table = image_activation_table(model, handle, latents, tau);
  std::vector<ReferenceSet> out;
  for (std::size_t j = 0; j < latents.size(); ++j) {
    detail::TopImages top(k);
    for (std::size_t i = 0; i < handle.image_count(); ++i) {
      const auto c = table.counts(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      if (c > 0) top.offer({c, table.maxima(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), i, &handle.meta(i).image_id});
    }
    ReferenceSet rs;
    rs.latent_id = latents[j];
    rs.tau = tau;
    for (const auto& sc : top.sorted()) {
      ReferenceEntry e{*sc.image_id, sc.count, static_cast<double>(sc.max_activation), std::nullopt};
      const auto& meta = handle.meta(sc.image);
      if (attach_grids && grid_side(handle.n_tokens(), meta.has_cls))
        e.grid = patch_attribution(model, handle.record(sc.image), latents[j]);
      rs.entries.push_back(std::move(e));
    }
    out.push_back(std::move(rs));
  }
  return out;
}

template <typename T>
ReferenceSet top_reference_images(const SaeModel<T>& model, const DatasetHandle& handle, std::size_t latent_id,
                                  std::size_t k, double tau) {
  const std::size_t ids[] = {latent_id};
  return std::move(top_reference_images(model, handle, std::span<const std::size_t>(ids), k, tau).front());
}

// Keeps latents active (any patch > 0) on fewer than `ubiquity_threshold` of
// the images. `counts` rows are images, columns follow `candidates`.
template <typename Counts>
std::vector<std::size_t> filter_by_ubiquity(const Counts& counts, std::span<const std::size_t> candidates,
                                            double ubiquity_threshold) {
  if (!(ubiquity_threshold > 0) || ubiquity_threshold > 1) throw ConfigError("ubiquity threshold must be in (0, 1]");
  std::vector<std::size_t> kept;
  const auto n = static_cast<double>(counts.rows());
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    std::size_t active = 0;
    for (Eigen::Index i = 0; i < counts.rows(); ++i)
      if (counts(i, static_cast<Eigen::Index>(j)) > 0) ++active;
    const double frac = n > 0 ? static_cast<double>(active) / n : 0.0;
    if (frac < ubiquity_threshold) kept.push_back(candidates[j]);
  }
  return kept;
}

template <typename T>
std::vector<std::size_t> filter_ubiquitous_latents(const SaeModel<T>& model, const DatasetHandle& handle,
                                                   std::span<const std::size_t> candidates,
                                                   double ubiquity_threshold = 1.0) {
  const auto table = image_activation_table(model, handle, candidates, 0.0);
  return filter_by_ubiquity(table.counts, candidates, ubiquity_threshold);
}

// Latents active on one token, strongest first.
template <typename T>
std::vector<std::pair<std::size_t, double>> active_latents_for_token(const SaeModel<T>& model,
                                                                     const TokenRecord& record,
                                                                     std::size_t token_index) {
  if (token_index >= record.n_tokens()) throw DataError("token index out of range");
  const Vector<T> z = encode(model, record.tokens.row(static_cast<Eigen::Index>(token_index)).transpose());
  std::vector<std::pair<std::size_t, double>> out;
  for (Eigen::Index s = 0; s < z.size(); ++s)
    if (z(s) > T(0)) out.emplace_back(static_cast<std::size_t>(s), static_cast<double>(z(s)));
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  return out;
}

inline std::string latent_stats_csv(const LatentStatsTable& table) {
  std::string out = table.has_entropy ? "latent_id,frequency,mean_activation,label_entropy,fired_tokens\n"
                                      : "latent_id,frequency,mean_activation,fired_tokens\n";
  for (std::size_t s = 0; s < table.latents.size(); ++s) {
    const auto& st = table.latents[s];
    out += std::to_string(s) + "," + format_real(st.activation_frequency) + "," + format_real(st.mean_activation) + ",";
    if (table.has_entropy) out += format_real(st.label_entropy) + ",";
    out += std::to_string(st.fired_token_count) + "\n";
  }
  return out;
}

// Reads back the columns needed downstream (mean activation per latent).
inline LatentStatsTable parse_latent_stats_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty stats CSV");
  LatentStatsTable t;
  t.has_entropy = line.find("label_entropy") != std::string::npos;
  if (line.rfind("latent_id,frequency,mean_activation", 0) != 0) throw DataError("unrecognised stats CSV header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find(',', start)) != std::string::npos; start = pos + 1)
      f.push_back(line.substr(start, pos - start));
    f.push_back(line.substr(start));
    if (f.size() != (t.has_entropy ? 5u : 4u)) throw DataError("malformed stats CSV row: " + line);
    try {
      if (std::stoull(f[0]) != t.latents.size()) throw DataError("stats CSV latent ids are not consecutive");
      LatentStat st;
      st.activation_frequency = std::stod(f[1]);
      st.mean_activation = std::stod(f[2]);
      if (t.has_entropy) st.label_entropy = std::stod(f[3]);
      st.fired_token_count = std::stoull(f.back());
      t.latents.push_back(st);
    } catch (const std::logic_error&) {
      throw DataError("malformed stats CSV row: " + line);
    }
  }
  return t;
}

inline nlohmann::json to_json(const AttributionGrid& g) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < g.grid.rows(); ++r) {
    std::vector<double> row(g.grid.row(r).begin(), g.grid.row(r).end());
    rows.push_back(row);
  }
  return {{"image_id", g.image_id}, {"latent_id", g.latent_id}, {"cls_activation", g.cls_activation}, {"grid", rows}};
}

inline nlohmann::json to_json(const ReferenceSet& rs) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : rs.entries) {
    nlohmann::json j{{"image_id", e.image_id}, {"score", e.score}, {"max_activation", e.max_activation}};
    if (e.grid) j["attribution"] = to_json(*e.grid);
    entries.push_back(j);
  }
  return {{"latent_id", rs.latent_id}, {"tau", rs.tau}, {"images", entries}};
}

}  // namespace cytosae
