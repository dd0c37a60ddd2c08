#pragma once

// Planted sparse-dictionary data: every token is a nonnegative combination of
// k unit-norm atoms plus Gaussian noise, so a trained decoder can be scored
// against the atoms that generated the data.

#include "cytosae/sae.hpp"
#include "cytosae/token_store.hpp"

namespace cytosae {

struct PlantedDictionary {
  RowMatrix<double> atoms;  // n_atoms x d_m, unit rows
  std::size_t k = 3;
  double coefficient_low = 0.5;
  double coefficient_high = 1.5;
  double noise_sigma = 0.01;
  std::uint64_t seed = 0;
  double incoherence_bound = 0.3;

  std::size_t n_atoms() const { return static_cast<std::size_t>(atoms.rows()); }
  std::size_t d_m() const { return static_cast<std::size_t>(atoms.cols()); }
};

struct SynthSpec {
  std::size_t d_m = 32;
  std::size_t n_atoms = 64;
  std::size_t k = 3;
  double coefficient_low = 0.5;
  double coefficient_high = 1.5;
  double noise_sigma = 0.01;
  double incoherence_bound = 0.3;
  std::uint64_t seed = 0;

  std::size_t n_images = 1924;
  std::size_t tokens_per_image = 26;  // 5x5 patch grid + CLS
  bool has_cls = true;
  std::size_t images_per_patient = 4;
  std::size_t n_diseases = 0;  // 0: no disease labels
  std::size_t records_per_shard = 500;

  void validate() const {
    if (d_m == 0 || n_atoms == 0) throw ConfigError("synth: d_m and n_atoms must be positive");
    if (k == 0 || k > n_atoms) throw ConfigError("synth: need 1 <= k <= n_atoms");
    if (!(coefficient_low > 0) || coefficient_high < coefficient_low)
      throw ConfigError("synth: coefficient range must be positive with low <= high");
    if (noise_sigma < 0) throw ConfigError("synth: noise_sigma must be >= 0");
    if (!(incoherence_bound > 0)) throw ConfigError("synth: incoherence bound must be positive");
    if (n_images == 0 || tokens_per_image == 0) throw ConfigError("synth: n_images and tokens_per_image must be positive");
    if (images_per_patient == 0 || records_per_shard == 0) throw ConfigError("synth: grouping sizes must be positive");
    if (n_diseases > n_atoms) throw ConfigError("synth: more diseases than atoms");
  }
};

inline nlohmann::json to_json(const SynthSpec& s) {
  return {{"d_m", s.d_m},
          {"n_atoms", s.n_atoms},
          {"k", s.k},
          {"coefficient_low", s.coefficient_low},
          {"coefficient_high", s.coefficient_high},
          {"noise_sigma", s.noise_sigma},
          {"incoherence_bound", s.incoherence_bound},
          {"seed", s.seed},
          {"n_images", s.n_images},
          {"tokens_per_image", s.tokens_per_image},
          {"has_cls", s.has_cls},
          {"images_per_patient", s.images_per_patient},
          {"n_diseases", s.n_diseases},
          {"records_per_shard", s.records_per_shard}};
}

inline double max_abs_coherence(const RowMatrix<double>& atoms) {
  double worst = 0;
  for (Eigen::Index i = 0; i < atoms.rows(); ++i)
    for (Eigen::Index j = i + 1; j < atoms.rows(); ++j)
      worst = std::max(worst, std::abs(atoms.row(i).dot(atoms.row(j))));
  return worst;
}

// Atoms are drawn one at a time. Each attempt samples a Gaussian direction and
// then repeatedly pushes it away from already-accepted atoms it is too
// aligned with; the attempt is accepted once every |cosine| is below the
// bound. Up to 100 attempts per atom.
inline PlantedDictionary make_planted_dictionary(const SynthSpec& spec) {
  spec.validate();
  PlantedDictionary d;
  d.k = spec.k;
  d.coefficient_low = spec.coefficient_low;
  d.coefficient_high = spec.coefficient_high;
  d.noise_sigma = spec.noise_sigma;
  d.seed = spec.seed;
  d.incoherence_bound = spec.incoherence_bound;
  d.atoms.resize(static_cast<Eigen::Index>(spec.n_atoms), static_cast<Eigen::Index>(spec.d_m));

  Rng rng(mix_seed(spec.seed, 0));
  const auto dim = static_cast<Eigen::Index>(spec.d_m);
  for (Eigen::Index a = 0; a < d.atoms.rows(); ++a) {
    bool accepted = false;
    for (int attempt = 0; attempt < 100 && !accepted; ++attempt) {
      Vector<double> v(dim);
      for (Eigen::Index c = 0; c < dim; ++c) v(c) = standard_normal(rng);
      v.normalize();
      for (int it = 0; it < 50 && a > 0; ++it) {
        const Vector<double> cos = d.atoms.topRows(a) * v;
        Vector<double> push = Vector<double>::Zero(dim);
        bool any = false;
        for (Eigen::Index j = 0; j < a; ++j)
          if (std::abs(cos(j)) >= 0.95 * spec.incoherence_bound) {
            push += cos(j) * d.atoms.row(j).transpose();
            any = true;
          }
        if (!any) break;
        v -= 0.5 * push;
        v.normalize();
      }
      accepted = a == 0 || (d.atoms.topRows(a) * v).cwiseAbs().maxCoeff() < spec.incoherence_bound;
      if (accepted) d.atoms.row(a) = v.transpose();
    }
    if (!accepted)
      throw ConfigError("synth: could not place atom " + std::to_string(a) + " under incoherence bound " +
                        format_real(spec.incoherence_bound));
  }
  return d;
}

struct ActiveAtom {
  std::uint32_t atom = 0;
  float coefficient = 0;
};

struct PlantedData {
  std::vector<TokenRecord> records;
  std::vector<std::uint32_t> concept_atom;      // per image
  std::vector<std::vector<ActiveAtom>> active;  // per token, dataset order
};

inline std::string concept_label(std::size_t atom) {
  std::ostringstream os;
  os << "atom_" << std::setw(3) << std::setfill('0') << atom;
  return os.str();
}

// Each image carries one concept atom that appears in all of its tokens; the
// remaining k-1 atoms per token are drawn uniformly without replacement. When
// diseases are requested, patients are assigned round-robin and a patient's
// concept atoms come from the atoms congruent to its disease index.
inline PlantedData generate_planted_records(const PlantedDictionary& dict, const SynthSpec& spec) {
  spec.validate();
  if (dict.k > dict.n_atoms()) throw ConfigError("synth: k exceeds atom count");
  PlantedData out;
  Rng rng(mix_seed(spec.seed, 1));
  const auto d_m = static_cast<Eigen::Index>(dict.d_m());
  const std::size_t n_atoms = dict.n_atoms();
  std::vector<std::uint32_t> pool(n_atoms);

  for (std::size_t i = 0; i < spec.n_images; ++i) {
    const std::size_t patient = i / spec.images_per_patient;
    std::uint32_t concept_atom;
    std::optional<std::string> disease;
    if (spec.n_diseases > 0) {
      const std::size_t dz = patient % spec.n_diseases;
      const std::size_t members = (n_atoms - dz + spec.n_diseases - 1) / spec.n_diseases;
      concept_atom = static_cast<std::uint32_t>(dz + spec.n_diseases * uniform_index(rng, members));
      disease = "disease_" + std::to_string(dz);
    } else {
      concept_atom = static_cast<std::uint32_t>(uniform_index(rng, n_atoms));
    }

    TokenRecord rec;
    std::ostringstream id, pid;
    id << "img_" << std::setw(6) << std::setfill('0') << i;
    pid << "patient_" << std::setw(5) << std::setfill('0') << patient;
    rec.image_id = id.str();
    rec.patient_id = pid.str();
    rec.dataset_id = "planted";
    rec.class_label = concept_label(concept_atom);
    rec.disease_label = disease;
    rec.has_cls = spec.has_cls;
    rec.tokens.resize(static_cast<Eigen::Index>(spec.tokens_per_image), d_m);

    for (std::size_t t = 0; t < spec.tokens_per_image; ++t) {
      std::vector<ActiveAtom> act;
      act.reserve(dict.k);
      // partial Fisher-Yates over atoms other than the concept atom
      std::iota(pool.begin(), pool.end(), 0u);
      std::swap(pool[concept_atom], pool[n_atoms - 1]);
      act.push_back({concept_atom, 0});
      for (std::size_t j = 0; j + 1 < dict.k; ++j) {
        const auto pick = j + static_cast<std::size_t>(uniform_index(rng, n_atoms - 1 - j));
        std::swap(pool[j], pool[pick]);
        act.push_back({pool[j], 0});
      }
      Vector<double> x = Vector<double>::Zero(d_m);
      for (auto& a : act) {
        const double c = uniform_real(rng, dict.coefficient_low, dict.coefficient_high);
        a.coefficient = static_cast<float>(c);
        x += c * dict.atoms.row(a.atom).transpose();
      }
      if (dict.noise_sigma > 0)
        for (Eigen::Index c = 0; c < d_m; ++c) x(c) += dict.noise_sigma * standard_normal(rng);
      rec.tokens.row(static_cast<Eigen::Index>(t)) = x.transpose().cast<float>();
      out.active.push_back(std::move(act));
    }
    out.concept_atom.push_back(concept_atom);
    out.records.push_back(std::move(rec));
  }
  return out;
}

struct PlantedDatasetFiles {
  std::string manifest;
  std::string ground_truth;
};

// Writes shards, manifest, and a ground-truth JSON with two binary sidecars:
// atoms.bin (n_atoms x d_m float32, row-major) and active.bin (per token in
// dataset order, k x {u32 atom, f32 coefficient}).
inline PlantedDatasetFiles generate_planted_dataset(const SynthSpec& spec, const std::string& out_dir) {
  const auto dict = make_planted_dictionary(spec);
  const auto data = generate_planted_records(dict, spec);
  fs::create_directories(out_dir);

  DatasetWriteOptions wo;
  wo.records_per_shard = spec.records_per_shard;
  if (spec.has_cls && grid_side(spec.tokens_per_image, true)) wo.patch_layout = "cls_first_row_major";
  write_dataset(data.records, out_dir, "manifest.json", wo);

  ByteWriter atoms;
  const RowMatrix<float> af = dict.atoms.cast<float>();
  atoms.put_array<float>(std::span<const float>(af.data(), static_cast<std::size_t>(af.size())));
  ByteWriter active;
  for (const auto& tok : data.active)
    for (const auto& a : tok) {
      active.put<std::uint32_t>(a.atom);
      active.put<float>(a.coefficient);
    }
  write_file_bytes((fs::path(out_dir) / "atoms.bin").string(), atoms.bytes());
  write_file_bytes((fs::path(out_dir) / "active.bin").string(), active.bytes());

  nlohmann::json gt;
  gt["spec"] = to_json(spec);
  gt["atoms_file"] = "atoms.bin";
  gt["atoms_checksum"] = hex32(crc32_of(atoms.bytes()));
  gt["active_file"] = "active.bin";
  gt["active_checksum"] = hex32(crc32_of(active.bytes()));
  gt["max_abs_coherence"] = max_abs_coherence(dict.atoms);
  gt["images"] = nlohmann::json::array();
  for (std::size_t i = 0; i < data.records.size(); ++i)
    gt["images"].push_back({{"image_id", data.records[i].image_id}, {"concept_atom", data.concept_atom[i]}});
  const auto gt_path = (fs::path(out_dir) / "ground_truth.json").string();
  write_text_file(gt_path, gt.dump(2) + "\n");
  return {(fs::path(out_dir) / "manifest.json").string(), gt_path};
}

struct GroundTruth {
  SynthSpec spec;
  RowMatrix<double> atoms;
  std::vector<std::vector<ActiveAtom>> active;
  std::map<std::string, std::uint32_t> concept_atom;
};

inline GroundTruth load_ground_truth(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("ground truth not found: '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("ground truth does not parse: ") + e.what());
  }
  GroundTruth g;
  const auto& s = j.at("spec");
  g.spec.d_m = s.at("d_m");
  g.spec.n_atoms = s.at("n_atoms");
  g.spec.k = s.at("k");
  g.spec.coefficient_low = s.at("coefficient_low");
  g.spec.coefficient_high = s.at("coefficient_high");
  g.spec.noise_sigma = s.at("noise_sigma");
  g.spec.incoherence_bound = s.at("incoherence_bound");
  g.spec.seed = s.at("seed");
  g.spec.n_images = s.at("n_images");
  g.spec.tokens_per_image = s.at("tokens_per_image");
  g.spec.has_cls = s.at("has_cls");
  g.spec.images_per_patient = s.at("images_per_patient");
  g.spec.n_diseases = s.at("n_diseases");
  g.spec.records_per_shard = s.at("records_per_shard");

  const auto dir = fs::path(path).parent_path();
  const auto atoms = read_file_bytes((dir / j.at("atoms_file").get<std::string>()).string());
  if (hex32(crc32_of(atoms)) != j.at("atoms_checksum").get<std::string>()) throw DataError("atoms.bin checksum mismatch");
  RowMatrix<float> af(static_cast<Eigen::Index>(g.spec.n_atoms), static_cast<Eigen::Index>(g.spec.d_m));
  if (atoms.size() != static_cast<std::size_t>(af.size()) * sizeof(float)) throw DataError("atoms.bin has wrong size");
  std::memcpy(af.data(), atoms.data(), atoms.size());
  g.atoms = af.cast<double>();

  const auto active = read_file_bytes((dir / j.at("active_file").get<std::string>()).string());
  if (hex32(crc32_of(active)) != j.at("active_checksum").get<std::string>()) throw DataError("active.bin checksum mismatch");
  ByteReader r(active);
  const std::size_t n_tok = g.spec.n_images * g.spec.tokens_per_image;
  g.active.resize(n_tok);
  try {
    for (auto& tok : g.active) {
      tok.resize(g.spec.k);
      for (auto& a : tok) {
        a.atom = r.get<std::uint32_t>();
        a.coefficient = r.get<float>();
      }
    }
  } catch (const ByteReader::Truncated&) {
    throw DataError("active.bin is truncated");
  }
  for (const auto& im : j.at("images")) g.concept_atom[im.at("image_id")] = im.at("concept_atom").get<std::uint32_t>();
  return g;
}

struct RecoveryScore {
  std::vector<double> best_cosine;         // per atom, max over all columns
  std::vector<double> matched_cosine;      // per atom, under the injective matching
  std::vector<std::optional<std::size_t>> matching;  // atom -> decoder column
  double mean_cosine = 0;                  // over matched cosines
  double fraction_above = 0;               // matched cosine >= threshold
  double threshold = 0;
};

// Greedy injective matching on a similarity table (rows matched to columns),
// taking the highest remaining pair first; ties broken by (row, column).
inline std::vector<std::optional<std::size_t>> greedy_match(const Matrix<double>& sim) {
  struct Pair {
    double s;
    Eigen::Index r, c;
  };
  std::vector<Pair> pairs;
  pairs.reserve(static_cast<std::size_t>(sim.size()));
  for (Eigen::Index r = 0; r < sim.rows(); ++r)
    for (Eigen::Index c = 0; c < sim.cols(); ++c) pairs.push_back({sim(r, c), r, c});
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.s != b.s) return a.s > b.s;
    if (a.r != b.r) return a.r < b.r;
    return a.c < b.c;
  });
  std::vector<std::optional<std::size_t>> match(static_cast<std::size_t>(sim.rows()));
  std::vector<bool> col_used(static_cast<std::size_t>(sim.cols()), false);
  std::size_t left = std::min<std::size_t>(static_cast<std::size_t>(sim.rows()), static_cast<std::size_t>(sim.cols()));
  for (const auto& p : pairs) {
    if (left == 0) break;
    auto& m = match[static_cast<std::size_t>(p.r)];
    if (m || col_used[static_cast<std::size_t>(p.c)]) continue;
    m = static_cast<std::size_t>(p.c);
    col_used[static_cast<std::size_t>(p.c)] = true;
    --left;
  }
  return match;
}

// Signed cosine between each atom and each (normalised) decoder column;
// zero-norm columns score 0.
template <typename T>
Matrix<double> atom_column_cosines(const SaeModel<T>& model, const RowMatrix<double>& atoms) {
  if (static_cast<std::size_t>(atoms.cols()) != model.d_m())
    throw DataError("recovery scoring: atom dimension " + std::to_string(atoms.cols()) + " != model d_m " +
                    std::to_string(model.d_m()));
  Matrix<double> dec = model.W_dec.template cast<double>();
  for (Eigen::Index c = 0; c < dec.cols(); ++c) {
    const double n = dec.col(c).norm();
    dec.col(c) = n > 0 ? (dec.col(c) / n).eval() : Vector<double>::Zero(dec.rows());
  }
  RowMatrix<double> unit = atoms;
  for (Eigen::Index r = 0; r < unit.rows(); ++r) unit.row(r).normalize();
  return unit * dec;
}

template <typename T>
RecoveryScore score_recovery(const SaeModel<T>& model, const RowMatrix<double>& atoms, double cosine_threshold) {
  const auto sim = atom_column_cosines(model, atoms);
  RecoveryScore s;
  s.threshold = cosine_threshold;
  s.matching = greedy_match(sim);
  std::size_t above = 0;
  for (Eigen::Index a = 0; a < sim.rows(); ++a) {
    s.best_cosine.push_back(sim.row(a).maxCoeff());
    const auto& m = s.matching[static_cast<std::size_t>(a)];
    const double c = m ? sim(a, static_cast<Eigen::Index>(*m)) : 0.0;
    s.matched_cosine.push_back(c);
    s.mean_cosine += c;
    if (c >= cosine_threshold) ++above;
  }
  if (sim.rows() > 0) {
    s.mean_cosine /= static_cast<double>(sim.rows());
    s.fraction_above = static_cast<double>(above) / static_cast<double>(sim.rows());
  }
  return s;
}

inline nlohmann::json to_json(const RecoveryScore& s) {
  nlohmann::json j;
  j["mean_cosine"] = s.mean_cosine;
  j["fraction_above"] = s.fraction_above;
  j["threshold"] = s.threshold;
  j["matched_cosine"] = s.matched_cosine;
  j["best_cosine"] = s.best_cosine;
  nlohmann::json m = nlohmann::json::array();
  for (const auto& x : s.matching) m.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
  j["matching"] = m;
  return j;
}

}  // namespace cytosae
