#pragma once

// Image, patient and disease barcodes: per-latent active-patch counts and
// their unweighted means, plus the differential latent report.

#include "cytosae/concepts.hpp"
#include "cytosae/parallel.hpp"

namespace cytosae {

enum class BarcodeLevel : std::uint8_t { image = 0, patient = 1, disease = 2 };

inline std::string to_string(BarcodeLevel l) {
  switch (l) {
    case BarcodeLevel::image: return "image";
    case BarcodeLevel::patient: return "patient";
    case BarcodeLevel::disease: return "disease";
  }
  return "?";
}

inline BarcodeLevel barcode_level_from_string(const std::string& s) {
  if (s == "image") return BarcodeLevel::image;
  if (s == "patient") return BarcodeLevel::patient;
  if (s == "disease") return BarcodeLevel::disease;
  throw DataError("unknown barcode level '" + s + "'");
}

struct Barcode {
  std::string subject_id;
  BarcodeLevel level = BarcodeLevel::image;
  std::vector<double> values;  // one entry per latent
  double tau = 0;
  std::size_t n_constituents = 0;

  std::size_t d_sae() const { return values.size(); }
  friend bool operator==(const Barcode&, const Barcode&) = default;
};

inline int binarize_patch(double h, double tau) { return h > tau ? 1 : 0; }

// patch_acts: n_patches x d_sae (CLS already removed).
template <typename Derived>
Barcode image_barcode(const std::string& image_id, const Eigen::MatrixBase<Derived>& patch_acts, double tau) {
  Barcode b;
  b.subject_id = image_id;
  b.level = BarcodeLevel::image;
  b.tau = tau;
  b.n_constituents = static_cast<std::size_t>(patch_acts.rows());
  b.values.assign(static_cast<std::size_t>(patch_acts.cols()), 0.0);
  for (Eigen::Index p = 0; p < patch_acts.rows(); ++p)
    for (Eigen::Index s = 0; s < patch_acts.cols(); ++s)
      b.values[static_cast<std::size_t>(s)] += binarize_patch(static_cast<double>(patch_acts(p, s)), tau);
  return b;
}

// From attribution grids of a single image; latents without a grid count 0.
inline Barcode image_barcode(std::span<const AttributionGrid> grids, std::size_t d_sae, double tau) {
  if (grids.empty()) throw DataError("image barcode needs at least one attribution grid");
  Barcode b;
  b.subject_id = grids.front().image_id;
  b.level = BarcodeLevel::image;
  b.tau = tau;
  b.values.assign(d_sae, 0.0);
  b.n_constituents = grids.front().side() * grids.front().side();
  for (const auto& g : grids) {
    if (g.image_id != b.subject_id) throw DataError("attribution grids belong to different images");
    if (g.latent_id >= d_sae) throw DataError("latent id " + std::to_string(g.latent_id) + " out of range");
    double c = 0;
    for (Eigen::Index i = 0; i < g.grid.size(); ++i) c += binarize_patch(g.grid.data()[i], tau);
    b.values[g.latent_id] = c;
  }
  return b;
}

namespace detail {

// Unweighted mean of child barcodes. Children are summed in subject_id order
// so the result does not depend on the order they are supplied in.
inline Barcode mean_barcode(const std::string& id, BarcodeLevel level, BarcodeLevel child_level,
                            std::span<const Barcode> children) {
  if (children.empty())
    throw DataError("cannot aggregate an empty set of barcodes for " + to_string(level) + " '" + id + "'");
  const auto d = children.front().d_sae();
  const double tau = children.front().tau;
  std::vector<const Barcode*> order;
  for (const auto& c : children) {
    if (c.level != child_level)
      throw DataError(to_string(level) + " '" + id + "' aggregates a " + to_string(c.level) + " barcode");
    if (c.d_sae() != d) throw DataError("barcode length mismatch while aggregating '" + id + "'");
    if (c.tau != tau) throw DataError("mixed tau values while aggregating '" + id + "'");
    order.push_back(&c);
  }
  std::stable_sort(order.begin(), order.end(),
                   [](const Barcode* a, const Barcode* b) { return a->subject_id < b->subject_id; });
  Barcode out;
  out.subject_id = id;
  out.level = level;
  out.tau = tau;
  out.n_constituents = children.size();
  out.values.assign(d, 0.0);
  for (const auto* c : order)
    for (std::size_t s = 0; s < d; ++s) out.values[s] += c->values[s];
  for (auto& v : out.values) v /= static_cast<double>(children.size());
  return out;
}

}  // namespace detail

inline Barcode patient_barcode(const std::string& patient_id, std::span<const Barcode> images) {
  return detail::mean_barcode(patient_id, BarcodeLevel::patient, BarcodeLevel::image, images);
}

inline Barcode disease_barcode(const std::string& disease, std::span<const Barcode> patients) {
  return detail::mean_barcode(disease, BarcodeLevel::disease, BarcodeLevel::patient, patients);
}

struct DifferentialEntry {
  std::size_t latent_id = 0;
  double delta = 0;
};

struct DifferentialReport {
  std::string disease_a, disease_b;
  double tau = 0;
  std::size_t top_n = 0;
  std::vector<double> delta;              // a - b, per latent
  std::vector<DifferentialEntry> top_a;   // most positive delta first
  std::vector<DifferentialEntry> top_b;   // most negative delta first
};

// Raw difference of disease barcodes. The two lists are disjoint; ties in
// delta go to the smaller latent id.
inline DifferentialReport differential_latents(const Barcode& a, const Barcode& b, std::size_t top_n) {
  if (a.d_sae() != b.d_sae()) throw DataError("barcode length mismatch");
  if (a.tau != b.tau) throw DataError("differential report over mixed tau values");
  DifferentialReport r;
  r.disease_a = a.subject_id;
  r.disease_b = b.subject_id;
  r.tau = a.tau;
  r.top_n = top_n;
  const auto d = a.d_sae();
  r.delta.resize(d);
  for (std::size_t s = 0; s < d; ++s) r.delta[s] = a.values[s] - b.values[s];

  std::vector<std::size_t> ids(d);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  auto desc = ids, asc = ids;
  std::stable_sort(desc.begin(), desc.end(), [&](auto x, auto y) { return r.delta[x] > r.delta[y]; });
  std::stable_sort(asc.begin(), asc.end(), [&](auto x, auto y) { return r.delta[x] < r.delta[y]; });
  std::vector<bool> used(d, false);
  for (auto s : desc) {
    if (r.top_a.size() == top_n) break;
    r.top_a.push_back({s, r.delta[s]});
    used[s] = true;
  }
  for (auto s : asc) {
    if (r.top_b.size() == top_n) break;
    if (used[s]) continue;
    r.top_b.push_back({s, r.delta[s]});
  }
  return r;
}

inline nlohmann::json to_json(const DifferentialReport& r) {
  auto list = [](const std::vector<DifferentialEntry>& v) {
    nlohmann::json j = nlohmann::json::array();
    for (std::size_t i = 0; i < v.size(); ++i)
      j.push_back({{"rank", i + 1}, {"latent_id", v[i].latent_id}, {"delta", v[i].delta}});
    return j;
  };
  return {{"disease_a", r.disease_a}, {"disease_b", r.disease_b}, {"tau", r.tau}, {"top_n", r.top_n},
          {"top_a", list(r.top_a)}, {"top_b", list(r.top_b)}, {"delta", r.delta}};
}

struct BarcodeSet {
  double tau = 0;
  std::vector<Barcode> images;    // dataset order
  std::vector<Barcode> patients;  // patient id order
  std::vector<Barcode> diseases;  // disease name order
  std::vector<std::string> warnings;

  const Barcode* find(BarcodeLevel level, const std::string& id) const {
    const auto& v = level == BarcodeLevel::image ? images : level == BarcodeLevel::patient ? patients : diseases;
    for (const auto& b : v)
      if (b.subject_id == id) return &b;
    return nullptr;
  }
};

// Image barcodes for every image, then patient and disease means following
// the manifest indices. Patients without images are reported and skipped.
template <typename T>
BarcodeSet compute_barcodes(const SaeModel<T>& model, const DatasetHandle& handle, double tau,
                            std::size_t threads = 1) {
  if (handle.d_m() != model.d_m()) throw DataError("dimension mismatch between model and dataset");
  BarcodeSet set;
  set.tau = tau;
  set.images.resize(handle.image_count());
  parallel_for(handle.image_count(), threads, [&](std::size_t i) {
    const auto& meta = handle.meta(i);
    const auto z = encode_rows(model, handle.tokens(i));
    const Eigen::Index first = meta.has_cls ? 1 : 0;
    set.images[i] = image_barcode(meta.image_id, z.bottomRows(z.rows() - first), tau);
  });

  const auto& mf = handle.manifest();
  std::map<std::string, std::size_t> patient_pos;
  for (const auto& [pid, image_ids] : mf.patient_index) {
    std::vector<Barcode> children;
    for (const auto& id : image_ids) {
      if (auto idx = handle.find(id))
        children.push_back(set.images[*idx]);
      else
        set.warnings.push_back("patient '" + pid + "' references unknown image '" + id + "'");
    }
    if (children.empty()) {
      set.warnings.push_back("patient '" + pid + "' has no images; excluded from disease barcodes");
      continue;
    }
    patient_pos[pid] = set.patients.size();
    set.patients.push_back(patient_barcode(pid, children));
  }
  for (const auto& [disease, pids] : mf.disease_index) {
    std::vector<Barcode> children;
    for (const auto& pid : pids)
      if (auto it = patient_pos.find(pid); it != patient_pos.end()) children.push_back(set.patients[it->second]);
    if (children.empty()) {
      set.warnings.push_back("disease '" + disease + "' has no patients with images; skipped");
      continue;
    }
    set.diseases.push_back(disease_barcode(disease, children));
  }
  return set;
}

inline std::string barcodes_csv(std::span<const Barcode> barcodes) {
  std::string out = "subject_id,level,tau";
  const std::size_t d = barcodes.empty() ? 0 : barcodes.front().d_sae();
  for (std::size_t s = 0; s < d; ++s) out += ",latent_" + std::to_string(s);
  out += "\n";
  for (const auto& b : barcodes) {
    if (b.d_sae() != d) throw DataError("barcode length mismatch in export");
    out += b.subject_id + "," + to_string(b.level) + "," + format_real(b.tau);
    for (double v : b.values) out += "," + format_real(v);
    out += "\n";
  }
  return out;
}

inline std::vector<Barcode> parse_barcodes_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("subject_id,level,tau", 0) != 0)
    throw DataError("unrecognised barcode CSV header");
  const auto d = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) - 2;
  std::vector<Barcode> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find(',', start)) != std::string::npos; start = pos + 1)
      f.push_back(line.substr(start, pos - start));
    f.push_back(line.substr(start));
    if (f.size() != d + 3) throw DataError("malformed barcode CSV row for '" + f.front() + "'");
    Barcode b;
    b.subject_id = f[0];
    b.level = barcode_level_from_string(f[1]);
    try {
      b.tau = std::stod(f[2]);
      for (std::size_t s = 0; s < d; ++s) b.values.push_back(std::stod(f[3 + s]));
    } catch (const std::logic_error&) {
      throw DataError("malformed number in barcode CSV row for '" + b.subject_id + "'");
    }
    out.push_back(std::move(b));
  }
  return out;
}

inline constexpr std::array<char, 4> kBarcodeMagic{'C', 'Y', 'T', 'B'};
inline constexpr std::uint16_t kBarcodeVersion = 1;

inline std::vector<std::byte> encode_barcodes(std::span<const Barcode> barcodes) {
  const std::uint32_t d = barcodes.empty() ? 0 : static_cast<std::uint32_t>(barcodes.front().d_sae());
  ByteWriter w;
  w.put_bytes(std::as_bytes(std::span(kBarcodeMagic)));
  w.put<std::uint16_t>(kBarcodeVersion);
  w.put<std::uint32_t>(d);
  w.put<std::uint64_t>(barcodes.size());
  for (const auto& b : barcodes) {
    if (b.d_sae() != d) throw DataError("barcode length mismatch in export");
    w.put_string(b.subject_id);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(b.level));
    w.put<double>(b.tau);
    w.put<std::uint64_t>(b.n_constituents);
    w.put_array(std::span<const double>(b.values));
  }
  return w.bytes();
}

inline std::vector<Barcode> decode_barcodes(std::span<const std::byte> bytes) {
  try {
    ByteReader r(bytes);
    const auto magic = r.get_bytes(4);
    if (std::memcmp(magic.data(), kBarcodeMagic.data(), 4) != 0) throw DataError("not a barcode file");
    if (r.get<std::uint16_t>() != kBarcodeVersion) throw DataError("barcode file version mismatch");
    const auto d = r.get<std::uint32_t>();
    const auto n = r.get<std::uint64_t>();
    std::vector<Barcode> out;
    for (std::uint64_t i = 0; i < n; ++i) {
      Barcode b;
      b.subject_id = r.get_string();
      const auto lvl = r.get<std::uint8_t>();
      if (lvl > 2) throw DataError("bad barcode level");
      b.level = static_cast<BarcodeLevel>(lvl);
      b.tau = r.get<double>();
      b.n_constituents = r.get<std::uint64_t>();
      b.values.resize(d);
      r.get_array(std::span<double>(b.values));
      out.push_back(std::move(b));
    }
    if (r.remaining() != 0) throw DataError("trailing data in barcode file");
    return out;
  } catch (const ByteReader::Truncated&) {
    throw DataError("truncated barcode file");
  }
}

}  // namespace cytosae
