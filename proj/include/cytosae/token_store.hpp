#pragma once

// On-disk token shards, the JSON dataset manifest, and deterministic batch
// iteration over the tokens they hold.
//
// Shard layout (little-endian):
//   "CYTS" | u16 version | u32 d_m | u32 n_tokens | u64 record_count
//   record_count x metadata block:
//     str image_id | opt-str patient_id | str dataset_id |
//     opt-str class_label | opt-str disease_label | u8 has_cls
//   payload: record_count * n_tokens * d_m float32, row-major per record
// where str = u32 byte length + UTF-8 bytes and opt-str = u8 flag [+ str].
// The shard checksum is CRC-32 over the payload bytes only.

#include "cytosae/common.hpp"

#include <json.hpp>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <unordered_map>

namespace cytosae {

namespace fs = std::filesystem;

inline constexpr std::array<char, 4> kShardMagic{'C', 'Y', 'T', 'S'};
inline constexpr std::uint16_t kShardVersion = 1;

struct TokenRecord {
  std::string image_id;
  std::optional<std::string> patient_id;
  std::string dataset_id;
  std::optional<std::string> class_label;
  std::optional<std::string> disease_label;
  RowMatrix<float> tokens;  // n_tokens x d_m
  bool has_cls = false;

  std::size_t n_tokens() const { return static_cast<std::size_t>(tokens.rows()); }
  std::size_t d_m() const { return static_cast<std::size_t>(tokens.cols()); }
};

inline bool operator==(const TokenRecord& a, const TokenRecord& b) {
  if (a.tokens.rows() != b.tokens.rows() || a.tokens.cols() != b.tokens.cols()) return false;
  return a.image_id == b.image_id && a.patient_id == b.patient_id && a.dataset_id == b.dataset_id &&
         a.class_label == b.class_label && a.disease_label == b.disease_label &&
         a.has_cls == b.has_cls &&
         std::memcmp(a.tokens.data(), b.tokens.data(), sizeof(float) * a.tokens.size()) == 0;
}

// Side length of the patch grid, if the patch count is a perfect square.
inline std::optional<std::size_t> grid_side(std::size_t n_tokens, bool has_cls) {
  const std::size_t patches = has_cls ? n_tokens - 1 : n_tokens;
  if (patches == 0) return std::nullopt;
  auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(patches))));
  if (g * g != patches) return std::nullopt;
  return g;
}

struct ShardSummary {
  std::uint64_t record_count = 0;
  std::uint64_t byte_count = 0;
  std::uint32_t checksum = 0;
};

inline std::vector<std::byte> encode_shard(std::span<const TokenRecord> records,
                                           ShardSummary* summary = nullptr) {
  if (records.empty()) throw DataError("empty shard");
  const auto d_m = records.front().d_m();
  const auto n_tokens = records.front().n_tokens();
  if (d_m == 0 || n_tokens == 0) throw DataError("record has no tokens");
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (r.d_m() != d_m || r.n_tokens() != n_tokens)
      throw DataError("dimension mismatch in record '" + r.image_id + "': " +
                      std::to_string(r.n_tokens()) + "x" + std::to_string(r.d_m()) +
                      " vs " + std::to_string(n_tokens) + "x" + std::to_string(d_m));
    if (!seen.insert(r.image_id).second)
      throw DataError("duplicate image_id '" + r.image_id + "' within shard");
  }

  ByteWriter w;
  w.put_bytes(std::as_bytes(std::span(kShardMagic)));
  w.put<std::uint16_t>(kShardVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d_m));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(n_tokens));
  w.put<std::uint64_t>(records.size());
  for (const auto& r : records) {
    w.put_string(r.image_id);
    w.put_optional_string(r.patient_id);
    w.put_string(r.dataset_id);
    w.put_optional_string(r.class_label);
    w.put_optional_string(r.disease_label);
    w.put<std::uint8_t>(r.has_cls ? 1 : 0);
  }
  const std::size_t payload_start = w.size();
  for (const auto& r : records)
    w.put_array<float>(std::span<const float>(r.tokens.data(), static_cast<std::size_t>(r.tokens.size())));

  if (summary) {
    summary->record_count = records.size();
    summary->byte_count = w.size();
    summary->checksum = crc32_of(std::span(w.bytes()).subspan(payload_start));
  }
  return w.bytes();
}

inline ShardSummary write_token_shard(std::span<const TokenRecord> records, const std::string& path) {
  ShardSummary summary;
  const auto bytes = encode_shard(records, &summary);
  write_file_bytes(path, bytes);
  return summary;
}

// Read-only memory map of a whole file.
class MappedFile {
public:
  explicit MappedFile(const std::string& path) {
    fd_ = ::open(path.c_str(), O_RDONLY);
    if (fd_ < 0) throw DataError("missing shard '" + path + "'");
    struct stat st {};
    if (::fstat(fd_, &st) != 0) {
      ::close(fd_);
      throw DataError("cannot stat '" + path + "'");
    }
    size_ = static_cast<std::size_t>(st.st_size);
    if (size_ > 0) {
      void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd_, 0);
      if (p == MAP_FAILED) {
        ::close(fd_);
        throw DataError("cannot map '" + path + "'");
      }
      data_ = static_cast<const std::byte*>(p);
    }
  }
  MappedFile(const MappedFile&) = delete;
  MappedFile& operator=(const MappedFile&) = delete;
  ~MappedFile() {
    if (data_) ::munmap(const_cast<std::byte*>(data_), size_);
    if (fd_ >= 0) ::close(fd_);
  }

  std::span<const std::byte> bytes() const { return {data_, size_}; }

private:
  int fd_ = -1;
  const std::byte* data_ = nullptr;
  std::size_t size_ = 0;
};

struct RecordMeta {
  std::string image_id;
  std::optional<std::string> patient_id;
  std::string dataset_id;
  std::optional<std::string> class_label;
  std::optional<std::string> disease_label;
  bool has_cls = false;
};

// A parsed shard whose token payload stays in the mapping.
class ShardView {
public:
  explicit ShardView(const std::string& path) : path_(path), file_(std::make_unique<MappedFile>(path)) {
    ByteReader rd(file_->bytes());
    try {
      auto magic = rd.get_bytes(4);
      if (std::memcmp(magic.data(), kShardMagic.data(), 4) != 0)
        throw DataError("not a token shard (bad magic): '" + path + "'");
      const auto version = rd.get<std::uint16_t>();
      if (version != kShardVersion)
        throw DataError("unsupported shard version " + std::to_string(version) + " in '" + path + "'");
      d_m_ = rd.get<std::uint32_t>();
      n_tokens_ = rd.get<std::uint32_t>();
      const auto count = rd.get<std::uint64_t>();
      meta_.reserve(static_cast<std::size_t>(count));
      for (std::uint64_t i = 0; i < count; ++i) {
        RecordMeta m;
        m.image_id = rd.get_string();
        m.patient_id = rd.get_optional_string();
        m.dataset_id = rd.get_string();
        m.class_label = rd.get_optional_string();
        m.disease_label = rd.get_optional_string();
        m.has_cls = rd.get<std::uint8_t>() != 0;
        meta_.push_back(std::move(m));
      }
      payload_offset_ = rd.position();
      const std::size_t expect = meta_.size() * n_tokens_ * d_m_ * sizeof(float);
      if (rd.remaining() != expect)
        throw DataError("shard '" + path + "' payload size " + std::to_string(rd.remaining()) +
                        " does not match header (expected " + std::to_string(expect) + ")");
    } catch (const ByteReader::Truncated&) {
      throw DataError("truncated shard '" + path + "'");
    }
  }

  const std::string& path() const { return path_; }
  std::size_t d_m() const { return d_m_; }
  std::size_t n_tokens() const { return n_tokens_; }
  std::size_t record_count() const { return meta_.size(); }
  const RecordMeta& meta(std::size_t i) const { return meta_.at(i); }

  std::span<const std::byte> payload() const { return file_->bytes().subspan(payload_offset_); }

  std::uint32_t payload_checksum() const { return crc32_of(payload()); }

  // Copies one token row into `out` (length d_m).
  void read_token(std::size_t record, std::size_t token, std::span<float> out) const {
    const std::size_t offset = (record * n_tokens_ + token) * d_m_ * sizeof(float);
    std::memcpy(out.data(), payload().data() + offset, d_m_ * sizeof(float));
  }

  RowMatrix<float> read_tokens(std::size_t record) const {
    RowMatrix<float> m(n_tokens_, d_m_);
    const std::size_t offset = record * n_tokens_ * d_m_ * sizeof(float);
    std::memcpy(m.data(), payload().data() + offset, n_tokens_ * d_m_ * sizeof(float));
    return m;
  }

  TokenRecord read_record(std::size_t i) const {
    const auto& m = meta(i);
    return TokenRecord{m.image_id, m.patient_id, m.dataset_id, m.class_label,
                       m.disease_label, read_tokens(i), m.has_cls};
  }

private:
  std::string path_;
  std::unique_ptr<MappedFile> file_;
  std::size_t d_m_ = 0;
  std::size_t n_tokens_ = 0;
  std::vector<RecordMeta> meta_;
  std::size_t payload_offset_ = 0;
};

inline std::vector<TokenRecord> read_token_shard(const std::string& path) {
  ShardView v(path);
  std::vector<TokenRecord> out;
  out.reserve(v.record_count());
  for (std::size_t i = 0; i < v.record_count(); ++i) out.push_back(v.read_record(i));
  return out;
}

struct ShardEntry {
  std::string path;  // relative to the manifest's directory unless absolute
  std::uint32_t checksum = 0;
  std::uint64_t records = 0;
};

struct DatasetManifest {
  std::size_t d_m = 0;
  std::size_t n_tokens_per_image = 0;
  std::vector<ShardEntry> shards;
  std::vector<std::string> label_vocabulary;
  std::map<std::string, std::vector<std::string>> patient_index;
  std::map<std::string, std::vector<std::string>> disease_index;
  std::optional<std::map<std::string, std::string>> image_file_index;
  std::optional<std::string> patch_layout;  // e.g. "cls_first_row_major"
};

inline nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["d_m"] = m.d_m;
  j["n_tokens"] = m.n_tokens_per_image;
  j["shards"] = nlohmann::json::array();
  for (const auto& s : m.shards)
    j["shards"].push_back({{"path", s.path}, {"checksum", hex32(s.checksum)}, {"records", s.records}});
  j["labels"] = m.label_vocabulary;
  j["patients"] = m.patient_index;
  j["diseases"] = m.disease_index;
  if (m.image_file_index) j["image_files"] = *m.image_file_index;
  if (m.patch_layout) j["patch_layout"] = *m.patch_layout;
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.d_m = j.at("d_m").get<std::size_t>();
    m.n_tokens_per_image = j.at("n_tokens").get<std::size_t>();
    for (const auto& s : j.at("shards")) {
      ShardEntry e;
      e.path = s.at("path").get<std::string>();
      e.checksum = parse_hex32(s.at("checksum").get<std::string>());
      e.records = s.value("records", std::uint64_t{0});
      m.shards.push_back(std::move(e));
    }
    if (j.contains("labels")) m.label_vocabulary = j["labels"].get<std::vector<std::string>>();
    if (j.contains("patients"))
      m.patient_index = j["patients"].get<std::map<std::string, std::vector<std::string>>>();
    if (j.contains("diseases"))
      m.disease_index = j["diseases"].get<std::map<std::string, std::vector<std::string>>>();
    if (j.contains("image_files"))
      m.image_file_index = j["image_files"].get<std::map<std::string, std::string>>();
    if (j.contains("patch_layout")) m.patch_layout = j["patch_layout"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
  if (m.d_m == 0 || m.n_tokens_per_image == 0) throw DataError("manifest d_m and n_tokens must be positive");
  return m;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  write_text_file(path, to_json(m).dump(2) + "\n");
}

enum class TokenFilter { all, patch_only, cls_only };

inline std::string to_string(TokenFilter f) {
  switch (f) {
    case TokenFilter::all: return "all";
    case TokenFilter::patch_only: return "patch_only";
    case TokenFilter::cls_only: return "cls_only";
  }
  return "all";
}

inline TokenFilter token_filter_from_string(const std::string& s) {
  if (s == "all") return TokenFilter::all;
  if (s == "patch_only") return TokenFilter::patch_only;
  if (s == "cls_only") return TokenFilter::cls_only;
  throw ConfigError("unknown token filter '" + s + "'");
}

struct ImageRef {
  std::size_t shard = 0;
  std::size_t record = 0;
};

struct TokenRef {
  std::uint32_t image = 0;  // dataset-wide image ordinal
  std::uint32_t token = 0;
  friend bool operator==(const TokenRef&, const TokenRef&) = default;
  friend auto operator<=>(const TokenRef&, const TokenRef&) = default;
};

struct Provenance {
  std::string image_id;
  std::size_t token_index = 0;
  friend bool operator==(const Provenance&, const Provenance&) = default;
  friend auto operator<=>(const Provenance&, const Provenance&) = default;
};

struct TokenBatch {
  RowMatrix<double> tokens;  // B x d_m
  std::vector<Provenance> provenance;

  std::size_t size() const { return static_cast<std::size_t>(tokens.rows()); }
};

// Read-only view of a dataset: manifest metadata plus mapped shards. Safe for
// concurrent readers once constructed.
class DatasetHandle {
public:
  DatasetHandle(DatasetManifest manifest, fs::path base_dir, bool verify_checksums = true)
      : manifest_(std::move(manifest)), base_dir_(std::move(base_dir)) {
    for (std::size_t s = 0; s < manifest_.shards.size(); ++s) {
      const auto& entry = manifest_.shards[s];
      const auto path = resolve(entry.path);
      if (!fs::exists(path)) throw DataError("missing shard '" + path + "'");
      auto view = std::make_unique<ShardView>(path);
      if (view->d_m() != manifest_.d_m)
        throw DataError("d_m inconsistency: shard '" + entry.path + "' has d_m=" +
                        std::to_string(view->d_m()) + ", manifest declares " + std::to_string(manifest_.d_m));
      if (view->n_tokens() != manifest_.n_tokens_per_image)
        throw DataError("n_tokens inconsistency: shard '" + entry.path + "' has " +
                        std::to_string(view->n_tokens()) + ", manifest declares " +
                        std::to_string(manifest_.n_tokens_per_image));
      if (verify_checksums && view->payload_checksum() != entry.checksum)
        throw DataError("checksum mismatch in shard '" + entry.path + "'");
      for (std::size_t r = 0; r < view->record_count(); ++r) {
        images_.push_back({s, r});
        by_id_.emplace(view->meta(r).image_id, images_.size() - 1);  // first occurrence wins
      }
      shards_.push_back(std::move(view));
    }
  }

  const DatasetManifest& manifest() const { return manifest_; }
  std::size_t d_m() const { return manifest_.d_m; }
  std::size_t n_tokens() const { return manifest_.n_tokens_per_image; }
  std::size_t image_count() const { return images_.size(); }
  std::size_t shard_count() const { return shards_.size(); }
  const ShardView& shard(std::size_t s) const { return *shards_.at(s); }

  const RecordMeta& meta(std::size_t image) const {
    const auto& ref = images_.at(image);
    return shards_[ref.shard]->meta(ref.record);
  }
  RowMatrix<float> tokens(std::size_t image) const {
    const auto& ref = images_.at(image);
    return shards_[ref.shard]->read_tokens(ref.record);
  }
  TokenRecord record(std::size_t image) const {
    const auto& ref = images_.at(image);
    return shards_[ref.shard]->read_record(ref.record);
  }
  void read_token(TokenRef t, std::span<float> out) const {
    const auto& ref = images_.at(t.image);
    shards_[ref.shard]->read_token(ref.record, t.token, out);
  }

  std::optional<std::size_t> find(const std::string& image_id) const {
    auto it = by_id_.find(image_id);
    if (it == by_id_.end()) return std::nullopt;
    return it->second;
  }

  bool has_labels() const {
    for (std::size_t i = 0; i < image_count(); ++i)
      if (meta(i).class_label) return true;
    return false;
  }

  // Tokens admitted by `filter`, in dataset order.
  std::vector<TokenRef> token_refs(TokenFilter filter) const {
    std::vector<TokenRef> refs;
    refs.reserve(image_count() * n_tokens());
    for (std::size_t i = 0; i < image_count(); ++i) {
      const bool cls = meta(i).has_cls;
      for (std::size_t t = 0; t < n_tokens(); ++t) {
        if (filter == TokenFilter::patch_only && cls && t == 0) continue;
        if (filter == TokenFilter::cls_only && !(cls && t == 0)) continue;
        refs.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(t)});
      }
    }
    return refs;
  }

  TokenBatch gather(std::span<const TokenRef> refs) const {
    TokenBatch b;
    b.tokens.resize(static_cast<Eigen::Index>(refs.size()), static_cast<Eigen::Index>(d_m()));
    b.provenance.reserve(refs.size());
    std::vector<float> row(d_m());
    for (std::size_t k = 0; k < refs.size(); ++k) {
      read_token(refs[k], row);
      for (std::size_t c = 0; c < d_m(); ++c) b.tokens(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c)) = row[c];
      b.provenance.push_back({meta(refs[k].image).image_id, refs[k].token});
    }
    return b;
  }

  std::string resolve(const std::string& p) const {
    const fs::path path(p);
    return (path.is_absolute() ? path : base_dir_ / path).string();
  }

private:
  DatasetManifest manifest_;
  fs::path base_dir_;
  std::vector<std::unique_ptr<ShardView>> shards_;
  std::vector<ImageRef> images_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

inline DatasetHandle open_dataset(const std::string& manifest_path, bool verify_checksums = true) {
  if (!fs::exists(manifest_path)) throw DataError("manifest not found: '" + manifest_path + "'");
  std::ifstream in(manifest_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest '" + manifest_path + "' does not parse: " + e.what());
  }
  return DatasetHandle(manifest_from_json(j), fs::path(manifest_path).parent_path(), verify_checksums);
}

// Single-consumer stream over one epoch of tokens. With a seed the order is a
// seeded permutation of the dataset order; without, dataset order is kept.
class BatchStream {
public:
  BatchStream(const DatasetHandle& handle, std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed,
              TokenFilter filter)
      : handle_(&handle), batch_size_(batch_size), refs_(handle.token_refs(filter)) {
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (shuffle_seed) {
      Rng rng(*shuffle_seed);
      shuffle_in_place(refs_, rng);
    }
  }

  std::optional<TokenBatch> next() {
    if (pos_ >= refs_.size()) return std::nullopt;
    const std::size_t n = std::min(batch_size_, refs_.size() - pos_);
    auto b = handle_->gather(std::span(refs_).subspan(pos_, n));
    pos_ += n;
    return b;
  }

  std::size_t token_count() const { return refs_.size(); }

private:
  const DatasetHandle* handle_;
  std::size_t batch_size_;
  std::vector<TokenRef> refs_;
  std::size_t pos_ = 0;
};

inline BatchStream iterate_batches(const DatasetHandle& handle, std::size_t batch_size,
                                   std::optional<std::uint64_t> shuffle_seed, TokenFilter filter) {
  return BatchStream(handle, batch_size, shuffle_seed, filter);
}

struct ValidationIssue {
  std::string kind;
  std::string detail;
};

struct ValidationReport {
  std::vector<ValidationIssue> issues;
  bool ok() const { return issues.empty(); }
  bool has(std::string_view kind) const {
    return std::any_of(issues.begin(), issues.end(), [&](const auto& i) { return i.kind == kind; });
  }
};

inline ValidationReport validate_manifest(const DatasetHandle& handle) {
  ValidationReport rep;
  auto issue = [&](std::string kind, std::string detail) { rep.issues.push_back({std::move(kind), std::move(detail)}); };
  const auto& m = handle.manifest();

  for (std::size_t s = 0; s < handle.shard_count(); ++s) {
    const auto& view = handle.shard(s);
    const auto& entry = m.shards[s];
    if (view.payload_checksum() != entry.checksum)
      issue("checksum mismatch", "shard '" + entry.path + "'");
    if (view.d_m() != m.d_m) issue("d_m inconsistency", "shard '" + entry.path + "'");
    if (entry.records != 0 && entry.records != view.record_count())
      issue("record count mismatch", "shard '" + entry.path + "'");
  }

  std::map<std::string, std::size_t> occurrences;
  for (std::size_t i = 0; i < handle.image_count(); ++i) ++occurrences[handle.meta(i).image_id];
  for (const auto& [id, n] : occurrences)
    if (n > 1) issue("duplicate image_id", "'" + id + "' appears " + std::to_string(n) + " times");

  const std::set<std::string> vocab(m.label_vocabulary.begin(), m.label_vocabulary.end());
  for (std::size_t i = 0; i < handle.image_count(); ++i) {
    const auto& meta = handle.meta(i);
    if (meta.class_label && !vocab.contains(*meta.class_label))
      issue("unknown class label", "'" + *meta.class_label + "' on image '" + meta.image_id + "'");
  }

  std::map<std::string, std::string> owner;
  for (const auto& [patient, images] : m.patient_index) {
    for (const auto& img : images) {
      auto idx = handle.find(img);
      if (!idx) {
        issue("dangling image reference", "patient '" + patient + "' lists unknown image '" + img + "'");
        continue;
      }
      auto [it, fresh] = owner.emplace(img, patient);
      if (!fresh && it->second != patient)
        issue("ambiguous patient assignment", "image '" + img + "' listed under '" + it->second + "' and '" + patient + "'");
      const auto& rec_patient = handle.meta(*idx).patient_id;
      if (rec_patient && *rec_patient != patient)
        issue("patient mismatch", "image '" + img + "' records patient '" + *rec_patient + "'");
    }
  }

  std::map<std::string, std::string> disease_of;
  for (const auto& [disease, patients] : m.disease_index) {
    for (const auto& p : patients) {
      if (!m.patient_index.contains(p))
        issue("dangling patient reference", "disease '" + disease + "' lists unknown patient '" + p + "'");
      auto [it, fresh] = disease_of.emplace(p, disease);
      if (!fresh && it->second != disease)
        issue("ambiguous disease assignment", "patient '" + p + "' in '" + it->second + "' and '" + disease + "'");
    }
  }

  if (m.image_file_index)
    for (const auto& [img, _] : *m.image_file_index)
      if (!handle.find(img)) issue("dangling image reference", "image_files lists unknown image '" + img + "'");

  std::vector<float> row(handle.d_m());
  for (std::size_t i = 0; i < handle.image_count(); ++i) {
    bool bad = false;
    for (std::size_t t = 0; t < handle.n_tokens() && !bad; ++t) {
      handle.read_token({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(t)}, row);
      bad = std::any_of(row.begin(), row.end(), [](float v) { return !std::isfinite(v); });
    }
    if (bad) issue("non-finite token", "image '" + handle.meta(i).image_id + "'");
  }
  return rep;
}

// Writes `records` as shards of at most `records_per_shard` plus a manifest
// whose patient/disease/label indices are derived from record metadata.
struct DatasetWriteOptions {
  std::size_t records_per_shard = 1000;
  std::string shard_prefix = "shard";
  std::optional<std::map<std::string, std::string>> image_files;
  std::optional<std::string> patch_layout;
};

inline DatasetManifest write_dataset(std::span<const TokenRecord> records, const std::string& out_dir,
                                     const std::string& manifest_name = "manifest.json",
                                     const DatasetWriteOptions& opts = {}) {
  if (records.empty()) throw DataError("empty shard");
  fs::create_directories(out_dir);
  DatasetManifest m;
  m.d_m = records.front().d_m();
  m.n_tokens_per_image = records.front().n_tokens();
  std::set<std::string> labels;
  std::map<std::string, std::set<std::string>> disease_sets;
  for (std::size_t start = 0, k = 0; start < records.size(); start += opts.records_per_shard, ++k) {
    const std::size_t n = std::min(opts.records_per_shard, records.size() - start);
    std::ostringstream name;
    name << opts.shard_prefix << "_" << std::setw(5) << std::setfill('0') << k << ".cyts";
    const auto summary = write_token_shard(records.subspan(start, n), (fs::path(out_dir) / name.str()).string());
    m.shards.push_back({name.str(), summary.checksum, summary.record_count});
  }
  for (const auto& r : records) {
    if (r.class_label) labels.insert(*r.class_label);
    if (r.patient_id) {
      m.patient_index[*r.patient_id].push_back(r.image_id);
      if (r.disease_label) disease_sets[*r.disease_label].insert(*r.patient_id);
    }
  }
  m.label_vocabulary.assign(labels.begin(), labels.end());
  for (auto& [d, ps] : disease_sets) m.disease_index[d].assign(ps.begin(), ps.end());
  m.image_file_index = opts.image_files;
  m.patch_layout = opts.patch_layout;
  save_manifest(m, (fs::path(out_dir) / manifest_name).string());
  return m;
}

}  // namespace cytosae
