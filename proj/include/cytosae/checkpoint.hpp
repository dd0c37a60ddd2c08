#pragma once

// Checkpoint file (little-endian):
//   "CYTC" | u16 version | str config_json | str rng_state | u64 adam_t |
//   u32 tensor_count | tensor blocks
// tensor block: str name | u8 dtype (1=f32, 2=f64, 3=u64) | u32 rank |
//   u64 dims[rank] | row-major payload

#include "cytosae/trainer.hpp"

namespace cytosae {

inline constexpr std::array<char, 4> kCheckpointMagic{'C', 'Y', 'T', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  SaeConfig config;
  SaeModel<float> model;
  AdamState adam;
  std::string rng_state;
};

namespace detail {

enum class DType : std::uint8_t { f32 = 1, f64 = 2, u64 = 3 };

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else return DType::u64;
}

template <typename Derived>
void put_tensor(ByteWriter& w, std::string_view name, const Eigen::DenseBase<Derived>& t, bool vector) {
  using T = typename Derived::Scalar;
  w.put_string(name);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(dtype_of<T>()));
  if (vector) {
    w.put<std::uint32_t>(1);
    w.put<std::uint64_t>(static_cast<std::uint64_t>(t.size()));
  } else {
    w.put<std::uint32_t>(2);
    w.put<std::uint64_t>(static_cast<std::uint64_t>(t.rows()));
    w.put<std::uint64_t>(static_cast<std::uint64_t>(t.cols()));
  }
  const RowMatrix<T> rm = t;
  w.put_array<T>(std::span<const T>(rm.data(), static_cast<std::size_t>(rm.size())));
}

inline void put_u64_vector(ByteWriter& w, std::string_view name, const std::vector<std::uint64_t>& v) {
  w.put_string(name);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(DType::u64));
  w.put<std::uint32_t>(1);
  w.put<std::uint64_t>(v.size());
  w.put_array<std::uint64_t>(v);
}

struct TensorHeader {
  std::string name;
  DType dtype;
  std::vector<std::uint64_t> dims;
};

inline TensorHeader get_tensor_header(ByteReader& r, std::string_view expect_name, DType expect_type,
                                      std::uint32_t expect_rank) {
  TensorHeader h;
  h.name = r.get_string();
  h.dtype = static_cast<DType>(r.get<std::uint8_t>());
  const auto rank = r.get<std::uint32_t>();
  if (h.name != expect_name || h.dtype != expect_type || rank != expect_rank)
    throw DataError("unexpected tensor '" + h.name + "' in checkpoint (expected '" + std::string(expect_name) + "')");
  for (std::uint32_t i = 0; i < rank; ++i) h.dims.push_back(r.get<std::uint64_t>());
  return h;
}

template <typename T>
Matrix<T> get_matrix(ByteReader& r, std::string_view name) {
  const auto h = get_tensor_header(r, name, dtype_of<T>(), 2);
  RowMatrix<T> m(static_cast<Eigen::Index>(h.dims[0]), static_cast<Eigen::Index>(h.dims[1]));
  r.get_array<T>(std::span<T>(m.data(), static_cast<std::size_t>(m.size())));
  return m;
}

template <typename T>
Vector<T> get_vector(ByteReader& r, std::string_view name) {
  const auto h = get_tensor_header(r, name, dtype_of<T>(), 1);
  Vector<T> v(static_cast<Eigen::Index>(h.dims[0]));
  r.get_array<T>(std::span<T>(v.data(), static_cast<std::size_t>(v.size())));
  return v;
}

inline std::vector<std::uint64_t> get_u64_vector(ByteReader& r, std::string_view name) {
  const auto h = get_tensor_header(r, name, DType::u64, 1);
  std::vector<std::uint64_t> v(h.dims[0]);
  r.get_array<std::uint64_t>(v);
  return v;
}

}  // namespace detail

inline std::vector<std::byte> encode_checkpoint(const Checkpoint& c) {
  using namespace detail;
  ByteWriter w;
  w.put_bytes(std::as_bytes(std::span(kCheckpointMagic)));
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put_string(to_json(c.config).dump());
  w.put_string(c.rng_state);
  w.put<std::uint64_t>(c.model.step);
  w.put<std::uint64_t>(c.adam.t);
  w.put<std::uint32_t>(13);
  put_tensor(w, "W_enc", c.model.W_enc, false);
  put_tensor(w, "b_enc", c.model.b_enc, true);
  put_tensor(w, "W_dec", c.model.W_dec, false);
  put_tensor(w, "b_dec", c.model.b_dec, true);
  put_u64_vector(w, "last_fired_step", c.model.last_fired_step);
  put_tensor(w, "adam.m.W_enc", c.adam.m_W_enc, false);
  put_tensor(w, "adam.v.W_enc", c.adam.v_W_enc, false);
  put_tensor(w, "adam.m.b_enc", c.adam.m_b_enc, true);
  put_tensor(w, "adam.v.b_enc", c.adam.v_b_enc, true);
  put_tensor(w, "adam.m.W_dec", c.adam.m_W_dec, false);
  put_tensor(w, "adam.v.W_dec", c.adam.v_W_dec, false);
  put_tensor(w, "adam.m.b_dec", c.adam.m_b_dec, true);
  put_tensor(w, "adam.v.b_dec", c.adam.v_b_dec, true);
  return w.bytes();
}

inline Checkpoint decode_checkpoint(std::span<const std::byte> bytes) {
  using namespace detail;
  ByteReader r(bytes);
  Checkpoint c;
  try {
    auto magic = r.get_bytes(4);
    if (std::memcmp(magic.data(), kCheckpointMagic.data(), 4) != 0) throw DataError("not a checkpoint (bad magic)");
    const auto version = r.get<std::uint16_t>();
    if (version != kCheckpointVersion)
      throw DataError("checkpoint version mismatch: file has " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
    const auto config_text = r.get_string();
    try {
      c.config = sae_config_from_json(nlohmann::json::parse(config_text));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("checkpoint config does not parse: ") + e.what());
    }
    c.rng_state = r.get_string();
    c.model.step = r.get<std::uint64_t>();
    c.adam.t = r.get<std::uint64_t>();
    if (r.get<std::uint32_t>() != 13) throw DataError("unexpected tensor count in checkpoint");
    c.model.W_enc = get_matrix<float>(r, "W_enc");
    c.model.b_enc = get_vector<float>(r, "b_enc");
    c.model.W_dec = get_matrix<float>(r, "W_dec");
    c.model.b_dec = get_vector<float>(r, "b_dec");
    c.model.last_fired_step = get_u64_vector(r, "last_fired_step");
    c.adam.m_W_enc = get_matrix<double>(r, "adam.m.W_enc");
    c.adam.v_W_enc = get_matrix<double>(r, "adam.v.W_enc");
    c.adam.m_b_enc = get_vector<double>(r, "adam.m.b_enc");
    c.adam.v_b_enc = get_vector<double>(r, "adam.v.b_enc");
    c.adam.m_W_dec = get_matrix<double>(r, "adam.m.W_dec");
    c.adam.v_W_dec = get_matrix<double>(r, "adam.v.W_dec");
    c.adam.m_b_dec = get_vector<double>(r, "adam.m.b_dec");
    c.adam.v_b_dec = get_vector<double>(r, "adam.v.b_dec");
  } catch (const ByteReader::Truncated&) {
    throw DataError("truncated checkpoint");
  }
  if (r.remaining() != 0) throw DataError("trailing data after checkpoint");
  const auto d_sae = c.model.d_sae(), d_m = c.model.d_m();
  if (c.model.W_dec.rows() != static_cast<Eigen::Index>(d_m) ||
      c.model.W_dec.cols() != static_cast<Eigen::Index>(d_sae) ||
      c.model.b_enc.size() != static_cast<Eigen::Index>(d_sae) ||
      c.model.b_dec.size() != static_cast<Eigen::Index>(d_m) || c.model.last_fired_step.size() != d_sae)
    throw DataError("inconsistent tensor shapes in checkpoint");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  write_file_bytes(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw DataError("checkpoint not found: '" + path + "'");
  return decode_checkpoint(read_file_bytes(path));
}

inline std::string serialize_rng(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline Rng deserialize_rng(const std::string& s) {
  Rng rng;
  std::istringstream is(s);
  is >> rng;
  return rng;
}

struct TrainOptions {
  std::string checkpoint_dir;  // empty: no checkpoint files written
  std::string metrics_csv;     // empty: no metrics file
  std::size_t log_every = 1;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::optional<Checkpoint> resume;
  std::function<void(const StepMetrics&)> on_log;
};

inline Checkpoint initial_checkpoint(const SaeConfig& config, const DatasetHandle& handle) {
  Rng rng(config.seed);
  Checkpoint c;
  c.config = config;
  c.model = initialize_model<float>(config, &handle, rng);
  c.adam = AdamState::zeros_like(c.model);
  c.rng_state = serialize_rng(rng);
  return c;
}

// Runs steps [start, total_steps) where start is 0 or the resumed
// checkpoint's step. Returns the final checkpoint.
inline Checkpoint train(const SaeConfig& config, const DatasetHandle& handle, const TrainOptions& opts = {}) {
  config.validate();
  if (handle.d_m() != config.d_m)
    throw DataError("dataset d_m = " + std::to_string(handle.d_m()) + " does not match config d_m = " +
                    std::to_string(config.d_m));

  Checkpoint ckpt;
  if (opts.resume) {
    ckpt = *opts.resume;
    auto a = to_json(ckpt.config), b = to_json(config);
    a.erase("total_steps");
    b.erase("total_steps");
    if (a != b) throw ConfigError("resume config differs from checkpoint config beyond total_steps");
    ckpt.config = config;
  } else {
    ckpt = initial_checkpoint(config, handle);
  }
  if (!opts.checkpoint_dir.empty()) fs::create_directories(opts.checkpoint_dir);

  std::ofstream metrics;
  if (!opts.metrics_csv.empty()) {
    const bool append = opts.resume && fs::exists(opts.metrics_csv);
    metrics.open(opts.metrics_csv, append ? std::ios::app : std::ios::trunc);
    if (!metrics) throw DataError("cannot open metrics file '" + opts.metrics_csv + "'");
    if (!append) metrics << metrics_csv_header();
  }

  TrainState<float> state{std::move(ckpt.model), std::move(ckpt.adam)};
  TrainingBatchSource source(handle, training_filter(config), config.batch_size, config.seed);
  const std::size_t stride = std::max<std::size_t>(1, opts.log_every);
  while (state.model.step < config.total_steps) {
    const auto batch = source.batch_for_step(state.model.step);
    const auto r = train_step(state, batch, config);
    const auto done = state.model.step;
    if (done % stride == 0 || done == config.total_steps) {
      StepMetrics m{done, r.loss, r.dead_fraction, r.lr};
      if (metrics.is_open()) metrics << metrics_csv_row(m);
      if (opts.on_log) opts.on_log(m);
    }
    if (opts.checkpoint_every > 0 && !opts.checkpoint_dir.empty() && done % opts.checkpoint_every == 0 &&
        done != config.total_steps) {
      Checkpoint mid{config, state.model, state.adam, ckpt.rng_state};
      save_checkpoint(mid, (fs::path(opts.checkpoint_dir) / ("step_" + std::to_string(done) + ".ckpt")).string());
    }
  }
  Checkpoint final_ckpt{config, std::move(state.model), std::move(state.adam), ckpt.rng_state};
  if (!opts.checkpoint_dir.empty())
    save_checkpoint(final_ckpt, (fs::path(opts.checkpoint_dir) / "final.ckpt").string());
  return final_ckpt;
}

}  // namespace cytosae
