// cytosae command line: dataset validation, SAE training, latent statistics,
// concept sampling, barcodes, probing and the planted-dictionary check.

#include "cytosae/barcode.hpp"
#include "cytosae/checkpoint.hpp"
#include "cytosae/concepts.hpp"
#include "cytosae/probe.hpp"
#include "cytosae/report.hpp"
#include "cytosae/synth.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace fs = std::filesystem;
using namespace cytosae;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;
constexpr int kExitRecovery = 5;

const char* kExitCodes =
    "Exit codes:\n"
    "  0  success\n"
    "  1  unexpected internal error\n"
    "  2  configuration error (bad flag or config value)\n"
    "  3  data error (missing/corrupt input, validation issues)\n"
    "  4  training diverged\n"
    "  5  synth-check recovery below the bar\n"
    "Set CYTOSAE_THREADS to cap worker threads (default 1).";

struct RecoveryBelowBar : Error {
  using Error::Error;
};

// Input files recorded with their checksums in the run manifest.
struct Inputs {
  std::vector<std::pair<std::string, std::string>> files;
  void add(const std::string& role, const std::string& path) {
    if (!path.empty()) files.emplace_back(role, path);
  }
};

void write_run_manifest(const CLI::App& app, const CLI::App& sub, const std::string& out_dir, const Inputs& inputs) {
  fs::create_directories(out_dir);
  (void)app;
  std::string toml = "[" + sub.get_name() + "]\n";
  std::istringstream lines(sub.config_to_str(true, false));
  const std::string prefix = sub.get_name() + ".";
  for (std::string line; std::getline(lines, line);)
    toml += (line.rfind(prefix, 0) == 0 ? line.substr(prefix.size()) : line) + "\n";
  nlohmann::json j;
  j["command"] = sub.get_name();
  j["effective_config"] = toml;
  j["inputs"] = nlohmann::json::array();
  for (const auto& [role, path] : inputs.files)
    j["inputs"].push_back({{"role", role}, {"path", path}, {"crc32", hex32(crc32_of(read_file_bytes(path)))}});
  j["threads"] = threads_from_env();
  write_text_file((fs::path(out_dir) / "run.json").string(), j.dump(2) + "\n");
  write_text_file((fs::path(out_dir) / "run_config.toml").string(), toml);
}

std::string out_path(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

// ---------------------------------------------------------------- options

struct SaeFlags {
  SaeConfig cfg;
  std::string b_dec_init = "geometric_median";
};

void add_sae_options(CLI::App* sub, SaeFlags& f) {
  auto& c = f.cfg;
  sub->add_option("--expansion", c.expansion_factor, "d_SAE / d_m")->capture_default_str();
  sub->add_option("--l1", c.l1_coefficient, "sparsity coefficient lambda")->capture_default_str();
  sub->add_option("--lr", c.learning_rate, "Adam learning rate")->capture_default_str();
  sub->add_option("--warmup", c.warmup_steps, "linear warmup steps")->capture_default_str();
  sub->add_option("--steps", c.total_steps, "total optimisation steps")->capture_default_str();
  sub->add_option("--batch-size", c.batch_size, "tokens per step")->capture_default_str();
  sub->add_option("--ghost-grads", c.ghost_grads_enabled, "ghost gradients for dead latents")->capture_default_str();
  sub->add_option("--dead-window", c.dead_window_steps, "steps without firing before a latent counts as dead")
      ->capture_default_str();
  sub->add_option("--token-filter", c.token_filter, "training tokens: all | patch_only")
      ->check(CLI::IsMember({"all", "patch_only"}))
      ->capture_default_str();
  sub->add_option("--seed", c.seed, "random seed")->capture_default_str();
  sub->add_option("--b-dec-init", f.b_dec_init, "decoder bias init: geometric_median | mean | zeros")
      ->check(CLI::IsMember({"geometric_median", "mean", "zeros"}))
      ->capture_default_str();
  sub->add_option("--normalize-decoder", c.normalize_decoder, "unit-norm decoder columns after each step")
      ->capture_default_str();
  sub->add_option("--median-sample-cap", c.median_sample_cap, "tokens used for the b_dec estimate")
      ->capture_default_str();
}

SaeConfig finish_sae(SaeFlags& f, std::size_t d_m) {
  f.cfg.d_m = d_m;
  f.cfg.b_dec_init = decoder_bias_init_from_string(f.b_dec_init);
  f.cfg.validate();
  return f.cfg;
}

void add_synth_options(CLI::App* sub, SynthSpec& s) {
  sub->add_option("--synth-d-m", s.d_m, "token dimension")->capture_default_str();
  sub->add_option("--atoms", s.n_atoms, "planted atoms")->capture_default_str();
  sub->add_option("--k", s.k, "atoms per token")->capture_default_str();
  sub->add_option("--coef-low", s.coefficient_low, "coefficient range low")->capture_default_str();
  sub->add_option("--coef-high", s.coefficient_high, "coefficient range high")->capture_default_str();
  sub->add_option("--sigma", s.noise_sigma, "Gaussian noise sigma")->capture_default_str();
  sub->add_option("--incoherence", s.incoherence_bound, "max |cos| between atoms")->capture_default_str();
  sub->add_option("--synth-seed", s.seed, "generator seed")->capture_default_str();
  sub->add_option("--images", s.n_images, "images to generate")->capture_default_str();
  sub->add_option("--tokens-per-image", s.tokens_per_image, "tokens per image")->capture_default_str();
  sub->add_option("--has-cls", s.has_cls, "first token of each image is CLS")->capture_default_str();
  sub->add_option("--images-per-patient", s.images_per_patient, "images per patient")->capture_default_str();
  sub->add_option("--diseases", s.n_diseases, "disease groups (0: none)")->capture_default_str();
  sub->add_option("--records-per-shard", s.records_per_shard, "images per shard")->capture_default_str();
}

struct TrainFlags {
  std::size_t log_every = 1;
  std::size_t checkpoint_every = 0;
  std::size_t progress_every = 1000;
};

void add_train_loop_options(CLI::App* sub, TrainFlags& t) {
  sub->add_option("--log-every", t.log_every, "metrics CSV stride")->capture_default_str();
  sub->add_option("--checkpoint-every", t.checkpoint_every, "intermediate checkpoint stride (0: final only)")
      ->capture_default_str();
  sub->add_option("--progress-every", t.progress_every, "progress line stride on stderr (0: silent)")
      ->capture_default_str();
}

Checkpoint run_training(const SaeConfig& cfg, const DatasetHandle& handle, const std::string& out, const TrainFlags& t,
                        std::optional<Checkpoint> resume) {
  TrainOptions opts;
  opts.checkpoint_dir = out;
  opts.metrics_csv = out_path(out, "metrics.csv");
  opts.log_every = t.log_every;
  opts.checkpoint_every = t.checkpoint_every;
  opts.resume = std::move(resume);
  std::uint64_t next_progress = t.progress_every;
  opts.on_log = [&](const StepMetrics& m) {
    if (t.progress_every == 0 || (m.step < next_progress && m.step != cfg.total_steps)) return;
    while (next_progress <= m.step) next_progress += t.progress_every;
    std::cerr << "step " << m.step << "/" << cfg.total_steps << "  mse " << format_real(m.loss.mse) << "  l0 "
              << format_real(m.loss.l0) << "  dead " << format_real(m.dead_fraction) << "\n";
  };
  return train(cfg, handle, opts);
}

DatasetHandle open_checked(const std::string& manifest) { return open_dataset(manifest, true); }

SaeModel<float> load_model_for(const std::string& ckpt_path, const DatasetHandle& handle) {
  auto ck = load_checkpoint(ckpt_path);
  if (ck.model.d_m() != handle.d_m())
    throw DataError("checkpoint d_m = " + std::to_string(ck.model.d_m()) + " does not match dataset d_m = " +
                    std::to_string(handle.d_m()));
  return std::move(ck.model);
}

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.' ? c : '_';
  return out;
}

std::vector<double> default_theta_grid() {
  std::vector<double> g;
  for (int i = -24; i <= 4; ++i) g.push_back(i * 0.25);
  return g;
}

// ---------------------------------------------------------------- commands

int cmd_validate(const std::string& manifest, const std::string& out) {
  auto handle = open_dataset(manifest, false);
  const auto report = validate_manifest(handle);
  nlohmann::json j;
  j["manifest"] = manifest;
  j["images"] = handle.image_count();
  j["d_m"] = handle.d_m();
  j["n_tokens"] = handle.n_tokens();
  j["issues"] = nlohmann::json::array();
  for (const auto& i : report.issues) j["issues"].push_back({{"kind", i.kind}, {"detail", i.detail}});
  if (!out.empty()) write_text_file(out_path(out, "validation.json"), j.dump(2) + "\n");
  for (const auto& i : report.issues) std::cerr << i.kind << ": " << i.detail << "\n";
  std::cout << handle.image_count() << " images, " << report.issues.size() << " issue(s)\n";
  return report.ok() ? kExitOk : kExitData;
}

int cmd_stats(const DatasetHandle& handle, const SaeModel<float>& model, const std::string& out, std::size_t top_k,
              bool per_image, const std::vector<double>& grid) {
  StatsOptions so;
  so.top_k_for_entropy = top_k;
  so.per_image_frequency = per_image;
  const auto table = compute_latent_stats(model, handle, so);
  if (!table.has_entropy) std::cerr << "warning: dataset has no class labels; label_entropy column omitted\n";
  write_text_file(out_path(out, "latent_stats.csv"), latent_stats_csv(table));
  std::string counts = "theta,latents_above\n";
  for (double t : grid) counts += format_real(t) + "," + std::to_string(count_above_threshold(table, t)) + "\n";
  write_text_file(out_path(out, "threshold_counts.csv"), counts);
  std::size_t alive = 0;
  for (const auto& s : table.latents) alive += s.fired_token_count > 0;
  std::cout << table.latents.size() << " latents, " << alive << " active on at least one token\n";
  return kExitOk;
}

struct ConceptFlags {
  std::string stats;
  std::size_t clusters = 10;
  std::size_t per_cluster = 5;
  double theta_min = -3;
  std::uint64_t seed = 0;
  std::size_t top_images = 10;
  double tau = 0;
  double ubiquity = 1.0;
  std::size_t top_k = 25;
  std::size_t mask_scale = 14;
};

int cmd_concepts(const DatasetHandle& handle, const SaeModel<float>& model, const std::string& out,
                 const ConceptFlags& f) {
  LatentStatsTable table;
  if (!f.stats.empty()) {
    table = parse_latent_stats_csv(read_text_file(f.stats));
    if (table.latents.size() != model.d_sae()) throw DataError("stats table does not match the checkpoint's d_SAE");
  } else {
    StatsOptions so;
    so.top_k_for_entropy = f.top_k;
    table = compute_latent_stats(model, handle, so);
    if (!table.has_entropy) std::cerr << "warning: dataset has no class labels; label_entropy column omitted\n";
    write_text_file(out_path(out, "latent_stats.csv"), latent_stats_csv(table));
  }
  const auto km = kmeans_cluster_latents(table, f.clusters, f.theta_min, f.seed);
  std::string csv = "latent_id,cluster,log10_frequency,log10_mean_activation\n";
  for (std::size_t i = 0; i < km.point_ids.size(); ++i) {
    const auto& st = table.latents[km.point_ids[i]];
    csv += std::to_string(km.point_ids[i]) + "," + std::to_string(km.assignment[i]) + "," +
           format_real(std::log10(st.activation_frequency)) + "," + format_real(std::log10(st.mean_activation)) + "\n";
  }
  write_text_file(out_path(out, "clusters.csv"), csv);

  const auto sampled = sample_latents_per_cluster(km, f.per_cluster, f.seed);
  std::vector<std::size_t> ids;
  for (const auto& s : sampled) ids.push_back(s.latent);
  const auto kept = filter_ubiquitous_latents(model, handle, ids, f.ubiquity);
  const std::set<std::size_t> kept_set(kept.begin(), kept.end());

  nlohmann::json sj;
  sj["clusters"] = f.clusters;
  sj["per_cluster"] = f.per_cluster;
  sj["theta_min"] = f.theta_min;
  sj["seed"] = f.seed;
  sj["ubiquity_threshold"] = f.ubiquity;
  sj["latents"] = nlohmann::json::array();
  for (const auto& s : sampled)
    sj["latents"].push_back({{"latent_id", s.latent}, {"cluster", s.cluster}, {"ubiquitous", !kept_set.count(s.latent)}});
  write_text_file(out_path(out, "sampled_latents.json"), sj.dump(2) + "\n");

  fs::create_directories(out_path(out, "references"));
  fs::create_directories(out_path(out, "masks"));
  const auto refs = top_reference_images(model, handle, std::span<const std::size_t>(ids), f.top_images, f.tau);
  for (const auto& rs : refs) {
    write_text_file(out_path(out, "references/latent_" + std::to_string(rs.latent_id) + ".json"),
                    to_json(rs).dump() + "\n");
    for (const auto& e : rs.entries)
      if (e.grid)
        write_file_bytes(out_path(out, "masks/latent_" + std::to_string(rs.latent_id) + "_" + sanitize(e.image_id) + ".png"),
                         attribution_mask_png(*e.grid, f.mask_scale));
  }
  std::cout << km.point_ids.size() << " latents above theta_min clustered into " << f.clusters << "; " << sampled.size()
            << " sampled, " << (sampled.size() - kept.size()) << " ubiquitous\n";
  return kExitOk;
}

int cmd_report(const std::string& concepts_dir, const std::string& manifest, const std::string& out,
               std::size_t mask_scale) {
  const auto sampled = nlohmann::json::parse(read_text_file(out_path(concepts_dir, "sampled_latents.json")));
  std::optional<DatasetHandle> handle;
  if (!manifest.empty()) handle.emplace(open_checked(manifest));
  const auto* files = handle && handle->manifest().image_file_index ? &*handle->manifest().image_file_index : nullptr;
  fs::create_directories(out_path(out, "masks"));

  std::vector<ReportLatent> latents;
  for (const auto& s : sampled.at("latents")) {
    ReportLatent rl;
    rl.latent_id = s.at("latent_id");
    rl.cluster = s.at("cluster").get<std::size_t>();
    const auto ref = nlohmann::json::parse(
        read_text_file(out_path(concepts_dir, "references/latent_" + std::to_string(rl.latent_id) + ".json")));
    for (const auto& im : ref.at("images")) {
      ReportImage ri;
      ri.image_id = im.at("image_id");
      ri.score = im.at("score");
      if (!im.contains("attribution")) continue;
      AttributionGrid g;
      g.image_id = ri.image_id;
      g.latent_id = rl.latent_id;
      const auto& rows = im.at("attribution").at("grid");
      g.grid.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < rows[r].size(); ++c)
          g.grid(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c].get<double>();
      ri.mask_href = "masks/latent_" + std::to_string(rl.latent_id) + "_" + sanitize(ri.image_id) + ".png";
      write_file_bytes(out_path(out, ri.mask_href), attribution_mask_png(g, mask_scale));
      if (files)
        if (auto it = files->find(ri.image_id); it != files->end()) {
          const auto abs = fs::absolute(handle->resolve(it->second));
          ri.image_href = fs::relative(abs, fs::absolute(out)).generic_string();
        }
      rl.images.push_back(std::move(ri));
    }
    latents.push_back(std::move(rl));
  }
  write_text_file(out_path(out, "report.html"), render_report_html("cytosae concept review", latents));
  std::cout << "report with " << latents.size() << " latents"
            << (files ? "" : " (no image files in manifest; masks only)") << "\n";
  return kExitOk;
}

int cmd_barcode(const DatasetHandle& handle, const SaeModel<float>& model, const std::string& out, double tau,
                const std::vector<std::string>& pairs, std::size_t top_n) {
  if (handle.manifest().patient_index.empty()) throw DataError("manifest has no patient index; barcodes need patients");
  const auto set = compute_barcodes(model, handle, tau, threads_from_env());
  write_text_file(out_path(out, "barcodes_image.csv"), barcodes_csv(set.images));
  write_text_file(out_path(out, "barcodes_patient.csv"), barcodes_csv(set.patients));
  write_text_file(out_path(out, "barcodes_disease.csv"), barcodes_csv(set.diseases));
  std::vector<Barcode> all = set.images;
  all.insert(all.end(), set.patients.begin(), set.patients.end());
  all.insert(all.end(), set.diseases.begin(), set.diseases.end());
  write_file_bytes(out_path(out, "barcodes.cytb"), encode_barcodes(all));

  std::vector<std::pair<std::string, std::string>> todo;
  for (const auto& p : pairs) {
    const auto comma = p.find(',');
    if (comma == std::string::npos) throw ConfigError("disease pair '" + p + "' must be written as A,B");
    todo.emplace_back(p.substr(0, comma), p.substr(comma + 1));
  }
  if (pairs.empty())
    for (std::size_t a = 0; a < set.diseases.size(); ++a)
      for (std::size_t b = a + 1; b < set.diseases.size(); ++b)
        todo.emplace_back(set.diseases[a].subject_id, set.diseases[b].subject_id);
  nlohmann::json diffs = nlohmann::json::array();
  for (const auto& [a, b] : todo) {
    const auto* da = set.find(BarcodeLevel::disease, a);
    const auto* db = set.find(BarcodeLevel::disease, b);
    if (!da || !db) throw DataError("disease pair " + a + "," + b + " names an unknown disease");
    const auto name = "differential_" + sanitize(a) + "__" + sanitize(b) + ".json";
    write_text_file(out_path(out, name), to_json(differential_latents(*da, *db, top_n)).dump(2) + "\n");
    diffs.push_back(name);
  }
  nlohmann::json rep{{"tau", tau},
                     {"images", set.images.size()},
                     {"patients", set.patients.size()},
                     {"diseases", set.diseases.size()},
                     {"differential_reports", diffs},
                     {"warnings", set.warnings}};
  write_text_file(out_path(out, "barcode_report.json"), rep.dump(2) + "\n");
  for (const auto& w : set.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << set.images.size() << " image, " << set.patients.size() << " patient, " << set.diseases.size()
            << " disease barcodes; " << set.warnings.size() << " warning(s)\n";
  return kExitOk;
}

struct ProbeFlags {
  std::string barcodes, data, labels, stats;
  std::optional<double> theta;
  std::vector<double> theta_grid;
  ProbeConfig cfg;
};

std::map<std::string, std::string> patient_diseases(const ProbeFlags& f) {
  std::map<std::string, std::string> out;
  if (!f.labels.empty()) {
    std::istringstream in(read_text_file(f.labels));
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto comma = line.find(',');
      if (comma == std::string::npos) throw DataError("malformed label row: " + line);
      out[line.substr(0, comma)] = line.substr(comma + 1);
    }
    return out;
  }
  const auto handle = open_checked(f.data);
  for (const auto& [disease, pids] : handle.manifest().disease_index)
    for (const auto& p : pids) {
      auto [it, fresh] = out.emplace(p, disease);
      if (!fresh && it->second != disease) throw DataError("patient '" + p + "' belongs to more than one disease");
    }
  return out;
}

int cmd_probe(const std::string& out, ProbeFlags& f) {
  std::vector<Barcode> barcodes;
  if (f.barcodes.size() > 5 && f.barcodes.substr(f.barcodes.size() - 5) == ".cytb")
    barcodes = decode_barcodes(read_file_bytes(f.barcodes));
  else
    barcodes = parse_barcodes_csv(read_text_file(f.barcodes));
  std::erase_if(barcodes, [](const Barcode& b) { return b.level != BarcodeLevel::patient; });
  if (barcodes.empty()) throw DataError("no patient barcodes in '" + f.barcodes + "'");
  const auto diseases = patient_diseases(f);

  std::vector<const Barcode*> used;
  std::vector<std::string> labels;
  for (const auto& b : barcodes) {
    if (auto it = diseases.find(b.subject_id); it != diseases.end()) {
      used.push_back(&b);
      labels.push_back(it->second);
    } else {
      std::cerr << "warning: patient '" << b.subject_id << "' has no disease label; skipped\n";
    }
  }
  if (used.empty()) throw DataError("no labelled patients");
  const auto d = used.front()->d_sae();
  RowMatrix<double> x(static_cast<Eigen::Index>(used.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < used.size(); ++i)
    for (std::size_t s = 0; s < d; ++s) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s)) = used[i]->values[s];

  std::vector<double> mean(d, 1.0);
  if (!f.stats.empty()) {
    const auto t = parse_latent_stats_csv(read_text_file(f.stats));
    if (t.latents.size() != d) throw DataError("stats table length does not match barcode length");
    for (std::size_t s = 0; s < d; ++s) mean[s] = t.latents[s].mean_activation;
  } else if (f.theta || !f.theta_grid.empty()) {
    throw ConfigError("--theta and --theta-grid need --stats");
  }
  f.cfg.threads = threads_from_env();

  const auto res = evaluate_cv(x, labels, mean, f.theta, f.cfg);
  auto j = to_json(res);
  j["patients"] = used.size();
  if (!res.all_converged()) std::cerr << "warning: probe did not converge on every fold\n";
  if (!f.theta_grid.empty()) {
    const auto sweep = threshold_sweep(x, labels, mean, f.theta_grid, f.cfg);
    write_text_file(out_path(out, "sweep.csv"), sweep_csv(sweep));
    j["sweep"] = nlohmann::json::array();
    for (const auto& r : sweep) j["sweep"].push_back(to_json(r));
  }
  write_text_file(out_path(out, "probe_result.json"), j.dump(2) + "\n");
  std::cout << "weighted F1 " << format_real(res.mean_f1) << " +/- " << format_real(res.std_f1) << " over "
            << res.folds.size() << " folds (" << res.retained_latents << " latents retained)\n";
  return kExitOk;
}

int cmd_synth(const SynthSpec& spec, const std::string& out) {
  const auto files = generate_planted_dataset(spec, out);
  std::cout << "wrote " << files.manifest << "\n";
  return kExitOk;
}

int cmd_synth_check(const SynthSpec& spec, SaeFlags& sf, const TrainFlags& tf, const std::string& out, double cosine,
                    double bar) {
  const auto data_dir = out_path(out, "data");
  const auto files = generate_planted_dataset(spec, data_dir);
  const auto handle = open_checked(files.manifest);
  const auto cfg = finish_sae(sf, handle.d_m());
  const auto ck = run_training(cfg, handle, out, tf, std::nullopt);
  const auto gt = load_ground_truth(files.ground_truth);
  const auto score = score_recovery(ck.model, gt.atoms, cosine);
  auto j = to_json(score);
  j["bar"] = bar;
  j["passed"] = score.fraction_above >= bar;
  write_text_file(out_path(out, "recovery.json"), j.dump(2) + "\n");
  std::cout << "recovered " << format_real(score.fraction_above) << " of atoms at cosine >= " << format_real(cosine)
            << " (mean matched cosine " << format_real(score.mean_cosine) << ")\n";
  if (score.fraction_above < bar)
    throw RecoveryBelowBar("recovery fraction " + format_real(score.fraction_above) + " is below the bar " +
                           format_real(bar));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cytosae: sparse autoencoder concept analysis on pre-extracted transformer tokens"};
  app.set_config("--config", "", "TOML config file; [subcommand] tables hold subcommand options, flags override it");
  app.config_formatter(std::make_shared<CLI::ConfigTOML>());
  app.footer(kExitCodes);
  app.require_subcommand(1, 1);

  std::string data, out, checkpoint;

  auto* validate = app.add_subcommand("validate", "check a dataset manifest and its shards");
  validate->add_option("--data", data, "dataset manifest")->required();
  validate->add_option("--out", out, "write validation.json here");

  SynthSpec synth_spec;
  auto* synth = app.add_subcommand("synth", "generate a planted-dictionary dataset");
  add_synth_options(synth, synth_spec);
  synth->add_option("--out", out, "output directory")->required();

  SaeFlags sae_flags;
  TrainFlags train_flags;
  std::string resume;
  auto* trainc = app.add_subcommand("train", "train a sparse autoencoder on a token dataset");
  trainc->add_option("--data", data, "dataset manifest")->required();
  trainc->add_option("--out", out, "output directory")->required();
  trainc->add_option("--resume", resume, "checkpoint to resume from");
  add_sae_options(trainc, sae_flags);
  add_train_loop_options(trainc, train_flags);

  std::size_t stats_top_k = 25;
  bool per_image = false;
  std::vector<double> count_grid = default_theta_grid();
  auto* stats = app.add_subcommand("stats", "per-latent frequency, mean activation and label entropy");
  stats->add_option("--data", data, "dataset manifest")->required();
  stats->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  stats->add_option("--out", out, "output directory")->required();
  stats->add_option("--top-k", stats_top_k, "reference images used for label entropy")->capture_default_str();
  stats->add_flag("--per-image-frequency", per_image, "activation frequency over images instead of tokens");
  stats->add_option("--theta-grid", count_grid, "log10 mean-activation thresholds for latent counts");

  ConceptFlags cf;
  auto* concepts = app.add_subcommand("concepts", "cluster latents, sample them and export reference images");
  concepts->add_option("--data", data, "dataset manifest")->required();
  concepts->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  concepts->add_option("--out", out, "output directory")->required();
  concepts->add_option("--stats", cf.stats, "existing latent_stats.csv (computed when absent)");
  concepts->add_option("--clusters", cf.clusters, "k-means clusters")->capture_default_str();
  concepts->add_option("--per-cluster", cf.per_cluster, "latents sampled per cluster")->capture_default_str();
  concepts->add_option("--theta-min", cf.theta_min, "log10 mean-activation floor for clustering")->capture_default_str();
  concepts->add_option("--seed", cf.seed, "clustering and sampling seed")->capture_default_str();
  concepts->add_option("--top-images", cf.top_images, "reference images per latent")->capture_default_str();
  concepts->add_option("--tau", cf.tau, "patch binarisation threshold")->capture_default_str();
  concepts->add_option("--ubiquity", cf.ubiquity, "flag latents active on at least this image fraction")
      ->capture_default_str();
  concepts->add_option("--top-k", cf.top_k, "reference images used for label entropy")->capture_default_str();
  concepts->add_option("--mask-scale", cf.mask_scale, "pixels per patch in PNG masks")->capture_default_str();

  std::string concepts_dir;
  std::size_t report_scale = 14;
  auto* report = app.add_subcommand("report", "static HTML page over a concepts output directory");
  report->add_option("--concepts", concepts_dir, "output directory of the concepts command")->required();
  report->add_option("--data", data, "dataset manifest (for source image paths)");
  report->add_option("--out", out, "output directory")->required();
  report->add_option("--mask-scale", report_scale, "pixels per patch in PNG masks")->capture_default_str();

  double tau = 0;
  std::vector<std::string> pairs;
  std::size_t top_n = 50;
  auto* barcode = app.add_subcommand("barcode", "image, patient and disease barcodes plus differential reports");
  barcode->add_option("--data", data, "dataset manifest")->required();
  barcode->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  barcode->add_option("--out", out, "output directory")->required();
  barcode->add_option("--tau", tau, "patch binarisation threshold")->capture_default_str();
  barcode->add_option("--pair", pairs, "disease pair A,B (repeatable; default all pairs)");
  barcode->add_option("--top-n", top_n, "latents per direction in differential reports")->capture_default_str();

  ProbeFlags pf;
  double theta_value = 0;
  auto* probe = app.add_subcommand("probe", "cross-validated logistic-regression probe on patient barcodes");
  probe->add_option("--barcodes", pf.barcodes, "patient barcodes (.csv or .cytb)")->required();
  auto* probe_data = probe->add_option("--data", pf.data, "dataset manifest (disease of each patient)");
  auto* probe_labels = probe->add_option("--labels", pf.labels, "CSV patient_id,disease instead of the manifest");
  probe_data->excludes(probe_labels);
  probe->add_option("--stats", pf.stats, "latent_stats.csv for threshold filtering");
  auto* theta_opt = probe->add_option("--theta", theta_value, "keep latents with log10 mean activation above this");
  probe->add_option("--theta-grid", pf.theta_grid, "thresholds for the sweep");
  probe->add_option("--folds", pf.cfg.folds, "cross-validation folds")->capture_default_str();
  probe->add_option("--seed", pf.cfg.seed, "fold assignment seed")->capture_default_str();
  probe->add_option("--max-iter", pf.cfg.max_iter, "optimiser iteration cap")->capture_default_str();
  probe->add_option("--tol", pf.cfg.tol, "gradient tolerance")->capture_default_str();
  probe->add_flag("--standardize", pf.cfg.standardize, "standardise features per fold");
  probe->add_option("--out", out, "output directory")->required();

  SynthSpec check_spec;
  SaeFlags check_flags;
  check_flags.cfg.expansion_factor = 2;
  check_flags.cfg.l1_coefficient = 0.1;
  check_flags.cfg.learning_rate = 1e-3;
  check_flags.cfg.total_steps = 20000;
  check_flags.cfg.batch_size = 1024;
  TrainFlags check_train;
  check_train.log_every = 100;
  double cosine = 0.9, bar = 0.8;
  auto* check = app.add_subcommand("synth-check", "generate planted data, train, and score dictionary recovery");
  add_synth_options(check, check_spec);
  add_sae_options(check, check_flags);
  add_train_loop_options(check, check_train);
  check->add_option("--cosine", cosine, "cosine needed for an atom to count as recovered")->capture_default_str();
  check->add_option("--bar", bar, "required recovered fraction")->capture_default_str();
  check->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  const CLI::App* sub = app.get_subcommands().front();
  try {
    Inputs inputs;
    if (sub == validate) {
      if (!out.empty()) fs::create_directories(out);
      return cmd_validate(data, out);
    }
    if (sub == synth) {
      write_run_manifest(app, *sub, out, inputs);
      return cmd_synth(synth_spec, out);
    }
    if (sub == check) {
      write_run_manifest(app, *sub, out, inputs);
      return cmd_synth_check(check_spec, check_flags, check_train, out, cosine, bar);
    }
    if (sub == probe) {
      if (*theta_opt) pf.theta = theta_value;
      if (pf.data.empty() && pf.labels.empty()) throw ConfigError("probe needs --data or --labels for disease labels");
      inputs.add("barcodes", pf.barcodes);
      inputs.add("manifest", pf.data);
      inputs.add("labels", pf.labels);
      inputs.add("stats", pf.stats);
      write_run_manifest(app, *sub, out, inputs);
      return cmd_probe(out, pf);
    }
    if (sub == report) {
      inputs.add("sampled_latents", out_path(concepts_dir, "sampled_latents.json"));
      inputs.add("manifest", data);
      write_run_manifest(app, *sub, out, inputs);
      return cmd_report(concepts_dir, data, out, report_scale);
    }

    const auto handle = open_checked(data);
    inputs.add("manifest", data);
    if (sub == trainc) {
      std::optional<Checkpoint> resumed;
      if (!resume.empty()) {
        resumed = load_checkpoint(resume);
        inputs.add("resume", resume);
      }
      const auto cfg = finish_sae(sae_flags, handle.d_m());
      write_run_manifest(app, *sub, out, inputs);
      const auto ck = run_training(cfg, handle, out, train_flags, std::move(resumed));
      std::cout << "trained " << ck.model.step << " steps; checkpoint " << out_path(out, "final.ckpt") << "\n";
      return kExitOk;
    }
    inputs.add("checkpoint", checkpoint);
    const auto model = load_model_for(checkpoint, handle);
    if (sub == stats) {
      write_run_manifest(app, *sub, out, inputs);
      return cmd_stats(handle, model, out, stats_top_k, per_image, count_grid);
    }
    if (sub == concepts) {
      inputs.add("stats", cf.stats);
      write_run_manifest(app, *sub, out, inputs);
      return cmd_concepts(handle, model, out, cf);
    }
    if (sub == barcode) {
      write_run_manifest(app, *sub, out, inputs);
      return cmd_barcode(handle, model, out, tau, pairs, top_n);
    }
    throw Error("unhandled subcommand");
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const RecoveryBelowBar& e) {
    std::cerr << e.what() << "\n";
    return kExitRecovery;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInternal;
  }
}
