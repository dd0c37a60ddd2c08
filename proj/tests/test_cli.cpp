#include "support.hpp"

#include <gtest/gtest.h>

#include <json.hpp>
#include <sys/wait.h>

using namespace cytosae;
using namespace testsupport;

namespace {

struct Run {
  int code = -1;
  std::string err;
};

Run cli(const TempDir& dir, const std::string& args) {
  const auto err_path = dir / "stderr.txt";
  const std::string cmd = std::string(CYTOSAE_CLI_PATH) + " " + args + " >/dev/null 2>" + err_path;
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_text_file(err_path)};
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

// Small planted dataset with 3 diseases and a short training run, shared by
// the tests below.
class Pipeline : public ::testing::Test {
protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir;
    const auto& d = *dir_;
    ASSERT_EQ(cli(d, "synth --out " + d / "data" + " --synth-d-m 16 --atoms 12 --k 2 --images 120 --images-per-patient 2"
                  " --diseases 3 --records-per-shard 50").code, 0);
    ASSERT_EQ(cli(d, "train --data " + d / "data/manifest.json" + " --out " + d / "run" +
                  " --expansion 2 --steps 300 --warmup 50 --batch-size 128 --l1 0.05 --lr 3e-3 --log-every 100").code, 0);
  }
  static void TearDownTestSuite() { delete dir_; }

  static std::string data() { return *dir_ / "data/manifest.json"; }
  static std::string ckpt() { return *dir_ / "run/final.ckpt"; }
  static TempDir* dir_;
};

TempDir* Pipeline::dir_ = nullptr;

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  TempDir d;
  EXPECT_EQ(cli(d, "--help").code, 0);
  EXPECT_EQ(cli(d, "").code, 2);
  EXPECT_EQ(cli(d, "no-such-command").code, 2);
  EXPECT_EQ(cli(d, "train --data x").code, 2);
}

TEST(Cli, MissingManifestIsADataError) {
  TempDir d;
  const auto r = cli(d, "validate --data " + d / "nope.json");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("manifest not found"), std::string::npos);
}

TEST(Cli, BadConfigValueIsAConfigError) {
  TempDir d;
  write_dataset(random_records({.n_images = 2, .seed = 1}), d / "data");
  EXPECT_EQ(cli(d, "train --data " + d / "data/manifest.json" + " --out " + d / "o --lr -1").code, 2);
  EXPECT_EQ(cli(d, "train --data " + d / "data/manifest.json" + " --out " + d / "o --steps 10 --warmup 50").code, 2);
}

TEST_F(Pipeline, TrainWritesMetricsAndManifest) {
  const auto metrics = read_text_file(*dir_ / "run/metrics.csv");
  EXPECT_EQ(lines(metrics), 4u);  // header + steps 100, 200, 300
  const auto run = nlohmann::json::parse(read_text_file(*dir_ / "run/run.json"));
  EXPECT_EQ(run["command"], "train");
  EXPECT_TRUE(std::filesystem::exists(*dir_ / "run/run_config.toml"));
}

TEST_F(Pipeline, ConfigFileRerunIsByteIdentical) {
  const auto& d = *dir_;
  ASSERT_EQ(cli(d, "--config " + d / "run/run_config.toml" + " train --out " + d / "rerun").code, 0);
  EXPECT_EQ(read_file_bytes(d / "rerun/final.ckpt"), read_file_bytes(ckpt()));
}

TEST_F(Pipeline, StatsAreDeterministic) {
  const auto& d = *dir_;
  ASSERT_EQ(cli(d, "stats --data " + data() + " --checkpoint " + ckpt() + " --out " + d / "s1 --theta-grid -3 -2 -1").code, 0);
  ASSERT_EQ(cli(d, "stats --data " + data() + " --checkpoint " + ckpt() + " --out " + d / "s2 --theta-grid -3 -2 -1").code, 0);
  EXPECT_EQ(read_text_file(d / "s1/latent_stats.csv"), read_text_file(d / "s2/latent_stats.csv"));
  EXPECT_EQ(lines(read_text_file(d / "s1/latent_stats.csv")), 33u);
  EXPECT_EQ(lines(read_text_file(d / "s1/threshold_counts.csv")), 4u);
}

TEST(Cli, StatsWithoutLabelsWarnsAndDropsEntropy) {
  TempDir d;
  write_dataset(random_records({.n_images = 20, .n_labels = 0, .seed = 2}), d / "data");
  ASSERT_EQ(cli(d, "train --data " + d / "data/manifest.json" + " --out " + d / "run --expansion 2 --steps 20 --warmup 5 --batch-size 16").code, 0);
  const auto r = cli(d, "stats --data " + d / "data/manifest.json" + " --checkpoint " + d / "run/final.ckpt" + " --out " + d / "s");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("warning"), std::string::npos);
  const auto csv = read_text_file(d / "s/latent_stats.csv");
  EXPECT_EQ(csv.find("label_entropy"), std::string::npos);
}

TEST_F(Pipeline, ConceptsAndReport) {
  const auto& d = *dir_;
  ASSERT_EQ(cli(d, "concepts --data " + data() + " --checkpoint " + ckpt() + " --out " + d / "c --clusters 2 --per-cluster 2"
                " --theta-min -6 --top-images 3").code, 0);
  const auto sampled = nlohmann::json::parse(read_text_file(d / "c/sampled_latents.json"));
  ASSERT_FALSE(sampled.empty());
  ASSERT_EQ(cli(d, "report --concepts " + d / "c" + " --data " + data() + " --out " + d / "r").code, 0);
  const auto html = read_text_file(d / "r/report.html");
  EXPECT_NE(html.find("<html>"), std::string::npos);
  EXPECT_EQ(cli(d, "concepts --data " + data() + " --checkpoint " + ckpt() + " --out " + d / "c2 --clusters 500").code, 3);
}

TEST_F(Pipeline, BarcodesAndProbe) {
  const auto& d = *dir_;
  ASSERT_EQ(cli(d, "barcode --data " + data() + " --checkpoint " + ckpt() + " --out " + d / "b --top-n 5").code, 0);
  EXPECT_EQ(lines(read_text_file(d / "b/barcodes_patient.csv")), 61u);
  EXPECT_EQ(lines(read_text_file(d / "b/barcodes_disease.csv")), 4u);
  const auto diff = nlohmann::json::parse(read_text_file(d / "b/differential_disease_0__disease_1.json"));
  EXPECT_EQ(diff["top_a"].size(), 5u);

  ASSERT_EQ(cli(d, "stats --data " + data() + " --checkpoint " + ckpt() + " --out " + d / "ps").code, 0);
  ASSERT_EQ(cli(d, "probe --barcodes " + d / "b/barcodes.cytb" + " --data " + data() + " --stats " + d / "ps/latent_stats.csv" +
                " --theta-grid -3 -2 -1 0 --out " + d / "p").code, 0);
  EXPECT_EQ(lines(read_text_file(d / "p/sweep.csv")), 5u);
  const auto res = nlohmann::json::parse(read_text_file(d / "p/probe_result.json"));
  EXPECT_GE(res["mean_f1"].get<double>(), 0.9);  // disease is planted in the concept atoms
  EXPECT_EQ(res["sweep"].size(), 4u);
  EXPECT_EQ(res["classes"].size(), 3u);

  // 20 patients per disease cannot fill 25 folds
  const auto r = cli(d, "probe --barcodes " + d / "b/barcodes_patient.csv" + " --data " + data() + " --folds 25 --out " + d / "p2");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("disease_"), std::string::npos);
}

TEST(Cli, SingleImagePatientsHaveImageBarcodes) {
  TempDir d;
  write_dataset(random_records({.n_images = 2, .images_per_patient = 1, .n_diseases = 1, .seed = 3}), d / "data");
  ASSERT_EQ(cli(d, "train --data " + d / "data/manifest.json" + " --out " + d / "run --expansion 2 --steps 10 --warmup 2 --batch-size 4").code, 0);
  ASSERT_EQ(cli(d, "barcode --data " + d / "data/manifest.json" + " --checkpoint " + d / "run/final.ckpt" + " --out " + d / "b").code, 0);
  auto strip = [](std::string s) {  // drop subject id and level columns
    std::vector<std::string> rows;
    std::istringstream in(s);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) rows.push_back(line.substr(line.find(',', line.find(',') + 1)));
    return rows;
  };
  EXPECT_EQ(strip(read_text_file(d / "b/barcodes_image.csv")), strip(read_text_file(d / "b/barcodes_patient.csv")));
}

TEST(Cli, SynthCheckBelowTheBarExitsFive) {
  TempDir d;
  const auto r = cli(d, "synth-check --out " + d / "sc --synth-d-m 8 --atoms 8 --images 40 --steps 5 --warmup 1 --batch-size 32 --bar 1.01");
  EXPECT_EQ(r.code, 5);
  const auto rec = nlohmann::json::parse(read_text_file(d / "sc/recovery.json"));
  EXPECT_TRUE(rec.contains("fraction_above"));
}
