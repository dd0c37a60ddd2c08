#include "support.hpp"

#include "cytosae/barcode.hpp"

#include <gtest/gtest.h>

using namespace cytosae;
using namespace testsupport;

namespace {

Barcode img(const std::string& id, std::vector<double> v, double tau = 0) {
  return {id, BarcodeLevel::image, std::move(v), tau, 4};
}

Barcode patient(const std::string& id, std::vector<double> v, double tau = 0) {
  return {id, BarcodeLevel::patient, std::move(v), tau, 1};
}

}  // namespace

TEST(Binarize, StrictThreshold) {
  EXPECT_EQ(binarize_patch(0.0, 0.0), 0);
  EXPECT_EQ(binarize_patch(1e-300, 0.0), 1);
  EXPECT_EQ(binarize_patch(0.5, 0.5), 0);
  EXPECT_EQ(binarize_patch(0.51, 0.5), 1);
}

TEST(ImageBarcode, CountsActivePatches) {
  Eigen::MatrixXd h(4, 3);
  h << 0.0, 0.2, 1.0,
       0.3, 0.0, 2.0,
       0.0, 0.0, 0.1,
       0.0, 0.9, 0.05;
  EXPECT_EQ(image_barcode("a", h, 0.0).values, (std::vector<double>{1, 2, 4}));
  EXPECT_EQ(image_barcode("a", h, 0.1).values, (std::vector<double>{1, 2, 2}));
  EXPECT_EQ(image_barcode("a", h, 0.1).n_constituents, 4u);
}

TEST(ImageBarcode, FromAttributionGrids) {
  AttributionGrid g{"x", 2, Eigen::Matrix<double, 2, 2, Eigen::RowMajor>{{0.0, 1.0}, {2.0, 0.0}}, 0.7};
  const auto b = image_barcode(std::span(&g, 1), 4, 0.0);
  EXPECT_EQ(b.values, (std::vector<double>{0, 0, 2, 0}));
  g.latent_id = 4;
  EXPECT_THROW(image_barcode(std::span(&g, 1), 4, 0.0), DataError);
}

TEST(Aggregate, PatientMeanOfTwoImages) {
  const std::vector<Barcode> imgs{img("a", {2, 0}), img("b", {4, 1})};
  const auto p = patient_barcode("p", imgs);
  EXPECT_EQ(p.values, (std::vector<double>{3, 0.5}));
  EXPECT_EQ(p.level, BarcodeLevel::patient);
  EXPECT_EQ(p.n_constituents, 2u);
}

TEST(Aggregate, SevenImageMeanAgainstLoop) {
  Rng rng(3);
  std::vector<Barcode> imgs;
  for (int i = 0; i < 7; ++i) {
    std::vector<double> v(9);
    for (auto& x : v) x = static_cast<double>(uniform_index(rng, 257));
    imgs.push_back(img("i" + std::to_string(i), v));
  }
  const auto p = patient_barcode("p", imgs);
  for (std::size_t s = 0; s < 9; ++s) {
    double sum = 0;
    for (const auto& b : imgs) sum += b.values[s];
    EXPECT_NEAR(p.values[s], sum / 7, 1e-12);
  }
}

TEST(Aggregate, DiseaseIsUnweightedOverPatients) {
  // patient A has one image, patient B has three: disease mean ignores that
  const auto a = patient_barcode("A", std::vector<Barcode>{img("a1", {0})});
  const auto b = patient_barcode("B", std::vector<Barcode>{img("b1", {10}), img("b2", {10}), img("b3", {10})});
  EXPECT_EQ(disease_barcode("d", std::vector<Barcode>{a, b}).values, std::vector<double>{5});
}

TEST(Aggregate, PermutationInvariantBitForBit) {
  Rng rng(11);
  std::vector<Barcode> imgs;
  for (int i = 0; i < 13; ++i) {
    std::vector<double> v(5);
    for (auto& x : v) x = uniform01(rng) * 1e3;  // non-integers make summation order visible
    imgs.push_back(img("i" + std::to_string(i), v));
  }
  const auto ref = patient_barcode("p", imgs);
  for (int trial = 0; trial < 20; ++trial) {
    shuffle_in_place(imgs, rng);
    EXPECT_EQ(patient_barcode("p", imgs), ref);
  }
}

TEST(Aggregate, RejectsInconsistentInput) {
  EXPECT_THROW(patient_barcode("p", std::vector<Barcode>{}), DataError);
  EXPECT_THROW(patient_barcode("p", std::vector<Barcode>{img("a", {1}), img("b", {1, 2})}), DataError);
  EXPECT_THROW(patient_barcode("p", std::vector<Barcode>{img("a", {1}, 0), img("b", {1}, 0.5)}), DataError);
  EXPECT_THROW(disease_barcode("d", std::vector<Barcode>{img("a", {1})}), DataError);
}

TEST(Differential, MatchesFullSortOracle) {
  Rng rng(2);
  std::vector<double> va(40), vb(40);
  for (std::size_t s = 0; s < 40; ++s) {
    va[s] = static_cast<double>(uniform_index(rng, 5));  // small range forces ties
    vb[s] = static_cast<double>(uniform_index(rng, 5));
  }
  const Barcode a{"A", BarcodeLevel::disease, va, 0, 2}, b{"B", BarcodeLevel::disease, vb, 0, 2};
  const auto r = differential_latents(a, b, 6);
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t s = 0; s < 40; ++s) d.emplace_back(va[s] - vb[s], s);
  auto hi = d;
  std::sort(hi.begin(), hi.end(), [](auto x, auto y) { return x.first != y.first ? x.first > y.first : x.second < y.second; });
  auto lo = d;
  std::sort(lo.begin(), lo.end(), [](auto x, auto y) { return x.first != y.first ? x.first < y.first : x.second < y.second; });
  ASSERT_EQ(r.top_a.size(), 6u);
  ASSERT_EQ(r.top_b.size(), 6u);
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_EQ(r.top_a[k].latent_id, hi[k].second);
    EXPECT_EQ(r.top_a[k].delta, hi[k].first);
    EXPECT_EQ(r.top_b[k].latent_id, lo[k].second);
  }
  EXPECT_EQ(to_json(r)["top_a"][0]["rank"], 1);
}

TEST(Differential, IdenticalDiseasesGiveZeroDelta) {
  const Barcode a{"A", BarcodeLevel::disease, {1, 2, 3}, 0, 1};
  auto b = a;
  b.subject_id = "B";
  const auto r = differential_latents(a, b, 10);
  EXPECT_EQ(r.delta, (std::vector<double>{0, 0, 0}));
  EXPECT_EQ(r.top_a.size(), 3u);
  EXPECT_TRUE(r.top_b.empty());  // disjoint from top_a
}

TEST(Pipeline, MatchesOracleAndIsTauMonotone) {
  TempDir dir;
  const auto recs = random_records({.n_images = 12, .n_tokens = 5, .d_m = 4, .images_per_patient = 3, .n_diseases = 2, .seed = 6});
  write_dataset(recs, dir.str());
  const auto h = open_dataset(dir / "manifest.json");
  const auto model = random_model<double>(4, 10, 1, 0.1);
  const auto p = PlainParams::from(model);
  const auto set = compute_barcodes(model, h, 0.0, 2);
  ASSERT_EQ(set.images.size(), 12u);
  ASSERT_EQ(set.patients.size(), 4u);
  ASSERT_EQ(set.diseases.size(), 2u);
  EXPECT_TRUE(set.warnings.empty());
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t s = 0; s < 10; ++s) {
      int c = 0;
      for (Eigen::Index t = 1; t < 5; ++t)
        c += naive_encode(p, std::vector<double>(recs[i].tokens.row(t).begin(), recs[i].tokens.row(t).end()))[s] > 0;
      EXPECT_EQ(set.images[i].values[s], c);
    }
  // patient p101 holds images 3..5; disease dz1 holds p101 and p103
  const auto* p101 = set.find(BarcodeLevel::patient, "p101");
  const auto* p103 = set.find(BarcodeLevel::patient, "p103");
  ASSERT_TRUE(p101 && p103);
  for (std::size_t s = 0; s < 10; ++s) {
    EXPECT_NEAR(p101->values[s], (set.images[3].values[s] + set.images[4].values[s] + set.images[5].values[s]) / 3, 1e-12);
    EXPECT_NEAR(set.find(BarcodeLevel::disease, "dz1")->values[s], (p101->values[s] + p103->values[s]) / 2, 1e-12);
  }
  const auto higher = compute_barcodes(model, h, 0.3);
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t s = 0; s < 10; ++s) EXPECT_LE(higher.images[i].values[s], set.images[i].values[s]);
  EXPECT_EQ(compute_barcodes(model, h, 0.0, 1).images, set.images);
}

TEST(Pipeline, SingleImagePatientsEqualTheirImage) {
  TempDir dir;
  const auto recs = random_records({.n_images = 2, .images_per_patient = 1, .seed = 7});
  write_dataset(recs, dir.str());
  const auto h = open_dataset(dir / "manifest.json");
  const auto set = compute_barcodes(random_model<double>(4, 6, 2), h, 0.0);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(set.patients[i].values, set.images[i].values);
}

TEST(Pipeline, PatientWithoutImagesIsWarnedAndSkipped) {
  TempDir dir;
  const auto recs = random_records({.n_images = 4, .n_diseases = 1, .seed = 8});
  auto m = write_dataset(recs, dir.str());
  m.patient_index["ghost"] = {"nope"};
  m.disease_index["dz0"].push_back("ghost");
  save_manifest(m, dir / "manifest.json");
  const auto set = compute_barcodes(random_model<double>(4, 6, 2), open_dataset(dir / "manifest.json"), 0.0);
  EXPECT_EQ(set.patients.size(), 2u);
  EXPECT_EQ(set.diseases[0].n_constituents, 2u);
  EXPECT_EQ(set.warnings.size(), 2u);
}

TEST(Serialization, CsvAndBinaryRoundTrip) {
  std::vector<Barcode> v{img("a,b", {0.1, 1.0 / 3}, 0.25), patient("p", {2, 1e-17}, 0.25),
                         {"d", BarcodeLevel::disease, {5, 0}, 0.25, 3}};
  v[0].subject_id = "a";  // CSV ids are plain
  const auto csv = parse_barcodes_csv(barcodes_csv(v));
  ASSERT_EQ(csv.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(csv[i].subject_id, v[i].subject_id);
    EXPECT_EQ(csv[i].level, v[i].level);
    EXPECT_EQ(csv[i].values, v[i].values);
    EXPECT_EQ(csv[i].tau, v[i].tau);
  }
  EXPECT_EQ(decode_barcodes(encode_barcodes(v)), v);
  auto bytes = encode_barcodes(v);
  bytes.pop_back();
  EXPECT_THROW(decode_barcodes(bytes), Error);
}
