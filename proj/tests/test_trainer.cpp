#include "support.hpp"

#include "cytosae/checkpoint.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace cytosae;
using namespace testsupport;

namespace {

SaeConfig small_config() {
  SaeConfig c;
  c.d_m = 4;
  c.expansion_factor = 3;
  c.batch_size = 8;
  c.total_steps = 30;
  c.warmup_steps = 10;
  c.dead_window_steps = 5;
  c.learning_rate = 3e-3;
  c.l1_coefficient = 0.05;
  c.seed = 17;
  return c;
}

struct Fixture {
  TempDir dir;
  DatasetHandle handle;
  Fixture()
      : handle([this] {
          write_dataset(random_records({.n_images = 12, .seed = 42}), dir / "data");
          return open_dataset(dir / "data/manifest.json");
        }()) {}
};

}  // namespace

TEST(Warmup, LinearRampThenConstant) {
  SaeConfig c;
  c.learning_rate = 1e-3;
  c.warmup_steps = 4;
  EXPECT_DOUBLE_EQ(effective_learning_rate(c, 0), 0.25e-3);
  EXPECT_DOUBLE_EQ(effective_learning_rate(c, 2), 0.75e-3);
  EXPECT_DOUBLE_EQ(effective_learning_rate(c, 3), 1e-3);
  EXPECT_DOUBLE_EQ(effective_learning_rate(c, 100), 1e-3);
  c.warmup_steps = 0;
  EXPECT_DOUBLE_EQ(effective_learning_rate(c, 0), 1e-3);
}

TEST(Train, SameSeedIsBitIdentical) {
  Fixture f;
  const auto a = encode_checkpoint(train(small_config(), f.handle));
  const auto b = encode_checkpoint(train(small_config(), f.handle));
  EXPECT_EQ(a, b);
  auto other = small_config();
  other.seed = 18;
  EXPECT_NE(encode_checkpoint(train(other, f.handle)), a);
}

TEST(Train, DecoderColumnsStayUnitNorm) {
  Fixture f;
  const auto ck = train(small_config(), f.handle);
  for (Eigen::Index s = 0; s < ck.model.W_dec.cols(); ++s) EXPECT_NEAR(ck.model.W_dec.col(s).norm(), 1.0f, 1e-5f);
  EXPECT_EQ(ck.model.step, 30u);
  EXPECT_EQ(ck.adam.t, 30u);
}

TEST(Train, LossDecreases) {
  Fixture f;
  auto c = small_config();
  const auto before = evaluate_dataset(initial_checkpoint(c, f.handle).model, f.handle, TokenFilter::all);
  c.total_steps = 400;
  const auto after = evaluate_dataset(train(c, f.handle).model, f.handle, TokenFilter::all);
  EXPECT_LT(after.mse + c.l1_coefficient * after.l1, before.mse + c.l1_coefficient * before.l1);
}

TEST(Train, DimensionMismatchRejected) {
  Fixture f;
  auto c = small_config();
  c.d_m = 5;
  EXPECT_THROW(train(c, f.handle), DataError);
}

TEST(Checkpoint, RoundTripIsExact) {
  Fixture f;
  const auto ck = train(small_config(), f.handle);
  save_checkpoint(ck, f.dir / "a.ckpt");
  const auto back = load_checkpoint(f.dir / "a.ckpt");
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ck));
  EXPECT_EQ(back.model.W_enc, ck.model.W_enc);
  EXPECT_EQ(back.adam.v_W_dec, ck.adam.v_W_dec);
  EXPECT_EQ(back.model.last_fired_step, ck.model.last_fired_step);
  EXPECT_EQ(to_json(back.config), to_json(ck.config));
}

TEST(Checkpoint, CorruptionDetected) {
  Fixture f;
  auto bytes = encode_checkpoint(train(small_config(), f.handle));
  EXPECT_THROW(decode_checkpoint(std::span(bytes).first(bytes.size() / 2)), Error);
  bytes[0] = std::byte{'X'};
  EXPECT_THROW(decode_checkpoint(bytes), Error);
}

TEST(Resume, MatchesUninterruptedRun) {
  Fixture f;
  const auto full = train(small_config(), f.handle);
  auto first = small_config();
  first.total_steps = 13;
  const auto half = train(first, f.handle);
  save_checkpoint(half, f.dir / "half.ckpt");
  const auto resumed = train(small_config(), f.handle, {.resume = load_checkpoint(f.dir / "half.ckpt")});
  EXPECT_EQ(encode_checkpoint(resumed), encode_checkpoint(full));
}

TEST(Resume, MidRunCheckpointsAlsoResumeExactly) {
  Fixture f;
  const auto full = train(small_config(), f.handle, {.checkpoint_dir = f.dir / "run", .checkpoint_every = 10});
  ASSERT_TRUE(std::filesystem::exists(f.dir / "run/step_20.ckpt"));
  EXPECT_FALSE(std::filesystem::exists(f.dir / "run/step_30.ckpt"));
  const auto resumed = train(small_config(), f.handle, {.resume = load_checkpoint(f.dir / "run/step_20.ckpt")});
  EXPECT_EQ(encode_checkpoint(resumed), encode_checkpoint(load_checkpoint(f.dir / "run/final.ckpt")));
  EXPECT_EQ(encode_checkpoint(resumed), encode_checkpoint(full));
}

TEST(Resume, ChangedHyperparametersRejected) {
  Fixture f;
  const auto ck = train(small_config(), f.handle);
  auto c = small_config();
  c.total_steps = 40;
  EXPECT_NO_THROW(train(c, f.handle, {.resume = ck}));
  c.learning_rate = 1e-2;
  EXPECT_THROW(train(c, f.handle, {.resume = ck}), ConfigError);
}

TEST(Metrics, OneRowPerLoggedStep) {
  Fixture f;
  std::vector<std::uint64_t> seen;
  train(small_config(), f.handle,
        {.metrics_csv = f.dir / "m.csv", .log_every = 7, .on_log = [&](const StepMetrics& m) { seen.push_back(m.step); }});
  EXPECT_EQ(seen, (std::vector<std::uint64_t>{7, 14, 21, 28, 30}));
  std::istringstream in(read_text_file(f.dir / "m.csv"));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line + "\n", metrics_csv_header());
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 6);
  }
  EXPECT_EQ(rows, 5u);
}

TEST(Init, MeanAndMedianBiases) {
  Fixture f;
  auto c = small_config();
  c.b_dec_init = DecoderBiasInit::mean;
  const auto ck = initial_checkpoint(c, f.handle);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(4);
  std::size_t n = 0;
  for (std::size_t i = 0; i < f.handle.image_count(); ++i) {
    const auto t = f.handle.tokens(i);
    for (Eigen::Index r = 0; r < t.rows(); ++r, ++n) mean += t.row(r).cast<double>().transpose();
  }
  mean /= static_cast<double>(n);
  EXPECT_LT((ck.model.b_dec.cast<double>() - mean).norm(), 1e-5);
  c.b_dec_init = DecoderBiasInit::zeros;
  EXPECT_TRUE((initial_checkpoint(c, f.handle).model.b_dec.array() == 0).all());
}
