#include "volrep/contrastive.hpp"

#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

using namespace volrep;
using namespace volrep::clip;

namespace {

// Straight transcription of the loss as nested loops over plain doubles.
double patdis_oracle(const Matrix& e, const std::vector<int>& seq_map, double tau_p) {
  const auto n = static_cast<int>(e.rows());
  double loss = 0;
  for (int i = 0; i < n; ++i) {
    std::vector<double> logits(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) {
      double dot = 0;
      for (int c = 0; c < e.cols(); ++c) dot += e(i, c) * e(j, c);
      logits[static_cast<std::size_t>(j)] = i == j ? -10.0 : dot / tau_p;
    }
    double mx = -1e300;
    for (double l : logits) mx = std::max(mx, l);
    double z = 0;
    for (double l : logits) z += std::exp(l - mx);
    double agg = 0, count = 0;
    for (int j = 0; j < n; ++j) {
      if (seq_map[static_cast<std::size_t>(i)] != seq_map[static_cast<std::size_t>(j)]) continue;
      agg += std::exp(logits[static_cast<std::size_t>(j)] - mx) / z;
      count += 1;
    }
    loss += -std::log(agg) / count;
  }
  return loss;
}

Matrix unit_rows(Matrix m) {
  for (ad::Index r = 0; r < m.rows(); ++r) m.row(r).normalize();
  return m;
}

Var tau_var(double v) {
  Matrix t(1, 1);
  t(0, 0) = v;
  return ad::parameter(t);
}

std::shared_ptr<const text::Vocabulary> vocab() {
  static auto v = std::make_shared<const text::Vocabulary>(cohort::build_vocabulary(cohort::TemplateTable::standard(12)));
  return v;
}

model::ModelConfig small_model() {
  model::ModelConfig c;
  c.width = 16;
  c.depth = 1;
  c.heads = 2;
  c.pe_dims = 12;
  c.code_dim = 6;
  c.shared_dim = 8;
  return c;
}

text::TextConfig small_text() {
  text::TextConfig t;
  t.width = 16;
  t.depth = 1;
  t.heads = 2;
  t.context = 24;
  t.shared_dim = 8;
  return t;
}

// Studies whose first latent column encodes the first positive diagnosis.
ClipData toy_data(int n, std::uint64_t seed) {
  cohort::CohortConfig cfg;
  cfg.n_studies = n;
  const auto studies = cohort::generate_studies(cfg, seed);
  std::mt19937_64 rng(seed);
  ClipData data;
  for (const auto& s : studies) {
    model::StudyInput in;
    in.study_id = s.study_id;
    in.study_name = s.study_name;
    for (const auto& q : s.sequences) {
      model::SequenceInput si;
      si.latents = nn::randn(4, 6, 0.3, rng);
      for (std::size_t d = 0; d < s.labels.bits.size(); ++d) {
        if (s.labels.bits[d]) si.latents(static_cast<ad::Index>(d % 4), static_cast<ad::Index>(d % 6)) += 2.0;
      }
      si.extents = {2, 2, 1};
      si.grid_pos = {{0, 0, 0}, {0, 1, 0}, {1, 0, 0}, {1, 1, 0}};
      si.name = q.meta.sequence_name;
      in.sequences.push_back(std::move(si));
    }
    data.studies.push_back(std::move(in));
    data.reports.push_back(s.report.token_ids);
  }
  return data;
}

ClipModel toy_model(const ClipConfig& cfg, std::uint64_t seed = 4) {
  std::mt19937_64 rng(seed);
  return make_clip_model(vocab(), small_model(), small_text(), cfg, rng);
}

}  // namespace

TEST(PatientDiscrimination, MatchesScalarLoopOracle) {
  std::mt19937_64 rng(2024);
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = std::uniform_int_distribution<int>(2, 8)(rng);
    const int d = std::uniform_int_distribution<int>(2, 6)(rng);
    const int studies = std::uniform_int_distribution<int>(1, n)(rng);
    std::vector<int> seq_map(static_cast<std::size_t>(n));
    for (auto& s : seq_map) s = std::uniform_int_distribution<int>(0, studies - 1)(rng);
    const double tau_p = std::uniform_real_distribution<double>(0.05, 2.0)(rng);
    const Matrix e = unit_rows(nn::randn(n, d, 1.0, rng));
    const double got = patient_discrimination_loss(ad::constant(e), seq_map, tau_p).item();
    worst = std::max(worst, std::abs(got - patdis_oracle(e, seq_map, tau_p)));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(PatientDiscrimination, HandCases) {
  const Matrix eye = Matrix::Identity(2, 2);
  const double v = patient_discrimination_loss(ad::constant(eye), {0, 1}, 1.0).item();
  const double hand = 2.0 * (10.0 + std::log1p(std::exp(-10.0)));
  EXPECT_NEAR(v, hand, 1e-9);
  EXPECT_NEAR(v, 20.0000908, 1e-6);
  EXPECT_NEAR(v, patdis_oracle(eye, {0, 1}, 1.0), 1e-12);

  // one study: the mask covers the whole softmax row
  std::mt19937_64 rng(1);
  const Matrix e = unit_rows(nn::randn(4, 3, 1.0, rng));
  EXPECT_NEAR(patient_discrimination_loss(ad::constant(e), {7, 7, 7, 7}, 0.1).item(), 0.0, 1e-12);
  EXPECT_GE(patient_discrimination_loss(ad::constant(e), {0, 1, 0, 1}, 0.1).item(), 0.0);

  EXPECT_THROW(patient_discrimination_loss(ad::constant(Matrix::Ones(1, 3)), {0}, 0.1), ClipError);
  EXPECT_THROW(patient_discrimination_loss(ad::constant(e), {0, 1}, 0.1), ClipError);
}

TEST(ClipLoss, ClosedFormAndSymmetries) {
  const Matrix eye = Matrix::Identity(2, 2);
  const double v = clip_loss(ad::constant(eye), ad::constant(eye), tau_var(0.0)).item();
  EXPECT_NEAR(v, std::log1p(std::exp(-1.0)), 1e-6);
  EXPECT_NEAR(v, 0.313262, 1e-6);

  std::mt19937_64 rng(3);
  const Matrix s = unit_rows(nn::randn(5, 4, 1.0, rng));
  const Matrix r = unit_rows(nn::randn(5, 4, 1.0, rng));
  const double base = clip_loss(ad::constant(s), ad::constant(r), tau_var(0.7)).item();
  EXPECT_NEAR(base, clip_loss(ad::constant(r), ad::constant(s), tau_var(0.7)).item(), 1e-12);
  const std::vector<int> perm{3, 0, 4, 1, 2};
  Matrix sp(5, 4), rp(5, 4);
  for (int i = 0; i < 5; ++i) {
    sp.row(i) = s.row(perm[static_cast<std::size_t>(i)]);
    rp.row(i) = r.row(perm[static_cast<std::size_t>(i)]);
  }
  EXPECT_NEAR(base, clip_loss(ad::constant(sp), ad::constant(rp), tau_var(0.7)).item(), 1e-12);
  EXPECT_GT(base, 0.0);
  EXPECT_GT(clip_loss(ad::constant(s), ad::constant(s), tau_var(4.0)).item(), 0.0);

  EXPECT_THROW(clip_loss(ad::constant(Matrix(0, 4)), ad::constant(Matrix(0, 4)), tau_var(0)), ClipError);
  EXPECT_THROW(clip_loss(ad::constant(s), ad::constant(Matrix::Ones(5, 3)), tau_var(0)), ClipError);
}

TEST(ClipLoss, LogitScaleClamp) {
  std::mt19937_64 rng(5);
  const Matrix s = unit_rows(nn::randn(4, 3, 1.0, rng));
  const Matrix r = unit_rows(nn::randn(4, 3, 1.0, rng));
  const double at_clamp = clip_loss(ad::constant(s), ad::constant(r), tau_var(std::log(100.0))).item();
  Var big = tau_var(9.0);
  const Var l = clip_loss(ad::constant(s), ad::constant(r), big);
  EXPECT_NEAR(l.item(), at_clamp, 1e-9);
  ad::backward(l);
  EXPECT_FALSE(big.has_grad() && big.grad()(0, 0) != 0.0);
}

TEST(ClipLoss, GradientChecks) {
  std::mt19937_64 rng(6);
  Var s = ad::parameter(unit_rows(nn::randn(3, 5, 1.0, rng)));
  Var r = ad::parameter(unit_rows(nn::randn(3, 5, 1.0, rng)));
  Var tau = tau_var(0.3);
  EXPECT_LT(volrep::testing::gradcheck([&] { return clip_loss(s, r, tau); }, {s, r, tau}), 1e-4);

  Var e = ad::parameter(unit_rows(nn::randn(3, 5, 1.0, rng)));
  EXPECT_LT(volrep::testing::gradcheck([&] { return patient_discrimination_loss(e, {0, 0, 1}, 0.5); }, {e}), 1e-4);
  // gradients through the normalization as used in training
  Var raw = ad::parameter(nn::randn(3, 5, 1.0, rng));
  EXPECT_LT(volrep::testing::gradcheck(
                [&] { return patient_discrimination_loss(ad::l2_normalize_rows(raw), {0, 1, 0}, 0.2); }, {raw}),
            1e-4);
}

TEST(Retrieval, IdentityRandomAndTies) {
  std::mt19937_64 rng(7);
  const Matrix s = unit_rows(nn::randn(10, 4, 1.0, rng));
  const auto same = evaluate_retrieval(s, s, 1);
  EXPECT_DOUBLE_EQ(same.image_to_text, 1.0);
  EXPECT_DOUBLE_EQ(same.text_to_image, 1.0);

  double mean = 0;
  const int seeds = 40;
  for (int k = 0; k < seeds; ++k) {
    const Matrix a = unit_rows(nn::randn(100, 16, 1.0, rng));
    const Matrix b = unit_rows(nn::randn(100, 16, 1.0, rng));
    mean += evaluate_retrieval(a, b, 5).image_to_text / seeds;
  }
  EXPECT_NEAR(mean, 0.05, 0.03);

  // all-equal similarities: optimistic ties put every partner first
  const Matrix flat = Matrix::Ones(4, 2);
  EXPECT_DOUBLE_EQ(evaluate_retrieval(flat, flat, 1).image_to_text, 1.0);
  EXPECT_THROW(evaluate_retrieval(s, s, 11), ClipError);
  EXPECT_THROW(evaluate_retrieval(s, s, 0), ClipError);
}

TEST(ClipTraining, FrozenLanguageModelStaysBitIdentical) {
  ClipConfig cfg;
  cfg.freeze_language_model = true;
  auto m = toy_model(cfg);
  const auto data = toy_data(12, 3);
  nn::ParamList lm_params;
  m.lm.collect_lm(lm_params, "lm");
  const auto before = nn::hash_params(lm_params);
  nn::ParamList enc_params;
  m.encoder.collect(enc_params, "enc");
  const auto enc_before = nn::hash_params(enc_params);
  nn::Adam opt(m.trainable(cfg), {1e-3});
  training_step(m, opt, data, {0, 1, 2, 3}, cfg);
  EXPECT_EQ(before, nn::hash_params(lm_params));
  EXPECT_NE(enc_before, nn::hash_params(enc_params));

  ClipConfig open = cfg;
  open.freeze_language_model = false;
  nn::Adam opt2(m.trainable(open), {1e-3});
  training_step(m, opt2, data, {0, 1, 2, 3}, open);
  EXPECT_NE(before, nn::hash_params(lm_params));
}

TEST(ClipTraining, LambdaZeroGivesClipOnly) {
  ClipConfig cfg;
  cfg.lambda_patdis = 0.0;
  const auto m = toy_model(cfg);
  const auto data = toy_data(8, 5);
  const auto l = compute_losses(m, data, {0, 1, 2, 3, 4}, cfg);
  EXPECT_EQ(l.total, l.loss_clip);
  EXPECT_GE(l.loss_patdis, 0.0);
  cfg.lambda_patdis = 0.5;
  const auto l2 = compute_losses(m, data, {0, 1, 2, 3, 4}, cfg);
  EXPECT_NEAR(l2.total, l2.loss_clip + 0.5 * l2.loss_patdis, 1e-12);
}

TEST(ClipTraining, SeededRunIsReproducibleAndLogged) {
  ClipConfig cfg;
  cfg.steps = 10;
  cfg.batch_size = 4;
  cfg.eval_every = 5;
  cfg.checkpoint_every = 5;
  const auto train = toy_data(16, 8);
  const auto val = toy_data(6, 9);
  const auto dir = std::filesystem::temp_directory_path() / "volrep_clip_test";
  std::filesystem::remove_all(dir);
  auto a = toy_model(cfg);
  auto b = toy_model(cfg);
  const auto ra = train_clip(a, train, val, cfg, dir);
  const auto rb = train_clip(b, train, val, cfg);
  ASSERT_EQ(ra.losses.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(ra.losses[i].total, rb.losses[i].total, 1e-6);
  ASSERT_EQ(ra.evals.size(), 2u);
  EXPECT_EQ(ra.evals[1].step, 10);
  EXPECT_TRUE(std::filesystem::exists(dir / "ckpt_5.bin"));
  EXPECT_TRUE(std::filesystem::exists(dir / "ckpt_10.bin"));
  EXPECT_EQ(ra.last_good_step, 10);

  std::ifstream log(dir / "log.jsonl");
  int lines = 0;
  for (std::string line; std::getline(log, line);) {
    EXPECT_TRUE(io::json::accept(line));
    ++lines;
  }
  EXPECT_EQ(lines, 12);

  // checkpoint round trip reproduces embeddings
  const auto loaded = ClipModel::load(dir / "ckpt_10.bin", vocab());
  EXPECT_EQ(embed_studies(a, val.studies), embed_studies(loaded, val.studies));
  EXPECT_EQ(embed_reports(a, val.reports), embed_reports(loaded, val.reports));
  std::filesystem::remove_all(dir);
}

TEST(ClipTraining, NonFiniteLossAbortsAndKeepsLastCheckpoint) {
  ClipConfig cfg;
  cfg.steps = 6;
  cfg.batch_size = 4;
  cfg.checkpoint_every = 2;
  cfg.eval_every = 0;
  const auto train = toy_data(12, 10);
  auto m = toy_model(cfg);
  const auto dir = std::filesystem::temp_directory_path() / "volrep_clip_abort";
  std::filesystem::remove_all(dir);
  m.tau.mutable_value()(0, 0) = std::nan("");
  const auto r = train_clip(m, train, {}, cfg, dir);
  EXPECT_TRUE(r.aborted);
  EXPECT_TRUE(r.losses.empty());
  EXPECT_FALSE(std::filesystem::exists(dir / "ckpt_2.bin"));
  std::filesystem::remove_all(dir);
}

TEST(ClipTraining, LearnsToyAlignment) {
  ClipConfig cfg;
  cfg.steps = 150;
  cfg.batch_size = 8;
  cfg.lr = 2e-3;
  cfg.eval_every = 150;
  const auto train = toy_data(40, 11);
  auto m = toy_model(cfg);
  const auto r = train_clip(m, train, {}, cfg);
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    first += r.losses[static_cast<std::size_t>(i)].loss_clip / 10;
    last += r.losses[r.losses.size() - 1 - static_cast<std::size_t>(i)].loss_clip / 10;
  }
  EXPECT_LT(last, first);
}
