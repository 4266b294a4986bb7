#include "volrep/heads.hpp"

#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace volrep;
using namespace volrep::heads;

namespace {

double pair_count_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!y[i] || y[j]) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

// Classes from thresholds on one direction of a random feature space.
struct OrdinalToy {
  Matrix x;
  std::vector<int> y;
};

OrdinalToy ordinal_toy(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, 1);
  OrdinalToy t;
  t.x = Matrix(n, 8);
  for (int i = 0; i < n; ++i) {
    const int c = i % 3;
    const double level = (c - 1) * 2.0 + std::uniform_real_distribution<double>(-0.6, 0.6)(rng);
    for (int k = 0; k < 8; ++k) t.x(i, k) = 0.5 * g(rng);
    t.x(i, 0) = level;
    t.x(i, 1) += 0.3 * level;
    t.y.push_back(c);
  }
  return t;
}

}  // namespace

TEST(Auroc, MatchesPairCountOracleIncludingTies) {
  std::mt19937_64 rng(1);
  int checked = 0;
  for (int trial = 0; trial < 3000; ++trial) {
    const int n = std::uniform_int_distribution<int>(1, 20)(rng);
    const int levels = std::uniform_int_distribution<int>(1, 6)(rng);
    std::vector<double> s;
    std::vector<int> y;
    for (int i = 0; i < n; ++i) {
      s.push_back(std::uniform_int_distribution<int>(0, levels - 1)(rng) * 0.25);
      y.push_back(std::uniform_int_distribution<int>(0, 1)(rng));
    }
    const auto a = auroc(s, y);
    const bool both = std::count(y.begin(), y.end(), 1) > 0 && std::count(y.begin(), y.end(), 0) > 0;
    ASSERT_EQ(a.has_value(), both);
    if (!both) continue;
    EXPECT_NEAR(*a, pair_count_auc(s, y), 1e-12);
    ++checked;
  }
  EXPECT_GT(checked, 2000);
}

TEST(Auroc, HandListedSetAndInvariances) {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8, 0.4, 0.2};
  const std::vector<int> y{0, 0, 1, 1, 1, 0};
  // positives {0.35, 0.8, 0.4} vs negatives {0.1, 0.4, 0.2}: 7.5 of 9 pairs
  EXPECT_NEAR(*auroc(s, y), 7.5 / 9.0, 1e-12);
  std::vector<double> t;
  for (double v : s) t.push_back(std::exp(3 * v) - 2);
  EXPECT_NEAR(*auroc(t, y), 7.5 / 9.0, 1e-12);
  EXPECT_FALSE(auroc({0.1, 0.2}, {0, 0}).has_value());
  EXPECT_FALSE(auroc({0.1, 0.2}, {1, 1}).has_value());
  EXPECT_THROW((void)auroc({0.1}, {0, 1}), HeadError);
}

TEST(DiagnosisHead, SeparableAndShuffled) {
  std::mt19937_64 rng(2);
  const int n = 300, d = 3;
  Matrix x = nn::randn(n, 10, 1.0, rng);
  Matrix y = Matrix::Zero(n, d);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < d; ++k) y(i, k) = x(i, k) > 0.3 ? 1.0 : 0.0;
  }
  HeadConfig cfg;
  cfg.steps = 400;
  const auto head = train_diagnosis_head(x.topRows(200), y.topRows(200), cfg);
  const auto probs = head.predict(x.bottomRows(100));
  for (ad::Index i = 0; i < probs.rows(); ++i) {
    for (ad::Index k = 0; k < probs.cols(); ++k) {
      EXPECT_GE(probs(i, k), 0.0);
      EXPECT_LE(probs(i, k), 1.0);
    }
  }
  for (const auto& a : per_label_auroc(probs, y.bottomRows(100))) EXPECT_GT(*a, 0.97);

  // labels unrelated to features
  Matrix noise_y = Matrix::Zero(n, d);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < d; ++k) noise_y(i, k) = std::bernoulli_distribution(0.3)(rng) ? 1.0 : 0.0;
  }
  const auto null_head = train_diagnosis_head(x.topRows(200), noise_y.topRows(200), cfg);
  double mean = 0;
  for (const auto& a : per_label_auroc(null_head.predict(x.bottomRows(100)), noise_y.bottomRows(100))) mean += *a / d;
  EXPECT_NEAR(mean, 0.5, 0.1);

  // a label with no positives in evaluation is absent, not zero
  Matrix eval_y = y.bottomRows(100);
  eval_y.col(1).setZero();
  EXPECT_FALSE(per_label_auroc(probs, eval_y)[1].has_value());
}

TEST(DiagnosisHead, PositiveWeightCap) {
  std::mt19937_64 rng(3);
  Matrix x = nn::randn(100, 4, 1.0, rng);
  Matrix y = Matrix::Zero(100, 2);
  y(0, 0) = 1;  // 99:1 -> capped
  for (int i = 0; i < 50; ++i) y(i, 1) = 1;
  HeadConfig cfg;
  cfg.steps = 1;
  const auto head = train_diagnosis_head(x, y, cfg);
  EXPECT_DOUBLE_EQ(head.pos_weight[0], 20.0);
  EXPECT_DOUBLE_EQ(head.pos_weight[1], 1.0);
}

TEST(PriorityHead, BinaryOrdinalDecode) {
  EXPECT_EQ(binary_ordinal_decode(0.9, 0.2), 1);
  EXPECT_EQ(binary_ordinal_decode(0.1, 0.2), 0);
  EXPECT_EQ(binary_ordinal_decode(0.9, 0.8), 2);
  // non-decreasing in each cumulative probability
  for (double a = 0; a <= 1.0; a += 0.05) {
    for (double b = 0; b <= 1.0; b += 0.05) {
      EXPECT_LE(binary_ordinal_decode(a, b), binary_ordinal_decode(std::min(1.0, a + 0.1), b));
      EXPECT_LE(binary_ordinal_decode(a, b), binary_ordinal_decode(a, std::min(1.0, b + 0.1)));
    }
  }
}

TEST(PriorityHead, BinaryOrdinalLossValueAndGradient) {
  // zero logits: two binary tasks at ln 2 each
  EXPECT_NEAR(binary_ordinal_loss(ad::constant(Matrix::Zero(3, 2)), {0, 1, 2}).item(), 2 * std::log(2.0), 1e-12);
  // class 2 with large positive logits costs nearly nothing
  EXPECT_LT(binary_ordinal_loss(ad::constant(Matrix::Constant(1, 2, 30.0)), {2}).item(), 1e-12);
  std::mt19937_64 rng(11);
  const Var z = ad::parameter(nn::randn(6, 2, 1.5, rng));
  const std::vector<int> y{0, 1, 2, 2, 0, 1};
  EXPECT_LT(volrep::testing::gradcheck([&] { return binary_ordinal_loss(z, y); }, {z}), 1e-6);
  EXPECT_THROW(binary_ordinal_loss(ad::constant(Matrix::Zero(2, 3)), {0, 1}), HeadError);
}

TEST(PriorityHead, ConfusionMatrices) {
  const auto c = confusion_matrix({0, 1, 2, 2}, {0, 1, 2, 2});
  EXPECT_EQ(c[0][0], 1);
  EXPECT_EQ(c[2][2], 2);
  EXPECT_DOUBLE_EQ(accuracy(c), 1.0);
  const auto d = confusion_matrix({0, 0, 2, 1}, {2, 1, 0, 0});
  EXPECT_EQ(confusions_between(d, 0, 2), 2);
  EXPECT_EQ(confusions_between(d, 0, 1), 2);
  EXPECT_THROW(confusion_matrix({0, 3}, {0, 1}), HeadError);
}

TEST(PriorityHead, AllLossesLearnSeparableOrdinalData) {
  const auto train = ordinal_toy(300, 4);
  const auto test = ordinal_toy(150, 5);
  HeadConfig cfg;
  cfg.steps = 400;
  for (auto kind : kPriorityLosses) {
    const auto head = train_priority_head(train.x, train.y, kind, cfg);
    const auto pred = head.predict(test.x);
    EXPECT_GE(accuracy(confusion_matrix(test.y, pred)), 0.95) << to_string(kind);
    EXPECT_EQ(pred, head.predict(test.x));
    // batch and single-row predictions agree
    for (ad::Index i = 0; i < 5; ++i) EXPECT_EQ(head.predict(test.x.row(i))[0], pred[static_cast<std::size_t>(i)]);
    if (kind == PriorityLoss::cross_entropy) {
      const auto p = head.scores(test.x);
      for (ad::Index i = 0; i < p.rows(); ++i) EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-9);
    }
  }
  EXPECT_EQ(priority_loss_from_string("ordmetric"), PriorityLoss::ordinal_metric);
  EXPECT_THROW(priority_loss_from_string("hinge"), HeadError);
  EXPECT_THROW(train_priority_head(train.x, std::vector<int>(300, 3), PriorityLoss::cross_entropy, cfg), HeadError);
}

TEST(FrozenFeatures, BackboneUnchangedAndDeterministic) {
  auto vocab = std::make_shared<const text::Vocabulary>(cohort::build_vocabulary(cohort::TemplateTable::standard(12)));
  model::ModelConfig mc;
  mc.width = 16;
  mc.depth = 1;
  mc.heads = 2;
  mc.pe_dims = 12;
  mc.code_dim = 4;
  mc.shared_dim = 8;
  text::TextConfig tc;
  tc.width = 16;
  tc.depth = 1;
  tc.heads = 2;
  tc.shared_dim = 8;
  std::mt19937_64 rng(5);
  const auto m = clip::make_clip_model(vocab, mc, tc, {}, rng);
  std::vector<model::StudyInput> studies(3);
  for (int s = 0; s < 3; ++s) {
    studies[static_cast<std::size_t>(s)].study_id = "S" + std::to_string(s);
    for (int q = 0; q < 2; ++q) {
      model::SequenceInput si;
      si.latents = nn::randn(2, 4, 1.0, rng);
      si.grid_pos = {{0, 0, 0}, {1, 0, 0}};
      si.extents = {2, 1, 1};
      si.name = "AX T1";
      studies[static_cast<std::size_t>(s)].sequences.push_back(si);
    }
  }
  const auto before = nn::hash_params(m.params());
  const auto a = extract_frozen_features(m, studies);
  EXPECT_EQ(a, extract_frozen_features(m, studies));
  EXPECT_EQ(before, nn::hash_params(m.params()));
  EXPECT_EQ(a.rows(), 3);
}
