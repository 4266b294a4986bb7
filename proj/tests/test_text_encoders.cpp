#include "volrep/cohort.hpp"
#include "volrep/text_encoders.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace volrep;
using namespace volrep::text;

namespace {

std::shared_ptr<const Vocabulary> vocab() {
  static auto v = std::make_shared<const Vocabulary>(cohort::build_vocabulary(cohort::TemplateTable::standard(12)));
  return v;
}

TextConfig small() {
  TextConfig c;
  c.width = 24;
  c.depth = 1;
  c.heads = 2;
  c.context = 16;
  c.shared_dim = 12;
  return c;
}

double norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s / (norm(a) * norm(b));
}

std::vector<TokenIds> cohort_reports(int n, std::uint64_t seed, cohort::Split split) {
  cohort::CohortConfig cfg;
  cfg.n_studies = n;
  std::vector<TokenIds> out;
  for (const auto& s : cohort::generate_studies(cfg, seed)) {
    if (s.split == split) out.push_back(s.report.token_ids);
  }
  return out;
}

}  // namespace

TEST(TextEncoders, SequenceNameEncoder) {
  std::mt19937_64 rng(1);
  SequenceNameEncoder enc(vocab(), small(), rng);
  const auto a = enc.encode_one("AX T1");
  EXPECT_EQ(a.size(), 24u);
  EXPECT_NEAR(norm(a), 1.0, 1e-5);
  EXPECT_EQ(a, enc.encode_one("AX T1"));
  EXPECT_EQ(a, enc.encode_one("ax t1"));
  EXPECT_NE(a, enc.encode_one("SAG T1"));
  const auto empty = enc.encode_one("");
  EXPECT_NEAR(norm(empty), 1.0, 1e-5);
  EXPECT_EQ(empty, enc.encode_one("   "));
  EXPECT_NE(empty, a);
  // batched encoding equals one-at-a-time
  ad::NoGradGuard g;
  const auto batch = enc.encode({"SAG FLAIR", "", "AX T1"}).value();
  for (int c = 0; c < 24; ++c) {
    EXPECT_NEAR(batch(2, c), a[static_cast<std::size_t>(c)], 1e-12);
    EXPECT_NEAR(batch(1, c), empty[static_cast<std::size_t>(c)], 1e-12);
  }
}

TEST(TextEncoders, StudyNameEncoder) {
  std::mt19937_64 rng(2);
  StudyNameEncoder enc(vocab(), small(), rng);
  const std::vector<std::string> names{"MRI BRAIN WITH AND WITHOUT CONTRAST", "MRI BRAIN WITHOUT CONTRAST",
                                       "MRI HEAD STROKE PROTOCOL", "MRI BRAIN TUMOR PROTOCOL",
                                       "MRI BRAIN SEIZURE PROTOCOL"};
  std::vector<std::vector<double>> embs;
  for (const auto& n : names) {
    embs.push_back(enc.encode_one(n));
    EXPECT_NEAR(norm(embs.back()), 1.0, 1e-5);
    EXPECT_EQ(embs.back(), enc.encode_one(n));
  }
  for (std::size_t i = 0; i < embs.size(); ++i) {
    for (std::size_t j = i + 1; j < embs.size(); ++j) EXPECT_LT(cosine(embs[i], embs[j]), 1.0 - 1e-9);
  }
  const auto empty = enc.encode_one("");
  EXPECT_NEAR(norm(empty), 1.0, 1e-5);
  ad::NoGradGuard g;
  const auto batch = enc.encode({"", names[2]}).value();
  for (int c = 0; c < 24; ++c) {
    EXPECT_NEAR(batch(0, c), empty[static_cast<std::size_t>(c)], 1e-12);
    EXPECT_NEAR(batch(1, c), embs[2][static_cast<std::size_t>(c)], 1e-12);
  }
}

TEST(TextEncoders, UntrainedLmIsUniform) {
  std::mt19937_64 rng(3);
  ReportLM lm(vocab()->size(), small(), rng);
  const auto reports = cohort_reports(20, 1, cohort::Split::retrospective);
  EXPECT_NEAR(perplexity(lm, reports), vocab()->size(), 1e-6 * vocab()->size());
}

TEST(TextEncoders, LmDistributionsNormalize) {
  std::mt19937_64 rng(4);
  ReportLM lm(vocab()->size(), small(), rng);
  const auto reports = cohort_reports(20, 1, cohort::Split::retrospective);
  LmTrainConfig cfg;
  cfg.steps = 30;
  cfg.eval_every = 0;
  auto trained = pretrain_report_lm(vocab()->size(), small(), reports, {}, cfg);
  std::vector<int> targets;
  ad::NoGradGuard g;
  const Matrix p = ad::softmax_rows(trained.lm.next_token_logits({trained.lm.frame(reports[0])}, targets)).value();
  for (ad::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-5);
}

TEST(TextEncoders, ReportEncodingAndTruncation) {
  std::mt19937_64 rng(5);
  ReportLM lm(vocab()->size(), small(), rng);
  TokenIds longer;
  for (int i = 0; i < 40; ++i) longer.push_back(5 + i % 20);
  const TokenIds prefix(longer.begin(), longer.begin() + (small().context - 1));
  ad::NoGradGuard g;
  const Matrix a = lm.encode({longer}).value(), b = lm.encode({prefix}).value();
  EXPECT_EQ(a, b);
  EXPECT_NEAR(a.row(0).norm(), 1.0, 1e-9);
  const Matrix empty = lm.encode({TokenIds{}}).value();
  EXPECT_EQ(lm.frame({}), (TokenIds{Vocabulary::kBos, Vocabulary::kEos}));
  EXPECT_NEAR(empty.row(0).norm(), 1.0, 1e-9);
  EXPECT_EQ(lm.encode({prefix}).value(), b);
}

TEST(TextEncoders, MemorizesSmallCorpus) {
  auto reports = cohort_reports(40, 3, cohort::Split::retrospective);
  reports.resize(20);
  TextConfig tc = small();
  tc.context = 40;
  LmTrainConfig cfg;
  cfg.steps = 600;
  cfg.lr = 3e-3;
  cfg.eval_every = 200;
  const auto r = pretrain_report_lm(vocab()->size(), tc, reports, reports, cfg);
  const double ppl = perplexity(r.lm, reports);
  EXPECT_GT(ppl, 1.0);
  EXPECT_LT(ppl, 1.5);
  // lower NLL <=> lower perplexity along the logged curve
  for (std::size_t i = 1; i < r.curve.size(); ++i) {
    EXPECT_EQ(r.curve[i].val_nll < r.curve[i - 1].val_nll, r.curve[i].val_perplexity < r.curve[i - 1].val_perplexity);
  }
  EXPECT_LT(r.curve.back().val_perplexity, r.curve.front().val_perplexity);
}

TEST(TextEncoders, DataFractionSelectsSubset) {
  const auto reports = cohort_reports(40, 3, cohort::Split::retrospective);
  LmTrainConfig cfg;
  cfg.steps = 2;
  cfg.data_fraction = 0.1;
  EXPECT_EQ(pretrain_report_lm(vocab()->size(), small(), reports, {}, cfg).train_reports,
            static_cast<std::size_t>(std::ceil(0.1 * reports.size())));
  cfg.data_fraction = 0.0;
  EXPECT_THROW(pretrain_report_lm(vocab()->size(), small(), reports, {}, cfg), std::invalid_argument);
}

TEST(TextEncoders, NamePretrainingSeparatesPlanes) {
  // Latents carry the plane in their first three coordinates.
  const std::vector<std::string> planes{"AX", "COR", "SAG"};
  const std::vector<std::string> kinds{"T1", "T2", "FLAIR", "DWI", "T1 POST"};
  std::vector<std::string> names;
  std::mt19937_64 rng(6);
  std::normal_distribution<double> noise(0.0, 0.2);
  Matrix lat(15, 6);
  int r = 0;
  for (std::size_t p = 0; p < planes.size(); ++p) {
    for (std::size_t k = 0; k < kinds.size(); ++k, ++r) {
      names.push_back(planes[p] + " " + kinds[k]);
      for (int c = 0; c < 6; ++c) lat(r, c) = (c == static_cast<int>(p) ? 1.0 : 0.0) + noise(rng);
    }
  }
  SequenceNameEncoder enc(vocab(), small(), rng);
  NamePretrainConfig cfg;
  cfg.steps = 150;
  cfg.batch_size = 15;
  const auto trace = pretrain_sequence_names(enc, names, lat, cfg);
  EXPECT_LT(trace.back(), trace.front());
  double within = 0, across = 0;
  int nw = 0, na = 0;
  for (std::size_t i = 0; i < names.size(); ++i) {
    for (std::size_t j = i + 1; j < names.size(); ++j) {
      const double c = cosine(enc.encode_one(names[i]), enc.encode_one(names[j]));
      if (i / 5 == j / 5) {
        within += c;
        ++nw;
      } else {
        across += c;
        ++na;
      }
    }
  }
  EXPECT_GT(within / nw, across / na);
}
