#include "volrep/heads.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace volrep::heads {

namespace {

Matrix take_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<ad::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<ad::Index>(i)) = m.row(static_cast<ad::Index>(rows[i]));
  return out;
}

// Cycles through a shuffled order, reshuffling when it runs out.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed) : order_(n), batch_(std::min(batch, n)), rng_(seed) {
    std::iota(order_.begin(), order_.end(), 0);
    cursor_ = n;
  }
  std::vector<std::size_t> next() {
    if (cursor_ + batch_ > order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    std::vector<std::size_t> b(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                               order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_));
    cursor_ += batch_;
    return b;
  }
  std::mt19937_64& rng() { return rng_; }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t cursor_;
  std::mt19937_64 rng_;
};

Matrix sigmoid(const Matrix& z) { return z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); }); }

Matrix eval_forward(const Mlp& mlp, const Matrix& x) {
  ad::NoGradGuard g;
  return mlp(ad::constant(x)).value();
}

}  // namespace

std::optional<double> auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw HeadError("scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) rank[idx[t]] = mid;
    i = j + 1;
  }
  double pos = 0, neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i]) {
      pos += 1;
      rank_sum += rank[i];
    } else {
      neg += 1;
    }
  }
  if (pos == 0 || neg == 0) return std::nullopt;
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

io::json HeadConfig::to_json() const {
  return {{"hidden", hidden}, {"steps", steps},   {"batch_size", batch_size}, {"lr", lr},
          {"seed", seed},     {"pos_weight_cap", pos_weight_cap}, {"embed_dim", embed_dim}, {"margin", margin}};
}

HeadConfig HeadConfig::from_json(const io::json& j) {
  HeadConfig c;
  c.hidden = j.value("hidden", c.hidden);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
  c.pos_weight_cap = j.value("pos_weight_cap", c.pos_weight_cap);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.margin = j.value("margin", c.margin);
  return c;
}

Mlp::Mlp(int in, int hidden, int out, std::mt19937_64& rng) : fc1_(in, hidden, rng), fc2_(hidden, out, rng) {}

Var Mlp::operator()(const Var& x) const { return fc2_(ad::relu(fc1_(x))); }

void Mlp::collect(nn::ParamList& out, const std::string& prefix) const {
  fc1_.collect(out, prefix + ".fc1");
  fc2_.collect(out, prefix + ".fc2");
}

Matrix DiagnosisHead::predict(const Matrix& features) const { return sigmoid(eval_forward(mlp, features)); }

DiagnosisHead train_diagnosis_head(const Matrix& features, const Matrix& labels, const HeadConfig& cfg,
                                   std::vector<double>* loss_trace) {
  if (features.rows() != labels.rows() || features.rows() == 0) throw HeadError("need one label row per feature row");
  std::mt19937_64 rng(cfg.seed);
  DiagnosisHead head;
  head.mlp = Mlp(static_cast<int>(features.cols()), cfg.hidden, static_cast<int>(labels.cols()), rng);
  Matrix pw(1, labels.cols());
  for (ad::Index d = 0; d < labels.cols(); ++d) {
    const double pos = labels.col(d).sum();
    const double neg = static_cast<double>(labels.rows()) - pos;
    pw(0, d) = pos > 0 ? std::min(cfg.pos_weight_cap, neg / pos) : 1.0;
    head.pos_weight.push_back(pw(0, d));
  }
  nn::ParamList params;
  head.mlp.collect(params, "diag");
  nn::Adam opt(params, {cfg.lr});
  BatchSampler sampler(static_cast<std::size_t>(features.rows()), static_cast<std::size_t>(cfg.batch_size), cfg.seed + 1);
  for (long step = 0; step < cfg.steps; ++step) {
    const auto b = sampler.next();
    const Var loss = ad::bce_with_logits(head.mlp(ad::constant(take_rows(features, b))), take_rows(labels, b), pw);
    opt.zero_grad();
    ad::backward(loss);
    opt.step();
    if (loss_trace) loss_trace->push_back(loss.item());
  }
  return head;
}

std::vector<std::optional<double>> per_label_auroc(const Matrix& probs, const Matrix& labels) {
  if (probs.rows() != labels.rows() || probs.cols() != labels.cols()) throw HeadError("prediction and label shapes differ");
  std::vector<std::optional<double>> out;
  for (ad::Index d = 0; d < probs.cols(); ++d) {
    std::vector<double> s(static_cast<std::size_t>(probs.rows()));
    std::vector<int> y(static_cast<std::size_t>(probs.rows()));
    for (ad::Index i = 0; i < probs.rows(); ++i) {
      s[static_cast<std::size_t>(i)] = probs(i, d);
      y[static_cast<std::size_t>(i)] = labels(i, d) > 0.5 ? 1 : 0;
    }
    out.push_back(auroc(s, y));
  }
  return out;
}

std::string to_string(PriorityLoss k) {
  switch (k) {
    case PriorityLoss::cross_entropy: return "cross_entropy";
    case PriorityLoss::binary_ordinal: return "binary_ordinal";
    case PriorityLoss::ordinal_metric: return "ordinal_metric";
  }
  return "?";
}

PriorityLoss priority_loss_from_string(const std::string& s) {
  if (s == "ce" || s == "cross_entropy") return PriorityLoss::cross_entropy;
  if (s == "binord" || s == "binary_ordinal") return PriorityLoss::binary_ordinal;
  if (s == "ordmetric" || s == "ordinal_metric") return PriorityLoss::ordinal_metric;
  throw HeadError("unknown priority loss '" + s + "'");
}

Var binary_ordinal_loss(const Var& logits, const std::vector<int>& classes) {
  if (logits.cols() != 2 || logits.rows() != static_cast<ad::Index>(classes.size())) {
    throw HeadError("binary-ordinal loss needs two logits per row");
  }
  Matrix t(logits.rows(), 2);
  for (std::size_t r = 0; r < classes.size(); ++r) {
    t(static_cast<ad::Index>(r), 0) = classes[r] > 0 ? 1.0 : 0.0;
    t(static_cast<ad::Index>(r), 1) = classes[r] > 1 ? 1.0 : 0.0;
  }
  // mean over both columns, times two = summed binary tasks
  return ad::scale(ad::bce_with_logits(logits, t, Matrix::Ones(1, 2)), 2.0);
}

int binary_ordinal_decode(double p_above_normal, double p_above_medium) {
  return (p_above_normal > 0.5 ? 1 : 0) + (p_above_medium > 0.5 ? 1 : 0);
}

Matrix PriorityHead::scores(const Matrix& features) const {
  const Matrix z = eval_forward(mlp, features);
  switch (kind) {
    case PriorityLoss::cross_entropy: {
      Matrix p(z.rows(), z.cols());
      for (ad::Index i = 0; i < z.rows(); ++i) {
        const auto e = (z.row(i).array() - z.row(i).maxCoeff()).exp();
        p.row(i) = e / e.sum();
      }
      return p;
    }
    case PriorityLoss::binary_ordinal: return sigmoid(z);
    case PriorityLoss::ordinal_metric: {
      Matrix s(z.rows(), 3);
      for (ad::Index i = 0; i < z.rows(); ++i) {
        for (ad::Index c = 0; c < 3; ++c) {
          s(i, c) = std::isfinite(centroids(c, 0)) ? -(z.row(i) - centroids.row(c)).norm()
                                                   : -std::numeric_limits<double>::infinity();
        }
      }
      return s;
    }
  }
  throw HeadError("unknown priority loss");
}

std::vector<int> PriorityHead::predict(const Matrix& features) const {
  const Matrix s = scores(features);
  std::vector<int> out;
  for (ad::Index i = 0; i < s.rows(); ++i) {
    if (kind == PriorityLoss::binary_ordinal) {
      out.push_back(binary_ordinal_decode(s(i, 0), s(i, 1)));
    } else {
      ad::Index best = 0;
      s.row(i).maxCoeff(&best);
      out.push_back(static_cast<int>(best));
    }
  }
  return out;
}

PriorityHead train_priority_head(const Matrix& features, const std::vector<int>& classes, PriorityLoss kind,
                                 const HeadConfig& cfg, std::vector<double>* loss_trace) {
  if (static_cast<ad::Index>(classes.size()) != features.rows() || classes.empty()) throw HeadError("need one class per row");
  for (int c : classes) {
    if (c < 0 || c > 2) throw HeadError("priority classes are 0, 1, 2");
  }
  std::mt19937_64 rng(cfg.seed);
  PriorityHead head;
  head.kind = kind;
  const int out = kind == PriorityLoss::cross_entropy ? 3 : kind == PriorityLoss::binary_ordinal ? 2 : cfg.embed_dim;
  head.mlp = Mlp(static_cast<int>(features.cols()), cfg.hidden, out, rng);
  nn::ParamList params;
  head.mlp.collect(params, "priority");
  nn::Adam opt(params, {cfg.lr});
  BatchSampler sampler(classes.size(), static_cast<std::size_t>(cfg.batch_size), cfg.seed + 1);

  for (long step = 0; step < cfg.steps; ++step) {
    const auto b = sampler.next();
    const Var z = head.mlp(ad::constant(take_rows(features, b)));
    Var loss;
    if (kind == PriorityLoss::cross_entropy) {
      std::vector<int> y;
      for (auto i : b) y.push_back(classes[i]);
      loss = ad::cross_entropy(z, y);
    } else if (kind == PriorityLoss::binary_ordinal) {
      std::vector<int> y;
      for (auto i : b) y.push_back(classes[i]);
      loss = binary_ordinal_loss(z, y);
    } else {
      // triplets inside the batch: a random same-class positive and a random
      // other-class negative per anchor; margin grows with class distance
      std::vector<std::int32_t> anchors, positives, negatives;
      std::vector<double> margins;
      for (std::size_t a = 0; a < b.size(); ++a) {
        std::vector<std::int32_t> same, other;
        for (std::size_t j = 0; j < b.size(); ++j) {
          if (j == a) continue;
          (classes[b[j]] == classes[b[a]] ? same : other).push_back(static_cast<std::int32_t>(j));
        }
        if (same.empty() || other.empty()) continue;
        const auto p = same[std::uniform_int_distribution<std::size_t>(0, same.size() - 1)(sampler.rng())];
        const auto n = other[std::uniform_int_distribution<std::size_t>(0, other.size() - 1)(sampler.rng())];
        anchors.push_back(static_cast<std::int32_t>(a));
        positives.push_back(p);
        negatives.push_back(n);
        margins.push_back(cfg.margin * std::abs(classes[b[a]] - classes[b[static_cast<std::size_t>(n)]]));
      }
      if (anchors.empty()) continue;
      const Var za = ad::gather_rows(z, anchors);
      const Var d_ap = ad::row_sum(ad::square(ad::sub(za, ad::gather_rows(z, positives))));
      const Var d_an = ad::row_sum(ad::square(ad::sub(za, ad::gather_rows(z, negatives))));
      Matrix m(static_cast<ad::Index>(margins.size()), 1);
      for (std::size_t i = 0; i < margins.size(); ++i) m(static_cast<ad::Index>(i), 0) = margins[i];
      loss = ad::mean(ad::relu(ad::add(ad::sub(d_ap, d_an), ad::constant(m))));
    }
    opt.zero_grad();
    ad::backward(loss);
    opt.step();
    if (loss_trace) loss_trace->push_back(loss.item());
  }

  if (kind == PriorityLoss::ordinal_metric) {
    const Matrix e = eval_forward(head.mlp, features);
    head.centroids = Matrix::Constant(3, e.cols(), std::numeric_limits<double>::quiet_NaN());
    for (int c = 0; c < 3; ++c) {
      Matrix sum = Matrix::Zero(1, e.cols());
      double n = 0;
      for (std::size_t i = 0; i < classes.size(); ++i) {
        if (classes[i] != c) continue;
        sum += e.row(static_cast<ad::Index>(i));
        n += 1;
      }
      if (n > 0) head.centroids.row(c) = sum / n;
    }
  }
  return head;
}

Confusion confusion_matrix(const std::vector<int>& truth, const std::vector<int>& predicted) {
  if (truth.size() != predicted.size()) throw HeadError("truth and predictions differ in length");
  Confusion c{};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] > 2 || predicted[i] < 0 || predicted[i] > 2) throw HeadError("class out of range");
    ++c[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(predicted[i])];
  }
  return c;
}

double accuracy(const Confusion& c) {
  long right = 0, total = 0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      total += c[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      if (i == j) right += c[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
  }
  return total ? static_cast<double>(right) / static_cast<double>(total) : 0.0;
}

long confusions_between(const Confusion& c, int a, int b) {
  return c[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] + c[static_cast<std::size_t>(b)][static_cast<std::size_t>(a)];
}

Matrix extract_frozen_features(const clip::ClipModel& m, const std::vector<model::StudyInput>& studies) {
  const auto before = nn::hash_params(m.params());
  Matrix f = clip::embed_studies(m, studies);
  if (nn::hash_params(m.params()) != before) throw HeadError("backbone weights changed during feature extraction");
  return f;
}

io::json PredictionRecord::to_json() const {
  return {{"study_id", study_id}, {"split", split}, {"probabilities", probabilities}, {"priority_scores", priority_scores}};
}

}  // namespace volrep::heads
