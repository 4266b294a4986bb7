#pragma once

// Heads trained on frozen study embeddings: a multi-label diagnosis MLP and a
// three-class priority head under one of three losses.

#include "volrep/contrastive.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace volrep::heads {

using ad::Matrix;
using ad::Var;

class HeadError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Mann-Whitney AUROC with midranks (ties count one half). Absent when either
/// class is empty.
std::optional<double> auroc(const std::vector<double>& scores, const std::vector<int>& labels);

struct HeadConfig {
  int hidden = 256;
  long steps = 600;
  int batch_size = 64;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  double pos_weight_cap = 20.0;
  /// Ordinal-metric head: embedding width and margin per class step.
  int embed_dim = 16;
  double margin = 0.5;

  io::json to_json() const;
  static HeadConfig from_json(const io::json& j);
};

/// in -> hidden (ReLU) -> out.
class Mlp {
 public:
  Mlp() = default;
  Mlp(int in, int hidden, int out, std::mt19937_64& rng);
  Var operator()(const Var& x) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;
  int out_features() const { return fc2_.out_features(); }

 private:
  nn::Linear fc1_, fc2_;
};

struct DiagnosisHead {
  Mlp mlp;
  std::vector<double> pos_weight;
  /// Independent sigmoid probabilities, one column per diagnosis.
  Matrix predict(const Matrix& features) const;
};

/// labels: one row per study, 0/1 per diagnosis.
DiagnosisHead train_diagnosis_head(const Matrix& features, const Matrix& labels, const HeadConfig& cfg,
                                   std::vector<double>* loss_trace = nullptr);

/// Per-diagnosis AUROC of column d of probs against column d of labels.
std::vector<std::optional<double>> per_label_auroc(const Matrix& probs, const Matrix& labels);

enum class PriorityLoss { cross_entropy, binary_ordinal, ordinal_metric };
std::string to_string(PriorityLoss k);
/// Accepts ce|binord|ordmetric as well as the full names.
PriorityLoss priority_loss_from_string(const std::string& s);
inline constexpr std::array<PriorityLoss, 3> kPriorityLosses{PriorityLoss::cross_entropy, PriorityLoss::binary_ordinal,
                                                             PriorityLoss::ordinal_metric};

/// Two cumulative tasks (y > normal, y > medium), BCE summed over both.
Var binary_ordinal_loss(const Var& logits, const std::vector<int>& classes);

/// Cumulative decode: count of the two probabilities (y>normal, y>medium) above 0.5.
int binary_ordinal_decode(double p_above_normal, double p_above_medium);

using Confusion = std::array<std::array<long, 3>, 3>;  // rows truth, columns prediction

struct PriorityHead {
  PriorityLoss kind = PriorityLoss::cross_entropy;
  Mlp mlp;
  /// Ordinal-metric only: class centroids in embedding space.
  Matrix centroids;

  /// cross_entropy: class probabilities (3 cols); binary_ordinal: the two
  /// cumulative probabilities; ordinal_metric: negative centroid distances.
  Matrix scores(const Matrix& features) const;
  std::vector<int> predict(const Matrix& features) const;
};

PriorityHead train_priority_head(const Matrix& features, const std::vector<int>& classes, PriorityLoss kind,
                                 const HeadConfig& cfg, std::vector<double>* loss_trace = nullptr);

Confusion confusion_matrix(const std::vector<int>& truth, const std::vector<int>& predicted);
double accuracy(const Confusion& c);
/// Off-diagonal counts between two classes, both directions.
long confusions_between(const Confusion& c, int a, int b);

/// Embeds studies with a frozen contrastive model and checks its weights
/// are unchanged afterwards.
Matrix extract_frozen_features(const clip::ClipModel& m, const std::vector<model::StudyInput>& studies);

struct PredictionRecord {
  std::string study_id;
  std::string split;
  std::vector<double> probabilities;
  std::vector<double> priority_scores;
  io::json to_json() const;
};

}  // namespace volrep::heads
