#pragma once

// Study/report contrastive training: symmetric CLIP between study and report
// embeddings, plus the patient-discrimination term over sequence embeddings.

#include "volrep/model.hpp"
#include "volrep/text_encoders.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace volrep::clip {

using ad::Matrix;
using ad::Var;

class ClipError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr double kMaxLogitScale = 100.0;
inline constexpr double kPatdisDiagonal = -10.0;

/// logits = S R^T min(exp(tau), 100); mean of the row-wise and column-wise
/// cross-entropies against the diagonal. tau is 1x1.
Var clip_loss(const Var& s, const Var& r, const Var& tau);

/// Row-softmax of (E E^T)/tau_p with the diagonal set to -10, mass on
/// same-study entries (diagonal included), summed over rows of
/// -log(mass) / (same-study count).
Var patient_discrimination_loss(const Var& e, const std::vector<int>& seq_map, double tau_p);

struct RetrievalScores {
  double image_to_text = 0;
  double text_to_image = 0;
};

/// Rank of the true partner = number of others scoring strictly higher, so
/// ties resolve in favour of the true partner.
RetrievalScores evaluate_retrieval(const Matrix& studies, const Matrix& reports, int k);

struct ClipConfig {
  double tau_init = 0.0;
  double tau_p = 0.1;
  double lambda_patdis = 1.0;
  int batch_size = 16;
  long steps = 3000;
  std::uint64_t seed = 0;
  bool freeze_language_model = false;
  double lr = 5e-4;
  /// Learning-rate multiplier for the pretrained language model.
  double lm_lr_scale = 0.2;
  /// Decoupled weight decay on every trainable tensor.
  double weight_decay = 0.0;
  long checkpoint_every = 500;
  long eval_every = 500;

  io::json to_json() const;
  static ClipConfig from_json(const io::json& j);
};

struct LossBreakdown {
  double loss_clip = 0;
  double loss_patdis = 0;
  double total = 0;
};

/// Everything trained in the contrastive stage.
struct ClipModel {
  model::HierarchicalEncoder encoder;
  text::ReportLM lm;
  Var tau;

  nn::ParamList params() const;
  /// Parameters updated under the given config (the LM body may be frozen).
  nn::ParamList trainable(const ClipConfig& cfg) const;
  Var report_embeddings(const std::vector<text::TokenIds>& reports) const;

  void save(const std::filesystem::path& path, const io::json& meta) const;
  /// Rebuilds from the stored configs, then loads weights.
  static ClipModel load(const std::filesystem::path& path, std::shared_ptr<const text::Vocabulary> vocab,
                        io::json* meta = nullptr);
};

ClipModel make_clip_model(std::shared_ptr<const text::Vocabulary> vocab, const model::ModelConfig& mc,
                          const text::TextConfig& tc, const ClipConfig& cfg, std::mt19937_64& rng);

struct ClipData {
  std::vector<model::StudyInput> studies;
  std::vector<text::TokenIds> reports;
};

LossBreakdown compute_losses(const ClipModel& m, const ClipData& data, const std::vector<std::size_t>& batch,
                             const ClipConfig& cfg, Var* total = nullptr);

/// One optimizer update on the given batch of study indices.
LossBreakdown training_step(ClipModel& m, nn::Adam& opt, const ClipData& data, const std::vector<std::size_t>& batch,
                            const ClipConfig& cfg);

struct EvalPoint {
  long step = 0;
  RetrievalScores top1, top5;
};

struct ClipTrainResult {
  std::vector<LossBreakdown> losses;
  std::vector<EvalPoint> evals;
  bool aborted = false;
  long last_good_step = 0;
};

/// Eval-mode embeddings of a whole data set.
Matrix embed_studies(const ClipModel& m, const std::vector<model::StudyInput>& studies);
Matrix embed_reports(const ClipModel& m, const std::vector<text::TokenIds>& reports);

/// Trains in place. Writes log.jsonl and ckpt_<step>.bin under out_dir when
/// given. A non-finite loss stops training and leaves the last checkpoint.
ClipTrainResult train_clip(ClipModel& m, const ClipData& train, const ClipData& val, const ClipConfig& cfg,
                           const std::optional<std::filesystem::path>& out_dir = std::nullopt);

}  // namespace volrep::clip
