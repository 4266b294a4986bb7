#pragma once

// Glue between stages: cohort splits, stage checkpoints, embedding tables,
// head archives and per-study explanations. Shared by the CLI and the
// acceptance runner.

#include "volrep/analysis.hpp"

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace volrep::pipeline {

using ad::Matrix;

struct CohortSplit {
  std::vector<cohort::StudyRecord> retrospective, prospective;
};

CohortSplit split_cohort(const std::vector<cohort::StudyRecord>& studies);
std::shared_ptr<const text::Vocabulary> load_vocabulary(const std::filesystem::path& cohort_dir);
std::shared_ptr<const text::Vocabulary> standard_vocabulary(int n_diagnoses);

// ---- VQ ----

/// Trains on retrospective tokens; validation uses the first val_tokens
/// prospective tokens.
vq::VqTrainResult train_vq_stage(const CohortSplit& split, const vq::VqConfig& cfg, int val_tokens = 192);
/// Held-out tokens used for validation and invariance reports.
std::vector<tokens::SubvolumeToken> heldout_tokens(const CohortSplit& split, int n);

// ---- language model ----

std::vector<text::TokenIds> report_ids(const std::vector<cohort::StudyRecord>& studies);
void save_lm(const std::filesystem::path& path, const text::ReportLM& lm, const io::json& meta = {});
text::ReportLM load_lm(const std::filesystem::path& path);

// ---- contrastive stage ----

struct Prepared {
  clip::ClipData data;
  std::vector<std::vector<model::TokenOrigin>> origins;
};

Prepared prepare_studies(const std::vector<cohort::StudyRecord>& studies, const vq::VqModel& vq);

/// Fresh contrastive model, optionally starting from a pretrained LM.
clip::ClipModel init_clip(std::shared_ptr<const text::Vocabulary> vocab, const model::ModelConfig& mc,
                          const text::TextConfig& tc, const text::ReportLM* pretrained, std::uint64_t seed);

/// E_sn pretraining on every training sequence name against the mean of its
/// token latents. Returns the loss trace.
std::vector<double> pretrain_names(clip::ClipModel& m, const clip::ClipData& train, const text::NamePretrainConfig& cfg);

// ---- embedding tables ----

struct EmbeddingTable {
  std::vector<std::string> study_ids;
  std::vector<std::string> splits;
  Matrix vectors;
};

EmbeddingTable embed_cohort(const clip::ClipModel& m, const std::vector<cohort::StudyRecord>& studies,
                            const vq::VqModel& vq);
/// path gets float64 rows; path + ".json" the index.
void write_embeddings(const std::filesystem::path& path, const EmbeddingTable& t);
EmbeddingTable read_embeddings(const std::filesystem::path& path);

// ---- labels and heads ----

Matrix label_matrix(const std::vector<cohort::StudyRecord>& studies);
std::vector<int> priority_classes(const std::vector<cohort::StudyRecord>& studies);
/// Rows of t in the order of the given studies; throws on a missing id.
Matrix rows_for(const EmbeddingTable& t, const std::vector<cohort::StudyRecord>& studies);

void save_diagnosis_head(const std::filesystem::path& path, const heads::DiagnosisHead& h, int in_features,
                         int hidden);
heads::DiagnosisHead load_diagnosis_head(const std::filesystem::path& path);

// ---- explanations ----

/// Downstream latent of the all-zero token.
Eigen::RowVectorXd zero_token_latent(const vq::VqModel& vq);

struct StudyExplanation {
  analysis::LimeExplanation lime;
  std::vector<model::TokenOrigin> origins;
  analysis::LocalizationCase localization;
};

StudyExplanation explain_study(const clip::ClipModel& m, const heads::DiagnosisHead& head, const vq::VqModel& vq,
                               const cohort::StudyRecord& study, int label, const analysis::LimeConfig& cfg);

io::json explanation_json(const StudyExplanation& e);

// ---- analyses ----

std::vector<heads::PredictionRecord> read_predictions(const std::filesystem::path& path);
void write_predictions(const std::filesystem::path& path, const std::vector<heads::PredictionRecord>& records);
/// Probabilities of the given studies in their order; throws on a missing id.
Matrix probabilities_for(const std::vector<heads::PredictionRecord>& records,
                         const std::vector<cohort::StudyRecord>& studies);

struct AnalysisInputs {
  std::vector<cohort::StudyRecord> studies;
  std::shared_ptr<const text::Vocabulary> vocab;
  /// npr
  const EmbeddingTable* features = nullptr;
  int k = 20;
  /// auc, fairness
  const std::vector<heads::PredictionRecord>* predictions = nullptr;
  int n_perm = 999;
  std::uint64_t seed = 0;
  /// silhouette
  const clip::ClipModel* model = nullptr;
};

inline constexpr const char* kAnalyses[] = {"npr", "auc", "fairness", "silhouette", "skew"};

/// Summary plus figures for one analysis.
analysis::ReportInputs run_analysis(const std::string& what, const AnalysisInputs& in);

}  // namespace volrep::pipeline
