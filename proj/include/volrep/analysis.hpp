#pragma once

// Post-hoc analyses: LIME over volume tokens, lesion localization, NPR,
// logit/label AUC matrices, silhouettes, TPR-disparity permutation tests,
// skewness, and the figure/summary writer.

#include "volrep/heads.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace volrep::analysis {

using ad::Matrix;

class AnalysisError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---- LIME ----------------------------------------------------------------

using Mask = std::vector<std::uint8_t>;  // 1 = token present
/// Scores a batch of masks (one target value per mask).
using MaskScorer = std::function<std::vector<double>(const std::vector<Mask>&)>;

struct LimeConfig {
  int n_samples = 512;
  std::uint64_t seed = 0;
  /// Kernel width; 0 selects m / 4.
  double sigma = 0.0;
  int top_k = 5;
  /// Use every one of the 2^m masks instead of sampling (m <= 20).
  bool exhaustive = false;
};

struct LimeExplanation {
  std::string study_id;
  int target = 0;
  std::vector<double> weights;
  double intercept = 0;
  /// Token indices by descending weight.
  std::vector<int> ranking;
  std::vector<int> top_k;
};

/// Weighted least squares of scores on masks, kernel exp(-hamming / sigma)
/// with hamming the number of ablated tokens.
LimeExplanation lime_token_importance(int n_tokens, const MaskScorer& scorer, const LimeConfig& cfg);

/// Diagnosis logit of a trained pipeline with ablated tokens swapped for the
/// latent of the all-zero token.
MaskScorer pipeline_scorer(const clip::ClipModel& model, const heads::DiagnosisHead& head,
                           const model::StudyInput& study, const Eigen::RowVectorXd& zero_latent, int target);

struct LocalizationCase {
  std::vector<int> ranking;
  /// Whether each token overlaps the ground-truth mask.
  std::vector<bool> in_mask;
};

struct LocalizationResult {
  double hit_rate = 0;
  /// Mean over cases of 1 - (1 - rho)^k, rho = fraction of tokens in the mask.
  double random_baseline = 0;
  int used = 0;
  int excluded = 0;
};

LocalizationResult localization_accuracy(const std::vector<LocalizationCase>& cases, int k);

// ---- neighbours and AUC structure -----------------------------------------

/// (mean neighbour positives / k) / (positives / total).
double npr_value(double mean_neighbour_positives, int k, double positives, double total);

struct NprEntry {
  int diagnosis = 0;
  std::optional<double> mean_all;
  std::optional<double> mean_positive;
  int prospective_positives = 0;
  double retrospective_rate = 0;
};

/// Cosine k-nearest retrospective neighbours of every prospective study.
std::vector<NprEntry> compute_npr(const Matrix& prospective, const Matrix& prospective_labels,
                                  const Matrix& retrospective, const Matrix& retrospective_labels, int k = 20);

struct AucMatrix {
  /// entry (i, j): AUROC of logit i against label j; absent cells are NaN.
  Matrix auc;
  Matrix label_correlation;
  /// Average-linkage leaf order on 1 - correlation.
  std::vector<int> order;
};

AucMatrix logit_label_auc_matrix(const Matrix& logits, const Matrix& labels);
/// Leaf order of average-linkage agglomerative clustering on a distance matrix.
std::vector<int> average_linkage_order(const Matrix& distance);

struct Silhouette {
  std::vector<double> values;
  double mean = 0;
};

Silhouette silhouette_report(const Matrix& embeddings, const std::vector<int>& labels);

// ---- fairness ---------------------------------------------------------------

/// Threshold maximizing TPR - FPR (ties: lowest threshold).
double youden_threshold(const std::vector<double>& scores, const std::vector<int>& labels);
/// Step-up adjusted p-values, same order as the input.
std::vector<double> benjamini_hochberg(const std::vector<double>& p);

struct DisparityTest {
  std::string attribute;
  std::vector<int> groups;
  std::vector<double> tpr;
  std::vector<int> excluded_groups;
  double disparity = 0;
  double p_value = 1;
  double corrected_p = 1;
};

/// max - min subgroup TPR at the threshold; p-value from permuting subgroup
/// labels, (1 + #{perm >= observed}) / (1 + n_perm).
DisparityTest tpr_disparity(const std::vector<double>& scores, const std::vector<int>& labels,
                            const std::vector<int>& groups, double threshold, int n_perm, std::uint64_t seed);

struct FairnessReport {
  std::vector<DisparityTest> tests;
  int n_perm = 0;
  std::uint64_t seed = 0;
};

/// One test per attribute, then Benjamini-Hochberg across them.
FairnessReport fairness_audit(const std::vector<double>& scores, const std::vector<int>& labels,
                              const std::vector<std::pair<std::string, std::vector<int>>>& attributes,
                              double threshold, int n_perm, std::uint64_t seed);

double fisher_pearson_skewness(const std::vector<double>& x);

// ---- output ---------------------------------------------------------------

/// Writes an SVG heatmap with optional row/column labels.
void write_heatmap_svg(const std::filesystem::path& path, const Matrix& values, const std::string& title,
                       const std::vector<std::string>& row_labels = {}, const std::vector<std::string>& col_labels = {});
void write_bars_svg(const std::filesystem::path& path, const std::vector<double>& values,
                    const std::vector<std::string>& labels, const std::string& title);

struct ReportInputs {
  io::json summary;
  std::vector<std::pair<std::string, Matrix>> heatmaps;
  std::vector<std::pair<std::string, std::pair<std::vector<double>, std::vector<std::string>>>> bars;
};

/// Writes every figure and summary.json under dir. Byte-stable for equal inputs.
void emit_report(const std::filesystem::path& dir, const ReportInputs& in);

}  // namespace volrep::analysis
