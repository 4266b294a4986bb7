#pragma once

// Text-side models: a small transformer for sequence names, an LSTM for study
// names, and a causal report language model whose last hidden state (after a
// projection) is the report embedding.

#include "volrep/io.hpp"
#include "volrep/nn.hpp"
#include "volrep/vocabulary.hpp"

#include <memory>
#include <string>
#include <vector>

namespace volrep::text {

using ad::Matrix;
using ad::Var;

struct TextConfig {
  int width = 64;
  int depth = 2;
  int heads = 4;
  int name_length = 8;
  int context = 48;
  int shared_dim = 64;

  io::json to_json() const;
  static TextConfig from_json(const io::json& j);
};

using TokenIds = std::vector<std::int32_t>;

class SequenceNameEncoder {
 public:
  SequenceNameEncoder() = default;
  SequenceNameEncoder(std::shared_ptr<const Vocabulary> vocab, const TextConfig& cfg, std::mt19937_64& rng);

  /// Unit-norm rows, one per name. Empty names map to the unknown-sequence vector.
  Var encode(const std::vector<std::string>& names) const;
  std::vector<double> encode_one(const std::string& name) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;

 private:
  std::shared_ptr<const Vocabulary> vocab_;
  TextConfig cfg_;
  nn::Embedding tokens_, positions_;
  Var cls_, unknown_;
  nn::Transformer tf_;
  nn::Linear out_;
};

class StudyNameEncoder {
 public:
  StudyNameEncoder() = default;
  StudyNameEncoder(std::shared_ptr<const Vocabulary> vocab, const TextConfig& cfg, std::mt19937_64& rng);

  Var encode(const std::vector<std::string>& names) const;
  std::vector<double> encode_one(const std::string& name) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;

 private:
  std::shared_ptr<const Vocabulary> vocab_;
  TextConfig cfg_;
  nn::Embedding tokens_;
  nn::Lstm lstm_;
  nn::Linear out_;
  Var unknown_;
};

/// Decoder-only transformer over [bos, words..., eos]. The output head starts
/// at zero, so an untrained model predicts the uniform distribution.
class ReportLM {
 public:
  ReportLM() = default;
  ReportLM(int vocab_size, const TextConfig& cfg, std::mt19937_64& rng);

  /// bos + ids + eos, cut to the context length.
  TokenIds frame(const TokenIds& ids) const;
  /// Final hidden states of framed sequences packed row-wise.
  Var hidden(const std::vector<TokenIds>& framed, std::vector<ad::Segment>& segments) const;
  /// Next-token logits for every position but the last of each sequence.
  Var next_token_logits(const std::vector<TokenIds>& framed, std::vector<int>& targets) const;
  Var lm_loss(const std::vector<TokenIds>& framed) const;
  /// Unit-norm report embeddings (last-position state, projected).
  Var encode(const std::vector<TokenIds>& report_ids) const;

  int vocab_size() const { return vocab_size_; }
  const TextConfig& config() const { return cfg_; }
  void collect(nn::ParamList& out, const std::string& prefix) const;
  /// Language-model weights only (without the embedding projection).
  void collect_lm(nn::ParamList& out, const std::string& prefix) const;

 private:
  int vocab_size_ = 0;
  TextConfig cfg_;
  nn::Embedding tokens_, positions_;
  nn::Transformer tf_;
  nn::Linear head_;
  nn::Linear project_;
};

/// exp(mean next-token negative log likelihood) over framed reports.
double perplexity(const ReportLM& lm, const std::vector<TokenIds>& reports);
/// Total NLL and predicted-token count (for logging both sides of the link).
std::pair<double, long> total_nll(const ReportLM& lm, const std::vector<TokenIds>& reports);

struct LmTrainConfig {
  long steps = 1500;
  int batch_size = 16;
  double lr = 1e-3;
  double data_fraction = 1.0;
  std::uint64_t seed = 0;
  long eval_every = 100;
};

struct LmCurvePoint {
  long step = 0;
  double train_loss = 0;
  double val_nll = 0;
  double val_perplexity = 0;
};

struct LmTrainResult {
  ReportLM lm;
  std::vector<LmCurvePoint> curve;
  std::size_t train_reports = 0;
};

/// Fits G on the first ceil(fraction * n) reports of a seeded shuffle.
LmTrainResult pretrain_report_lm(int vocab_size, const TextConfig& text_cfg, const std::vector<TokenIds>& train,
                                 const std::vector<TokenIds>& val, const LmTrainConfig& cfg);

struct NamePretrainConfig {
  long steps = 300;
  int batch_size = 32;
  double lr = 1e-3;
  double temperature = 0.1;
  std::uint64_t seed = 0;
};

/// Symmetric InfoNCE between name embeddings and a linear map of the mean
/// foreground VQ latent of the same series. Returns the loss trace.
std::vector<double> pretrain_sequence_names(SequenceNameEncoder& enc, const std::vector<std::string>& names,
                                            const Matrix& mean_latents, const NamePretrainConfig& cfg);

}  // namespace volrep::text
