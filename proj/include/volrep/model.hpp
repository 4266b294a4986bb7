#pragma once

// Two-level encoder over VQ token latents. ViT_seq sees
// [name embedding, register, tokens]; ViT_st sees
// [study-name embedding, register, sequence embeddings] with no positions,
// so the study vector does not depend on sequence order.

#include "volrep/cohort.hpp"
#include "volrep/text_encoders.hpp"
#include "volrep/tokenizer.hpp"
#include "volrep/vq.hpp"

#include <array>
#include <memory>
#include <string>
#include <vector>

namespace volrep::model {

using ad::Matrix;
using ad::Var;

struct ModelConfig {
  int width = 64;
  int depth = 2;
  int heads = 4;
  int pe_dims = 48;
  int code_dim = 32;
  int shared_dim = 64;

  io::json to_json() const;
  static ModelConfig from_json(const io::json& j);
};

class EncodeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SequenceInput {
  /// One row per foreground token (code_dim columns).
  Matrix latents;
  std::vector<std::array<int, 3>> grid_pos;
  tokens::Shape3 extents;
  std::string name;
};

struct StudyInput {
  std::string study_id;
  std::string study_name;
  std::vector<SequenceInput> sequences;
};

/// Where each foreground token of a study came from, for explanations.
struct TokenOrigin {
  int sequence = 0;
  std::array<int, 3> grid_pos{0, 0, 0};
  /// Diagnoses whose lesion voxels fall inside the token.
  std::vector<int> lesion_labels;
};

/// Tokenizes every sequence, runs the frozen VQ encoder and records token
/// origins. A sequence without foreground is an error.
StudyInput make_study_input(const cohort::StudyRecord& study, const vq::VqModel& vq, const tokens::PatchSpec& spec,
                            const tokens::BackgroundFilter& filter, std::vector<TokenOrigin>* origins = nullptr);

struct Encoded {
  Var studies;           // N x shared_dim, unit rows
  Var sequences;         // total sequences x width, unit rows
  std::vector<int> seq_map;  // parent study of each sequence row
};

class HierarchicalEncoder {
 public:
  HierarchicalEncoder() = default;
  HierarchicalEncoder(std::shared_ptr<const text::Vocabulary> vocab, const ModelConfig& cfg,
                      const text::TextConfig& text_cfg, std::mt19937_64& rng);

  Encoded encode(const std::vector<StudyInput>& studies) const;
  /// Unit-norm sequence embeddings only.
  Var encode_sequences(const std::vector<SequenceInput>& seqs) const;
  std::vector<double> encode_study(const StudyInput& study) const;
  /// P_patdis: bias-free linear map, then unit norm.
  Var patient_projection(const Var& seq_embeddings) const;
  /// The same map without normalization (exposes linearity).
  Var patient_projection_raw(const Var& seq_embeddings) const;

  const ModelConfig& config() const { return cfg_; }
  const text::SequenceNameEncoder& sequence_names() const { return seq_names_; }
  text::SequenceNameEncoder& sequence_names() { return seq_names_; }
  void collect(nn::ParamList& out, const std::string& prefix) const;

 private:
  Var sequence_hidden(const std::vector<const SequenceInput*>& seqs) const;

  ModelConfig cfg_;
  text::SequenceNameEncoder seq_names_;
  text::StudyNameEncoder study_names_;
  nn::Linear token_in_;
  Var seq_register_, study_register_;
  nn::Transformer vit_seq_, vit_st_;
  nn::Linear study_out_;
  nn::Linear patdis_;
};

}  // namespace volrep::model
