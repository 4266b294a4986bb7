#pragma once

// Token-level VQ-VAE. Every token is first moved to the canonical layout
// (thin axis last), so one set of weights serves all three bucket shapes.
// Encoder: two patchify convolutions (kernel == stride) and a linear map to
// one latent vector; the decoder mirrors it with a sigmoid output.

#include "volrep/io.hpp"
#include "volrep/nn.hpp"
#include "volrep/tokenizer.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace volrep::vq {

using ad::Matrix;
using ad::Var;
using tokens::Shape3;
using tokens::SubvolumeToken;

struct VqConfig {
  Shape3 patch{32, 32, 4};
  int codebook_size = 1024;
  int code_dim = 32;
  int channels1 = 16;
  int channels2 = 32;
  double beta = 0.25;
  bool permute = true;
  long steps = 20000;
  int batch_size = 32;
  double lr = 3e-4;
  std::uint64_t seed = 0;
  long reseed_every = 2000;
  long collapse_window = 1000;
  double collapse_fraction = 0.5;
  long eval_every = 500;
  /// Downstream models get quantized vectors when true, the continuous
  /// encoder output otherwise (which keeps lesion contrast better here).
  bool quantized_latents = false;

  io::json to_json() const;
  static VqConfig from_json(const io::json& j);
};

class VqError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct QuantizeResult {
  std::vector<int> indices;
  Matrix vectors;
};

/// Nearest codebook row per latent row by squared Euclidean distance,
/// scanning in index order with a strict comparison (ties -> lowest index).
QuantizeResult quantize(const Matrix& latents, const Matrix& codebook);

/// Flattened canonical voxels of a token of any bucket shape.
std::vector<float> canonical_voxels(const SubvolumeToken& t);

class VqModel {
 public:
  VqModel() = default;
  VqModel(const VqConfig& cfg, std::mt19937_64& rng);

  const VqConfig& config() const { return cfg_; }
  int voxels() const { return static_cast<int>(cfg_.patch.size()); }

  /// X is (B x voxels) of canonical tokens.
  Var encode(const Var& x) const;
  /// q is (B x code_dim); output (B x voxels) canonical, in (0,1).
  Var decode(const Var& q) const;

  Var& codebook() { return codebook_; }
  const Var& codebook() const { return codebook_; }
  std::vector<long>& usage() { return usage_; }
  const std::vector<long>& usage() const { return usage_; }
  void reset_usage();

  /// Eval-mode helpers on token lists.
  Matrix stack(const std::vector<SubvolumeToken>& tokens) const;
  Matrix encode_tokens(const std::vector<SubvolumeToken>& tokens) const;
  std::vector<double> vq_encode(const SubvolumeToken& token) const;
  /// Latents handed to downstream models (quantized or raw per config).
  Matrix downstream_latents(const std::vector<SubvolumeToken>& tokens) const;
  /// Reconstruction laid out in the requested bucket shape.
  SubvolumeToken vq_decode(const std::vector<double>& quantized, const Shape3& shape) const;

  nn::ParamList params() const;
  nn::ParamList encoder_params() const;
  void save(const std::filesystem::path& path, const io::json& extra = {}) const;
  static VqModel load(const std::filesystem::path& path);

 private:
  VqConfig cfg_;
  Shape3 grid1_, grid2_;
  nn::Linear enc1_, enc2_, enc3_, dec3_, dec2_, dec1_;
  Var codebook_;
  std::vector<long> usage_;
};

struct StepLog {
  long step = 0;
  double loss = 0, recon = 0, codebook = 0, commit = 0;
  int bucket = 0;
};

struct ValLog {
  long step = 0;
  double recon = 0;
  double quant = 0;
  double used_fraction = 0;
};

struct VqTrainResult {
  VqModel model;
  std::vector<StepLog> train;
  std::vector<ValLog> val;
  std::vector<io::json> events;
};

/// Training pool: native-layout tokens. Validation tokens are scored over all
/// six axis orders so invariance and reconstruction are measured together.
VqTrainResult train_vqvae(const std::vector<SubvolumeToken>& train_tokens,
                          const std::vector<SubvolumeToken>& val_tokens, const VqConfig& cfg);

ValLog validate(const VqModel& model, const std::vector<SubvolumeToken>& tokens);

void write_train_csv(const VqTrainResult& r, const std::filesystem::path& path);
void write_val_csv(const VqTrainResult& r, const std::filesystem::path& path);

struct TokenInvariance {
  double mean_cosine = 0;      // over the 15 view pairs
  double min_cosine = 0;
  double max_latent_distance = 0;
  double max_recon_difference = 0;
};

struct InvarianceReport {
  std::vector<TokenInvariance> per_token;
  double mean_cosine = 0;
  /// |recon(view v) - recon(view 0)| after restoring axes, for token 0.
  std::vector<std::vector<float>> difference_maps;
};

InvarianceReport orientation_invariance_report(const VqModel& model, const std::vector<SubvolumeToken>& tokens);

}  // namespace volrep::vq
