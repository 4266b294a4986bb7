#pragma once

#include "volrep/autodiff.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace volrep::nn {

using ad::Matrix;
using ad::Var;

struct NamedParam {
  std::string name;
  Var var;
};
using ParamList = std::vector<NamedParam>;

Matrix randn(ad::Index rows, ad::Index cols, double stddev, std::mt19937_64& rng);

/// y = x W + b with W stored (in x out).
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, std::mt19937_64& rng, bool with_bias = true, double init_gain = 1.0);

  Var operator()(const Var& x) const;
  void collect(ParamList& out, const std::string& prefix) const;

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  Var weight;
  Var bias;

 private:
  int in_ = 0;
  int out_ = 0;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int dim);
  Var operator()(const Var& x) const;
  void collect(ParamList& out, const std::string& prefix) const;

  Var gamma;
  Var beta;
};

class Embedding {
 public:
  Embedding() = default;
  Embedding(int count, int dim, std::mt19937_64& rng, double stddev = 0.02);
  Var operator()(const std::vector<std::int32_t>& ids) const;
  void collect(ParamList& out, const std::string& prefix) const;

  Var table;
};

struct TransformerConfig {
  int width = 64;
  int depth = 2;
  int heads = 4;
  int mlp_ratio = 2;
};

/// Pre-norm block: x + Attn(LN(x)), then x + MLP(LN(x)).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(const TransformerConfig& cfg, std::mt19937_64& rng);
  Var operator()(const Var& x, const std::vector<ad::Segment>& segments, bool causal) const;
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  int heads_ = 1;
  LayerNorm ln1_, ln2_;
  Linear q_, k_, v_, proj_, fc1_, fc2_;
};

/// A stack of blocks followed by a final LayerNorm. Rows of the input are
/// positions; segments delimit independent sequences packed into one matrix.
class Transformer {
 public:
  Transformer() = default;
  Transformer(const TransformerConfig& cfg, std::mt19937_64& rng);
  Var operator()(const Var& x, const std::vector<ad::Segment>& segments, bool causal = false) const;
  void collect(ParamList& out, const std::string& prefix) const;
  const TransformerConfig& config() const { return cfg_; }

 private:
  TransformerConfig cfg_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_;
};

/// Single-layer LSTM run over a padded batch. Steps past a row's length leave
/// its state unchanged.
class Lstm {
 public:
  Lstm() = default;
  Lstm(int in, int hidden, std::mt19937_64& rng);
  /// inputs[t] is (batch x in); lengths[b] is the number of valid steps of row b.
  Var final_hidden(const std::vector<Var>& inputs, const std::vector<int>& lengths) const;
  void collect(ParamList& out, const std::string& prefix) const;
  int hidden() const { return hidden_; }

 private:
  int hidden_ = 0;
  Linear input_;
  Linear recurrent_;
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

class Adam {
 public:
  Adam(ParamList params, AdamConfig cfg);
  void zero_grad();
  /// Applies one update; parameters without a gradient are skipped.
  void step();
  /// Sets the learning-rate multiplier of parameters whose name starts with prefix.
  void set_lr_scale(const std::string& prefix, double scale);
  const ParamList& params() const { return params_; }
  long steps() const { return t_; }

 private:
  ParamList params_;
  AdamConfig cfg_;
  std::vector<Matrix> m_, v_;
  std::vector<double> lr_scale_;
  long t_ = 0;
};

/// FNV-1a over the raw bytes of every parameter value, in list order.
std::uint64_t hash_params(const ParamList& params);
std::size_t count_params(const ParamList& params);

}  // namespace volrep::nn
