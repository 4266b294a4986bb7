#include "volrep/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace volrep::nn {

Matrix randn(ad::Index rows, ad::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Linear::Linear(int in, int out, std::mt19937_64& rng, bool with_bias, double init_gain) : in_(in), out_(out) {
  weight = ad::parameter(randn(in, out, init_gain / std::sqrt(static_cast<double>(in)), rng));
  if (with_bias) bias = ad::parameter(Matrix::Zero(1, out));
}

Var Linear::operator()(const Var& x) const {
  Var y = ad::matmul(x, weight);
  return bias ? ad::add_rowvec(y, bias) : y;
}

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  if (bias) out.push_back({prefix + ".bias", bias});
}

LayerNorm::LayerNorm(int dim) {
  gamma = ad::parameter(Matrix::Ones(1, dim));
  beta = ad::parameter(Matrix::Zero(1, dim));
}

Var LayerNorm::operator()(const Var& x) const { return ad::layer_norm(x, gamma, beta); }

void LayerNorm::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

Embedding::Embedding(int count, int dim, std::mt19937_64& rng, double stddev) {
  table = ad::parameter(randn(count, dim, stddev, rng));
}

Var Embedding::operator()(const std::vector<std::int32_t>& ids) const { return ad::gather_rows(table, ids); }

void Embedding::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".table", table});
}

TransformerBlock::TransformerBlock(const TransformerConfig& cfg, std::mt19937_64& rng)
    : heads_(cfg.heads), ln1_(cfg.width), ln2_(cfg.width) {
  const int w = cfg.width;
  // Residual-branch outputs start small so a fresh stack is close to identity.
  const double out_gain = 1.0 / std::sqrt(2.0 * cfg.depth);
  q_ = Linear(w, w, rng);
  k_ = Linear(w, w, rng);
  v_ = Linear(w, w, rng);
  proj_ = Linear(w, w, rng, true, out_gain);
  fc1_ = Linear(w, w * cfg.mlp_ratio, rng);
  fc2_ = Linear(w * cfg.mlp_ratio, w, rng, true, out_gain);
}

Var TransformerBlock::operator()(const Var& x, const std::vector<ad::Segment>& segments, bool causal) const {
  Var h = ln1_(x);
  Var attn = ad::segmented_attention(q_(h), k_(h), v_(h), segments, heads_, causal);
  Var x1 = ad::add(x, proj_(attn));
  Var m = fc2_(ad::gelu(fc1_(ln2_(x1))));
  return ad::add(x1, m);
}

void TransformerBlock::collect(ParamList& out, const std::string& prefix) const {
  ln1_.collect(out, prefix + ".ln1");
  q_.collect(out, prefix + ".q");
  k_.collect(out, prefix + ".k");
  v_.collect(out, prefix + ".v");
  proj_.collect(out, prefix + ".proj");
  ln2_.collect(out, prefix + ".ln2");
  fc1_.collect(out, prefix + ".fc1");
  fc2_.collect(out, prefix + ".fc2");
}

Transformer::Transformer(const TransformerConfig& cfg, std::mt19937_64& rng) : cfg_(cfg), final_(cfg.width) {
  if (cfg.width % cfg.heads != 0) throw std::invalid_argument("transformer width must divide by heads");
  for (int i = 0; i < cfg.depth; ++i) blocks_.emplace_back(cfg, rng);
}

Var Transformer::operator()(const Var& x, const std::vector<ad::Segment>& segments, bool causal) const {
  Var h = x;
  for (const auto& b : blocks_) h = b(h, segments, causal);
  return final_(h);
}

void Transformer::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, prefix + ".block" + std::to_string(i));
  final_.collect(out, prefix + ".ln_f");
}

Lstm::Lstm(int in, int hidden, std::mt19937_64& rng)
    : hidden_(hidden), input_(in, 4 * hidden, rng), recurrent_(hidden, 4 * hidden, rng, false) {
  // forget-gate bias starts at 1
  input_.bias.mutable_value().middleCols(hidden, hidden).setOnes();
}

Var Lstm::final_hidden(const std::vector<Var>& inputs, const std::vector<int>& lengths) const {
  const auto batch = static_cast<ad::Index>(lengths.size());
  Var h = ad::constant(Matrix::Zero(batch, hidden_));
  Var c = ad::constant(Matrix::Zero(batch, hidden_));
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Var gates = ad::add(input_(inputs[t]), recurrent_(h));
    Var i = ad::sigmoid(ad::slice_cols(gates, 0, hidden_));
    Var f = ad::sigmoid(ad::slice_cols(gates, hidden_, hidden_));
    Var g = ad::tanh(ad::slice_cols(gates, 2 * hidden_, hidden_));
    Var o = ad::sigmoid(ad::slice_cols(gates, 3 * hidden_, hidden_));
    Var c_new = ad::add(ad::mul(f, c), ad::mul(i, g));
    Var h_new = ad::mul(o, ad::tanh(c_new));

    Matrix keep(batch, 1);
    for (ad::Index b = 0; b < batch; ++b) keep(b, 0) = static_cast<int>(t) < lengths[b] ? 1.0 : 0.0;
    Var keep_v = ad::constant(keep);
    Var drop_v = ad::constant((1.0 - keep.array()).matrix());
    c = ad::add(ad::mul_colvec(c_new, keep_v), ad::mul_colvec(c, drop_v));
    h = ad::add(ad::mul_colvec(h_new, keep_v), ad::mul_colvec(h, drop_v));
  }
  return h;
}

void Lstm::collect(ParamList& out, const std::string& prefix) const {
  input_.collect(out, prefix + ".input");
  recurrent_.collect(out, prefix + ".recurrent");
}

Adam::Adam(ParamList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
    v_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
    lr_scale_.push_back(1.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

void Adam::set_lr_scale(const std::string& prefix, double scale) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name.rfind(prefix, 0) == 0) lr_scale_[i] = scale;
  }
}

void Adam::step() {
  ++t_;
  double clip = 1.0;
  if (cfg_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& p : params_) {
      if (p.var.has_grad()) sq += p.var.grad().squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) clip = cfg_.clip_norm / norm;
  }
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].var;
    if (!p.has_grad()) continue;
    Matrix g = p.grad() * clip;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    const double lr = cfg_.lr * lr_scale_[i];
    Matrix update = (m_[i] / bc1).array() / ((v_[i] / bc2).array().sqrt() + cfg_.eps);
    if (cfg_.weight_decay > 0.0) update += cfg_.weight_decay * p.value();
    p.mutable_value() -= lr * update;
  }
}

std::uint64_t hash_params(const ParamList& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.var.value().data());
    const auto n = static_cast<std::size_t>(p.var.value().size()) * sizeof(double);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

std::size_t count_params(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += static_cast<std::size_t>(p.var.value().size());
  return n;
}

}  // namespace volrep::nn
