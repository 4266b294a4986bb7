#include "volrep/text_encoders.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace volrep::text {

namespace {

nn::TransformerConfig tf_config(const TextConfig& c) { return {c.width, c.depth, c.heads, 2}; }

TokenIds name_tokens(const Vocabulary& vocab, const std::string& name, int max_len) {
  TokenIds ids;
  for (auto id : vocab.encode(name)) {
    if (id != Vocabulary::kNewline) ids.push_back(id);
  }
  if (static_cast<int>(ids.size()) > max_len) ids.resize(static_cast<std::size_t>(max_len));
  return ids;
}

std::vector<double> row_vector(const Matrix& m) { return std::vector<double>(m.data(), m.data() + m.size()); }

// Symmetric InfoNCE with fixed temperature over matched rows of a and b.
Var info_nce(const Var& a, const Var& b, double temperature) {
  const Var logits = ad::scale(ad::matmul(a, ad::transpose(b)), 1.0 / temperature);
  std::vector<int> diag(static_cast<std::size_t>(a.rows()));
  std::iota(diag.begin(), diag.end(), 0);
  return ad::scale(ad::add(ad::cross_entropy(logits, diag), ad::cross_entropy(ad::transpose(logits), diag)), 0.5);
}

}  // namespace

io::json TextConfig::to_json() const {
  return {{"width", width}, {"depth", depth}, {"heads", heads}, {"name_length", name_length}, {"context", context},
          {"shared_dim", shared_dim}};
}

TextConfig TextConfig::from_json(const io::json& j) {
  TextConfig c;
  c.width = j.value("width", c.width);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.name_length = j.value("name_length", c.name_length);
  c.context = j.value("context", c.context);
  c.shared_dim = j.value("shared_dim", c.shared_dim);
  return c;
}

// ---- sequence names -----------------------------------------------------

SequenceNameEncoder::SequenceNameEncoder(std::shared_ptr<const Vocabulary> vocab, const TextConfig& cfg,
                                         std::mt19937_64& rng)
    : vocab_(std::move(vocab)), cfg_(cfg) {
  tokens_ = nn::Embedding(vocab_->size(), cfg.width, rng, 0.1);
  positions_ = nn::Embedding(cfg.name_length + 1, cfg.width, rng, 0.1);
  cls_ = ad::parameter(nn::randn(1, cfg.width, 0.1, rng));
  unknown_ = ad::parameter(nn::randn(1, cfg.width, 1.0, rng));
  tf_ = nn::Transformer(tf_config(cfg), rng);
  out_ = nn::Linear(cfg.width, cfg.width, rng);
}

Var SequenceNameEncoder::encode(const std::vector<std::string>& names) const {
  if (names.empty()) throw std::invalid_argument("no names to encode");
  std::vector<ad::RowPick> picks;
  std::vector<std::int32_t> ids, pos;
  std::vector<ad::Segment> segments;
  std::vector<int> empty_rows;
  std::vector<std::int32_t> cls_rows;
  std::vector<int> owner;  // row of the output for each non-empty name
  ad::Index row = 0;
  for (std::size_t n = 0; n < names.size(); ++n) {
    const auto toks = name_tokens(*vocab_, names[n], cfg_.name_length);
    if (toks.empty()) {
      empty_rows.push_back(static_cast<int>(n));
      continue;
    }
    segments.push_back({row, static_cast<ad::Index>(toks.size() + 1)});
    cls_rows.push_back(static_cast<std::int32_t>(row));
    owner.push_back(static_cast<int>(n));
    picks.push_back({1, 0});
    pos.push_back(0);
    for (std::size_t t = 0; t < toks.size(); ++t) {
      picks.push_back({0, static_cast<std::int32_t>(ids.size())});
      ids.push_back(toks[t]);
      pos.push_back(static_cast<std::int32_t>(t + 1));
    }
    row += static_cast<ad::Index>(toks.size() + 1);
  }
  std::vector<Var> parts;
  std::vector<ad::RowPick> order(names.size());
  if (!owner.empty()) {
    const Var tok_rows = ids.empty() ? ad::constant(Matrix::Zero(1, cfg_.width)) : tokens_(ids);
    Var x = ad::gather_rows({tok_rows, cls_}, picks);
    x = ad::add(x, positions_(pos));
    const Var h = tf_(x, segments);
    parts.push_back(out_(ad::gather_rows(h, cls_rows)));
    for (std::size_t i = 0; i < owner.size(); ++i) order[static_cast<std::size_t>(owner[i])] = {0, static_cast<std::int32_t>(i)};
  }
  if (!empty_rows.empty()) {
    const auto src = static_cast<std::int32_t>(parts.size());
    parts.push_back(unknown_);
    for (int n : empty_rows) order[static_cast<std::size_t>(n)] = {src, 0};
  }
  return ad::l2_normalize_rows(ad::gather_rows(parts, order));
}

std::vector<double> SequenceNameEncoder::encode_one(const std::string& name) const {
  ad::NoGradGuard g;
  return row_vector(encode({name}).value());
}

void SequenceNameEncoder::collect(nn::ParamList& out, const std::string& prefix) const {
  tokens_.collect(out, prefix + ".tokens");
  positions_.collect(out, prefix + ".positions");
  out.push_back({prefix + ".cls", cls_});
  out.push_back({prefix + ".unknown", unknown_});
  tf_.collect(out, prefix + ".tf");
  out_.collect(out, prefix + ".out");
}

// ---- study names --------------------------------------------------------

StudyNameEncoder::StudyNameEncoder(std::shared_ptr<const Vocabulary> vocab, const TextConfig& cfg, std::mt19937_64& rng)
    : vocab_(std::move(vocab)), cfg_(cfg) {
  tokens_ = nn::Embedding(vocab_->size(), cfg.width, rng, 0.3);
  lstm_ = nn::Lstm(cfg.width, cfg.width, rng);
  out_ = nn::Linear(cfg.width, cfg.width, rng);
  unknown_ = ad::parameter(nn::randn(1, cfg.width, 1.0, rng));
}

Var StudyNameEncoder::encode(const std::vector<std::string>& names) const {
  if (names.empty()) throw std::invalid_argument("no names to encode");
  std::vector<TokenIds> toks;
  std::vector<int> lengths;
  int longest = 0;
  for (const auto& n : names) {
    toks.push_back(name_tokens(*vocab_, n, cfg_.name_length));
    lengths.push_back(static_cast<int>(toks.back().size()));
    longest = std::max(longest, lengths.back());
  }
  std::vector<Var> steps;
  for (int t = 0; t < longest; ++t) {
    TokenIds col;
    for (const auto& s : toks) col.push_back(t < static_cast<int>(s.size()) ? s[static_cast<std::size_t>(t)] : Vocabulary::kPad);
    steps.push_back(tokens_(col));
  }
  std::vector<ad::RowPick> order;
  std::vector<Var> parts;
  if (longest > 0) {
    parts.push_back(out_(lstm_.final_hidden(steps, lengths)));
  } else {
    parts.push_back(unknown_);
  }
  parts.push_back(unknown_);
  for (std::size_t i = 0; i < names.size(); ++i) {
    order.push_back(lengths[i] > 0 ? ad::RowPick{0, static_cast<std::int32_t>(i)} : ad::RowPick{1, 0});
  }
  return ad::l2_normalize_rows(ad::gather_rows(parts, order));
}

std::vector<double> StudyNameEncoder::encode_one(const std::string& name) const {
  ad::NoGradGuard g;
  return row_vector(encode({name}).value());
}

void StudyNameEncoder::collect(nn::ParamList& out, const std::string& prefix) const {
  tokens_.collect(out, prefix + ".tokens");
  lstm_.collect(out, prefix + ".lstm");
  out_.collect(out, prefix + ".out");
  out.push_back({prefix + ".unknown", unknown_});
}

// ---- report language model ----------------------------------------------

ReportLM::ReportLM(int vocab_size, const TextConfig& cfg, std::mt19937_64& rng) : vocab_size_(vocab_size), cfg_(cfg) {
  tokens_ = nn::Embedding(vocab_size, cfg.width, rng, 0.1);
  positions_ = nn::Embedding(cfg.context, cfg.width, rng, 0.1);
  tf_ = nn::Transformer(tf_config(cfg), rng);
  head_ = nn::Linear(cfg.width, vocab_size, rng);
  head_.weight.mutable_value().setZero();
  project_ = nn::Linear(cfg.width, cfg.shared_dim, rng);
}

TokenIds ReportLM::frame(const TokenIds& ids) const {
  TokenIds out{Vocabulary::kBos};
  out.insert(out.end(), ids.begin(), ids.end());
  out.push_back(Vocabulary::kEos);
  if (static_cast<int>(out.size()) > cfg_.context) out.resize(static_cast<std::size_t>(cfg_.context));
  return out;
}

Var ReportLM::hidden(const std::vector<TokenIds>& framed, std::vector<ad::Segment>& segments) const {
  TokenIds ids, pos;
  segments.clear();
  for (const auto& f : framed) {
    if (f.empty() || static_cast<int>(f.size()) > cfg_.context) throw std::invalid_argument("framed report has bad length");
    segments.push_back({static_cast<ad::Index>(ids.size()), static_cast<ad::Index>(f.size())});
    for (std::size_t t = 0; t < f.size(); ++t) {
      if (f[t] < 0 || f[t] >= vocab_size_) throw std::out_of_range("token id outside the vocabulary");
      ids.push_back(f[t]);
      pos.push_back(static_cast<std::int32_t>(t));
    }
  }
  return tf_(ad::add(tokens_(ids), positions_(pos)), segments, true);
}

Var ReportLM::next_token_logits(const std::vector<TokenIds>& framed, std::vector<int>& targets) const {
  std::vector<ad::Segment> segments;
  const Var h = hidden(framed, segments);
  std::vector<std::int32_t> rows;
  targets.clear();
  for (std::size_t s = 0; s < framed.size(); ++s) {
    for (std::size_t t = 0; t + 1 < framed[s].size(); ++t) {
      rows.push_back(static_cast<std::int32_t>(segments[s].start + static_cast<ad::Index>(t)));
      targets.push_back(framed[s][t + 1]);
    }
  }
  if (rows.empty()) throw std::invalid_argument("no next-token targets");
  return head_(ad::gather_rows(h, rows));
}

Var ReportLM::lm_loss(const std::vector<TokenIds>& framed) const {
  std::vector<int> targets;
  const Var logits = next_token_logits(framed, targets);
  return ad::cross_entropy(logits, targets);
}

Var ReportLM::encode(const std::vector<TokenIds>& report_ids) const {
  std::vector<TokenIds> framed;
  for (const auto& r : report_ids) framed.push_back(frame(r));
  std::vector<ad::Segment> segments;
  const Var h = hidden(framed, segments);
  std::vector<std::int32_t> last;
  for (const auto& s : segments) last.push_back(static_cast<std::int32_t>(s.start + s.length - 1));
  return ad::l2_normalize_rows(project_(ad::gather_rows(h, last)));
}

void ReportLM::collect_lm(nn::ParamList& out, const std::string& prefix) const {
  tokens_.collect(out, prefix + ".tokens");
  positions_.collect(out, prefix + ".positions");
  tf_.collect(out, prefix + ".tf");
  head_.collect(out, prefix + ".head");
}

void ReportLM::collect(nn::ParamList& out, const std::string& prefix) const {
  collect_lm(out, prefix);
  project_.collect(out, prefix + ".project");
}

std::pair<double, long> total_nll(const ReportLM& lm, const std::vector<TokenIds>& reports) {
  ad::NoGradGuard g;
  double nll = 0.0;
  long count = 0;
  constexpr std::size_t chunk = 64;
  for (std::size_t s = 0; s < reports.size(); s += chunk) {
    std::vector<TokenIds> framed;
    for (std::size_t i = s; i < std::min(reports.size(), s + chunk); ++i) framed.push_back(lm.frame(reports[i]));
    std::vector<int> targets;
    const Matrix logp = ad::log_softmax_rows(lm.next_token_logits(framed, targets)).value();
    for (std::size_t r = 0; r < targets.size(); ++r) nll -= logp(static_cast<ad::Index>(r), targets[r]);
    count += static_cast<long>(targets.size());
  }
  return {nll, count};
}

double perplexity(const ReportLM& lm, const std::vector<TokenIds>& reports) {
  const auto [nll, count] = total_nll(lm, reports);
  if (count == 0) throw std::invalid_argument("perplexity of an empty corpus");
  return std::exp(nll / static_cast<double>(count));
}

LmTrainResult pretrain_report_lm(int vocab_size, const TextConfig& text_cfg, const std::vector<TokenIds>& train,
                                 const std::vector<TokenIds>& val, const LmTrainConfig& cfg) {
  if (train.empty()) throw std::invalid_argument("empty LM corpus");
  if (cfg.data_fraction <= 0.0 || cfg.data_fraction > 1.0) throw std::invalid_argument("data fraction must be in (0,1]");
  std::mt19937_64 rng(cfg.seed);
  LmTrainResult result{ReportLM(vocab_size, text_cfg, rng), {}, 0};
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = static_cast<std::size_t>(std::ceil(cfg.data_fraction * static_cast<double>(train.size()) - 1e-9));
  order.resize(std::max<std::size_t>(1, n));
  result.train_reports = order.size();

  nn::ParamList params;
  result.lm.collect_lm(params, "lm");
  nn::Adam opt(params, {cfg.lr});
  std::uniform_int_distribution<std::size_t> pick(0, order.size() - 1);
  auto evaluate = [&](long step, double train_loss) {
    LmCurvePoint p{step, train_loss, 0.0, 0.0};
    if (!val.empty()) {
      const auto [nll, count] = total_nll(result.lm, val);
      p.val_nll = nll / static_cast<double>(count);
      p.val_perplexity = std::exp(p.val_nll);
    }
    result.curve.push_back(p);
  };
  evaluate(0, std::log(static_cast<double>(vocab_size)));
  for (long step = 1; step <= cfg.steps; ++step) {
    std::vector<TokenIds> batch;
    for (int b = 0; b < cfg.batch_size; ++b) batch.push_back(result.lm.frame(train[order[pick(rng)]]));
    const Var loss = result.lm.lm_loss(batch);
    opt.zero_grad();
    ad::backward(loss);
    opt.step();
    if ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps) evaluate(step, loss.item());
  }
  return result;
}

std::vector<double> pretrain_sequence_names(SequenceNameEncoder& enc, const std::vector<std::string>& names,
                                            const Matrix& mean_latents, const NamePretrainConfig& cfg) {
  if (names.size() != static_cast<std::size_t>(mean_latents.rows()) || names.size() < 2) {
    throw std::invalid_argument("need at least two (name, latent) pairs");
  }
  std::mt19937_64 rng(cfg.seed);
  const int width = static_cast<int>(enc.encode_one(names.front()).size());
  nn::Linear latent_map(static_cast<int>(mean_latents.cols()), width, rng);
  nn::ParamList params;
  enc.collect(params, "esn");
  latent_map.collect(params, "latent_map");
  nn::Adam opt(params, {cfg.lr});
  std::uniform_int_distribution<std::size_t> pick(0, names.size() - 1);
  std::vector<double> trace;
  for (long step = 0; step < cfg.steps; ++step) {
    std::vector<std::string> batch_names;
    std::vector<std::int32_t> rows;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto i = pick(rng);
      batch_names.push_back(names[i]);
      rows.push_back(static_cast<std::int32_t>(i));
    }
    const Var lat = ad::l2_normalize_rows(latent_map(ad::gather_rows(ad::constant(mean_latents), rows)));
    const Var loss = info_nce(enc.encode(batch_names), lat, cfg.temperature);
    opt.zero_grad();
    ad::backward(loss);
    opt.step();
    trace.push_back(loss.item());
  }
  return trace;
}

}  // namespace volrep::text
