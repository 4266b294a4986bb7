#include "volrep/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace volrep::clip {

Var clip_loss(const Var& s, const Var& r, const Var& tau) {
  if (s.rows() == 0 || r.rows() == 0) throw ClipError("clip loss needs a non-empty batch");
  if (s.rows() != r.rows() || s.cols() != r.cols()) throw ClipError("study and report features must have equal shapes");
  const double raw = std::exp(tau.item());
  // past the clamp the scale is a constant and tau gets no gradient
  const Var logit_scale = raw > kMaxLogitScale ? ad::scalar(kMaxLogitScale) : ad::exp(tau);
  const Var logits = ad::scale_by(ad::matmul(s, ad::transpose(r)), logit_scale);
  std::vector<int> diag(static_cast<std::size_t>(s.rows()));
  std::iota(diag.begin(), diag.end(), 0);
  return ad::scale(ad::add(ad::cross_entropy(logits, diag), ad::cross_entropy(ad::transpose(logits), diag)), 0.5);
}

Var patient_discrimination_loss(const Var& e, const std::vector<int>& seq_map, double tau_p) {
  const auto n = e.rows();
  if (n < 2) throw ClipError("patient discrimination needs at least two sequences");
  if (static_cast<ad::Index>(seq_map.size()) != n) throw ClipError("seq_map length must match the embeddings");
  if (tau_p <= 0) throw ClipError("tau_p must be positive");
  Matrix mask(n, n), inv_count(n, 1);
  for (ad::Index i = 0; i < n; ++i) {
    double c = 0;
    for (ad::Index j = 0; j < n; ++j) {
      mask(i, j) = seq_map[static_cast<std::size_t>(i)] == seq_map[static_cast<std::size_t>(j)] ? 1.0 : 0.0;
      c += mask(i, j);
    }
    inv_count(i, 0) = 1.0 / c;
  }
  const Var logits = ad::fill_diagonal(ad::scale(ad::matmul(e, ad::transpose(e)), 1.0 / tau_p), kPatdisDiagonal);
  const Var agg = ad::row_sum(ad::mul(ad::softmax_rows(logits), ad::constant(mask)));
  return ad::neg(ad::sum(ad::mul(ad::log(agg), ad::constant(inv_count))));
}

RetrievalScores evaluate_retrieval(const Matrix& studies, const Matrix& reports, int k) {
  const auto n = studies.rows();
  if (n == 0 || reports.rows() != n || studies.cols() != reports.cols()) throw ClipError("retrieval sets must be matched");
  if (k < 1 || k > n) throw ClipError("k must be in [1, N]");
  const Matrix sim = studies * reports.transpose();
  RetrievalScores out;
  for (ad::Index i = 0; i < n; ++i) {
    int row_rank = 0, col_rank = 0;
    for (ad::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      if (sim(i, j) > sim(i, i)) ++row_rank;
      if (sim(j, i) > sim(i, i)) ++col_rank;
    }
    if (row_rank < k) out.image_to_text += 1;
    if (col_rank < k) out.text_to_image += 1;
  }
  out.image_to_text /= static_cast<double>(n);
  out.text_to_image /= static_cast<double>(n);
  return out;
}

io::json ClipConfig::to_json() const {
  return {{"tau_init", tau_init},
          {"tau_p", tau_p},
          {"lambda_patdis", lambda_patdis},
          {"batch_size", batch_size},
          {"steps", steps},
          {"seed", seed},
          {"freeze_language_model", freeze_language_model},
          {"lr", lr},
          {"lm_lr_scale", lm_lr_scale},
          {"weight_decay", weight_decay},
          {"checkpoint_every", checkpoint_every},
          {"eval_every", eval_every}};
}

ClipConfig ClipConfig::from_json(const io::json& j) {
  ClipConfig c;
  c.tau_init = j.value("tau_init", c.tau_init);
  c.tau_p = j.value("tau_p", c.tau_p);
  c.lambda_patdis = j.value("lambda_patdis", c.lambda_patdis);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.seed = j.value("seed", c.seed);
  c.freeze_language_model = j.value("freeze_language_model", c.freeze_language_model);
  c.lr = j.value("lr", c.lr);
  c.lm_lr_scale = j.value("lm_lr_scale", c.lm_lr_scale);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.eval_every = j.value("eval_every", c.eval_every);
  if (c.tau_p <= 0) throw ClipError("tau_p must be positive");
  if (c.lambda_patdis < 0) throw ClipError("lambda_patdis must be non-negative");
  return c;
}

nn::ParamList ClipModel::params() const {
  nn::ParamList out;
  encoder.collect(out, "enc");
  lm.collect(out, "lm");
  out.push_back({"tau", tau});
  return out;
}

nn::ParamList ClipModel::trainable(const ClipConfig& cfg) const {
  nn::ParamList out;
  encoder.collect(out, "enc");
  if (cfg.freeze_language_model) {
    // the projection into the shared space is not part of the language model
    nn::ParamList all;
    lm.collect(all, "lm");
    for (auto& p : all) {
      if (p.name.rfind("lm.project", 0) == 0) out.push_back(p);
    }
  } else {
    lm.collect(out, "lm");
  }
  out.push_back({"tau", tau});
  return out;
}

Var ClipModel::report_embeddings(const std::vector<text::TokenIds>& reports) const { return lm.encode(reports); }

void ClipModel::save(const std::filesystem::path& path, const io::json& meta) const {
  io::json m = meta;
  m["kind"] = "clip";
  m["model"] = encoder.config().to_json();
  m["text"] = lm.config().to_json();
  m["vocab_size"] = lm.vocab_size();
  io::save_archive(path, m, params());
}

ClipModel ClipModel::load(const std::filesystem::path& path, std::shared_ptr<const text::Vocabulary> vocab,
                          io::json* meta) {
  const auto archive = io::load_archive(path);
  if (archive.meta.value("kind", std::string()) != "clip") throw io::IoError(path.string() + " is not a contrastive checkpoint");
  if (archive.meta.at("vocab_size").get<int>() != vocab->size()) throw io::IoError("vocabulary does not match the checkpoint");
  std::mt19937_64 rng(0);
  auto m = make_clip_model(std::move(vocab), model::ModelConfig::from_json(archive.meta.at("model")),
                           text::TextConfig::from_json(archive.meta.at("text")), ClipConfig{}, rng);
  io::assign_params(archive, m.params());
  if (meta) *meta = archive.meta;
  return m;
}

ClipModel make_clip_model(std::shared_ptr<const text::Vocabulary> vocab, const model::ModelConfig& mc,
                          const text::TextConfig& tc, const ClipConfig& cfg, std::mt19937_64& rng) {
  ClipModel m;
  const int vsize = vocab->size();
  m.encoder = model::HierarchicalEncoder(vocab, mc, tc, rng);
  m.lm = text::ReportLM(vsize, tc, rng);
  Matrix t(1, 1);
  t(0, 0) = cfg.tau_init;
  m.tau = ad::parameter(t);
  return m;
}

LossBreakdown compute_losses(const ClipModel& m, const ClipData& data, const std::vector<std::size_t>& batch,
                             const ClipConfig& cfg, Var* total) {
  std::vector<model::StudyInput> studies;
  std::vector<text::TokenIds> reports;
  for (auto i : batch) {
    studies.push_back(data.studies.at(i));
    reports.push_back(data.reports.at(i));
  }
  const auto enc = m.encoder.encode(studies);
  const Var lc = clip_loss(enc.studies, m.report_embeddings(reports), m.tau);
  const Var lp = patient_discrimination_loss(m.encoder.patient_projection(enc.sequences), enc.seq_map, cfg.tau_p);
  const Var t = cfg.lambda_patdis == 0.0 ? lc : ad::add(lc, ad::scale(lp, cfg.lambda_patdis));
  if (total) *total = t;
  return {lc.item(), lp.item(), t.item()};
}

LossBreakdown training_step(ClipModel& m, nn::Adam& opt, const ClipData& data, const std::vector<std::size_t>& batch,
                            const ClipConfig& cfg) {
  Var total;
  const auto losses = compute_losses(m, data, batch, cfg, &total);
  if (!std::isfinite(losses.total)) return losses;
  opt.zero_grad();
  ad::backward(total);
  opt.step();
  return losses;
}

Matrix embed_studies(const ClipModel& m, const std::vector<model::StudyInput>& studies) {
  ad::NoGradGuard g;
  Matrix out(static_cast<ad::Index>(studies.size()), m.encoder.config().shared_dim);
  constexpr std::size_t chunk = 32;
  for (std::size_t s = 0; s < studies.size(); s += chunk) {
    const std::vector<model::StudyInput> part(studies.begin() + static_cast<std::ptrdiff_t>(s),
                                              studies.begin() + static_cast<std::ptrdiff_t>(std::min(studies.size(), s + chunk)));
    out.middleRows(static_cast<ad::Index>(s), static_cast<ad::Index>(part.size())) = m.encoder.encode(part).studies.value();
  }
  return out;
}

Matrix embed_reports(const ClipModel& m, const std::vector<text::TokenIds>& reports) {
  ad::NoGradGuard g;
  Matrix out(static_cast<ad::Index>(reports.size()), m.lm.config().shared_dim);
  constexpr std::size_t chunk = 64;
  for (std::size_t s = 0; s < reports.size(); s += chunk) {
    const std::vector<text::TokenIds> part(reports.begin() + static_cast<std::ptrdiff_t>(s),
                                           reports.begin() + static_cast<std::ptrdiff_t>(std::min(reports.size(), s + chunk)));
    out.middleRows(static_cast<ad::Index>(s), static_cast<ad::Index>(part.size())) = m.report_embeddings(part).value();
  }
  return out;
}

ClipTrainResult train_clip(ClipModel& m, const ClipData& train, const ClipData& val, const ClipConfig& cfg,
                           const std::optional<std::filesystem::path>& out_dir) {
  if (train.studies.size() != train.reports.size() || val.studies.size() != val.reports.size()) {
    throw ClipError("every study needs its report");
  }
  if (train.studies.size() < 2) throw ClipError("need at least two training studies");
  const auto batch_size = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), train.studies.size());
  std::mt19937_64 rng(cfg.seed);
  nn::Adam opt(m.trainable(cfg), {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay, 1.0});
  opt.set_lr_scale("lm.", cfg.lm_lr_scale);
  opt.set_lr_scale("lm.project", 1.0);

  std::ofstream log;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    log.open(*out_dir / "log.jsonl", std::ios::trunc);
  }
  auto checkpoint = [&](long step) {
    if (!out_dir) return;
    m.save(*out_dir / ("ckpt_" + std::to_string(step) + ".bin"), {{"step", step}, {"config", cfg.to_json()}});
    m.save(*out_dir / "clip.bin", {{"step", step}, {"config", cfg.to_json()}});
  };

  ClipTrainResult result;
  std::vector<std::size_t> order(train.studies.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  for (long step = 1; step <= cfg.steps; ++step) {
    if (cursor + batch_size > order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                         order.begin() + static_cast<std::ptrdiff_t>(cursor + batch_size));
    cursor += batch_size;
    const auto losses = training_step(m, opt, train, batch, cfg);
    if (!std::isfinite(losses.total)) {
      result.aborted = true;
      if (log.is_open()) log << io::json{{"step", step}, {"event", "non-finite loss"}}.dump() << "\n";
      break;
    }
    result.losses.push_back(losses);
    if (log.is_open()) {
      log << io::json{{"step", step}, {"loss_clip", losses.loss_clip}, {"loss_patdis", losses.loss_patdis},
                      {"total", losses.total}, {"tau", m.tau.item()}}
                 .dump()
          << "\n";
    }
    const bool eval_now = !val.studies.empty() && cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps);
    if (eval_now) {
      const auto s = embed_studies(m, val.studies);
      const auto r = embed_reports(m, val.reports);
      const int k5 = std::min<int>(5, static_cast<int>(s.rows()));
      EvalPoint p{step, evaluate_retrieval(s, r, 1), evaluate_retrieval(s, r, k5)};
      result.evals.push_back(p);
      if (log.is_open()) {
        log << io::json{{"step", step},
                        {"top1_image_to_text", p.top1.image_to_text},
                        {"top1_text_to_image", p.top1.text_to_image},
                        {"top5_image_to_text", p.top5.image_to_text},
                        {"top5_text_to_image", p.top5.text_to_image}}
                   .dump()
            << "\n";
      }
    }
    if ((cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || step == cfg.steps) {
      checkpoint(step);
      result.last_good_step = step;
    }
  }
  if (log.is_open()) log.flush();
  return result;
}

}  // namespace volrep::clip
