// volrep command-line driver.

#include "volrep/pipeline.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

using namespace volrep;
namespace fs = std::filesystem;
using ad::Matrix;

namespace {

bool on_off(const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw CLI::ValidationError("expected on|off, got '" + v + "'");
}

cohort::CohortConfig cohort_config(const std::string& path) {
  if (path.empty()) return {};
  return cohort::CohortConfig::from_kv(io::KvConfig::load(path));
}

int cmd_generate(const std::string& config, std::uint64_t seed, const fs::path& out) {
  const auto cfg = cohort_config(config);
  const auto m = cohort::generate_cohort(cfg, seed, out);
  std::cout << "wrote " << m.studies.size() << " studies to " << out << "\n";
  return 0;
}

int cmd_tokenize(const fs::path& in, const fs::path& out, const std::string& patch, double threshold,
                 const std::string& pad) {
  const auto studies = cohort::load_cohort(in);
  const auto spec = tokens::parse_patch(patch, pad == "crop" ? tokens::PadMode::crop : tokens::PadMode::zero_pad);
  tokens::BackgroundFilter filter;
  filter.threshold = threshold;
  const auto dump = tokens::tokenize_cohort(studies, spec, filter);
  tokens::write_token_dump(dump, out);
  std::cout << "wrote " << dump.tokens.size() << " tokens to " << out << "\n";
  return 0;
}

struct VqArgs {
  fs::path cohort, out;
  vq::VqConfig cfg;
  std::string permute = "on";
  std::string quantized = "off";
  int val_tokens = 192;
};

int cmd_train_vq(VqArgs a) {
  a.cfg.permute = on_off(a.permute);
  a.cfg.quantized_latents = on_off(a.quantized);
  const auto split = pipeline::split_cohort(cohort::load_cohort(a.cohort));
  const auto r = pipeline::train_vq_stage(split, a.cfg, a.val_tokens);
  fs::create_directories(a.out);
  r.model.save(a.out / "vq.bin", {{"seed", a.cfg.seed}});
  vq::write_train_csv(r, a.out / "train_loss.csv");
  vq::write_val_csv(r, a.out / "val_loss.csv");
  const auto inv = vq::orientation_invariance_report(r.model, pipeline::heldout_tokens(split, a.val_tokens));
  io::json summary{{"config", a.cfg.to_json()}, {"invariance_mean_cosine", inv.mean_cosine}, {"events", r.events}};
  if (!r.val.empty()) {
    summary["final_val"] = {{"step", r.val.back().step},
                            {"recon", r.val.back().recon},
                            {"quant", r.val.back().quant},
                            {"used_fraction", r.val.back().used_fraction}};
  }
  io::write_json(a.out / "summary.json", summary);
  std::cout << "val recon " << (r.val.empty() ? 0.0 : r.val.back().recon) << ", invariance " << inv.mean_cosine << "\n";
  return 0;
}

struct LmArgs {
  fs::path cohort, out;
  text::TextConfig text;
  text::LmTrainConfig cfg;
};

int cmd_train_lm(const LmArgs& a) {
  const auto split = pipeline::split_cohort(cohort::load_cohort(a.cohort));
  const auto vocab = pipeline::load_vocabulary(a.cohort);
  const auto train = pipeline::report_ids(split.retrospective), val = pipeline::report_ids(split.prospective);
  std::mt19937_64 rng(a.cfg.seed);
  const double uniform = text::perplexity(text::ReportLM(vocab->size(), a.text, rng), val);
  const auto r = text::pretrain_report_lm(vocab->size(), a.text, train, val, a.cfg);
  fs::create_directories(a.out);
  pipeline::save_lm(a.out / "lm.bin", r.lm, {{"seed", a.cfg.seed}, {"data_fraction", a.cfg.data_fraction}});
  io::write_json(a.out / "vocabulary.json", vocab->to_json());
  std::ofstream csv(a.out / "perplexity.csv");
  csv << std::setprecision(10) << "step,train_loss,val_nll,val_perplexity\n";
  for (const auto& p : r.curve) csv << p.step << ',' << p.train_loss << ',' << p.val_nll << ',' << p.val_perplexity << '\n';
  io::write_json(a.out / "summary.json", {{"vocab_size", vocab->size()},
                                          {"untrained_perplexity", uniform},
                                          {"train_reports", r.train_reports},
                                          {"data_fraction", a.cfg.data_fraction},
                                          {"final_val_perplexity", r.curve.empty() ? uniform : r.curve.back().val_perplexity}});
  std::cout << "val perplexity " << (r.curve.empty() ? uniform : r.curve.back().val_perplexity) << "\n";
  return 0;
}

struct ClipArgs {
  fs::path cohort, ckpt_vq, ckpt_lm, out;
  clip::ClipConfig cfg;
  model::ModelConfig model;
  text::TextConfig text;
  std::string freeze = "off";
  long name_steps = 300;
};

int cmd_train_clip(ClipArgs a) {
  a.cfg.freeze_language_model = on_off(a.freeze);
  const auto split = pipeline::split_cohort(cohort::load_cohort(a.cohort));
  const auto vocab = pipeline::load_vocabulary(a.cohort);
  const auto vqm = vq::VqModel::load(a.ckpt_vq);
  a.model.code_dim = vqm.config().code_dim;
  std::optional<text::ReportLM> lm;
  if (!a.ckpt_lm.empty()) {
    lm = pipeline::load_lm(a.ckpt_lm);
    a.text = lm->config();
  }
  a.model.width = a.text.width;
  auto m = pipeline::init_clip(vocab, a.model, a.text, lm ? &*lm : nullptr, a.cfg.seed);
  const auto train = pipeline::prepare_studies(split.retrospective, vqm);
  const auto val = pipeline::prepare_studies(split.prospective, vqm);
  text::NamePretrainConfig nc;
  nc.steps = a.name_steps;
  nc.seed = a.cfg.seed;
  const auto names = pipeline::pretrain_names(m, train.data, nc);
  fs::create_directories(a.out);
  const auto r = clip::train_clip(m, train.data, val.data, a.cfg, a.out);
  io::json evals = io::json::array();
  for (const auto& e : r.evals) {
    evals.push_back({{"step", e.step}, {"top1_i2t", e.top1.image_to_text}, {"top5_i2t", e.top5.image_to_text},
                     {"top1_t2i", e.top1.text_to_image}, {"top5_t2i", e.top5.text_to_image}});
  }
  io::write_json(a.out / "summary.json", {{"config", a.cfg.to_json()},
                                          {"name_pretrain_final", names.empty() ? 0.0 : names.back()},
                                          {"aborted", r.aborted},
                                          {"last_good_step", r.last_good_step},
                                          {"final_loss", r.losses.empty() ? 0.0 : r.losses.back().total},
                                          {"evals", evals}});
  if (!r.evals.empty()) std::cout << "top5 " << r.evals.back().top5.image_to_text << "\n";
  return r.aborted ? 2 : 0;
}

int cmd_embed(const fs::path& ckpt, const fs::path& ckpt_vq, const fs::path& cohort_dir, const fs::path& out) {
  const auto vocab = pipeline::load_vocabulary(cohort_dir);
  const auto m = clip::ClipModel::load(ckpt, vocab);
  const auto t = pipeline::embed_cohort(m, cohort::load_cohort(cohort_dir), vq::VqModel::load(ckpt_vq));
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  pipeline::write_embeddings(out, t);
  std::cout << "wrote " << t.vectors.rows() << " embeddings to " << out << "\n";
  return 0;
}

struct HeadArgs {
  fs::path features, cohort, out;
  std::string task = "diagnosis";
  std::string loss = "ce";
  heads::HeadConfig cfg;
};

int cmd_train_heads(const HeadArgs& a) {
  const auto studies = cohort::load_cohort(a.cohort);
  const auto split = pipeline::split_cohort(studies);
  const auto table = pipeline::read_embeddings(a.features);
  const Matrix x_train = pipeline::rows_for(table, split.retrospective);
  const Matrix x_all = pipeline::rows_for(table, studies);
  fs::create_directories(a.out);
  std::vector<heads::PredictionRecord> records;
  for (const auto& s : studies) records.push_back({s.study_id, cohort::to_string(s.split), {}, {}});
  io::json summary{{"task", a.task}, {"config", a.cfg.to_json()}};
  if (a.task == "diagnosis") {
    const auto head = heads::train_diagnosis_head(x_train, pipeline::label_matrix(split.retrospective), a.cfg);
    pipeline::save_diagnosis_head(a.out / "head.bin", head, static_cast<int>(x_train.cols()), a.cfg.hidden);
    const Matrix p = head.predict(x_all);
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto row = p.row(static_cast<ad::Index>(i));
      records[i].probabilities.assign(row.data(), row.data() + row.size());
    }
    const auto aucs = heads::per_label_auroc(head.predict(pipeline::rows_for(table, split.prospective)),
                                             pipeline::label_matrix(split.prospective));
    io::json list = io::json::array();
    double mean = 0;
    int n = 0;
    for (const auto& v : aucs) {
      list.push_back(v ? io::json(*v) : io::json(nullptr));
      if (v) {
        mean += *v;
        ++n;
      }
    }
    summary["prospective_auroc"] = list;
    summary["prospective_mean_auroc"] = n ? io::json(mean / n) : io::json(nullptr);
    std::cout << "mean prospective AUROC " << (n ? mean / n : 0.0) << "\n";
  } else if (a.task == "priority") {
    const auto kind = heads::priority_loss_from_string(a.loss);
    const auto head = heads::train_priority_head(x_train, pipeline::priority_classes(split.retrospective), kind, a.cfg);
    const Matrix s = head.scores(x_all);
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto row = s.row(static_cast<ad::Index>(i));
      records[i].priority_scores.assign(row.data(), row.data() + row.size());
    }
    const auto c = heads::confusion_matrix(pipeline::priority_classes(split.prospective),
                                           head.predict(pipeline::rows_for(table, split.prospective)));
    summary["loss"] = heads::to_string(kind);
    summary["prospective_confusion"] = c;
    summary["prospective_accuracy"] = heads::accuracy(c);
    std::cout << "prospective accuracy " << heads::accuracy(c) << "\n";
  } else {
    throw CLI::ValidationError("--task must be diagnosis or priority");
  }
  pipeline::write_predictions(a.out / "predictions.jsonl", records);
  io::write_json(a.out / "summary.json", summary);
  return 0;
}

struct ExplainArgs {
  fs::path ckpt, ckpt_vq, head, cohort, out;
  std::string study;
  int label = 0;
  analysis::LimeConfig lime;
};

int cmd_explain(const ExplainArgs& a) {
  const auto studies = cohort::load_cohort(a.cohort);
  const auto it = std::find_if(studies.begin(), studies.end(), [&](const auto& s) { return s.study_id == a.study; });
  if (it == studies.end()) throw std::invalid_argument("unknown study " + a.study);
  const auto m = clip::ClipModel::load(a.ckpt, pipeline::load_vocabulary(a.cohort));
  const auto e = pipeline::explain_study(m, pipeline::load_diagnosis_head(a.head), vq::VqModel::load(a.ckpt_vq), *it,
                                         a.label, a.lime);
  auto j = pipeline::explanation_json(e);
  j["samples"] = a.lime.n_samples;
  j["seed"] = a.lime.seed;
  j["kernel_width"] = a.lime.sigma > 0 ? a.lime.sigma : e.origins.size() / 4.0;
  j["baseline"] = "all-zero token";
  if (a.out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    io::write_json(a.out, j);
  }
  return 0;
}

struct AnalyzeArgs {
  std::string what;
  fs::path cohort, features, predictions, ckpt, out;
  int k = 20;
  int n_perm = 999;
  std::uint64_t seed = 0;
};

int cmd_analyze(const AnalyzeArgs& a) {
  pipeline::AnalysisInputs in;
  in.studies = cohort::load_cohort(a.cohort);
  in.vocab = pipeline::load_vocabulary(a.cohort);
  in.k = a.k;
  in.n_perm = a.n_perm;
  in.seed = a.seed;
  std::optional<pipeline::EmbeddingTable> table;
  std::optional<std::vector<heads::PredictionRecord>> preds;
  std::optional<clip::ClipModel> model;
  if (!a.features.empty()) in.features = &table.emplace(pipeline::read_embeddings(a.features));
  if (!a.predictions.empty()) in.predictions = &preds.emplace(pipeline::read_predictions(a.predictions));
  if (!a.ckpt.empty()) in.model = &model.emplace(clip::ClipModel::load(a.ckpt, in.vocab));
  analysis::emit_report(a.out, pipeline::run_analysis(a.what, in));
  std::cout << "wrote " << (a.out / "summary.json") << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Volumetric study representation toolkit"};
  app.require_subcommand(1);

  std::string config;
  std::uint64_t seed = 7;
  fs::path in_dir, out;
  auto* gen = app.add_subcommand("generate", "Write a synthetic cohort");
  gen->add_option("--config", config, "flat key = value cohort config");
  gen->add_option("--seed", seed);
  gen->add_option("--out", out)->required();

  std::string patch = "32,32,4", pad = "zero_pad";
  double bg = 0.05;
  auto* tok = app.add_subcommand("tokenize", "Dump foreground subvolume tokens");
  tok->add_option("--in", in_dir)->required();
  tok->add_option("--out", out)->required();
  tok->add_option("--patch", patch);
  tok->add_option("--bg-threshold", bg);
  tok->add_option("--pad", pad)->check(CLI::IsMember({"zero_pad", "crop"}));

  VqArgs vqa;
  auto* tvq = app.add_subcommand("train-vq", "Train the token VQ-VAE");
  tvq->add_option("--cohort", vqa.cohort)->required();
  tvq->add_option("--out", vqa.out)->required();
  tvq->add_option("--codebook-size", vqa.cfg.codebook_size);
  tvq->add_option("--code-dim", vqa.cfg.code_dim);
  tvq->add_option("--permute", vqa.permute);
  tvq->add_option("--quantized-latents", vqa.quantized);
  tvq->add_option("--steps", vqa.cfg.steps);
  tvq->add_option("--batch", vqa.cfg.batch_size);
  tvq->add_option("--lr", vqa.cfg.lr);
  tvq->add_option("--eval-every", vqa.cfg.eval_every);
  tvq->add_option("--val-tokens", vqa.val_tokens);
  tvq->add_option("--seed", vqa.cfg.seed);

  LmArgs lma;
  auto* tlm = app.add_subcommand("train-lm", "Pretrain the report language model");
  tlm->add_option("--cohort", lma.cohort)->required();
  tlm->add_option("--out", lma.out)->required();
  tlm->add_option("--fraction", lma.cfg.data_fraction)->check(CLI::Range(0.0, 1.0));
  tlm->add_option("--steps", lma.cfg.steps);
  tlm->add_option("--batch", lma.cfg.batch_size);
  tlm->add_option("--lr", lma.cfg.lr);
  tlm->add_option("--eval-every", lma.cfg.eval_every);
  tlm->add_option("--width", lma.text.width);
  tlm->add_option("--depth", lma.text.depth);
  tlm->add_option("--seed", lma.cfg.seed);

  ClipArgs ca;
  auto* tcl = app.add_subcommand("train-clip", "Contrastive study/report training");
  tcl->add_option("--cohort", ca.cohort)->required();
  tcl->add_option("--ckpt-vq", ca.ckpt_vq)->required();
  tcl->add_option("--ckpt-lm", ca.ckpt_lm, "pretrained report LM (random init when omitted)");
  tcl->add_option("--out", ca.out)->required();
  tcl->add_option("--lambda-patdis", ca.cfg.lambda_patdis);
  tcl->add_option("--tau-p", ca.cfg.tau_p);
  tcl->add_option("--freeze-lm", ca.freeze);
  tcl->add_option("--steps", ca.cfg.steps);
  tcl->add_option("--batch", ca.cfg.batch_size);
  tcl->add_option("--lr", ca.cfg.lr);
  tcl->add_option("--lm-lr-scale", ca.cfg.lm_lr_scale);
  tcl->add_option("--weight-decay", ca.cfg.weight_decay);
  tcl->add_option("--eval-every", ca.cfg.eval_every);
  tcl->add_option("--checkpoint-every", ca.cfg.checkpoint_every);
  tcl->add_option("--name-steps", ca.name_steps);
  tcl->add_option("--seed", ca.cfg.seed);

  fs::path ckpt, ckpt_vq;
  auto* emb = app.add_subcommand("embed", "Embed every study of a cohort");
  emb->add_option("--ckpt", ckpt)->required();
  emb->add_option("--ckpt-vq", ckpt_vq)->required();
  emb->add_option("--cohort", in_dir)->required();
  emb->add_option("--out", out)->required();

  HeadArgs ha;
  auto* th = app.add_subcommand("train-heads", "Train a head on frozen embeddings");
  th->add_option("--features", ha.features)->required();
  th->add_option("--cohort", ha.cohort)->required();
  th->add_option("--out", ha.out)->required();
  th->add_option("--task", ha.task)->check(CLI::IsMember({"diagnosis", "priority"}));
  th->add_option("--loss", ha.loss);
  th->add_option("--steps", ha.cfg.steps);
  th->add_option("--hidden", ha.cfg.hidden);
  th->add_option("--lr", ha.cfg.lr);
  th->add_option("--seed", ha.cfg.seed);

  ExplainArgs ea;
  auto* ex = app.add_subcommand("explain", "LIME token importances for one study");
  ex->add_option("--ckpt", ea.ckpt)->required();
  ex->add_option("--ckpt-vq", ea.ckpt_vq)->required();
  ex->add_option("--head", ea.head)->required();
  ex->add_option("--cohort", ea.cohort)->required();
  ex->add_option("--study", ea.study)->required();
  ex->add_option("--label", ea.label)->required();
  ex->add_option("--samples", ea.lime.n_samples);
  ex->add_option("--top-k", ea.lime.top_k);
  ex->add_option("--seed", ea.lime.seed);
  ex->add_option("--out", ea.out, "JSON file (stdout when omitted)");

  AnalyzeArgs aa;
  auto* an = app.add_subcommand("analyze", "Post-hoc analyses with figures");
  an->add_option("--what", aa.what)->required()->check(CLI::IsMember({"npr", "auc", "fairness", "silhouette", "skew"}));
  an->add_option("--cohort", aa.cohort)->required();
  an->add_option("--features", aa.features);
  an->add_option("--predictions", aa.predictions);
  an->add_option("--ckpt", aa.ckpt);
  an->add_option("--out", aa.out)->required();
  an->add_option("--k", aa.k);
  an->add_option("--n-perm", aa.n_perm);
  an->add_option("--seed", aa.seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_generate(config, seed, out);
    if (*tok) return cmd_tokenize(in_dir, out, patch, bg, pad);
    if (*tvq) return cmd_train_vq(vqa);
    if (*tlm) return cmd_train_lm(lma);
    if (*tcl) return cmd_train_clip(ca);
    if (*emb) return cmd_embed(ckpt, ckpt_vq, in_dir, out);
    if (*th) return cmd_train_heads(ha);
    if (*ex) return cmd_explain(ea);
    if (*an) return cmd_analyze(aa);
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
