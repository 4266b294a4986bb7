#include "volrep/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

namespace volrep::pipeline {

CohortSplit split_cohort(const std::vector<cohort::StudyRecord>& studies) {
  CohortSplit s;
  for (const auto& st : studies) (st.split == cohort::Split::retrospective ? s.retrospective : s.prospective).push_back(st);
  return s;
}

std::shared_ptr<const text::Vocabulary> load_vocabulary(const std::filesystem::path& cohort_dir) {
  return std::make_shared<const text::Vocabulary>(text::Vocabulary::from_json(io::read_json(cohort_dir / "vocabulary.json")));
}

std::shared_ptr<const text::Vocabulary> standard_vocabulary(int n_diagnoses) {
  return std::make_shared<const text::Vocabulary>(cohort::build_vocabulary(cohort::TemplateTable::standard(n_diagnoses)));
}

std::vector<tokens::SubvolumeToken> heldout_tokens(const CohortSplit& split, int n) {
  auto all = tokens::tokenize_cohort(split.prospective, {}, {}).tokens;
  if (static_cast<int>(all.size()) > n) all.resize(static_cast<std::size_t>(n));
  return all;
}

vq::VqTrainResult train_vq_stage(const CohortSplit& split, const vq::VqConfig& cfg, int val_tokens) {
  if (split.retrospective.empty()) throw std::invalid_argument("no retrospective studies to train on");
  tokens::PatchSpec spec;
  spec.dims = cfg.patch;
  const auto train = tokens::tokenize_cohort(split.retrospective, spec, {}).tokens;
  return vq::train_vqvae(train, heldout_tokens(split, val_tokens), cfg);
}

std::vector<text::TokenIds> report_ids(const std::vector<cohort::StudyRecord>& studies) {
  std::vector<text::TokenIds> out;
  for (const auto& s : studies) out.push_back(s.report.token_ids);
  return out;
}

void save_lm(const std::filesystem::path& path, const text::ReportLM& lm, const io::json& meta) {
  io::json m = meta;
  m["kind"] = "lm";
  m["text"] = lm.config().to_json();
  m["vocab_size"] = lm.vocab_size();
  nn::ParamList params;
  lm.collect(params, "lm");
  io::save_archive(path, m, params);
}

text::ReportLM load_lm(const std::filesystem::path& path) {
  const auto a = io::load_archive(path);
  if (a.meta.value("kind", std::string()) != "lm") throw io::IoError(path.string() + " is not a language-model checkpoint");
  std::mt19937_64 rng(0);
  text::ReportLM lm(a.meta.at("vocab_size").get<int>(), text::TextConfig::from_json(a.meta.at("text")), rng);
  nn::ParamList params;
  lm.collect(params, "lm");
  io::assign_params(a, params);
  return lm;
}

Prepared prepare_studies(const std::vector<cohort::StudyRecord>& studies, const vq::VqModel& vq) {
  Prepared p;
  tokens::PatchSpec spec;
  spec.dims = vq.config().patch;
  for (const auto& s : studies) {
    std::vector<model::TokenOrigin> o;
    p.data.studies.push_back(model::make_study_input(s, vq, spec, {}, &o));
    p.data.reports.push_back(s.report.token_ids);
    p.origins.push_back(std::move(o));
  }
  return p;
}

clip::ClipModel init_clip(std::shared_ptr<const text::Vocabulary> vocab, const model::ModelConfig& mc,
                          const text::TextConfig& tc, const text::ReportLM* pretrained, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto m = clip::make_clip_model(std::move(vocab), mc, tc, {}, rng);
  if (pretrained) {
    if (pretrained->vocab_size() != m.lm.vocab_size()) throw io::IoError("language model vocabulary does not match");
    nn::ParamList src, dst;
    pretrained->collect(src, "lm");
    m.lm.collect(dst, "lm");
    if (src.size() != dst.size()) throw io::IoError("language model shape does not match the text config");
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (src[i].name != dst[i].name || src[i].var.value().rows() != dst[i].var.value().rows() ||
          src[i].var.value().cols() != dst[i].var.value().cols()) {
        throw io::IoError("language model tensor " + src[i].name + " does not match");
      }
      dst[i].var.mutable_value() = src[i].var.value();
    }
  }
  return m;
}

std::vector<double> pretrain_names(clip::ClipModel& m, const clip::ClipData& train, const text::NamePretrainConfig& cfg) {
  std::vector<std::string> names;
  std::vector<Eigen::RowVectorXd> means;
  for (const auto& s : train.studies) {
    for (const auto& q : s.sequences) {
      names.push_back(q.name);
      means.push_back(q.latents.colwise().mean());
    }
  }
  if (names.empty()) return {};
  Matrix lat(static_cast<ad::Index>(means.size()), means.front().size());
  for (std::size_t i = 0; i < means.size(); ++i) lat.row(static_cast<ad::Index>(i)) = means[i];
  return text::pretrain_sequence_names(m.encoder.sequence_names(), names, lat, cfg);
}

EmbeddingTable embed_cohort(const clip::ClipModel& m, const std::vector<cohort::StudyRecord>& studies,
                            const vq::VqModel& vq) {
  const auto p = prepare_studies(studies, vq);
  EmbeddingTable t;
  for (const auto& s : studies) {
    t.study_ids.push_back(s.study_id);
    t.splits.push_back(cohort::to_string(s.split));
  }
  t.vectors = clip::embed_studies(m, p.data.studies);
  return t;
}

void write_embeddings(const std::filesystem::path& path, const EmbeddingTable& t) {
  std::vector<unsigned char> bytes(static_cast<std::size_t>(t.vectors.size()) * sizeof(double));
  if (!bytes.empty()) std::memcpy(bytes.data(), t.vectors.data(), bytes.size());
  io::write_bytes(path, bytes);
  io::json idx;
  idx["format"] = "float64 row-major";
  idx["rows"] = t.vectors.rows();
  idx["dim"] = t.vectors.cols();
  idx["checksum"] = io::hex64(io::fnv1a(bytes));
  idx["study_ids"] = t.study_ids;
  idx["splits"] = t.splits;
  io::write_json(path.string() + ".json", idx);
}

EmbeddingTable read_embeddings(const std::filesystem::path& path) {
  const auto idx = io::read_json(path.string() + ".json");
  const auto bytes = io::read_bytes(path);
  if (io::hex64(io::fnv1a(bytes)) != idx.at("checksum").get<std::string>()) throw io::IoError("embedding checksum mismatch");
  EmbeddingTable t;
  t.study_ids = idx.at("study_ids").get<std::vector<std::string>>();
  t.splits = idx.at("splits").get<std::vector<std::string>>();
  const auto rows = idx.at("rows").get<ad::Index>(), dim = idx.at("dim").get<ad::Index>();
  if (bytes.size() != static_cast<std::size_t>(rows * dim) * sizeof(double)) throw io::IoError("embedding file has the wrong size");
  t.vectors.resize(rows, dim);
  if (!bytes.empty()) std::memcpy(t.vectors.data(), bytes.data(), bytes.size());
  return t;
}

Matrix label_matrix(const std::vector<cohort::StudyRecord>& studies) {
  if (studies.empty()) return {};
  const auto d = static_cast<ad::Index>(studies.front().labels.bits.size());
  Matrix y(static_cast<ad::Index>(studies.size()), d);
  for (std::size_t i = 0; i < studies.size(); ++i) {
    for (ad::Index k = 0; k < d; ++k) y(static_cast<ad::Index>(i), k) = studies[i].labels.bits.at(static_cast<std::size_t>(k));
  }
  return y;
}

std::vector<int> priority_classes(const std::vector<cohort::StudyRecord>& studies) {
  std::vector<int> out;
  for (const auto& s : studies) out.push_back(static_cast<int>(s.labels.priority));
  return out;
}

Matrix rows_for(const EmbeddingTable& t, const std::vector<cohort::StudyRecord>& studies) {
  std::map<std::string, ad::Index> at;
  for (std::size_t i = 0; i < t.study_ids.size(); ++i) at[t.study_ids[i]] = static_cast<ad::Index>(i);
  Matrix out(static_cast<ad::Index>(studies.size()), t.vectors.cols());
  for (std::size_t i = 0; i < studies.size(); ++i) {
    const auto it = at.find(studies[i].study_id);
    if (it == at.end()) throw io::IoError("no embedding for study " + studies[i].study_id);
    out.row(static_cast<ad::Index>(i)) = t.vectors.row(it->second);
  }
  return out;
}

void save_diagnosis_head(const std::filesystem::path& path, const heads::DiagnosisHead& h, int in_features, int hidden) {
  io::json meta{{"kind", "diagnosis_head"}, {"in", in_features}, {"hidden", hidden}, {"out", h.mlp.out_features()},
                {"pos_weight", h.pos_weight}};
  nn::ParamList params;
  h.mlp.collect(params, "diag");
  io::save_archive(path, meta, params);
}

heads::DiagnosisHead load_diagnosis_head(const std::filesystem::path& path) {
  const auto a = io::load_archive(path);
  if (a.meta.value("kind", std::string()) != "diagnosis_head") throw io::IoError(path.string() + " is not a diagnosis head");
  std::mt19937_64 rng(0);
  heads::DiagnosisHead h;
  h.mlp = heads::Mlp(a.meta.at("in").get<int>(), a.meta.at("hidden").get<int>(), a.meta.at("out").get<int>(), rng);
  h.pos_weight = a.meta.at("pos_weight").get<std::vector<double>>();
  nn::ParamList params;
  h.mlp.collect(params, "diag");
  io::assign_params(a, params);
  return h;
}

Eigen::RowVectorXd zero_token_latent(const vq::VqModel& vq) {
  tokens::SubvolumeToken t;
  t.shape = vq.config().patch;
  t.voxels.assign(t.shape.size(), 0.0f);
  return vq.downstream_latents({t}).row(0);
}

StudyExplanation explain_study(const clip::ClipModel& m, const heads::DiagnosisHead& head, const vq::VqModel& vq,
                               const cohort::StudyRecord& study, int label, const analysis::LimeConfig& cfg) {
  if (label < 0 || label >= head.mlp.out_features()) throw analysis::AnalysisError("label out of range");
  tokens::PatchSpec spec;
  spec.dims = vq.config().patch;
  StudyExplanation e;
  const auto input = model::make_study_input(study, vq, spec, {}, &e.origins);
  const auto scorer = analysis::pipeline_scorer(m, head, input, zero_token_latent(vq), label);
  e.lime = analysis::lime_token_importance(static_cast<int>(e.origins.size()), scorer, cfg);
  e.lime.study_id = study.study_id;
  e.lime.target = label;
  e.localization.ranking = e.lime.ranking;
  for (const auto& o : e.origins) {
    e.localization.in_mask.push_back(std::find(o.lesion_labels.begin(), o.lesion_labels.end(), label) != o.lesion_labels.end());
  }
  return e;
}

io::json explanation_json(const StudyExplanation& e) {
  io::json top = io::json::array();
  for (int t : e.lime.top_k) {
    const auto& o = e.origins.at(static_cast<std::size_t>(t));
    top.push_back({{"token", t},
                   {"sequence", o.sequence},
                   {"grid_pos", o.grid_pos},
                   {"weight", e.lime.weights.at(static_cast<std::size_t>(t))},
                   {"in_lesion", static_cast<bool>(e.localization.in_mask.at(static_cast<std::size_t>(t)))}});
  }
  return {{"study_id", e.lime.study_id},
          {"target", e.lime.target},
          {"intercept", e.lime.intercept},
          {"weights", e.lime.weights},
          {"top_k", top}};
}

std::vector<heads::PredictionRecord> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io::IoError("cannot read " + path.string());
  std::vector<heads::PredictionRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = io::json::parse(line);
    heads::PredictionRecord r;
    r.study_id = j.at("study_id").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.probabilities = j.at("probabilities").get<std::vector<double>>();
    r.priority_scores = j.at("priority_scores").get<std::vector<double>>();
    out.push_back(std::move(r));
  }
  return out;
}

void write_predictions(const std::filesystem::path& path, const std::vector<heads::PredictionRecord>& records) {
  std::string text;
  for (const auto& r : records) text += r.to_json().dump() + "\n";
  io::write_text(path, text);
}

Matrix probabilities_for(const std::vector<heads::PredictionRecord>& records,
                         const std::vector<cohort::StudyRecord>& studies) {
  std::map<std::string, const heads::PredictionRecord*> at;
  for (const auto& r : records) at[r.study_id] = &r;
  Matrix out;
  for (std::size_t i = 0; i < studies.size(); ++i) {
    const auto it = at.find(studies[i].study_id);
    if (it == at.end() || it->second->probabilities.empty()) throw io::IoError("no prediction for study " + studies[i].study_id);
    const auto& p = it->second->probabilities;
    if (i == 0) out.resize(static_cast<ad::Index>(studies.size()), static_cast<ad::Index>(p.size()));
    if (static_cast<ad::Index>(p.size()) != out.cols()) throw io::IoError("prediction widths differ");
    for (std::size_t k = 0; k < p.size(); ++k) out(static_cast<ad::Index>(i), static_cast<ad::Index>(k)) = p[k];
  }
  return out;
}

namespace {

io::json opt(const std::optional<double>& v) { return v ? io::json(*v) : io::json(nullptr); }

io::json finite_or_null(double v) { return std::isfinite(v) ? io::json(v) : io::json(nullptr); }

io::json matrix_json(const Matrix& m) {
  io::json rows = io::json::array();
  for (ad::Index i = 0; i < m.rows(); ++i) {
    io::json r = io::json::array();
    for (ad::Index j = 0; j < m.cols(); ++j) r.push_back(finite_or_null(m(i, j)));
    rows.push_back(r);
  }
  return rows;
}

std::vector<std::string> diagnosis_names(ad::Index d) {
  std::vector<std::string> out;
  for (ad::Index i = 0; i < d; ++i) out.push_back("d" + std::to_string(i));
  return out;
}

analysis::ReportInputs npr_report(const AnalysisInputs& in) {
  if (!in.features) throw std::invalid_argument("npr needs study embeddings");
  const auto split = split_cohort(in.studies);
  const auto entries = analysis::compute_npr(rows_for(*in.features, split.prospective), label_matrix(split.prospective),
                                             rows_for(*in.features, split.retrospective),
                                             label_matrix(split.retrospective), in.k);
  analysis::ReportInputs r;
  io::json rows = io::json::array();
  std::vector<double> bars;
  for (const auto& e : entries) {
    rows.push_back({{"diagnosis", e.diagnosis},
                    {"mean_all", opt(e.mean_all)},
                    {"mean_positive", opt(e.mean_positive)},
                    {"prospective_positives", e.prospective_positives},
                    {"retrospective_rate", e.retrospective_rate}});
    bars.push_back(e.mean_positive.value_or(0.0));
  }
  r.summary = {{"analysis", "npr"}, {"k", in.k}, {"diagnoses", rows}};
  r.bars.push_back({"npr_positive", {bars, diagnosis_names(static_cast<ad::Index>(bars.size()))}});
  return r;
}

analysis::ReportInputs auc_report(const AnalysisInputs& in) {
  if (!in.predictions) throw std::invalid_argument("auc needs head predictions");
  const auto split = split_cohort(in.studies);
  const Matrix probs = probabilities_for(*in.predictions, split.prospective);
  const Matrix labels = label_matrix(split.prospective);
  const auto m = analysis::logit_label_auc_matrix(probs, labels);
  double diag = 0, off = 0;
  int nd = 0, no = 0;
  for (ad::Index i = 0; i < m.auc.rows(); ++i) {
    for (ad::Index j = 0; j < m.auc.cols(); ++j) {
      if (!std::isfinite(m.auc(i, j))) continue;
      (i == j ? diag : off) += m.auc(i, j);
      ++(i == j ? nd : no);
    }
  }
  const auto d = m.auc.rows();
  Matrix ordered(d, d);
  for (ad::Index i = 0; i < d; ++i) {
    for (ad::Index j = 0; j < d; ++j) ordered(i, j) = m.auc(m.order[static_cast<std::size_t>(i)], m.order[static_cast<std::size_t>(j)]);
  }
  analysis::ReportInputs r;
  r.summary = {{"analysis", "auc"},
               {"split", "prospective"},
               {"auc", matrix_json(m.auc)},
               {"label_correlation", matrix_json(m.label_correlation)},
               {"order", m.order},
               {"diagonal_mean", nd ? io::json(diag / nd) : io::json(nullptr)},
               {"off_diagonal_mean", no ? io::json(off / no) : io::json(nullptr)}};
  r.heatmaps.push_back({"auc_matrix", ordered});
  r.heatmaps.push_back({"label_correlation", m.label_correlation});
  return r;
}

analysis::ReportInputs fairness_report(const AnalysisInputs& in) {
  if (!in.predictions) throw std::invalid_argument("fairness needs head predictions");
  const auto split = split_cohort(in.studies);
  const Matrix pr = probabilities_for(*in.predictions, split.retrospective);
  const Matrix pp = probabilities_for(*in.predictions, split.prospective);
  const Matrix yr = label_matrix(split.retrospective), yp = label_matrix(split.prospective);

  // task -1 is "any finding" scored by the largest probability
  struct Task {
    std::string name;
    std::vector<double> sr, sp;
    std::vector<int> lr, lp;
  };
  std::vector<Task> tasks;
  for (ad::Index d = -1; d < yr.cols(); ++d) {
    Task t;
    t.name = d < 0 ? std::string("any_finding") : "d" + std::to_string(d);
    for (ad::Index i = 0; i < pr.rows(); ++i) {
      t.sr.push_back(d < 0 ? pr.row(i).maxCoeff() : pr(i, d));
      t.lr.push_back(d < 0 ? (yr.row(i).sum() > 0) : (yr(i, d) > 0.5));
    }
    for (ad::Index i = 0; i < pp.rows(); ++i) {
      t.sp.push_back(d < 0 ? pp.row(i).maxCoeff() : pp(i, d));
      t.lp.push_back(d < 0 ? (yp.row(i).sum() > 0) : (yp(i, d) > 0.5));
    }
    tasks.push_back(std::move(t));
  }

  io::json tests = io::json::array(), skipped = io::json::array();
  std::vector<analysis::DisparityTest> done;
  std::vector<std::string> task_of;
  std::uint64_t index = 0;
  for (const auto& t : tasks) {
    double threshold = 0;
    try {
      threshold = analysis::youden_threshold(t.sr, t.lr);
    } catch (const analysis::AnalysisError& e) {
      skipped.push_back({{"task", t.name}, {"reason", e.what()}});
      continue;
    }
    for (const char* attr : {"sex", "age_band", "race_code", "insurance_code", "scanner_code"}) {
      std::vector<int> groups;
      for (const auto& s : split.prospective) groups.push_back(cohort::subgroup_value(s.subgroup, attr));
      ++index;
      try {
        auto d = analysis::tpr_disparity(t.sp, t.lp, groups, threshold, in.n_perm, in.seed + 7919 * index);
        d.attribute = attr;
        done.push_back(std::move(d));
        task_of.push_back(t.name);
      } catch (const analysis::AnalysisError& e) {
        skipped.push_back({{"task", t.name}, {"attribute", attr}, {"reason", e.what()}});
      }
    }
  }
  std::vector<double> raw;
  for (const auto& d : done) raw.push_back(d.p_value);
  const auto adj = analysis::benjamini_hochberg(raw);
  std::vector<double> bars;
  std::vector<std::string> names;
  int significant = 0;
  for (std::size_t i = 0; i < done.size(); ++i) {
    done[i].corrected_p = adj[i];
    significant += adj[i] < 0.05 ? 1 : 0;
    tests.push_back({{"task", task_of[i]},
                     {"attribute", done[i].attribute},
                     {"groups", done[i].groups},
                     {"tpr", done[i].tpr},
                     {"excluded_groups", done[i].excluded_groups},
                     {"disparity", done[i].disparity},
                     {"p_value", done[i].p_value},
                     {"corrected_p", done[i].corrected_p}});
    if (task_of[i] == "any_finding") {
      bars.push_back(done[i].disparity);
      names.push_back(done[i].attribute.substr(0, 4));
    }
  }
  analysis::ReportInputs r;
  r.summary = {{"analysis", "fairness"},
               {"threshold", "youden on retrospective"},
               {"correction", "benjamini-hochberg over all tests"},
               {"n_perm", in.n_perm},
               {"seed", in.seed},
               {"tests", tests},
               {"skipped", skipped},
               {"significant_after_correction", significant}};
  r.bars.push_back({"tpr_disparity_any_finding", {bars, names}});
  return r;
}

analysis::ReportInputs silhouette_report(const AnalysisInputs& in) {
  if (!in.model || !in.vocab) throw std::invalid_argument("silhouette needs a contrastive checkpoint");
  std::vector<text::TokenIds> itemized, full;
  std::vector<int> labels;
  for (const auto& s : in.studies) {
    const auto pos = std::count(s.labels.bits.begin(), s.labels.bits.end(), 1);
    if (pos != 1) continue;
    labels.push_back(static_cast<int>(std::find(s.labels.bits.begin(), s.labels.bits.end(), 1) - s.labels.bits.begin()));
    itemized.push_back(s.report.token_ids);
    full.push_back(in.vocab->encode(s.full_report));
  }
  const auto a = analysis::silhouette_report(clip::embed_reports(*in.model, itemized), labels);
  const auto b = analysis::silhouette_report(clip::embed_reports(*in.model, full), labels);
  analysis::ReportInputs r;
  r.summary = {{"analysis", "silhouette"},
               {"studies", labels.size()},
               {"labels", "single-finding studies by diagnosis"},
               {"itemized_mean", a.mean},
               {"full_mean", b.mean}};
  r.bars.push_back({"silhouette_means", {{a.mean, b.mean}, {"item", "full"}}});
  return r;
}

analysis::ReportInputs skew_report(const AnalysisInputs& in) {
  std::vector<double> tokens_per_study, positives;
  std::vector<double> counts(in.studies.empty() ? 0 : in.studies.front().labels.bits.size(), 0.0);
  for (const auto& s : in.studies) {
    double n = 0;
    for (const auto& q : s.sequences) n += static_cast<double>(tokens::tokenize_sequence(q, {}, {}).size());
    tokens_per_study.push_back(n);
    double p = 0;
    for (std::size_t d = 0; d < s.labels.bits.size(); ++d) {
      p += s.labels.bits[d];
      counts[d] += s.labels.bits[d];
    }
    positives.push_back(p);
  }
  auto skew = [](const std::vector<double>& x) -> io::json {
    try {
      return analysis::fisher_pearson_skewness(x);
    } catch (const analysis::AnalysisError&) {
      return nullptr;
    }
  };
  analysis::ReportInputs r;
  r.summary = {{"analysis", "skew"},
               {"foreground_tokens_per_study", skew(tokens_per_study)},
               {"positives_per_study", skew(positives)},
               {"cases_per_diagnosis", skew(counts)}};
  r.bars.push_back({"cases_per_diagnosis", {counts, diagnosis_names(static_cast<ad::Index>(counts.size()))}});
  return r;
}

}  // namespace

analysis::ReportInputs run_analysis(const std::string& what, const AnalysisInputs& in) {
  if (in.studies.empty()) throw std::invalid_argument("no studies to analyze");
  if (what == "npr") return npr_report(in);
  if (what == "auc") return auc_report(in);
  if (what == "fairness") return fairness_report(in);
  if (what == "silhouette") return silhouette_report(in);
  if (what == "skew") return skew_report(in);
  throw std::invalid_argument("unknown analysis '" + what + "'");
}

}  // namespace volrep::pipeline
