#include "volrep/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace volrep::analysis {

// ---- LIME ----------------------------------------------------------------

LimeExplanation lime_token_importance(int m, const MaskScorer& scorer, const LimeConfig& cfg) {
  if (m < 2) throw AnalysisError("LIME needs at least two tokens");
  std::vector<Mask> masks;
  if (cfg.exhaustive) {
    if (m > 20) throw AnalysisError("exhaustive LIME is limited to 20 tokens");
    for (std::uint32_t bits = 0; bits < (1u << m); ++bits) {
      Mask mk(static_cast<std::size_t>(m));
      for (int t = 0; t < m; ++t) mk[static_cast<std::size_t>(t)] = (bits >> t) & 1u;
      masks.push_back(std::move(mk));
    }
  } else {
    if (cfg.n_samples < m + 1) throw AnalysisError("LIME needs more samples than tokens");
    std::mt19937_64 rng(cfg.seed);
    std::bernoulli_distribution keep(0.5);
    masks.emplace_back(static_cast<std::size_t>(m), 1);
    while (static_cast<int>(masks.size()) < cfg.n_samples) {
      Mask mk(static_cast<std::size_t>(m));
      for (auto& b : mk) b = keep(rng) ? 1 : 0;
      masks.push_back(std::move(mk));
    }
  }
  const auto y = scorer(masks);
  if (y.size() != masks.size()) throw AnalysisError("scorer returned the wrong number of values");
  const double sigma = cfg.sigma > 0 ? cfg.sigma : m / 4.0;
  const auto n = static_cast<ad::Index>(masks.size());
  Matrix x(n, m + 1);
  Eigen::VectorXd b(n);
  for (ad::Index i = 0; i < n; ++i) {
    int ablated = 0;
    for (int t = 0; t < m; ++t) ablated += masks[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)] ? 0 : 1;
    const double w = std::sqrt(std::exp(-ablated / sigma));
    x(i, 0) = w;
    for (int t = 0; t < m; ++t) x(i, t + 1) = w * masks[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)];
    b(i) = w * y[static_cast<std::size_t>(i)];
  }
  const Eigen::VectorXd beta = x.colPivHouseholderQr().solve(b);
  LimeExplanation out;
  out.intercept = beta(0);
  out.weights.assign(beta.data() + 1, beta.data() + 1 + m);
  out.ranking.resize(static_cast<std::size_t>(m));
  std::iota(out.ranking.begin(), out.ranking.end(), 0);
  std::stable_sort(out.ranking.begin(), out.ranking.end(), [&](int a, int c) {
    return out.weights[static_cast<std::size_t>(a)] > out.weights[static_cast<std::size_t>(c)];
  });
  out.top_k.assign(out.ranking.begin(), out.ranking.begin() + std::min(cfg.top_k, m));
  return out;
}

MaskScorer pipeline_scorer(const clip::ClipModel& model, const heads::DiagnosisHead& head,
                           const model::StudyInput& study, const Eigen::RowVectorXd& zero_latent, int target) {
  std::size_t n_tokens = 0;
  for (const auto& seq : study.sequences) n_tokens += static_cast<std::size_t>(seq.latents.rows());
  return [&model, &head, study, zero_latent, target, n_tokens](const std::vector<Mask>& masks) {
    for (const auto& mk : masks) {
      if (mk.size() != n_tokens) throw AnalysisError("mask length does not match the study's tokens");
    }
    std::vector<double> out;
    out.reserve(masks.size());
    constexpr std::size_t chunk = 64;
    for (std::size_t s = 0; s < masks.size(); s += chunk) {
      std::vector<model::StudyInput> batch;
      for (std::size_t i = s; i < std::min(masks.size(), s + chunk); ++i) {
        model::StudyInput copy = study;
        std::size_t t = 0;
        for (auto& seq : copy.sequences) {
          for (ad::Index r = 0; r < seq.latents.rows(); ++r, ++t) {
            if (!masks[i][t]) seq.latents.row(r) = zero_latent;
          }
        }
        batch.push_back(std::move(copy));
      }
      const Matrix feats = clip::embed_studies(model, batch);
      ad::NoGradGuard g;
      const Matrix logits = head.mlp(ad::constant(feats)).value();
      for (ad::Index r = 0; r < logits.rows(); ++r) out.push_back(logits(r, target));
    }
    return out;
  };
}

LocalizationResult localization_accuracy(const std::vector<LocalizationCase>& cases, int k) {
  if (k < 1) throw AnalysisError("k must be positive");
  LocalizationResult r;
  double hits = 0, base = 0;
  for (const auto& c : cases) {
    const auto inside = std::count(c.in_mask.begin(), c.in_mask.end(), true);
    if (inside == 0 || c.in_mask.empty()) {
      ++r.excluded;
      continue;
    }
    ++r.used;
    bool hit = false;
    for (int i = 0; i < std::min<int>(k, static_cast<int>(c.ranking.size())); ++i) {
      hit |= c.in_mask.at(static_cast<std::size_t>(c.ranking[static_cast<std::size_t>(i)]));
    }
    hits += hit ? 1 : 0;
    const double rho = static_cast<double>(inside) / static_cast<double>(c.in_mask.size());
    base += 1.0 - std::pow(1.0 - rho, k);
  }
  if (r.used) {
    r.hit_rate = hits / r.used;
    r.random_baseline = base / r.used;
  }
  return r;
}

// ---- neighbours and AUC structure -----------------------------------------

double npr_value(double mean_neighbour_positives, int k, double positives, double total) {
  if (k < 1 || positives <= 0 || total <= 0) throw AnalysisError("NPR needs k >= 1 and a positive base rate");
  return (mean_neighbour_positives / k) / (positives / total);
}

std::vector<NprEntry> compute_npr(const Matrix& prospective, const Matrix& prospective_labels,
                                  const Matrix& retrospective, const Matrix& retrospective_labels, int k) {
  if (prospective.rows() == 0 || retrospective.rows() == 0) throw AnalysisError("both splits must be non-empty");
  if (k < 1 || k > retrospective.rows()) throw AnalysisError("k must be in [1, retrospective size]");
  if (prospective_labels.rows() != prospective.rows() || retrospective_labels.rows() != retrospective.rows() ||
      prospective_labels.cols() != retrospective_labels.cols()) {
    throw AnalysisError("label tables do not match the embeddings");
  }
  auto unit = [](Matrix m) {
    for (ad::Index r = 0; r < m.rows(); ++r) {
      const double n = m.row(r).norm();
      if (n > 0) m.row(r) /= n;
    }
    return m;
  };
  const Matrix sim = unit(prospective) * unit(retrospective).transpose();
  const auto n_retro = retrospective.rows();
  std::vector<std::vector<ad::Index>> neighbours(static_cast<std::size_t>(prospective.rows()));
  for (ad::Index i = 0; i < prospective.rows(); ++i) {
    std::vector<ad::Index> idx(static_cast<std::size_t>(n_retro));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](ad::Index a, ad::Index b) { return sim(i, a) > sim(i, b); });
    idx.resize(static_cast<std::size_t>(k));
    neighbours[static_cast<std::size_t>(i)] = std::move(idx);
  }
  std::vector<NprEntry> out;
  for (ad::Index d = 0; d < prospective_labels.cols(); ++d) {
    NprEntry e;
    e.diagnosis = static_cast<int>(d);
    const double pos = (retrospective_labels.col(d).array() > 0.5).count();
    e.retrospective_rate = pos / static_cast<double>(n_retro);
    double sum_all = 0, sum_pos = 0;
    for (ad::Index i = 0; i < prospective.rows(); ++i) {
      double hits = 0;
      for (auto j : neighbours[static_cast<std::size_t>(i)]) hits += retrospective_labels(j, d) > 0.5 ? 1 : 0;
      const double v = pos > 0 ? npr_value(hits, k, pos, static_cast<double>(n_retro)) : 0.0;
      sum_all += v;
      if (prospective_labels(i, d) > 0.5) {
        ++e.prospective_positives;
        sum_pos += v;
      }
    }
    if (pos > 0) {
      e.mean_all = sum_all / static_cast<double>(prospective.rows());
      if (e.prospective_positives > 0) e.mean_positive = sum_pos / e.prospective_positives;
    }
    out.push_back(e);
  }
  return out;
}

std::vector<int> average_linkage_order(const Matrix& dist) {
  const auto n = static_cast<int>(dist.rows());
  if (dist.cols() != n) throw AnalysisError("distance matrix must be square");
  std::vector<std::vector<int>> clusters;
  for (int i = 0; i < n; ++i) clusters.push_back({i});
  auto linkage = [&](const std::vector<int>& a, const std::vector<int>& b) {
    double s = 0;
    for (int i : a) {
      for (int j : b) s += dist(i, j);
    }
    return s / static_cast<double>(a.size() * b.size());
  };
  while (clusters.size() > 1) {
    std::size_t bi = 0, bj = 1;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < clusters.size(); ++i) {
      for (std::size_t j = i + 1; j < clusters.size(); ++j) {
        const double l = linkage(clusters[i], clusters[j]);
        if (l < best) {
          best = l;
          bi = i;
          bj = j;
        }
      }
    }
    clusters[bi].insert(clusters[bi].end(), clusters[bj].begin(), clusters[bj].end());
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bj));
  }
  return clusters.empty() ? std::vector<int>{} : clusters.front();
}

AucMatrix logit_label_auc_matrix(const Matrix& logits, const Matrix& labels) {
  if (logits.rows() != labels.rows() || logits.cols() != labels.cols()) throw AnalysisError("logit and label shapes differ");
  const auto d = labels.cols();
  if (d < 2) throw AnalysisError("need at least two labels");
  AucMatrix out;
  out.auc = Matrix::Constant(d, d, std::numeric_limits<double>::quiet_NaN());
  for (ad::Index j = 0; j < d; ++j) {
    std::vector<int> y;
    for (ad::Index r = 0; r < labels.rows(); ++r) y.push_back(labels(r, j) > 0.5 ? 1 : 0);
    for (ad::Index i = 0; i < d; ++i) {
      std::vector<double> s;
      for (ad::Index r = 0; r < logits.rows(); ++r) s.push_back(logits(r, i));
      if (const auto a = heads::auroc(s, y)) out.auc(i, j) = *a;
    }
  }
  out.label_correlation = Matrix::Identity(d, d);
  for (ad::Index a = 0; a < d; ++a) {
    for (ad::Index b = a + 1; b < d; ++b) {
      const Eigen::VectorXd x = labels.col(a).array() - labels.col(a).mean();
      const Eigen::VectorXd z = labels.col(b).array() - labels.col(b).mean();
      const double den = x.norm() * z.norm();
      const double c = den > 0 ? x.dot(z) / den : 0.0;
      out.label_correlation(a, b) = out.label_correlation(b, a) = c;
    }
  }
  out.order = average_linkage_order(Matrix::Ones(d, d) - out.label_correlation);
  return out;
}

Silhouette silhouette_report(const Matrix& x, const std::vector<int>& labels) {
  if (static_cast<ad::Index>(labels.size()) != x.rows()) throw AnalysisError("one label per embedding");
  std::vector<int> ids = labels;
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.size() < 2) throw AnalysisError("silhouette needs at least two clusters");
  const auto n = x.rows();
  Silhouette s;
  for (ad::Index i = 0; i < n; ++i) {
    std::map<int, std::pair<double, int>> acc;
    for (ad::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      auto& e = acc[labels[static_cast<std::size_t>(j)]];
      e.first += (x.row(i) - x.row(j)).norm();
      e.second += 1;
    }
    const int own = labels[static_cast<std::size_t>(i)];
    double v = 0;
    if (acc.count(own) && acc[own].second > 0) {
      const double a = acc[own].first / acc[own].second;
      double b = std::numeric_limits<double>::infinity();
      for (const auto& [lab, e] : acc) {
        if (lab != own) b = std::min(b, e.first / e.second);
      }
      const double m = std::max(a, b);
      v = m > 0 ? (b - a) / m : 0.0;
    }
    s.values.push_back(v);
    s.mean += v / static_cast<double>(n);
  }
  return s;
}

// ---- fairness ---------------------------------------------------------------

double youden_threshold(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty()) throw AnalysisError("scores and labels must match");
  const double pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const double neg = static_cast<double>(labels.size()) - pos;
  if (pos == 0 || neg == 0) throw AnalysisError("Youden threshold needs both classes");
  std::vector<double> cand = scores;
  std::sort(cand.begin(), cand.end());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
  double best_t = cand.front(), best_j = -2;
  for (double t : cand) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= t) (labels[i] ? tp : fp) += 1;
    }
    const double j = tp / pos - fp / neg;
    if (j > best_j) {
      best_j = j;
      best_t = t;
    }
  }
  return best_t;
}

std::vector<double> benjamini_hochberg(const std::vector<double>& p) {
  const std::size_t n = p.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  std::vector<double> out(n);
  double running = 1.0;
  for (std::size_t r = n; r-- > 0;) {
    const double adj = std::min(1.0, p[idx[r]] * static_cast<double>(n) / static_cast<double>(r + 1));
    running = std::min(running, adj);
    out[idx[r]] = std::max(running, p[idx[r]]);
  }
  return out;
}

namespace {

// Per-group TPR among positives; groups without positives are skipped.
double disparity_of(const std::vector<double>& scores, const std::vector<int>& labels, const std::vector<int>& groups,
                    double threshold, std::vector<int>* group_ids = nullptr, std::vector<double>* tprs = nullptr,
                    std::vector<int>* excluded = nullptr) {
  std::map<int, std::pair<double, double>> acc;  // group -> (tp, positives)
  std::set<int> seen;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    seen.insert(groups[i]);
    if (!labels[i]) continue;
    auto& e = acc[groups[i]];
    e.second += 1;
    if (scores[i] >= threshold) e.first += 1;
  }
  double lo = 2, hi = -1;
  for (const auto& [g, e] : acc) {
    const double t = e.first / e.second;
    lo = std::min(lo, t);
    hi = std::max(hi, t);
    if (group_ids) group_ids->push_back(g);
    if (tprs) tprs->push_back(t);
  }
  if (excluded) {
    for (int g : seen) {
      if (!acc.count(g)) excluded->push_back(g);
    }
  }
  return acc.size() < 2 ? 0.0 : hi - lo;
}

}  // namespace

DisparityTest tpr_disparity(const std::vector<double>& scores, const std::vector<int>& labels,
                            const std::vector<int>& groups, double threshold, int n_perm, std::uint64_t seed) {
  if (scores.size() != labels.size() || scores.size() != groups.size()) throw AnalysisError("inputs differ in length");
  if (n_perm < 1) throw AnalysisError("need at least one permutation");
  DisparityTest t;
  t.disparity = disparity_of(scores, labels, groups, threshold, &t.groups, &t.tpr, &t.excluded_groups);
  if (t.groups.size() < 2) throw AnalysisError("need two subgroups with positives");
  std::mt19937_64 rng(seed);
  std::vector<int> shuffled = groups;
  int at_least = 0;
  for (int b = 0; b < n_perm; ++b) {
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    if (disparity_of(scores, labels, shuffled, threshold) >= t.disparity - 1e-12) ++at_least;
  }
  t.p_value = (1.0 + at_least) / (1.0 + n_perm);
  t.corrected_p = t.p_value;
  return t;
}

FairnessReport fairness_audit(const std::vector<double>& scores, const std::vector<int>& labels,
                              const std::vector<std::pair<std::string, std::vector<int>>>& attributes,
                              double threshold, int n_perm, std::uint64_t seed) {
  FairnessReport r;
  r.n_perm = n_perm;
  r.seed = seed;
  std::vector<double> raw;
  for (std::size_t a = 0; a < attributes.size(); ++a) {
    auto t = tpr_disparity(scores, labels, attributes[a].second, threshold, n_perm, seed + 7919 * (a + 1));
    t.attribute = attributes[a].first;
    raw.push_back(t.p_value);
    r.tests.push_back(std::move(t));
  }
  const auto adj = benjamini_hochberg(raw);
  for (std::size_t a = 0; a < adj.size(); ++a) r.tests[a].corrected_p = adj[a];
  return r;
}

double fisher_pearson_skewness(const std::vector<double>& x) {
  if (x.size() < 3) throw AnalysisError("skewness needs at least three samples");
  const double n = static_cast<double>(x.size());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double m2 = 0, m3 = 0;
  for (double v : x) {
    m2 += (v - mean) * (v - mean) / n;
    m3 += (v - mean) * (v - mean) * (v - mean) / n;
  }
  if (m2 <= 0) throw AnalysisError("skewness of a constant sample is undefined");
  return m3 / std::pow(m2, 1.5);
}

// ---- output ---------------------------------------------------------------

namespace {

std::string colour(double v, double lo, double hi) {
  if (!std::isfinite(v)) return "#cccccc";
  const double t = hi > lo ? std::clamp((v - lo) / (hi - lo), 0.0, 1.0) : 0.5;
  // dark blue -> teal -> yellow
  const int r = static_cast<int>(std::lround(t < 0.5 ? 40 : 40 + (t - 0.5) * 2 * 213));
  const int g = static_cast<int>(std::lround(30 + t * 200));
  const int b = static_cast<int>(std::lround(t < 0.5 ? 110 + t * 60 : 140 - (t - 0.5) * 2 * 100));
  std::ostringstream s;
  s << "#" << std::hex << std::setfill('0') << std::setw(2) << r << std::setw(2) << g << std::setw(2) << b;
  return s.str();
}

std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

}  // namespace

void write_heatmap_svg(const std::filesystem::path& path, const Matrix& v, const std::string& title,
                       const std::vector<std::string>& rows, const std::vector<std::string>& cols) {
  const int cell = 28, left = 110, top = 60;
  const auto w = left + static_cast<int>(v.cols()) * cell + 20;
  const auto h = top + static_cast<int>(v.rows()) * cell + 20;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (ad::Index i = 0; i < v.size(); ++i) {
    if (std::isfinite(v.data()[i])) {
      lo = std::min(lo, v.data()[i]);
      hi = std::max(hi, v.data()[i]);
    }
  }
  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\">\n";
  s << "<text x=\"10\" y=\"20\" font-size=\"14\">" << esc(title) << "</text>\n";
  for (ad::Index i = 0; i < v.rows(); ++i) {
    if (static_cast<std::size_t>(i) < rows.size()) {
      s << "<text x=\"" << left - 4 << "\" y=\"" << top + i * cell + cell / 2 + 4
        << "\" font-size=\"10\" text-anchor=\"end\">" << esc(rows[static_cast<std::size_t>(i)]) << "</text>\n";
    }
    for (ad::Index j = 0; j < v.cols(); ++j) {
      const double x = v(i, j);
      s << "<rect x=\"" << left + j * cell << "\" y=\"" << top + i * cell << "\" width=\"" << cell << "\" height=\"" << cell
        << "\" fill=\"" << colour(x, lo, hi) << "\"/>";
      if (std::isfinite(x)) {
        s << "<text x=\"" << left + j * cell + cell / 2 << "\" y=\"" << top + i * cell + cell / 2 + 3
          << "\" font-size=\"8\" text-anchor=\"middle\" fill=\"white\">" << x << "</text>";
      }
      s << "\n";
    }
  }
  for (std::size_t j = 0; j < cols.size() && static_cast<ad::Index>(j) < v.cols(); ++j) {
    s << "<text x=\"" << left + static_cast<int>(j) * cell + cell / 2 << "\" y=\"" << top - 6
      << "\" font-size=\"10\" text-anchor=\"middle\">" << esc(cols[j]) << "</text>\n";
  }
  s << "</svg>\n";
  io::write_text(path, s.str());
}

void write_bars_svg(const std::filesystem::path& path, const std::vector<double>& values,
                    const std::vector<std::string>& labels, const std::string& title) {
  const int bar = 30, left = 40, top = 40, height = 200;
  double hi = 0;
  for (double v : values) {
    if (std::isfinite(v)) hi = std::max(hi, v);
  }
  if (hi <= 0) hi = 1;
  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + static_cast<int>(values.size()) * bar + 20
    << "\" height=\"" << top + height + 40 << "\" font-family=\"sans-serif\">\n";
  s << "<text x=\"10\" y=\"20\" font-size=\"14\">" << esc(title) << "</text>\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = std::isfinite(values[i]) ? values[i] : 0.0;
    const double bh = height * v / hi;
    const int x = left + static_cast<int>(i) * bar;
    s << "<rect x=\"" << x + 3 << "\" y=\"" << top + height - bh << "\" width=\"" << bar - 6 << "\" height=\"" << bh
      << "\" fill=\"#2a6f97\"/>";
    s << "<text x=\"" << x + bar / 2 << "\" y=\"" << top + height - bh - 3 << "\" font-size=\"8\" text-anchor=\"middle\">"
      << v << "</text>";
    if (i < labels.size()) {
      s << "<text x=\"" << x + bar / 2 << "\" y=\"" << top + height + 14 << "\" font-size=\"9\" text-anchor=\"middle\">"
        << esc(labels[i]) << "</text>";
    }
    s << "\n";
  }
  s << "</svg>\n";
  io::write_text(path, s.str());
}

void emit_report(const std::filesystem::path& dir, const ReportInputs& in) {
  std::filesystem::create_directories(dir);
  io::json figures = io::json::array();
  for (const auto& [name, m] : in.heatmaps) {
    write_heatmap_svg(dir / (name + ".svg"), m, name);
    figures.push_back(name + ".svg");
  }
  for (const auto& [name, bars] : in.bars) {
    write_bars_svg(dir / (name + ".svg"), bars.first, bars.second, name);
    figures.push_back(name + ".svg");
  }
  io::json summary = in.summary;
  summary["figures"] = figures;
  io::write_json(dir / "summary.json", summary);
}

}  // namespace volrep::analysis
