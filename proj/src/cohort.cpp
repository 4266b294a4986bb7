#include "volrep/cohort.hpp"

#include <algorithm>
#include <cstring>
#include <iomanip>
#include <numeric>
#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

namespace volrep::cohort {

namespace fs = std::filesystem;

namespace {

constexpr int kMaxDiagnoses = 12;

struct SequenceType {
  const char* key;
  std::vector<std::string> variants;
  double tissue;
  double ventricle;
  double skull;
  double texture;
};

const std::vector<SequenceType>& sequence_types() {
  static const std::vector<SequenceType> types = {
      {"t1", {"T1", "T1W"}, 0.45, 0.15, 0.70, 0.05},
      {"t2", {"T2", "T2W"}, 0.35, 0.60, 0.30, 0.05},
      {"flair", {"FLAIR", "T2 FLAIR"}, 0.40, 0.10, 0.30, 0.04},
      {"t1post", {"T1 POST", "T1 +C"}, 0.45, 0.15, 0.75, 0.05},
      {"dwi", {"DWI", "DIFFUSION"}, 0.30, 0.10, 0.15, 0.03},
  };
  return types;
}

const std::vector<std::string>& plane_prefixes(Plane p) {
  static const std::vector<std::string> ax{"AX", "AXIAL", "Ax"};
  static const std::vector<std::string> cor{"COR", "CORONAL", "Cor"};
  static const std::vector<std::string> sag{"SAG", "SAGITTAL", "Sag"};
  return p == Plane::axial ? ax : p == Plane::coronal ? cor : sag;
}

const std::vector<std::string>& study_names() {
  static const std::vector<std::string> names = {
      "MRI BRAIN WITH AND WITHOUT CONTRAST", "MRI BRAIN WITHOUT CONTRAST", "MRI HEAD STROKE PROTOCOL",
      "MRI BRAIN TUMOR PROTOCOL", "MRI BRAIN SEIZURE PROTOCOL"};
  return names;
}

const double kScannerGain[] = {0.97, 1.0, 1.03};

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return std::mt19937_64(seq);
}

int draw(const std::vector<double>& probs, std::mt19937_64& rng) {
  std::discrete_distribution<int> dist(probs.begin(), probs.end());
  return dist(rng);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

double head_radius(const std::array<double, 3>& p) {
  const double rx = (p[0] - 0.5) / 0.44, ry = (p[1] - 0.5) / 0.47, rz = (p[2] - 0.5) / 0.44;
  return std::sqrt(rx * rx + ry * ry + rz * rz);
}

double anatomy(const std::array<double, 3>& p, const SequenceType& t) {
  const double r = head_radius(p);
  if (r > 1.0) return 0.0;
  if (r > 0.9) return t.skull;
  for (double side : {-1.0, 1.0}) {
    const double vx = (p[0] - 0.5 - side * 0.06) / 0.035;
    const double vy = (p[1] - 0.5) / 0.13;
    const double vz = (p[2] - 0.52) / 0.065;
    if (vx * vx + vy * vy + vz * vz <= 1.0) return t.ventricle;
  }
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const double texture = t.texture * std::sin(two_pi * (4.0 * p[0] + 1.5 * p[1])) * std::cos(two_pi * 2.5 * p[2]);
  return t.tissue + texture;
}

struct Lesion {
  int diagnosis;
  std::array<double, 3> center;
  double radius;
};

// Normalized-distance membership and a [0,1] interior profile.
bool in_lesion(const Lesion& l, const std::array<double, 3>& p, double& profile) {
  std::array<double, 3> q;
  for (int i = 0; i < 3; ++i) q[i] = (p[i] - l.center[i]) / l.radius;
  const double r = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2]);
  profile = std::max(0.0, 1.0 - r);
  switch (l.diagnosis % 4) {
    case 0:
      return r <= 1.0;
    case 1:
      return r >= 0.55 && r <= 1.0;
    case 2:
      return std::max({std::abs(q[0]), std::abs(q[1]), std::abs(q[2])}) <= 0.8;
    default: {
      const double a = q[0] / 0.55, b = q[1] / 1.5, c = q[2] / 0.55;
      return a * a + b * b + c * c <= 1.0;
    }
  }
}

std::array<double, 3> voxel_position(const Shape3& s, Orientation o, int i, int j, int k) {
  std::array<double, 3> p{(i + 0.5) / s.d0, (j + 0.5) / s.d1, (k + 0.5) / s.d2};
  const std::string code = to_string(o);
  if (code[0] == 'L') p[0] = 1.0 - p[0];
  if (code[1] == 'P') p[1] = 1.0 - p[1];
  return p;
}

Sequence make_sequence(const CohortConfig& cfg, const SequenceMeta& meta, const SequenceType& type, double gain,
                       const std::vector<Lesion>& lesions, std::mt19937_64& rng) {
  Sequence seq;
  seq.meta = meta;
  auto& vol = seq.volume;
  vol.shape = volume_shape(cfg, meta.plane);
  for (int a = 0; a < 3; ++a) vol.spacing[static_cast<std::size_t>(a)] = 240.0 / vol.shape[a];
  vol.data.assign(vol.shape.size(), 0.0f);
  seq.lesion_mask.assign(vol.shape.size(), 0);

  std::normal_distribution<double> noise(0.0, cfg.noise);
  std::vector<double> bg(vol.shape.size());
  for (int i = 0; i < vol.shape.d0; ++i) {
    for (int j = 0; j < vol.shape.d1; ++j) {
      for (int k = 0; k < vol.shape.d2; ++k) {
        const auto p = voxel_position(vol.shape, meta.orientation_code, i, j, k);
        double v = anatomy(p, type);
        if (v > 0.0) v = v * gain + noise(rng);
        bg[vol.index(i, j, k)] = std::clamp(v, 0.0, 1.0);
      }
    }
  }

  std::vector<double> value = bg;
  for (const auto& lesion : lesions) {
    std::vector<std::pair<std::size_t, double>> voxels;
    double nearest = 1e9;
    std::size_t nearest_idx = 0;
    for (int i = 0; i < vol.shape.d0; ++i) {
      for (int j = 0; j < vol.shape.d1; ++j) {
        for (int k = 0; k < vol.shape.d2; ++k) {
          const auto p = voxel_position(vol.shape, meta.orientation_code, i, j, k);
          double profile = 0.0;
          const std::size_t idx = vol.index(i, j, k);
          // lesions stay inside the brain, never in skull or air
          if (in_lesion(lesion, p, profile) && head_radius(p) <= 0.9) voxels.emplace_back(idx, profile);
          double d2 = 0.0;
          for (int a = 0; a < 3; ++a) d2 += (p[a] - lesion.center[a]) * (p[a] - lesion.center[a]);
          if (d2 < nearest) {
            nearest = d2;
            nearest_idx = idx;
          }
        }
      }
    }
    if (voxels.empty()) voxels.emplace_back(nearest_idx, 1.0);
    double local = 0.0;
    for (const auto& [idx, _] : voxels) local += bg[idx];
    local /= static_cast<double>(voxels.size());
    for (const auto& [idx, profile] : voxels) {
      value[idx] = std::min(1.0, local + cfg.lesion_contrast + 0.05 * profile);
      seq.lesion_mask[idx] = static_cast<std::uint8_t>(lesion.diagnosis + 1);
    }
  }
  for (std::size_t i = 0; i < value.size(); ++i) vol.data[i] = static_cast<float>(value[i]);
  return seq;
}

struct PatientPlan {
  std::string patient_id;
  Split split;
  int n_studies;
};

std::vector<PatientPlan> plan_patients(const CohortConfig& cfg, std::uint64_t seed) {
  auto rng = make_rng(seed, 0xC0407, 0);
  const int n_pro = static_cast<int>(std::lround(cfg.prospective_fraction * cfg.n_studies));
  std::vector<PatientPlan> plans;
  int pid = 0;
  for (auto [split, count] : {std::pair{Split::retrospective, cfg.n_studies - n_pro}, std::pair{Split::prospective, n_pro}}) {
    int remaining = count;
    while (remaining > 0) {
      const int want = 1 + draw({0.7, 0.2, 0.1}, rng);
      const int n = std::min(want, remaining);
      std::ostringstream id;
      id << "P" << std::setw(4) << std::setfill('0') << pid++;
      plans.push_back({id.str(), split, n});
      remaining -= n;
    }
  }
  return plans;
}

std::vector<std::uint8_t> draw_labels(const CohortConfig& cfg, std::mt19937_64& rng) {
  const int d = cfg.n_diagnoses;
  std::vector<std::uint8_t> bits(static_cast<std::size_t>(d), 0);
  const int k = std::min(draw(cfg.positives_distribution, rng), d);
  if (k == 0) return bits;
  const int first = uniform_int(rng, 0, d - 1);
  bits[static_cast<std::size_t>(first)] = 1;
  for (int n = 1; n < k; ++n) {
    const int partner = first ^ 1;
    if (partner < d && !bits[static_cast<std::size_t>(partner)] && uniform(rng, 0.0, 1.0) < cfg.partner_cooccurrence) {
      bits[static_cast<std::size_t>(partner)] = 1;
      continue;
    }
    std::vector<int> free;
    for (int i = 0; i < d; ++i) {
      if (!bits[static_cast<std::size_t>(i)]) free.push_back(i);
    }
    bits[static_cast<std::size_t>(free[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(free.size()) - 1))])] = 1;
  }
  return bits;
}

StudyRecord make_study(const CohortConfig& cfg, std::uint64_t seed, int index, const PatientPlan& patient,
                       const SubgroupAttrs& patient_attrs, const TemplateTable& table, const text::Vocabulary& vocab) {
  auto rng = make_rng(seed, 0x57D1, static_cast<std::uint64_t>(index));
  StudyRecord st;
  std::ostringstream id;
  id << "S" << std::setw(4) << std::setfill('0') << index;
  st.study_id = id.str();
  st.patient_id = patient.patient_id;
  st.split = patient.split;
  st.study_name = study_names()[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(study_names().size()) - 1))];
  st.subgroup = patient_attrs;
  st.subgroup.scanner_code = draw(cfg.scanner_probs, rng);

  st.labels.bits = draw_labels(cfg, rng);
  st.labels.priority = diagnosis_to_priority(st.labels.bits, cfg.effective_priority_map());
  st.report = render_report(st.labels, table, seed * 1000003ULL + static_cast<std::uint64_t>(index), vocab);
  st.full_report = render_full_report(st.report, table, seed * 7919ULL + static_cast<std::uint64_t>(index));

  std::vector<Lesion> lesions;
  for (int d = 0; d < cfg.n_diagnoses; ++d) {
    if (!st.labels.bits[static_cast<std::size_t>(d)]) continue;
    auto c = lesion_zone(d);
    for (auto& v : c) v += uniform(rng, -0.03, 0.03);
    lesions.push_back({d, c, cfg.lesion_radius * uniform(rng, 0.85, 1.15)});
  }

  const int n_seq = uniform_int(rng, cfg.min_sequences, cfg.max_sequences);
  std::vector<int> type_order(sequence_types().size());
  std::iota(type_order.begin(), type_order.end(), 0);
  std::shuffle(type_order.begin(), type_order.end(), rng);
  const double gain = kScannerGain[std::clamp(st.subgroup.scanner_code, 0, 2)];
  for (int s = 0; s < n_seq; ++s) {
    const auto& type = sequence_types()[static_cast<std::size_t>(type_order[static_cast<std::size_t>(s % type_order.size())])];
    SequenceMeta meta;
    meta.plane = static_cast<Plane>(draw({0.5, 0.25, 0.25}, rng));
    meta.orientation_code = uniform(rng, 0.0, 1.0) < cfg.mirrored_fraction ? Orientation::LAS : Orientation::RAS;
    const auto& prefixes = plane_prefixes(meta.plane);
    meta.sequence_name = prefixes[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(prefixes.size()) - 1))] +
                         " " + type.variants[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(type.variants.size()) - 1))];
    st.sequences.push_back(make_sequence(cfg, meta, type, gain, lesions, rng));
  }
  return st;
}

io::json shape_json(const Shape3& s) { return io::json::array({s.d0, s.d1, s.d2}); }
Shape3 shape_from_json(const io::json& j) { return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>()}; }

Shape3 shape_from_list(const std::vector<double>& v, const char* key) {
  if (v.size() != 3) throw ConfigError(std::string(key) + " must have three entries");
  return {static_cast<int>(v[0]), static_cast<int>(v[1]), static_cast<int>(v[2])};
}

std::string checksum_of(std::span<const unsigned char> bytes) { return io::hex64(io::fnv1a(bytes)); }

}  // namespace

// ---- enums --------------------------------------------------------------

std::string to_string(Plane p) {
  switch (p) {
    case Plane::axial: return "axial";
    case Plane::coronal: return "coronal";
    case Plane::sagittal: return "sagittal";
  }
  return "?";
}

std::string to_string(Orientation o) {
  switch (o) {
    case Orientation::RAS: return "RAS";
    case Orientation::LAS: return "LAS";
    case Orientation::RPS: return "RPS";
    case Orientation::LPS: return "LPS";
  }
  return "?";
}

std::string to_string(Split s) { return s == Split::retrospective ? "retrospective" : "prospective"; }

std::string to_string(Priority p) {
  switch (p) {
    case Priority::normal: return "normal";
    case Priority::medium: return "medium";
    case Priority::high: return "high";
  }
  return "?";
}

Plane plane_from_string(const std::string& s) {
  if (s == "axial") return Plane::axial;
  if (s == "coronal") return Plane::coronal;
  if (s == "sagittal") return Plane::sagittal;
  throw std::invalid_argument("unknown plane: " + s);
}

Orientation orientation_from_string(const std::string& s) {
  for (auto o : {Orientation::RAS, Orientation::LAS, Orientation::RPS, Orientation::LPS}) {
    if (to_string(o) == s) return o;
  }
  throw std::invalid_argument("unknown orientation code: " + s);
}

Split split_from_string(const std::string& s) {
  if (s == "retrospective") return Split::retrospective;
  if (s == "prospective") return Split::prospective;
  throw std::invalid_argument("unknown split: " + s);
}

int subgroup_value(const SubgroupAttrs& s, const std::string& attribute) {
  if (attribute == "sex") return s.sex;
  if (attribute == "age_band") return s.age_band;
  if (attribute == "race_code") return s.race_code;
  if (attribute == "insurance_code") return s.insurance_code;
  if (attribute == "scanner_code") return s.scanner_code;
  throw std::invalid_argument("unknown subgroup attribute: " + attribute);
}

// ---- config -------------------------------------------------------------

std::vector<int> default_priority_map(int n) {
  std::vector<int> map(static_cast<std::size_t>(n));
  const int normal_end = n / 3;
  const int high_begin = n - n / 4;
  for (int d = 0; d < n; ++d) map[static_cast<std::size_t>(d)] = d < normal_end ? 0 : d >= high_begin ? 2 : 1;
  return map;
}

std::vector<int> CohortConfig::effective_priority_map() const {
  return priority_map.empty() ? default_priority_map(n_diagnoses) : priority_map;
}

void CohortConfig::validate() const {
  if (n_studies < 1) throw ConfigError("n_studies must be positive");
  if (n_diagnoses < 1 || n_diagnoses > kMaxDiagnoses) {
    throw ConfigError("n_diagnoses must be in [1, " + std::to_string(kMaxDiagnoses) + "]");
  }
  if (min_sequences < 2 || max_sequences < min_sequences) throw ConfigError("need 2 <= min_sequences <= max_sequences");
  if (prospective_fraction < 0.0 || prospective_fraction > 1.0) throw ConfigError("prospective_fraction outside [0,1]");
  if (patch.d0 < 1 || patch.d1 < 1 || patch.d2 < 1) throw ConfigError("patch dims must be positive");
  for (auto plane : {Plane::axial, Plane::coronal, Plane::sagittal}) {
    const Shape3 s = volume_shape(*this, plane);
    const Shape3 p = plane == Plane::axial     ? patch
                     : plane == Plane::coronal ? Shape3{patch.d0, patch.d2, patch.d1}
                                               : Shape3{patch.d2, patch.d1, patch.d0};
    if (s.d0 < p.d0 || s.d1 < p.d1 || s.d2 < p.d2) {
      throw ConfigError("volume shape smaller than patch dims for " + to_string(plane) + " plane");
    }
  }
  if (lesion_contrast <= 0.0 || lesion_contrast >= 1.0) throw ConfigError("lesion_contrast must be in (0,1)");
  if (!priority_map.empty()) {
    if (static_cast<int>(priority_map.size()) != n_diagnoses) throw ConfigError("priority_map must have n_diagnoses entries");
    for (int p : priority_map) {
      if (p < 0 || p > 2) throw ConfigError("priority_map entries must be 0, 1 or 2");
    }
  }
  for (const auto* probs : {&positives_distribution, &sex_probs, &age_probs, &race_probs, &insurance_probs, &scanner_probs}) {
    if (probs->empty()) throw ConfigError("empty probability list");
    for (double p : *probs) {
      if (p < 0.0) throw ConfigError("negative probability");
    }
  }
  if (scanner_probs.size() > 3) throw ConfigError("at most three scanner codes are modelled");
}

CohortConfig CohortConfig::from_kv(const io::KvConfig& kv) {
  CohortConfig c;
  c.n_studies = kv.get("n_studies", c.n_studies);
  if (kv.has("shape")) c.axial_shape = shape_from_list(kv.get_list("shape", {}), "shape");
  if (kv.has("patch")) c.patch = shape_from_list(kv.get_list("patch", {}), "patch");
  c.n_diagnoses = kv.get("n_diagnoses", c.n_diagnoses);
  c.min_sequences = kv.get("min_sequences", c.min_sequences);
  c.max_sequences = kv.get("max_sequences", c.max_sequences);
  c.prospective_fraction = kv.get("prospective_fraction", c.prospective_fraction);
  c.lesion_contrast = kv.get("lesion_contrast", c.lesion_contrast);
  c.lesion_radius = kv.get("lesion_radius", c.lesion_radius);
  c.noise = kv.get("noise", c.noise);
  c.mirrored_fraction = kv.get("mirrored_fraction", c.mirrored_fraction);
  c.positives_distribution = kv.get_list("positives_distribution", c.positives_distribution);
  c.partner_cooccurrence = kv.get("partner_cooccurrence", c.partner_cooccurrence);
  if (kv.has("priority_map")) {
    c.priority_map.clear();
    for (double v : kv.get_list("priority_map", {})) c.priority_map.push_back(static_cast<int>(v));
  }
  c.sex_probs = kv.get_list("sex_probs", c.sex_probs);
  c.age_probs = kv.get_list("age_probs", c.age_probs);
  c.race_probs = kv.get_list("race_probs", c.race_probs);
  c.insurance_probs = kv.get_list("insurance_probs", c.insurance_probs);
  c.scanner_probs = kv.get_list("scanner_probs", c.scanner_probs);
  c.validate();
  return c;
}

io::json CohortConfig::to_json() const {
  return {{"n_studies", n_studies},
          {"shape", shape_json(axial_shape)},
          {"patch", shape_json(patch)},
          {"n_diagnoses", n_diagnoses},
          {"min_sequences", min_sequences},
          {"max_sequences", max_sequences},
          {"prospective_fraction", prospective_fraction},
          {"lesion_contrast", lesion_contrast},
          {"lesion_radius", lesion_radius},
          {"noise", noise},
          {"mirrored_fraction", mirrored_fraction},
          {"positives_distribution", positives_distribution},
          {"partner_cooccurrence", partner_cooccurrence},
          {"priority_map", effective_priority_map()},
          {"sex_probs", sex_probs},
          {"age_probs", age_probs},
          {"race_probs", race_probs},
          {"insurance_probs", insurance_probs},
          {"scanner_probs", scanner_probs}};
}

CohortConfig CohortConfig::from_json(const io::json& j) {
  CohortConfig c;
  c.n_studies = j.at("n_studies").get<int>();
  c.axial_shape = shape_from_json(j.at("shape"));
  c.patch = shape_from_json(j.at("patch"));
  c.n_diagnoses = j.at("n_diagnoses").get<int>();
  c.min_sequences = j.at("min_sequences").get<int>();
  c.max_sequences = j.at("max_sequences").get<int>();
  c.prospective_fraction = j.at("prospective_fraction").get<double>();
  c.lesion_contrast = j.at("lesion_contrast").get<double>();
  c.lesion_radius = j.at("lesion_radius").get<double>();
  c.noise = j.at("noise").get<double>();
  c.mirrored_fraction = j.at("mirrored_fraction").get<double>();
  c.positives_distribution = j.at("positives_distribution").get<std::vector<double>>();
  c.partner_cooccurrence = j.at("partner_cooccurrence").get<double>();
  c.priority_map = j.at("priority_map").get<std::vector<int>>();
  c.sex_probs = j.at("sex_probs").get<std::vector<double>>();
  c.age_probs = j.at("age_probs").get<std::vector<double>>();
  c.race_probs = j.at("race_probs").get<std::vector<double>>();
  c.insurance_probs = j.at("insurance_probs").get<std::vector<double>>();
  c.scanner_probs = j.at("scanner_probs").get<std::vector<double>>();
  return c;
}

Shape3 volume_shape(const CohortConfig& cfg, Plane plane) {
  const Shape3& a = cfg.axial_shape;
  switch (plane) {
    case Plane::axial: return a;
    case Plane::coronal: return {a.d0, a.d2, a.d1};
    case Plane::sagittal: return {a.d2, a.d1, a.d0};
  }
  return a;
}

std::array<double, 3> lesion_zone(int d) {
  static const std::array<std::array<double, 3>, kMaxDiagnoses> zones = {{
      {0.35, 0.35, 0.38}, {0.65, 0.35, 0.38}, {0.35, 0.65, 0.38}, {0.65, 0.65, 0.38},
      {0.35, 0.35, 0.64}, {0.65, 0.35, 0.64}, {0.35, 0.65, 0.64}, {0.65, 0.65, 0.64},
      {0.50, 0.20, 0.50}, {0.50, 0.80, 0.50}, {0.25, 0.50, 0.50}, {0.75, 0.50, 0.50},
  }};
  return zones.at(static_cast<std::size_t>(d));
}

Priority diagnosis_to_priority(const std::vector<std::uint8_t>& bits, const std::vector<int>& priority_map) {
  int best = 0;
  for (std::size_t d = 0; d < bits.size(); ++d) {
    if (bits[d]) best = std::max(best, priority_map.at(d));
  }
  return static_cast<Priority>(best);
}

// ---- reports ------------------------------------------------------------

TemplateTable TemplateTable::standard(int n_diagnoses) {
  static const std::vector<std::string> names = {
      "chronic microvascular ischemic change", "arachnoid cyst", "developmental venous anomaly", "pineal cyst",
      "meningioma", "low grade glioma", "cavernous malformation", "chronic infarct",
      "demyelinating lesion", "acute infarct", "intraparenchymal hemorrhage", "brain abscess"};
  static const std::vector<std::string> locations = {
      "right frontal lobe", "left frontal lobe", "right occipital lobe", "left occipital lobe",
      "right parietal lobe", "left parietal lobe", "right parietooccipital region", "left parietooccipital region",
      "anterior midline", "posterior fossa", "right temporal lobe", "left temporal lobe"};
  TemplateTable t;
  for (int d = 0; d < n_diagnoses; ++d) {
    const auto& n = names.at(static_cast<std::size_t>(d));
    const auto& l = locations.at(static_cast<std::size_t>(d));
    t.diagnosis_names.push_back(n);
    t.locations.push_back(l);
    t.phrasings.push_back({capitalize(n) + " in the " + l + ".", "There is " + n + " involving the " + l + ".",
                           "Findings compatible with " + n + " in the " + l + "."});
  }
  t.boilerplate = {"Technique: multiplanar multisequence imaging of the brain was performed.",
                   "Comparison: none available.",
                   "Clinical history: headache.",
                   "Clinical history: dizziness and nausea.",
                   "The visualized orbits are unremarkable.",
                   "The paranasal sinuses and mastoid air cells are clear.",
                   "The calvarium is intact.",
                   "Flow voids of the major intracranial vessels are preserved.",
                   "Impression: see findings above."};
  return t;
}

std::optional<int> TemplateTable::diagnosis_of_line(const std::string& normalized_line) const {
  std::optional<int> found;
  for (std::size_t d = 0; d < diagnosis_names.size(); ++d) {
    if (normalized_line.find(text::normalize(diagnosis_names[d])) != std::string::npos) {
      if (found) return std::nullopt;
      found = static_cast<int>(d);
    }
  }
  return found;
}

ReportDoc render_report(const LabelVector& labels, const TemplateTable& table, std::uint64_t seed,
                        const text::Vocabulary& vocab) {
  std::mt19937_64 rng(seed);
  ReportDoc doc;
  for (std::size_t d = 0; d < labels.bits.size(); ++d) {
    if (!labels.bits[d]) continue;
    const auto& options = table.phrasings.at(d);
    const auto choice = std::uniform_int_distribution<std::size_t>(0, options.size() - 1)(rng);
    if (!doc.text.empty()) doc.text += "\n";
    doc.text += options[choice];
  }
  if (doc.text.empty()) doc.text = kNoFindings;
  doc.token_ids = vocab.encode(doc.text);
  return doc;
}

std::string render_full_report(const ReportDoc& itemized, const TemplateTable& table, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> idx(table.boilerplate.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t before = 2;
  const std::size_t after = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
  std::string out;
  auto line = [&](const std::string& s) {
    if (!out.empty()) out += "\n";
    out += s;
  };
  for (std::size_t i = 0; i < before; ++i) line(table.boilerplate[idx[i]]);
  line(itemized.text);
  for (std::size_t i = 0; i < after; ++i) line(table.boilerplate[idx[before + i]]);
  return out;
}

text::Vocabulary build_vocabulary(const TemplateTable& table) {
  std::vector<std::string> corpus{kNoFindings};
  for (const auto& ph : table.phrasings) corpus.insert(corpus.end(), ph.begin(), ph.end());
  corpus.insert(corpus.end(), table.boilerplate.begin(), table.boilerplate.end());
  corpus.insert(corpus.end(), study_names().begin(), study_names().end());
  for (auto plane : {Plane::axial, Plane::coronal, Plane::sagittal}) {
    for (const auto& prefix : plane_prefixes(plane)) {
      for (const auto& t : sequence_types()) {
        for (const auto& v : t.variants) corpus.push_back(prefix + " " + v);
      }
    }
  }
  return text::Vocabulary::from_corpus(corpus);
}

// ---- generation ---------------------------------------------------------

std::vector<StudyRecord> generate_studies(const CohortConfig& config, std::uint64_t seed) {
  config.validate();
  const auto table = TemplateTable::standard(config.n_diagnoses);
  const auto vocab = build_vocabulary(table);
  const auto plans = plan_patients(config, seed);
  std::vector<StudyRecord> studies;
  int index = 0;
  for (std::size_t p = 0; p < plans.size(); ++p) {
    auto rng = make_rng(seed, 0xA77, p);
    SubgroupAttrs attrs;
    attrs.sex = draw(config.sex_probs, rng);
    attrs.age_band = draw(config.age_probs, rng);
    attrs.race_code = draw(config.race_probs, rng);
    attrs.insurance_code = draw(config.insurance_probs, rng);
    for (int s = 0; s < plans[p].n_studies; ++s) {
      studies.push_back(make_study(config, seed, index++, plans[p], attrs, table, vocab));
    }
  }
  return studies;
}

CohortManifest generate_cohort(const CohortConfig& config, std::uint64_t seed, const fs::path& out_dir) {
  const auto studies = generate_studies(config, seed);
  const auto table = TemplateTable::standard(config.n_diagnoses);
  fs::create_directories(out_dir);

  CohortManifest manifest;
  manifest.seed = seed;
  manifest.config = config;
  for (const auto& st : studies) {
    StudyDescriptor sd;
    sd.study_id = st.study_id;
    sd.patient_id = st.patient_id;
    sd.study_name = st.study_name;
    sd.split = st.split;
    sd.label_bits = st.labels.bits;
    sd.priority = st.labels.priority;
    sd.subgroup = st.subgroup;
    sd.report = st.report.text;
    sd.full_report = st.full_report;
    for (std::size_t s = 0; s < st.sequences.size(); ++s) {
      const auto& seq = st.sequences[s];
      const std::string stem = "studies/" + st.study_id + "/seq" + std::to_string(s);
      SequenceDescriptor d;
      d.meta = seq.meta;
      d.shape = seq.volume.shape;
      d.spacing = seq.volume.spacing;
      d.volume_file = stem + ".raw";
      d.mask_file = stem + ".mask";
      d.descriptor_file = stem + ".json";
      const std::span<const unsigned char> vbytes(reinterpret_cast<const unsigned char*>(seq.volume.data.data()),
                                                  seq.volume.data.size() * sizeof(float));
      io::write_bytes(out_dir / d.volume_file, vbytes);
      io::write_bytes(out_dir / d.mask_file, seq.lesion_mask);
      d.volume_checksum = checksum_of(vbytes);
      d.mask_checksum = checksum_of(seq.lesion_mask);
      io::write_json(out_dir / d.descriptor_file, {{"shape", shape_json(d.shape)},
                                                    {"spacing", d.spacing},
                                                    {"orientation_code", to_string(d.meta.orientation_code)},
                                                    {"plane", to_string(d.meta.plane)},
                                                    {"dtype", "float32le"}});
      sd.sequences.push_back(std::move(d));
    }
    manifest.studies.push_back(std::move(sd));
  }
  io::write_json(out_dir / "manifest.json", manifest.to_json());
  io::write_json(out_dir / "vocabulary.json", build_vocabulary(table).to_json());
  return manifest;
}

io::json CohortManifest::to_json() const {
  io::json studies_json = io::json::array();
  for (const auto& s : studies) {
    io::json seqs = io::json::array();
    for (const auto& q : s.sequences) {
      seqs.push_back({{"sequence_name", q.meta.sequence_name},
                      {"plane", to_string(q.meta.plane)},
                      {"orientation_code", to_string(q.meta.orientation_code)},
                      {"shape", shape_json(q.shape)},
                      {"spacing", q.spacing},
                      {"volume", q.volume_file},
                      {"mask", q.mask_file},
                      {"descriptor", q.descriptor_file},
                      {"volume_checksum", q.volume_checksum},
                      {"mask_checksum", q.mask_checksum}});
    }
    studies_json.push_back({{"study_id", s.study_id},
                            {"patient_id", s.patient_id},
                            {"study_name", s.study_name},
                            {"split", to_string(s.split)},
                            {"labels", s.label_bits},
                            {"priority", static_cast<int>(s.priority)},
                            {"subgroup",
                             {{"sex", s.subgroup.sex},
                              {"age_band", s.subgroup.age_band},
                              {"race_code", s.subgroup.race_code},
                              {"insurance_code", s.subgroup.insurance_code},
                              {"scanner_code", s.subgroup.scanner_code}}},
                            {"report", s.report},
                            {"full_report", s.full_report},
                            {"sequences", seqs}});
  }
  return {{"format", "volrep-cohort"}, {"version", version}, {"seed", seed}, {"config", config.to_json()},
          {"studies", studies_json}};
}

CohortManifest CohortManifest::from_json(const io::json& doc) {
  CohortManifest m;
  m.version = doc.value("version", -1);
  if (m.version != kManifestVersion) {
    throw LoadError("<manifest>", "unknown manifest version " + std::to_string(m.version));
  }
  m.seed = doc.at("seed").get<std::uint64_t>();
  m.config = CohortConfig::from_json(doc.at("config"));
  std::set<std::string> seen;
  for (const auto& s : doc.at("studies")) {
    StudyDescriptor sd;
    sd.study_id = s.at("study_id").get<std::string>();
    if (!seen.insert(sd.study_id).second) throw LoadError(sd.study_id, "duplicate study_id in manifest");
    try {
      sd.patient_id = s.at("patient_id").get<std::string>();
      sd.study_name = s.at("study_name").get<std::string>();
      sd.split = split_from_string(s.at("split").get<std::string>());
      sd.label_bits = s.at("labels").get<std::vector<std::uint8_t>>();
      sd.priority = static_cast<Priority>(s.at("priority").get<int>());
      const auto& g = s.at("subgroup");
      sd.subgroup = {g.at("sex").get<int>(), g.at("age_band").get<int>(), g.at("race_code").get<int>(),
                     g.at("insurance_code").get<int>(), g.at("scanner_code").get<int>()};
      sd.report = s.at("report").get<std::string>();
      sd.full_report = s.at("full_report").get<std::string>();
      for (const auto& q : s.at("sequences")) {
        SequenceDescriptor d;
        d.meta.sequence_name = q.at("sequence_name").get<std::string>();
        d.meta.plane = plane_from_string(q.at("plane").get<std::string>());
        d.meta.orientation_code = orientation_from_string(q.at("orientation_code").get<std::string>());
        d.shape = shape_from_json(q.at("shape"));
        d.spacing = q.at("spacing").get<std::array<double, 3>>();
        d.volume_file = q.at("volume").get<std::string>();
        d.mask_file = q.at("mask").get<std::string>();
        d.descriptor_file = q.at("descriptor").get<std::string>();
        d.volume_checksum = q.at("volume_checksum").get<std::string>();
        d.mask_checksum = q.at("mask_checksum").get<std::string>();
        sd.sequences.push_back(std::move(d));
      }
    } catch (const LoadError&) {
      throw;
    } catch (const std::exception& e) {
      throw LoadError(sd.study_id, std::string("malformed manifest entry: ") + e.what());
    }
    if (sd.sequences.size() < 2) throw LoadError(sd.study_id, "fewer than 2 sequences");
    m.studies.push_back(std::move(sd));
  }
  return m;
}

CohortManifest load_manifest(const fs::path& dir) {
  const auto path = dir / "manifest.json";
  if (!fs::exists(path)) throw io::IoError("no manifest.json in " + dir.string());
  return CohortManifest::from_json(io::read_json(path));
}

std::vector<StudyRecord> load_cohort(const fs::path& dir) {
  const auto manifest = load_manifest(dir);
  const auto table = TemplateTable::standard(manifest.config.n_diagnoses);
  const auto vocab = fs::exists(dir / "vocabulary.json") ? text::Vocabulary::from_json(io::read_json(dir / "vocabulary.json"))
                                                         : build_vocabulary(table);
  std::vector<StudyRecord> out;
  for (const auto& sd : manifest.studies) {
    StudyRecord st;
    st.study_id = sd.study_id;
    st.patient_id = sd.patient_id;
    st.study_name = sd.study_name;
    st.split = sd.split;
    st.labels.bits = sd.label_bits;
    st.labels.priority = sd.priority;
    st.subgroup = sd.subgroup;
    st.report.text = sd.report;
    st.report.token_ids = vocab.encode(sd.report);
    st.full_report = sd.full_report;
    for (const auto& d : sd.sequences) {
      for (const auto* f : {&d.volume_file, &d.mask_file, &d.descriptor_file}) {
        if (!fs::exists(dir / *f)) throw LoadError(sd.study_id, "missing file " + *f);
      }
      const auto vbytes = io::read_bytes(dir / d.volume_file);
      if (checksum_of(vbytes) != d.volume_checksum) throw LoadError(sd.study_id, "checksum mismatch for " + d.volume_file);
      const auto mbytes = io::read_bytes(dir / d.mask_file);
      if (checksum_of(mbytes) != d.mask_checksum) throw LoadError(sd.study_id, "checksum mismatch for " + d.mask_file);
      const auto desc = io::read_json(dir / d.descriptor_file);
      if (shape_from_json(desc.at("shape")) != d.shape) throw LoadError(sd.study_id, "descriptor shape disagrees with manifest");
      if (vbytes.size() != d.shape.size() * sizeof(float) || mbytes.size() != d.shape.size()) {
        throw LoadError(sd.study_id, "file size does not match shape for " + d.volume_file);
      }
      Sequence seq;
      seq.meta = d.meta;
      seq.volume.shape = d.shape;
      seq.volume.spacing = d.spacing;
      seq.volume.data.resize(d.shape.size());
      std::memcpy(seq.volume.data.data(), vbytes.data(), vbytes.size());
      seq.lesion_mask = mbytes;
      st.sequences.push_back(std::move(seq));
    }
    out.push_back(std::move(st));
  }
  return out;
}

}  // namespace volrep::cohort
