#pragma once

// Synthetic volumetric cohorts: studies of several 3D sequences with planted
// lesions, templated itemized reports, multi-label targets and subgroup
// attributes, persisted as raw float32 volumes plus a JSON manifest.

#include "volrep/io.hpp"
#include "volrep/vocabulary.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace volrep::cohort {

enum class Plane { axial, coronal, sagittal };
/// Signed axis order of the stored voxel grid. The first letter names the
/// direction of increasing axis-0 index; L* codes store axis 0 mirrored.
enum class Orientation { RAS, LAS, RPS, LPS };
enum class Split { retrospective, prospective };
enum class Priority { normal = 0, medium = 1, high = 2 };

std::string to_string(Plane p);
std::string to_string(Orientation o);
std::string to_string(Split s);
std::string to_string(Priority p);
Plane plane_from_string(const std::string& s);
Orientation orientation_from_string(const std::string& s);
Split split_from_string(const std::string& s);

struct Shape3 {
  int d0 = 0, d1 = 0, d2 = 0;
  std::size_t size() const { return static_cast<std::size_t>(d0) * d1 * d2; }
  int operator[](int axis) const { return axis == 0 ? d0 : axis == 1 ? d1 : d2; }
  bool operator==(const Shape3&) const = default;
};

/// Row-major (axis 2 fastest) intensities in [0,1].
struct VoxelVolume {
  Shape3 shape;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<float> data;

  std::size_t index(int i, int j, int k) const { return (static_cast<std::size_t>(i) * shape.d1 + j) * shape.d2 + k; }
  float at(int i, int j, int k) const { return data[index(i, j, k)]; }
  bool operator==(const VoxelVolume&) const = default;
};

struct SequenceMeta {
  std::string sequence_name;
  Plane plane = Plane::axial;
  Orientation orientation_code = Orientation::RAS;
  bool operator==(const SequenceMeta&) const = default;
};

struct Sequence {
  SequenceMeta meta;
  VoxelVolume volume;
  /// Ground-truth lesion labels per voxel: 0 = none, d+1 = diagnosis d.
  std::vector<std::uint8_t> lesion_mask;
  bool operator==(const Sequence&) const = default;
};

struct LabelVector {
  std::vector<std::uint8_t> bits;
  Priority priority = Priority::normal;
  bool operator==(const LabelVector&) const = default;
};

struct ReportDoc {
  std::string text;
  std::vector<std::int32_t> token_ids;
  bool operator==(const ReportDoc&) const = default;
};

struct SubgroupAttrs {
  int sex = 0;
  int age_band = 0;
  int race_code = 0;
  int insurance_code = 0;
  int scanner_code = 0;
  bool operator==(const SubgroupAttrs&) const = default;
};

inline constexpr const char* kSubgroupAttributes[] = {"sex", "age_band", "race_code", "insurance_code", "scanner_code"};
int subgroup_value(const SubgroupAttrs& s, const std::string& attribute);

struct StudyRecord {
  std::string study_id;
  std::string patient_id;
  std::string study_name;
  std::vector<Sequence> sequences;
  ReportDoc report;
  /// Same findings padded with non-informative boilerplate lines.
  std::string full_report;
  LabelVector labels;
  SubgroupAttrs subgroup;
  Split split = Split::retrospective;
  bool operator==(const StudyRecord&) const = default;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Load failure tied to one study of a manifest.
class LoadError : public std::runtime_error {
 public:
  LoadError(std::string study_id, const std::string& what)
      : std::runtime_error("study " + study_id + ": " + what), study_id_(std::move(study_id)) {}
  const std::string& study_id() const { return study_id_; }

 private:
  std::string study_id_;
};

struct CohortConfig {
  int n_studies = 200;
  /// Shape of an axial acquisition; coronal and sagittal volumes reuse the
  /// same extents with the thin axis moved to axis 1 or axis 0.
  Shape3 axial_shape{64, 64, 16};
  Shape3 patch{32, 32, 4};
  int n_diagnoses = 12;
  int min_sequences = 2;
  int max_sequences = 4;
  double prospective_fraction = 0.2;
  double lesion_contrast = 0.5;
  double lesion_radius = 0.15;
  double noise = 0.02;
  /// Fraction of sequences stored with a mirrored axis 0.
  double mirrored_fraction = 0.1;
  /// Probability of 0, 1, 2, 3, ... positive diagnoses per study.
  std::vector<double> positives_distribution{0.12, 0.48, 0.30, 0.10};
  /// Chance that an additional finding is the partner (d xor 1) of the first.
  double partner_cooccurrence = 0.35;
  /// Diagnosis -> priority; empty selects the default banding.
  std::vector<int> priority_map;
  std::vector<double> sex_probs{0.5, 0.5};
  std::vector<double> age_probs{0.15, 0.25, 0.35, 0.25};
  std::vector<double> race_probs{0.7, 0.15, 0.1, 0.05};
  std::vector<double> insurance_probs{0.6, 0.4};
  std::vector<double> scanner_probs{0.4, 0.3, 0.3};

  static CohortConfig from_kv(const io::KvConfig& kv);
  io::json to_json() const;
  static CohortConfig from_json(const io::json& doc);
  /// Throws ConfigError on inconsistent settings.
  void validate() const;
  std::vector<int> effective_priority_map() const;
};

/// Default banding: the first third of diagnoses normal, the last quarter
/// high, the rest medium. For 12 diagnoses: 0-3 normal, 4-8 medium, 9-11 high.
std::vector<int> default_priority_map(int n_diagnoses);

/// Highest priority over the positive bits; all-zero is normal.
Priority diagnosis_to_priority(const std::vector<std::uint8_t>& bits, const std::vector<int>& priority_map);

struct TemplateTable {
  std::vector<std::string> diagnosis_names;
  std::vector<std::string> locations;
  /// phrasings[d] holds at least two lines naming diagnosis d.
  std::vector<std::vector<std::string>> phrasings;
  std::vector<std::string> boilerplate;
  static TemplateTable standard(int n_diagnoses);
  /// Index of the diagnosis named in a (normalized) report line, if any.
  std::optional<int> diagnosis_of_line(const std::string& normalized_line) const;
};

inline constexpr const char* kNoFindings = "No acute findings.";

ReportDoc render_report(const LabelVector& labels, const TemplateTable& table, std::uint64_t seed,
                        const text::Vocabulary& vocab);
std::string render_full_report(const ReportDoc& itemized, const TemplateTable& table, std::uint64_t seed);

/// Every word the generator can emit in reports and names.
text::Vocabulary build_vocabulary(const TemplateTable& table);

inline constexpr int kManifestVersion = 1;

struct SequenceDescriptor {
  SequenceMeta meta;
  Shape3 shape;
  std::array<double, 3> spacing{};
  std::string volume_file;
  std::string mask_file;
  std::string descriptor_file;
  std::string volume_checksum;
  std::string mask_checksum;
};

struct StudyDescriptor {
  std::string study_id;
  std::string patient_id;
  std::string study_name;
  Split split = Split::retrospective;
  std::vector<std::uint8_t> label_bits;
  Priority priority = Priority::normal;
  SubgroupAttrs subgroup;
  std::string report;
  std::string full_report;
  std::vector<SequenceDescriptor> sequences;
};

struct CohortManifest {
  int version = kManifestVersion;
  std::uint64_t seed = 0;
  CohortConfig config;
  std::vector<StudyDescriptor> studies;

  io::json to_json() const;
  /// Checks version and unique study ids. Throws LoadError.
  static CohortManifest from_json(const io::json& doc);
};

/// Writes manifest.json, vocabulary.json and per-study volume/mask/descriptor
/// files under out_dir. Deterministic in (config, seed).
CohortManifest generate_cohort(const CohortConfig& config, std::uint64_t seed, const std::filesystem::path& out_dir);

/// Generates studies in memory without touching the filesystem.
std::vector<StudyRecord> generate_studies(const CohortConfig& config, std::uint64_t seed);

CohortManifest load_manifest(const std::filesystem::path& dir);
/// Loads and verifies every referenced file against the manifest.
std::vector<StudyRecord> load_cohort(const std::filesystem::path& dir);

/// Physical lesion zone centre for diagnosis d in normalized (x, y, z).
std::array<double, 3> lesion_zone(int d);
Shape3 volume_shape(const CohortConfig& config, Plane plane);

}  // namespace volrep::cohort
