#include "volrep/cohort.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

using namespace volrep::cohort;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("volrep_test_cohort_" + name);
  fs::remove_all(p);
  return p;
}

CohortConfig small(int n, int d) {
  CohortConfig c;
  c.n_studies = n;
  c.n_diagnoses = d;
  c.priority_map.clear();
  return c;
}

}  // namespace

TEST(Cohort, SameSeedGivesByteIdenticalManifest) {
  const auto cfg = small(4, 2);
  const auto a = scratch("det_a"), b = scratch("det_b");
  generate_cohort(cfg, 7, a);
  generate_cohort(cfg, 7, b);
  EXPECT_EQ(volrep::io::read_text(a / "manifest.json"), volrep::io::read_text(b / "manifest.json"));
  EXPECT_EQ(volrep::io::read_bytes(a / "studies/S0000/seq0.raw"), volrep::io::read_bytes(b / "studies/S0000/seq0.raw"));
  const auto c = scratch("det_c");
  generate_cohort(cfg, 8, c);
  EXPECT_NE(volrep::io::read_text(a / "manifest.json"), volrep::io::read_text(c / "manifest.json"));
}

TEST(Cohort, ProspectiveSplitByPatient) {
  const auto studies = generate_studies(small(200, 12), 3);
  ASSERT_EQ(studies.size(), 200u);
  int prospective = 0;
  std::map<std::string, std::set<Split>> splits;
  std::set<std::string> ids;
  for (const auto& s : studies) {
    prospective += s.split == Split::prospective;
    splits[s.patient_id].insert(s.split);
    ids.insert(s.study_id);
  }
  EXPECT_EQ(prospective, 40);
  EXPECT_EQ(ids.size(), 200u);
  EXPECT_LT(splits.size(), 200u);  // some patients have several studies
  for (const auto& [pid, s] : splits) EXPECT_EQ(s.size(), 1u) << pid;
}

TEST(Cohort, StudyInvariants) {
  auto cfg = small(40, 12);
  const auto studies = generate_studies(cfg, 11);
  const auto table = TemplateTable::standard(12);
  const auto map = cfg.effective_priority_map();
  std::map<std::string, SubgroupAttrs> patient_attrs;
  for (const auto& s : studies) {
    ASSERT_GE(s.sequences.size(), 2u);
    ASSERT_LE(s.sequences.size(), 4u);
    EXPECT_EQ(s.labels.bits.size(), 12u);
    EXPECT_EQ(s.labels.priority, diagnosis_to_priority(s.labels.bits, map));

    // report lines correspond one-to-one with positive labels
    const auto lines = volrep::text::normalize(s.report.text);
    std::vector<std::uint8_t> from_report(12, 0);
    std::size_t start = 0, n_lines = 0;
    while (start <= lines.size()) {
      const auto end = std::min(lines.find('\n', start), lines.size());
      const auto line = lines.substr(start, end - start);
      ++n_lines;
      if (auto d = table.diagnosis_of_line(line)) from_report[static_cast<std::size_t>(*d)] = 1;
      start = end + 1;
    }
    EXPECT_EQ(from_report, s.labels.bits) << s.study_id;
    const int positives = std::count(s.labels.bits.begin(), s.labels.bits.end(), 1);
    if (positives == 0) {
      EXPECT_EQ(s.report.text, kNoFindings);
    } else {
      EXPECT_EQ(static_cast<int>(n_lines), positives);
    }
    EXPECT_NE(s.full_report.find(s.report.text), std::string::npos);

    auto [it, inserted] = patient_attrs.emplace(s.patient_id, s.subgroup);
    if (!inserted) {
      EXPECT_EQ(it->second.sex, s.subgroup.sex);
      EXPECT_EQ(it->second.age_band, s.subgroup.age_band);
      EXPECT_EQ(it->second.race_code, s.subgroup.race_code);
      EXPECT_EQ(it->second.insurance_code, s.subgroup.insurance_code);
    }

    for (const auto& seq : s.sequences) {
      const auto& v = seq.volume;
      EXPECT_EQ(v.shape, volume_shape(cfg, seq.meta.plane));
      for (int a = 0; a < 3; ++a) EXPECT_DOUBLE_EQ(v.spacing[static_cast<std::size_t>(a)], 240.0 / v.shape[a]);
      for (float x : v.data) {
        ASSERT_GE(x, 0.0f);
        ASSERT_LE(x, 1.0f);
      }
      // every positive diagnosis has lesion voxels in every sequence; no others do
      std::vector<double> sum(12, 0.0);
      std::vector<int> count(12, 0);
      for (std::size_t i = 0; i < seq.lesion_mask.size(); ++i) {
        if (int m = seq.lesion_mask[i]) {
          sum[static_cast<std::size_t>(m - 1)] += v.data[i];
          ++count[static_cast<std::size_t>(m - 1)];
        }
      }
      for (int d = 0; d < 12; ++d) {
        EXPECT_EQ(count[static_cast<std::size_t>(d)] > 0, s.labels.bits[static_cast<std::size_t>(d)] == 1)
            << s.study_id << " d=" << d;
      }
      // lesions are brighter than normal tissue by about the configured contrast
      double tissue = 0.0;
      int n_tissue = 0;
      for (std::size_t i = 0; i < v.data.size(); ++i) {
        if (!seq.lesion_mask[i] && v.data[i] > 0.2f) {
          tissue += v.data[i];
          ++n_tissue;
        }
      }
      tissue /= n_tissue;
      for (int d = 0; d < 12; ++d) {
        const auto n = count[static_cast<std::size_t>(d)];
        if (n > 0) {
          EXPECT_GT(sum[static_cast<std::size_t>(d)] / n, tissue + 0.2);
        }
      }
    }
  }
}

TEST(Cohort, LabelMarginalsRoughlyFollowConfig) {
  const auto studies = generate_studies(small(200, 12), 5);
  std::vector<int> hist(5, 0);
  for (const auto& s : studies) ++hist[static_cast<std::size_t>(std::count(s.labels.bits.begin(), s.labels.bits.end(), 1))];
  EXPECT_NEAR(hist[0] / 200.0, 0.12, 0.06);
  EXPECT_NEAR(hist[1] / 200.0, 0.48, 0.09);
  EXPECT_NEAR(hist[2] / 200.0, 0.30, 0.08);
  EXPECT_EQ(hist[4], 0);
}

TEST(Cohort, PriorityRules) {
  const auto map = default_priority_map(12);
  const std::vector<int> expected{0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2};
  EXPECT_EQ(map, expected);
  std::vector<std::uint8_t> bits(12, 0);
  EXPECT_EQ(diagnosis_to_priority(bits, map), Priority::normal);
  bits[2] = 1;
  EXPECT_EQ(diagnosis_to_priority(bits, map), Priority::normal);
  bits[5] = 1;
  EXPECT_EQ(diagnosis_to_priority(bits, map), Priority::medium);
  bits[10] = 1;
  EXPECT_EQ(diagnosis_to_priority(bits, map), Priority::high);
}

TEST(Cohort, LoadRoundTripMatchesInMemory) {
  const auto cfg = small(6, 4);
  const auto dir = scratch("roundtrip");
  generate_cohort(cfg, 21, dir);
  const auto loaded = load_cohort(dir);
  const auto direct = generate_studies(cfg, 21);
  ASSERT_EQ(loaded.size(), direct.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) EXPECT_TRUE(loaded[i] == direct[i]) << direct[i].study_id;
  EXPECT_EQ(CohortManifest::from_json(load_manifest(dir).to_json()).to_json(), load_manifest(dir).to_json());
}

TEST(Cohort, MissingFileNamesStudy) {
  const auto dir = scratch("missing");
  generate_cohort(small(4, 2), 7, dir);
  fs::remove(dir / "studies/S0002/seq1.raw");
  try {
    load_cohort(dir);
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    EXPECT_EQ(e.study_id(), "S0002");
    EXPECT_NE(std::string(e.what()).find("S0002"), std::string::npos);
  }
}

TEST(Cohort, CorruptedVolumeFailsChecksum) {
  const auto dir = scratch("corrupt");
  generate_cohort(small(4, 2), 7, dir);
  auto bytes = volrep::io::read_bytes(dir / "studies/S0001/seq0.raw");
  bytes[100] ^= 0x5a;
  volrep::io::write_bytes(dir / "studies/S0001/seq0.raw", bytes);
  try {
    load_cohort(dir);
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    EXPECT_EQ(e.study_id(), "S0001");
  }
}

TEST(Cohort, ManifestRejectsDuplicatesAndVersions) {
  const auto dir = scratch("dup");
  generate_cohort(small(4, 2), 7, dir);
  auto doc = volrep::io::read_json(dir / "manifest.json");
  auto dup = doc;
  dup["studies"][1]["study_id"] = dup["studies"][0]["study_id"];
  EXPECT_THROW(CohortManifest::from_json(dup), LoadError);
  auto ver = doc;
  ver["version"] = 99;
  EXPECT_THROW(CohortManifest::from_json(ver), LoadError);
}

TEST(Cohort, ConfigValidation) {
  auto c = small(10, 12);
  c.patch = {32, 32, 32};
  EXPECT_THROW(c.validate(), ConfigError);
  c = small(10, 13);
  EXPECT_THROW(c.validate(), ConfigError);
  c = small(10, 4);
  c.priority_map = {0, 1};
  EXPECT_THROW(c.validate(), ConfigError);

  auto kv = volrep::io::KvConfig::parse("n_studies = 12\nn_diagnoses = 3\nprospective_fraction = 0.25\nshape = 48, 48, 16\n");
  const auto parsed = CohortConfig::from_kv(kv);
  EXPECT_EQ(parsed.n_studies, 12);
  EXPECT_EQ(parsed.n_diagnoses, 3);
  EXPECT_EQ(parsed.axial_shape, (Shape3{48, 48, 16}));
  EXPECT_EQ(CohortConfig::from_json(parsed.to_json()).to_json(), parsed.to_json());
}

TEST(Cohort, PlanesAndVocabularyCoverage) {
  auto cfg = small(30, 12);
  const auto studies = generate_studies(cfg, 2);
  const auto vocab = build_vocabulary(TemplateTable::standard(12));
  std::set<Plane> planes;
  for (const auto& s : studies) {
    for (auto id : s.report.token_ids) EXPECT_NE(id, volrep::text::Vocabulary::kUnk);
    for (auto id : vocab.encode(s.study_name)) EXPECT_NE(id, volrep::text::Vocabulary::kUnk);
    for (const auto& q : s.sequences) {
      planes.insert(q.meta.plane);
      for (auto id : vocab.encode(q.meta.sequence_name)) EXPECT_NE(id, volrep::text::Vocabulary::kUnk);
    }
  }
  EXPECT_EQ(planes.size(), 3u);
  EXPECT_EQ(volume_shape(cfg, Plane::coronal), (Shape3{64, 16, 64}));
  EXPECT_EQ(volume_shape(cfg, Plane::sagittal), (Shape3{16, 64, 64}));
}
