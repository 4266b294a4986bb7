#include "volrep/tokenizer.hpp"

#include "volrep/io.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace volrep::tokens {

namespace {

int ceil_div(int a, int b) { return (a + b - 1) / b; }

io::json shape_json(const Shape3& s) { return io::json::array({s.d0, s.d1, s.d2}); }
Shape3 shape_from(const io::json& j) { return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>()}; }

}  // namespace

Shape3 native_patch(const Shape3& p, Plane plane) {
  switch (plane) {
    case Plane::axial: return p;
    case Plane::coronal: return {p.d0, p.d2, p.d1};
    case Plane::sagittal: return {p.d2, p.d1, p.d0};
  }
  return p;
}

TokenGrid patch_volume(const cohort::VoxelVolume& vol, const PatchSpec& spec, Orientation orientation) {
  const Shape3& p = spec.dims;
  if (p.d0 < 1 || p.d1 < 1 || p.d2 < 1) throw TokenizeError("patch dims must be positive");
  TokenGrid grid;
  if (spec.pad_mode == PadMode::crop) {
    for (int a = 0; a < 3; ++a) {
      if (vol.shape[a] < p[a]) throw TokenizeError("crop mode with volume smaller than patch");
    }
    grid.extents = {vol.shape.d0 / p.d0, vol.shape.d1 / p.d1, vol.shape.d2 / p.d2};
  } else {
    grid.extents = {ceil_div(vol.shape.d0, p.d0), ceil_div(vol.shape.d1, p.d1), ceil_div(vol.shape.d2, p.d2)};
  }
  grid.padded = {grid.extents.d0 * p.d0, grid.extents.d1 * p.d1, grid.extents.d2 * p.d2};
  for (int gi = 0; gi < grid.extents.d0; ++gi) {
    for (int gj = 0; gj < grid.extents.d1; ++gj) {
      for (int gk = 0; gk < grid.extents.d2; ++gk) {
        SubvolumeToken t;
        t.shape = p;
        t.grid_pos = {gi, gj, gk};
        t.orientation_code = orientation;
        t.voxels.assign(p.size(), 0.0f);
        for (int i = 0; i < p.d0; ++i) {
          const int vi = gi * p.d0 + i;
          if (vi >= vol.shape.d0) break;
          for (int j = 0; j < p.d1; ++j) {
            const int vj = gj * p.d1 + j;
            if (vj >= vol.shape.d1) break;
            for (int k = 0; k < p.d2; ++k) {
              const int vk = gk * p.d2 + k;
              if (vk >= vol.shape.d2) break;
              t.voxels[(static_cast<std::size_t>(i) * p.d1 + j) * p.d2 + k] = vol.at(vi, vj, vk);
            }
          }
        }
        grid.tokens.push_back(std::move(t));
      }
    }
  }
  return grid;
}

cohort::VoxelVolume reassemble(const TokenGrid& grid) {
  cohort::VoxelVolume vol;
  vol.shape = grid.padded;
  vol.data.assign(vol.shape.size(), 0.0f);
  for (const auto& t : grid.tokens) {
    const Shape3& p = t.shape;
    for (int i = 0; i < p.d0; ++i) {
      for (int j = 0; j < p.d1; ++j) {
        for (int k = 0; k < p.d2; ++k) {
          vol.data[vol.index(t.grid_pos[0] * p.d0 + i, t.grid_pos[1] * p.d1 + j, t.grid_pos[2] * p.d2 + k)] = t.at(i, j, k);
        }
      }
    }
  }
  return vol;
}

double token_statistic(const SubvolumeToken& t, BackgroundStatistic s) {
  if (t.voxels.empty()) return 0.0;
  if (s == BackgroundStatistic::max) return *std::max_element(t.voxels.begin(), t.voxels.end());
  double sum = 0.0;
  for (float v : t.voxels) sum += v;
  return sum / static_cast<double>(t.voxels.size());
}

std::vector<SubvolumeToken> filter_background(const std::vector<SubvolumeToken>& tokens, const BackgroundFilter& filter) {
  if (filter.threshold < 0.0 || filter.threshold > 1.0) throw TokenizeError("background threshold outside [0,1]");
  std::vector<SubvolumeToken> kept;
  for (const auto& t : tokens) {
    // threshold 0 keeps everything, including all-zero padding tokens
    if (filter.threshold == 0.0 || token_statistic(t, filter.statistic) > filter.threshold) kept.push_back(t);
  }
  return kept;
}

const std::array<AxisOrder, 6>& all_axis_orders() {
  static const std::array<AxisOrder, 6> orders = {
      AxisOrder{1, 2, 3}, AxisOrder{1, 3, 2}, AxisOrder{2, 1, 3}, AxisOrder{2, 3, 1}, AxisOrder{3, 1, 2}, AxisOrder{3, 2, 1}};
  return orders;
}

bool is_permutation(const AxisOrder& o) {
  std::array<int, 3> s = o;
  std::sort(s.begin(), s.end());
  return s == AxisOrder{1, 2, 3};
}

AxisOrder inverse(const AxisOrder& o) {
  if (!is_permutation(o)) throw TokenizeError("malformed axis order");
  AxisOrder inv{};
  for (int i = 0; i < 3; ++i) inv[static_cast<std::size_t>(o[static_cast<std::size_t>(i)] - 1)] = i + 1;
  return inv;
}

AxisOrder compose(const AxisOrder& a, const AxisOrder& b) {
  if (!is_permutation(a) || !is_permutation(b)) throw TokenizeError("malformed axis order");
  AxisOrder c{};
  for (std::size_t i = 0; i < 3; ++i) c[i] = a[static_cast<std::size_t>(b[i] - 1)];
  return c;
}

Shape3 permute_shape(const Shape3& s, const AxisOrder& o) { return {s[o[0] - 1], s[o[1] - 1], s[o[2] - 1]}; }

SubvolumeToken permute_token_axes(const SubvolumeToken& token, const AxisOrder& order) {
  if (!is_permutation(order)) throw TokenizeError("malformed axis order");
  SubvolumeToken out = token;
  out.shape = permute_shape(token.shape, order);
  const std::array<std::size_t, 3> in_stride{static_cast<std::size_t>(token.shape.d1) * token.shape.d2,
                                             static_cast<std::size_t>(token.shape.d2), 1};
  const std::size_t s0 = in_stride[static_cast<std::size_t>(order[0] - 1)];
  const std::size_t s1 = in_stride[static_cast<std::size_t>(order[1] - 1)];
  const std::size_t s2 = in_stride[static_cast<std::size_t>(order[2] - 1)];
  std::size_t o = 0;
  for (int i = 0; i < out.shape.d0; ++i) {
    for (int j = 0; j < out.shape.d1; ++j) {
      for (int k = 0; k < out.shape.d2; ++k) out.voxels[o++] = token.voxels[i * s0 + j * s1 + k * s2];
    }
  }
  return out;
}

AxisOrder canonical_order(const Shape3& s) {
  int thin = 2;
  for (int a = 1; a >= 0; --a) {
    if (s[a] < s[thin]) thin = a;
  }
  AxisOrder o{};
  std::size_t n = 0;
  for (int a = 0; a < 3; ++a) {
    if (a != thin) o[n++] = a + 1;
  }
  o[2] = thin + 1;
  return o;
}

std::vector<Shape3> bucket_shapes(const Shape3& patch) {
  std::set<std::array<int, 3>> seen;
  for (const auto& o : all_axis_orders()) {
    const Shape3 s = permute_shape(patch, o);
    seen.insert({s.d0, s.d1, s.d2});
  }
  std::vector<Shape3> out;
  for (const auto& s : seen) out.push_back({s[0], s[1], s[2]});
  return out;
}

int bucket_index(const std::vector<Shape3>& buckets, const Shape3& shape) {
  for (std::size_t i = 0; i < buckets.size(); ++i) {
    if (buckets[i] == shape) return static_cast<int>(i);
  }
  throw TokenizeError("token shape is not a permutation of the patch dims");
}

std::vector<SubvolumeToken> tokenize_sequence(const cohort::Sequence& seq, const PatchSpec& spec,
                                              const BackgroundFilter& filter, TokenGrid* full_grid) {
  PatchSpec native = spec;
  native.dims = native_patch(spec.dims, seq.meta.plane);
  auto grid = patch_volume(seq.volume, native, seq.meta.orientation_code);
  auto kept = filter_background(grid.tokens, filter);
  if (full_grid) *full_grid = std::move(grid);
  return kept;
}

BucketedBatch bucket_and_sample(const std::vector<cohort::Sequence>& minibatch, const PatchSpec& spec,
                                const BackgroundFilter& filter, std::uint64_t seed) {
  if (minibatch.empty()) throw TokenizeError("empty minibatch");
  std::mt19937_64 rng(seed);
  const auto shapes = bucket_shapes(spec.dims);
  BucketedBatch out;
  out.buckets.resize(shapes.size());
  std::size_t total = 0;
  for (const auto& seq : minibatch) {
    for (auto& t : tokenize_sequence(seq, spec, filter)) {
      out.buckets[static_cast<std::size_t>(bucket_index(shapes, t.shape))].push_back(std::move(t));
      ++total;
    }
  }
  if (total == 0) throw TokenizeError("no foreground tokens in minibatch");
  out.selected_bucket = std::uniform_int_distribution<int>(0, static_cast<int>(shapes.size()) - 1)(rng);
  std::shuffle(out.permutation.begin(), out.permutation.end(), rng);
  for (const auto& t : out.buckets[static_cast<std::size_t>(out.selected_bucket)]) {
    out.tokens.push_back(permute_token_axes(t, out.permutation));
  }
  return out;
}

std::vector<double> sinusoidal_encode(const std::array<int, 3>& pos, const Shape3& extents, int dims) {
  if (dims <= 0 || dims % 6 != 0) throw TokenizeError("sinusoidal encoding width must be a positive multiple of 6");
  for (int a = 0; a < 3; ++a) {
    if (pos[static_cast<std::size_t>(a)] < 0 || pos[static_cast<std::size_t>(a)] >= extents[a]) {
      throw TokenizeError("grid position outside extents");
    }
  }
  const int block = dims / 3;
  std::vector<double> pe(static_cast<std::size_t>(dims));
  for (int a = 0; a < 3; ++a) {
    for (int i = 0; i < block / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / block);
      const double x = pos[static_cast<std::size_t>(a)] * freq;
      pe[static_cast<std::size_t>(a * block + 2 * i)] = std::sin(x);
      pe[static_cast<std::size_t>(a * block + 2 * i + 1)] = std::cos(x);
    }
  }
  return pe;
}

LearnedPositional::LearnedPositional(int dims, int max_extent, std::mt19937_64& rng) : dims_(dims), max_extent_(max_extent) {
  if (dims % 3 != 0) throw TokenizeError("learned encoding width must be a multiple of 3");
  for (auto& t : tables_) t = ad::parameter(nn::randn(max_extent, dims / 3, 0.02, rng));
}

ad::Var LearnedPositional::operator()(const std::vector<std::array<int, 3>>& grid_pos, const Shape3& extents) const {
  std::array<std::vector<std::int32_t>, 3> rows;
  for (const auto& p : grid_pos) {
    for (std::size_t a = 0; a < 3; ++a) {
      if (p[a] < 0 || p[a] >= extents[static_cast<int>(a)] || p[a] >= max_extent_) {
        throw TokenizeError("grid position outside learned table");
      }
      rows[a].push_back(p[a]);
    }
  }
  return ad::concat_cols({ad::gather_rows(tables_[0], rows[0]), ad::gather_rows(tables_[1], rows[1]),
                          ad::gather_rows(tables_[2], rows[2])});
}

void LearnedPositional::collect(nn::ParamList& out, const std::string& prefix) const {
  for (std::size_t a = 0; a < 3; ++a) out.push_back({prefix + ".axis" + std::to_string(a), tables_[a]});
}

std::vector<double> positional_encode(const std::array<int, 3>& grid_pos, const Shape3& extents,
                                      const PositionalEncoding& enc, const LearnedPositional* learned) {
  if (enc.scheme == PositionalScheme::sinusoidal_3d) return sinusoidal_encode(grid_pos, extents, enc.dims);
  if (!learned) throw TokenizeError("learned_3d encoding needs its table");
  ad::NoGradGuard guard;
  const auto v = (*learned)({grid_pos}, extents).value();
  return std::vector<double>(v.data(), v.data() + v.size());
}

TokenDump tokenize_cohort(const std::vector<cohort::StudyRecord>& studies, const PatchSpec& spec,
                          const BackgroundFilter& filter) {
  TokenDump dump;
  dump.spec = spec;
  dump.filter = filter;
  std::size_t offset = 0;
  for (const auto& st : studies) {
    for (std::size_t s = 0; s < st.sequences.size(); ++s) {
      TokenGrid grid;
      auto kept = tokenize_sequence(st.sequences[s], spec, filter, &grid);
      for (auto& t : kept) {
        dump.refs.push_back({st.study_id, static_cast<int>(s), st.sequences[s].meta.plane, grid.extents, offset});
        offset += t.voxels.size();
        dump.tokens.push_back(std::move(t));
      }
    }
  }
  return dump;
}

void write_token_dump(const TokenDump& dump, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<float> flat;
  io::json entries = io::json::array();
  for (std::size_t i = 0; i < dump.tokens.size(); ++i) {
    const auto& t = dump.tokens[i];
    const auto& r = dump.refs[i];
    flat.insert(flat.end(), t.voxels.begin(), t.voxels.end());
    entries.push_back({{"study_id", r.study_id},
                       {"sequence", r.sequence},
                       {"plane", cohort::to_string(r.plane)},
                       {"extents", shape_json(r.extents)},
                       {"shape", shape_json(t.shape)},
                       {"grid_pos", t.grid_pos},
                       {"orientation_code", cohort::to_string(t.orientation_code)},
                       {"offset", r.offset}});
  }
  io::write_f32(dir / "tokens.bin", flat);
  io::write_json(dir / "index.json",
                 {{"format", "volrep-tokens"},
                  {"version", 1},
                  {"patch", shape_json(dump.spec.dims)},
                  {"pad_mode", dump.spec.pad_mode == PadMode::zero_pad ? "zero_pad" : "crop"},
                  {"bg_threshold", dump.filter.threshold},
                  {"bg_statistic", dump.filter.statistic == BackgroundStatistic::mean ? "mean" : "max"},
                  {"tokens", entries}});
}

TokenDump read_token_dump(const std::filesystem::path& dir) {
  const auto index = io::read_json(dir / "index.json");
  if (index.value("version", 0) != 1) throw io::IoError("unsupported token dump version");
  const auto flat = io::read_f32(dir / "tokens.bin");
  TokenDump dump;
  dump.spec.dims = shape_from(index.at("patch"));
  dump.spec.pad_mode = index.at("pad_mode") == "crop" ? PadMode::crop : PadMode::zero_pad;
  dump.filter.threshold = index.at("bg_threshold").get<double>();
  dump.filter.statistic = index.at("bg_statistic") == "max" ? BackgroundStatistic::max : BackgroundStatistic::mean;
  for (const auto& e : index.at("tokens")) {
    SubvolumeToken t;
    t.shape = shape_from(e.at("shape"));
    t.grid_pos = e.at("grid_pos").get<std::array<int, 3>>();
    t.orientation_code = cohort::orientation_from_string(e.at("orientation_code").get<std::string>());
    TokenRef r{e.at("study_id").get<std::string>(), e.at("sequence").get<int>(),
               cohort::plane_from_string(e.at("plane").get<std::string>()), shape_from(e.at("extents")),
               e.at("offset").get<std::size_t>()};
    if (r.offset + t.shape.size() > flat.size()) throw io::IoError("token dump truncated");
    t.voxels.assign(flat.begin() + static_cast<std::ptrdiff_t>(r.offset),
                    flat.begin() + static_cast<std::ptrdiff_t>(r.offset + t.shape.size()));
    dump.tokens.push_back(std::move(t));
    dump.refs.push_back(std::move(r));
  }
  return dump;
}

PatchSpec parse_patch(const std::string& csv, PadMode mode) {
  std::vector<int> v;
  std::stringstream ss(csv);
  std::string part;
  while (std::getline(ss, part, ',')) v.push_back(std::stoi(part));
  if (v.size() != 3 || v[0] < 1 || v[1] < 1 || v[2] < 1) throw TokenizeError("patch must be three positive integers");
  return {{v[0], v[1], v[2]}, mode};
}

}  // namespace volrep::tokens
