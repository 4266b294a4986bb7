#pragma once

// Subvolume tokens: tiling, background filtering, axis permutations,
// shape bucketing for permutation training, and grid positional encodings.

#include "volrep/cohort.hpp"
#include "volrep/nn.hpp"

#include <array>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <vector>

namespace volrep::tokens {

using cohort::Orientation;
using cohort::Plane;
using cohort::Shape3;

enum class PadMode { zero_pad, crop };

struct PatchSpec {
  Shape3 dims{32, 32, 4};
  PadMode pad_mode = PadMode::zero_pad;
};

class TokenizeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Patch dims laid out like the acquisition: the thin patch axis follows the
/// thin volume axis (axis 2 axial, axis 1 coronal, axis 0 sagittal).
Shape3 native_patch(const Shape3& patch, Plane plane);

struct SubvolumeToken {
  Shape3 shape;
  /// Row-major voxels, axis 2 fastest.
  std::vector<float> voxels;
  std::array<int, 3> grid_pos{0, 0, 0};
  Orientation orientation_code = Orientation::RAS;

  float at(int i, int j, int k) const {
    return voxels[(static_cast<std::size_t>(i) * shape.d1 + j) * shape.d2 + k];
  }
  bool operator==(const SubvolumeToken&) const = default;
};

struct TokenGrid {
  Shape3 extents;      // tokens per axis
  Shape3 padded;       // volume shape after padding/cropping
  std::vector<SubvolumeToken> tokens;
};

/// Non-overlapping tiling in grid order (axis 2 fastest).
TokenGrid patch_volume(const cohort::VoxelVolume& vol, const PatchSpec& spec,
                       Orientation orientation = Orientation::RAS);
/// Inverse of patch_volume: the padded (or cropped) volume.
cohort::VoxelVolume reassemble(const TokenGrid& grid);

enum class BackgroundStatistic { mean, max };

struct BackgroundFilter {
  double threshold = 0.05;
  BackgroundStatistic statistic = BackgroundStatistic::mean;
};

double token_statistic(const SubvolumeToken& t, BackgroundStatistic s);
/// Tokens whose statistic exceeds the threshold, order preserved.
std::vector<SubvolumeToken> filter_background(const std::vector<SubvolumeToken>& tokens, const BackgroundFilter& filter);

/// 1-based axis order, e.g. {3,1,2}: output axis i is input axis order[i]-1.
using AxisOrder = std::array<int, 3>;
const std::array<AxisOrder, 6>& all_axis_orders();
bool is_permutation(const AxisOrder& order);
AxisOrder inverse(const AxisOrder& order);
/// permute(permute(t, a), b) == permute(t, compose(a, b)).
AxisOrder compose(const AxisOrder& a, const AxisOrder& b);
SubvolumeToken permute_token_axes(const SubvolumeToken& token, const AxisOrder& order);
Shape3 permute_shape(const Shape3& s, const AxisOrder& order);
/// Axis order that moves the thinnest axis last, keeping the other two in order.
AxisOrder canonical_order(const Shape3& s);

/// Distinct axis permutations of the patch dims, sorted; three for 32x32x4.
std::vector<Shape3> bucket_shapes(const Shape3& patch);
int bucket_index(const std::vector<Shape3>& buckets, const Shape3& shape);

/// Foreground tokens of one sequence (native patch layout for its plane).
std::vector<SubvolumeToken> tokenize_sequence(const cohort::Sequence& seq, const PatchSpec& spec,
                                              const BackgroundFilter& filter, TokenGrid* full_grid = nullptr);

struct BucketedBatch {
  std::vector<std::vector<SubvolumeToken>> buckets;  // indexed like bucket_shapes
  int selected_bucket = 0;
  AxisOrder permutation{1, 2, 3};
  /// Selected bucket's tokens after the permutation; empty if that bucket was.
  std::vector<SubvolumeToken> tokens;
};

/// Tokenize every volume, bucket by native shape, pick one bucket uniformly
/// and permute its whole stack by one random axis order.
BucketedBatch bucket_and_sample(const std::vector<cohort::Sequence>& minibatch, const PatchSpec& spec,
                                const BackgroundFilter& filter, std::uint64_t seed);

enum class PositionalScheme { sinusoidal_3d, learned_3d };

struct PositionalEncoding {
  int dims = 48;  // divisible by 6
  PositionalScheme scheme = PositionalScheme::sinusoidal_3d;
};

/// Per-axis sin/cos blocks of dims/3 each, frequencies 1/10000^(2i/(dims/3)).
std::vector<double> sinusoidal_encode(const std::array<int, 3>& grid_pos, const Shape3& extents, int dims);

/// Learned per-axis tables, concatenated.
class LearnedPositional {
 public:
  LearnedPositional() = default;
  LearnedPositional(int dims, int max_extent, std::mt19937_64& rng);
  ad::Var operator()(const std::vector<std::array<int, 3>>& grid_pos, const Shape3& extents) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;
  int dims() const { return dims_; }

 private:
  int dims_ = 0;
  int max_extent_ = 0;
  std::array<ad::Var, 3> tables_;
};

/// Sinusoidal scheme as a plain vector; learned scheme needs the table.
std::vector<double> positional_encode(const std::array<int, 3>& grid_pos, const Shape3& extents,
                                      const PositionalEncoding& enc, const LearnedPositional* learned = nullptr);

// ---- token dumps --------------------------------------------------------

struct TokenRef {
  std::string study_id;
  int sequence = 0;
  Plane plane = Plane::axial;
  Shape3 extents;
  std::size_t offset = 0;  // in floats into tokens.bin
};

struct TokenDump {
  PatchSpec spec;
  BackgroundFilter filter;
  std::vector<SubvolumeToken> tokens;
  std::vector<TokenRef> refs;
};

/// Tokenizes every sequence of every study.
TokenDump tokenize_cohort(const std::vector<cohort::StudyRecord>& studies, const PatchSpec& spec,
                          const BackgroundFilter& filter);
/// tokens.bin (float32) + index.json
void write_token_dump(const TokenDump& dump, const std::filesystem::path& dir);
TokenDump read_token_dump(const std::filesystem::path& dir);

PatchSpec parse_patch(const std::string& csv, PadMode mode = PadMode::zero_pad);

}  // namespace volrep::tokens
