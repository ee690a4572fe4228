#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "equivar/group.hpp"
#include "equivar/tensor.hpp"

namespace equivar {

/// Relative-position labels, in the order under which quarter turns act as two
/// disjoint 4-cycles.
inline constexpr std::array<std::string_view, 8> kContextLabels{
    "left", "down", "right", "up", "upper-left", "lower-left", "lower-right", "upper-right"};

/// Raster index (row-major over the eight non-centre cells) of each label
/// above. Quarter turns do not act as block cycles on raster indices; the
/// "equivariant model only" arm trains on this order.
inline constexpr std::array<std::size_t, 8> kRasterContextOrder{3, 6, 4, 1, 0, 5, 7, 2};

/// 3x3 cell (row, col) of a context label.
std::pair<std::size_t, std::size_t> context_cell(std::size_t label);

/// Layout of a 3x3 patch grid centred in an n x n image. `jitter` > 0 shifts
/// each patch by up to that many pixels (training mode only).
struct PatchGeometry {
  std::size_t patch = 8;
  std::size_t gap = 2;
  std::size_t jitter = 0;

  /// Top-left pixel of cell (row, col) before jitter.
  std::pair<std::size_t, std::size_t> origin(std::size_t n, std::size_t row, std::size_t col) const;
  void validate(std::size_t n) const;
};

template <typename T>
struct ContextSample {
  Tensor<T> center;
  Tensor<T> neighbor;
  std::size_t label = 0;
};

/// image [C,n,n]. `rng` is consulted only when geometry.jitter > 0.
template <typename T>
ContextSample<T> extract_context(const Tensor<T>& image, std::size_t neighbor_index, const PatchGeometry& geometry,
                                 std::mt19937_64* rng = nullptr);

/// Quarter-turn action on the eight context labels, derived from the grid
/// action on the 3x3 cells. Only rot4 acts freely on these labels.
LabelAction context_label_action(const FiniteGroup& group);

/// A puzzle permutation: slot k shows the patch from grid cell sigma[k].
using Puzzle = std::array<std::uint8_t, 9>;

bool is_bijection(const Puzzle& p);
Puzzle identity_puzzle();
/// (a * b)[k] = a[b[k]].
Puzzle compose(const Puzzle& a, const Puzzle& b);
/// pi_g: the cell permutation induced by g on the 3x3 grid.
Puzzle grid_permutation(const GridTransform& t);
int hamming(const Puzzle& a, const Puzzle& b);

template <typename T>
struct JigsawSample {
  std::vector<Tensor<T>> patches;  // slot order
  std::size_t label = 0;
};

/// Slot k holds the patch originally at grid cell sigma[k].
template <typename T>
JigsawSample<T> extract_jigsaw(const Tensor<T>& image, const Puzzle& sigma, const PatchGeometry& geometry,
                               std::mt19937_64* rng = nullptr);

/// Jigsaw label set. Labels are ordered orbit by orbit: label r*|G| + k is
/// pi_{g_k} * sigma_r, so the group acts by (r, k) -> (r, g*k).
class PermutationSubset {
 public:
  PermutationSubset(GroupKind group, std::vector<Puzzle> perms, std::uint64_t seed, int min_hamming);

  GroupKind group_kind() const noexcept { return group_; }
  std::size_t size() const noexcept { return perms_.size(); }
  std::size_t orbit_count() const;
  std::uint64_t seed() const noexcept { return seed_; }
  int min_hamming() const noexcept { return min_hamming_; }
  const Puzzle& at(std::size_t label) const { return perms_.at(label); }
  const std::vector<Puzzle>& permutations() const noexcept { return perms_; }
  std::optional<std::size_t> label_of(const Puzzle& p) const;

  /// Label of pi_g * sigma(label); ClosureError if it is not in the set.
  std::size_t act(const FiniteGroup& group, std::size_t g, std::size_t label) const;
  LabelAction label_action(const FiniteGroup& group) const;

  /// Header `group=<kind> orbits=<n> seed=<u64> min_hamming=<int>`, then one
  /// permutation per line as nine space-separated cell indices.
  void write(std::ostream& os) const;
  static PermutationSubset read(std::istream& is);

 private:
  GroupKind group_;
  std::vector<Puzzle> perms_;
  std::uint64_t seed_;
  int min_hamming_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
};

/// sigma' = pi_g * sigma, checked for membership in `subset`.
Puzzle jigsaw_label_action(const FiniteGroup& group, std::size_t g, const Puzzle& sigma,
                           const PermutationSubset& subset);

/// Greedy maximal-Hamming selection: each step draws `pool` seeded random
/// permutations, keeps the one farthest (in minimum Hamming distance) from the
/// current set and adds its whole orbit {pi_g * sigma}. With the trivial group
/// this is the classic non-closed subset.
PermutationSubset generate_closed_subset(GroupKind group, std::size_t orbits, std::uint64_t seed,
                                         std::size_t pool = 10000);

int min_pairwise_hamming(std::span<const Puzzle> perms);

/// Mean softmax cross-entropy of logits [B,L] against labels.
template <typename T>
Tensor<T> pretext_loss(const Tensor<T>& logits, std::span<const std::size_t> labels);

}  // namespace equivar
