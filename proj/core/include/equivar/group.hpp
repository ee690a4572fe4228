#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "equivar/tensor.hpp"

namespace equivar {

/// Groups of grid-exact image transforms. `trivial` is the one-element group
/// used for non-equivariant baselines.
enum class GroupKind { trivial, rot4, rot2_flip, rot4_flip };

std::string_view to_string(GroupKind kind);
GroupKind parse_group_kind(std::string_view name);

/// The transform R^quarter_turns * M^flip: optionally flip horizontally, then
/// rotate counter-clockwise by quarter_turns * 90 degrees.
struct GridTransform {
  int quarter_turns = 0;
  bool flip = false;

  /// Destination of pixel (row, col) on an n x n grid.
  std::pair<std::size_t, std::size_t> apply(std::size_t n, std::size_t row, std::size_t col) const;
  friend bool operator==(const GridTransform&, const GridTransform&) = default;
};

class FiniteGroup {
 public:
  using Table = std::vector<std::vector<std::size_t>>;

  /// Builds a group from an explicit Cayley table. No axioms are enforced here;
  /// see axiom_violations().
  FiniteGroup(GroupKind kind, std::vector<GridTransform> transforms, std::vector<std::string> names, Table cayley);

  GroupKind kind() const noexcept { return kind_; }
  std::size_t order() const noexcept { return transforms_.size(); }
  std::size_t identity() const noexcept { return identity_; }
  /// Index of a * b (apply b first, then a).
  std::size_t compose(std::size_t a, std::size_t b) const { return cayley_[a][b]; }
  std::size_t inverse(std::size_t a) const { return inverse_[a]; }
  const GridTransform& transform(std::size_t a) const { return transforms_[a]; }
  const std::string& name(std::size_t a) const { return names_[a]; }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const Table& cayley() const noexcept { return cayley_; }
  std::size_t index_of(std::string_view name) const;

  /// Latin square, identity row/column, inverses and all |G|^3 associativity
  /// triples. Empty result means the table is a group.
  std::vector<std::string> axiom_violations() const;

  /// Copy with one Cayley entry overwritten (negative-control fixtures).
  FiniteGroup with_cayley_entry(std::size_t a, std::size_t b, std::size_t value) const;

  friend bool operator==(const FiniteGroup& a, const FiniteGroup& b) {
    return a.kind_ == b.kind_ && a.cayley_ == b.cayley_;
  }

 private:
  GroupKind kind_;
  std::vector<GridTransform> transforms_;
  std::vector<std::string> names_;
  Table cayley_;
  std::vector<std::size_t> inverse_;
  std::size_t identity_ = 0;
};

/// Element order: rotations first (e, r, r2, r3), then their flipped
/// counterparts (m, rm, r2m, r3m). The Cayley table is derived by composing
/// the coordinate maps, not written down by hand.
FiniteGroup make_group(GroupKind kind);

/// Per-element coordinate bijections of an n x n grid.
class GridAction {
 public:
  GridAction(const FiniteGroup& group, std::size_t n);

  const FiniteGroup& group() const noexcept { return group_; }
  std::size_t extent() const noexcept { return n_; }
  /// map(g)[source flat index] = destination flat index.
  std::span<const std::uint32_t> map(std::size_t g) const { return maps_[g]; }
  /// Inverse map: source index feeding each destination.
  std::span<const std::uint32_t> pullback(std::size_t g) const { return pullbacks_[g]; }
  std::vector<std::string> homomorphism_violations() const;

 private:
  FiniteGroup group_;
  std::size_t n_;
  std::vector<std::vector<std::uint32_t>> maps_;
  std::vector<std::vector<std::uint32_t>> pullbacks_;
};

/// Relocates the pixels of the trailing n x n axes. Values are moved, never
/// interpolated; differentiable.
template <typename T>
Tensor<T> apply_grid(const GridAction& action, std::size_t g, const Tensor<T>& x);
template <typename T>
Tensor<T> apply_grid(const FiniteGroup& group, std::size_t g, const Tensor<T>& x);

/// A group acting on {0..L-1} by permutations.
class LabelAction {
 public:
  LabelAction(const FiniteGroup& group, std::vector<std::vector<std::size_t>> perms);

  const FiniteGroup& group() const noexcept { return group_; }
  std::size_t label_count() const noexcept { return perms_.empty() ? 0 : perms_.front().size(); }
  std::size_t apply(std::size_t g, std::size_t label) const { return perms_[g][label]; }
  std::span<const std::size_t> permutation(std::size_t g) const { return perms_[g]; }
  std::vector<std::string> violations() const;

 private:
  FiniteGroup group_;
  std::vector<std::vector<std::size_t>> perms_;
};

}  // namespace equivar
