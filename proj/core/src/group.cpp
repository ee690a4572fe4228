#include "equivar/group.hpp"

#include <algorithm>
#include <sstream>

#include "equivar/errors.hpp"
#include "equivar/ops.hpp"

namespace equivar {

std::string_view to_string(GroupKind kind) {
  switch (kind) {
    case GroupKind::trivial:
      return "trivial";
    case GroupKind::rot4:
      return "rot4";
    case GroupKind::rot2_flip:
      return "rot2_flip";
    case GroupKind::rot4_flip:
      return "rot4_flip";
  }
  return "unknown";
}

GroupKind parse_group_kind(std::string_view name) {
  for (GroupKind k : {GroupKind::trivial, GroupKind::rot4, GroupKind::rot2_flip, GroupKind::rot4_flip}) {
    if (to_string(k) == name) return k;
  }
  throw GroupError("unknown group kind '" + std::string(name) + "' (expected rot4, rot2_flip, rot4_flip or trivial)");
}

std::pair<std::size_t, std::size_t> GridTransform::apply(std::size_t n, std::size_t row, std::size_t col) const {
  if (flip) col = n - 1 - col;
  for (int q = 0; q < ((quarter_turns % 4) + 4) % 4; ++q) {
    const std::size_t r = n - 1 - col;
    col = row;
    row = r;
  }
  return {row, col};
}

FiniteGroup::FiniteGroup(GroupKind kind, std::vector<GridTransform> transforms, std::vector<std::string> names,
                         Table cayley)
    : kind_(kind), transforms_(std::move(transforms)), names_(std::move(names)), cayley_(std::move(cayley)) {
  const std::size_t n = transforms_.size();
  if (n == 0 || names_.size() != n || cayley_.size() != n) throw GroupError("inconsistent group element tables");
  for (const auto& row : cayley_) {
    if (row.size() != n) throw GroupError("Cayley table is not square");
    for (std::size_t v : row)
      if (v >= n) throw GroupError("Cayley entry out of range");
  }
  identity_ = n;
  for (std::size_t e = 0; e < n && identity_ == n; ++e) {
    bool is_identity = true;
    for (std::size_t b = 0; b < n; ++b) is_identity = is_identity && cayley_[e][b] == b && cayley_[b][e] == b;
    if (is_identity) identity_ = e;
  }
  if (identity_ == n) identity_ = 0;
  inverse_.assign(n, n);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n && inverse_[a] == n; ++b)
      if (cayley_[a][b] == identity_) inverse_[a] = b;
  for (auto& inv : inverse_)
    if (inv == n) inv = identity_;
}

std::size_t FiniteGroup::index_of(std::string_view name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw GroupError("no element named '" + std::string(name) + "'");
  return static_cast<std::size_t>(it - names_.begin());
}

std::vector<std::string> FiniteGroup::axiom_violations() const {
  std::vector<std::string> out;
  const std::size_t n = order();
  auto fail = [&](const std::string& s) { out.push_back(std::string(to_string(kind_)) + ": " + s); };
  for (std::size_t a = 0; a < n; ++a) {
    std::vector<bool> row(n, false), col(n, false);
    for (std::size_t b = 0; b < n; ++b) {
      row[cayley_[a][b]] = true;
      col[cayley_[b][a]] = true;
    }
    if (std::count(row.begin(), row.end(), false)) fail("row " + names_[a] + " is not a permutation");
    if (std::count(col.begin(), col.end(), false)) fail("column " + names_[a] + " is not a permutation");
  }
  for (std::size_t b = 0; b < n; ++b) {
    if (cayley_[identity_][b] != b || cayley_[b][identity_] != b) fail("identity fails on " + names_[b]);
  }
  for (std::size_t a = 0; a < n; ++a) {
    if (cayley_[a][inverse_[a]] != identity_ || cayley_[inverse_[a]][a] != identity_) {
      fail("no two-sided inverse for " + names_[a]);
    }
  }
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t c = 0; c < n; ++c)
        if (cayley_[cayley_[a][b]][c] != cayley_[a][cayley_[b][c]]) {
          fail("associativity fails for (" + names_[a] + "," + names_[b] + "," + names_[c] + ")");
        }
  return out;
}

FiniteGroup FiniteGroup::with_cayley_entry(std::size_t a, std::size_t b, std::size_t value) const {
  Table table = cayley_;
  table.at(a).at(b) = value;
  return FiniteGroup(kind_, transforms_, names_, std::move(table));
}

namespace {

std::vector<std::uint32_t> coordinate_map(const GridTransform& t, std::size_t n) {
  std::vector<std::uint32_t> map(n * n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      const auto [rr, cc] = t.apply(n, r, c);
      map[r * n + c] = static_cast<std::uint32_t>(rr * n + cc);
    }
  return map;
}

std::string element_name(const GridTransform& t) {
  std::string s;
  if (t.quarter_turns == 1) s = "r";
  if (t.quarter_turns > 1) s = "r" + std::to_string(t.quarter_turns);
  if (t.flip) s += "m";
  return s.empty() ? "e" : s;
}

}  // namespace

FiniteGroup make_group(GroupKind kind) {
  std::vector<int> turns;
  std::vector<bool> flips;
  switch (kind) {
    case GroupKind::trivial:
      turns = {0};
      flips = {false};
      break;
    case GroupKind::rot4:
      turns = {0, 1, 2, 3};
      flips = {false};
      break;
    case GroupKind::rot2_flip:
      turns = {0, 2};
      flips = {false, true};
      break;
    case GroupKind::rot4_flip:
      turns = {0, 1, 2, 3};
      flips = {false, true};
      break;
  }
  std::vector<GridTransform> transforms;
  for (bool f : flips)
    for (int q : turns) transforms.push_back({q, f});
  std::vector<std::string> names;
  for (const auto& t : transforms) names.push_back(element_name(t));

  // A 3x3 grid distinguishes all eight grid transforms.
  constexpr std::size_t probe = 3;
  std::vector<std::vector<std::uint32_t>> maps;
  for (const auto& t : transforms) maps.push_back(coordinate_map(t, probe));
  const std::size_t n = transforms.size();
  FiniteGroup::Table table(n, std::vector<std::size_t>(n));
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      std::vector<std::uint32_t> composed(probe * probe);
      for (std::size_t p = 0; p < composed.size(); ++p) composed[p] = maps[a][maps[b][p]];
      auto it = std::find(maps.begin(), maps.end(), composed);
      if (it == maps.end()) throw GroupError("transform set of " + std::string(to_string(kind)) + " is not closed");
      table[a][b] = static_cast<std::size_t>(it - maps.begin());
    }
  return FiniteGroup(kind, std::move(transforms), std::move(names), std::move(table));
}

GridAction::GridAction(const FiniteGroup& group, std::size_t n) : group_(group), n_(n) {
  if (n == 0) throw ExtentError("grid extent must be at least 1");
  for (std::size_t g = 0; g < group.order(); ++g) {
    auto map = coordinate_map(group.transform(g), n);
    std::vector<std::uint32_t> pull(map.size());
    for (std::size_t i = 0; i < map.size(); ++i) pull[map[i]] = static_cast<std::uint32_t>(i);
    maps_.push_back(std::move(map));
    pullbacks_.push_back(std::move(pull));
  }
}

std::vector<std::string> GridAction::homomorphism_violations() const {
  std::vector<std::string> out;
  const std::size_t G = group_.order();
  for (std::size_t g = 0; g < G; ++g) {
    std::vector<bool> hit(n_ * n_, false);
    for (auto d : maps_[g]) hit[d] = true;
    if (std::count(hit.begin(), hit.end(), false)) out.push_back("map of " + group_.name(g) + " is not a bijection");
  }
  for (std::size_t a = 0; a < G; ++a)
    for (std::size_t b = 0; b < G; ++b) {
      const auto& ab = maps_[group_.compose(a, b)];
      for (std::size_t p = 0; p < n_ * n_; ++p) {
        if (ab[p] != maps_[a][maps_[b][p]]) {
          out.push_back("grid action not a homomorphism at (" + group_.name(a) + "," + group_.name(b) + ")");
          break;
        }
      }
    }
  return out;
}

template <typename T>
Tensor<T> apply_grid(const GridAction& action, std::size_t g, const Tensor<T>& x) {
  const std::size_t n = action.extent();
  if (x.rank() < 2 || x.extent(x.rank() - 1) != n || x.extent(x.rank() - 2) != n) {
    throw DimensionError("apply_grid: trailing axes of " + shape_str(x.shape()) + " are not " + std::to_string(n) +
                         "x" + std::to_string(n));
  }
  const auto pull = action.pullback(g);
  const std::size_t plane = n * n, planes = x.size() / plane;
  std::vector<std::uint32_t> index(x.size());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t j = 0; j < plane; ++j) index[p * plane + j] = static_cast<std::uint32_t>(p * plane + pull[j]);
  return gather(x, std::span<const std::uint32_t>(index), x.shape());
}

template <typename T>
Tensor<T> apply_grid(const FiniteGroup& group, std::size_t g, const Tensor<T>& x) {
  if (x.rank() < 2 || x.extent(x.rank() - 1) != x.extent(x.rank() - 2)) {
    throw DimensionError("apply_grid: trailing axes of " + shape_str(x.shape()) + " are not square");
  }
  return apply_grid(GridAction(group, x.extent(x.rank() - 1)), g, x);
}

template Tensor<float> apply_grid(const GridAction&, std::size_t, const Tensor<float>&);
template Tensor<double> apply_grid(const GridAction&, std::size_t, const Tensor<double>&);
template Tensor<float> apply_grid(const FiniteGroup&, std::size_t, const Tensor<float>&);
template Tensor<double> apply_grid(const FiniteGroup&, std::size_t, const Tensor<double>&);

LabelAction::LabelAction(const FiniteGroup& group, std::vector<std::vector<std::size_t>> perms)
    : group_(group), perms_(std::move(perms)) {
  if (perms_.size() != group_.order()) throw GroupError("label action needs one permutation per group element");
  for (const auto& p : perms_) {
    if (p.size() != perms_.front().size()) throw PermutationError("label permutations differ in length");
    std::vector<bool> seen(p.size(), false);
    for (std::size_t v : p) {
      if (v >= p.size() || seen[v]) throw PermutationError("label map is not a bijection");
      seen[v] = true;
    }
  }
}

std::vector<std::string> LabelAction::violations() const {
  std::vector<std::string> out;
  const std::size_t L = label_count();
  for (std::size_t l = 0; l < L; ++l)
    if (perms_[group_.identity()][l] != l) {
      out.push_back("identity does not fix label " + std::to_string(l));
      break;
    }
  for (std::size_t a = 0; a < group_.order(); ++a)
    for (std::size_t b = 0; b < group_.order(); ++b)
      for (std::size_t l = 0; l < L; ++l)
        if (perms_[group_.compose(a, b)][l] != perms_[a][perms_[b][l]]) {
          out.push_back("label action not a homomorphism at (" + group_.name(a) + "," + group_.name(b) + ")");
          l = L;
        }
  return out;
}

}  // namespace equivar
