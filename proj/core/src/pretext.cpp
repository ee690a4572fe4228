#include "equivar/pretext.hpp"

#include <algorithm>
#include <bit>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "equivar/errors.hpp"
#include "equivar/ops.hpp"

namespace equivar {

namespace {

constexpr std::array<std::pair<std::size_t, std::size_t>, 8> kContextCells{{
    {1, 0}, {2, 1}, {1, 2}, {0, 1}, {0, 0}, {2, 0}, {2, 2}, {0, 2}}};

template <typename T>
Tensor<T> crop_patch(const Tensor<T>& image, std::size_t top, std::size_t left, std::size_t size) {
  const std::size_t C = image.extent(0), n = image.extent(1);
  std::vector<T> out(C * size * size);
  const auto v = image.values();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) out[(c * size + y) * size + x] = v[(c * n + top + y) * n + left + x];
  return Tensor<T>(Shape{C, size, size}, std::move(out));
}

template <typename T>
Tensor<T> cell_patch(const Tensor<T>& image, std::size_t row, std::size_t col, const PatchGeometry& geo,
                     std::mt19937_64* rng) {
  const std::size_t n = image.extent(1);
  auto [top, left] = geo.origin(n, row, col);
  if (geo.jitter > 0 && rng != nullptr) {
    std::uniform_int_distribution<int> shift(-static_cast<int>(geo.jitter), static_cast<int>(geo.jitter));
    const int max_origin = static_cast<int>(n - geo.patch);
    top = static_cast<std::size_t>(std::clamp(static_cast<int>(top) + shift(*rng), 0, max_origin));
    left = static_cast<std::size_t>(std::clamp(static_cast<int>(left) + shift(*rng), 0, max_origin));
  }
  return crop_patch(image, top, left, geo.patch);
}

template <typename T>
void require_image(const Tensor<T>& image, const PatchGeometry& geo) {
  if (image.rank() != 3 || image.extent(1) != image.extent(2)) {
    throw DimensionError("expected a square [C,n,n] image, got " + shape_str(image.shape()));
  }
  geo.validate(image.extent(1));
}

std::uint64_t pack(const Puzzle& p) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 9; ++i) v |= static_cast<std::uint64_t>(p[i]) << (4 * i);
  return v;
}

// Number of nibbles in which two packed permutations differ.
int packed_hamming(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ b;
  x = (x | (x >> 1) | (x >> 2) | (x >> 3)) & 0x111111111ULL;
  return std::popcount(x);
}

}  // namespace

std::pair<std::size_t, std::size_t> context_cell(std::size_t label) {
  if (label >= kContextCells.size()) throw DimensionError("context label " + std::to_string(label) + " out of range");
  return kContextCells[label];
}

std::pair<std::size_t, std::size_t> PatchGeometry::origin(std::size_t n, std::size_t row, std::size_t col) const {
  const std::size_t offset = (n - (3 * patch + 2 * gap)) / 2;
  return {offset + row * (patch + gap), offset + col * (patch + gap)};
}

void PatchGeometry::validate(std::size_t n) const {
  const std::size_t span = 3 * patch + 2 * gap;
  if (patch == 0 || span > n) {
    throw ExtentError("image extent " + std::to_string(n) + " cannot hold a 3x3 grid of " + std::to_string(patch) +
                      "px patches with " + std::to_string(gap) + "px gaps");
  }
  if ((n - span) % 2 != 0) {
    throw ExtentError("patch grid of span " + std::to_string(span) + " cannot be centred in extent " +
                      std::to_string(n));
  }
}

template <typename T>
ContextSample<T> extract_context(const Tensor<T>& image, std::size_t neighbor_index, const PatchGeometry& geometry,
                                 std::mt19937_64* rng) {
  require_image(image, geometry);
  const auto [row, col] = context_cell(neighbor_index);
  ContextSample<T> s;
  s.center = cell_patch(image, 1, 1, geometry, rng);
  s.neighbor = cell_patch(image, row, col, geometry, rng);
  s.label = neighbor_index;
  return s;
}

LabelAction context_label_action(const FiniteGroup& group) {
  if (group.kind() != GroupKind::rot4) {
    throw GroupError("context prediction labels carry a free action only for rot4, got " +
                     std::string(to_string(group.kind())));
  }
  std::vector<std::vector<std::size_t>> perms;
  for (std::size_t g = 0; g < group.order(); ++g) {
    std::vector<std::size_t> perm(8);
    for (std::size_t l = 0; l < 8; ++l) {
      const auto [r, c] = kContextCells[l];
      const auto dest = group.transform(g).apply(3, r, c);
      perm[l] = static_cast<std::size_t>(std::find(kContextCells.begin(), kContextCells.end(), dest) - kContextCells.begin());
    }
    perms.push_back(std::move(perm));
  }
  return LabelAction(group, std::move(perms));
}

bool is_bijection(const Puzzle& p) {
  std::array<bool, 9> seen{};
  for (auto v : p) {
    if (v >= 9 || seen[v]) return false;
    seen[v] = true;
  }
  return true;
}

Puzzle identity_puzzle() {
  Puzzle p{};
  std::iota(p.begin(), p.end(), std::uint8_t{0});
  return p;
}

Puzzle compose(const Puzzle& a, const Puzzle& b) {
  Puzzle out{};
  for (std::size_t k = 0; k < 9; ++k) out[k] = a[b[k]];
  return out;
}

Puzzle grid_permutation(const GridTransform& t) {
  Puzzle p{};
  for (std::size_t cell = 0; cell < 9; ++cell) {
    const auto [r, c] = t.apply(3, cell / 3, cell % 3);
    p[cell] = static_cast<std::uint8_t>(r * 3 + c);
  }
  return p;
}

int hamming(const Puzzle& a, const Puzzle& b) {
  int d = 0;
  for (std::size_t k = 0; k < 9; ++k) d += a[k] != b[k];
  return d;
}

template <typename T>
JigsawSample<T> extract_jigsaw(const Tensor<T>& image, const Puzzle& sigma, const PatchGeometry& geometry,
                               std::mt19937_64* rng) {
  if (!is_bijection(sigma)) throw PermutationError("jigsaw permutation is not a bijection on 9 cells");
  require_image(image, geometry);
  JigsawSample<T> s;
  for (std::size_t k = 0; k < 9; ++k) s.patches.push_back(cell_patch(image, sigma[k] / 3u, sigma[k] % 3u, geometry, rng));
  return s;
}

PermutationSubset::PermutationSubset(GroupKind group, std::vector<Puzzle> perms, std::uint64_t seed, int min_hamming)
    : group_(group), perms_(std::move(perms)), seed_(seed), min_hamming_(min_hamming) {
  for (std::size_t i = 0; i < perms_.size(); ++i) {
    if (!is_bijection(perms_[i])) throw PermutationError("subset entry " + std::to_string(i) + " is not a bijection");
    if (!index_.emplace(pack(perms_[i]), i).second) {
      throw PermutationError("subset entry " + std::to_string(i) + " is a duplicate");
    }
  }
}

std::size_t PermutationSubset::orbit_count() const {
  return perms_.size() / make_group(group_).order();
}

std::optional<std::size_t> PermutationSubset::label_of(const Puzzle& p) const {
  auto it = index_.find(pack(p));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t PermutationSubset::act(const FiniteGroup& group, std::size_t g, std::size_t label) const {
  return *label_of(jigsaw_label_action(group, g, at(label), *this));
}

LabelAction PermutationSubset::label_action(const FiniteGroup& group) const {
  std::vector<std::vector<std::size_t>> perms(group.order(), std::vector<std::size_t>(size()));
  for (std::size_t g = 0; g < group.order(); ++g)
    for (std::size_t l = 0; l < size(); ++l) perms[g][l] = act(group, g, l);
  return LabelAction(group, std::move(perms));
}

void PermutationSubset::write(std::ostream& os) const {
  os << "group=" << to_string(group_) << " orbits=" << orbit_count() << " seed=" << seed_
     << " min_hamming=" << min_hamming_ << '\n';
  for (const auto& p : perms_) {
    for (std::size_t k = 0; k < 9; ++k) os << (k ? " " : "") << static_cast<int>(p[k]);
    os << '\n';
  }
}

PermutationSubset PermutationSubset::read(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw FormatError("permutation subset: missing header");
  std::istringstream hs(header);
  std::string token;
  std::optional<GroupKind> group;
  std::optional<std::size_t> orbits;
  std::optional<std::uint64_t> seed;
  std::optional<int> min_hamming;
  while (hs >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) throw FormatError("permutation subset: bad header token '" + token + "'");
    const std::string key = token.substr(0, eq), value = token.substr(eq + 1);
    try {
      if (key == "group") group = parse_group_kind(value);
      else if (key == "orbits") orbits = std::stoull(value);
      else if (key == "seed") seed = std::stoull(value);
      else if (key == "min_hamming") min_hamming = std::stoi(value);
      else throw FormatError("permutation subset: unknown header key '" + key + "'");
    } catch (const std::logic_error&) {
      throw FormatError("permutation subset: bad value for '" + key + "'");
    }
  }
  if (!group || !orbits || !seed || !min_hamming) throw FormatError("permutation subset: incomplete header");
  std::vector<Puzzle> perms;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    Puzzle p{};
    for (auto& v : p) {
      int x = -1;
      if (!(ls >> x) || x < 0 || x > 8) throw FormatError("permutation subset: bad line '" + line + "'");
      v = static_cast<std::uint8_t>(x);
    }
    perms.push_back(p);
  }
  PermutationSubset subset(*group, std::move(perms), *seed, *min_hamming);
  if (subset.orbit_count() != *orbits || subset.size() != *orbits * make_group(*group).order()) {
    throw FormatError("permutation subset: header declares " + std::to_string(*orbits) + " orbits, body has " +
                      std::to_string(subset.size()) + " permutations");
  }
  return subset;
}

Puzzle jigsaw_label_action(const FiniteGroup& group, std::size_t g, const Puzzle& sigma,
                           const PermutationSubset& subset) {
  const Puzzle moved = compose(grid_permutation(group.transform(g)), sigma);
  if (!subset.label_of(moved)) {
    throw ClosureError("permutation subset is not closed under " + group.name(g));
  }
  return moved;
}

PermutationSubset generate_closed_subset(GroupKind kind, std::size_t orbits, std::uint64_t seed, std::size_t pool) {
  const FiniteGroup group = make_group(kind);
  const std::size_t n = group.order();
  if (orbits * n > 362880) throw ParameterError("requested subset exceeds 9! permutations");
  if (pool == 0) throw ParameterError("candidate pool must be non-empty");
  std::vector<Puzzle> cell_maps;
  for (std::size_t g = 0; g < n; ++g) cell_maps.push_back(grid_permutation(group.transform(g)));

  std::mt19937_64 rng(seed);
  std::vector<Puzzle> selected;
  std::vector<std::uint64_t> packed;
  std::unordered_map<std::uint64_t, bool> members;
  std::vector<Puzzle> candidates(pool);
  for (std::size_t step = 0; step < orbits; ++step) {
    for (auto& c : candidates) {
      c = identity_puzzle();
      std::shuffle(c.begin(), c.end(), rng);
    }
    int best = -1;
    std::size_t best_index = 0;
    for (std::size_t i = 0; i < pool; ++i) {
      const std::uint64_t key = pack(candidates[i]);
      if (members.count(key)) continue;
      int dist = 10;
      for (std::uint64_t s : packed) {
        dist = std::min(dist, packed_hamming(key, s));
        if (dist <= best) break;
      }
      if (dist > best) {
        best = dist;
        best_index = i;
      }
    }
    if (best < 0) throw ParameterError("candidate pool exhausted while building the subset");
    for (const auto& pi : cell_maps) {
      const Puzzle member = compose(pi, candidates[best_index]);
      selected.push_back(member);
      packed.push_back(pack(member));
      members.emplace(packed.back(), true);
    }
  }
  const int min_d = min_pairwise_hamming(selected);
  return PermutationSubset(kind, std::move(selected), seed, min_d);
}

int min_pairwise_hamming(std::span<const Puzzle> perms) {
  std::vector<std::uint64_t> packed;
  packed.reserve(perms.size());
  for (const auto& p : perms) packed.push_back(pack(p));
  int best = 9;
  for (std::size_t i = 0; i < packed.size(); ++i)
    for (std::size_t j = i + 1; j < packed.size(); ++j) best = std::min(best, packed_hamming(packed[i], packed[j]));
  return best;
}

template <typename T>
Tensor<T> pretext_loss(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.extent(0) != labels.size()) {
    throw DimensionError("pretext_loss: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                         " labels");
  }
  const std::size_t B = logits.extent(0), L = logits.extent(1);
  std::vector<std::uint32_t> index(B);
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= L) throw DimensionError("pretext_loss: label " + std::to_string(labels[b]) + " >= " + std::to_string(L));
    index[b] = static_cast<std::uint32_t>(b * L + labels[b]);
  }
  const auto picked = gather(log_softmax(logits, 1), std::span<const std::uint32_t>(index), Shape{B});
  return neg(mean(picked));
}

template ContextSample<float> extract_context(const Tensor<float>&, std::size_t, const PatchGeometry&, std::mt19937_64*);
template ContextSample<double> extract_context(const Tensor<double>&, std::size_t, const PatchGeometry&,
                                               std::mt19937_64*);
template JigsawSample<float> extract_jigsaw(const Tensor<float>&, const Puzzle&, const PatchGeometry&, std::mt19937_64*);
template JigsawSample<double> extract_jigsaw(const Tensor<double>&, const Puzzle&, const PatchGeometry&,
                                             std::mt19937_64*);
template Tensor<float> pretext_loss(const Tensor<float>&, std::span<const std::size_t>);
template Tensor<double> pretext_loss(const Tensor<double>&, std::span<const std::size_t>);

}  // namespace equivar
