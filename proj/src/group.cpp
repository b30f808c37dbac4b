// SPDX-License-Identifier: Apache-2.0
#include "flans/group.hpp"

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <tuple>

namespace flans {

namespace {

void check_order(int order) {
  if (order != 4 && order != 8) {
    throw Error(ErrorCode::InvalidArgument,
                "dihedral group order must be 4 or 8, got " + std::to_string(order));
  }
}

int mod(int a, int n) { return ((a % n) + n) % n; }

using MapKey = std::tuple<int, std::size_t, std::size_t, bool, bool>;

std::mutex g_cache_mutex;
std::map<MapKey, std::unique_ptr<SparseMap>>& cache() {
  static std::map<MapKey, std::unique_ptr<SparseMap>> c;
  return c;
}

// Output pixel (i, j) reads the input at T^-1 p. Coordinates are doubled and
// centred so the D4 case stays in integers.
SparseMap build_map(const GroupElement& g, std::size_t n, bool bilinear, bool nearest) {
  SparseMap m;
  m.in_size = n * n;
  const long last = static_cast<long>(n) - 1;
  const int quarter = g.order / 4;
  const bool grid_exact = g.rotation % quarter == 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      long u = 2 * static_cast<long>(j) - last;
      long v = last - 2 * static_cast<long>(i);
      if (g.reflected) u = -u;
      if (grid_exact) {
        const int steps = g.rotation / quarter;
        for (int s = 0; s < steps; ++s) {
          const long nu = v;
          v = -u;
          u = nu;
        }
        const long si = (last - v) / 2;
        const long sj = (u + last) / 2;
        m.push(static_cast<std::uint32_t>(si * static_cast<long>(n) + sj), 1.0);
        m.end_row();
        continue;
      }
      if (!bilinear) {
        throw Error(ErrorCode::InvalidArgument, "exact-grid action cannot realise " + to_string(g));
      }
      const double theta = -2.0 * std::numbers::pi * g.rotation / g.order;
      const double c = std::cos(theta), s = std::sin(theta);
      const double ru = c * u - s * v;
      const double rv = s * u + c * v;
      const double si = (static_cast<double>(last) - rv) / 2.0;
      const double sj = (ru + static_cast<double>(last)) / 2.0;
      const auto inside = [&](long a, long b) { return a >= 0 && a <= last && b >= 0 && b <= last; };
      if (nearest) {
        const long ni = std::lround(si), nj = std::lround(sj);
        if (inside(ni, nj)) m.push(static_cast<std::uint32_t>(ni * static_cast<long>(n) + nj), 1.0);
        m.end_row();
        continue;
      }
      const long i0 = static_cast<long>(std::floor(si));
      const long j0 = static_cast<long>(std::floor(sj));
      const double di = si - static_cast<double>(i0);
      const double dj = sj - static_cast<double>(j0);
      const long ii[2] = {i0, i0 + 1};
      const long jj[2] = {j0, j0 + 1};
      const double wi[2] = {1.0 - di, di};
      const double wj[2] = {1.0 - dj, dj};
      for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
          const double w = wi[a] * wj[b];
          if (w > 0.0 && inside(ii[a], jj[b])) {
            m.push(static_cast<std::uint32_t>(ii[a] * static_cast<long>(n) + jj[b]), w);
          }
        }
      }
      m.end_row();
    }
  }
  return m;
}

}  // namespace

GroupElement GroupElement::from_index(std::size_t index, int order) {
  check_order(order);
  if (index >= group_size(order)) {
    throw Error(ErrorCode::InvalidArgument, "group index " + std::to_string(index) +
                                                " out of range for D" + std::to_string(order));
  }
  return GroupElement{static_cast<int>(index / 2), (index % 2) == 1, order};
}

std::string to_string(const GroupElement& g) {
  return "r" + std::to_string(g.rotation * 360 / g.order) + (g.reflected ? "f" : "");
}

GroupElement compose(const GroupElement& a, const GroupElement& b) {
  if (a.order != b.order) {
    throw Error(ErrorCode::GroupOrderMismatch,
                "D" + std::to_string(a.order) + " vs D" + std::to_string(b.order));
  }
  // F^fa R^ka F^fb R^kb = F^(fa^fb) R^((fb ? -ka : ka) + kb)
  const int rot = mod((b.reflected ? -a.rotation : a.rotation) + b.rotation, a.order);
  return GroupElement{rot, a.reflected != b.reflected, a.order};
}

GroupElement inverse(const GroupElement& g) {
  if (g.reflected) return g;
  return GroupElement{mod(-g.rotation, g.order), false, g.order};
}

std::size_t group_size(int order) {
  check_order(order);
  return static_cast<std::size_t>(2 * order);
}

std::vector<GroupElement> group_elements(int order) {
  std::vector<GroupElement> out;
  for (std::size_t i = 0; i < group_size(order); ++i) out.push_back(GroupElement::from_index(i, order));
  return out;
}

GroupElement random_element(int order, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, group_size(order) - 1);
  return GroupElement::from_index(pick(rng), order);
}

GroupElement random_element(int order, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_element(order, rng);
}

std::size_t square_side(const Shape& shape) {
  if (shape.size() < 2 || shape[shape.size() - 1] != shape[shape.size() - 2]) {
    throw Error(ErrorCode::NonSquareImage, "expected square trailing dims, got " + to_string(shape));
  }
  return shape.back();
}

GroupAction::GroupAction(int order)
    : GroupAction(order, order == 4 ? Interpolation::ExactGrid : Interpolation::Bilinear) {}

GroupAction::GroupAction(int order, Interpolation interpolation)
    : order_(order), interpolation_(interpolation) {
  check_order(order);
  if (order == 8 && interpolation == Interpolation::ExactGrid) {
    throw Error(ErrorCode::InvalidArgument, "D8 requires bilinear interpolation");
  }
}

void GroupAction::check(const GroupElement& g) const {
  if (g.order != order_) {
    throw Error(ErrorCode::GroupOrderMismatch,
                "element of D" + std::to_string(g.order) + " acting through D" + std::to_string(order_));
  }
}

const SparseMap& GroupAction::spatial_map(const GroupElement& g, std::size_t size, bool nearest) const {
  check(g);
  const bool bilinear = interpolation_ == Interpolation::Bilinear;
  MapKey key{order_, g.index(), size, bilinear, nearest};
  std::lock_guard<std::mutex> lock(g_cache_mutex);
  auto& c = cache();
  auto it = c.find(key);
  if (it == c.end()) {
    it = c.emplace(key, std::make_unique<SparseMap>(build_map(g, size, bilinear, nearest))).first;
  }
  return *it->second;
}

template <typename T>
Tensor<T> GroupAction::act(const GroupElement& g, const Tensor<T>& x) const {
  const std::size_t n = square_side(x.shape());
  const SparseMap& m = spatial_map(g, n, false);
  Tensor<T> out(x.shape());
  m.apply<T>(x.data(), out.data());
  return out;
}

Mask GroupAction::act_mask(const GroupElement& g, const Mask& mask) const {
  const std::size_t n = square_side(mask.shape());
  const SparseMap& m = spatial_map(g, n, true);
  Mask out(mask.shape());
  m.apply<std::uint8_t>(mask.data(), out.data());
  return out;
}

template Tensor<float> GroupAction::act(const GroupElement&, const Tensor<float>&) const;
template Tensor<double> GroupAction::act(const GroupElement&, const Tensor<double>&) const;

}  // namespace flans
