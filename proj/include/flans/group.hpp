// SPDX-License-Identifier: Apache-2.0
//
// Dihedral groups D_n (n = 4 or 8) and their actions on square images.
//
// Conventions: rotations are counter-clockwise as seen on screen, the
// reflection mirrors about the vertical axis, and an element (k, f) acts by
// rotating k steps of 360/n degrees first and then reflecting if f is set.
// compose(a, b) acts like "b, then a".
#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "flans/sparse_map.hpp"
#include "flans/tensor.hpp"

namespace flans {

struct GroupElement {
  int rotation = 0;
  bool reflected = false;
  int order = 4;

  static GroupElement identity(int order) { return GroupElement{0, false, order}; }
  // Element indices follow (rotation, flip) lexicographic order.
  static GroupElement from_index(std::size_t index, int order);
  std::size_t index() const noexcept {
    return static_cast<std::size_t>(2 * rotation + (reflected ? 1 : 0));
  }
  bool is_identity() const noexcept { return rotation == 0 && !reflected; }

  friend bool operator==(const GroupElement&, const GroupElement&) = default;
};

std::string to_string(const GroupElement& g);

GroupElement compose(const GroupElement& a, const GroupElement& b);
GroupElement inverse(const GroupElement& g);
std::vector<GroupElement> group_elements(int order);
std::size_t group_size(int order);

GroupElement random_element(int order, std::uint64_t seed);
GroupElement random_element(int order, std::mt19937_64& rng);

enum class Interpolation { ExactGrid, Bilinear };

class GroupAction {
 public:
  // D4 acts by exact pixel permutations; D8 needs bilinear resampling for
  // its odd rotations (even rotations stay exact).
  explicit GroupAction(int order = 4);
  GroupAction(int order, Interpolation interpolation);

  int order() const noexcept { return order_; }
  Interpolation interpolation() const noexcept { return interpolation_; }

  // Acts on the trailing two (square) dimensions; leading dims are carried.
  template <typename T>
  Tensor<T> act(const GroupElement& g, const Tensor<T>& x) const;
  // Label masks resample by nearest neighbour so labels never mix.
  Mask act_mask(const GroupElement& g, const Mask& m) const;

  // Pixel map on an size x size grid. `nearest` selects mask resampling.
  const SparseMap& spatial_map(const GroupElement& g, std::size_t size, bool nearest = false) const;

 private:
  void check(const GroupElement& g) const;

  int order_;
  Interpolation interpolation_;
};

// Trailing-square-dims check shared by everything that acts on images.
std::size_t square_side(const Shape& shape);

}  // namespace flans
