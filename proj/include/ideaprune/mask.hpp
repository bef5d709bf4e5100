#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "ideaprune/error.hpp"

namespace ideaprune {

/// Per-layer FFN neuron masks plus the indices that have been pruned for good.
/// With monotone commitment, committed[l] is exactly the set of zeros in keep[l].
struct NeuronMask {
  std::vector<std::vector<std::uint8_t>> keep;
  std::vector<std::vector<std::size_t>> committed;  // sorted ascending

  static NeuronMask all_ones(std::size_t n_layers, std::size_t hidden) {
    NeuronMask m;
    m.keep.assign(n_layers, std::vector<std::uint8_t>(hidden, 1));
    m.committed.assign(n_layers, {});
    return m;
  }

  std::size_t layers() const { return keep.size(); }
  std::size_t hidden(std::size_t layer) const { return keep.at(layer).size(); }

  std::size_t retained(std::size_t layer) const {
    const auto& k = keep.at(layer);
    return static_cast<std::size_t>(std::count(k.begin(), k.end(), std::uint8_t{1}));
  }

  bool is_all_ones() const {
    return std::all_of(keep.begin(), keep.end(), [](const auto& k) {
      return std::all_of(k.begin(), k.end(), [](std::uint8_t v) { return v == 1; });
    });
  }

  bool operator==(const NeuronMask&) const = default;
};

}  // namespace ideaprune
