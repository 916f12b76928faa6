#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynpre/tensor.hpp"

namespace dynpre {

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

/// In-memory form of a subject collection: every subject is channels x timepoints.
struct Dataset {
  std::size_t channels = 0;
  std::size_t timepoints = 0;
  std::vector<Matrix<float>> subjects;
  std::vector<int> labels;  // empty when unlabeled
  std::vector<Split> splits;

  std::size_t size() const { return subjects.size(); }
  bool has_labels() const { return !labels.empty(); }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i)
      if (splits[i] == s) out.push_back(i);
    return out;
  }

  std::vector<std::size_t> indices(Split s, int label) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i)
      if (splits[i] == s && labels.at(i) == label) out.push_back(i);
    return out;
  }

  void validate() const {
    if (splits.size() != subjects.size()) throw std::invalid_argument("dataset: split tag count != subject count");
    if (!labels.empty() && labels.size() != subjects.size()) {
      throw std::invalid_argument("dataset: label count != subject count");
    }
    for (const auto& s : subjects) {
      if (static_cast<std::size_t>(s.rows()) != channels || static_cast<std::size_t>(s.cols()) != timepoints) {
        throw ShapeError("dataset: subject of shape " + std::to_string(s.rows()) + "x" + std::to_string(s.cols()) +
                         " in a " + std::to_string(channels) + "x" + std::to_string(timepoints) + " container");
      }
    }
  }
};

}  // namespace dynpre
