#pragma once

#include <map>
#include <string>

#include "fpgx/common.hpp"
#include "fpgx/linalg.hpp"

namespace fpgx {

enum class Trainability { FullFrozen, FullTrainable, ColRange, RowRange };

// Range kinds mark [begin, end) as the trainable slice; the rest is frozen.
struct TensorMask {
  Trainability kind = Trainability::FullFrozen;
  Index begin = 0;
  Index end = 0;

  static TensorMask frozen() { return {Trainability::FullFrozen, 0, 0}; }
  static TensorMask trainable() { return {Trainability::FullTrainable, 0, 0}; }
  static TensorMask col_range(Index b, Index e) { return {Trainability::ColRange, b, e}; }
  static TensorMask row_range(Index b, Index e) { return {Trainability::RowRange, b, e}; }
};

struct FreezeMask {
  std::map<std::string, TensorMask> tensors;

  const TensorMask& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw StructureError("freeze mask missing tensor " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
};

template <class S>
void zero_frozen(const TensorMask& m, Mat<S>& g) {
  switch (m.kind) {
    case Trainability::FullFrozen:
      g.setZero();
      break;
    case Trainability::FullTrainable:
      break;
    case Trainability::ColRange:
      if (m.begin < 0 || m.end > g.cols() || m.begin > m.end)
        throw StructureError("mask column range out of bounds");
      if (m.begin > 0) g.leftCols(m.begin).setZero();
      if (m.end < g.cols()) g.rightCols(g.cols() - m.end).setZero();
      break;
    case Trainability::RowRange:
      if (m.begin < 0 || m.end > g.rows() || m.begin > m.end)
        throw StructureError("mask row range out of bounds");
      if (m.begin > 0) g.topRows(m.begin).setZero();
      if (m.end < g.rows()) g.bottomRows(g.rows() - m.end).setZero();
      break;
  }
}

template <class S>
bool is_trainable_coord(const TensorMask& m, Index r, Index c) {
  switch (m.kind) {
    case Trainability::FullFrozen: return false;
    case Trainability::FullTrainable: return true;
    case Trainability::ColRange: return c >= m.begin && c < m.end;
    case Trainability::RowRange: return r >= m.begin && r < m.end;
  }
  return false;
}

}  // namespace fpgx
