// SPDX-License-Identifier: Apache-2.0
//
// Exponential-moving-average teacher with an optional stop epoch after which
// the teacher is frozen.

#pragma once

#include <optional>
#include <stdexcept>

#include "oddetr/network.hpp"

namespace oddetr {

struct EmaState {
  ModelParams teacher;
  double decay = 0.99;
  std::optional<int> stop_after_epoch;
  bool frozen = false;
};

inline EmaState ema_init(const ModelParams& student, double decay = 0.99,
                         std::optional<int> stop_after_epoch = std::nullopt) {
  if (!(decay >= 0.0 && decay < 1.0)) throw std::invalid_argument("ema decay must lie in [0,1)");
  return EmaState{student, decay, stop_after_epoch, false};
}

/// One EMA step: teacher <- d * teacher + (1 - d) * student. Once the stop
/// epoch is reached the teacher is frozen and never written again.
inline void ema_update(EmaState& state, const ModelParams& student, int epoch) {
  if (!state.teacher.same_layout(student)) throw std::invalid_argument("ema_update: teacher/student layout mismatch");
  if (state.frozen) return;
  if (state.stop_after_epoch && epoch >= *state.stop_after_epoch) {
    state.frozen = true;
    return;
  }
  const double d = state.decay;
  auto t = state.teacher.data();
  const auto s = student.data();
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = d * t[i] + (1.0 - d) * s[i];
}

}  // namespace oddetr
