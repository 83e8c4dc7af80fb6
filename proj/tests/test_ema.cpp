// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <random>

#include "oddetr/ema.hpp"

using namespace oddetr;
using Catch::Approx;

namespace {

ModelConfig small() {
  ModelConfig c;
  c.d_model = 8;
  c.ffn_hidden = 8;
  c.num_queries = 4;
  c.num_stages = 2;
  return c;
}

ModelParams filled(double v) {
  ModelParams m(small());
  for (double& x : m.data()) x = v;
  return m;
}

bool bitwise_equal(const ModelParams& a, const ModelParams& b) {
  return a.size() == b.size() && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("init copies the student bitwise", "[ema]") {
  const ModelParams s = ModelParams::init(small(), 1);
  const EmaState e = ema_init(s, 0.99);
  CHECK(bitwise_equal(e.teacher, s));
  CHECK_THROWS_AS(ema_init(s, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(ema_init(s, -0.1), std::invalid_argument);
}

TEST_CASE("a teacher equal to the student is a fixed point", "[ema]") {
  const ModelParams s = ModelParams::init(small(), 2);
  EmaState e = ema_init(s, 0.9);
  for (int k = 0; k < 20; ++k) ema_update(e, s, 0);
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(std::abs(e.teacher.data()[i] - s.data()[i]) < 1e-15);
}

TEST_CASE("a constant student is approached geometrically", "[ema]") {
  // teacher 0, student 1: after k steps the teacher holds 1 - d^k
  EmaState e = ema_init(filled(0.0), 0.9);
  const ModelParams one = filled(1.0);
  ema_update(e, one, 0);
  ema_update(e, one, 0);
  CHECK(e.teacher.data()[0] == Approx(0.19).margin(1e-12));
  for (int k = 3; k <= 60; ++k) {
    ema_update(e, one, 0);
    CHECK(std::abs(e.teacher.data()[5] - (1.0 - std::pow(0.9, k))) < 1e-12);
  }
}

TEST_CASE("zero decay tracks the student", "[ema]") {
  EmaState e = ema_init(filled(0.0), 0.0);
  const ModelParams s = ModelParams::init(small(), 3);
  ema_update(e, s, 0);
  CHECK(bitwise_equal(e.teacher, s));
}

TEST_CASE("updates are convex combinations", "[ema][property]") {
  std::mt19937_64 rng(4);
  EmaState e = ema_init(ModelParams::init(small(), 5), 0.7);
  for (int step = 0; step < 20; ++step) {
    const ModelParams s = ModelParams::init(small(), rng());
    const ModelParams before = e.teacher;
    ema_update(e, s, 0);
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double lo = std::min(before.data()[i], s.data()[i]), hi = std::max(before.data()[i], s.data()[i]);
      CHECK(e.teacher.data()[i] >= lo);
      CHECK(e.teacher.data()[i] <= hi);
    }
  }
}

TEST_CASE("the teacher freezes at the stop epoch", "[ema]") {
  EmaState e = ema_init(filled(0.0), 0.5, 2);
  const ModelParams one = filled(1.0);
  ema_update(e, one, 0);
  ema_update(e, one, 1);
  CHECK(e.teacher.data()[0] == 0.75);
  CHECK_FALSE(e.frozen);
  const ModelParams snapshot = e.teacher;
  ema_update(e, one, 2);
  CHECK(e.frozen);
  ema_update(e, filled(5.0), 3);
  ema_update(e, one, 1);  // an earlier epoch does not unfreeze it
  CHECK(bitwise_equal(e.teacher, snapshot));
}

TEST_CASE("mismatched layouts are rejected", "[ema]") {
  EmaState e = ema_init(filled(0.0), 0.9);
  ModelConfig other = small();
  other.num_stages = 3;
  CHECK_THROWS_AS(ema_update(e, ModelParams(other), 0), std::invalid_argument);
}
