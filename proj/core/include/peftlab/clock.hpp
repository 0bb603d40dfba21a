// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>

namespace peftlab {

/// Timing source used by training history and the benchmark harness.
/// The stub variant makes timed artifacts byte-reproducible.
class Clock {
 public:
  virtual ~Clock() = default;
  virtual double now_seconds() = 0;
};

class SteadyClock final : public Clock {
 public:
  double now_seconds() override {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

/// Advances a fixed tick on every read.
class StubClock final : public Clock {
 public:
  explicit StubClock(double tick_seconds = 1e-3) : tick_(tick_seconds) {}
  double now_seconds() override {
    t_ += tick_;
    return t_;
  }

 private:
  double t_ = 0.0;
  double tick_;
};

}  // namespace peftlab
