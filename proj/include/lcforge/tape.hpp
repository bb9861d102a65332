#pragma once

#include <functional>
#include <vector>

#include "lcforge/common.hpp"
#include "lcforge/tensor.hpp"

namespace lcforge {

/// Ordered record of executed operations. Ops append their backward
/// closures as they run, so the record is topologically ordered by
/// construction; one reverse sweep propagates gradients to every
/// requires_grad tensor reachable from the loss.
template <typename T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  void record(std::function<void()> backward_fn) {
    if (recording_) entries_.push_back(std::move(backward_fn));
  }

  size_t size() const { return entries_.size(); }

  void clear() {
    entries_.clear();
    entries_.shrink_to_fit();
  }

  /// Seeds d(loss)/d(loss) = 1 and runs the recorded closures in reverse.
  /// The tape is cleared afterwards; captured intermediates are released
  /// as soon as their closure has run.
  void backward(Tensor<T>& loss) {
    if (!loss.defined() || !loss.on_tape()) {
      throw Error("backward called on a detached tensor (not produced by a taped operation)");
    }
    if (loss.numel() != 1) {
      throw ValidationError("backward expects a scalar loss, got shape " + shape_str(loss.shape()));
    }
    loss.ensure_grad();
    loss.grad()[0] += T(1);
    for (size_t i = entries_.size(); i-- > 0;) {
      entries_[i]();
      entries_[i] = nullptr;  // frees captured tensors early
    }
    clear();
  }

 private:
  bool recording_;
  std::vector<std::function<void()>> entries_;
};

}  // namespace lcforge
