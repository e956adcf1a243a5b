// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with a recorded computation tape for reverse-mode
// differentiation. A Tensor is a shared handle; copies alias the same
// buffer. Data is treated as immutable once an op has consumed it, except
// for optimizer updates on leaf parameters between steps.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace duorec {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  /// Zero-filled tensor.
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  /// Row-major element access for 2-D tensors.
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);

  bool has_grad() const;
  std::span<const double> grad() const;
  /// Allocates a zero gradient buffer on first use. Gradient accumulation is
  /// the one mutation permitted through a const handle.
  std::span<double> mutable_grad() const;
  void zero_grad();

  /// Copy of the values with no gradient tracking.
  Tensor detach() const;

  bool is_same(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

/// Ordered record of differentiable operations. One tape per training
/// step; not thread-safe.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::vector<Tensor> inputs, Tensor output, BackwardFn fn);
  std::size_t size() const { return nodes_.size(); }
  bool contains_output(const Tensor& t) const;

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Gradients
  /// accumulate into existing buffers. The tape is empty afterwards.
  void backward(const Tensor& loss);
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
};

/// Makes `tape` the recording target for ops on this thread while alive.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording on this thread while alive (evaluation paths).
class NoTapeScope {
 public:
  NoTapeScope();
  ~NoTapeScope();
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

void backward(const Tensor& loss, Tape& tape);

namespace autodiff {

/// True when a tape is active and any input participates in differentiation.
bool should_track(std::initializer_list<const Tensor*> inputs);

/// Registers `output` on the active tape. `output` is marked as requiring
/// gradients.
void record(std::vector<Tensor> inputs, Tensor& output, Tape::BackwardFn fn);

}  // namespace autodiff

}  // namespace duorec
