#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "mcads/tensor.hpp"

namespace mcads {

// Storage shared between a Var handle, the tape entries that reference it,
// and (for parameters) the parameter registry.
struct Node {
  Tensor value;
  Tensor grad;  // undefined until a gradient reaches this node
  bool requires_grad = false;

  // grad += g, allocating on first contribution.
  void accumulate(const Tensor& g);
};

// Handle to a value participating in (possibly) recorded computation.
// Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool has_grad() const { return node_ && node_->grad.defined(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  DType dtype() const { return node_->value.dtype(); }
  bool defined() const { return static_cast<bool>(node_); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Ordered record of executed primitives. Backward replays the record in
// exact reverse order; each entry pushes its output's gradient into its
// inputs, so fan-out contributions accumulate before a node is consumed.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(const char* op, std::shared_ptr<Node> output, BackwardFn fn);
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and propagates. Clears the tape afterwards.
  void backward(const Var& loss);

 private:
  struct Entry {
    const char* op;
    std::shared_ptr<Node> output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
};

// Installs a tape as the calling thread's active tape for the scope's
// lifetime. Ops executed with no active tape record nothing (inference).
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// Convenience: runs backward on the active tape.
void backward(const Var& loss);

// Test hook for the gradient-check harness: entries whose op name matches
// get their incoming gradient scaled before being propagated. Empty string
// disables the fault.
void inject_gradient_fault(std::string_view op, double factor = 1.5);

// Records sign/argmax patterns of non-smooth ops while enabled. The
// gradient checker compares patterns between the +eps and -eps evaluations
// to detect probes that straddle a kink.
class KinkMonitor {
 public:
  static void enable(bool on);
  static bool enabled();
  static void record(std::uint64_t pattern_hash);
  static std::vector<std::uint64_t> take();
};

namespace detail {

// Creates the output Var of an op. It requires grad iff a tape is active
// and any input requires grad.
Var make_output(Tensor value, std::initializer_list<const Var*> inputs);
Var make_output(Tensor value, const std::vector<Var>& inputs);

// Checks the op output for NaN/Inf and throws NumericError naming the op.
void check_finite(const Tensor& t, const char* op);

}  // namespace detail

}  // namespace mcads
