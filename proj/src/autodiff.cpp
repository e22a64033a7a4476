#include "mcads/autodiff.hpp"

#include <string>

namespace mcads {

namespace {

thread_local Tape* g_active_tape = nullptr;

struct Fault {
  std::string op;
  double factor = 1.0;
};
Fault g_fault;

thread_local bool g_kink_enabled = false;
thread_local std::vector<std::uint64_t> g_kink_patterns;

}  // namespace

void Node::accumulate(const Tensor& g) {
  if (!grad.defined()) {
    grad = g;
  } else {
    grad.add_(g);
  }
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

void Tape::record(const char* op, std::shared_ptr<Node> output, BackwardFn fn) {
  entries_.push_back(Entry{op, std::move(output), std::move(fn)});
}

void Tape::backward(const Var& loss) {
  if (!loss.defined() || loss.value().numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    entries_.clear();
    throw ShapeError("backward: loss is detached from every tracked parameter");
  }
  loss.node()->accumulate(Tensor(loss.shape(), loss.dtype(), 1.0));
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output->grad.defined()) continue;  // output did not influence the loss
    if (!g_fault.op.empty() && g_fault.op == it->op) it->output->grad.scale_(g_fault.factor);
    it->fn();
  }
  // Intermediate gradients are released with the entries; leaf gradients
  // (parameters, inputs) stay on their nodes.
  for (auto& e : entries_) e.output->grad = Tensor();
  entries_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void backward(const Var& loss) {
  if (!g_active_tape) throw ShapeError("backward: no active tape");
  g_active_tape->backward(loss);
}

void inject_gradient_fault(std::string_view op, double factor) {
  g_fault.op = std::string(op);
  g_fault.factor = factor;
}

void KinkMonitor::enable(bool on) {
  g_kink_enabled = on;
  g_kink_patterns.clear();
}
bool KinkMonitor::enabled() { return g_kink_enabled; }
void KinkMonitor::record(std::uint64_t h) {
  if (g_kink_enabled) g_kink_patterns.push_back(h);
}
std::vector<std::uint64_t> KinkMonitor::take() {
  std::vector<std::uint64_t> out;
  out.swap(g_kink_patterns);
  return out;
}

namespace detail {

Var make_output(Tensor value, std::initializer_list<const Var*> inputs) {
  bool tracked = false;
  if (g_active_tape) {
    for (const Var* v : inputs) tracked = tracked || (v && v->requires_grad());
  }
  return Var(std::move(value), tracked);
}

Var make_output(Tensor value, const std::vector<Var>& inputs) {
  bool tracked = false;
  if (g_active_tape) {
    for (const auto& v : inputs) tracked = tracked || v.requires_grad();
  }
  return Var(std::move(value), tracked);
}

void check_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite value produced by op '") + op + "' (shape " +
                       to_string(t.shape()) + ")");
  }
}

}  // namespace detail

}  // namespace mcads
