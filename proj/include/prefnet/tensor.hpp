#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace prefnet {

/// Raised for contract violations anywhere in the library (bad shapes,
/// invalid domains, malformed inputs).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward reaches this node
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

/// Dense row-major array of doubles with shared storage. Copies alias the
/// same node, as with most tensor libraries; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() : node_(std::make_shared<Node>()) { node_->shape = {0}; }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (numel(shape) != data.size()) {
      throw Error("Tensor: shape " + ad::to_string(shape) + " holds " +
                  std::to_string(numel(shape)) + " values, got " +
                  std::to_string(data.size()));
    }
    for (auto d : shape) {
      if (d == 0) throw Error("Tensor: zero-sized dimension in " + ad::to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 1.0, requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({}, {value}, requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> data() const& { return node_->data; }
  // Temporaries hand out a copy so `for (x : f().data())` stays valid.
  std::vector<double> data() && { return node_->data; }
  /// Mutable access is for leaves (parameters, inputs) between steps only.
  std::span<double> mutable_data() { return node_->data; }
  const std::vector<double>& values() const& { return node_->data; }
  std::vector<double> values() && { return node_->data; }

  std::span<const double> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  double item() const {
    if (size() != 1) throw Error("Tensor::item on tensor of shape " + ad::to_string(shape()));
    return node_->data[0];
  }
  double operator[](std::size_t flat) const { return node_->data[flat]; }

  /// Deep copy that does not require grad and is not connected to any tape.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }
  /// Deep copy preserving requires_grad (without gradient).
  Tensor clone() const { return Tensor(shape(), node_->data, requires_grad()); }

  const std::shared_ptr<Node>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  std::shared_ptr<Node> node_;
};

/// Ordered record of primitive operations for reverse-mode differentiation.
/// Operations only record while a tape is active on the current thread
/// (see TapeScope); without one, every op is a plain forward evaluation.
class Tape {
 public:
  struct Entry {
    const char* op;
    std::vector<std::shared_ptr<Node>> inputs;
    std::shared_ptr<Node> output;
    std::function<void()> backward;
  };

  static Tape*& current() {
    thread_local Tape* active = nullptr;
    return active;
  }

  void record(Entry entry) { entries_.push_back(std::move(entry)); }
  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  /// Propagates d(loss)/d(x) to every tensor on the tape that requires grad.
  /// Leaf gradients accumulate; call zero_grad on parameters between steps.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) {
      throw Error("backward: loss must be scalar, got shape " + to_string(loss.shape()));
    }
    std::size_t end = entries_.size();
    while (end > 0 && entries_[end - 1].output != loss.node()) --end;
    if (end == 0) {
      throw Error("backward: loss was not recorded on this tape (no input requires grad?)");
    }
    for (std::size_t i = 0; i < end; ++i) entries_[i].output->grad.clear();
    loss.node()->grad.assign(1, 1.0);
    for (std::size_t i = end; i-- > 0;) {
      auto& e = entries_[i];
      if (e.output->grad.empty()) continue;
      e.backward();
    }
  }

 private:
  std::vector<Entry> entries_;
};

/// Activates a tape on this thread for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(Tape::current()) { Tape::current() = &tape; }
  ~TapeScope() { Tape::current() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording (e.g. for evaluation inside a training step).
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape::current()) { Tape::current() = nullptr; }
  ~NoGradScope() { Tape::current() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

}  // namespace ad
}  // namespace prefnet
