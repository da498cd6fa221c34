// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over an append-only tape.
//
// A Tape owns two kinds of node storage:
//   * persistent leaves, one per bound Param, which survive release_graph();
//   * operation records, appended in topological order and dropped wholesale
//     by release_graph().
// A Value is a cheap handle into one of those stores. Handles into a released
// segment are detected through an epoch counter and rejected.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "steplab/tensor.hpp"

namespace steplab::ad {

class ReleasedGraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A named trainable array plus its gradient accumulator.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros_like(value)) {}
};

/// Ordered collection of parameters. Element addresses are stable once built.
class ParamSet {
 public:
  Param& add(std::string name, Tensor value);

  Param& at(std::size_t i) { return params_.at(i); }
  const Param& at(std::size_t i) const { return params_.at(i); }
  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t numel() const noexcept;

  void zero_grad();
  double grad_norm() const;
  bool grads_finite() const;

  std::vector<Param>::iterator begin() { return params_.begin(); }
  std::vector<Param>::iterator end() { return params_.end(); }
  std::vector<Param>::const_iterator begin() const { return params_.begin(); }
  std::vector<Param>::const_iterator end() const { return params_.end(); }

  /// Flattens all values (or grads) in declaration order.
  std::vector<double> flat_values() const;
  std::vector<double> flat_grads() const;

  bool same_layout(const ParamSet& other) const;

 private:
  std::vector<Param> params_;
};

enum class Op : std::uint8_t {
  Leaf,
  Parameter,
  Add,
  Sub,
  Mul,
  Scale,
  MatVec,
  Concat,
  Tanh,
  Exp,
  Sum,
  Mean,
  Dot,
  Softmax,
  Log,
  L2Normalize,
  Row,
};

const char* op_name(Op op);

using NodeId = std::uint64_t;

struct GraphStats {
  std::size_t retained_nodes = 0;
  std::size_t retained_elements = 0;
  std::size_t backward_passes = 0;
  std::size_t peak_nodes = 0;
  std::size_t peak_elements = 0;
};

class Tape;

/// Handle to a node on a Tape.
class Value {
 public:
  Value() = default;

  const Tensor& data() const;
  const Tensor& grad() const;
  const Shape& shape() const { return data().shape(); }
  std::size_t size() const { return data().size(); }
  double item() const { return data().item(); }
  NodeId id() const;
  bool requires_grad() const;
  bool valid() const noexcept { return tape_ != nullptr; }
  Tape* tape() const noexcept { return tape_; }

 private:
  friend class Tape;
  Value(Tape* tape, std::int64_t ref, std::uint64_t epoch) : tape_(tape), ref_(ref), epoch_(epoch) {}

  Tape* tape_ = nullptr;
  // >= 0: index into records; < 0: -(index + 1) into persistent leaves.
  std::int64_t ref_ = 0;
  std::uint64_t epoch_ = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves.
  Value parameter(Param& p, bool requires_grad = true);
  Value variable(Tensor data);
  Value constant(Tensor data);

  // Elementwise arithmetic; a size-1 operand broadcasts against the other.
  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);
  Value scale(Value a, double c);
  Value neg(Value a) { return scale(a, -1.0); }

  Value matvec(Value w, Value x);
  Value concat(std::span<const Value> parts);
  Value tanh(Value a);
  Value exp(Value a);
  Value log(Value a);
  Value sum(Value a);
  Value mean(Value a);
  Value dot(Value a, Value b);
  Value softmax(Value a);
  Value l2_normalize(Value a);
  /// Row `index` of a rank-2 table.
  Value row(Value table, std::size_t index);

  /// Same data, no parent edge, requires_grad = false.
  Value stop_gradient(Value x);

  /// Gradient of a scalar root with respect to every requires_grad leaf.
  void backward(Value root);
  /// Vector-Jacobian product: accumulates cotangent^T * d(out)/d(leaf).
  void vjp(Value out, const Tensor& cotangent);
  /// Zeroes grads of all leaves, persistent and recorded.
  void zero_grad();

  /// Dense Jacobian d(out)/d(leaves) as [out.size, sum(leaf sizes)] via
  /// repeated vjp on basis cotangents. Leaf grads are zeroed on exit.
  Tensor jacobian(Value out, std::span<const Value> leaves);

  /// Drops all operation records; persistent leaves survive. Returns the
  /// stats captured before the release.
  GraphStats release_graph();

  GraphStats stats() const;
  void reset_peak();
  std::size_t live_node_count() const noexcept { return persistent_.size() + records_.size(); }
  std::size_t persistent_count() const noexcept { return persistent_.size(); }
  std::size_t record_count() const noexcept { return records_.size(); }
  /// Records of a given op kind currently on the tape.
  std::size_t count_ops(Op op) const;

  // Stop-gradient capture/replay, used by finite-difference checks so that
  // detached values are held at their unperturbed data.
  void begin_sg_capture();
  void begin_sg_replay();
  void end_sg_mode();

 private:
  friend class Value;

  struct Node {
    Op op = Op::Leaf;
    std::vector<std::int64_t> parents;
    Tensor data;
    Tensor grad;
    Param* param = nullptr;
    double scalar = 0.0;
    std::size_t aux = 0;
    NodeId id = 0;
    bool requires_grad = false;
  };

  enum class SgMode { Off, Capture, Replay };

  Node& node(const Value& v);
  const Node& node(const Value& v) const;
  Node& node_at(std::int64_t ref);
  void check(const Value& v) const;
  Value push(Node n);
  void propagate(std::int64_t start, std::vector<Tensor>& grads);
  void touch_peak();

  std::vector<Node> persistent_;
  std::vector<Node> records_;
  std::unordered_map<const Param*, std::size_t> bound_;
  std::uint64_t epoch_ = 1;
  NodeId next_id_ = 1;
  std::size_t persistent_elements_ = 0;
  std::size_t record_elements_ = 0;
  std::size_t backward_passes_ = 0;
  std::size_t peak_nodes_ = 0;
  std::size_t peak_elements_ = 0;

  SgMode sg_mode_ = SgMode::Off;
  std::vector<Tensor> sg_cache_;
  std::size_t sg_cursor_ = 0;
};

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::vector<double> per_param;
};

/// Compares tape gradients of a scalar function against central differences.
/// `f` builds the function on the tape it is given; it may bind params with
/// Tape::parameter, which is idempotent per tape. Per parameter array the
/// error is ||analytic - fd|| / max(||analytic||, ||fd||, 1e-12).
FiniteDiffReport finite_diff_check(const std::function<Value(Tape&)>& f, std::span<Param* const> params,
                                   double epsilon = 1e-5);

}  // namespace steplab::ad
