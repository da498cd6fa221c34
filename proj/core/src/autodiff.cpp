// SPDX-License-Identifier: Apache-2.0
#include "steplab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace steplab::ad {

// ---------------------------------------------------------------------------
// ParamSet

Param& ParamSet::add(std::string name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  params_.emplace_back(std::move(name), std::move(value));
  return params_.back();
}

Param& ParamSet::get(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("no parameter named " + name);
}

const Param& ParamSet::get(const std::string& name) const {
  return const_cast<ParamSet*>(this)->get(name);
}

bool ParamSet::contains(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const Param& p) { return p.name == name; });
}

std::size_t ParamSet::numel() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& p : params_) p.grad.fill(0.0);
}

double ParamSet::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_) {
    for (double g : p.grad.values()) s += g * g;
  }
  return std::sqrt(s);
}

bool ParamSet::grads_finite() const {
  return std::all_of(params_.begin(), params_.end(), [](const Param& p) { return p.grad.all_finite(); });
}

std::vector<double> ParamSet::flat_values() const {
  std::vector<double> out;
  out.reserve(numel());
  for (const auto& p : params_) out.insert(out.end(), p.value.raw().begin(), p.value.raw().end());
  return out;
}

std::vector<double> ParamSet::flat_grads() const {
  std::vector<double> out;
  out.reserve(numel());
  for (const auto& p : params_) out.insert(out.end(), p.grad.raw().begin(), p.grad.raw().end());
  return out;
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name != other.params_[i].name || params_[i].value.shape() != other.params_[i].value.shape()) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Value

const Tensor& Value::data() const {
  const auto& n = tape_->node(*this);
  return n.param ? n.param->value : n.data;
}

const Tensor& Value::grad() const {
  const auto& n = tape_->node(*this);
  return n.param ? n.param->grad : n.grad;
}

NodeId Value::id() const { return tape_->node(*this).id; }

bool Value::requires_grad() const { return tape_->node(*this).requires_grad; }

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Parameter: return "parameter";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::MatVec: return "matvec";
    case Op::Concat: return "concat";
    case Op::Tanh: return "tanh";
    case Op::Exp: return "exp";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Dot: return "dot";
    case Op::Softmax: return "softmax";
    case Op::Log: return "log";
    case Op::L2Normalize: return "l2_normalize";
    case Op::Row: return "row";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Tape internals

void Tape::check(const Value& v) const {
  if (v.tape_ != this) throw std::invalid_argument("value belongs to a different tape");
  if (v.ref_ >= 0 && v.epoch_ != epoch_) {
    throw ReleasedGraphError("value refers to a released graph segment");
  }
}

Tape::Node& Tape::node(const Value& v) {
  check(v);
  return node_at(v.ref_);
}

const Tape::Node& Tape::node(const Value& v) const {
  return const_cast<Tape*>(this)->node(v);
}

Tape::Node& Tape::node_at(std::int64_t ref) {
  return ref >= 0 ? records_[static_cast<std::size_t>(ref)] : persistent_[static_cast<std::size_t>(-ref - 1)];
}

void Tape::touch_peak() {
  peak_nodes_ = std::max(peak_nodes_, live_node_count());
  peak_elements_ = std::max(peak_elements_, persistent_elements_ + record_elements_);
}

Value Tape::push(Node n) {
  n.id = next_id_++;
  record_elements_ += n.data.size();
  records_.push_back(std::move(n));
  touch_peak();
  return Value(this, static_cast<std::int64_t>(records_.size() - 1), epoch_);
}

Value Tape::parameter(Param& p, bool requires_grad) {
  if (auto it = bound_.find(&p); it != bound_.end()) {
    return Value(this, -static_cast<std::int64_t>(it->second) - 1, epoch_);
  }
  if (p.grad.shape() != p.value.shape()) p.grad = Tensor::zeros_like(p.value);
  Node n;
  n.op = Op::Parameter;
  n.param = &p;
  n.requires_grad = requires_grad;
  n.id = next_id_++;
  persistent_elements_ += p.value.size();
  persistent_.push_back(std::move(n));
  bound_.emplace(&p, persistent_.size() - 1);
  touch_peak();
  return Value(this, -static_cast<std::int64_t>(persistent_.size()), epoch_);
}

Value Tape::variable(Tensor data) {
  Node n;
  n.op = Op::Leaf;
  n.grad = Tensor::zeros_like(data);
  n.data = std::move(data);
  n.requires_grad = true;
  return push(std::move(n));
}

Value Tape::constant(Tensor data) {
  Node n;
  n.op = Op::Leaf;
  n.data = std::move(data);
  return push(std::move(n));
}

namespace {

enum class Bcast { Same, LeftScalar, RightScalar };

Bcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::Same;
  if (a.size() == 1) return Bcast::LeftScalar;
  if (b.size() == 1) return Bcast::RightScalar;
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                   shape_string(b.shape()));
}

template <class F>
Tensor elementwise(const Tensor& a, const Tensor& b, Bcast k, F f) {
  const Tensor& like = (k == Bcast::LeftScalar) ? b : a;
  Tensor out(like.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = (k == Bcast::LeftScalar) ? a[0] : a[i];
    const double y = (k == Bcast::RightScalar) ? b[0] : b[i];
    out[i] = f(x, y);
  }
  return out;
}

void accumulate(Tensor& into, const Tensor& g) {
  if (into.size() == 0) {
    into = g;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) into[i] += g[i];
}

// Adds g into a gradient slot of the given shape, reducing when that slot was
// broadcast from a scalar.
void accumulate_reduced(Tensor& into, const Shape& target, const Tensor& g) {
  if (shape_numel(target) == g.size()) {
    if (into.size() == 0) {
      into = Tensor(target, std::vector<double>(g.raw()));
    } else {
      accumulate(into, g);
    }
    return;
  }
  double s = 0.0;
  for (double v : g.values()) s += v;
  if (into.size() == 0) into = Tensor(target);
  into[0] += s;
}

}  // namespace

Value Tape::add(Value a, Value b) {
  const auto& da = a.data();
  const auto& db = b.data();
  const auto k = broadcast_kind(da, db, "add");
  Node n;
  n.op = Op::Add;
  n.data = elementwise(da, db, k, [](double x, double y) { return x + y; });
  n.parents = {a.ref_, b.ref_};
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return push(std::move(n));
}

Value Tape::sub(Value a, Value b) {
  const auto& da = a.data();
  const auto& db = b.data();
  const auto k = broadcast_kind(da, db, "sub");
  Node n;
  n.op = Op::Sub;
  n.data = elementwise(da, db, k, [](double x, double y) { return x - y; });
  n.parents = {a.ref_, b.ref_};
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return push(std::move(n));
}

Value Tape::mul(Value a, Value b) {
  const auto& da = a.data();
  const auto& db = b.data();
  const auto k = broadcast_kind(da, db, "mul");
  Node n;
  n.op = Op::Mul;
  n.data = elementwise(da, db, k, [](double x, double y) { return x * y; });
  n.parents = {a.ref_, b.ref_};
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return push(std::move(n));
}

Value Tape::scale(Value a, double c) {
  const auto& da = a.data();
  Node n;
  n.op = Op::Scale;
  n.data = Tensor(da.shape());
  for (std::size_t i = 0; i < da.size(); ++i) n.data[i] = c * da[i];
  n.scalar = c;
  n.parents = {a.ref_};
  n.requires_grad = node(a).requires_grad;
  return push(std::move(n));
}

Value Tape::matvec(Value w, Value x) {
  const auto& dw = w.data();
  const auto& dx = x.data();
  if (dw.rank() != 2 || dx.size() != dw.shape()[1]) {
    throw ShapeError("matvec: cannot multiply " + shape_string(dw.shape()) + " by " + shape_string(dx.shape()));
  }
  const std::size_t m = dw.shape()[0];
  const std::size_t k = dw.shape()[1];
  Node n;
  n.op = Op::MatVec;
  n.data = Tensor({m});
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    const double* row = dw.raw().data() + i * k;
    for (std::size_t j = 0; j < k; ++j) s += row[j] * dx[j];
    n.data[i] = s;
  }
  n.parents = {w.ref_, x.ref_};
  n.requires_grad = node(w).requires_grad || node(x).requires_grad;
  return push(std::move(n));
}

Value Tape::concat(std::span<const Value> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  std::size_t total = 0;
  for (const auto& p : parts) total += p.data().size();
  Node n;
  n.op = Op::Concat;
  n.data = Tensor({total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& d = p.data();
    std::copy(d.raw().begin(), d.raw().end(), n.data.values().begin() + static_cast<std::ptrdiff_t>(off));
    off += d.size();
    n.parents.push_back(p.ref_);
    n.requires_grad = n.requires_grad || node(p).requires_grad;
  }
  return push(std::move(n));
}

Value Tape::tanh(Value a) {
  const auto& da = a.data();
  Node n;
  n.op = Op::Tanh;
  n.data = Tensor(da.shape());
  for (std::size_t i = 0; i < da.size(); ++i) n.data[i] = std::tanh(da[i]);
  n.parents = {a.ref_};
  n.requires_grad = node(a).requires_grad;
  return push(std::move(n));
}

Value Tape::exp(Value a) {
  const auto& da = a.data();
  Node n;
  n.op = Op::Exp;
  n.data = Tensor(da.shape());
  for (std::size_t i = 0; i < da.size(); ++i) n.data[i] = std::exp(da[i]);
  n.parents = {a.ref_};
  n.requires_grad = node(a).requires_grad;
  return push(std::move(n));
}

Value Tape::log(Value a) {
  const auto& da = a.data();
  Node n;
  n.op = Op::Log;
  n.data = Tensor(da.shape());
  for (std::size_t i = 0; i < da.size(); ++i) n.data[i] = std::log(da[i]);
  n.parents = {a.ref_};
  n.requires_grad = node(a).requires_grad;
  return push(std::move(n));
}

Value Tape::sum(Value a) {
  double s = 0.0;
  for (double v : a.data().values()) s += v;
  Node n;
  n.op = Op::Sum;
  n.data = Tensor::scalar(s);
  n.parents = {a.ref_};
  n.requires_grad = node(a).requires_grad;
  return push(std::move(n));
}

Value Tape::mean(Value a) {
  const auto& da = a.data();
  double s = 0.0;
  for (double v : da.values()) s += v;
  Node n;
  n.op = Op::Mean;
  n.data = Tensor::scalar(s / static_cast<double>(da.size()));
  n.parents = {a.ref_};
  n.requires_grad = node(a).requires_grad;
  return push(std::move(n));
}

Value Tape::dot(Value a, Value b) {
  const auto& da = a.data();
  const auto& db = b.data();
  if (da.size() != db.size()) {
    throw ShapeError("dot: shape mismatch " + shape_string(da.shape()) + " vs " + shape_string(db.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < da.size(); ++i) s += da[i] * db[i];
  Node n;
  n.op = Op::Dot;
  n.data = Tensor::scalar(s);
  n.parents = {a.ref_, b.ref_};
  n.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return push(std::move(n));
}

Value Tape::softmax(Value a) {
  const auto& da = a.data();
  const double mx = *std::max_element(da.raw().begin(), da.raw().end());
  Node n;
  n.op = Op::Softmax;
  n.data = Tensor(da.shape());
  double z = 0.0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    n.data[i] = std::exp(da[i] - mx);
    z += n.data[i];
  }
  for (std::size_t i = 0; i < da.size(); ++i) n.data[i] /= z;
  n.parents = {a.ref_};
  n.requires_grad = node(a).requires_grad;
  return push(std::move(n));
}

Value Tape::l2_normalize(Value a) {
  const auto& da = a.data();
  const double nrm = da.norm();
  if (nrm == 0.0) throw std::domain_error("l2_normalize: zero-norm input");
  Node n;
  n.op = Op::L2Normalize;
  n.data = Tensor(da.shape());
  for (std::size_t i = 0; i < da.size(); ++i) n.data[i] = da[i] / nrm;
  n.scalar = nrm;
  n.parents = {a.ref_};
  n.requires_grad = node(a).requires_grad;
  return push(std::move(n));
}

Value Tape::row(Value table, std::size_t index) {
  const auto& dt = table.data();
  if (dt.rank() != 2) throw ShapeError("row: table must be rank 2, got " + shape_string(dt.shape()));
  if (index >= dt.shape()[0]) {
    throw std::out_of_range("row: index " + std::to_string(index) + " out of " + std::to_string(dt.shape()[0]));
  }
  const std::size_t width = dt.shape()[1];
  Node n;
  n.op = Op::Row;
  n.data = Tensor({width});
  std::copy_n(dt.raw().begin() + static_cast<std::ptrdiff_t>(index * width), width, n.data.values().begin());
  n.aux = index;
  n.parents = {table.ref_};
  n.requires_grad = node(table).requires_grad;
  return push(std::move(n));
}

Value Tape::stop_gradient(Value x) {
  Tensor data = x.data();
  switch (sg_mode_) {
    case SgMode::Capture:
      sg_cache_.push_back(data);
      break;
    case SgMode::Replay:
      if (sg_cursor_ >= sg_cache_.size() || sg_cache_[sg_cursor_].shape() != data.shape()) {
        throw std::logic_error("stop_gradient replay diverged from the captured pass");
      }
      data = sg_cache_[sg_cursor_++];
      break;
    case SgMode::Off:
      break;
  }
  return constant(std::move(data));
}

void Tape::begin_sg_capture() {
  sg_mode_ = SgMode::Capture;
  sg_cache_.clear();
  sg_cursor_ = 0;
}

void Tape::begin_sg_replay() {
  sg_mode_ = SgMode::Replay;
  sg_cursor_ = 0;
}

void Tape::end_sg_mode() {
  sg_mode_ = SgMode::Off;
  sg_cache_.clear();
  sg_cursor_ = 0;
}

// ---------------------------------------------------------------------------
// Backward

void Tape::propagate(std::int64_t start, std::vector<Tensor>& grads) {
  // grads is indexed by record; persistent leaves accumulate in place.
  auto add_to = [&](std::int64_t ref, const Tensor& g) {
    Node& p = node_at(ref);
    if (!p.requires_grad) return;
    if (ref < 0) {
      accumulate(p.param->grad, g);
    } else {
      accumulate_reduced(grads[static_cast<std::size_t>(ref)], p.data.shape(), g);
    }
  };
  auto add_reduced = [&](std::int64_t ref, const Tensor& g) {
    Node& p = node_at(ref);
    if (!p.requires_grad) return;
    const Tensor& pd = ref < 0 ? p.param->value : p.data;
    if (ref < 0) {
      accumulate_reduced(p.param->grad, pd.shape(), g);
    } else {
      accumulate_reduced(grads[static_cast<std::size_t>(ref)], pd.shape(), g);
    }
  };
  auto data_of = [&](std::int64_t ref) -> const Tensor& {
    const Node& p = node_at(ref);
    return p.param ? p.param->value : p.data;
  };

  for (std::int64_t i = start; i >= 0; --i) {
    Node& n = records_[static_cast<std::size_t>(i)];
    Tensor& g = grads[static_cast<std::size_t>(i)];
    if (g.size() == 0 || !n.requires_grad) continue;

    switch (n.op) {
      case Op::Leaf:
        accumulate(n.grad, g);
        break;
      case Op::Parameter:
        break;
      case Op::Add:
        add_reduced(n.parents[0], g);
        add_reduced(n.parents[1], g);
        break;
      case Op::Sub: {
        add_reduced(n.parents[0], g);
        Tensor ng(g.shape());
        for (std::size_t k = 0; k < g.size(); ++k) ng[k] = -g[k];
        add_reduced(n.parents[1], ng);
        break;
      }
      case Op::Mul: {
        const Tensor& a = data_of(n.parents[0]);
        const Tensor& b = data_of(n.parents[1]);
        Tensor ga(g.shape());
        Tensor gb(g.shape());
        for (std::size_t k = 0; k < g.size(); ++k) {
          const double av = a.size() == 1 ? a[0] : a[k];
          const double bv = b.size() == 1 ? b[0] : b[k];
          ga[k] = g[k] * bv;
          gb[k] = g[k] * av;
        }
        add_reduced(n.parents[0], ga);
        add_reduced(n.parents[1], gb);
        break;
      }
      case Op::Scale: {
        Tensor ga(g.shape());
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] = n.scalar * g[k];
        add_to(n.parents[0], ga);
        break;
      }
      case Op::MatVec: {
        const Tensor& w = data_of(n.parents[0]);
        const Tensor& x = data_of(n.parents[1]);
        const std::size_t m = w.shape()[0];
        const std::size_t kk = w.shape()[1];
        if (node_at(n.parents[0]).requires_grad) {
          Tensor gw(w.shape());
          for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < kk; ++c) gw[r * kk + c] = g[r] * x[c];
          }
          add_to(n.parents[0], gw);
        }
        if (node_at(n.parents[1]).requires_grad) {
          Tensor gx(x.shape());
          for (std::size_t r = 0; r < m; ++r) {
            const double gr = g[r];
            const double* wr = w.raw().data() + r * kk;
            for (std::size_t c = 0; c < kk; ++c) gx[c] += wr[c] * gr;
          }
          add_to(n.parents[1], gx);
        }
        break;
      }
      case Op::Concat: {
        std::size_t off = 0;
        for (auto ref : n.parents) {
          const Tensor& pd = data_of(ref);
          Tensor part(pd.shape());
          for (std::size_t k = 0; k < pd.size(); ++k) part[k] = g[off + k];
          off += pd.size();
          add_to(ref, part);
        }
        break;
      }
      case Op::Tanh: {
        Tensor ga(g.shape());
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] = g[k] * (1.0 - n.data[k] * n.data[k]);
        add_to(n.parents[0], ga);
        break;
      }
      case Op::Exp: {
        Tensor ga(g.shape());
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] = g[k] * n.data[k];
        add_to(n.parents[0], ga);
        break;
      }
      case Op::Log: {
        const Tensor& a = data_of(n.parents[0]);
        Tensor ga(g.shape());
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] = g[k] / a[k];
        add_to(n.parents[0], ga);
        break;
      }
      case Op::Sum:
      case Op::Mean: {
        const Tensor& a = data_of(n.parents[0]);
        const double s = n.op == Op::Sum ? g[0] : g[0] / static_cast<double>(a.size());
        add_to(n.parents[0], Tensor(a.shape(), s));
        break;
      }
      case Op::Dot: {
        const Tensor& a = data_of(n.parents[0]);
        const Tensor& b = data_of(n.parents[1]);
        Tensor ga(a.shape());
        Tensor gb(b.shape());
        for (std::size_t k = 0; k < a.size(); ++k) {
          ga[k] = g[0] * b[k];
          gb[k] = g[0] * a[k];
        }
        add_to(n.parents[0], ga);
        add_to(n.parents[1], gb);
        break;
      }
      case Op::Softmax: {
        double gy = 0.0;
        for (std::size_t k = 0; k < g.size(); ++k) gy += g[k] * n.data[k];
        Tensor ga(g.shape());
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] = n.data[k] * (g[k] - gy);
        add_to(n.parents[0], ga);
        break;
      }
      case Op::L2Normalize: {
        double gy = 0.0;
        for (std::size_t k = 0; k < g.size(); ++k) gy += g[k] * n.data[k];
        Tensor ga(g.shape());
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] = (g[k] - n.data[k] * gy) / n.scalar;
        add_to(n.parents[0], ga);
        break;
      }
      case Op::Row: {
        const Tensor& table = data_of(n.parents[0]);
        Tensor gt(table.shape());
        const std::size_t width = table.shape()[1];
        for (std::size_t k = 0; k < width; ++k) gt[n.aux * width + k] = g[k];
        add_to(n.parents[0], gt);
        break;
      }
    }
    // Intermediate gradients are not retained; leaves keep theirs in n.grad.
    if (n.op != Op::Leaf) g = Tensor();
  }
}

void Tape::vjp(Value out, const Tensor& cotangent) {
  Node& root = node(out);
  if (cotangent.size() != root.data.size() && !(root.param && cotangent.size() == root.param->value.size())) {
    throw ShapeError("vjp: cotangent shape " + shape_string(cotangent.shape()) + " does not match output");
  }
  ++backward_passes_;
  if (!root.requires_grad) return;
  if (out.ref_ < 0) {
    accumulate(root.param->grad, cotangent);
    return;
  }
  std::vector<Tensor> grads(records_.size());
  grads[static_cast<std::size_t>(out.ref_)] = Tensor(root.data.shape(), std::vector<double>(cotangent.raw()));
  propagate(out.ref_, grads);
}

void Tape::backward(Value root) {
  const auto& d = node(root);
  const Tensor& data = d.param ? d.param->value : d.data;
  if (data.size() != 1) throw ShapeError("backward: root must be scalar, got " + shape_string(data.shape()));
  vjp(root, Tensor::scalar(1.0));
}

void Tape::zero_grad() {
  for (auto& n : persistent_) n.param->grad.fill(0.0);
  for (auto& n : records_) {
    if (n.op == Op::Leaf && n.requires_grad) n.grad.fill(0.0);
  }
}

Tensor Tape::jacobian(Value out, std::span<const Value> leaves) {
  const std::size_t m = out.size();
  std::size_t cols = 0;
  for (const auto& l : leaves) cols += l.size();
  Tensor jac({m, cols});
  zero_grad();
  for (std::size_t r = 0; r < m; ++r) {
    Tensor e({m});
    e[r] = 1.0;
    vjp(out, e);
    std::size_t off = 0;
    for (const auto& l : leaves) {
      const Tensor& g = l.grad();
      for (std::size_t k = 0; k < l.size(); ++k) jac[r * cols + off + k] = g.size() ? g[k] : 0.0;
      off += l.size();
    }
    zero_grad();
  }
  return jac;
}

std::size_t Tape::count_ops(Op op) const {
  return static_cast<std::size_t>(
      std::count_if(records_.begin(), records_.end(), [op](const Node& n) { return n.op == op; }));
}

GraphStats Tape::stats() const {
  GraphStats s;
  s.retained_nodes = live_node_count();
  s.retained_elements = persistent_elements_ + record_elements_;
  s.backward_passes = backward_passes_;
  s.peak_nodes = peak_nodes_;
  s.peak_elements = peak_elements_;
  return s;
}

void Tape::reset_peak() {
  peak_nodes_ = live_node_count();
  peak_elements_ = persistent_elements_ + record_elements_;
}

GraphStats Tape::release_graph() {
  GraphStats before = stats();
  records_.clear();
  record_elements_ = 0;
  ++epoch_;
  return before;
}

// ---------------------------------------------------------------------------
// Finite differences

FiniteDiffReport finite_diff_check(const std::function<Value(Tape&)>& f, std::span<Param* const> params,
                                   double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("finite_diff_check: epsilon must be positive");
  Tape tape;
  for (Param* p : params) p->grad.fill(0.0);

  tape.begin_sg_capture();
  Value root = f(tape);
  if (!std::isfinite(root.item())) throw std::domain_error("finite_diff_check: non-finite function value");
  tape.backward(root);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Param* p : params) analytic.push_back(p->grad);
  tape.release_graph();

  auto eval = [&]() {
    tape.begin_sg_replay();
    const double v = f(tape).item();
    tape.release_graph();
    if (!std::isfinite(v)) throw std::domain_error("finite_diff_check: non-finite function value");
    return v;
  };

  FiniteDiffReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Param& p = *params[pi];
    double diff2 = 0.0;
    double an2 = 0.0;
    double fd2 = 0.0;
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double orig = p.value[k];
      p.value[k] = orig + epsilon;
      const double up = eval();
      p.value[k] = orig - epsilon;
      const double down = eval();
      p.value[k] = orig;
      const double cd = (up - down) / (2.0 * epsilon);
      const double a = analytic[pi][k];
      diff2 += (a - cd) * (a - cd);
      an2 += a * a;
      fd2 += cd * cd;
    }
    const double denom = std::max({std::sqrt(an2), std::sqrt(fd2), 1e-12});
    const double err = std::sqrt(diff2) / denom;
    report.per_param.push_back(err);
    report.max_rel_error = std::max(report.max_rel_error, err);
  }
  tape.end_sg_mode();
  for (Param* p : params) p->grad.fill(0.0);
  return report;
}

}  // namespace steplab::ad
