// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "beamgraph/dense_array.hpp"
#include "beamgraph/params.hpp"

namespace beamgraph::tk {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
  public:
    Var() = default;

    const DenseArray& value() const;
    const DenseArray& grad() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
    Tape& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

  private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Reverse-mode recorder. Nodes are appended in evaluation order, so a single
/// reverse sweep visits every consumer before its producers.
class Tape {
  public:
    // Called once during the reverse sweep with the node's own id; reads
    // grad(self) and accumulates into the grads of its inputs.
    using Backward = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(DenseArray value);
    Var variable(DenseArray value);
    // Leaf bound to a stored parameter; its gradient is added into p.grad by backward().
    Var param(Param& p);

    Var record(DenseArray value, const std::vector<Var>& inputs, Backward backward);

    void backward(Var loss);
    // Seeds arbitrary upstream gradients (e.g. received from another party) and sweeps once.
    void backward(const std::vector<std::pair<Var, DenseArray>>& seeds);

    const DenseArray& value(std::size_t id) const { return nodes_[id].value; }
    DenseArray& grad(std::size_t id) { return nodes_[id].grad; }
    const DenseArray& grad(std::size_t id) const { return nodes_[id].grad; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

  private:
    struct Node {
        DenseArray value;
        DenseArray grad;
        Backward backward;
        Param* sink = nullptr;
        bool requires_grad = false;
    };

    void sweep();

    std::vector<Node> nodes_;
};

/// Binds named entries of a ParameterStore onto a tape once per graph.
/// With `frozen` set, parameters enter as constants so no gradient reaches them.
class Binder {
  public:
    Binder(Tape& tape, ParameterStore& store, bool frozen = false) : tape_(tape), store_(store), frozen_(frozen) {}

    Var operator()(const std::string& name);
    Tape& tape() { return tape_; }
    ParameterStore& store() { return store_; }
    bool frozen() const noexcept { return frozen_; }

  private:
    Tape& tape_;
    ParameterStore& store_;
    bool frozen_;
    std::map<std::string, Var, std::less<>> bound_;
};

// ---------------------------------------------------------------------------
// Differentiable primitives. Every primitive records on the tape of its first
// argument and checks shapes eagerly.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double c);
Var add_scalar(Var x, double c);

// y = W x + b for x of shape [n]; for x of shape [B x n] each row is mapped.
Var affine(Var x, Var weight, Var bias);
Var matmul(Var a, Var b);
Var transpose(Var a);
// Same values in row-major order under a new shape.
Var reshape(Var x, Shape shape);

Var relu(Var x);
// Logistic function with outputs clamped to [kProbFloor, 1 - kProbFloor].
Var sigmoid(Var x);
Var square(Var x);
Var sqrt(Var x);
Var abs(Var x);
Var pow_scalar(Var x, double exponent);

// Temperature softmax over a vector, or over each row of a matrix.
Var softmax_t(Var z, double tau);

// Forward value is `hard` exactly; the gradient flows to `soft` unchanged.
Var straight_through_mix(Var hard, Var soft);

Var concat(const std::vector<Var>& parts);
Var concat_cols(Var a, Var b);
Var gather(Var x, const std::vector<std::size_t>& index);
Var gather_rows(Var x, const std::vector<std::size_t>& rows);
Var scatter_rows(Var x, const std::vector<std::size_t>& rows, std::size_t total_rows);
// Mean of the rows assigned to each segment; empty segments yield zero rows.
Var segment_mean(Var x, const std::vector<std::size_t>& segment, std::size_t segments);

Var mean_rows(Var x);
Var sum(Var x);
Var row_sum(Var x);
Var column_mean(Var x);
// Unbiased per-column variance of a [B x C] batch.
Var column_var(Var x);
// Multiplies every element by the single value held in `s`.
Var mul_scalar(Var x, Var s);
// Multiplies row r of x by s[r].
Var mul_rows(Var x, Var s);

inline constexpr double kProbFloor = 1e-7;

// Binary cross-entropy (natural log) summed over bits; for a [B x W] batch the
// per-sample sums are averaged. Probabilities are clamped to the kProbFloor band.
Var bce(const DenseArray& target, Var prob);

// ---------------------------------------------------------------------------

enum class BnMode { train, eval };

struct BatchNormState {
    DenseArray gamma;
    DenseArray beta;
    DenseArray running_mean;
    DenseArray running_var;
    double momentum = 0.1;
    double epsilon = 1e-5;

    static BatchNormState identity(std::size_t channels, double momentum = 0.1, double epsilon = 1e-5);
    void validate() const;
};

// Standardises each column with batch statistics (train) or the running
// statistics (eval), then applies gamma/beta. Train mode updates the running
// statistics in place: stat <- (1 - m) stat + m batch_stat.
Var batch_norm(Var x, Var gamma, Var beta, DenseArray& running_mean, DenseArray& running_var, double momentum,
               double epsilon, BnMode mode);
Var batch_norm(Var x, BatchNormState& state, BnMode mode);

}  // namespace beamgraph::tk
