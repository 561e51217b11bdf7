#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "retclip/errors.hpp"

namespace retclip {

// All tensor storage is row-major double precision.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

// Logical shape: rank 0 (scalar), 1 (vector) or 2 (matrix). Scalars are
// stored 1x1, vectors 1xn; product(shape) always equals the storage size.
using Shape = std::vector<Index>;

std::string shape_to_string(const Shape& s);

namespace detail {

struct TensorData {
    Matrix value;
    Matrix grad;  // empty until a gradient is accumulated
    Shape shape;
    bool requires_grad = false;
    std::uint64_t id = 0;
};

}  // namespace detail

// Immutable value handle; copies share storage. Gradient accumulation is the
// only post-construction mutation (plus explicit in-place updates by the
// optimizer through mutable_value()).
class Tensor {
  public:
    Tensor() = default;

    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor vector(std::initializer_list<double> v, bool requires_grad = false);
    static Tensor vector(const std::vector<double>& v, bool requires_grad = false);
    static Tensor from_matrix(Matrix m, bool requires_grad = false);
    static Tensor from_row(Matrix m, bool requires_grad = false);  // 1xn storage, rank-1 shape
    static Tensor zeros(Index rows, Index cols, bool requires_grad = false);
    // Parameter: requires_grad = true.
    static Tensor param(Matrix m);

    bool defined() const { return d_ != nullptr; }
    const Shape& shape() const { return d_->shape; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    bool is_scalar() const { return d_->shape.empty(); }
    Index rows() const { return d_->value.rows(); }
    Index cols() const { return d_->value.cols(); }
    Index size() const { return d_->value.size(); }
    std::uint64_t id() const { return d_->id; }
    bool requires_grad() const { return d_->requires_grad; }

    const Matrix& value() const { return d_->value; }
    double item() const;  // scalar only

    // Optimizer / finite-difference access; bypasses immutability on purpose.
    Matrix& mutable_value() { return d_->value; }

    bool has_grad() const { return d_->grad.size() != 0; }
    // Zero matrix of the value's size when no gradient was ever accumulated.
    Matrix grad() const;
    // Direct view; only valid when has_grad().
    const Matrix& grad_ref() const { return d_->grad; }
    // Gradient state lives on the shared node, so these are const on the handle.
    void accumulate_grad(const Matrix& g) const;
    void clear_grad() const { d_->grad.resize(0, 0); }

    // Identity comparison (same storage).
    bool same_as(const Tensor& other) const { return d_ == other.d_; }

  private:
    friend class Tape;
    explicit Tensor(std::shared_ptr<detail::TensorData> d) : d_(std::move(d)) {}
    static Tensor make(Matrix value, Shape shape, bool requires_grad);

    std::shared_ptr<detail::TensorData> d_;

    friend Tensor make_result(Matrix value, Shape shape, const char* op,
                              std::initializer_list<Tensor> inputs,
                              std::function<void(const Tensor&)> pull);
};

// Define-by-run tape. Constructing a Tape makes it the active recording
// target for the current thread; destruction pops it. Records are appended
// in execution order, so reverse iteration is a valid topological order.
class Tape {
  public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current();

    std::size_t size() const { return records_.size(); }

    struct Record {
        const char* op;
        std::vector<std::uint64_t> input_ids;
        std::uint64_t output_id;
        std::vector<Tensor> keep_alive;
        std::function<void(const Tensor&)> pull;  // receives the record's output
        Tensor output;
    };

    const Record& record_at(std::size_t i) const { return records_[i]; }

    void record(const char* op, const std::vector<Tensor>& inputs, const Tensor& output,
                std::function<void(const Tensor&)> pull);

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    // requires_grad tensor reachable from loss. Each record is visited once.
    void backward(const Tensor& loss);

  private:
    std::vector<Record> records_;
};

// Convenience wrapper over Tape::current()->backward(loss).
void backward(const Tensor& loss);

// ---- ops ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// Same-shape add, or matrix + rank-1 bias broadcast over rows.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor scale(const Tensor& a, double c);
Tensor scale_by(const Tensor& a, const Tensor& s);  // s scalar tensor
Tensor exp_elem(const Tensor& a);
Tensor clamp_max(const Tensor& a, double cap);
Tensor gelu(const Tensor& a);  // exact erf formulation
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor l2_normalize_rows(const Tensor& a);  // zero rows stay zero
Tensor concat_last(const Tensor& a, const Tensor& b);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor row(const Tensor& a, Index i);                     // rank-1 result
Tensor col_block(const Tensor& a, Index start, Index n);  // column slice
Tensor diag(const Tensor& a);                             // square matrix -> rank-1
Tensor mean_all(const Tensor& a);                         // scalar
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);
// Mean over rows of -log softmax(logits)[i, target[i]].
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets);
// Mean binary cross entropy with logits over all entries; targets in {0,1}.
Tensor sigmoid_bce(const Tensor& logits, const Matrix& targets);

// Max over all parameter coordinates of
// |analytic - central difference| / max(1, |analytic|).
// f must evaluate to a scalar and be twice differentiable near the base
// point (kinks like |x| at 0 are outside the contract); eps must lie in
// [1e-7, 1e-3].
double finite_difference_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                               double eps);

}  // namespace retclip
