#include "retclip/tensor.hpp"

#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>
#include <utility>

namespace retclip {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

thread_local std::vector<Tape*> g_tape_stack;

// Pushes a null recording target; used to evaluate without recording while
// an outer tape is active (finite differences, model selection passes).
struct TapeSuspend {
    TapeSuspend() { g_tape_stack.push_back(nullptr); }
    ~TapeSuspend() { g_tape_stack.pop_back(); }
};

Shape matrix_shape(const Matrix& m) { return Shape{m.rows(), m.cols()}; }

void check_no_nan(const Tensor& a, const char* op) {
    if (a.value().hasNaN()) {
        throw NumericError(std::string(op) + ": NaN input");
    }
}

double gelu_scalar(double x) {
    return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

double gelu_grad_scalar(double x) {
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    return cdf + x * pdf;
}

Matrix softmax_rows_value(const Matrix& x) {
    Eigen::VectorXd mx = x.rowwise().maxCoeff();
    Matrix shifted = x;
    shifted.colwise() -= mx;
    Matrix e = shifted.array().exp().matrix();
    Eigen::VectorXd sums = e.rowwise().sum();
    return (e.array().colwise() / sums.array()).matrix();
}

Matrix log_softmax_rows_value(const Matrix& x) {
    Eigen::VectorXd mx = x.rowwise().maxCoeff();
    Matrix shifted = x;
    shifted.colwise() -= mx;
    Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log().matrix();
    Matrix out = shifted;
    out.colwise() -= lse;
    return out;
}

}  // namespace

std::string shape_to_string(const Shape& s) {
    if (s.empty()) return "[scalar]";
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::make(Matrix value, Shape shape, bool requires_grad) {
    auto d = std::make_shared<detail::TensorData>();
    d->value = std::move(value);
    d->shape = std::move(shape);
    d->requires_grad = requires_grad;
    d->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    return Tensor(std::move(d));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return make(std::move(m), Shape{}, requires_grad);
}

Tensor Tensor::vector(std::initializer_list<double> v, bool requires_grad) {
    return vector(std::vector<double>(v), requires_grad);
}

Tensor Tensor::vector(const std::vector<double>& v, bool requires_grad) {
    Matrix m(1, static_cast<Index>(v.size()));
    for (Index i = 0; i < m.cols(); ++i) m(0, i) = v[static_cast<std::size_t>(i)];
    return make(std::move(m), Shape{static_cast<Index>(v.size())}, requires_grad);
}

Tensor Tensor::from_matrix(Matrix m, bool requires_grad) {
    Shape s = matrix_shape(m);
    return make(std::move(m), std::move(s), requires_grad);
}

Tensor Tensor::from_row(Matrix m, bool requires_grad) {
    if (m.rows() != 1) {
        throw ShapeError("from_row: expected a single row, got " +
                         shape_to_string(matrix_shape(m)));
    }
    Shape s{m.cols()};
    return make(std::move(m), std::move(s), requires_grad);
}

Tensor Tensor::zeros(Index rows, Index cols, bool requires_grad) {
    return make(Matrix::Zero(rows, cols), Shape{rows, cols}, requires_grad);
}

Tensor Tensor::param(Matrix m) { return from_matrix(std::move(m), true); }

double Tensor::item() const {
    if (size() != 1) {
        throw ContractError("item(): tensor is not scalar, shape " + shape_to_string(shape()));
    }
    return d_->value(0, 0);
}

Matrix Tensor::grad() const {
    if (has_grad()) return d_->grad;
    return Matrix::Zero(rows(), cols());
}

void Tensor::accumulate_grad(const Matrix& g) const {
    if (!d_->requires_grad) {
        throw ContractError("accumulate_grad on a tensor with requires_grad=false");
    }
    if (g.rows() != rows() || g.cols() != cols()) {
        throw ShapeError("gradient shape " + shape_to_string(matrix_shape(g)) +
                         " does not match value shape " + shape_to_string(shape()));
    }
    if (!has_grad()) {
        d_->grad = Matrix::Zero(rows(), cols());
    }
    d_->grad += g;
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() { g_tape_stack.pop_back(); }

Tape* Tape::current() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

void Tape::record(const char* op, const std::vector<Tensor>& inputs, const Tensor& output,
                  std::function<void(const Tensor&)> pull) {
    Record r;
    r.op = op;
    for (const Tensor& in : inputs) {
        r.input_ids.push_back(in.id());
        r.keep_alive.push_back(in);
    }
    r.output_id = output.id();
    r.output = output;
    r.pull = std::move(pull);
    records_.push_back(std::move(r));
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || !loss.is_scalar()) {
        throw ContractError("backward: loss must be a scalar tensor");
    }
    bool on_tape = false;
    for (const Record& r : records_) {
        if (r.output_id == loss.id()) {
            on_tape = true;
            break;
        }
    }
    if (!on_tape) {
        throw ContractError("backward: loss is not an output recorded on this tape");
    }
    Matrix seed(1, 1);
    seed(0, 0) = 1.0;
    loss.accumulate_grad(seed);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
        if (!it->output.has_grad()) continue;  // loss does not depend on this record
        it->pull(it->output);
    }
}

void backward(const Tensor& loss) {
    Tape* t = Tape::current();
    if (t == nullptr) {
        throw ContractError("backward: no active tape");
    }
    t->backward(loss);
}

// ---- op plumbing -------------------------------------------------------

Tensor make_result(Matrix value, Shape shape, const char* op,
                   std::initializer_list<Tensor> inputs,
                   std::function<void(const Tensor&)> pull) {
    Tape* tape = Tape::current();
    bool need = false;
    if (tape != nullptr) {
        for (const Tensor& in : inputs) need = need || in.requires_grad();
    }
    Tensor out = Tensor::make(std::move(value), std::move(shape), need);
    if (need) {
        tape->record(op, std::vector<Tensor>(inputs), out, std::move(pull));
    }
    return out;
}

// ---- ops ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() == 0 || b.rank() != 2) {
        throw ShapeError("matmul: unsupported ranks " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
    }
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions disagree: " + shape_to_string(a.shape()) +
                         " x " + shape_to_string(b.shape()));
    }
    Matrix out = a.value() * b.value();
    Shape shape = a.rank() == 1 ? Shape{b.cols()} : Shape{a.rows(), b.cols()};
    return make_result(std::move(out), std::move(shape), "matmul", {a, b},
                       [a, b](const Tensor& o) {
                           const Matrix& g = o.grad_ref();
                           if (a.requires_grad()) a.accumulate_grad(g * b.value().transpose());
                           if (b.requires_grad()) b.accumulate_grad(a.value().transpose() * g);
                       });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) {
        throw ShapeError("transpose: expected rank-2, got " + shape_to_string(a.shape()));
    }
    Matrix out = a.value().transpose();
    return make_result(std::move(out), Shape{a.cols(), a.rows()}, "transpose", {a},
                       [a](const Tensor& o) {
                           if (a.requires_grad()) a.accumulate_grad(o.grad_ref().transpose());
                       });
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) {
        Matrix out = a.value() + b.value();
        return make_result(std::move(out), a.shape(), "add", {a, b}, [a, b](const Tensor& o) {
            if (a.requires_grad()) a.accumulate_grad(o.grad_ref());
            if (b.requires_grad()) b.accumulate_grad(o.grad_ref());
        });
    }
    // bias broadcast: [m x n] + [n]
    if (a.rank() == 2 && b.rank() == 1 && a.cols() == b.cols()) {
        Matrix out = a.value();
        out.rowwise() += b.value().row(0);
        return make_result(std::move(out), a.shape(), "add_bias", {a, b},
                           [a, b](const Tensor& o) {
                               const Matrix& g = o.grad_ref();
                               if (a.requires_grad()) a.accumulate_grad(g);
                               if (b.requires_grad()) b.accumulate_grad(g.colwise().sum());
                           });
    }
    throw ShapeError("add: incompatible shapes " + shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: shapes differ: " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
    }
    Matrix out = a.value().cwiseProduct(b.value());
    return make_result(std::move(out), a.shape(), "mul", {a, b}, [a, b](const Tensor& o) {
        const Matrix& g = o.grad_ref();
        if (a.requires_grad()) a.accumulate_grad(g.cwiseProduct(b.value()));
        if (b.requires_grad()) b.accumulate_grad(g.cwiseProduct(a.value()));
    });
}

Tensor scale(const Tensor& a, double c) {
    Matrix out = a.value() * c;
    return make_result(std::move(out), a.shape(), "scale", {a}, [a, c](const Tensor& o) {
        if (a.requires_grad()) a.accumulate_grad(o.grad_ref() * c);
    });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (!s.is_scalar()) {
        throw ShapeError("scale_by: scale must be scalar, got " + shape_to_string(s.shape()));
    }
    const double sv = s.value()(0, 0);
    Matrix out = a.value() * sv;
    return make_result(std::move(out), a.shape(), "scale_by", {a, s},
                       [a, s, sv](const Tensor& o) {
                           const Matrix& g = o.grad_ref();
                           if (a.requires_grad()) a.accumulate_grad(g * sv);
                           if (s.requires_grad()) {
                               Matrix gs(1, 1);
                               gs(0, 0) = g.cwiseProduct(a.value()).sum();
                               s.accumulate_grad(gs);
                           }
                       });
}

Tensor exp_elem(const Tensor& a) {
    Matrix out = a.value().array().exp().matrix();
    Matrix saved = out;
    return make_result(std::move(out), a.shape(), "exp", {a}, [a, saved](const Tensor& o) {
        if (a.requires_grad()) a.accumulate_grad(o.grad_ref().cwiseProduct(saved));
    });
}

Tensor clamp_max(const Tensor& a, double cap) {
    Matrix out = a.value().cwiseMin(cap);
    return make_result(std::move(out), a.shape(), "clamp_max", {a}, [a, cap](const Tensor& o) {
        if (!a.requires_grad()) return;
        Matrix mask = (a.value().array() < cap).cast<double>().matrix();
        a.accumulate_grad(o.grad_ref().cwiseProduct(mask));
    });
}

Tensor gelu(const Tensor& a) {
    Matrix out = a.value().unaryExpr([](double x) { return gelu_scalar(x); });
    return make_result(std::move(out), a.shape(), "gelu", {a}, [a](const Tensor& o) {
        if (!a.requires_grad()) return;
        Matrix d = a.value().unaryExpr([](double x) { return gelu_grad_scalar(x); });
        a.accumulate_grad(o.grad_ref().cwiseProduct(d));
    });
}

Tensor softmax_rows(const Tensor& a) {
    check_no_nan(a, "softmax_rows");
    Matrix y = softmax_rows_value(a.value());
    Matrix saved = y;
    return make_result(std::move(y), a.shape(), "softmax_rows", {a},
                       [a, saved](const Tensor& o) {
                           if (!a.requires_grad()) return;
                           const Matrix& g = o.grad_ref();
                           Eigen::VectorXd dots = g.cwiseProduct(saved).rowwise().sum();
                           Matrix gx = g;
                           gx.colwise() -= dots;
                           a.accumulate_grad(gx.cwiseProduct(saved));
                       });
}

Tensor log_softmax_rows(const Tensor& a) {
    check_no_nan(a, "log_softmax_rows");
    Matrix y = log_softmax_rows_value(a.value());
    Matrix sm = y.array().exp().matrix();
    return make_result(std::move(y), a.shape(), "log_softmax_rows", {a},
                       [a, sm](const Tensor& o) {
                           if (!a.requires_grad()) return;
                           const Matrix& g = o.grad_ref();
                           Eigen::VectorXd sums = g.rowwise().sum();
                           Matrix gx = g - (sm.array().colwise() * sums.array()).matrix();
                           a.accumulate_grad(gx);
                       });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (eps <= 0) {
        throw ContractError("layer_norm: eps must be positive");
    }
    const Index d = x.cols();
    if (gain.rank() != 1 || bias.rank() != 1 || gain.cols() != d || bias.cols() != d) {
        throw ShapeError("layer_norm: gain/bias must be rank-1 of size " + std::to_string(d) +
                         ", got " + shape_to_string(gain.shape()) + " and " +
                         shape_to_string(bias.shape()));
    }
    const Matrix& xv = x.value();
    Eigen::VectorXd mean = xv.rowwise().mean();
    Matrix centered = xv;
    centered.colwise() -= mean;
    Eigen::VectorXd var = centered.array().square().rowwise().mean().matrix();
    Eigen::VectorXd inv = (var.array() + eps).rsqrt().matrix();
    Matrix xhat = (centered.array().colwise() * inv.array()).matrix();
    Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
    out.rowwise() += bias.value().row(0);
    return make_result(
        std::move(out), x.shape(), "layer_norm", {x, gain, bias},
        [x, gain, bias, xhat, inv](const Tensor& o) {
            const Matrix& g = o.grad_ref();
            if (gain.requires_grad()) {
                gain.accumulate_grad(g.cwiseProduct(xhat).colwise().sum());
            }
            if (bias.requires_grad()) {
                bias.accumulate_grad(g.colwise().sum());
            }
            if (x.requires_grad()) {
                Matrix dxhat = (g.array().rowwise() * gain.value().row(0).array()).matrix();
                Eigen::VectorXd m1 = dxhat.rowwise().mean();
                Eigen::VectorXd m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
                Matrix gx = dxhat;
                gx.colwise() -= m1;
                gx -= (xhat.array().colwise() * m2.array()).matrix();
                gx = (gx.array().colwise() * inv.array()).matrix();
                x.accumulate_grad(gx);
            }
        });
}

Tensor l2_normalize_rows(const Tensor& a) {
    const Matrix& x = a.value();
    Eigen::VectorXd norms = x.rowwise().norm();
    Matrix out = x;
    for (Index r = 0; r < x.rows(); ++r) {
        if (norms[r] > 0) out.row(r) /= norms[r];
        // zero rows stay zero
    }
    Matrix y = out;
    return make_result(std::move(out), a.shape(), "l2_normalize_rows", {a},
                       [a, y, norms](const Tensor& o) {
                           if (!a.requires_grad()) return;
                           const Matrix& g = o.grad_ref();
                           Matrix gx = Matrix::Zero(g.rows(), g.cols());
                           for (Index r = 0; r < g.rows(); ++r) {
                               if (norms[r] == 0) continue;
                               const double dot = y.row(r).dot(g.row(r));
                               gx.row(r) = (g.row(r) - y.row(r) * dot) / norms[r];
                           }
                           a.accumulate_grad(gx);
                       });
}

Tensor concat_last(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || a.rank() == 0) {
        throw ShapeError("concat_last: ranks differ: " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
    }
    if (a.rank() == 2 && a.rows() != b.rows()) {
        throw ShapeError("concat_last: row counts differ: " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
    }
    Matrix out(a.rows(), a.cols() + b.cols());
    out.leftCols(a.cols()) = a.value();
    out.rightCols(b.cols()) = b.value();
    Shape shape = a.rank() == 1 ? Shape{a.cols() + b.cols()}
                                : Shape{a.rows(), a.cols() + b.cols()};
    return make_result(std::move(out), std::move(shape), "concat_last", {a, b},
                       [a, b](const Tensor& o) {
                           const Matrix& g = o.grad_ref();
                           if (a.requires_grad()) a.accumulate_grad(g.leftCols(a.cols()));
                           if (b.requires_grad()) b.accumulate_grad(g.rightCols(b.cols()));
                       });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: no parts");
    }
    const Index cols = parts.front().cols();
    Index rows = 0;
    for (const Tensor& p : parts) {
        if (p.rank() == 0 || p.cols() != cols) {
            throw ShapeError("concat_rows: column counts differ: " +
                             shape_to_string(parts.front().shape()) + " vs " +
                             shape_to_string(p.shape()));
        }
        rows += p.rows();
    }
    Matrix out(rows, cols);
    Index at = 0;
    for (const Tensor& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    Tape* tape = Tape::current();
    bool need = false;
    if (tape != nullptr) {
        for (const Tensor& p : parts) need = need || p.requires_grad();
    }
    Tensor result = Tensor::from_matrix(std::move(out), need);
    if (need) {
        std::vector<Tensor> captured = parts;
        tape->record("concat_rows", parts, result, [captured](const Tensor& o) {
            const Matrix& g = o.grad_ref();
            Index at = 0;
            for (const Tensor& p : captured) {
                if (p.requires_grad()) p.accumulate_grad(g.middleRows(at, p.rows()));
                at += p.rows();
            }
        });
    }
    return result;
}

Tensor row(const Tensor& a, Index i) {
    if (a.rank() != 2) {
        throw ShapeError("row: expected rank-2, got " + shape_to_string(a.shape()));
    }
    if (i < 0 || i >= a.rows()) {
        throw ShapeError("row: index " + std::to_string(i) + " out of range for " +
                         shape_to_string(a.shape()));
    }
    Matrix out = a.value().row(i);
    return make_result(std::move(out), Shape{a.cols()}, "row", {a}, [a, i](const Tensor& o) {
        if (!a.requires_grad()) return;
        Matrix g = Matrix::Zero(a.rows(), a.cols());
        g.row(i) = o.grad_ref().row(0);
        a.accumulate_grad(g);
    });
}

Tensor col_block(const Tensor& a, Index start, Index n) {
    if (a.rank() != 2) {
        throw ShapeError("col_block: expected rank-2, got " + shape_to_string(a.shape()));
    }
    if (start < 0 || n <= 0 || start + n > a.cols()) {
        throw ShapeError("col_block: slice [" + std::to_string(start) + ", " +
                         std::to_string(start + n) + ") out of range for " +
                         shape_to_string(a.shape()));
    }
    Matrix out = a.value().middleCols(start, n);
    return make_result(std::move(out), Shape{a.rows(), n}, "col_block", {a},
                       [a, start, n](const Tensor& o) {
                           if (!a.requires_grad()) return;
                           Matrix g = Matrix::Zero(a.rows(), a.cols());
                           g.middleCols(start, n) = o.grad_ref();
                           a.accumulate_grad(g);
                       });
}

Tensor diag(const Tensor& a) {
    if (a.rank() != 2 || a.rows() != a.cols()) {
        throw ShapeError("diag: expected a square matrix, got " + shape_to_string(a.shape()));
    }
    Matrix out = a.value().diagonal().transpose();
    return make_result(std::move(out), Shape{a.rows()}, "diag", {a}, [a](const Tensor& o) {
        if (!a.requires_grad()) return;
        Matrix g = Matrix::Zero(a.rows(), a.cols());
        g.diagonal() = o.grad_ref().row(0);
        a.accumulate_grad(g);
    });
}

Tensor mean_all(const Tensor& a) {
    Matrix out(1, 1);
    out(0, 0) = a.value().mean();
    const double inv_n = 1.0 / static_cast<double>(a.size());
    return make_result(std::move(out), Shape{}, "mean_all", {a}, [a, inv_n](const Tensor& o) {
        if (!a.requires_grad()) return;
        a.accumulate_grad(Matrix::Constant(a.rows(), a.cols(), o.grad_ref()(0, 0) * inv_n));
    });
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2) {
        throw ShapeError("embedding_rows: table must be rank-2, got " +
                         shape_to_string(table.shape()));
    }
    for (int id : ids) {
        if (id < 0 || id >= table.rows()) {
            throw ContractError("embedding_rows: id " + std::to_string(id) +
                                " outside table of " + std::to_string(table.rows()) + " rows");
        }
    }
    Matrix out(static_cast<Index>(ids.size()), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
    }
    return make_result(std::move(out), Shape{static_cast<Index>(ids.size()), table.cols()},
                       "embedding_rows", {table}, [table, ids](const Tensor& o) {
                           if (!table.requires_grad()) return;
                           Matrix g = Matrix::Zero(table.rows(), table.cols());
                           for (std::size_t i = 0; i < ids.size(); ++i) {
                               g.row(ids[i]) += o.grad_ref().row(static_cast<Index>(i));
                           }
                           table.accumulate_grad(g);
                       });
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.rank() != 2) {
        throw ShapeError("softmax_cross_entropy: logits must be rank-2, got " +
                         shape_to_string(logits.shape()));
    }
    if (static_cast<Index>(targets.size()) != logits.rows()) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(logits.rows()) + " rows");
    }
    for (int t : targets) {
        if (t < 0 || t >= logits.cols()) {
            throw ContractError("softmax_cross_entropy: target " + std::to_string(t) +
                                " outside [0, " + std::to_string(logits.cols()) + ")");
        }
    }
    check_no_nan(logits, "softmax_cross_entropy");
    Matrix ls = log_softmax_rows_value(logits.value());
    double loss = 0.0;
    for (Index r = 0; r < ls.rows(); ++r) loss -= ls(r, targets[static_cast<std::size_t>(r)]);
    loss /= static_cast<double>(ls.rows());
    Matrix out(1, 1);
    out(0, 0) = loss;
    Matrix sm = ls.array().exp().matrix();
    return make_result(std::move(out), Shape{}, "softmax_cross_entropy", {logits},
                       [logits, sm, targets](const Tensor& o) {
                           if (!logits.requires_grad()) return;
                           Matrix g = sm;
                           for (Index r = 0; r < g.rows(); ++r) {
                               g(r, targets[static_cast<std::size_t>(r)]) -= 1.0;
                           }
                           g *= o.grad_ref()(0, 0) / static_cast<double>(g.rows());
                           logits.accumulate_grad(g);
                       });
}

Tensor sigmoid_bce(const Tensor& logits, const Matrix& targets) {
    if (logits.rows() != targets.rows() || logits.cols() != targets.cols()) {
        throw ShapeError("sigmoid_bce: logits " + shape_to_string(logits.shape()) +
                         " vs targets " + shape_to_string(Shape{targets.rows(), targets.cols()}));
    }
    check_no_nan(logits, "sigmoid_bce");
    const Matrix& x = logits.value();
    // max(x,0) - x*t + log1p(exp(-|x|))
    Matrix losses = x.cwiseMax(0.0) - x.cwiseProduct(targets) +
                    (-x.array().abs()).exp().log1p().matrix();
    Matrix out(1, 1);
    out(0, 0) = losses.mean();
    const double inv_n = 1.0 / static_cast<double>(losses.size());
    return make_result(std::move(out), Shape{}, "sigmoid_bce", {logits},
                       [logits, targets, inv_n](const Tensor& o) {
                           if (!logits.requires_grad()) return;
                           Matrix sig =
                               (1.0 / (1.0 + (-logits.value().array()).exp())).matrix();
                           Matrix g = (sig - targets) * (o.grad_ref()(0, 0) * inv_n);
                           logits.accumulate_grad(g);
                       });
}

double finite_difference_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                               double eps) {
    if (eps < 1e-7 || eps > 1e-3) {
        throw ContractError("finite_difference_check: eps must lie in [1e-7, 1e-3]");
    }
    for (Tensor& p : params) p.clear_grad();
    std::vector<Matrix> analytic;
    {
        Tape tape;
        Tensor loss = f();
        if (!loss.is_scalar()) {
            throw ContractError("finite_difference_check: f must return a scalar");
        }
        if (!std::isfinite(loss.item())) {
            throw NumericError("finite_difference_check: f is not finite at the base point");
        }
        tape.backward(loss);
        for (Tensor& p : params) analytic.push_back(p.grad());
        for (Tensor& p : params) p.clear_grad();
    }
    auto eval = [&f]() {
        TapeSuspend off;
        double v = f().item();
        if (!std::isfinite(v)) {
            throw NumericError("finite_difference_check: f is not finite at a probe point");
        }
        return v;
    };
    double max_rel = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Matrix& v = params[k].mutable_value();
        for (Index i = 0; i < v.rows(); ++i) {
            for (Index j = 0; j < v.cols(); ++j) {
                const double orig = v(i, j);
                v(i, j) = orig + eps;
                const double fp = eval();
                v(i, j) = orig - eps;
                const double fm = eval();
                v(i, j) = orig;
                const double numeric = (fp - fm) / (2.0 * eps);
                const double a = analytic[k](i, j);
                const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
                max_rel = std::max(max_rel, rel);
            }
        }
    }
    return max_rel;
}

}  // namespace retclip
