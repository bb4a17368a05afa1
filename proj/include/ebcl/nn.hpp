#pragma once

#include <deque>
#include <functional>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace ebcl::nn {

using Matrix = Eigen::MatrixXd;

struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool grad_init = false;
    std::function<void()> backward;

    void ensure_grad() {
        if (!grad_init) {
            grad = Matrix::Zero(value.rows(), value.cols());
            grad_init = true;
        }
    }
};

/// Handle into a Tape-owned node. Valid while the tape lives.
struct Value {
    Node* node = nullptr;
    const Matrix& val() const { return node->value; }
    double item() const { return node->value(0, 0); }
    Eigen::Index rows() const { return node->value.rows(); }
    Eigen::Index cols() const { return node->value.cols(); }
};

/// Reverse-mode tape. Nodes are recorded in creation order, which is a valid
/// topological order, so backward() is a single reverse sweep.
class Tape {
public:
    Value input(Matrix v);   // constant, no gradient
    Value param(Matrix v);   // leaf with gradient
    Value scalar(double v) { return input(Matrix::Constant(1, 1, v)); }

    Value make(Matrix v, bool requires_grad, std::function<void()> backward);

    void backward(Value loss);

    const Matrix& grad(Value v) const { return v.node->grad; }
    size_t size() const { return nodes_.size(); }

private:
    std::deque<Node> nodes_;
};

Value matmul(Tape& t, Value a, Value b);
Value transpose(Tape& t, Value a);
Value add(Tape& t, Value a, Value b);
Value sub(Tape& t, Value a, Value b);
Value add_rowvec(Tape& t, Value a, Value row);  // row is [1 x C]
Value hadamard(Tape& t, Value a, Value b);
Value scale(Tape& t, Value a, double c);
Value scale_by(Tape& t, Value a, Value s);  // s is [1 x 1]
Value softmax_rows(Tape& t, Value a);
Value layer_norm(Tape& t, Value x, Value gain, Value bias, double eps = 1e-5);
Value tanh_v(Tape& t, Value a);
Value gelu(Tape& t, Value a);
Value sigmoid_v(Tape& t, Value a);
Value exp_v(Tape& t, Value a);
Value l2_normalize_rows(Tape& t, Value a);
Value logsumexp_rows(Tape& t, Value a);       // [R x 1], max-shifted
Value diag_vec(Tape& t, Value a);             // [N x N] -> [N x 1]
Value gather_rows(Tape& t, Value table, std::vector<int> ids);
Value concat_cols(Tape& t, Value a, Value b);
Value concat_rows(Tape& t, const std::vector<Value>& parts);
Value slice_cols(Tape& t, Value a, int begin, int len);
Value sum_all(Tape& t, Value a);
Value mean_all(Tape& t, Value a);
Value dropout(Tape& t, Value a, double p, std::mt19937_64& rng, bool enabled);

/// Mean binary cross-entropy over logits [N x 1] against constant targets.
Value bce_with_logits_mean(Tape& t, Value logits, const Matrix& targets);
/// Sum of squared error over cells where mask != 0, divided by the mask count.
Value mse_masked(Tape& t, Value pred, const Matrix& target, const Matrix& mask);

}  // namespace ebcl::nn
