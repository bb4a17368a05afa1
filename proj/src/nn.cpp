#include "ebcl/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace ebcl::nn {

Value Tape::input(Matrix v) {
    nodes_.push_back(Node{std::move(v), {}, false, false, nullptr});
    return Value{&nodes_.back()};
}

Value Tape::param(Matrix v) {
    nodes_.push_back(Node{std::move(v), {}, true, false, nullptr});
    return Value{&nodes_.back()};
}

Value Tape::make(Matrix v, bool requires_grad, std::function<void()> backward) {
    nodes_.push_back(Node{std::move(v), {}, requires_grad, false, requires_grad ? std::move(backward) : nullptr});
    return Value{&nodes_.back()};
}

void Tape::backward(Value loss) {
    if (loss.rows() != 1 || loss.cols() != 1) throw std::invalid_argument("backward: loss must be 1x1");
    loss.node->ensure_grad();
    loss.node->grad(0, 0) = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->grad_init && it->backward) it->backward();
    }
}

namespace {

bool needs(Value a) { return a.node->requires_grad; }
bool needs(Value a, Value b) { return a.node->requires_grad || b.node->requires_grad; }

void accum(Value v, const Matrix& g) {
    if (!v.node->requires_grad) return;
    v.node->ensure_grad();
    v.node->grad += g;
}

}  // namespace

Value matmul(Tape& t, Value a, Value b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: shape mismatch");
    Matrix v = a.val() * b.val();
    Value out = t.make(std::move(v), needs(a, b), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, b, o]() {
            if (a.node->requires_grad) accum(a, o->grad * b.val().transpose());
            if (b.node->requires_grad) accum(b, a.val().transpose() * o->grad);
        };
    }
    return out;
}

Value transpose(Tape& t, Value a) {
    Value out = t.make(a.val().transpose(), needs(a), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, o]() { accum(a, o->grad.transpose()); };
    }
    return out;
}

Value add(Tape& t, Value a, Value b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("add: shape mismatch");
    Value out = t.make(a.val() + b.val(), needs(a, b), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, b, o]() {
            accum(a, o->grad);
            accum(b, o->grad);
        };
    }
    return out;
}

Value sub(Tape& t, Value a, Value b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("sub: shape mismatch");
    Value out = t.make(a.val() - b.val(), needs(a, b), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, b, o]() {
            accum(a, o->grad);
            accum(b, -o->grad);
        };
    }
    return out;
}

Value add_rowvec(Tape& t, Value a, Value row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_rowvec: shape mismatch");
    Matrix v = a.val().rowwise() + row.val().row(0);
    Value out = t.make(std::move(v), needs(a, row), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, row, o]() {
            accum(a, o->grad);
            if (row.node->requires_grad) accum(row, o->grad.colwise().sum());
        };
    }
    return out;
}

Value hadamard(Tape& t, Value a, Value b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("hadamard: shape mismatch");
    Value out = t.make(a.val().cwiseProduct(b.val()), needs(a, b), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, b, o]() {
            if (a.node->requires_grad) accum(a, o->grad.cwiseProduct(b.val()));
            if (b.node->requires_grad) accum(b, o->grad.cwiseProduct(a.val()));
        };
    }
    return out;
}

Value scale(Tape& t, Value a, double c) {
    Value out = t.make(a.val() * c, needs(a), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, c, o]() { accum(a, o->grad * c); };
    }
    return out;
}

Value scale_by(Tape& t, Value a, Value s) {
    if (s.rows() != 1 || s.cols() != 1) throw std::invalid_argument("scale_by: scalar must be 1x1");
    Value out = t.make(a.val() * s.item(), needs(a, s), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, s, o]() {
            if (a.node->requires_grad) accum(a, o->grad * s.item());
            if (s.node->requires_grad)
                accum(s, Matrix::Constant(1, 1, (o->grad.cwiseProduct(a.val())).sum()));
        };
    }
    return out;
}

Value softmax_rows(Tape& t, Value a) {
    Matrix v = a.val();
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
        const double m = v.row(r).maxCoeff();
        v.row(r) = (v.row(r).array() - m).exp();
        v.row(r) /= v.row(r).sum();
    }
    Value out = t.make(std::move(v), needs(a), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, o]() {
            const Matrix& y = o->value;
            const Matrix& dy = o->grad;
            Matrix dx(y.rows(), y.cols());
            for (Eigen::Index r = 0; r < y.rows(); ++r) {
                const double dot = dy.row(r).cwiseProduct(y.row(r)).sum();
                dx.row(r) = y.row(r).cwiseProduct((dy.row(r).array() - dot).matrix());
            }
            accum(a, dx);
        };
    }
    return out;
}

Value layer_norm(Tape& t, Value x, Value gain, Value bias, double eps) {
    const Eigen::Index R = x.rows(), C = x.cols();
    if (gain.rows() != 1 || gain.cols() != C || bias.rows() != 1 || bias.cols() != C)
        throw std::invalid_argument("layer_norm: gain/bias must be [1 x C]");
    Matrix xhat(R, C);
    Eigen::VectorXd inv_sigma(R);
    for (Eigen::Index r = 0; r < R; ++r) {
        const double mu = x.val().row(r).mean();
        const double var = (x.val().row(r).array() - mu).square().mean();
        inv_sigma(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (x.val().row(r).array() - mu) * inv_sigma(r);
    }
    Matrix v = (xhat.array().rowwise() * gain.val().row(0).array()).rowwise() + bias.val().row(0).array();
    Value out = t.make(std::move(v), needs(x, gain) || needs(bias), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [x, gain, bias, xhat, inv_sigma, o]() {
            const Matrix& dy = o->grad;
            if (gain.node->requires_grad) accum(gain, dy.cwiseProduct(xhat).colwise().sum());
            if (bias.node->requires_grad) accum(bias, dy.colwise().sum());
            if (x.node->requires_grad) {
                const Eigen::Index R = dy.rows(), C = dy.cols();
                Matrix dx(R, C);
                for (Eigen::Index r = 0; r < R; ++r) {
                    Eigen::RowVectorXd dxhat = dy.row(r).cwiseProduct(gain.val().row(0));
                    const double m1 = dxhat.mean();
                    const double m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
                    dx.row(r) = inv_sigma(r) *
                                (dxhat.array() - m1 - xhat.row(r).array() * m2).matrix();
                }
                accum(x, dx);
            }
        };
    }
    return out;
}

Value tanh_v(Tape& t, Value a) {
    Value out = t.make(a.val().array().tanh().matrix(), needs(a), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, o]() {
            accum(a, o->grad.cwiseProduct((1.0 - o->value.array().square()).matrix()));
        };
    }
    return out;
}

Value gelu(Tape& t, Value a) {
    constexpr double kAlpha = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kBeta = 0.044715;
    Eigen::ArrayXXd x = a.val().array();
    Eigen::ArrayXXd u = kAlpha * (x + kBeta * x.cube());
    Eigen::ArrayXXd th = u.tanh();
    Value out = t.make((0.5 * x * (1.0 + th)).matrix(), needs(a), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        Matrix dydx = (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th.square()) * kAlpha * (1.0 + 3.0 * kBeta * x.square()))
                          .matrix();
        out.node->backward = [a, dydx, o]() { accum(a, o->grad.cwiseProduct(dydx)); };
    }
    return out;
}

Value sigmoid_v(Tape& t, Value a) {
    Matrix v = (1.0 / (1.0 + (-a.val().array()).exp())).matrix();
    Value out = t.make(std::move(v), needs(a), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, o]() {
            accum(a, o->grad.cwiseProduct((o->value.array() * (1.0 - o->value.array())).matrix()));
        };
    }
    return out;
}

Value exp_v(Tape& t, Value a) {
    Value out = t.make(a.val().array().exp().matrix(), needs(a), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, o]() { accum(a, o->grad.cwiseProduct(o->value)); };
    }
    return out;
}

Value l2_normalize_rows(Tape& t, Value a) {
    const Eigen::Index R = a.rows(), C = a.cols();
    Matrix v(R, C);
    Eigen::VectorXd norms(R);
    for (Eigen::Index r = 0; r < R; ++r) {
        norms(r) = a.val().row(r).norm();
        if (norms(r) < 1e-300) throw std::domain_error("l2_normalize_rows: zero-norm row");
        v.row(r) = a.val().row(r) / norms(r);
    }
    Value out = t.make(std::move(v), needs(a), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, norms, o]() {
            const Matrix& y = o->value;
            const Matrix& dy = o->grad;
            Matrix dx(y.rows(), y.cols());
            for (Eigen::Index r = 0; r < y.rows(); ++r) {
                const double dot = dy.row(r).cwiseProduct(y.row(r)).sum();
                dx.row(r) = (dy.row(r) - y.row(r) * dot) / norms(r);
            }
            accum(a, dx);
        };
    }
    return out;
}

Value logsumexp_rows(Tape& t, Value a) {
    const Eigen::Index R = a.rows();
    Matrix v(R, 1);
    Matrix soft(R, a.cols());
    for (Eigen::Index r = 0; r < R; ++r) {
        const double m = a.val().row(r).maxCoeff();
        Eigen::ArrayXd e = (a.val().row(r).array() - m).exp();
        const double s = e.sum();
        v(r, 0) = m + std::log(s);
        soft.row(r) = (e / s).matrix().transpose();
    }
    Value out = t.make(std::move(v), needs(a), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, soft, o]() {
            accum(a, (soft.array().colwise() * o->grad.col(0).array()).matrix());
        };
    }
    return out;
}

Value diag_vec(Tape& t, Value a) {
    if (a.rows() != a.cols()) throw std::invalid_argument("diag_vec: square matrix required");
    Value out = t.make(a.val().diagonal(), needs(a), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, o]() {
            Matrix g = Matrix::Zero(a.rows(), a.cols());
            g.diagonal() = o->grad.col(0);
            accum(a, g);
        };
    }
    return out;
}

Value gather_rows(Tape& t, Value table, std::vector<int> ids) {
    Matrix v(static_cast<Eigen::Index>(ids.size()), table.cols());
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= table.rows())
            throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " out of table range");
        v.row(static_cast<Eigen::Index>(i)) = table.val().row(ids[i]);
    }
    Value out = t.make(std::move(v), needs(table), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [table, ids = std::move(ids), o]() {
            table.node->ensure_grad();
            for (size_t i = 0; i < ids.size(); ++i)
                table.node->grad.row(ids[i]) += o->grad.row(static_cast<Eigen::Index>(i));
        };
    }
    return out;
}

Value concat_cols(Tape& t, Value a, Value b) {
    if (a.rows() != b.rows()) throw std::invalid_argument("concat_cols: row mismatch");
    Matrix v(a.rows(), a.cols() + b.cols());
    v << a.val(), b.val();
    Value out = t.make(std::move(v), needs(a, b), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, b, o]() {
            accum(a, o->grad.leftCols(a.cols()));
            accum(b, o->grad.rightCols(b.cols()));
        };
    }
    return out;
}

Value concat_rows(Tape& t, const std::vector<Value>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    Eigen::Index rows = 0;
    bool any = false;
    for (const auto& p : parts) {
        rows += p.rows();
        any = any || p.node->requires_grad;
    }
    Matrix v(rows, parts[0].cols());
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        v.middleRows(at, p.rows()) = p.val();
        at += p.rows();
    }
    Value out = t.make(std::move(v), any, nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [parts, o]() {
            Eigen::Index at = 0;
            for (const auto& p : parts) {
                accum(p, o->grad.middleRows(at, p.rows()));
                at += p.rows();
            }
        };
    }
    return out;
}

Value slice_cols(Tape& t, Value a, int begin, int len) {
    if (begin < 0 || begin + len > a.cols()) throw std::invalid_argument("slice_cols: out of range");
    Value out = t.make(a.val().middleCols(begin, len), needs(a), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, begin, len, o]() {
            a.node->ensure_grad();
            a.node->grad.middleCols(begin, len) += o->grad;
        };
    }
    return out;
}

Value sum_all(Tape& t, Value a) {
    Value out = t.make(Matrix::Constant(1, 1, a.val().sum()), needs(a), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, o]() {
            accum(a, Matrix::Constant(a.rows(), a.cols(), o->grad(0, 0)));
        };
    }
    return out;
}

Value mean_all(Tape& t, Value a) {
    const double n = static_cast<double>(a.rows() * a.cols());
    Value out = t.make(Matrix::Constant(1, 1, a.val().sum() / n), needs(a), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, n, o]() {
            accum(a, Matrix::Constant(a.rows(), a.cols(), o->grad(0, 0) / n));
        };
    }
    return out;
}

Value dropout(Tape& t, Value a, double p, std::mt19937_64& rng, bool enabled) {
    if (!enabled || p <= 0.0) return a;
    if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
    std::bernoulli_distribution keep(1.0 - p);
    Matrix mask(a.rows(), a.cols());
    const double inv_keep = 1.0 / (1.0 - p);
    for (Eigen::Index r = 0; r < a.rows(); ++r)
        for (Eigen::Index c = 0; c < a.cols(); ++c) mask(r, c) = keep(rng) ? inv_keep : 0.0;
    Value out = t.make(a.val().cwiseProduct(mask), needs(a), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [a, mask, o]() { accum(a, o->grad.cwiseProduct(mask)); };
    }
    return out;
}

Value bce_with_logits_mean(Tape& t, Value logits, const Matrix& targets) {
    if (logits.rows() != targets.rows() || logits.cols() != targets.cols())
        throw std::invalid_argument("bce_with_logits_mean: shape mismatch");
    const Eigen::Index n = logits.rows() * logits.cols();
    if (n == 0) throw std::invalid_argument("bce_with_logits_mean: empty batch");
    const Eigen::ArrayXXd z = logits.val().array();
    const Eigen::ArrayXXd y = targets.array();
    const double loss = (z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).log()).sum() / static_cast<double>(n);
    Value out = t.make(Matrix::Constant(1, 1, loss), needs(logits), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        Matrix dz = ((1.0 / (1.0 + (-z).exp())) - y).matrix() / static_cast<double>(n);
        out.node->backward = [logits, dz, o]() { accum(logits, dz * o->grad(0, 0)); };
    }
    return out;
}

Value mse_masked(Tape& t, Value pred, const Matrix& target, const Matrix& mask) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols())
        throw std::invalid_argument("mse_masked: shape mismatch");
    const double n = mask.sum();
    if (n <= 0) throw std::invalid_argument("mse_masked: empty mask");
    Matrix diff = (pred.val() - target).cwiseProduct(mask);
    const double loss = diff.squaredNorm() / n;
    Value out = t.make(Matrix::Constant(1, 1, loss), needs(pred), nullptr);
    if (out.node->requires_grad) {
        Node* o = out.node;
        out.node->backward = [pred, diff, n, o]() { accum(pred, (2.0 / n) * diff * o->grad(0, 0)); };
    }
    return out;
}

}  // namespace ebcl::nn
