#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ebcl/nn.hpp"
#include "support.hpp"

using namespace ebcl::nn;
using testsupport::random_matrix;

namespace {

// Gradient-check one op: loss = sum(op(inputs) .* R) with fixed random R.
double op_gradcheck(const std::vector<std::pair<std::string, Matrix>>& inputs,
                    const std::function<Value(Tape&, const std::map<std::string, Value>&)>& build) {
    ebcl::model::ParamStore params;
    for (const auto& [name, m] : inputs) params.add(name, m);

    std::map<std::string, Matrix> analytic;
    auto loss_fn = [&](const ebcl::model::ParamStore& p) {
        Tape t;
        std::map<std::string, Value> bound;
        for (const auto& name : p.names()) bound[name] = t.input(p.at(name));
        return build(t, bound).item();
    };
    {
        Tape t;
        std::map<std::string, Value> bound;
        for (const auto& name : params.names()) bound[name] = t.param(params.at(name));
        Value loss = build(t, bound);
        t.backward(loss);
        for (const auto& name : params.names())
            if (bound[name].node->grad_init) analytic[name] = bound[name].node->grad;
    }
    auto check = testsupport::finite_difference_check(params, loss_fn, analytic);
    return check.worst;
}

Matrix fixed_r(Eigen::Index rows, Eigen::Index cols, uint64_t seed) {
    std::mt19937_64 rng(seed);
    return random_matrix(rows, cols, rng);
}

}  // namespace

TEST_CASE("backward of matmul, add, hadamard, transpose, slicing") {
    std::mt19937_64 rng(1);
    Matrix a = random_matrix(3, 4, rng), b = random_matrix(4, 5, rng);
    CHECK(op_gradcheck({{"a", a}, {"b", b}}, [](Tape& t, const auto& p) {
              Value y = matmul(t, p.at("a"), p.at("b"));
              return sum_all(t, hadamard(t, y, t.input(fixed_r(3, 5, 7))));
          }) < 1e-6);

    Matrix c = random_matrix(3, 5, rng);
    CHECK(op_gradcheck({{"a", a}, {"c", c}}, [](Tape& t, const auto& p) {
              Value y = sub(t, transpose(t, matmul(t, p.at("a"), t.input(fixed_r(4, 5, 8)))), transpose(t, p.at("c")));
              return mean_all(t, hadamard(t, y, y));
          }) < 1e-6);

    CHECK(op_gradcheck({{"a", a}}, [](Tape& t, const auto& p) {
              Value left = slice_cols(t, p.at("a"), 0, 2);
              Value right = slice_cols(t, p.at("a"), 2, 2);
              Value y = concat_cols(t, right, left);
              return sum_all(t, hadamard(t, y, t.input(fixed_r(3, 4, 9))));
          }) < 1e-6);
}

TEST_CASE("backward of row broadcast and scalar scaling") {
    std::mt19937_64 rng(2);
    Matrix a = random_matrix(4, 3, rng), row = random_matrix(1, 3, rng), s = Matrix::Constant(1, 1, 0.7);
    CHECK(op_gradcheck({{"a", a}, {"row", row}, {"s", s}}, [](Tape& t, const auto& p) {
              Value y = add_rowvec(t, p.at("a"), p.at("row"));
              y = scale_by(t, y, exp_v(t, p.at("s")));
              return sum_all(t, hadamard(t, y, t.input(fixed_r(4, 3, 10))));
          }) < 1e-6);
}

TEST_CASE("backward of activations") {
    std::mt19937_64 rng(3);
    Matrix a = random_matrix(3, 6, rng);
    for (auto op : {0, 1, 2}) {
        CHECK(op_gradcheck({{"a", a}}, [op](Tape& t, const auto& p) {
                  Value y = op == 0 ? tanh_v(t, p.at("a")) : op == 1 ? gelu(t, p.at("a")) : sigmoid_v(t, p.at("a"));
                  return sum_all(t, hadamard(t, y, t.input(fixed_r(3, 6, 11))));
              }) < 1e-6);
    }
}

TEST_CASE("backward of softmax, logsumexp, diag, l2 normalize") {
    std::mt19937_64 rng(4);
    Matrix a = random_matrix(5, 5, rng);
    CHECK(op_gradcheck({{"a", a}}, [](Tape& t, const auto& p) {
              return sum_all(t, hadamard(t, softmax_rows(t, p.at("a")), t.input(fixed_r(5, 5, 12))));
          }) < 1e-6);
    CHECK(op_gradcheck({{"a", a}}, [](Tape& t, const auto& p) {
              return sum_all(t, hadamard(t, logsumexp_rows(t, p.at("a")), t.input(fixed_r(5, 1, 13))));
          }) < 1e-6);
    CHECK(op_gradcheck({{"a", a}}, [](Tape& t, const auto& p) {
              return sum_all(t, hadamard(t, diag_vec(t, p.at("a")), t.input(fixed_r(5, 1, 14))));
          }) < 1e-6);
    CHECK(op_gradcheck({{"a", a}}, [](Tape& t, const auto& p) {
              return sum_all(t, hadamard(t, l2_normalize_rows(t, p.at("a")), t.input(fixed_r(5, 5, 15))));
          }) < 1e-6);
}

TEST_CASE("backward of layer norm") {
    std::mt19937_64 rng(5);
    Matrix x = random_matrix(4, 6, rng);
    Matrix g = random_matrix(1, 6, rng), b = random_matrix(1, 6, rng);
    CHECK(op_gradcheck({{"x", x}, {"g", g}, {"b", b}}, [](Tape& t, const auto& p) {
              Value y = layer_norm(t, p.at("x"), p.at("g"), p.at("b"));
              return sum_all(t, hadamard(t, y, t.input(fixed_r(4, 6, 16))));
          }) < 1e-6);
}

TEST_CASE("backward of gather_rows scatters into the table") {
    std::mt19937_64 rng(6);
    Matrix table = random_matrix(7, 4, rng);
    std::vector<int> ids = {2, 0, 2, 6, 1};
    CHECK(op_gradcheck({{"table", table}}, [ids](Tape& t, const auto& p) {
              Value y = gather_rows(t, p.at("table"), ids);
              return sum_all(t, hadamard(t, y, t.input(fixed_r(5, 4, 17))));
          }) < 1e-6);
    Tape t;
    Value v = t.input(table);
    CHECK_THROWS_AS(gather_rows(t, v, {7}), std::out_of_range);
}

TEST_CASE("backward of fused losses") {
    std::mt19937_64 rng(7);
    Matrix z = random_matrix(6, 1, rng);
    Matrix y(6, 1);
    y << 1, 0, 1, 1, 0, 0;
    CHECK(op_gradcheck({{"z", z}}, [y](Tape& t, const auto& p) {
              return bce_with_logits_mean(t, p.at("z"), y);
          }) < 1e-6);

    Matrix pred = random_matrix(4, 5, rng);
    Matrix target = random_matrix(4, 5, rng);
    Matrix mask = (random_matrix(4, 5, rng).array() > 0).cast<double>().matrix();
    mask(0, 0) = 1.0;
    CHECK(op_gradcheck({{"pred", pred}}, [target, mask](Tape& t, const auto& p) {
              return mse_masked(t, p.at("pred"), target, mask);
          }) < 1e-6);
}

TEST_CASE("dropout semantics") {
    std::mt19937_64 rng(8);
    Matrix a = Matrix::Ones(100, 10);
    Tape t;
    Value v = t.input(a);
    Value kept = dropout(t, v, 0.4, rng, false);
    CHECK(kept.node == v.node);  // disabled dropout is the identity
    Value dropped = dropout(t, v, 0.4, rng, true);
    int zeros = 0;
    for (Eigen::Index r = 0; r < 100; ++r)
        for (Eigen::Index c = 0; c < 10; ++c) {
            if (dropped.val()(r, c) == 0.0) ++zeros;
            else CHECK(dropped.val()(r, c) == doctest::Approx(1.0 / 0.6));
        }
    CHECK(zeros > 250);
    CHECK(zeros < 550);
}

TEST_CASE("backward accumulates over reused values") {
    // y = a*a (same node twice through hadamard) -> dy/da = 2a
    Matrix a = Matrix::Constant(1, 1, 3.0);
    Tape t;
    Value va = t.param(a);
    Value y = hadamard(t, va, va);
    t.backward(sum_all(t, y));
    CHECK(va.node->grad(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("loss must be scalar") {
    Tape t;
    Value v = t.param(Matrix::Ones(2, 2));
    CHECK_THROWS_AS(t.backward(v), std::invalid_argument);
}
