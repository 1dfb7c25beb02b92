#include <doctest.h>

#include <cmath>
#include <functional>
#include <telapa/graph.hpp>

using namespace telapa;
using namespace telapa::nn;

namespace {

Mat random_mat(int r, int c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

// Scalar loss built from op output y: loss = sum(y .* W) with constant W,
// so every output entry carries a distinct weight.
struct OpCase {
  std::function<V(Graph&, const std::vector<V>&)> op;
  std::vector<Mat> inputs;
};

double eval_loss(const OpCase& c, const std::vector<Mat>& xs, const Mat& w) {
  Graph g;
  std::vector<V> vs;
  for (const Mat& x : xs) vs.push_back(g.input(x, false));
  V y = c.op(g, vs);
  V loss = g.sum(g.mul(y, g.input(w, false)));
  return g.val(loss)(0, 0);
}

void check_case(const OpCase& c, double tol = 2e-6) {
  Rng wrng(7777);
  // forward once to size the weight matrix
  Mat w;
  {
    Graph g;
    std::vector<V> vs;
    for (const Mat& x : c.inputs) vs.push_back(g.input(x, false));
    V y = c.op(g, vs);
    w = random_mat(int(g.val(y).rows()), int(g.val(y).cols()), wrng);
  }
  // analytic gradients
  Graph g;
  std::vector<V> vs;
  for (const Mat& x : c.inputs) vs.push_back(g.input(x, true));
  V y = c.op(g, vs);
  V loss = g.sum(g.mul(y, g.input(w, false)));
  g.backward(loss);
  const double eps = 1e-5;
  for (std::size_t k = 0; k < c.inputs.size(); ++k) {
    const Mat ga = g.grad(vs[k]);
    REQUIRE(ga.rows() == c.inputs[k].rows());
    REQUIRE(ga.cols() == c.inputs[k].cols());
    for (int i = 0; i < c.inputs[k].rows(); ++i)
      for (int j = 0; j < c.inputs[k].cols(); ++j) {
        std::vector<Mat> xp = c.inputs, xm = c.inputs;
        xp[k](i, j) += eps;
        xm[k](i, j) -= eps;
        const double fd = (eval_loss(c, xp, w) - eval_loss(c, xm, w)) / (2 * eps);
        CHECK(std::abs(fd - ga(i, j)) <=
              tol * std::max(1.0, std::abs(fd)));
      }
  }
}

}  // namespace

TEST_SUITE("graph") {
  TEST_CASE("binary and matmul ops match finite differences") {
    Rng rng(11);
    const Mat a = random_mat(3, 4, rng), b = random_mat(3, 4, rng);
    const Mat m1 = random_mat(3, 5, rng), m2 = random_mat(5, 4, rng);
    const Mat m2t = random_mat(4, 5, rng);
    check_case({[](Graph& g, const std::vector<V>& v) { return g.add(v[0], v[1]); }, {a, b}});
    check_case({[](Graph& g, const std::vector<V>& v) { return g.sub(v[0], v[1]); }, {a, b}});
    check_case({[](Graph& g, const std::vector<V>& v) { return g.mul(v[0], v[1]); }, {a, b}});
    check_case({[](Graph& g, const std::vector<V>& v) { return g.mm(v[0], v[1]); }, {m1, m2}});
    check_case({[](Graph& g, const std::vector<V>& v) { return g.mm_nt(v[0], v[1]); }, {m1, m2t}});
  }

  TEST_CASE("broadcast ops match finite differences") {
    Rng rng(12);
    const Mat a = random_mat(4, 3, rng);
    const Mat r = random_mat(1, 3, rng);
    const Mat c = random_mat(4, 1, rng, 0.5, 2.0);  // away from zero for div
    check_case({[](Graph& g, const std::vector<V>& v) { return g.add_rowvec(v[0], v[1]); }, {a, r}});
    check_case({[](Graph& g, const std::vector<V>& v) { return g.mul_colvec(v[0], v[1]); }, {a, c}});
    check_case({[](Graph& g, const std::vector<V>& v) { return g.div_colvec(v[0], v[1]); }, {a, c}});
    check_case({[](Graph& g, const std::vector<V>& v) { return g.sub_colvec(v[0], v[1]); }, {a, c}});
  }

  TEST_CASE("unary ops match finite differences") {
    Rng rng(13);
    const Mat a = random_mat(3, 3, rng);
    const Mat pos = random_mat(3, 3, rng, 0.2, 2.0);
    // keep relu/clamp inputs away from their kinks
    Mat off = a;
    for (int i = 0; i < off.size(); ++i)
      if (std::abs(off.data()[i]) < 0.05) off.data()[i] = 0.1;
    check_case({[](Graph& g, const std::vector<V>& v) { return g.scale(v[0], -1.7); }, {a}});
    check_case({[](Graph& g, const std::vector<V>& v) { return g.add_scalar(v[0], 0.3); }, {a}});
    check_case({[](Graph& g, const std::vector<V>& v) { return g.relu(v[0]); }, {off}});
    check_case({[](Graph& g, const std::vector<V>& v) { return g.sigmoid(v[0]); }, {a}});
    check_case({[](Graph& g, const std::vector<V>& v) { return g.tanh_(v[0]); }, {a}});
    check_case({[](Graph& g, const std::vector<V>& v) { return g.exp_(v[0]); }, {a}});
    check_case({[](Graph& g, const std::vector<V>& v) { return g.log_(v[0]); }, {pos}});
    check_case({[](Graph& g, const std::vector<V>& v) { return g.sqrt_(v[0]); }, {pos}});
    check_case({[](Graph& g, const std::vector<V>& v) { return g.square(v[0]); }, {a}});
    check_case({[](Graph& g, const std::vector<V>& v) { return g.clamp(v[0], -0.5, 0.5); }, {off}});
  }

  TEST_CASE("emin routes gradient and matches finite differences") {
    Rng rng(14);
    Mat a = random_mat(3, 3, rng), b = random_mat(3, 3, rng);
    // move ties apart so FD is well defined
    for (int i = 0; i < a.size(); ++i)
      if (std::abs(a.data()[i] - b.data()[i]) < 0.05) b.data()[i] += 0.1;
    check_case({[](Graph& g, const std::vector<V>& v) { return g.emin(v[0], v[1]); }, {a, b}});
    // exact ties: gradient goes to the first argument
    Graph g;
    Mat t = Mat::Constant(2, 2, 0.4);
    V x = g.input(t, true), y = g.input(t, true);
    g.backward(g.sum(g.emin(x, y)));
    CHECK(g.grad(x).sum() == doctest::Approx(4.0));
    CHECK(g.grad(y).sum() == doctest::Approx(0.0));
  }

  TEST_CASE("reductions match finite differences") {
    Rng rng(15);
    const Mat a = random_mat(4, 3, rng);
    check_case({[](Graph& g, const std::vector<V>& v) { return g.sum(v[0]); }, {a}});
    check_case({[](Graph& g, const std::vector<V>& v) { return g.mean(v[0]); }, {a}});
    check_case({[](Graph& g, const std::vector<V>& v) { return g.rowsum(v[0]); }, {a}});
    check_case({[](Graph& g, const std::vector<V>& v) { return g.logsumexp_rows(v[0]); }, {a}});
  }

  TEST_CASE("indexing ops match finite differences") {
    Rng rng(16);
    const Mat a = random_mat(5, 4, rng);
    check_case({[](Graph& g, const std::vector<V>& v) {
                  return g.gather_rows(v[0], {0, 2, 2, 4});
                },
                {a}});
    check_case({[](Graph& g, const std::vector<V>& v) {
                  return g.pick_per_row(v[0], {1, 0, 3, 2, 1});
                },
                {a}});
  }

  TEST_CASE("logsumexp is numerically stable") {
    Graph g;
    Mat big(1, 3);
    big << 1000.0, 1000.0, 1000.0;
    V x = g.input(big, true);
    V y = g.logsumexp_rows(x);
    CHECK(g.val(y)(0, 0) == doctest::Approx(1000.0 + std::log(3.0)));
    g.backward(g.sum(y));
    CHECK(g.grad(x)(0, 1) == doctest::Approx(1.0 / 3.0));
  }

  TEST_CASE("grad of an untouched input is zero-shaped") {
    Graph g;
    V a = g.input(Mat::Ones(2, 2), true);
    V b = g.input(Mat::Ones(2, 2), true);
    g.backward(g.sum(g.square(a)));
    CHECK(g.grad(b).cwiseAbs().sum() == 0.0);
    CHECK(g.grad(b).rows() == 2);
  }

  TEST_CASE("backward demands a scalar loss") {
    Graph g;
    V a = g.input(Mat::Ones(2, 2), true);
    CHECK_THROWS_AS(g.backward(a), config_error);
  }

  TEST_CASE("invalid handles are rejected") {
    Graph g;
    CHECK_THROWS_AS(g.val(V{}), usage_error);
    CHECK_THROWS_AS(g.val(V{5}), usage_error);
  }
}
