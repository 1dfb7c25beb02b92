#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "telapa/common.hpp"

namespace telapa::nn {

using Mat = Eigen::MatrixXd;

// Handle into a Graph's node list.
struct V {
  int i = -1;
  bool valid() const { return i >= 0; }
};

// Dynamic reverse-mode tape over dense matrices. A Graph is built per
// training step: register inputs, compose ops, call backward() on a 1x1
// loss node, then read grad() of the parameter inputs.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  V input(Mat m, bool need_grad = false);

  const Mat& val(V v) const { return nodes_[check(v)].val; }
  // Gradient of the last backward() target w.r.t. node v (zeros if untouched).
  Mat grad(V v) const;

  void backward(V loss);

  // --- ops -----------------------------------------------------------------
  V mm(V a, V b);     // a(m,k) * b(k,n)
  V mm_nt(V a, V b);  // a(m,k) * b(n,k)^T
  V add(V a, V b);    // same shape
  V sub(V a, V b);
  V mul(V a, V b);          // elementwise
  V add_rowvec(V a, V r);   // broadcast r(1,n) over rows of a(m,n)
  V mul_colvec(V a, V c);   // scale row i of a by c(i,0)
  V div_colvec(V a, V c);   // divide row i of a by c(i,0)
  V sub_colvec(V a, V c);   // subtract c(i,0) from every entry of row i
  V scale(V a, double s);
  V add_scalar(V a, double s);
  V neg(V a) { return scale(a, -1.0); }
  V relu(V a);
  V sigmoid(V a);
  V tanh_(V a);
  V exp_(V a);
  V log_(V a);
  V sqrt_(V a);
  V square(V a);
  V clamp(V a, double lo, double hi);  // gradient passes inside [lo,hi]
  V emin(V a, V b);                    // elementwise min; ties route grad to a
  V sum(V a);      // -> 1x1
  V mean(V a);     // -> 1x1
  V rowsum(V a);   // -> m x 1
  V logsumexp_rows(V a);               // -> m x 1, numerically stable
  V gather_rows(V a, std::vector<int> idx);
  V pick_per_row(V a, std::vector<int> cols);  // -> m x 1, a(i, cols[i])

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat val;
    Mat grad;  // empty until first accumulation
    bool need_grad = false;
    std::function<void(Graph&)> back;
  };

  int check(V v) const {
    if (!v.valid() || std::size_t(v.i) >= nodes_.size())
      throw usage_error("graph: invalid node handle");
    return v.i;
  }
  V emplace(Mat val, bool need_grad, std::function<void(Graph&)> back);
  void accum(int i, const Mat& g);
  Mat& grad_ref(int i) { return nodes_[i].grad; }
  bool needs(V v) const { return nodes_[v.i].need_grad; }

  std::vector<Node> nodes_;
};

}  // namespace telapa::nn
