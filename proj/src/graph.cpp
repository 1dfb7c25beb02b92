#include "telapa/graph.hpp"

namespace telapa::nn {

namespace {
void require(bool ok, const char* msg) {
  if (!ok) throw config_error(std::string("graph: ") + msg);
}
}  // namespace

V Graph::input(Mat m, bool need_grad) {
  return emplace(std::move(m), need_grad, nullptr);
}

Mat Graph::grad(V v) const {
  const int i = check(v);
  if (nodes_[i].grad.size() == 0)
    return Mat::Zero(nodes_[i].val.rows(), nodes_[i].val.cols());
  return nodes_[i].grad;
}

V Graph::emplace(Mat val, bool need_grad, std::function<void(Graph&)> back) {
  nodes_.push_back(Node{std::move(val), Mat(), need_grad,
                        need_grad ? std::move(back) : nullptr});
  return V{int(nodes_.size()) - 1};
}

void Graph::accum(int i, const Mat& g) {
  Node& n = nodes_[i];
  if (!n.need_grad) return;
  if (n.grad.size() == 0)
    n.grad = g;
  else
    n.grad += g;
}

void Graph::backward(V loss) {
  const int li = check(loss);
  require(nodes_[li].val.rows() == 1 && nodes_[li].val.cols() == 1,
          "backward target must be 1x1");
  nodes_[li].grad = Mat::Ones(1, 1);
  for (int i = li; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.grad.size() != 0 && n.back) n.back(*this);
  }
}

V Graph::mm(V a, V b) {
  const Mat& A = val(a);
  const Mat& B = val(b);
  require(A.cols() == B.rows(), "mm: inner dimensions differ");
  const bool ng = needs(a) || needs(b);
  const int ai = a.i, bi = b.i;
  V out = emplace(A * B, ng, nullptr);
  const int oi = out.i;
  if (ng)
    nodes_[oi].back = [ai, bi, oi](Graph& g) {
      const Mat& go = g.grad_ref(oi);
      g.accum(ai, go * g.nodes_[bi].val.transpose());
      g.accum(bi, g.nodes_[ai].val.transpose() * go);
    };
  return out;
}

V Graph::mm_nt(V a, V b) {
  const Mat& A = val(a);
  const Mat& B = val(b);
  require(A.cols() == B.cols(), "mm_nt: inner dimensions differ");
  const bool ng = needs(a) || needs(b);
  const int ai = a.i, bi = b.i;
  V out = emplace(A * B.transpose(), ng, nullptr);
  const int oi = out.i;
  if (ng)
    nodes_[oi].back = [ai, bi, oi](Graph& g) {
      const Mat& go = g.grad_ref(oi);
      g.accum(ai, go * g.nodes_[bi].val);
      g.accum(bi, go.transpose() * g.nodes_[ai].val);
    };
  return out;
}

V Graph::add(V a, V b) {
  const Mat& A = val(a);
  const Mat& B = val(b);
  require(A.rows() == B.rows() && A.cols() == B.cols(), "add: shape mismatch");
  const bool ng = needs(a) || needs(b);
  const int ai = a.i, bi = b.i;
  V out = emplace(A + B, ng, nullptr);
  const int oi = out.i;
  if (ng)
    nodes_[oi].back = [ai, bi, oi](Graph& g) {
      g.accum(ai, g.grad_ref(oi));
      g.accum(bi, g.grad_ref(oi));
    };
  return out;
}

V Graph::sub(V a, V b) {
  const Mat& A = val(a);
  const Mat& B = val(b);
  require(A.rows() == B.rows() && A.cols() == B.cols(), "sub: shape mismatch");
  const bool ng = needs(a) || needs(b);
  const int ai = a.i, bi = b.i;
  V out = emplace(A - B, ng, nullptr);
  const int oi = out.i;
  if (ng)
    nodes_[oi].back = [ai, bi, oi](Graph& g) {
      g.accum(ai, g.grad_ref(oi));
      g.accum(bi, -g.grad_ref(oi));
    };
  return out;
}

V Graph::mul(V a, V b) {
  const Mat& A = val(a);
  const Mat& B = val(b);
  require(A.rows() == B.rows() && A.cols() == B.cols(), "mul: shape mismatch");
  const bool ng = needs(a) || needs(b);
  const int ai = a.i, bi = b.i;
  V out = emplace(A.cwiseProduct(B), ng, nullptr);
  const int oi = out.i;
  if (ng)
    nodes_[oi].back = [ai, bi, oi](Graph& g) {
      const Mat& go = g.grad_ref(oi);
      g.accum(ai, go.cwiseProduct(g.nodes_[bi].val));
      g.accum(bi, go.cwiseProduct(g.nodes_[ai].val));
    };
  return out;
}

V Graph::add_rowvec(V a, V r) {
  const Mat& A = val(a);
  const Mat& R = val(r);
  require(R.rows() == 1 && R.cols() == A.cols(), "add_rowvec: shape mismatch");
  const bool ng = needs(a) || needs(r);
  const int ai = a.i, ri = r.i;
  Mat out = A;
  out.rowwise() += R.row(0);
  V o = emplace(std::move(out), ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, ri, oi](Graph& g) {
      const Mat& go = g.grad_ref(oi);
      g.accum(ai, go);
      g.accum(ri, go.colwise().sum());
    };
  return o;
}

V Graph::mul_colvec(V a, V c) {
  const Mat& A = val(a);
  const Mat& C = val(c);
  require(C.cols() == 1 && C.rows() == A.rows(), "mul_colvec: shape mismatch");
  const bool ng = needs(a) || needs(c);
  const int ai = a.i, ci = c.i;
  V o = emplace(A.array().colwise() * C.col(0).array(), ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, ci, oi](Graph& g) {
      const Mat& go = g.grad_ref(oi);
      const Mat& A_ = g.nodes_[ai].val;
      const Mat& C_ = g.nodes_[ci].val;
      g.accum(ai, go.array().colwise() * C_.col(0).array());
      g.accum(ci, go.cwiseProduct(A_).rowwise().sum());
    };
  return o;
}

V Graph::div_colvec(V a, V c) {
  const Mat& A = val(a);
  const Mat& C = val(c);
  require(C.cols() == 1 && C.rows() == A.rows(), "div_colvec: shape mismatch");
  const bool ng = needs(a) || needs(c);
  const int ai = a.i, ci = c.i;
  V o = emplace(A.array().colwise() / C.col(0).array(), ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, ci, oi](Graph& g) {
      const Mat& go = g.grad_ref(oi);
      const Mat& A_ = g.nodes_[ai].val;
      const auto c_ = g.nodes_[ci].val.col(0).array();
      g.accum(ai, go.array().colwise() / c_);
      g.accum(ci, -(go.cwiseProduct(A_).rowwise().sum().array() / (c_ * c_))
                       .matrix());
    };
  return o;
}

V Graph::sub_colvec(V a, V c) {
  const Mat& A = val(a);
  const Mat& C = val(c);
  require(C.cols() == 1 && C.rows() == A.rows(), "sub_colvec: shape mismatch");
  const bool ng = needs(a) || needs(c);
  const int ai = a.i, ci = c.i;
  V o = emplace((A.array().colwise() - C.col(0).array()).matrix(), ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, ci, oi](Graph& g) {
      const Mat& go = g.grad_ref(oi);
      g.accum(ai, go);
      g.accum(ci, -go.rowwise().sum());
    };
  return o;
}

V Graph::scale(V a, double s) {
  const bool ng = needs(a);
  const int ai = a.i;
  V o = emplace(val(a) * s, ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, oi, s](Graph& g) { g.accum(ai, g.grad_ref(oi) * s); };
  return o;
}

V Graph::add_scalar(V a, double s) {
  const bool ng = needs(a);
  const int ai = a.i;
  V o = emplace(val(a).array() + s, ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, oi](Graph& g) { g.accum(ai, g.grad_ref(oi)); };
  return o;
}

V Graph::relu(V a) {
  const bool ng = needs(a);
  const int ai = a.i;
  V o = emplace(val(a).cwiseMax(0.0), ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, oi](Graph& g) {
      const Mat mask =
          (g.nodes_[ai].val.array() > 0.0).cast<double>().matrix();
      g.accum(ai, g.grad_ref(oi).cwiseProduct(mask));
    };
  return o;
}

V Graph::sigmoid(V a) {
  const bool ng = needs(a);
  const int ai = a.i;
  V o = emplace((1.0 / (1.0 + (-val(a).array()).exp())).matrix(), ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, oi](Graph& g) {
      const auto s = g.nodes_[oi].val.array();
      g.accum(ai, (g.grad_ref(oi).array() * s * (1.0 - s)).matrix());
    };
  return o;
}

V Graph::tanh_(V a) {
  const bool ng = needs(a);
  const int ai = a.i;
  V o = emplace(val(a).array().tanh().matrix(), ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, oi](Graph& g) {
      const auto t = g.nodes_[oi].val.array();
      g.accum(ai, (g.grad_ref(oi).array() * (1.0 - t * t)).matrix());
    };
  return o;
}

V Graph::exp_(V a) {
  const bool ng = needs(a);
  const int ai = a.i;
  V o = emplace(val(a).array().exp().matrix(), ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, oi](Graph& g) {
      g.accum(ai, g.grad_ref(oi).cwiseProduct(g.nodes_[oi].val));
    };
  return o;
}

V Graph::log_(V a) {
  const bool ng = needs(a);
  const int ai = a.i;
  V o = emplace(val(a).array().log().matrix(), ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, oi](Graph& g) {
      g.accum(ai, g.grad_ref(oi).cwiseQuotient(g.nodes_[ai].val));
    };
  return o;
}

V Graph::sqrt_(V a) {
  const bool ng = needs(a);
  const int ai = a.i;
  V o = emplace(val(a).array().sqrt().matrix(), ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, oi](Graph& g) {
      g.accum(ai, (g.grad_ref(oi).array() / (2.0 * g.nodes_[oi].val.array()))
                      .matrix());
    };
  return o;
}

V Graph::square(V a) {
  const bool ng = needs(a);
  const int ai = a.i;
  V o = emplace(val(a).array().square().matrix(), ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, oi](Graph& g) {
      g.accum(ai, 2.0 * g.grad_ref(oi).cwiseProduct(g.nodes_[ai].val));
    };
  return o;
}

V Graph::clamp(V a, double lo, double hi) {
  const bool ng = needs(a);
  const int ai = a.i;
  V o = emplace(val(a).cwiseMax(lo).cwiseMin(hi), ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, oi, lo, hi](Graph& g) {
      const auto x = g.nodes_[ai].val.array();
      const Mat mask = ((x >= lo) && (x <= hi)).cast<double>().matrix();
      g.accum(ai, g.grad_ref(oi).cwiseProduct(mask));
    };
  return o;
}

V Graph::emin(V a, V b) {
  const Mat& A = val(a);
  const Mat& B = val(b);
  require(A.rows() == B.rows() && A.cols() == B.cols(), "emin: shape mismatch");
  const bool ng = needs(a) || needs(b);
  const int ai = a.i, bi = b.i;
  V o = emplace(A.cwiseMin(B), ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, bi, oi](Graph& g) {
      const auto& A_ = g.nodes_[ai].val.array();
      const auto& B_ = g.nodes_[bi].val.array();
      const Mat amask = (A_ <= B_).cast<double>().matrix();
      const Mat& go = g.grad_ref(oi);
      g.accum(ai, go.cwiseProduct(amask));
      g.accum(bi, go - go.cwiseProduct(amask));
    };
  return o;
}

V Graph::sum(V a) {
  const bool ng = needs(a);
  const int ai = a.i;
  Mat s(1, 1);
  s(0, 0) = val(a).sum();
  V o = emplace(std::move(s), ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, oi](Graph& g) {
      const Mat& A_ = g.nodes_[ai].val;
      g.accum(ai, Mat::Constant(A_.rows(), A_.cols(), g.grad_ref(oi)(0, 0)));
    };
  return o;
}

V Graph::mean(V a) {
  const double n = double(val(a).size());
  return scale(sum(a), 1.0 / n);
}

V Graph::rowsum(V a) {
  const bool ng = needs(a);
  const int ai = a.i;
  V o = emplace(val(a).rowwise().sum(), ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, oi](Graph& g) {
      const Mat& go = g.grad_ref(oi);
      const Mat& A_ = g.nodes_[ai].val;
      g.accum(ai, go.col(0).replicate(1, A_.cols()));
    };
  return o;
}

V Graph::logsumexp_rows(V a) {
  const Mat& A = val(a);
  const bool ng = needs(a);
  const int ai = a.i;
  Mat m = A.rowwise().maxCoeff();
  Mat lse =
      ((A.colwise() - m.col(0)).array().exp().rowwise().sum().log() +
       m.col(0).array())
          .matrix();
  V o = emplace(std::move(lse), ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, oi](Graph& g) {
      const Mat& A_ = g.nodes_[ai].val;
      const Mat& L = g.nodes_[oi].val;  // m x 1
      const Mat soft = (A_.colwise() - L.col(0)).array().exp().matrix();
      g.accum(ai, soft.array().colwise() * g.grad_ref(oi).col(0).array());
    };
  return o;
}

V Graph::gather_rows(V a, std::vector<int> idx) {
  const Mat& A = val(a);
  for (int r : idx)
    require(r >= 0 && r < A.rows(), "gather_rows: index out of range");
  const bool ng = needs(a);
  const int ai = a.i;
  Mat out(idx.size(), A.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) out.row(k) = A.row(idx[k]);
  V o = emplace(std::move(out), ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, oi, idx = std::move(idx)](Graph& g) {
      const Mat& go = g.grad_ref(oi);
      Mat ga = Mat::Zero(g.nodes_[ai].val.rows(), g.nodes_[ai].val.cols());
      for (std::size_t k = 0; k < idx.size(); ++k) ga.row(idx[k]) += go.row(k);
      g.accum(ai, ga);
    };
  return o;
}

V Graph::pick_per_row(V a, std::vector<int> cols) {
  const Mat& A = val(a);
  require(int(cols.size()) == A.rows(), "pick_per_row: one column per row");
  for (int c : cols)
    require(c >= 0 && c < A.cols(), "pick_per_row: column out of range");
  const bool ng = needs(a);
  const int ai = a.i;
  Mat out(A.rows(), 1);
  for (int r = 0; r < A.rows(); ++r) out(r, 0) = A(r, cols[r]);
  V o = emplace(std::move(out), ng, nullptr);
  const int oi = o.i;
  if (ng)
    nodes_[oi].back = [ai, oi, cols = std::move(cols)](Graph& g) {
      const Mat& go = g.grad_ref(oi);
      Mat ga = Mat::Zero(g.nodes_[ai].val.rows(), g.nodes_[ai].val.cols());
      for (int r = 0; r < ga.rows(); ++r) ga(r, cols[r]) += go(r, 0);
      g.accum(ai, ga);
    };
  return o;
}

}  // namespace telapa::nn
