#pragma once

#include <string>
#include <vector>

#include "telapa/graph.hpp"

namespace telapa::nn {

// ---------------------------------------------------------------------------
// Parameter containers

struct Dense {
  Mat w;  // (out, in)
  Mat b;  // (1, out)
};

struct GruParams {
  Mat wz, wr, wh;  // input-path gate weights, each (hid, in)
  Mat uz, ur, uh;  // hidden-path gate weights, each (hid, hid)
  Mat bz, br, bh;  // gate biases, each (1, hid)
};

// Named, ordered view over a set of parameter matrices. The order defines
// the layout used by the optimizer, mutation, and serialization.
struct ParamRefs {
  std::vector<std::string> names;
  std::vector<Mat*> tensors;

  void add(std::string name, Mat& t) {
    names.push_back(std::move(name));
    tensors.push_back(&t);
  }
  void add_dense(const std::string& prefix, Dense& d) {
    add(prefix + "/w", d.w);
    add(prefix + "/b", d.b);
  }
  void add_gru(const std::string& prefix, GruParams& g) {
    add(prefix + "/wz", g.wz);
    add(prefix + "/wr", g.wr);
    add(prefix + "/wh", g.wh);
    add(prefix + "/uz", g.uz);
    add(prefix + "/ur", g.ur);
    add(prefix + "/uh", g.uh);
    add(prefix + "/bz", g.bz);
    add(prefix + "/br", g.br);
    add(prefix + "/bh", g.bh);
  }
  std::size_t count() const;  // total scalar parameters
};

// ---------------------------------------------------------------------------
// Initialization

// Scaled-uniform U(-sqrt(1/in), sqrt(1/in)) weights, zero bias.
void init_dense(Dense& d, int out, int in, Rng& rng);
// Input paths scaled-uniform, recurrent paths orthogonal, zero biases.
void init_gru(GruParams& g, int hid, int in, Rng& rng);
Mat orthogonal(int rows, int cols, Rng& rng);

// ---------------------------------------------------------------------------
// Flat-vector views (finite-difference checks, mutation)

Eigen::VectorXd to_flat(const ParamRefs& p);
void from_flat(const ParamRefs& p, const Eigen::VectorXd& flat);

// ---------------------------------------------------------------------------
// Plain (tape-free) forward passes

inline Mat dense_fwd(const Dense& d, const Mat& x) {
  Mat y = x * d.w.transpose();
  y.rowwise() += d.b.row(0);
  return y;
}

// One GRU step: h' = z.*h + (1-z).*tanh(Wh x + r.*(Uh h) + bh)
Mat gru_step(const GruParams& p, const Mat& x, const Mat& h);

// ---------------------------------------------------------------------------
// Tape-bound forward passes

struct BoundDense {
  V w, b;
};
struct BoundGru {
  V wz, wr, wh, uz, ur, uh, bz, br, bh;
};

BoundDense bind(Graph& g, const Dense& d, bool need_grad = true);
BoundGru bind(Graph& g, const GruParams& p, bool need_grad = true);

inline V dense_fwd(Graph& g, const BoundDense& d, V x) {
  return g.add_rowvec(g.mm_nt(x, d.w), d.b);
}
V gru_step(Graph& g, const BoundGru& p, V x, V h);

// Gradients of the bound parameters, in ParamRefs order.
std::vector<Mat> grads_of(Graph& g, const std::vector<V>& handles);

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Mat> m, v;
  long t = 0;
};

AdamState make_adam_state(const ParamRefs& p);
// In-place update; throws config_error if any parameter becomes non-finite.
void adam_step(const ParamRefs& p, const std::vector<Mat>& grads,
               AdamState& st, const AdamConfig& cfg);

double global_norm(const std::vector<Mat>& grads);
void clip_global_norm(std::vector<Mat>& grads, double max_norm);

// ---------------------------------------------------------------------------
// Serialization: versioned binary blob (magic, shape table, little-endian
// f64 payload, row-major) plus a JSON manifest sidecar at <path>.json.
// Round-trips are bit-exact.

void save_blob(const std::string& path, const ParamRefs& p);
// Loads into pre-shaped tensors; throws config_error on any mismatch.
void load_blob(const std::string& path, const ParamRefs& p);
// Load raw (name, tensor) pairs without a pre-shaped destination.
std::vector<std::pair<std::string, Mat>> load_blob_raw(const std::string& path);

}  // namespace telapa::nn
