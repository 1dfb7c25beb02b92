#include "telapa/nets.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace telapa::nn {

static_assert(std::endian::native == std::endian::little,
              "blob serialization assumes a little-endian host");

std::size_t ParamRefs::count() const {
  std::size_t n = 0;
  for (const Mat* t : tensors) n += std::size_t(t->size());
  return n;
}

void init_dense(Dense& d, int out, int in, Rng& rng) {
  const double lim = std::sqrt(1.0 / double(in));
  d.w = Mat::NullaryExpr(out, in, [&] { return rng.uniform(-lim, lim); });
  d.b = Mat::Zero(1, out);
}

Mat orthogonal(int rows, int cols, Rng& rng) {
  const int n = std::max(rows, cols);
  Mat a = Mat::NullaryExpr(n, n, [&] { return rng.normal(); });
  Eigen::HouseholderQR<Mat> qr(a);
  Mat q = qr.householderQ();
  Mat r = qr.matrixQR().triangularView<Eigen::Upper>();
  // sign fix so the decomposition is unique
  for (int i = 0; i < n; ++i)
    if (r(i, i) < 0) q.col(i) = -q.col(i);
  return q.topLeftCorner(rows, cols);
}

void init_gru(GruParams& g, int hid, int in, Rng& rng) {
  const double lim = std::sqrt(1.0 / double(in));
  auto wmat = [&] {
    return Mat::NullaryExpr(hid, in, [&] { return rng.uniform(-lim, lim); });
  };
  g.wz = wmat();
  g.wr = wmat();
  g.wh = wmat();
  g.uz = orthogonal(hid, hid, rng);
  g.ur = orthogonal(hid, hid, rng);
  g.uh = orthogonal(hid, hid, rng);
  g.bz = Mat::Zero(1, hid);
  g.br = Mat::Zero(1, hid);
  g.bh = Mat::Zero(1, hid);
}

Eigen::VectorXd to_flat(const ParamRefs& p) {
  Eigen::VectorXd flat(p.count());
  Eigen::Index k = 0;
  for (const Mat* t : p.tensors)
    for (Eigen::Index r = 0; r < t->rows(); ++r)
      for (Eigen::Index c = 0; c < t->cols(); ++c) flat(k++) = (*t)(r, c);
  return flat;
}

void from_flat(const ParamRefs& p, const Eigen::VectorXd& flat) {
  if (std::size_t(flat.size()) != p.count())
    throw config_error("from_flat: size mismatch");
  Eigen::Index k = 0;
  for (Mat* t : p.tensors)
    for (Eigen::Index r = 0; r < t->rows(); ++r)
      for (Eigen::Index c = 0; c < t->cols(); ++c) (*t)(r, c) = flat(k++);
}

Mat gru_step(const GruParams& p, const Mat& x, const Mat& h) {
  Mat z = x * p.wz.transpose() + h * p.uz.transpose();
  z.rowwise() += p.bz.row(0);
  z = (1.0 / (1.0 + (-z.array()).exp())).matrix();
  Mat r = x * p.wr.transpose() + h * p.ur.transpose();
  r.rowwise() += p.br.row(0);
  r = (1.0 / (1.0 + (-r.array()).exp())).matrix();
  Mat c = x * p.wh.transpose() + r.cwiseProduct(h * p.uh.transpose());
  c.rowwise() += p.bh.row(0);
  c = c.array().tanh().matrix();
  return z.cwiseProduct(h) + (Mat::Ones(z.rows(), z.cols()) - z).cwiseProduct(c);
}

BoundDense bind(Graph& g, const Dense& d, bool need_grad) {
  return BoundDense{g.input(d.w, need_grad), g.input(d.b, need_grad)};
}

BoundGru bind(Graph& g, const GruParams& p, bool need_grad) {
  return BoundGru{g.input(p.wz, need_grad), g.input(p.wr, need_grad),
                  g.input(p.wh, need_grad), g.input(p.uz, need_grad),
                  g.input(p.ur, need_grad), g.input(p.uh, need_grad),
                  g.input(p.bz, need_grad), g.input(p.br, need_grad),
                  g.input(p.bh, need_grad)};
}

V gru_step(Graph& g, const BoundGru& p, V x, V h) {
  V z = g.sigmoid(g.add_rowvec(g.add(g.mm_nt(x, p.wz), g.mm_nt(h, p.uz)), p.bz));
  V r = g.sigmoid(g.add_rowvec(g.add(g.mm_nt(x, p.wr), g.mm_nt(h, p.ur)), p.br));
  V c = g.tanh_(
      g.add_rowvec(g.add(g.mm_nt(x, p.wh), g.mul(r, g.mm_nt(h, p.uh))), p.bh));
  V one_minus_z = g.add_scalar(g.neg(z), 1.0);
  return g.add(g.mul(z, h), g.mul(one_minus_z, c));
}

std::vector<Mat> grads_of(Graph& g, const std::vector<V>& handles) {
  std::vector<Mat> out;
  out.reserve(handles.size());
  for (V v : handles) out.push_back(g.grad(v));
  return out;
}

AdamState make_adam_state(const ParamRefs& p) {
  AdamState st;
  for (const Mat* t : p.tensors) {
    st.m.push_back(Mat::Zero(t->rows(), t->cols()));
    st.v.push_back(Mat::Zero(t->rows(), t->cols()));
  }
  return st;
}

void adam_step(const ParamRefs& p, const std::vector<Mat>& grads,
               AdamState& st, const AdamConfig& cfg) {
  if (grads.size() != p.tensors.size() || st.m.size() != p.tensors.size())
    throw config_error("adam_step: parameter/gradient/state count mismatch");
  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(st.t));
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    Mat& w = *p.tensors[i];
    const Mat& g = grads[i];
    if (g.rows() != w.rows() || g.cols() != w.cols())
      throw config_error("adam_step: gradient shape mismatch for " +
                         p.names[i]);
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    const Mat mhat = st.m[i] / bc1;
    const Mat vhat = st.v[i] / bc2;
    w.array() -= cfg.lr * mhat.array() / (vhat.array().sqrt() + cfg.eps);
    if (!w.allFinite())
      throw config_error("adam_step: non-finite parameter " + p.names[i]);
  }
}

double global_norm(const std::vector<Mat>& grads) {
  double sq = 0.0;
  for (const Mat& g : grads) sq += g.squaredNorm();
  return std::sqrt(sq);
}

void clip_global_norm(std::vector<Mat>& grads, double max_norm) {
  const double n = global_norm(grads);
  if (n > max_norm && n > 0.0) {
    const double s = max_norm / n;
    for (Mat& g : grads) g *= s;
  }
}

// ---------------------------------------------------------------------------
// Blob format:
//   magic "TLPB" | u32 version | u32 tensor count
//   per tensor:  u32 name length | name bytes | u64 rows | u64 cols
//   payload:     all tensors' doubles, row-major, little-endian

namespace {

constexpr char kMagic[4] = {'T', 'L', 'P', 'B'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw config_error("blob: truncated file");
  return v;
}

}  // namespace

void save_blob(const std::string& path, const ParamRefs& p) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw config_error("blob: cannot open " + path);
  f.write(kMagic, 4);
  put<std::uint32_t>(f, kVersion);
  put<std::uint32_t>(f, std::uint32_t(p.tensors.size()));
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    put<std::uint32_t>(f, std::uint32_t(p.names[i].size()));
    f.write(p.names[i].data(), std::streamsize(p.names[i].size()));
    put<std::uint64_t>(f, std::uint64_t(p.tensors[i]->rows()));
    put<std::uint64_t>(f, std::uint64_t(p.tensors[i]->cols()));
  }
  for (const Mat* t : p.tensors)
    for (Eigen::Index r = 0; r < t->rows(); ++r)
      for (Eigen::Index c = 0; c < t->cols(); ++c) {
        const double v = (*t)(r, c);
        f.write(reinterpret_cast<const char*>(&v), sizeof(double));
      }
  if (!f) throw config_error("blob: write failed for " + path);
  f.close();

  nlohmann::json man;
  man["format_version"] = kVersion;
  auto& arr = man["tensors"] = nlohmann::json::array();
  for (std::size_t i = 0; i < p.tensors.size(); ++i)
    arr.push_back({{"name", p.names[i]},
                   {"rows", p.tensors[i]->rows()},
                   {"cols", p.tensors[i]->cols()}});
  std::ofstream mf(path + ".json", std::ios::trunc);
  if (!mf) throw config_error("blob: cannot open manifest for " + path);
  mf << man.dump(2) << "\n";
}

std::vector<std::pair<std::string, Mat>> load_blob_raw(
    const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw config_error("blob: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw config_error("blob: bad magic in " + path);
  const auto version = get<std::uint32_t>(f);
  if (version != kVersion) throw config_error("blob: unsupported version");
  const auto count = get<std::uint32_t>(f);
  std::vector<std::pair<std::string, Mat>> out(count);
  for (auto& [name, t] : out) {
    const auto len = get<std::uint32_t>(f);
    name.resize(len);
    f.read(name.data(), len);
    const auto rows = get<std::uint64_t>(f);
    const auto cols = get<std::uint64_t>(f);
    if (!f) throw config_error("blob: truncated shape table");
    t.resize(Eigen::Index(rows), Eigen::Index(cols));
  }
  for (auto& [name, t] : out)
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = get<double>(f);
  return out;
}

void load_blob(const std::string& path, const ParamRefs& p) {
  auto raw = load_blob_raw(path);
  if (raw.size() != p.tensors.size())
    throw config_error("blob: tensor count mismatch in " + path);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i].first != p.names[i])
      throw config_error("blob: tensor name mismatch: expected " + p.names[i] +
                         ", found " + raw[i].first);
    if (raw[i].second.rows() != p.tensors[i]->rows() ||
        raw[i].second.cols() != p.tensors[i]->cols())
      throw config_error("blob: shape mismatch for " + p.names[i]);
    *p.tensors[i] = raw[i].second;
  }
}

}  // namespace telapa::nn
