#include "telapa/embedder.hpp"

#include <fstream>

#include <json.hpp>

namespace telapa {

using nn::Graph;
using nn::Mat;
using nn::V;

nn::ParamRefs EncoderParams::refs() {
  nn::ParamRefs r;
  r.add_dense("step1", step1);
  r.add_dense("step2", step2);
  r.add_gru("gru", gru);
  r.add_dense("proj1", proj1);
  r.add_dense("proj2", proj2);
  return r;
}

EncoderParams init_encoder(const EmbedderConfig& cfg, Rng& rng) {
  EncoderParams e;
  nn::init_dense(e.step1, cfg.mlp_hidden, cfg.feat_dim, rng);
  nn::init_dense(e.step2, cfg.mlp_hidden, cfg.mlp_hidden, rng);
  nn::init_gru(e.gru, cfg.gru_hidden, cfg.mlp_hidden, rng);
  nn::init_dense(e.proj1, cfg.proj_hidden, cfg.gru_hidden, rng);
  nn::init_dense(e.proj2, cfg.latent_dim, cfg.proj_hidden, rng);
  return e;
}

EmbeddingState make_embedding_state(const EmbedderConfig& cfg, Rng& rng) {
  EmbeddingState st;
  st.cfg = cfg;
  st.enc = init_encoder(cfg, rng);
  st.version = 0;
  return st;
}

Eigen::VectorXd normalize(const EmbeddingState& state,
                          const Eigen::VectorXd& z) {
  if (!state.norm) throw usage_error("normalize: no fitted normalizer");
  return state.norm->normalize(z);
}

// ---------------------------------------------------------------------------
// Plain batched forward

namespace {

// gathers the batch's step-t feature rows and validity mask
void step_inputs(const std::vector<const Episode*>& eps,
                 const std::vector<int>& lens, int t, Mat& x,
                 Eigen::VectorXd& mask) {
  const int b = int(eps.size());
  x.setZero(b, kFeatureDim);
  mask.setZero(b);
  for (int i = 0; i < b; ++i)
    if (t < lens[i]) {
      x.row(i) = eps[std::size_t(i)]->features.row(t);
      mask(i) = 1.0;
    }
}

std::vector<int> clipped_lengths(const std::vector<const Episode*>& eps,
                                 int t_max) {
  std::vector<int> lens;
  lens.reserve(eps.size());
  for (const Episode* e : eps) {
    if (e->features.rows() < 1)
      throw config_error("encode: episode with no steps");
    if (e->features.cols() != kFeatureDim)
      throw config_error("encode: feature dimension mismatch");
    lens.push_back(int(std::min<Eigen::Index>(e->features.rows(), t_max)));
  }
  return lens;
}

Mat relu(Mat m) { return m.cwiseMax(0.0); }

Mat project(const EncoderParams& enc, const Mat& h) {
  return nn::dense_fwd(enc.proj2, relu(nn::dense_fwd(enc.proj1, h)));
}

}  // namespace

nn::Mat encode_batch(const EncoderParams& enc, const EmbedderConfig& cfg,
                     const std::vector<const Episode*>& eps) {
  if (eps.empty()) throw config_error("encode_batch: empty batch");
  const auto lens = clipped_lengths(eps, cfg.t_max);
  const int b = int(eps.size());
  const int t_end = *std::max_element(lens.begin(), lens.end());
  Mat h = Mat::Zero(b, cfg.gru_hidden);
  Mat x;
  Eigen::VectorXd mask;
  for (int t = 0; t < t_end; ++t) {
    step_inputs(eps, lens, t, x, mask);
    const Mat e = relu(nn::dense_fwd(enc.step2, relu(nn::dense_fwd(enc.step1, x))));
    const Mat hn = nn::gru_step(enc.gru, e, h);
    h = (hn.array().colwise() * mask.array() +
         h.array().colwise() * (1.0 - mask.array()))
            .matrix();
  }
  return project(enc, h);
}

Eigen::VectorXd encode_episode(const EncoderParams& enc,
                               const EmbedderConfig& cfg, const Episode& ep) {
  return encode_batch(enc, cfg, {&ep}).row(0).transpose();
}

LatentSummary summarize_policy(const EncoderParams& enc,
                               const EmbedderConfig& cfg,
                               const EpisodeSet& set) {
  if (set.episodes.empty())
    throw config_error("summarize_policy: empty episode set");
  std::vector<const Episode*> eps;
  for (const Episode& e : set.episodes) eps.push_back(&e);
  const auto lens = clipped_lengths(eps, cfg.t_max);
  const int b = int(eps.size());
  const int t_end = *std::max_element(lens.begin(), lens.end());
  const int d = cfg.latent_dim;

  Mat h = Mat::Zero(b, cfg.gru_hidden);
  Mat sum = Mat::Zero(b, d), sumsq = Mat::Zero(b, d);
  Mat x;
  Eigen::VectorXd mask;
  for (int t = 0; t < t_end; ++t) {
    step_inputs(eps, lens, t, x, mask);
    const Mat e = relu(nn::dense_fwd(enc.step2, relu(nn::dense_fwd(enc.step1, x))));
    const Mat hn = nn::gru_step(enc.gru, e, h);
    h = (hn.array().colwise() * mask.array() +
         h.array().colwise() * (1.0 - mask.array()))
            .matrix();
    const Mat p = project(enc, h);
    for (int i = 0; i < b; ++i)
      if (t < lens[i]) {
        sum.row(i) += p.row(i);
        sumsq.row(i) += p.row(i).cwiseProduct(p.row(i));
      }
  }
  const Mat z = project(enc, h);  // final latent per episode

  LatentSummary s;
  s.z_mean = z.colwise().mean().transpose();
  Eigen::VectorXd var =
      (z.rowwise() - s.z_mean.transpose()).array().square().colwise().mean();
  s.z_std_ep = var.cwiseMax(0.0).cwiseSqrt();
  s.z_std_time = Eigen::VectorXd::Zero(d);
  for (int i = 0; i < b; ++i) {
    const double n = double(lens[i]);
    const Eigen::VectorXd m = sum.row(i).transpose() / n;
    const Eigen::VectorXd v =
        (sumsq.row(i).transpose() / n - m.cwiseProduct(m)).cwiseMax(0.0);
    s.z_std_time += v.cwiseSqrt();
  }
  s.z_std_time /= double(b);
  return s;
}

Eigen::VectorXd raw_set_descriptor(const EncoderParams& enc,
                                   const EmbedderConfig& cfg,
                                   const EpisodeSet& set) {
  if (set.episodes.empty())
    throw config_error("raw_set_descriptor: empty episode set");
  std::vector<const Episode*> eps;
  for (const Episode& e : set.episodes) eps.push_back(&e);
  return encode_batch(enc, cfg, eps).colwise().mean().transpose();
}

// ---------------------------------------------------------------------------
// Stochastic views

Episode augment(const Episode& ep, const EmbedderConfig& cfg, Rng& rng) {
  const auto T = ep.features.rows();
  if (T < 1) throw usage_error("augment: episode with no steps");
  const auto lmin = std::max<Eigen::Index>(
      1, Eigen::Index(std::floor(cfg.crop_rho * double(T))));
  const auto len = lmin + Eigen::Index(rng.randint(std::uint64_t(T - lmin + 1)));
  const auto start = Eigen::Index(rng.randint(std::uint64_t(T - len + 1)));

  Episode out = ep;
  out.features = ep.features.middleRows(start, len);
  for (int c = 0; c < kFeatureDim; ++c)
    if (rng.uniform() < cfg.channel_dropout) out.features.col(c).setZero();
  if (cfg.noise_sigma > 0.0)
    for (Eigen::Index r = 0; r < out.features.rows(); ++r)
      for (int c = 0; c < kFeatureDim; ++c)
        out.features(r, c) += cfg.noise_sigma * rng.normal();
  return out;
}

// ---------------------------------------------------------------------------
// Losses (tape builders + plain wrappers)

namespace {

// row-normalize with zero-norm guard; also returns the norms
std::pair<V, V> normalize_rows_tape(Graph& g, V z, double eps) {
  V norms = g.sqrt_(g.rowsum(g.square(z)));
  return {g.div_colvec(z, g.add_scalar(norms, eps)), norms};
}

V infonce_tape(Graph& g, V z1, V z2, double tau, double eps) {
  const int b = int(g.val(z1).rows());
  auto [n1, u1] = normalize_rows_tape(g, z1, eps);
  auto [n2, u2] = normalize_rows_tape(g, z2, eps);
  (void)u1;
  (void)u2;
  std::vector<int> diag_idx((std::size_t)b);
  for (int i = 0; i < b; ++i) diag_idx[std::size_t(i)] = i;
  V s12 = g.scale(g.mm_nt(n1, n2), 1.0 / tau);
  V s21 = g.scale(g.mm_nt(n2, n1), 1.0 / tau);
  V row = g.mean(g.sub(g.logsumexp_rows(s12), g.pick_per_row(s12, diag_idx)));
  V col = g.mean(g.sub(g.logsumexp_rows(s21), g.pick_per_row(s21, diag_idx)));
  return g.scale(g.add(row, col), 0.5);
}

V distill_tape(Graph& g, V z_student, const Mat& teacher, double lambda_norm,
               double eps) {
  auto [sn, s_norms] = normalize_rows_tape(g, z_student, eps);
  Eigen::VectorXd t_norms = teacher.rowwise().norm();
  Mat t_dir = teacher.array().colwise() / (t_norms.array() + eps);
  V dir = g.mean(g.square(g.sub(sn, g.input(t_dir))));
  V scale = g.mean(g.square(g.sub(s_norms, g.input(Mat(t_norms)))));
  return g.add(dir, g.scale(scale, lambda_norm));
}

}  // namespace

double contrastive_loss(const Mat& z1, const Mat& z2, double tau, double eps) {
  if (z1.rows() == 0) throw config_error("contrastive_loss: empty batch");
  if (z1.rows() != z2.rows() || z1.cols() != z2.cols())
    throw config_error("contrastive_loss: mismatched view batches");
  Graph g;
  return g.val(infonce_tape(g, g.input(z1), g.input(z2), tau, eps))(0, 0);
}

double distill_loss(const Mat& z_student, const Mat& z_teacher,
                    double lambda_norm, double eps) {
  if (z_student.rows() != z_teacher.rows() ||
      z_student.cols() != z_teacher.cols())
    throw config_error("distill_loss: mismatched student/teacher batches");
  if (z_student.rows() == 0) return 0.0;
  Graph g;
  return g.val(
      distill_tape(g, g.input(z_student), z_teacher, lambda_norm, eps))(0, 0);
}

// ---------------------------------------------------------------------------
// Tape-bound encoder forward (mirrors encode_batch exactly)

namespace {

struct TapeEncoder {
  nn::BoundDense s1, s2, p1, p2;
  nn::BoundGru gru;
  std::vector<V> handles;  // same order as EncoderParams::refs()
};

TapeEncoder bind_encoder(Graph& g, EncoderParams& enc) {
  TapeEncoder te;
  te.s1 = nn::bind(g, enc.step1);
  te.s2 = nn::bind(g, enc.step2);
  te.gru = nn::bind(g, enc.gru);
  te.p1 = nn::bind(g, enc.proj1);
  te.p2 = nn::bind(g, enc.proj2);
  te.handles = {te.s1.w,  te.s1.b,  te.s2.w,  te.s2.b,  te.gru.wz,
                te.gru.wr, te.gru.wh, te.gru.uz, te.gru.ur, te.gru.uh,
                te.gru.bz, te.gru.br, te.gru.bh, te.p1.w,  te.p1.b,
                te.p2.w,  te.p2.b};
  return te;
}

V encode_batch_tape(Graph& g, const TapeEncoder& te, const EmbedderConfig& cfg,
                    const std::vector<const Episode*>& eps) {
  const auto lens = clipped_lengths(eps, cfg.t_max);
  const int b = int(eps.size());
  const int t_end = *std::max_element(lens.begin(), lens.end());
  V h = g.input(Mat::Zero(b, cfg.gru_hidden));
  Mat x;
  Eigen::VectorXd mask;
  for (int t = 0; t < t_end; ++t) {
    step_inputs(eps, lens, t, x, mask);
    V xi = g.input(x);
    V e = g.relu(dense_fwd(g, te.s2, g.relu(dense_fwd(g, te.s1, xi))));
    V hn = gru_step(g, te.gru, e, h);
    V m = g.input(Mat(mask));
    V m1 = g.input(Mat((1.0 - mask.array()).matrix()));
    h = g.add(g.mul_colvec(hn, m), g.mul_colvec(h, m1));
  }
  return dense_fwd(g, te.p2, g.relu(dense_fwd(g, te.p1, h)));
}

}  // namespace

// ---------------------------------------------------------------------------
// Boundary training

BoundaryLosses boundary_train(EmbeddingState& state,
                              const std::vector<const EpisodeSet*>& anchors,
                              const std::vector<const EpisodeSet*>& replay,
                              Rng& rng) {
  const EmbedderConfig& cfg = state.cfg;
  BoundaryLosses out;
  if (cfg.steps <= 0) return out;
  if (anchors.empty() && replay.empty())
    throw config_error("boundary_train: no episode sets supplied");

  const EncoderParams teacher = state.enc;  // frozen snapshot
  nn::ParamRefs params = state.enc.refs();
  nn::AdamState opt = nn::make_adam_state(params);
  nn::AdamConfig opt_cfg;
  opt_cfg.lr = cfg.lr;

  const int b = cfg.batch;
  int n_anchor = 0;
  if (!anchors.empty()) {
    n_anchor = std::max(int(std::lround(cfg.anchor_fraction * b)),
                        cfg.min_anchor_rows);
    n_anchor = std::min(n_anchor, b);
  }
  if (replay.empty()) n_anchor = b;

  for (int k = 0; k < cfg.steps; ++k) {
    // one episode from each sampled set; anchor rows lead the batch
    std::vector<Episode> originals, v1, v2;
    originals.reserve(std::size_t(b));
    for (int i = 0; i < b; ++i) {
      const EpisodeSet* set =
          i < n_anchor ? anchors[rng.randint(anchors.size())]
                       : replay[rng.randint(replay.size())];
      const Episode& ep =
          set->episodes[rng.randint(set->episodes.size())];
      originals.push_back(ep);
      v1.push_back(augment(ep, cfg, rng));
      v2.push_back(augment(ep, cfg, rng));
    }

    Graph g;
    TapeEncoder te = bind_encoder(g, state.enc);
    std::vector<const Episode*> p1, p2, pa;
    for (int i = 0; i < b; ++i) {
      p1.push_back(&v1[std::size_t(i)]);
      p2.push_back(&v2[std::size_t(i)]);
    }
    for (int i = 0; i < n_anchor; ++i) pa.push_back(&originals[std::size_t(i)]);

    V z1 = encode_batch_tape(g, te, cfg, p1);
    V z2 = encode_batch_tape(g, te, cfg, p2);
    V l_contrast = infonce_tape(g, z1, z2, cfg.tau, cfg.infonce_eps);

    V loss = g.scale(l_contrast, cfg.w_contrast);
    double distill_val = 0.0;
    if (!pa.empty() && cfg.w_distill != 0.0) {
      const Mat zt = encode_batch(teacher, cfg, pa);
      V zs = encode_batch_tape(g, te, cfg, pa);
      V l_distill = distill_tape(g, zs, zt, cfg.lambda_norm, cfg.infonce_eps);
      distill_val = g.val(l_distill)(0, 0);
      loss = g.add(loss, g.scale(l_distill, cfg.w_distill));
    }

    g.backward(loss);
    auto grads = nn::grads_of(g, te.handles);
    nn::clip_global_norm(grads, cfg.grad_clip);
    nn::adam_step(params, grads, opt, opt_cfg);

    out.contrast.push_back(g.val(l_contrast)(0, 0));
    out.distill.push_back(distill_val);
    out.total.push_back(g.val(loss)(0, 0));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalizer fitting

Normalizer fit_normalizer(const std::vector<Eigen::VectorXd>& descriptors,
                          const EmbedderConfig& cfg) {
  if (descriptors.size() < 2)
    throw config_error("fit_normalizer: fewer than 2 valid episode sets");
  const int d = int(descriptors.front().size());
  for (const Eigen::VectorXd& z : descriptors)
    if (int(z.size()) != d)
      throw config_error("fit_normalizer: descriptor dimension mismatch");
  Normalizer n;
  n.mu.resize(d);
  n.sigma.resize(d);
  n.eps = cfg.norm_eps;
  n.fit_bank_size = int(descriptors.size());
  std::vector<double> col(descriptors.size());
  for (int j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < descriptors.size(); ++i) col[i] = descriptors[i](j);
    n.mu(j) = quantile(col, 0.5);
    const double iqr = quantile(col, 0.75) - quantile(col, 0.25);
    n.sigma(j) = std::max(iqr / 1.349, cfg.sigma_min);
  }
  return n;
}

Normalizer fit_normalizer(const EncoderParams& enc, const EmbedderConfig& cfg,
                          const std::vector<const EpisodeSet*>& bank) {
  std::vector<Eigen::VectorXd> descriptors;
  for (const EpisodeSet* set : bank) {
    if (!set || set->episodes.empty()) continue;
    Eigen::VectorXd z = raw_set_descriptor(enc, cfg, *set);
    if (z.allFinite()) descriptors.push_back(std::move(z));
  }
  return fit_normalizer(descriptors, cfg);
}

// ---------------------------------------------------------------------------
// Serialization: parameter blob + JSON sidecar

void save_embedding_state(const std::string& path_prefix,
                          const EmbeddingState& state) {
  EncoderParams copy = state.enc;
  nn::save_blob(path_prefix + ".bin", copy.refs());
  nlohmann::json j;
  j["version"] = state.version;
  if (state.norm) {
    j["normalizer"] = {
        {"mu", std::vector<double>(state.norm->mu.data(),
                                   state.norm->mu.data() + state.norm->mu.size())},
        {"sigma",
         std::vector<double>(state.norm->sigma.data(),
                             state.norm->sigma.data() + state.norm->sigma.size())},
        {"version", state.norm->version},
        {"fit_bank_size", state.norm->fit_bank_size},
        {"eps", state.norm->eps}};
  }
  std::ofstream f(path_prefix + ".state.json", std::ios::trunc);
  if (!f) throw config_error("save_embedding_state: cannot open sidecar");
  f << j.dump(2) << "\n";
}

EmbeddingState load_embedding_state(const std::string& path_prefix,
                                    const EmbedderConfig& cfg) {
  EmbeddingState st;
  st.cfg = cfg;
  Rng tmp(0);
  st.enc = init_encoder(cfg, tmp);  // shapes only; values overwritten
  nn::ParamRefs r = st.enc.refs();
  nn::load_blob(path_prefix + ".bin", r);
  std::ifstream f(path_prefix + ".state.json");
  if (!f) throw config_error("load_embedding_state: missing sidecar");
  nlohmann::json j;
  f >> j;
  st.version = j.at("version").get<int>();
  if (j.contains("normalizer")) {
    const auto& nj = j["normalizer"];
    Normalizer n;
    const auto mu = nj.at("mu").get<std::vector<double>>();
    const auto sg = nj.at("sigma").get<std::vector<double>>();
    n.mu = Eigen::Map<const Eigen::VectorXd>(mu.data(), Eigen::Index(mu.size()));
    n.sigma =
        Eigen::Map<const Eigen::VectorXd>(sg.data(), Eigen::Index(sg.size()));
    n.version = nj.at("version").get<int>();
    n.fit_bank_size = nj.at("fit_bank_size").get<int>();
    n.eps = nj.at("eps").get<double>();
    st.norm = std::move(n);
  }
  return st;
}

}  // namespace telapa
