#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <telapa/embedder.hpp>

using namespace telapa;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

namespace {

EmbedderConfig small_cfg() {
  EmbedderConfig cfg;
  cfg.mlp_hidden = 16;
  cfg.gru_hidden = 12;
  cfg.proj_hidden = 8;
  cfg.latent_dim = 4;
  cfg.t_max = 32;
  cfg.steps = 0;
  cfg.batch = 8;
  return cfg;
}

Episode synth_ep(int T, std::uint64_t seed, const std::string& tag = "A") {
  Rng rng(seed);
  Episode e;
  e.task_tag = tag;
  e.seed = seed;
  e.features.resize(T, kFeatureDim);
  for (int r = 0; r < T; ++r)
    for (int c = 0; c < kFeatureDim; ++c) e.features(r, c) = rng.uniform();
  e.ret = 0.5;
  e.success = true;
  return e;
}

EpisodeSet synth_set(int n_eps, int T, std::uint64_t seed,
                     const std::string& tag = "A") {
  std::vector<Episode> eps;
  for (int i = 0; i < n_eps; ++i)
    eps.push_back(synth_ep(T, seed * 1000 + std::uint64_t(i), tag));
  return make_episode_set(std::move(eps), tag);
}

// Independent InfoNCE route: plain Eigen, explicit logsumexp.
double infonce_ref(const Mat& a, const Mat& b, double tau, double eps) {
  auto norm_rows = [&](const Mat& m) {
    Mat out = m;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      out.row(i) /= (m.row(i).norm() + eps);
    return out;
  };
  const Mat n1 = norm_rows(a), n2 = norm_rows(b);
  const Mat s12 = n1 * n2.transpose() / tau;
  const Mat s21 = n2 * n1.transpose() / tau;
  auto dir = [](const Mat& s) {
    double tot = 0.0;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      const double mx = s.row(i).maxCoeff();
      const double lse = mx + std::log((s.row(i).array() - mx).exp().sum());
      tot += lse - s(i, i);
    }
    return tot / double(s.rows());
  };
  return 0.5 * (dir(s12) + dir(s21));
}

// Independent distillation route.
double distill_ref(const Mat& s, const Mat& t, double lam, double eps) {
  double dir = 0.0, scale = 0.0;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double sn = s.row(i).norm(), tn = t.row(i).norm();
    dir += (s.row(i) / (sn + eps) - t.row(i) / (tn + eps)).squaredNorm();
    scale += (sn - tn) * (sn - tn);
  }
  dir /= double(s.rows() * s.cols());
  scale /= double(s.rows());
  return dir + lam * scale;
}

Mat random_mat(int r, int c, Rng& rng) {
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

}  // namespace

TEST_SUITE("embedder") {
  // -------------------------------------------------------------------------
  // contrastive_loss

  TEST_CASE("infonce hand-derived two-row orthogonal value") {
    Mat z(2, 8);
    z.setZero();
    z(0, 0) = 1.0;
    z(1, 1) = 1.0;
    const double loss = contrastive_loss(z, z, 0.15, 1e-12);
    // closed form for the 2x2 softmax: -log(e^{1/tau} / (e^{1/tau} + 1))
    const double hand = -std::log(std::exp(1.0 / 0.15) /
                                  (std::exp(1.0 / 0.15) + 1.0));
    CHECK(std::abs(loss - hand) <= 1e-6);
    CHECK(hand == doctest::Approx(1.27e-3).epsilon(0.01));
  }

  TEST_CASE("infonce single row has no negatives") {
    Mat z(1, 8);
    z.setZero();
    z(0, 3) = 2.0;
    CHECK(contrastive_loss(z, z, 0.15, 1e-12) == doctest::Approx(0.0).epsilon(1e-12));
  }

  TEST_CASE("infonce matches the independent route on random batches") {
    Rng rng(901);
    for (int trial = 0; trial < 8; ++trial) {
      const int b = 2 + int(rng.randint(6));
      const Mat z1 = random_mat(b, 8, rng);
      const Mat z2 = random_mat(b, 8, rng);
      const double got = contrastive_loss(z1, z2, 0.15, 1e-12);
      const double want = infonce_ref(z1, z2, 0.15, 1e-12);
      CHECK(std::abs(got - want) <= 1e-10);
    }
  }

  TEST_CASE("infonce symmetry in the two views") {
    Rng rng(902);
    const Mat z1 = random_mat(5, 8, rng);
    const Mat z2 = random_mat(5, 8, rng);
    const double a = contrastive_loss(z1, z2, 0.15, 1e-12);
    const double b = contrastive_loss(z2, z1, 0.15, 1e-12);
    CHECK(std::abs(a - b) <= 1e-12);
  }

  TEST_CASE("infonce invariant to positive row rescaling") {
    Rng rng(903);
    const Mat z1 = random_mat(4, 8, rng);
    const Mat z2 = random_mat(4, 8, rng);
    Mat z1s = z1;
    z1s.row(0) *= 7.0;
    z1s.row(2) *= 0.01;
    const double a = contrastive_loss(z1, z2, 0.15, 1e-12);
    const double b = contrastive_loss(z1s, z2, 0.15, 1e-12);
    CHECK(std::abs(a - b) <= 1e-8);
  }

  TEST_CASE("infonce aligned pairs beat permuted pairs") {
    Rng rng(904);
    for (int trial = 0; trial < 6; ++trial) {
      const Mat z = random_mat(6, 8, rng);
      Mat perm(6, 8);
      for (int i = 0; i < 6; ++i) perm.row(i) = z.row((i + 1) % 6);
      CHECK(contrastive_loss(z, z, 0.15, 1e-12) <=
            contrastive_loss(z, perm, 0.15, 1e-12));
    }
  }

  TEST_CASE("infonce rejects empty and mismatched batches") {
    Mat z0(0, 8), z2(2, 8), z3(3, 8);
    z2.setRandom();
    z3.setRandom();
    CHECK_THROWS_AS((void)contrastive_loss(z0, z0, 0.15, 1e-12), config_error);
    CHECK_THROWS_AS((void)contrastive_loss(z2, z3, 0.15, 1e-12), config_error);
  }

  // -------------------------------------------------------------------------
  // distill_loss

  TEST_CASE("distill student equal to teacher is zero") {
    Rng rng(905);
    const Mat t = random_mat(5, 8, rng);
    CHECK(distill_loss(t, t, 1.0, 1e-12) <= 1e-12);
  }

  TEST_CASE("distill doubled student pays only the norm term") {
    Rng rng(906);
    const Mat t = random_mat(5, 8, rng);
    const Mat s = 2.0 * t;
    const double loss = distill_loss(s, t, 1.0, 1e-12);
    // directions agree; the scale term is the mean squared teacher norm
    double want = 0.0;
    for (int i = 0; i < 5; ++i) want += t.row(i).squaredNorm();
    want /= 5.0;
    CHECK(loss == doctest::Approx(want).epsilon(1e-9));

    // with the norm weight off, the loss ignores student scaling entirely
    CHECK(distill_loss(s, t, 0.0, 1e-12) <= 1e-10);
  }

  TEST_CASE("distill matches the independent route on random batches") {
    Rng rng(907);
    for (int trial = 0; trial < 8; ++trial) {
      const Mat s = random_mat(4, 8, rng);
      const Mat t = random_mat(4, 8, rng);
      const double got = distill_loss(s, t, 1.0, 1e-12);
      const double want = distill_ref(s, t, 1.0, 1e-12);
      CHECK(std::abs(got - want) <= 1e-10);
    }
  }

  TEST_CASE("distill empty batch contributes zero; mismatch rejected") {
    Mat z0(0, 8), z2(2, 8), z3(3, 8);
    z2.setRandom();
    z3.setRandom();
    CHECK(distill_loss(z0, z0, 1.0, 1e-12) == 0.0);
    CHECK_THROWS_AS((void)distill_loss(z2, z3, 1.0, 1e-12), config_error);
  }

  // -------------------------------------------------------------------------
  // encoding

  TEST_CASE("encode with all-zero parameters yields the output bias") {
    const EmbedderConfig cfg = small_cfg();
    Rng rng(908);
    EncoderParams enc = init_encoder(cfg, rng);
    for (Mat* t : enc.refs().tensors) t->setZero();
    for (int j = 0; j < cfg.latent_dim; ++j) enc.proj2.b(0, j) = 0.25 * (j + 1);

    const Episode ep = synth_ep(7, 1);
    const Vec z = encode_episode(enc, cfg, ep);
    REQUIRE(z.size() == cfg.latent_dim);
    for (int j = 0; j < cfg.latent_dim; ++j)
      CHECK(z(j) == doctest::Approx(0.25 * (j + 1)).epsilon(1e-15));
  }

  TEST_CASE("encode is deterministic and batch rows match solo encodes") {
    const EmbedderConfig cfg = small_cfg();
    Rng rng(909);
    const EncoderParams enc = init_encoder(cfg, rng);
    const Episode a = synth_ep(3, 2), b = synth_ep(9, 3), c = synth_ep(6, 4);

    const Vec za = encode_episode(enc, cfg, a);
    CHECK((za - encode_episode(enc, cfg, a)).norm() == 0.0);

    // mixed-length batch: padding past each episode's length must not leak
    const Mat zb = encode_batch(enc, cfg, {&a, &b, &c});
    REQUIRE(zb.rows() == 3);
    CHECK((zb.row(0).transpose() - za).norm() <= 1e-12);
    CHECK((zb.row(1).transpose() - encode_episode(enc, cfg, b)).norm() <= 1e-12);
    CHECK((zb.row(2).transpose() - encode_episode(enc, cfg, c)).norm() <= 1e-12);
  }

  TEST_CASE("encode clips long episodes at the horizon") {
    EmbedderConfig cfg = small_cfg();
    cfg.t_max = 16;
    Rng rng(910);
    const EncoderParams enc = init_encoder(cfg, rng);
    const Episode full = synth_ep(24, 5);
    Episode head = full;
    head.features = full.features.topRows(16);
    CHECK((encode_episode(enc, cfg, full) - encode_episode(enc, cfg, head))
              .norm() == 0.0);
  }

  TEST_CASE("encode rejects empty batches") {
    const EmbedderConfig cfg = small_cfg();
    Rng rng(911);
    const EncoderParams enc = init_encoder(cfg, rng);
    CHECK_THROWS_AS((void)encode_batch(enc, cfg, {}), config_error);
  }

  // -------------------------------------------------------------------------
  // summarize_policy

  TEST_CASE("summary of identical episodes has zero spread") {
    const EmbedderConfig cfg = small_cfg();
    Rng rng(912);
    const EncoderParams enc = init_encoder(cfg, rng);
    const Episode ep = synth_ep(8, 6);
    EpisodeSet set = make_episode_set({ep, ep, ep, ep}, "A");

    const LatentSummary s = summarize_policy(enc, cfg, set);
    CHECK((s.z_mean - encode_episode(enc, cfg, ep)).norm() <= 1e-12);
    CHECK(s.z_std_ep.norm() <= 1e-12);
    CHECK(s.z_std_time.minCoeff() >= 0.0);
  }

  TEST_CASE("summary mean and population std match hand computation") {
    const EmbedderConfig cfg = small_cfg();
    Rng rng(913);
    const EncoderParams enc = init_encoder(cfg, rng);
    EpisodeSet set = synth_set(5, 10, 14);

    const LatentSummary s = summarize_policy(enc, cfg, set);
    Mat z(5, cfg.latent_dim);
    for (int i = 0; i < 5; ++i)
      z.row(i) = encode_episode(enc, cfg, set.episodes[std::size_t(i)]).transpose();
    const Vec mean = z.colwise().mean().transpose();
    Vec stdev(cfg.latent_dim);
    for (int j = 0; j < cfg.latent_dim; ++j)
      stdev(j) = std::sqrt((z.col(j).array() - mean(j)).square().mean());
    CHECK((s.z_mean - mean).norm() <= 1e-12);
    CHECK((s.z_std_ep - stdev).norm() <= 1e-12);
  }

  TEST_CASE("summary of a single episode has zero episode spread") {
    const EmbedderConfig cfg = small_cfg();
    Rng rng(914);
    const EncoderParams enc = init_encoder(cfg, rng);
    EpisodeSet set = make_episode_set({synth_ep(5, 7)}, "A");
    const LatentSummary s = summarize_policy(enc, cfg, set);
    CHECK(s.z_std_ep.norm() == 0.0);
  }

  TEST_CASE("summary rejects an empty set") {
    const EmbedderConfig cfg = small_cfg();
    Rng rng(915);
    const EncoderParams enc = init_encoder(cfg, rng);
    EpisodeSet empty;
    CHECK_THROWS_AS((void)summarize_policy(enc, cfg, empty), config_error);
  }

  // -------------------------------------------------------------------------
  // augment

  TEST_CASE("augment with crop off and no noise is the identity") {
    EmbedderConfig cfg = small_cfg();
    cfg.crop_rho = 1.0;
    cfg.channel_dropout = 0.0;
    cfg.noise_sigma = 0.0;
    Rng rng(916);
    const Episode ep = synth_ep(12, 8);
    const Episode view = augment(ep, cfg, rng);
    CHECK((view.features - ep.features).norm() == 0.0);
  }

  TEST_CASE("augment with certain dropout zeroes every channel") {
    EmbedderConfig cfg = small_cfg();
    cfg.crop_rho = 1.0;
    cfg.channel_dropout = 1.0;
    cfg.noise_sigma = 0.0;
    Rng rng(917);
    const Episode view = augment(synth_ep(6, 9), cfg, rng);
    CHECK(view.features.norm() == 0.0);
  }

  TEST_CASE("augment crop lengths are uniform over the allowed range") {
    EmbedderConfig cfg = small_cfg();
    cfg.crop_rho = 0.6;
    cfg.channel_dropout = 0.0;
    cfg.noise_sigma = 0.0;
    Rng rng(918);
    const Episode ep = synth_ep(10, 10);
    // floor(0.6 * 10) = 6, so lengths live on {6,...,10}
    std::array<int, 5> counts{};
    for (int i = 0; i < 10000; ++i) {
      const Episode v = augment(ep, cfg, rng);
      const auto len = v.features.rows();
      REQUIRE(len >= 6);
      REQUIRE(len <= 10);
      ++counts[std::size_t(len - 6)];
    }
    for (int c : counts) {
      CHECK(c >= 1800);  // expected 2000 per bin, sd = 40
      CHECK(c <= 2200);
    }
  }

  TEST_CASE("augment views are contiguous slices before noise") {
    EmbedderConfig cfg = small_cfg();
    cfg.crop_rho = 0.5;
    cfg.channel_dropout = 0.0;
    cfg.noise_sigma = 0.0;
    Rng rng(919);
    const Episode ep = synth_ep(9, 11);
    for (int i = 0; i < 50; ++i) {
      const Episode v = augment(ep, cfg, rng);
      const auto len = v.features.rows();
      bool found = false;
      for (Eigen::Index start = 0; start + len <= 9 && !found; ++start)
        found = (v.features - ep.features.middleRows(start, len)).norm() == 0.0;
      CHECK(found);
      CHECK(v.features.cols() == kFeatureDim);
    }
  }

  TEST_CASE("augment rejects an empty episode") {
    EmbedderConfig cfg = small_cfg();
    Rng rng(920);
    Episode ep;
    ep.features.resize(0, kFeatureDim);
    CHECK_THROWS_AS((void)augment(ep, cfg, rng), usage_error);
  }

  // -------------------------------------------------------------------------
  // boundary_train

  TEST_CASE("training with zero steps leaves the encoder untouched") {
    EmbedderConfig cfg = small_cfg();
    cfg.steps = 0;
    Rng rng(921);
    EmbeddingState state = make_embedding_state(cfg, rng);
    const Vec before = nn::to_flat(state.enc.refs());
    EpisodeSet bank = synth_set(4, 8, 20);
    const BoundaryLosses out = boundary_train(state, {&bank}, {}, rng);
    CHECK(out.total.empty());
    CHECK((nn::to_flat(state.enc.refs()) - before).norm() == 0.0);
  }

  TEST_CASE("training demands at least one episode set") {
    EmbedderConfig cfg = small_cfg();
    cfg.steps = 3;
    Rng rng(922);
    EmbeddingState state = make_embedding_state(cfg, rng);
    CHECK_THROWS_AS((void)boundary_train(state, {}, {}, rng), config_error);
  }

  TEST_CASE("distillation-only training starts at its fixed point") {
    EmbedderConfig cfg = small_cfg();
    cfg.steps = 5;
    cfg.w_contrast = 0.0;
    cfg.w_distill = 1.0;
    Rng rng(923);
    EmbeddingState state = make_embedding_state(cfg, rng);
    const Vec before = nn::to_flat(state.enc.refs());
    EpisodeSet bank = synth_set(6, 8, 30);
    const BoundaryLosses out = boundary_train(state, {&bank}, {}, rng);
    REQUIRE(out.total.size() == 5);
    for (double l : out.total) CHECK(std::abs(l) <= 1e-9);
    // the student starts equal to the frozen teacher, so gradients vanish
    CHECK((nn::to_flat(state.enc.refs()) - before).norm() <= 1e-6);
  }

  TEST_CASE("training moves parameters and is seed-deterministic") {
    EmbedderConfig cfg = small_cfg();
    cfg.steps = 10;
    Rng rng_a(924), rng_b(924), rng_c(925);
    EmbeddingState sa = make_embedding_state(cfg, rng_a);
    EmbeddingState sb = sa, sc = sa;
    EpisodeSet bank1 = synth_set(5, 8, 40, "A");
    EpisodeSet bank2 = synth_set(5, 8, 41, "B");
    std::vector<const EpisodeSet*> anchors{&bank1};
    std::vector<const EpisodeSet*> replay{&bank2};

    const Vec before = nn::to_flat(sa.enc.refs());
    Rng t1(99), t2(99), t3(100);
    (void)boundary_train(sa, anchors, replay, t1);
    (void)boundary_train(sb, anchors, replay, t2);
    (void)boundary_train(sc, anchors, replay, t3);

    CHECK((nn::to_flat(sa.enc.refs()) - before).norm() > 1e-6);
    CHECK((nn::to_flat(sa.enc.refs()) - nn::to_flat(sb.enc.refs())).norm() ==
          0.0);
    CHECK((nn::to_flat(sa.enc.refs()) - nn::to_flat(sc.enc.refs())).norm() >
          0.0);
  }

  TEST_CASE("training loss trend declines on a fixed synthetic bank") {
    EmbedderConfig cfg = small_cfg();
    cfg.steps = 200;
    cfg.batch = 8;
    Rng rng(926);
    EmbeddingState state = make_embedding_state(cfg, rng);
    // two distinct clusters of episodes give the contrastive term structure
    EpisodeSet bank1 = synth_set(6, 10, 50, "A");
    EpisodeSet bank2 = synth_set(6, 10, 60, "B");
    Rng trng(927);
    const BoundaryLosses out =
        boundary_train(state, {&bank1}, {&bank2}, trng);
    REQUIRE(out.total.size() == 200);
    // smoothed over 50-step windows the total loss must not increase
    std::array<double, 4> win{};
    for (int w = 0; w < 4; ++w) {
      double acc = 0.0;
      for (int k = 0; k < 50; ++k) acc += out.total[std::size_t(w * 50 + k)];
      win[std::size_t(w)] = acc / 50.0;
    }
    CHECK(win[1] <= win[0]);
    CHECK(win[2] <= win[1]);
    CHECK(win[3] <= win[2]);
  }

  // -------------------------------------------------------------------------
  // fit_normalizer / normalize

  TEST_CASE("normalizer on the one-dimensional three-point bank") {
    const EmbedderConfig cfg;  // defaults: sigma_min 1e-3, norm_eps 1e-8
    std::vector<Vec> rows;
    for (double v : {0.0, 1.0, 2.0}) {
      Vec z(1);
      z(0) = v;
      rows.push_back(z);
    }
    const Normalizer n = fit_normalizer(rows, cfg);
    REQUIRE(n.mu.size() == 1);
    CHECK(n.mu(0) == doctest::Approx(1.0).epsilon(1e-12));
    // quartiles 0.5 and 1.5 under linear interpolation
    CHECK(std::abs(n.sigma(0) - 0.74129) <= 1e-5);
    Vec two(1);
    two(0) = 2.0;
    CHECK(std::abs(n.normalize(two)(0) - 1.34899) <= 1e-4);
    Vec mu(1);
    mu(0) = n.mu(0);
    CHECK(n.normalize(mu)(0) == 0.0);
    CHECK(n.fit_bank_size == 3);
  }

  TEST_CASE("constant banks pin sigma to the floor exactly") {
    const EmbedderConfig cfg;
    Vec z(3);
    z << 0.7, -1.2, 4.0;
    const Normalizer n = fit_normalizer({z, z, z, z}, cfg);
    for (int j = 0; j < 3; ++j) {
      CHECK(n.sigma(j) == 1e-3);
      CHECK(n.mu(j) == z(j));
    }
  }

  TEST_CASE("normalized fit bank recenters and rescales") {
    const EmbedderConfig cfg;
    Rng rng(928);
    std::vector<Vec> rows;
    for (int i = 0; i < 33; ++i) {
      Vec z(8);
      for (int j = 0; j < 8; ++j) z(j) = 3.0 * rng.normal() + double(j);
      rows.push_back(z);
    }
    const Normalizer n = fit_normalizer(rows, cfg);
    for (int j = 0; j < 8; ++j) {
      std::vector<double> col;
      for (const Vec& z : rows) col.push_back((n.normalize(z))(j));
      CHECK(std::abs(quantile(col, 0.5)) <= 1e-9);
      if (n.sigma(j) > 1e-3) {
        const double iqr = quantile(col, 0.75) - quantile(col, 0.25);
        CHECK(std::abs(iqr / 1.349 - 1.0) <= 1e-6);
      }
    }
  }

  TEST_CASE("normalize is monotone per dimension") {
    const EmbedderConfig cfg;
    Rng rng(929);
    std::vector<Vec> rows;
    for (int i = 0; i < 9; ++i) {
      Vec z(4);
      for (int j = 0; j < 4; ++j) z(j) = rng.normal();
      rows.push_back(z);
    }
    const Normalizer n = fit_normalizer(rows, cfg);
    const Vec z = rows[0];
    Vec bigger = z;
    for (int j = 0; j < 4; ++j) bigger(j) += 0.5 * (j + 1);
    const Vec a = n.normalize(z), b = n.normalize(bigger);
    for (int j = 0; j < 4; ++j) CHECK(b(j) > a(j));
  }

  TEST_CASE("sets with non-finite descriptors are discarded") {
    const EmbedderConfig cfg = small_cfg();
    Rng rng(930);
    const EncoderParams enc = init_encoder(cfg, rng);
    EpisodeSet good1 = synth_set(3, 6, 70);
    EpisodeSet good2 = synth_set(3, 6, 71);
    EpisodeSet bad = synth_set(3, 6, 72);
    for (Episode& e : bad.episodes)
      e.features.setConstant(std::numeric_limits<double>::quiet_NaN());
    REQUIRE(!raw_set_descriptor(enc, cfg, bad).allFinite());

    const Normalizer n = fit_normalizer(enc, cfg, {&good1, &good2, &bad});
    CHECK(n.fit_bank_size == 2);

    // dropping below two valid sets is an error
    CHECK_THROWS_AS((void)fit_normalizer(enc, cfg, {&good1, &bad}),
                    config_error);
    CHECK_THROWS_AS((void)fit_normalizer(std::vector<Vec>{}, cfg),
                    config_error);
  }

  TEST_CASE("state-level normalize requires a fitted normalizer") {
    EmbedderConfig cfg = small_cfg();
    Rng rng(931);
    EmbeddingState state = make_embedding_state(cfg, rng);
    Vec z = Vec::Zero(cfg.latent_dim);
    CHECK_THROWS_AS((void)normalize(state, z), usage_error);
  }

  // -------------------------------------------------------------------------
  // persistence

  TEST_CASE("embedding state round-trips through disk") {
    EmbedderConfig cfg = small_cfg();
    Rng rng(932);
    EmbeddingState state = make_embedding_state(cfg, rng);
    std::vector<Vec> rows;
    for (int i = 0; i < 5; ++i) {
      Vec z(cfg.latent_dim);
      for (int j = 0; j < cfg.latent_dim; ++j) z(j) = rng.normal();
      rows.push_back(z);
    }
    state.norm = fit_normalizer(rows, cfg);
    state.norm->version = 3;
    state.version = 3;

    const std::string prefix = "/tmp/telapa_test_embed_state";
    save_embedding_state(prefix, state);
    const EmbeddingState back = load_embedding_state(prefix, cfg);
    CHECK((nn::to_flat(const_cast<EmbeddingState&>(back).enc.refs()) -
           nn::to_flat(state.enc.refs()))
              .norm() == 0.0);
    CHECK(back.version == 3);
    REQUIRE(back.norm.has_value());
    CHECK((back.norm->mu - state.norm->mu).norm() == 0.0);
    CHECK((back.norm->sigma - state.norm->sigma).norm() == 0.0);
    CHECK(back.norm->fit_bank_size == 5);
    std::remove((prefix + ".bin").c_str());
    std::remove((prefix + ".state.json").c_str());
  }
}
