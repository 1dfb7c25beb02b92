#pragma once

#include <optional>

#include "telapa/gridworld.hpp"
#include "telapa/nets.hpp"

namespace telapa {

// ---------------------------------------------------------------------------
// Configuration

struct EmbedderConfig {
  // architecture: per-step MLP -> GRU -> projection head
  int feat_dim = kFeatureDim;
  int mlp_hidden = 32;
  int gru_hidden = 32;
  int proj_hidden = 16;
  int latent_dim = 8;
  int t_max = 256;  // episodes are truncated to their first t_max steps

  // contrastive / distillation objective
  double tau = 0.15;
  double infonce_eps = 1e-12;  // zero-norm guard when normalizing rows
  double lambda_norm = 1.0;    // weight of the norm term inside distillation
  double w_contrast = 1.0;
  double w_distill = 1.0;

  // stochastic views
  double crop_rho = 0.6;        // crop length lower bound as fraction of T
  double channel_dropout = 0.1; // per-channel zeroing probability (per view)
  double noise_sigma = 0.01;

  // boundary training
  int steps = 700;
  double lr = 5e-4;
  int batch = 32;
  double anchor_fraction = 0.33;
  int min_anchor_rows = 8;  // when any anchors exist
  double grad_clip = 0.5;

  // robust normalizer
  double sigma_min = 1e-3;
  double norm_eps = 1e-8;
};

// ---------------------------------------------------------------------------
// Encoder parameters

struct EncoderParams {
  nn::Dense step1, step2;  // per-step MLP, ReLU after each layer
  nn::GruParams gru;
  nn::Dense proj1, proj2;  // hidden ReLU, linear output

  nn::ParamRefs refs();
};

EncoderParams init_encoder(const EmbedderConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Robust per-dimension normalizer (median / IQR-derived sigma)

struct Normalizer {
  Eigen::VectorXd mu;     // per-dimension median of the fit bank
  Eigen::VectorXd sigma;  // max(IQR/1.349, sigma_min)
  int version = 0;
  int fit_bank_size = 0;
  double eps = 1e-8;

  Eigen::VectorXd normalize(const Eigen::VectorXd& z) const {
    return (z - mu).array() / (sigma.array() + eps);
  }
};

// ---------------------------------------------------------------------------
// Embedding state: encoder + optional normalizer + latent-space version

struct EmbeddingState {
  EmbedderConfig cfg;
  EncoderParams enc;
  std::optional<Normalizer> norm;
  int version = 0;  // bumped whenever the latent space changes
};

EmbeddingState make_embedding_state(const EmbedderConfig& cfg, Rng& rng);

// normalize under the state's normalizer; throws usage_error before any fit
Eigen::VectorXd normalize(const EmbeddingState& state,
                          const Eigen::VectorXd& z);

void save_embedding_state(const std::string& path_prefix,
                          const EmbeddingState& state);
EmbeddingState load_embedding_state(const std::string& path_prefix,
                                    const EmbedderConfig& cfg);

// ---------------------------------------------------------------------------
// Encoding and summaries

Eigen::VectorXd encode_episode(const EncoderParams& enc,
                               const EmbedderConfig& cfg, const Episode& ep);
// one latent row per episode
nn::Mat encode_batch(const EncoderParams& enc, const EmbedderConfig& cfg,
                     const std::vector<const Episode*>& eps);

struct LatentSummary {
  Eigen::VectorXd z_mean;
  Eigen::VectorXd z_std_ep;    // population std of final latents across episodes
  Eigen::VectorXd z_std_time;  // mean over episodes of per-step latent std
};

LatentSummary summarize_policy(const EncoderParams& enc,
                               const EmbedderConfig& cfg,
                               const EpisodeSet& set);

// raw (unnormalized) z_mean of a set; the archive descriptor before scaling
Eigen::VectorXd raw_set_descriptor(const EncoderParams& enc,
                                   const EmbedderConfig& cfg,
                                   const EpisodeSet& set);

// ---------------------------------------------------------------------------
// Stochastic views

// temporal crop + per-view channel mask + Gaussian feature noise
Episode augment(const Episode& ep, const EmbedderConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Losses (plain evaluation; training uses the tape forms internally)

// symmetric InfoNCE over L2-normalized rows, positives on the diagonal
double contrastive_loss(const nn::Mat& z1, const nn::Mat& z2, double tau,
                        double eps);
// direction MSE + lambda_norm * norm MSE; empty input contributes exactly 0
double distill_loss(const nn::Mat& z_student, const nn::Mat& z_teacher,
                    double lambda_norm, double eps);

// ---------------------------------------------------------------------------
// Boundary training and normalizer fitting

struct BoundaryLosses {
  std::vector<double> total, contrast, distill;
};

// Distills a frozen snapshot of the current encoder into the live one while
// contrasting stochastic views; updates state.enc in place.
BoundaryLosses boundary_train(EmbeddingState& state,
                              const std::vector<const EpisodeSet*>& anchors,
                              const std::vector<const EpisodeSet*>& replay,
                              Rng& rng);

// Fits mu/sigma on the raw set descriptors of the bank (>= 2 valid sets).
Normalizer fit_normalizer(const EncoderParams& enc, const EmbedderConfig& cfg,
                          const std::vector<const EpisodeSet*>& bank);
// Same fit on already-computed descriptor rows (any dimension, >= 2 rows).
Normalizer fit_normalizer(const std::vector<Eigen::VectorXd>& descriptors,
                          const EmbedderConfig& cfg);

}  // namespace telapa
