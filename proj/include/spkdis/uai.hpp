// Copyright 2026 The spkdis Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//       http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Unsupervised adversarial invariance for speaker embeddings.
//
// An encoder maps an input embedding x to a split code [h1, h2]. The main
// model predicts the speaker from h1 and reconstructs x from [psi(h1), h2],
// where psi is dropout noise. Two disentanglers try to predict h1 from h2
// and h2 from h1. Training alternates
//
//   main:        min  w_pred CE + w_recon MSE - w_adv (L_21 + L_12)
//                over encoder, predictor, decoder
//   adversarial: min  L_21 + L_12   over the two disentanglers
//
// with L_21 = MSE(dis_h2_to_h1(h2), h1) and L_12 = MSE(dis_h1_to_h2(h1), h2).

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "spkdis/common.hpp"
#include "spkdis/dataio.hpp"
#include "spkdis/nnet.hpp"
#include "spkdis/rng.hpp"

namespace spkdis::uai {

struct UaiConfig {
  std::size_t input_dim = 512;
  std::size_t h1_dim = 128;
  std::size_t h2_dim = 128;
  std::size_t n_speakers = 0;  // predictor output width; 0 = infer from training labels

  std::vector<std::size_t> encoder_hidden{512};
  std::vector<std::size_t> predictor_hidden{256};
  std::vector<std::size_t> decoder_hidden{512};
  std::vector<std::size_t> disentangler_hidden{128};
  /// Squashing applied to the split code; bounds the adversarial objective.
  nnet::Activation code_activation = nnet::Activation::kTanh;

  double w_pred = 1.0;
  double w_recon = 1.0;
  double w_adv = 1.0;
  std::size_t adv_steps_per_main = 5;
  double keep_prob = 0.25;

  double lr = 0.0002;
  double adv_lr = 0.0002;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  /// Informational: true for a model trained on augmented data (M2).
  bool augmented = false;

  void validate() const {
    require<ConfigError>(input_dim > 0 && h1_dim > 0 && h2_dim > 0, "UAI dimensions must be positive");
    require<ConfigError>(h1_dim + h2_dim <= 4 * input_dim, "h1_dim + h2_dim exceeds 4 x input_dim");
    require<ConfigError>(w_pred >= 0 && w_recon >= 0 && w_adv >= 0, "loss weights must be nonnegative");
    require<ConfigError>(adv_steps_per_main > 0, "adv_steps_per_main must be positive");
    require<ConfigError>(keep_prob > 0 && keep_prob <= 1, "keep_prob must be in (0, 1]");
    require<ConfigError>(lr > 0 && adv_lr > 0, "learning rates must be positive");
    require<ConfigError>(batch_size > 0, "batch_size must be positive");
  }
};

struct UaiModel {
  UaiConfig cfg;
  std::vector<std::string> speakers;  // predictor class order
  nnet::Network encoder;              // input -> h1 (+) h2
  nnet::Network predictor;            // h1 -> speaker logits
  nnet::Network decoder;              // [psi(h1), h2] -> input
  nnet::Network dis_h2_to_h1;
  nnet::Network dis_h1_to_h2;
  std::array<nnet::AdamState, 3> main_opt;  // encoder, predictor, decoder
  std::array<nnet::AdamState, 2> adv_opt;   // dis_h2_to_h1, dis_h1_to_h2
  std::size_t epochs_trained = 0;
};

namespace detail {

inline std::vector<std::size_t> dims(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
  std::vector<std::size_t> d{in};
  d.insert(d.end(), hidden.begin(), hidden.end());
  d.push_back(out);
  return d;
}

}  // namespace detail

inline UaiModel build_uai(const UaiConfig& cfg) {
  cfg.validate();
  require<ConfigError>(cfg.n_speakers >= 2, "UAI predictor needs at least 2 speakers, got ", cfg.n_speakers);
  using nnet::Activation;
  using nnet::Network;
  UaiModel m;
  m.cfg = cfg;
  const std::size_t code = cfg.h1_dim + cfg.h2_dim;
  m.encoder = Network::init({detail::dims(cfg.input_dim, cfg.encoder_hidden, code), Activation::kRelu,
                             cfg.code_activation, 0.0},
                            substream(cfg.seed, "init.encoder"));
  m.predictor = Network::init({detail::dims(cfg.h1_dim, cfg.predictor_hidden, cfg.n_speakers)},
                              substream(cfg.seed, "init.predictor"));
  m.decoder = Network::init({detail::dims(code, cfg.decoder_hidden, cfg.input_dim)},
                            substream(cfg.seed, "init.decoder"));
  m.dis_h2_to_h1 = Network::init({detail::dims(cfg.h2_dim, cfg.disentangler_hidden, cfg.h1_dim)},
                                 substream(cfg.seed, "init.dis21"));
  m.dis_h1_to_h2 = Network::init({detail::dims(cfg.h1_dim, cfg.disentangler_hidden, cfg.h2_dim)},
                                 substream(cfg.seed, "init.dis12"));
  m.main_opt = {nnet::AdamState::for_network(m.encoder, cfg.lr), nnet::AdamState::for_network(m.predictor, cfg.lr),
                nnet::AdamState::for_network(m.decoder, cfg.lr)};
  m.adv_opt = {nnet::AdamState::for_network(m.dis_h2_to_h1, cfg.adv_lr),
               nnet::AdamState::for_network(m.dis_h1_to_h2, cfg.adv_lr)};
  return m;
}

struct SplitCode {
  Batch h1;
  Batch h2;
};

inline SplitCode split_code(const Batch& code, std::size_t h1_dim) {
  const auto a = static_cast<Eigen::Index>(h1_dim);
  return {code.leftCols(a), code.rightCols(code.cols() - a)};
}

inline Batch concat_cols(const Batch& a, const Batch& b) {
  Batch out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

struct MainLosses {
  double pred = 0.0;
  double recon = 0.0;
  double adv_21 = 0.0;  // MSE(dis_h2_to_h1(h2), h1)
  double adv_12 = 0.0;  // MSE(dis_h1_to_h2(h1), h2)
  double total = 0.0;   // w_pred pred + w_recon recon - w_adv (adv_21 + adv_12)
};

struct MainStepGradients {
  MainLosses losses;
  nnet::Gradients encoder;
  nnet::Gradients predictor;
  nnet::Gradients decoder;
};

/// Main objective and its gradients for the encoder, predictor and decoder
/// on one batch. `h1_mask` is the dropout mask applied to h1 before the
/// decoder (entries 0 or 1/keep_prob).
inline MainStepGradients main_objective(const UaiModel& m, const Batch& x, std::span<const int> speakers,
                                        const Batch& h1_mask) {
  const auto& cfg = m.cfg;
  const auto enc = nnet::forward(m.encoder, x);
  auto [h1, h2] = split_code(enc.output(), cfg.h1_dim);

  const auto pred_fwd = nnet::forward(m.predictor, h1);
  const auto ce = nnet::softmax_cross_entropy(pred_fwd.output(), speakers);

  const Batch dec_in = concat_cols(h1.cwiseProduct(h1_mask), h2);
  const auto dec_fwd = nnet::forward(m.decoder, dec_in);
  const auto rec = nnet::mse(dec_fwd.output(), x);

  const auto d21 = nnet::forward(m.dis_h2_to_h1, h2);
  const auto l21 = nnet::mse(d21.output(), h1);
  const auto d12 = nnet::forward(m.dis_h1_to_h2, h1);
  const auto l12 = nnet::mse(d12.output(), h2);

  MainStepGradients out;
  out.losses = {ce.loss, rec.loss, l21.loss, l12.loss,
                cfg.w_pred * ce.loss + cfg.w_recon * rec.loss - cfg.w_adv * (l21.loss + l12.loss)};

  Batch dh1 = Batch::Zero(h1.rows(), h1.cols());
  Batch dh2 = Batch::Zero(h2.rows(), h2.cols());

  auto pred_back = nnet::backward(m.predictor, pred_fwd, cfg.w_pred * ce.grad);
  dh1 += pred_back.dinput;
  out.predictor = std::move(pred_back.grads);

  auto dec_back = nnet::backward(m.decoder, dec_fwd, cfg.w_recon * rec.grad);
  const auto a = static_cast<Eigen::Index>(cfg.h1_dim);
  dh1 += dec_back.dinput.leftCols(a).cwiseProduct(h1_mask);
  dh2 += dec_back.dinput.rightCols(dec_back.dinput.cols() - a);
  out.decoder = std::move(dec_back.grads);

  // The adversarial terms enter with weight -w_adv; d MSE(p, t)/dt = -d MSE/dp.
  const auto back21 = nnet::backward(m.dis_h2_to_h1, d21, -cfg.w_adv * l21.grad);
  dh2 += back21.dinput;
  dh1 += cfg.w_adv * l21.grad;
  const auto back12 = nnet::backward(m.dis_h1_to_h2, d12, -cfg.w_adv * l12.grad);
  dh1 += back12.dinput;
  dh2 += cfg.w_adv * l12.grad;

  out.encoder = nnet::backward(m.encoder, enc, concat_cols(dh1, dh2)).grads;
  return out;
}

struct AdversaryGradients {
  double adv_21 = 0.0;
  double adv_12 = 0.0;
  nnet::Gradients dis_h2_to_h1;
  nnet::Gradients dis_h1_to_h2;
};

/// Adversarial objective L_21 + L_12 on fixed codes; gradients for the
/// disentanglers only.
inline AdversaryGradients adversary_objective(const UaiModel& m, const Batch& h1, const Batch& h2) {
  AdversaryGradients out;
  const auto f21 = nnet::forward(m.dis_h2_to_h1, h2);
  const auto l21 = nnet::mse(f21.output(), h1);
  out.adv_21 = l21.loss;
  out.dis_h2_to_h1 = nnet::backward(m.dis_h2_to_h1, f21, l21.grad).grads;
  const auto f12 = nnet::forward(m.dis_h1_to_h2, h1);
  const auto l12 = nnet::mse(f12.output(), h2);
  out.adv_12 = l12.loss;
  out.dis_h1_to_h2 = nnet::backward(m.dis_h1_to_h2, f12, l12.grad).grads;
  return out;
}

/// One main update: encoder, predictor and decoder move; disentanglers do not.
inline MainLosses main_step(UaiModel& m, const Batch& x, std::span<const int> speakers, const Batch& h1_mask) {
  auto g = main_objective(m, x, speakers, h1_mask);
  require<NumericError>(std::isfinite(g.losses.total), "non-finite UAI main loss (pred=", g.losses.pred,
                        " recon=", g.losses.recon, " adv=", g.losses.adv_21, "/", g.losses.adv_12, ")");
  nnet::adam_step(m.encoder, g.encoder, m.main_opt[0]);
  nnet::adam_step(m.predictor, g.predictor, m.main_opt[1]);
  nnet::adam_step(m.decoder, g.decoder, m.main_opt[2]);
  return g.losses;
}

/// One adversarial update on the current codes of `x`; only the
/// disentanglers move. Returns (L_21, L_12) before the update.
inline std::pair<double, double> adversary_step(UaiModel& m, const Batch& h1, const Batch& h2) {
  auto g = adversary_objective(m, h1, h2);
  require<NumericError>(std::isfinite(g.adv_21) && std::isfinite(g.adv_12), "non-finite UAI adversary loss");
  nnet::adam_step(m.dis_h2_to_h1, g.dis_h2_to_h1, m.adv_opt[0]);
  nnet::adam_step(m.dis_h1_to_h2, g.dis_h1_to_h2, m.adv_opt[1]);
  return {g.adv_21, g.adv_12};
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double main_loss = 0.0;
  double pred_loss = 0.0;
  double recon_loss = 0.0;
  double adv_21 = 0.0;
  double adv_12 = 0.0;
  double adversary_loss = 0.0;  // mean L_21 + L_12 over adversarial steps
  double val_speaker_accuracy = 0.0;
};

using TrainLog = std::vector<EpochRecord>;

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},         {"main_loss", r.main_loss}, {"pred_loss", r.pred_loss},
          {"recon_loss", r.recon_loss}, {"adv_21", r.adv_21},      {"adv_12", r.adv_12},
          {"adversary_loss", r.adversary_loss}, {"val_speaker_accuracy", r.val_speaker_accuracy}};
}

inline SplitCode encode(const UaiModel& m, const Batch& x) {
  return split_code(nnet::predict(m.encoder, x), m.cfg.h1_dim);
}

/// Fraction of `ids` whose speaker the predictor recovers from h1.
inline double speaker_accuracy(const UaiModel& m, const EmbeddingArchive& archive, const LabelTable& labels,
                               std::span<const std::string> ids) {
  if (ids.empty()) return 0.0;
  const Batch logits = nnet::predict(m.predictor, encode(m, archive.gather(ids)).h1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    Eigen::Index best;
    logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
    if (m.speakers[static_cast<std::size_t>(best)] == labels.label(ids[i], "speaker")) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ids.size());
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains `m` on split.train_ids for cfg.epochs epochs. Every mini-batch
/// takes one main step followed by adv_steps_per_main adversarial steps.
inline TrainLog train_uai(UaiModel& m, const EmbeddingArchive& archive, const LabelTable& labels,
                          const SplitSpec& split, const EpochCallback& on_epoch = {}) {
  const auto& cfg = m.cfg;
  require<ShapeError>(archive.dim() == cfg.input_dim, "archive dim ", archive.dim(), " does not match UAI input dim ",
                      cfg.input_dim);
  require<DataError>(!split.train_ids.empty(), "UAI training split is empty");
  if (m.speakers.empty()) {
    m.speakers = labels.classes("speaker", split.train_ids);
  }
  require<DataError>(m.speakers.size() == m.predictor.out_dim(), "training split has ", m.speakers.size(),
                     " speakers, predictor expects ", m.predictor.out_dim());
  std::map<std::string, int> speaker_index;
  for (std::size_t i = 0; i < m.speakers.size(); ++i) speaker_index[m.speakers[i]] = static_cast<int>(i);

  const Batch x_all = archive.gather(split.train_ids);
  std::vector<int> y_all(split.train_ids.size());
  for (std::size_t i = 0; i < split.train_ids.size(); ++i) {
    auto it = speaker_index.find(labels.label(split.train_ids[i], "speaker"));
    require<DataError>(it != speaker_index.end(), "unknown speaker for '", split.train_ids[i], "'");
    y_all[i] = it->second;
  }

  TrainLog log;
  std::vector<std::size_t> order(split.train_ids.size());
  const std::size_t n = order.size();
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const std::size_t epoch = m.epochs_trained + 1;
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng shuffle_rng(substream(cfg.seed, "uai.epoch", epoch));
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    Rng noise_rng(substream(cfg.seed, "uai.noise", epoch));

    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t batches = 0;
    std::size_t adv_steps = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t bsz = std::min(cfg.batch_size, n - start);
      Batch x(static_cast<Eigen::Index>(bsz), x_all.cols());
      std::vector<int> y(bsz);
      for (std::size_t i = 0; i < bsz; ++i) {
        x.row(static_cast<Eigen::Index>(i)) = x_all.row(static_cast<Eigen::Index>(order[start + i]));
        y[i] = y_all[order[start + i]];
      }
      const Batch mask =
          nnet::dropout_mask(static_cast<Eigen::Index>(bsz), static_cast<Eigen::Index>(cfg.h1_dim), cfg.keep_prob,
                             noise_rng);
      const MainLosses l = main_step(m, x, y, mask);
      rec.main_loss += l.total;
      rec.pred_loss += l.pred;
      rec.recon_loss += l.recon;
      rec.adv_21 += l.adv_21;
      rec.adv_12 += l.adv_12;
      ++batches;

      const SplitCode code = encode(m, x);
      for (std::size_t k = 0; k < cfg.adv_steps_per_main; ++k) {
        const auto [a21, a12] = adversary_step(m, code.h1, code.h2);
        rec.adversary_loss += a21 + a12;
        ++adv_steps;
      }
    }
    const double nb = static_cast<double>(batches);
    rec.main_loss /= nb;
    rec.pred_loss /= nb;
    rec.recon_loss /= nb;
    rec.adv_21 /= nb;
    rec.adv_12 /= nb;
    rec.adversary_loss /= static_cast<double>(adv_steps);
    rec.val_speaker_accuracy = speaker_accuracy(m, archive, labels, split.val_ids);
    ++m.epochs_trained;
    log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return log;
}

/// Noise-free h1 and h2 for every entry, ids in archive order.
inline std::pair<EmbeddingArchive, EmbeddingArchive> extract_embeddings(const UaiModel& m,
                                                                        const EmbeddingArchive& archive) {
  require<ShapeError>(archive.dim() == m.cfg.input_dim, "archive dim ", archive.dim(), " does not match UAI input dim ",
                      m.cfg.input_dim);
  if (archive.empty()) return {EmbeddingArchive(m.cfg.h1_dim), EmbeddingArchive(m.cfg.h2_dim)};
  const SplitCode code = encode(m, archive.matrix());
  return {EmbeddingArchive::from_rows(archive.ids(), code.h1), EmbeddingArchive::from_rows(archive.ids(), code.h2)};
}

/// Decoder output on the noise-free code [h1, h2].
inline EmbeddingArchive reconstruct(const UaiModel& m, const EmbeddingArchive& archive) {
  require<ShapeError>(archive.dim() == m.cfg.input_dim, "archive dim ", archive.dim(), " does not match UAI input dim ",
                      m.cfg.input_dim);
  if (archive.empty()) return EmbeddingArchive(m.cfg.input_dim);
  const Batch code = nnet::predict(m.encoder, archive.matrix());
  return EmbeddingArchive::from_rows(archive.ids(), nnet::predict(m.decoder, code));
}

inline nlohmann::json to_json(const UaiConfig& c) {
  return {{"input_dim", c.input_dim},
          {"h1_dim", c.h1_dim},
          {"h2_dim", c.h2_dim},
          {"n_speakers", c.n_speakers},
          {"encoder_hidden", c.encoder_hidden},
          {"predictor_hidden", c.predictor_hidden},
          {"decoder_hidden", c.decoder_hidden},
          {"disentangler_hidden", c.disentangler_hidden},
          {"code_activation", nnet::to_string(c.code_activation)},
          {"w_pred", c.w_pred},
          {"w_recon", c.w_recon},
          {"w_adv", c.w_adv},
          {"adv_steps_per_main", c.adv_steps_per_main},
          {"keep_prob", c.keep_prob},
          {"lr", c.lr},
          {"adv_lr", c.adv_lr},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"augmented", c.augmented}};
}

inline UaiConfig config_from_json(const nlohmann::json& j) {
  UaiConfig c;
  c.input_dim = j.value("input_dim", c.input_dim);
  c.h1_dim = j.value("h1_dim", c.h1_dim);
  c.h2_dim = j.value("h2_dim", c.h2_dim);
  c.n_speakers = j.value("n_speakers", c.n_speakers);
  c.encoder_hidden = j.value("encoder_hidden", c.encoder_hidden);
  c.predictor_hidden = j.value("predictor_hidden", c.predictor_hidden);
  c.decoder_hidden = j.value("decoder_hidden", c.decoder_hidden);
  c.disentangler_hidden = j.value("disentangler_hidden", c.disentangler_hidden);
  c.code_activation = nnet::activation_from_string(j.value("code_activation", std::string("tanh")));
  c.w_pred = j.value("w_pred", c.w_pred);
  c.w_recon = j.value("w_recon", c.w_recon);
  c.w_adv = j.value("w_adv", c.w_adv);
  c.adv_steps_per_main = j.value("adv_steps_per_main", c.adv_steps_per_main);
  c.keep_prob = j.value("keep_prob", c.keep_prob);
  c.lr = j.value("lr", c.lr);
  c.adv_lr = j.value("adv_lr", c.adv_lr);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.augmented = j.value("augmented", c.augmented);
  c.validate();
  return c;
}

/// Writes five network checkpoints plus uai.json into `dir`.
inline void save_uai(const UaiModel& m, const std::filesystem::path& dir, const std::string& data_fingerprint = "") {
  std::filesystem::create_directories(dir);
  nnet::save_network(m.encoder, dir / "encoder.nnet", m.main_opt[0].step_count);
  nnet::save_network(m.predictor, dir / "predictor.nnet", m.main_opt[1].step_count);
  nnet::save_network(m.decoder, dir / "decoder.nnet", m.main_opt[2].step_count);
  nnet::save_network(m.dis_h2_to_h1, dir / "dis_h2_to_h1.nnet", m.adv_opt[0].step_count);
  nnet::save_network(m.dis_h1_to_h2, dir / "dis_h1_to_h2.nnet", m.adv_opt[1].step_count);
  nlohmann::json manifest = {{"format", "UAI v1"},
                             {"cfg", to_json(m.cfg)},
                             {"epochs_trained", m.epochs_trained},
                             {"seed", m.cfg.seed},
                             {"speakers", m.speakers},
                             {"data_fingerprint", data_fingerprint}};
  std::ofstream out(dir / "uai.json", std::ios::binary | std::ios::trunc);
  require<DataError>(static_cast<bool>(out), "cannot write UAI manifest in '", dir.string(), "'");
  out << manifest.dump(2) << '\n';
}

/// Restores networks and metadata; optimizer moments start from zero.
inline UaiModel load_uai(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(spkdis::detail::read_file(dir / "uai.json"));
  } catch (const nlohmann::json::exception& e) {
    fail<DataError>(dir.string(), ": bad UAI manifest: ", e.what());
  }
  UaiModel m = build_uai(config_from_json(manifest.at("cfg")));
  m.speakers = manifest.value("speakers", std::vector<std::string>{});
  m.epochs_trained = manifest.value("epochs_trained", std::size_t{0});
  auto load_into = [&](nnet::Network& net, nnet::AdamState& opt, const char* name) {
    auto ck = nnet::load_network(dir / name);
    require<DataError>(ck.net.spec() == net.spec(), dir.string(), ": ", name, " does not match the configuration");
    net = std::move(ck.net);
    opt = nnet::AdamState::for_network(net, opt.lr);
    opt.step_count = ck.step_count;
  };
  load_into(m.encoder, m.main_opt[0], "encoder.nnet");
  load_into(m.predictor, m.main_opt[1], "predictor.nnet");
  load_into(m.decoder, m.main_opt[2], "decoder.nnet");
  load_into(m.dis_h2_to_h1, m.adv_opt[0], "dis_h2_to_h1.nnet");
  load_into(m.dis_h1_to_h2, m.adv_opt[1], "dis_h1_to_h2.nnet");
  return m;
}

}  // namespace spkdis::uai
