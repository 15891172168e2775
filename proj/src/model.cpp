// SPDX-License-Identifier: Apache-2.0
#include "diet/model.hpp"

#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace diet {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kLayerNormEps = 1e-5;
constexpr double kDivergenceLoss = 1e6;

// ---------------------------------------------------------------- helpers

struct LayerNormTape {
  Matrix xhat;
  Vector inv_std;
};

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormTape* tape) {
  const Index d = x.cols();
  Matrix xhat(x.rows(), d);
  Vector inv_std(x.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().sum() / static_cast<double>(d);
    inv_std(i) = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat.row(i) = (x.row(i).array() - mean) * inv_std(i);
  }
  Matrix y = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
  if (tape != nullptr) {
    tape->xhat = std::move(xhat);
    tape->inv_std = std::move(inv_std);
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const LayerNormTape& tape, const Matrix& gain, Matrix& dgain,
                           Matrix& dbias) {
  dgain += dy.cwiseProduct(tape.xhat).colwise().sum();
  dbias += dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * gain.row(0).array();
  const double d = static_cast<double>(dy.cols());
  Matrix dx(dy.rows(), dy.cols());
  for (Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).sum() / d;
    const double m2 = dxhat.row(i).dot(tape.xhat.row(i)) / d;
    dx.row(i) = tape.inv_std(i) * (dxhat.row(i).array() - m1 - tape.xhat.row(i).array() * m2);
  }
  return dx;
}

double gelu(double u) { return 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0))); }

double gelu_grad(double u) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(u / std::sqrt(2.0))) + u * inv_sqrt_2pi * std::exp(-0.5 * u * u);
}

Matrix row_broadcast(const Matrix& m, const Matrix& row) { return m.rowwise() + row.row(0); }

void zero_all(std::vector<NamedTensor> tensors) {
  for (auto& t : tensors) t.value->setZero();
}

const SegmentMap* segments_of(const Example& ex) { return ex.segments ? &*ex.segments : nullptr; }

// ---------------------------------------------------------------- forward with tape

struct HeadTape {
  Matrix q, k, v, probs;
  Matrix offset_probs;  // Shaw value path: probs collapsed onto clipped offsets
};

struct BlockTape {
  LayerNormTape ln1;
  Matrix h1;
  Matrix projected;  // Linformer E h1
  std::vector<HeadTape> heads;
  Matrix concat;
  LayerNormTape ln2;
  Matrix h2;
  Matrix pre;
  Matrix act;
};

struct Tape {
  std::vector<BlockTape> blocks;
  LayerNormTape final_ln;
  Matrix final_out;
};

/// Source of the additive per-head term during one forward pass.
struct BiasSource {
  const BiasCache* cache = nullptr;
  const SegmentMap* segmap = nullptr;

  void add_to(Matrix& scores, const PositionParams& params, Index layer, Index head, Index n) const {
    if (cache != nullptr) {
      scores += cache->bias(params, layer, head);
    } else if (auto b = head_bias(params, layer, head, n, segmap)) {
      scores += *b;
    }
  }
};

Matrix run_blocks(const Model& model, const Matrix& input, const BiasSource& bias, Tape* tape) {
  const auto& cfg = model.config.attention;
  const auto& params = model.position;
  const double scale = cfg.effective_scale();
  const auto* shaw = std::get_if<scheme::ShawRel>(&params.scheme());
  const Index n = input.rows();

  Matrix z = input;
  if (tape != nullptr) tape->blocks.resize(model.weights.blocks.size());
  for (std::size_t b = 0; b < model.weights.blocks.size(); ++b) {
    const auto& block = model.weights.blocks[b];
    const Index layer = static_cast<Index>(b);
    BlockTape local;
    BlockTape& bt = tape != nullptr ? tape->blocks[b] : local;

    bt.h1 = layer_norm(z, block.ln1_gain, block.ln1_bias, &bt.ln1);
    if (cfg.linformer()) bt.projected = block.attention.projection * bt.h1;
    const Matrix& source = cfg.linformer() ? bt.projected : bt.h1;

    const Index d_h = cfg.d_h;
    bt.concat.resize(n, cfg.heads * d_h);
    bt.heads.resize(static_cast<std::size_t>(cfg.heads));
    for (Index h = 0; h < cfg.heads; ++h) {
      const auto& w = block.attention.heads[static_cast<std::size_t>(h)];
      HeadTape& ht = bt.heads[static_cast<std::size_t>(h)];
      ht.q = bt.h1 * w.w_q;
      ht.k = source * w.w_k;
      ht.v = source * w.w_v;
      Matrix scores = token_scores(ht.q, ht.k, scale);
      if (shaw != nullptr) {
        Matrix rel = shaw_key_term(ht.q, params.slot(layer, h).shaw_key, shaw->clip, scores.cols());
        rel /= scale;
        scores += rel;
      }
      bias.add_to(scores, params, layer, h, n);
      ht.probs = softmax_rows(scores, 1.0);
      Matrix out = ht.probs * ht.v;
      if (shaw != nullptr && shaw->with_value) {
        const auto& a_v = params.slot(layer, h).shaw_value;
        ht.offset_probs = Matrix::Zero(n, a_v.rows());
        for (Index i = 0; i < n; ++i) {
          for (Index j = 0; j < ht.probs.cols(); ++j) ht.offset_probs(i, shaw_index(i, j, shaw->clip)) += ht.probs(i, j);
        }
        out += ht.offset_probs * a_v;
      }
      bt.concat.middleCols(h * d_h, d_h) = out;
    }
    Matrix mid = z + bt.concat * block.attention.w_o;

    bt.h2 = layer_norm(mid, block.ln2_gain, block.ln2_bias, &bt.ln2);
    bt.pre = row_broadcast(bt.h2 * block.ff_in, block.ff_in_bias);
    bt.act = bt.pre.unaryExpr([](double u) { return gelu(u); });
    z = mid + row_broadcast(bt.act * block.ff_out, block.ff_out_bias);
    if (!all_finite(z)) {
      throw NumericError("forward: non-finite activation in block " + std::to_string(b));
    }
  }
  LayerNormTape final_local;
  Matrix out = layer_norm(z, model.weights.final_gain, model.weights.final_bias,
                          tape != nullptr ? &tape->final_ln : &final_local);
  Matrix logits = row_broadcast(out * model.weights.classifier, model.weights.classifier_bias);
  if (tape != nullptr) tape->final_out = std::move(out);
  if (!all_finite(logits)) throw NumericError("forward: non-finite logits in classifier head");
  return logits;
}

// ---------------------------------------------------------------- backward

/// Adds the gradient of an additive bias term to the owning parameters.
void route_bias_grad(const Model& model, Index layer, Index head, const Matrix& dscores, const SegmentMap* segmap,
                     PositionParams& grads) {
  const auto& params = model.position;
  const bool positional = is_bias_scheme(params.scheme());
  const bool segments = params.segment_location() == SegmentLocation::PerHead && segmap != nullptr;
  if (!positional && !segments) return;
  const Index slot_id = params.slot_index(layer, head);
  const auto& slot = params.slot(slot_id);
  auto& g = grads.mutable_slot(slot_id);
  const Index n = dscores.rows();
  const Index keys = dscores.cols();
  if (std::holds_alternative<scheme::DietAbs>(params.scheme())) {
    g.p_q.topRows(n) += dscores * slot.p_k.topRows(keys);
    g.p_k.topRows(keys) += dscores.transpose() * slot.p_q.topRows(n);
  } else if (std::holds_alternative<scheme::DietRel>(params.scheme())) {
    const Index centre = params.n() - 1;
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < keys; ++j) g.rel(0, relative_offset(i, j) + centre) += dscores(i, j);
    }
  } else if (const auto* t5 = std::get_if<scheme::T5Bucketed>(&params.scheme())) {
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < keys; ++j) {
        g.buckets(0, t5_bucket(relative_offset(i, j), t5->num_buckets, t5->max_distance)) += dscores(i, j);
      }
    }
  }
  if (segments) {
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < keys; ++j) g.segment((*segmap)[i], (*segmap)[j]) += dscores(i, j);
    }
  }
}

/// Returns the gradient with respect to the first block's input.
Matrix backward(const Model& model, const Tape& tape, const Matrix& dlogits, const SegmentMap* segmap,
                Gradients& grads) {
  const auto& cfg = model.config.attention;
  const auto& params = model.position;
  const double scale = cfg.effective_scale();
  const auto* shaw = std::get_if<scheme::ShawRel>(&params.scheme());
  auto& gw = grads.weights;
  const auto& w = model.weights;

  gw.classifier += tape.final_out.transpose() * dlogits;
  gw.classifier_bias += dlogits.colwise().sum();
  Matrix dz = layer_norm_backward(dlogits * w.classifier.transpose(), tape.final_ln, w.final_gain, gw.final_gain,
                                  gw.final_bias);

  for (std::size_t bi = w.blocks.size(); bi-- > 0;) {
    const auto& block = w.blocks[bi];
    auto& gb = gw.blocks[bi];
    const auto& bt = tape.blocks[bi];
    const Index layer = static_cast<Index>(bi);
    const Index n = bt.h1.rows();

    // z_out = mid + gelu(h2 W1 + c1) W2 + c2
    gb.ff_out += bt.act.transpose() * dz;
    gb.ff_out_bias += dz.colwise().sum();
    const Matrix dact = dz * block.ff_out.transpose();
    const Matrix dpre = dact.cwiseProduct(bt.pre.unaryExpr([](double u) { return gelu_grad(u); }));
    gb.ff_in += bt.h2.transpose() * dpre;
    gb.ff_in_bias += dpre.colwise().sum();
    Matrix dmid = dz + layer_norm_backward(dpre * block.ff_in.transpose(), bt.ln2, block.ln2_gain, gb.ln2_gain,
                                           gb.ln2_bias);

    // mid = z_in + concat W_O
    gb.attention.w_o += bt.concat.transpose() * dmid;
    const Matrix dconcat = dmid * block.attention.w_o.transpose();
    const Matrix& source = cfg.linformer() ? bt.projected : bt.h1;
    Matrix dh1 = Matrix::Zero(n, cfg.d);
    Matrix dsource = Matrix::Zero(source.rows(), cfg.d);

    for (Index h = 0; h < cfg.heads; ++h) {
      const auto& hw = block.attention.heads[static_cast<std::size_t>(h)];
      auto& ghw = gb.attention.heads[static_cast<std::size_t>(h)];
      const auto& ht = bt.heads[static_cast<std::size_t>(h)];
      const Matrix dout = dconcat.middleCols(h * cfg.d_h, cfg.d_h);

      Matrix dprobs = dout * ht.v.transpose();
      const Matrix dv = ht.probs.transpose() * dout;
      if (shaw != nullptr && shaw->with_value) {
        const Index slot_id = params.slot_index(layer, h);
        const auto& a_v = params.slot(slot_id).shaw_value;
        const Matrix doffset = dout * a_v.transpose();
        for (Index i = 0; i < n; ++i) {
          for (Index j = 0; j < dprobs.cols(); ++j) dprobs(i, j) += doffset(i, shaw_index(i, j, shaw->clip));
        }
        grads.position.mutable_slot(slot_id).shaw_value += ht.offset_probs.transpose() * dout;
      }

      Matrix dscores(n, ht.probs.cols());
      for (Index i = 0; i < n; ++i) {
        const double inner = dprobs.row(i).dot(ht.probs.row(i));
        dscores.row(i) = ht.probs.row(i).array() * (dprobs.row(i).array() - inner);
      }

      route_bias_grad(model, layer, h, dscores, segmap, grads.position);

      Matrix dq = dscores * ht.k;
      dq /= scale;
      Matrix dk = dscores.transpose() * ht.q;
      dk /= scale;
      if (shaw != nullptr) {
        const Index slot_id = params.slot_index(layer, h);
        const auto& a_k = params.slot(slot_id).shaw_key;
        Matrix per_offset = Matrix::Zero(n, a_k.rows());
        for (Index i = 0; i < n; ++i) {
          for (Index j = 0; j < dscores.cols(); ++j) per_offset(i, shaw_index(i, j, shaw->clip)) += dscores(i, j);
        }
        per_offset /= scale;
        dq += per_offset * a_k;
        grads.position.mutable_slot(slot_id).shaw_key += per_offset.transpose() * ht.q;
      }

      ghw.w_q += bt.h1.transpose() * dq;
      dh1 += dq * hw.w_q.transpose();
      ghw.w_k += source.transpose() * dk;
      ghw.w_v += source.transpose() * dv;
      dsource += dk * hw.w_k.transpose();
      dsource += dv * hw.w_v.transpose();
    }
    if (cfg.linformer()) {
      gb.attention.projection += dsource * bt.h1.transpose();
      dh1 += block.attention.projection.transpose() * dsource;
    } else {
      dh1 += dsource;
    }
    dz = dmid + layer_norm_backward(dh1, bt.ln1, block.ln1_gain, gb.ln1_gain, gb.ln1_bias);
  }
  return dz;
}

struct LossTerms {
  double loss = 0.0;
  Matrix dlogits;
  Index correct = 0;
};

LossTerms example_loss(const Matrix& logits, const std::vector<Index>& labels, LossKind kind, double weight) {
  const Index n = logits.rows();
  const Index classes = logits.cols();
  if (static_cast<Index>(labels.size()) != n) {
    throw InputError("loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " positions");
  }
  LossTerms terms;
  terms.dlogits.resize(n, classes);
  for (Index i = 0; i < n; ++i) {
    const Index label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= classes) throw InputError("loss: label " + std::to_string(label) + " out of range");
    Index best = 0;
    logits.row(i).maxCoeff(&best);
    if (best == label) ++terms.correct;
  }
  if (kind == LossKind::CrossEntropy) {
    const Matrix probs = softmax_rows(logits, 1.0);
    for (Index i = 0; i < n; ++i) {
      const Index label = labels[static_cast<std::size_t>(i)];
      const double row_max = logits.row(i).maxCoeff();
      const double log_norm = row_max + std::log((logits.row(i).array() - row_max).exp().sum());
      terms.loss += log_norm - logits(i, label);
      terms.dlogits.row(i) = probs.row(i);
      terms.dlogits(i, label) -= 1.0;
    }
    terms.loss *= weight / static_cast<double>(n);
    terms.dlogits *= weight / static_cast<double>(n);
  } else {
    Matrix residual = logits;
    for (Index i = 0; i < n; ++i) residual(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
    const double denom = static_cast<double>(n * classes);
    terms.loss = weight * residual.squaredNorm() / denom;
    terms.dlogits = residual * (2.0 * weight / denom);
  }
  return terms;
}

/// Bias source shared by every example of a batch when the bias does not
/// depend on the example.
std::optional<BiasCache> batch_cache(const Model& model, Index n) {
  if (!is_bias_scheme(model.position.scheme())) return std::nullopt;
  if (model.position.segment_location() == SegmentLocation::PerHead) return std::nullopt;
  return build_cache(model.position, n, nullptr);
}

std::string block_name(std::size_t b) { return "model/block" + std::to_string(b) + "/"; }

}  // namespace

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  attention.validate();
  if (vocab < 1 || num_classes < 1) throw ConfigError("model: vocab and num_classes must be positive");
  if (ff_width() < 1) throw ConfigError("model: feed-forward width must be positive");
}

// ---------------------------------------------------------------- weights

std::vector<ConstNamedTensor> ModelWeights::tensors() const {
  std::vector<ConstNamedTensor> out;
  out.push_back({"model/token_embedding", &token_embedding});
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& block = blocks[b];
    const std::string prefix = block_name(b);
    for (std::size_t h = 0; h < block.attention.heads.size(); ++h) {
      const std::string head = prefix + "head" + std::to_string(h) + "/";
      out.push_back({head + "w_q", &block.attention.heads[h].w_q});
      out.push_back({head + "w_k", &block.attention.heads[h].w_k});
      out.push_back({head + "w_v", &block.attention.heads[h].w_v});
    }
    out.push_back({prefix + "w_o", &block.attention.w_o});
    if (block.attention.projection.size() > 0) out.push_back({prefix + "projection", &block.attention.projection});
    out.push_back({prefix + "ln1_gain", &block.ln1_gain});
    out.push_back({prefix + "ln1_bias", &block.ln1_bias});
    out.push_back({prefix + "ln2_gain", &block.ln2_gain});
    out.push_back({prefix + "ln2_bias", &block.ln2_bias});
    out.push_back({prefix + "ff_in", &block.ff_in});
    out.push_back({prefix + "ff_in_bias", &block.ff_in_bias});
    out.push_back({prefix + "ff_out", &block.ff_out});
    out.push_back({prefix + "ff_out_bias", &block.ff_out_bias});
  }
  out.push_back({"model/final_gain", &final_gain});
  out.push_back({"model/final_bias", &final_bias});
  out.push_back({"model/classifier", &classifier});
  out.push_back({"model/classifier_bias", &classifier_bias});
  return out;
}

std::vector<NamedTensor> ModelWeights::tensors() {
  std::vector<NamedTensor> out;
  for (const auto& [key, value] : std::as_const(*this).tensors()) out.push_back({key, const_cast<Matrix*>(value)});
  return out;
}

Index Model::parameter_count() const {
  Index total = position.parameter_count();
  for (const auto& t : weights.tensors()) total += t.value->size();
  return total;
}

Model init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const auto& cfg = config.attention;
  Rng root(seed);
  Rng rng = root.split(0);
  Model model{config, {}, init_params(cfg, root.split(1)())};
  auto& w = model.weights;
  w.token_embedding = randn_matrix(config.vocab, cfg.d, kInitStd, rng);
  for (Index b = 0; b < cfg.layers; ++b) {
    BlockWeights block;
    block.attention = init_layer_weights(cfg, rng, kInitStd);
    block.ln1_gain = Matrix::Ones(1, cfg.d);
    block.ln1_bias = Matrix::Zero(1, cfg.d);
    block.ln2_gain = Matrix::Ones(1, cfg.d);
    block.ln2_bias = Matrix::Zero(1, cfg.d);
    block.ff_in = randn_matrix(cfg.d, config.ff_width(), kInitStd, rng);
    block.ff_in_bias = Matrix::Zero(1, config.ff_width());
    block.ff_out = randn_matrix(config.ff_width(), cfg.d, kInitStd, rng);
    block.ff_out_bias = Matrix::Zero(1, cfg.d);
    w.blocks.push_back(std::move(block));
  }
  w.final_gain = Matrix::Ones(1, cfg.d);
  w.final_bias = Matrix::Zero(1, cfg.d);
  w.classifier = randn_matrix(cfg.d, config.num_classes, kInitStd, rng);
  w.classifier_bias = Matrix::Zero(1, config.num_classes);
  return model;
}

Model zeros_like(const Model& model) {
  Model out = model;
  zero_all(out.weights.tensors());
  zero_all(out.position.tensors());
  return out;
}

void randomize(Model& model, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& [key, value] : model.weights.tensors()) {
    const bool gain = key.size() >= 5 && key.compare(key.size() - 5, 5, "_gain") == 0;
    Matrix noise = randn_matrix(value->rows(), value->cols(), stddev, rng);
    *value = gain ? (Matrix::Ones(value->rows(), value->cols()) + noise).eval() : noise;
  }
  for (auto& [key, value] : model.position.tensors()) {
    *value = randn_matrix(value->rows(), value->cols(), stddev, rng);
  }
}

// ---------------------------------------------------------------- forward

Matrix embed_tokens(const Model& model, const std::vector<Index>& tokens) {
  const auto& table = model.weights.token_embedding;
  Matrix x(static_cast<Index>(tokens.size()), table.cols());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= table.rows()) {
      throw InputError("forward: token " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                       " outside vocabulary of " + std::to_string(table.rows()));
    }
    x.row(static_cast<Index>(i)) = table.row(tokens[i]);
  }
  return x;
}

Matrix model_input(const Model& model, const Eigen::Ref<const Matrix>& embedded, const SegmentMap* segmap) {
  Matrix z = embedded;
  const auto& params = model.position;
  if (params.input_table().size() > 0) {
    if (z.rows() > params.input_table().rows()) {
      throw InputError("forward: sequence of length " + std::to_string(z.rows()) + " exceeds position table");
    }
    z += params.input_table().topRows(z.rows());
  }
  if (params.segment_table().size() > 0 && segmap != nullptr) {
    if (segmap->size() != z.rows()) throw DimensionError("forward: segment map length does not match sequence");
    for (Index i = 0; i < z.rows(); ++i) z.row(i) += params.segment_table().row((*segmap)[i]);
  }
  return z;
}

Matrix forward_input(const Model& model, const Eigen::Ref<const Matrix>& input, const SegmentMap* segmap,
                     const BiasCache* cache) {
  return run_blocks(model, input, BiasSource{cache, segmap}, nullptr);
}

Matrix forward(const Model& model, const std::vector<Index>& tokens, const SegmentMap* segmap,
               const BiasCache* cache) {
  return forward_input(model, model_input(model, embed_tokens(model, tokens), segmap), segmap, cache);
}

std::vector<std::vector<HeadScores>> attention_scores(const Model& model, const std::vector<Index>& tokens,
                                                      const SegmentMap* segmap) {
  Tape tape;
  run_blocks(model, model_input(model, embed_tokens(model, tokens), segmap), BiasSource{nullptr, segmap}, &tape);
  const auto& cfg = model.config.attention;
  const auto* shaw = std::get_if<scheme::ShawRel>(&model.position.scheme());
  std::vector<std::vector<HeadScores>> out;
  for (std::size_t b = 0; b < tape.blocks.size(); ++b) {
    const Index layer = static_cast<Index>(b);
    std::vector<HeadScores> heads;
    for (Index h = 0; h < cfg.heads; ++h) {
      const auto& ht = tape.blocks[b].heads[static_cast<std::size_t>(h)];
      HeadScores hs;
      hs.token = token_scores(ht.q, ht.k, cfg.effective_scale());
      if (shaw != nullptr) {
        Matrix rel = shaw_key_term(ht.q, model.position.slot(layer, h).shaw_key, shaw->clip, hs.token.cols());
        rel /= cfg.effective_scale();
        hs.token += rel;
      }
      hs.bias = head_bias(model.position, layer, h, ht.q.rows(), segmap);
      hs.scores = hs.token;
      if (hs.bias) hs.scores += *hs.bias;
      heads.push_back(std::move(hs));
    }
    out.push_back(std::move(heads));
  }
  return out;
}

// ---------------------------------------------------------------- loss

double loss_from_inputs(const Model& model, const Batch& batch, const std::vector<Matrix>& embedded, LossKind kind) {
  if (batch.empty()) throw InputError("loss: empty batch");
  const double weight = 1.0 / static_cast<double>(batch.size());
  const auto cache = batch_cache(model, embedded.front().rows());
  double total = 0.0;
  for (std::size_t e = 0; e < batch.size(); ++e) {
    const SegmentMap* segmap = segments_of(batch[e]);
    const Matrix logits =
        run_blocks(model, model_input(model, embedded[e], segmap), BiasSource{cache ? &*cache : nullptr, segmap},
                   nullptr);
    total += example_loss(logits, batch[e].labels, kind, weight).loss;
  }
  if (!std::isfinite(total)) throw NumericError("loss: non-finite value");
  return total;
}

double loss(const Model& model, const Batch& batch, LossKind kind) {
  std::vector<Matrix> embedded;
  for (const auto& ex : batch) embedded.push_back(embed_tokens(model, ex.tokens));
  return loss_from_inputs(model, batch, embedded, kind);
}

LossAndGrads loss_and_grads(const Model& model, const Batch& batch, LossKind kind) {
  if (batch.empty()) throw InputError("loss_and_grads: empty batch");
  Model zero = zeros_like(model);
  LossAndGrads result;
  result.grads.weights = std::move(zero.weights);
  result.grads.position = std::move(zero.position);

  const double weight = 1.0 / static_cast<double>(batch.size());
  const auto cache = batch_cache(model, static_cast<Index>(batch.front().tokens.size()));
  Index correct = 0;
  Index positions = 0;
  for (const auto& ex : batch) {
    const SegmentMap* segmap = segments_of(ex);
    const Matrix embedded = embed_tokens(model, ex.tokens);
    Tape tape;
    const Matrix logits =
        run_blocks(model, model_input(model, embedded, segmap), BiasSource{cache ? &*cache : nullptr, segmap}, &tape);
    LossTerms terms = example_loss(logits, ex.labels, kind, weight);
    result.loss += terms.loss;
    correct += terms.correct;
    positions += logits.rows();

    const Matrix dinput = backward(model, tape, terms.dlogits, segmap, result.grads);
    auto& gw = result.grads.weights;
    for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
      gw.token_embedding.row(ex.tokens[i]) += dinput.row(static_cast<Index>(i));
    }
    if (std::holds_alternative<scheme::InputAdditiveLearned>(model.position.scheme())) {
      result.grads.position.mutable_input_table().topRows(dinput.rows()) += dinput;
    }
    if (model.position.segment_table().size() > 0 && segmap != nullptr) {
      auto& table = result.grads.position.mutable_segment_table();
      for (Index i = 0; i < dinput.rows(); ++i) table.row((*segmap)[i]) += dinput.row(i);
    }
    result.grads.inputs.push_back(dinput);
  }
  if (!std::isfinite(result.loss)) throw NumericError("loss_and_grads: non-finite loss");
  result.accuracy = static_cast<double>(correct) / static_cast<double>(positions);
  return result;
}

double accuracy(const Model& model, const Batch& batch) {
  Index correct = 0;
  Index positions = 0;
  const auto cache = batch.empty() ? std::nullopt : batch_cache(model, static_cast<Index>(batch.front().tokens.size()));
  for (const auto& ex : batch) {
    const SegmentMap* segmap = segments_of(ex);
    const Matrix logits = forward(model, ex.tokens, segmap, cache ? &*cache : nullptr);
    for (Index i = 0; i < logits.rows(); ++i) {
      Index best = 0;
      logits.row(i).maxCoeff(&best);
      if (best == ex.labels[static_cast<std::size_t>(i)]) ++correct;
    }
    positions += logits.rows();
  }
  return positions == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(positions);
}

// ---------------------------------------------------------------- tasks

Task Task::position_probe(Index n, Index num_classes) {
  Task task;
  task.kind = Kind::PositionProbe;
  task.n = n;
  task.vocab = 2;
  task.num_classes = num_classes > 0 ? num_classes : n;
  return task;
}

Task Task::selective_copy(Index n, Index vocab, Index shift) {
  Task task;
  task.kind = Kind::SelectiveCopy;
  task.n = n;
  task.vocab = vocab;
  task.num_classes = vocab;
  task.shift = shift;
  return task;
}

Example Task::sample(Rng& rng) const {
  Example ex;
  ex.tokens.resize(static_cast<std::size_t>(n));
  ex.labels.resize(static_cast<std::size_t>(n));
  if (num_segments > 1) {
    std::vector<Index> lengths(static_cast<std::size_t>(num_segments), n / num_segments);
    lengths.back() += n % num_segments;
    ex.segments = SegmentMap::runs(lengths);
  }
  if (kind == Kind::PositionProbe) {
    for (Index i = 0; i < n; ++i) {
      ex.tokens[static_cast<std::size_t>(i)] = i == 0 ? 0 : 1;
      ex.labels[static_cast<std::size_t>(i)] = i % num_classes;
    }
    return ex;
  }
  for (auto& t : ex.tokens) t = static_cast<Index>(rng.below(static_cast<std::uint64_t>(vocab)));
  for (Index i = 0; i < n; ++i) {
    ex.labels[static_cast<std::size_t>(i)] = ex.tokens[static_cast<std::size_t>((i + shift) % n)];
  }
  return ex;
}

Batch Task::batch(Index size, Rng& rng) const {
  Batch out;
  for (Index b = 0; b < size; ++b) out.push_back(sample(rng));
  return out;
}

std::string Task::name() const { return kind == Kind::PositionProbe ? "position-probe" : "selective-copy"; }

ModelConfig model_config_for(const Task& task, const AttentionConfig& attention) {
  ModelConfig config;
  config.attention = attention;
  config.attention.n = task.n;
  config.vocab = task.vocab;
  config.num_classes = task.num_classes;
  return config;
}

// ---------------------------------------------------------------- training

void OptimizerState::step(Model& model, Gradients& grads) {
  auto params = model.weights.tensors();
  auto extra = model.position.tensors();
  params.insert(params.end(), extra.begin(), extra.end());
  auto gradients = grads.weights.tensors();
  auto gextra = grads.position.tensors();
  gradients.insert(gradients.end(), gextra.begin(), gextra.end());

  if (const auto* sgd = std::get_if<Sgd>(&optimizer_)) {
    for (std::size_t i = 0; i < params.size(); ++i) *params[i].value -= sgd->lr * *gradients[i].value;
    return;
  }
  const auto& adam = std::get<Adam>(optimizer_);
  if (first_.empty()) {
    for (const auto& p : params) {
      first_.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
      second_.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(adam.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(adam.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = *gradients[i].value;
    first_[i] = adam.beta1 * first_[i] + (1.0 - adam.beta1) * g;
    second_[i] = adam.beta2 * second_[i] + (1.0 - adam.beta2) * g.cwiseProduct(g);
    const auto m_hat = first_[i].array() / c1;
    const auto v_hat = second_[i].array() / c2;
    params[i].value->array() -= adam.lr * m_hat / (v_hat.sqrt() + adam.eps);
  }
}

std::string History::to_csv() const {
  std::ostringstream os;
  os << "step,loss,metric\n";
  char line[128];
  for (const auto& r : steps) {
    std::snprintf(line, sizeof(line), "%ld,%.17g,%.17g\n", r.step, r.loss, r.metric);
    os << line;
  }
  return os.str();
}

History train(Model& model, const Task& task, const TrainOptions& options) {
  if (options.steps <= 0) throw ConfigError("train: steps must be positive");
  Rng rng = Rng(options.seed).split(2);
  OptimizerState optimizer(options.optimizer);
  History history;
  for (long step = 0; step < options.steps; ++step) {
    const Batch batch = task.batch(options.batch_size, rng);
    LossAndGrads lg;
    try {
      lg = loss_and_grads(model, batch, options.loss);
    } catch (const NumericError& e) {
      throw DivergenceError(std::string("train: ") + e.what() + " at step " + std::to_string(step), step);
    }
    if (!(lg.loss <= kDivergenceLoss)) {
      throw DivergenceError("train: loss " + std::to_string(lg.loss) + " diverged at step " + std::to_string(step),
                            step);
    }
    history.steps.push_back({step, lg.loss, lg.accuracy});
    optimizer.step(model, lg.grads);
  }
  Rng eval_rng = Rng(options.seed).split(3);
  history.final_metric = accuracy(model, task.batch(options.eval_batch, eval_rng));
  return history;
}

// ---------------------------------------------------------------- rank stress

Matrix rank_stress_input(const AttentionConfig& config, std::uint64_t seed) {
  Rng rng = Rng(seed).split(10);
  const Matrix g = randn_matrix(config.n, config.d, 1.0, rng);
  // Orthogonalised Gaussian: keeps the token path well conditioned.
  const Index cols = std::min(config.n, config.d);
  const Matrix q = Eigen::HouseholderQR<Matrix>(g).householderQ() * Matrix::Identity(config.n, cols);
  Matrix x = Matrix::Zero(config.n, config.d);
  x.leftCols(cols) = std::sqrt(static_cast<double>(config.n)) * q;
  return x;
}

RankStressResult rank_stress_fit(const AttentionConfig& config, const Eigen::Ref<const Matrix>& target,
                                 const RankStressOptions& options) {
  config.validate();
  const Index n = config.n;
  if (target.rows() != n || target.cols() != n) {
    throw DimensionError("rank_stress_fit: target " + shape_str(target) + " must be " + shape_str(n, n));
  }
  const bool additive = is_input_additive(config.scheme);
  const auto* abs = std::get_if<scheme::DietAbs>(&config.scheme);
  if (!additive && abs == nullptr) throw SchemeError("rank_stress_fit: supports input-add and diet-abs only");
  if (options.steps <= 0) throw ConfigError("rank_stress_fit: steps must be positive");

  const double scale = config.effective_scale();
  const Matrix x = rank_stress_input(config, options.seed);
  Rng rng = Rng(options.seed).split(11);
  // Factor scales chosen so each additive part starts at the target's RMS.
  const double rms = std::max(target.norm() / static_cast<double>(n), 1e-3);
  const double row_sq = (x.squaredNorm() / static_cast<double>(n)) / static_cast<double>(config.d);
  const double w_std = std::sqrt(rms * scale / (std::sqrt(static_cast<double>(config.d_h)) * static_cast<double>(config.d) * row_sq));
  std::vector<Matrix> params;
  params.push_back(randn_matrix(config.d, config.d_h, w_std, rng));  // W_Q
  params.push_back(randn_matrix(config.d, config.d_h, w_std, rng));  // W_K
  if (additive) {
    params.push_back(randn_matrix(n, config.d, 0.1, rng));  // P
  } else {
    const double p_std = std::sqrt(rms / std::sqrt(static_cast<double>(abs->d_p)));
    params.push_back(randn_matrix(n, abs->d_p, p_std, rng));  // P_Q
    params.push_back(randn_matrix(n, abs->d_p, p_std, rng));  // P_K
  }

  const auto scores = [&](const std::vector<Matrix>& p) -> std::pair<Matrix, Matrix> {
    const Matrix z = additive ? Matrix(x + p[2]) : x;
    Matrix a = token_scores(z * p[0], z * p[1], scale);
    if (!additive) a += p[2] * p[3].transpose();
    return {a, z};
  };

  std::vector<Matrix> first, second;
  for (const auto& p : params) {
    first.push_back(Matrix::Zero(p.rows(), p.cols()));
    second.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
  const Adam adam{options.lr};
  const double decay = std::pow(options.final_lr / options.lr, 1.0 / static_cast<double>(options.steps));
  double lr = options.lr;
  RankStressResult result;
  result.target_rank = numerical_rank(target);
  for (long step = 0; step < options.steps; ++step) {
    const auto [a, z] = scores(params);
    const Matrix da = 2.0 * (a - target);
    const double loss = (a - target).squaredNorm();
    if (!(loss <= kDivergenceLoss)) throw DivergenceError("rank_stress_fit: diverged", step);
    if (step % 100 == 0) result.history.push_back(std::sqrt(loss));

    const Matrix q = z * params[0];
    const Matrix k = z * params[1];
    const Matrix dq = da * k / scale;
    const Matrix dk = da.transpose() * q / scale;
    std::vector<Matrix> grads{z.transpose() * dq, z.transpose() * dk};
    if (additive) {
      grads.push_back(dq * params[0].transpose() + dk * params[1].transpose());
    } else {
      grads.push_back(da * params[3]);
      grads.push_back(da.transpose() * params[2]);
    }
    const double c1 = 1.0 - std::pow(adam.beta1, static_cast<double>(step + 1));
    const double c2 = 1.0 - std::pow(adam.beta2, static_cast<double>(step + 1));
    for (std::size_t i = 0; i < params.size(); ++i) {
      first[i] = adam.beta1 * first[i] + (1.0 - adam.beta1) * grads[i];
      second[i] = adam.beta2 * second[i] + (1.0 - adam.beta2) * grads[i].cwiseProduct(grads[i]);
      params[i].array() -= lr * (first[i].array() / c1) / ((second[i].array() / c2).sqrt() + adam.eps);
    }
    lr *= decay;
  }
  const Matrix final_scores = scores(params).first;
  result.residual = (final_scores - target).norm();
  result.achieved_rank = numerical_rank(final_scores);
  return result;
}

// ---------------------------------------------------------------- checkpoints & json

nlohmann::json to_json(const AttentionConfig& c) {
  nlohmann::json scheme_json = {{"name", scheme_name(c.scheme)}};
  if (const auto* abs = std::get_if<scheme::DietAbs>(&c.scheme)) scheme_json["d_p"] = abs->d_p;
  if (const auto* shaw = std::get_if<scheme::ShawRel>(&c.scheme)) {
    scheme_json["clip"] = shaw->clip;
    scheme_json["with_value"] = shaw->with_value;
  }
  if (const auto* t5 = std::get_if<scheme::T5Bucketed>(&c.scheme)) {
    scheme_json["num_buckets"] = t5->num_buckets;
    scheme_json["max_distance"] = t5->max_distance;
  }
  nlohmann::json j = {{"n", c.n},
                      {"d", c.d},
                      {"heads", c.heads},
                      {"d_h", c.d_h},
                      {"layers", c.layers},
                      {"scheme", scheme_json},
                      {"sharing", sharing_name(c.sharing)},
                      {"num_segments", c.num_segments},
                      {"segment_location", segment_location_name(c.segment_location)},
                      {"scale", c.effective_scale()}};
  j["linformer_k"] = c.linformer_k ? nlohmann::json(*c.linformer_k) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"attention", to_json(c.attention)}, {"vocab", c.vocab}, {"num_classes", c.num_classes}, {"d_ff", c.ff_width()}};
}

AttentionConfig attention_config_from_json(const nlohmann::json& j) {
  AttentionConfig c;
  try {
    c.n = j.at("n").get<Index>();
    c.d = j.at("d").get<Index>();
    c.heads = j.at("heads").get<Index>();
    c.d_h = j.at("d_h").get<Index>();
    c.layers = j.at("layers").get<Index>();
    const auto& s = j.at("scheme");
    const auto name = s.at("name").get<std::string>();
    if (name == "none") c.scheme = scheme::None{};
    else if (name == "input-add") c.scheme = scheme::InputAdditiveLearned{};
    else if (name == "sinusoidal") c.scheme = scheme::InputAdditiveSinusoidal{};
    else if (name == "diet-abs") c.scheme = scheme::DietAbs{s.at("d_p").get<Index>()};
    else if (name == "diet-rel") c.scheme = scheme::DietRel{};
    else if (name == "shaw") c.scheme = scheme::ShawRel{s.at("clip").get<Index>(), s.value("with_value", false)};
    else if (name == "t5") c.scheme = scheme::T5Bucketed{s.at("num_buckets").get<Index>(), s.at("max_distance").get<Index>()};
    else throw ConfigError("config: unknown scheme '" + name + "'");
    c.sharing = parse_sharing(j.at("sharing").get<std::string>());
    c.num_segments = j.at("num_segments").get<Index>();
    c.segment_location = parse_segment_location(j.at("segment_location").get<std::string>());
    if (j.contains("scale") && !j.at("scale").is_null()) c.scale = j.at("scale").get<double>();
    if (j.contains("linformer_k") && !j.at("linformer_k").is_null()) c.linformer_k = j.at("linformer_k").get<Index>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: malformed attention config: ") + e.what());
  }
  c.validate();
  return c;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.attention = attention_config_from_json(j.at("attention"));
    c.vocab = j.at("vocab").get<Index>();
    c.num_classes = j.at("num_classes").get<Index>();
    c.d_ff = j.at("d_ff").get<Index>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

void save_checkpoint(const Model& model, const std::filesystem::path& stem, const nlohmann::json& extra) {
  Archive archive;
  for (const auto& [key, value] : model.weights.tensors()) archive.put(key, *value);
  export_params(model.position, archive);
  archive.metadata["model_config"] = to_json(model.config);
  if (!extra.is_null()) archive.metadata["run"] = extra;
  save_archive(archive, stem);
}

Model load_checkpoint(const std::filesystem::path& stem) {
  const Archive archive = load_archive(stem);
  if (!archive.metadata.contains("model_config")) throw InputError("checkpoint: manifest lacks model_config");
  const ModelConfig config = model_config_from_json(archive.metadata.at("model_config"));
  Model model = init_model(config, 0);
  for (auto& [key, value] : model.weights.tensors()) {
    const Matrix& stored = archive.get(key);
    if (stored.rows() != value->rows() || stored.cols() != value->cols()) {
      throw DimensionError("checkpoint: '" + key + "' is " + shape_str(stored) + ", expected " + shape_str(*value));
    }
    *value = stored;
  }
  model.position = import_params(config.attention, archive);
  return model;
}

}  // namespace diet
