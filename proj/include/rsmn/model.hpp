#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rsmn/ops.hpp"
#include "rsmn/rng.hpp"
#include "rsmn/tensor.hpp"

namespace rsmn {

enum class Head { kSigmoid, kSoftmax };

inline std::string head_name(Head h) { return h == Head::kSigmoid ? "sigmoid" : "softmax"; }
inline Head head_from_name(const std::string& s) {
  if (s == "sigmoid") return Head::kSigmoid;
  if (s == "softmax") return Head::kSoftmax;
  throw ArgumentError("unknown head '" + s + "' (expected sigmoid|softmax)");
}

// Architectural hyperparameters. Kernel counts are surfaced here so they can
// be changed without touching code.
struct ModelConfig {
  int in_channels = 3;
  int resolution = 48;
  int fpn_channels1 = 16;
  int fpn_channels2 = 32;
  int convlstm_hidden = 32;
  int convlstm_kernel = 3;
  int head_conv_channels = 64;
  int head_conv_kernel = 2;
  int nonlocal_bottleneck = 16;  // convlstm_hidden / 2
  bool use_tsa = true;
  Head head = Head::kSigmoid;
  double dropout_p = 0.5;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  int feature_size() const { return resolution / 4; }  // ConvLSTM spatial extent
  int head_pool_size() const { return feature_size() / 2; }
  int head_spatial() const { return head_pool_size() - head_conv_kernel + 1; }
  int embedding_width() const { return head_conv_channels * head_spatial() * head_spatial(); }
  int output_width() const { return head == Head::kSigmoid ? 1 : 2; }

  void validate() const {
    if (in_channels < 1 || fpn_channels1 < 1 || fpn_channels2 < 1 || convlstm_hidden < 1 ||
        head_conv_channels < 1)
      throw ArgumentError("model config: channel counts must be >= 1");
    if (nonlocal_bottleneck < 1)
      throw ArgumentError("model config: nonlocal bottleneck must be >= 1");
    if (resolution % 4 != 0 || (resolution / 4) % 2 != 0)
      throw ArgumentError("model config: resolution must be divisible by 4 with an even "
                          "pooled extent, got " + std::to_string(resolution));
    if (head_spatial() < 1)
      throw ArgumentError("model config: spatial extent too small for the head conv");
    if (dropout_p < 0.0 || dropout_p >= 1.0)
      throw ArgumentError("model config: dropout_p must be in [0, 1)");
    if (convlstm_kernel < 1 || convlstm_kernel % 2 == 0 || head_conv_kernel < 1)
      throw ArgumentError("model config: bad kernel size");
  }

  nlohmann::json to_json() const {
    return {{"in_channels", in_channels},
            {"resolution", resolution},
            {"fpn_channels1", fpn_channels1},
            {"fpn_channels2", fpn_channels2},
            {"convlstm_hidden", convlstm_hidden},
            {"convlstm_kernel", convlstm_kernel},
            {"head_conv_channels", head_conv_channels},
            {"head_conv_kernel", head_conv_kernel},
            {"nonlocal_bottleneck", nonlocal_bottleneck},
            {"use_tsa", use_tsa},
            {"head", head_name(head)},
            {"dropout_p", dropout_p},
            {"bn_eps", bn_eps},
            {"bn_momentum", bn_momentum}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.in_channels = j.value("in_channels", c.in_channels);
    c.resolution = j.value("resolution", c.resolution);
    c.fpn_channels1 = j.value("fpn_channels1", c.fpn_channels1);
    c.fpn_channels2 = j.value("fpn_channels2", c.fpn_channels2);
    c.convlstm_hidden = j.value("convlstm_hidden", c.convlstm_hidden);
    c.convlstm_kernel = j.value("convlstm_kernel", c.convlstm_kernel);
    c.head_conv_channels = j.value("head_conv_channels", c.head_conv_channels);
    c.head_conv_kernel = j.value("head_conv_kernel", c.head_conv_kernel);
    c.nonlocal_bottleneck =
        j.value("nonlocal_bottleneck", j.contains("convlstm_hidden")
                                           ? std::max(1, c.convlstm_hidden / 2)
                                           : c.nonlocal_bottleneck);
    c.use_tsa = j.value("use_tsa", c.use_tsa);
    if (j.contains("head")) c.head = head_from_name(j.at("head").get<std::string>());
    c.dropout_p = j.value("dropout_p", c.dropout_p);
    c.bn_eps = j.value("bn_eps", c.bn_eps);
    c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
    return c;
  }
};

// Named weight map. std::map keeps iteration order deterministic, which the
// checkpoint format and the optimizer rely on.
template <typename T>
struct ModelParams {
  std::map<std::string, Tensor<T>> tensors;

  Tensor<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw StateError("missing parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw StateError("missing parameter '" + name + "'");
    return it->second;
  }

  // Running statistics are buffers, not trainable parameters.
  static bool is_trainable(const std::string& name) {
    return name.ends_with(".W") || name.ends_with(".b") || name.ends_with(".gamma") ||
           name.ends_with(".beta");
  }
  // Weight decay touches conv/dense weights only.
  static bool is_decayed(const std::string& name) { return name.ends_with(".W"); }

  void set_training_gradients(bool on) {
    for (auto& [name, t] : tensors)
      if (is_trainable(name)) t.set_requires_grad(on);
  }
  void zero_gradients() {
    for (auto& [name, t] : tensors) t.zero_grad();
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& [name, t] : tensors) {
      Tensor<U> u(t.shape());
      for (int64_t i = 0; i < t.numel(); ++i) u.ptr()[i] = U(t.ptr()[i]);
      out.tensors.emplace(name, std::move(u));
    }
    return out;
  }
};

template <typename T>
struct ConvLSTMState {
  Tensor<T> h;
  Tensor<T> c;

  static ConvLSTMState zeros(int batch, int channels, int spatial) {
    return {Tensor<T>(Shape{batch, channels, spatial, spatial}),
            Tensor<T>(Shape{batch, channels, spatial, spatial})};
  }
};

namespace detail {

template <typename T>
Tensor<T> kaiming_uniform(Shape shape, int fan_in, Rng& rng) {
  Tensor<T> t(shape);
  const double bound = std::sqrt(6.0 / double(fan_in));
  for (int64_t i = 0; i < t.numel(); ++i) t.ptr()[i] = T(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
void add_conv(ModelParams<T>& p, const std::string& prefix, int out_ch, int in_ch, int k,
              Rng& rng) {
  p.tensors.emplace(prefix + ".W",
                    kaiming_uniform<T>(Shape{out_ch, in_ch, k, k}, in_ch * k * k, rng));
  p.tensors.emplace(prefix + ".b", Tensor<T>(Shape{out_ch}));
}

template <typename T>
void add_bn(ModelParams<T>& p, const std::string& prefix, int ch) {
  p.tensors.emplace(prefix + ".gamma", Tensor<T>::full(Shape{ch}, T(1)));
  p.tensors.emplace(prefix + ".beta", Tensor<T>(Shape{ch}));
  p.tensors.emplace(prefix + ".mean", Tensor<T>(Shape{ch}));
  p.tensors.emplace(prefix + ".var", Tensor<T>::full(Shape{ch}, T(1)));
}

}  // namespace detail

// Uniform Kaiming-style init (variance 2/fan_in), zero biases, identity BN.
// Deterministic given the seed: tensors are always drawn in the same order.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelParams<T> p;
  detail::add_conv(p, "tsa.conv", cfg.in_channels, cfg.in_channels, 3, rng);
  detail::add_conv(p, "fpn.block1.conv", cfg.fpn_channels1, cfg.in_channels, 3, rng);
  detail::add_bn(p, "fpn.block1.bn", cfg.fpn_channels1);
  detail::add_conv(p, "fpn.block2.conv", cfg.fpn_channels2, cfg.fpn_channels1, 3, rng);
  detail::add_bn(p, "fpn.block2.bn", cfg.fpn_channels2);
  const int gate_in = cfg.fpn_channels2 + cfg.convlstm_hidden;
  for (const char* g : {"i", "f", "o", "g"})
    detail::add_conv(p, std::string("lstm.") + g, cfg.convlstm_hidden, gate_in,
                     cfg.convlstm_kernel, rng);
  detail::add_conv(p, "nl.theta", cfg.nonlocal_bottleneck, cfg.convlstm_hidden, 1, rng);
  detail::add_conv(p, "nl.phi", cfg.nonlocal_bottleneck, cfg.convlstm_hidden, 1, rng);
  detail::add_conv(p, "nl.g", cfg.nonlocal_bottleneck, cfg.convlstm_hidden, 1, rng);
  detail::add_conv(p, "nl.z", cfg.convlstm_hidden, cfg.nonlocal_bottleneck, 1, rng);
  detail::add_conv(p, "head.conv", cfg.head_conv_channels, cfg.convlstm_hidden,
                   cfg.head_conv_kernel, rng);
  detail::add_bn(p, "head.bn", cfg.head_conv_channels);
  p.tensors.emplace("head.fc.W",
                    detail::kaiming_uniform<T>(
                        Shape{cfg.embedding_width(), cfg.output_width()},
                        cfg.embedding_width(), rng));
  p.tensors.emplace("head.fc.b", Tensor<T>(Shape{cfg.output_width()}));
  return p;
}

// TSA(prev, cur) = (C(cur - prev) (*) cur) (+) cur with a same-padding 3x3 conv.
template <typename T>
Tensor<T> tsa_forward(Tape<T>& tape, const Tensor<T>& prev, const Tensor<T>& cur,
                      ModelParams<T>& params) {
  if (prev.shape() != cur.shape())
    throw ShapeError("tsa_forward frame shape mismatch " + shape_str(prev.shape()) +
                     " vs " + shape_str(cur.shape()));
  Tensor<T> diff = ops::sub(tape, cur, prev);
  Tensor<T> att =
      ops::conv2d(tape, diff, params.at("tsa.conv.W"), params.at("tsa.conv.b"), 1, 1);
  return ops::add(tape, ops::hadamard(tape, att, cur), cur);
}

// Two [Conv3x3 -> BN -> ReLU -> AvgPool2x2] blocks; output is e_t at R/4.
template <typename T>
Tensor<T> fpn_forward(Tape<T>& tape, const Tensor<T>& x, ModelParams<T>& params,
                      const ModelConfig& cfg, bool train) {
  if (x.dim(2) % 4 != 0 || x.dim(3) % 4 != 0)
    throw ArgumentError("fpn_forward: resolution must be divisible by 4");
  Tensor<T> cur = x;
  for (const char* blk : {"fpn.block1", "fpn.block2"}) {
    const std::string b(blk);
    cur = ops::conv2d(tape, cur, params.at(b + ".conv.W"), params.at(b + ".conv.b"), 1, 1);
    cur = ops::batch_norm2d(tape, cur, params.at(b + ".bn.gamma"), params.at(b + ".bn.beta"),
                            params.at(b + ".bn.mean"), params.at(b + ".bn.var"), train,
                            cfg.bn_momentum, cfg.bn_eps);
    cur = ops::relu(tape, cur);
    cur = ops::avg_pool2d(tape, cur, 2, 2);
  }
  return cur;
}

// One ConvLSTM transition: gates are 3x3 same-padding convolutions over
// concat(e_t, h_{t-1}); no peephole terms.
template <typename T>
ConvLSTMState<T> convlstm_step(Tape<T>& tape, const Tensor<T>& e_t,
                               const ConvLSTMState<T>& state, ModelParams<T>& params,
                               const ModelConfig& cfg) {
  if (e_t.dim(2) != state.h.dim(2) || e_t.dim(3) != state.h.dim(3))
    throw ShapeError("convlstm_step spatial mismatch " + shape_str(e_t.shape()) + " vs " +
                     shape_str(state.h.shape()));
  const int pad = cfg.convlstm_kernel / 2;
  Tensor<T> u = ops::concat_channels(tape, e_t, state.h);
  auto gate = [&](const char* name) {
    const std::string n = std::string("lstm.") + name;
    return ops::conv2d(tape, u, params.at(n + ".W"), params.at(n + ".b"), 1, pad);
  };
  Tensor<T> i = ops::sigmoid(tape, gate("i"));
  Tensor<T> f = ops::sigmoid(tape, gate("f"));
  Tensor<T> o = ops::sigmoid(tape, gate("o"));
  Tensor<T> g = ops::tanh_op(tape, gate("g"));
  Tensor<T> c = ops::add(tape, ops::hadamard(tape, f, state.c), ops::hadamard(tape, i, g));
  Tensor<T> h = ops::hadamard(tape, o, ops::tanh_op(tape, c));
  return {h, c};
}

// Dot-product non-local block with 1x1 embeddings, 1/P normalization and a
// residual connection.
template <typename T>
Tensor<T> nonlocal_forward(Tape<T>& tape, const Tensor<T>& x, ModelParams<T>& params,
                           const ModelConfig& cfg) {
  if (x.dim(1) != cfg.convlstm_hidden)
    throw ShapeError("nonlocal_forward expects convlstm_hidden channels");
  const int n = x.dim(0), s = x.dim(2), p = s * x.dim(3), bott = cfg.nonlocal_bottleneck;
  Tensor<T> none;
  auto embed = [&](const char* name) {
    const std::string nm = std::string("nl.") + name;
    Tensor<T> e = ops::conv2d(tape, x, params.at(nm + ".W"), params.at(nm + ".b"), 1, 0);
    return ops::reshape(tape, e, Shape{n, bott, p});
  };
  Tensor<T> theta = embed("theta");
  Tensor<T> phi = embed("phi");
  Tensor<T> g = embed("g");
  // f[p,q] = theta(:,p) . phi(:,q) / P
  Tensor<T> f = ops::scale(tape, ops::matmul(tape, ops::transpose2(tape, theta), phi),
                           T(1) / T(p));
  // y(:,p) = sum_q f[p,q] g(:,q)
  Tensor<T> y = ops::matmul(tape, g, ops::transpose2(tape, f));
  Tensor<T> ymap = ops::reshape(tape, y, Shape{n, bott, s, x.dim(3)});
  Tensor<T> z = ops::conv2d(tape, ymap, params.at("nl.z.W"), params.at("nl.z.b"), 1, 0);
  return ops::add(tape, z, x);
}

template <typename T>
struct ClassifyResult {
  Tensor<T> score;      // 1 value (sigmoid head) or 2 (softmax head)
  Tensor<T> embedding;  // post-ReLU flattened features
};

// NonLocal -> AvgPool2x2 -> Conv (valid) -> BN -> ReLU -> Dropout -> dense.
template <typename T>
ClassifyResult<T> classify(Tape<T>& tape, const Tensor<T>& h_last, ModelParams<T>& params,
                           const ModelConfig& cfg, bool train, Rng& rng) {
  Tensor<T> x = nonlocal_forward(tape, h_last, params, cfg);
  x = ops::avg_pool2d(tape, x, 2, 2);
  x = ops::conv2d(tape, x, params.at("head.conv.W"), params.at("head.conv.b"), 1, 0);
  x = ops::batch_norm2d(tape, x, params.at("head.bn.gamma"), params.at("head.bn.beta"),
                        params.at("head.bn.mean"), params.at("head.bn.var"), train,
                        cfg.bn_momentum, cfg.bn_eps);
  x = ops::relu(tape, x);
  const int n = x.dim(0);
  Tensor<T> embedding =
      ops::reshape(tape, x, Shape{n, int(x.numel() / n)});
  Tensor<T> dropped = ops::dropout(tape, embedding, cfg.dropout_p, train, rng);
  Tensor<T> logits = ops::affine(tape, dropped, params.at("head.fc.W"), params.at("head.fc.b"));
  Tensor<T> score = cfg.head == Head::kSigmoid ? ops::sigmoid(tape, logits)
                                               : ops::softmax(tape, logits, -1);
  return {score, embedding};
}

// Full forward over an ordered frame sequence (each frame 1 x C x R x R).
template <typename T>
ClassifyResult<T> model_forward(Tape<T>& tape, const std::vector<Tensor<T>>& frames,
                                ModelParams<T>& params, const ModelConfig& cfg, bool train,
                                Rng& rng) {
  const size_t min_frames = cfg.use_tsa ? 2 : 1;
  if (frames.size() < min_frames)
    throw ArgumentError("model_forward needs at least " + std::to_string(min_frames) +
                        " frames, got " + std::to_string(frames.size()));
  auto state = ConvLSTMState<T>::zeros(frames[0].dim(0), cfg.convlstm_hidden,
                                       cfg.feature_size());
  const size_t start = cfg.use_tsa ? 1 : 0;
  for (size_t t = start; t < frames.size(); ++t) {
    Tensor<T> spatial = cfg.use_tsa
                            ? tsa_forward(tape, frames[t - 1], frames[t], params)
                            : frames[t];
    Tensor<T> e = fpn_forward(tape, spatial, params, cfg, train);
    state = convlstm_step(tape, e, state, params, cfg);
  }
  return classify(tape, state.h, params, cfg, train, rng);
}

}  // namespace rsmn
