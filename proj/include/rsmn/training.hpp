#pragma once

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "rsmn/data.hpp"
#include "rsmn/model.hpp"

namespace rsmn {

enum class Weighting { kAuto, kUnit, kProportion };
enum class DecayMode { kWeight, kLr };

inline std::string weighting_name(Weighting w) {
  switch (w) {
    case Weighting::kAuto: return "auto";
    case Weighting::kUnit: return "unit";
    case Weighting::kProportion: return "proportion";
  }
  return "auto";
}
inline Weighting weighting_from_name(const std::string& s) {
  if (s == "auto") return Weighting::kAuto;
  if (s == "unit") return Weighting::kUnit;
  if (s == "proportion") return Weighting::kProportion;
  throw ArgumentError("unknown weighting '" + s + "' (expected auto|unit|proportion)");
}

struct TrainConfig {
  int epochs = 60;
  int batch_videos = 16;
  double lr = 1e-3;
  double weight_decay = 0.005;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  Weighting weighting = Weighting::kAuto;
  DecayMode decay_mode = DecayMode::kWeight;
  double target_fps = 5.0;
  int resolution = 48;
  uint64_t seed = 0;
  bool permute_labels = false;  // leakage control

  void validate() const {
    if (epochs < 1 || batch_videos < 1) throw ArgumentError("train config: epochs and batch_videos must be >= 1");
    if (lr <= 0) throw ArgumentError("train config: lr must be positive");
    if (adam_beta1 < 0 || adam_beta1 >= 1 || adam_beta2 < 0 || adam_beta2 >= 1)
      throw ArgumentError("train config: betas must be in [0, 1)");
    if (target_fps <= 0) throw ArgumentError("train config: target_fps must be positive");
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},
            {"batch_videos", batch_videos},
            {"lr", lr},
            {"weight_decay", weight_decay},
            {"adam_beta1", adam_beta1},
            {"adam_beta2", adam_beta2},
            {"adam_eps", adam_eps},
            {"weighting", weighting_name(weighting)},
            {"decay_mode", decay_mode == DecayMode::kWeight ? "weight" : "lr"},
            {"target_fps", target_fps},
            {"resolution", resolution},
            {"seed", seed},
            {"permute_labels", permute_labels}};
  }
  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_videos = j.value("batch_videos", c.batch_videos);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    if (j.contains("weighting")) c.weighting = weighting_from_name(j.at("weighting"));
    if (j.contains("decay_mode"))
      c.decay_mode = j.at("decay_mode") == "lr" ? DecayMode::kLr : DecayMode::kWeight;
    c.target_fps = j.value("target_fps", c.target_fps);
    c.resolution = j.value("resolution", c.resolution);
    c.seed = j.value("seed", c.seed);
    c.permute_labels = j.value("permute_labels", c.permute_labels);
    return c;
  }
};

struct LossWeights {
  double alpha = 1.0;  // spontaneous (y = 1)
  double beta = 1.0;   // posed (y = 0)
};

// Inverse-frequency weighting: the minority class is up-weighted. The
// "proportion" mode is the literal proportion reading instead.
inline LossWeights compute_class_weights(int n_spontaneous, int n_posed,
                                         Weighting mode = Weighting::kAuto) {
  if (mode == Weighting::kUnit) return {1.0, 1.0};
  if (n_spontaneous < 1 || n_posed < 1)
    throw DataError("class weights need at least one video of each class");
  const double total = double(n_spontaneous + n_posed);
  if (mode == Weighting::kProportion)
    return {double(n_spontaneous) / total, double(n_posed) / total};
  return {double(n_posed) / total, double(n_spontaneous) / total};
}

constexpr double kBceEps = 1e-7;

// Weighted binary cross-entropy for one video. Accepts a 1-element sigmoid
// score (p = P(spontaneous)) or a 2-element softmax distribution [p0, p1].
template <typename T>
Tensor<T> weighted_bce(Tape<T>& tape, const Tensor<T>& score, int label,
                       const LossWeights& w) {
  if (label != 0 && label != 1) throw ArgumentError("weighted_bce label must be 0 or 1");
  if (score.numel() != 1 && score.numel() != 2)
    throw ShapeError("weighted_bce expects a 1- or 2-element score");
  const bool two = score.numel() == 2;
  const double p1 = std::clamp(double(score.ptr()[two ? 1 : 0]), kBceEps, 1.0 - kBceEps);
  const double p0 = two ? std::clamp(double(score.ptr()[0]), kBceEps, 1.0 - kBceEps)
                        : 1.0 - p1;
  const double loss =
      -(w.alpha * label * std::log(p1) + w.beta * (1 - label) * std::log(p0));
  Tensor<T> out = Tensor<T>::scalar(T(loss));
  check_finite(out, "weighted_bce");
  if (tape.recording() && score.requires_grad()) {
    out.set_requires_grad(true);
    Tensor<T> scl = score, ocl = out;
    const double a = w.alpha, b = w.beta;
    tape.record([scl, ocl, label, a, b, two, p0, p1]() mutable {
      const T g = ocl.grad()[0];
      if (two) {
        if (label == 1)
          scl.grad()[1] += g * T(-a / p1);
        else
          scl.grad()[0] += g * T(-b / p0);
      } else {
        scl.grad()[0] += g * T(-a * label / p1 + b * (1 - label) / p0);
      }
    });
  }
  return out;
}

// Eq-1 style threshold: sigmoid head predicts 1 iff score >= 0.5 (inclusive);
// softmax head predicts the argmax with ties going to class 1.
template <typename T>
int predict_label(const Tensor<T>& score) {
  if (score.numel() == 1) return score.ptr()[0] >= T(0.5) ? 1 : 0;
  if (score.numel() == 2) return score.ptr()[1] >= score.ptr()[0] ? 1 : 0;
  throw ShapeError("predict_label expects a 1- or 2-element score");
}

template <typename T>
double positive_score(const Tensor<T>& score) {
  return score.numel() == 1 ? double(score.ptr()[0]) : double(score.ptr()[1]);
}

template <typename T>
struct AdamState {
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
  int64_t t = 0;

  static AdamState init(const ModelParams<T>& params) {
    AdamState s;
    for (const auto& [name, tensor] : params.tensors)
      if (ModelParams<T>::is_trainable(name)) {
        s.m.emplace(name, Tensor<T>(tensor.shape()));
        s.v.emplace(name, Tensor<T>(tensor.shape()));
      }
    return s;
  }
};

// Bias-corrected Adam with decoupled weight decay on conv/dense weights only
// (decay_mode = lr reinterprets the decay constant as 1/(1 + d*t) learning
// rate decay instead).
template <typename T>
void adam_step(ModelParams<T>& params, AdamState<T>& state, const TrainConfig& cfg) {
  state.t += 1;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, double(state.t));
  const double bc2 = 1.0 - std::pow(b2, double(state.t));
  const double lr = cfg.decay_mode == DecayMode::kLr
                        ? cfg.lr / (1.0 + cfg.weight_decay * double(state.t - 1))
                        : cfg.lr;
  for (auto& [name, p] : params.tensors) {
    if (!ModelParams<T>::is_trainable(name)) continue;
    auto mi = state.m.find(name);
    if (mi == state.m.end() || mi->second.shape() != p.shape())
      throw StateError("adam state does not match parameter '" + name + "'");
    Tensor<T>& m = mi->second;
    Tensor<T>& v = state.v.at(name);
    const AlignedVec<T>& g = p.grad();
    const bool decay =
        cfg.decay_mode == DecayMode::kWeight && ModelParams<T>::is_decayed(name);
    for (int64_t i = 0; i < p.numel(); ++i) {
      const double gi = double(g[size_t(i)]);
      const double mn = b1 * double(m.ptr()[i]) + (1.0 - b1) * gi;
      const double vn = b2 * double(v.ptr()[i]) + (1.0 - b2) * gi * gi;
      m.ptr()[i] = T(mn);
      v.ptr()[i] = T(vn);
      double upd = lr * (mn / bc1) / (std::sqrt(vn / bc2) + cfg.adam_eps);
      if (decay) upd += lr * cfg.weight_decay * double(p.ptr()[i]);
      p.ptr()[i] = T(double(p.ptr()[i]) - upd);
    }
  }
}

struct EpochMetric {
  int epoch = 0;
  std::string split;  // "train" | "val"
  double loss = 0;
  double accuracy = 0;
};

inline void save_metrics_csv(const std::vector<EpochMetric>& metrics,
                             const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write metrics file: " + path);
  out << "epoch,split,loss,accuracy\n";
  char line[128];
  for (const auto& m : metrics) {
    std::snprintf(line, sizeof(line), "%d,%s,%.6f,%.6f\n", m.epoch, m.split.c_str(),
                  m.loss, m.accuracy);
    out << line;
  }
}

struct Checkpoint {
  uint32_t version = 1;
  ModelConfig model_config;
  TrainConfig train_config;
  ModelParams<float> params;
  std::optional<AdamState<float>> adam;
  int epoch = 0;
  uint64_t rng_state = 0;
  bool rng_has_spare = false;
  double rng_spare = 0;
  std::vector<EpochMetric> metrics;
};

namespace detail {

inline void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(char((v >> (8 * i)) & 0xFF));
}
inline uint32_t get_u32(const std::string& buf, size_t off) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(buf[off + i])) << (8 * i);
  return v;
}
inline void put_f32(std::string& buf, float f) {
  uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(buf, v);
}
inline float get_f32(const std::string& buf, size_t off) {
  const uint32_t v = get_u32(buf, off);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

}  // namespace detail

// Layout: "RSMN" | u32 version | u32 header length | JSON header |
// little-endian f32 blobs in directory order | u32 CRC32 of everything before.
inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::vector<std::pair<std::string, const Tensor<float>*>> directory;
  for (const auto& [name, t] : ckpt.params.tensors) directory.emplace_back(name, &t);
  if (ckpt.adam) {
    for (const auto& [name, t] : ckpt.adam->m) directory.emplace_back("adam.m." + name, &t);
    for (const auto& [name, t] : ckpt.adam->v) directory.emplace_back("adam.v." + name, &t);
  }
  nlohmann::json dir = nlohmann::json::array();
  int64_t offset = 0;
  for (const auto& [name, t] : directory) {
    dir.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}});
    offset += t->numel() * 4;
  }
  nlohmann::json header = {{"model_config", ckpt.model_config.to_json()},
                           {"train_config", ckpt.train_config.to_json()},
                           {"epoch", ckpt.epoch},
                           {"rng",
                            {{"state", ckpt.rng_state},
                             {"has_spare", ckpt.rng_has_spare},
                             {"spare", ckpt.rng_spare}}},
                           {"has_adam", bool(ckpt.adam)},
                           {"adam_t", ckpt.adam ? ckpt.adam->t : 0},
                           {"tensors", dir}};
  nlohmann::json jm = nlohmann::json::array();
  for (const auto& m : ckpt.metrics)
    jm.push_back({{"epoch", m.epoch}, {"split", m.split}, {"loss", m.loss},
                  {"accuracy", m.accuracy}});
  header["metrics"] = jm;

  std::string buf = "RSMN";
  detail::put_u32(buf, ckpt.version);
  const std::string hs = header.dump();
  detail::put_u32(buf, uint32_t(hs.size()));
  buf += hs;
  for (const auto& [name, t] : directory)
    for (int64_t i = 0; i < t->numel(); ++i) detail::put_f32(buf, t->ptr()[i]);
  const uint32_t crc =
      uint32_t(crc32(0, reinterpret_cast<const Bytef*>(buf.data()), uInt(buf.size())));
  detail::put_u32(buf, crc);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(buf.data(), std::streamsize(buf.size()));
  if (!out) throw IoError("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 16 || buf.compare(0, 4, "RSMN") != 0)
    throw FormatError("not a checkpoint file (bad magic): " + path);
  const uint32_t stored_crc = detail::get_u32(buf, buf.size() - 4);
  const uint32_t crc = uint32_t(
      crc32(0, reinterpret_cast<const Bytef*>(buf.data()), uInt(buf.size() - 4)));
  if (stored_crc != crc) throw FormatError("checkpoint checksum mismatch: " + path);

  Checkpoint ckpt;
  ckpt.version = detail::get_u32(buf, 4);
  if (ckpt.version != 1)
    throw FormatError("unsupported checkpoint version " + std::to_string(ckpt.version));
  const uint32_t hlen = detail::get_u32(buf, 8);
  if (12 + size_t(hlen) + 4 > buf.size()) throw FormatError("truncated checkpoint: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.substr(12, hlen));
  } catch (const std::exception& e) {
    throw FormatError(std::string("checkpoint header parse error: ") + e.what());
  }
  ckpt.model_config = ModelConfig::from_json(header.at("model_config"));
  ckpt.train_config = TrainConfig::from_json(header.at("train_config"));
  ckpt.epoch = header.at("epoch").get<int>();
  ckpt.rng_state = header.at("rng").at("state").get<uint64_t>();
  ckpt.rng_has_spare = header.at("rng").at("has_spare").get<bool>();
  ckpt.rng_spare = header.at("rng").at("spare").get<double>();
  for (const auto& m : header.at("metrics"))
    ckpt.metrics.push_back({m.at("epoch").get<int>(), m.at("split").get<std::string>(),
                            m.at("loss").get<double>(), m.at("accuracy").get<double>()});

  const size_t blob0 = 12 + hlen;
  const bool has_adam = header.at("has_adam").get<bool>();
  if (has_adam) {
    ckpt.adam.emplace();
    ckpt.adam->t = header.at("adam_t").get<int64_t>();
  }
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    const int64_t off = entry.at("offset").get<int64_t>();
    Tensor<float> t(shape);
    if (blob0 + size_t(off) + size_t(t.numel()) * 4 + 4 > buf.size())
      throw FormatError("checkpoint tensor blob out of bounds: " + name);
    for (int64_t i = 0; i < t.numel(); ++i)
      t.ptr()[i] = detail::get_f32(buf, blob0 + size_t(off) + size_t(i) * 4);
    if (name.starts_with("adam.m."))
      ckpt.adam->m.emplace(name.substr(7), std::move(t));
    else if (name.starts_with("adam.v."))
      ckpt.adam->v.emplace(name.substr(7), std::move(t));
    else
      ckpt.params.tensors.emplace(name, std::move(t));
  }
  return ckpt;
}

// In-memory decoded video.
template <typename T>
struct LoadedVideo {
  std::string id;
  int label = 0;
  std::vector<Tensor<T>> frames;
};

template <typename T>
std::vector<LoadedVideo<T>> load_videos(const std::vector<VideoSample>& samples,
                                        double target_fps, int resolution) {
  std::vector<LoadedVideo<T>> out;
  out.reserve(samples.size());
  for (const auto& s : samples)
    out.push_back({s.id, s.label, load_video<T>(s, target_fps, resolution)});
  return out;
}

struct ScoredVideo {
  std::string id;
  int label = 0;
  double score = 0;
  int predicted = 0;
};

struct EvalResult {
  double accuracy = 0;
  std::vector<ScoredVideo> scores;
};

template <typename T>
EvalResult evaluate_videos(const std::vector<LoadedVideo<T>>& videos,
                           ModelParams<T>& params, const ModelConfig& cfg) {
  if (videos.empty()) throw DataError("evaluate: empty split");
  EvalResult res;
  Rng rng(0);  // unused in eval mode
  int correct = 0;
  for (const auto& v : videos) {
    Tape<T> tape;
    tape.set_recording(false);
    auto out = model_forward(tape, v.frames, params, cfg, /*train=*/false, rng);
    const int pred = predict_label(out.score);
    correct += pred == v.label;
    res.scores.push_back({v.id, v.label, positive_score(out.score), pred});
  }
  res.accuracy = double(correct) / double(videos.size());
  return res;
}

inline EvalResult evaluate(const Checkpoint& ckpt, const std::vector<VideoSample>& split) {
  auto videos = load_videos<float>(split, ckpt.train_config.target_fps,
                                   ckpt.model_config.resolution);
  ModelParams<float> params = ckpt.params;
  return evaluate_videos(videos, params, ckpt.model_config);
}

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochMetric> metrics;
};

// Per-epoch: shuffle training videos; accumulate gradients over batch_videos
// single-video forward/backward passes (variable-length, no padding), then one
// Adam step. Class weights come from the training split only.
inline TrainResult train(const Manifest& manifest, const FoldPlan& folds, int fold_index,
                         const ModelConfig& mcfg_in, const TrainConfig& tcfg_in) {
  ModelConfig mcfg = mcfg_in;
  TrainConfig tcfg = tcfg_in;
  mcfg.validate();
  tcfg.validate();
  tcfg.resolution = mcfg.resolution;
  auto train_samples = folds.split(manifest, fold_index, /*train=*/true);
  auto val_samples = folds.split(manifest, fold_index, /*train=*/false);
  if (train_samples.empty()) throw DataError("train: empty training split");

  auto train_videos = load_videos<float>(train_samples, tcfg.target_fps, mcfg.resolution);
  auto val_videos = load_videos<float>(val_samples, tcfg.target_fps, mcfg.resolution);

  if (tcfg.permute_labels) {
    std::vector<int> labels;
    for (const auto& v : train_videos) labels.push_back(v.label);
    Rng perm_rng(Rng::mix(tcfg.seed, 0x9E21));
    perm_rng.shuffle(labels.begin(), labels.end());
    for (size_t i = 0; i < labels.size(); ++i) train_videos[i].label = labels[size_t(i)];
  }

  int n_spont = 0;
  for (const auto& v : train_videos) n_spont += v.label == 1;
  const LossWeights weights =
      compute_class_weights(n_spont, int(train_videos.size()) - n_spont, tcfg.weighting);

  Rng init_rng(Rng::mix(tcfg.seed, 0x1217));
  ModelParams<float> params = init_params<float>(mcfg, init_rng);
  params.set_training_gradients(true);
  AdamState<float> adam = AdamState<float>::init(params);
  Rng train_rng(Rng::mix(tcfg.seed, 0x7EA1));

  std::vector<EpochMetric> metrics;
  std::vector<size_t> order(train_videos.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    train_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0;
    int correct = 0;
    params.zero_gradients();
    size_t done_in_batch = 0;
    for (size_t pos = 0; pos < order.size(); ++pos) {
      const auto& video = train_videos[order[pos]];
      const size_t batch_size =
          std::min(size_t(tcfg.batch_videos), order.size() - (pos - done_in_batch));
      Tape<float> tape;
      auto out = model_forward(tape, video.frames, params, mcfg, /*train=*/true, train_rng);
      Tensor<float> loss = weighted_bce(tape, out.score, video.label, weights);
      loss_sum += double(loss.item());
      correct += predict_label(out.score) == video.label;
      Tensor<float> scaled = ops::scale(tape, loss, float(1.0 / double(batch_size)));
      tape.backward(scaled);
      if (++done_in_batch == batch_size) {
        adam_step(params, adam, tcfg);
        params.zero_gradients();
        done_in_batch = 0;
      }
    }
    metrics.push_back({epoch, "train", loss_sum / double(train_videos.size()),
                       double(correct) / double(train_videos.size())});
    if (!val_videos.empty()) {
      auto val = evaluate_videos(val_videos, params, mcfg);
      metrics.push_back({epoch, "val", 0.0, val.accuracy});
    }
  }

  Checkpoint ckpt;
  ckpt.model_config = mcfg;
  ckpt.train_config = tcfg;
  ckpt.params = params;
  ckpt.adam = adam;
  ckpt.epoch = tcfg.epochs - 1;
  ckpt.rng_state = train_rng.state();
  ckpt.rng_has_spare = train_rng.has_spare();
  ckpt.rng_spare = train_rng.spare();
  ckpt.metrics = metrics;
  return {std::move(ckpt), std::move(metrics)};
}

// CSV: id,label,score,e0,e1,...  One row per video; the embedding is the
// post-ReLU flattened feature of the classification block.
inline void export_embeddings(const Checkpoint& ckpt,
                              const std::vector<VideoSample>& samples,
                              const std::string& path) {
  auto videos = load_videos<float>(samples, ckpt.train_config.target_fps,
                                   ckpt.model_config.resolution);
  ModelParams<float> params = ckpt.params;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write embeddings file: " + path);
  out << "id,label,score";
  for (int i = 0; i < ckpt.model_config.embedding_width(); ++i) out << ",e" << i;
  out << "\n";
  Rng rng(0);
  for (const auto& v : videos) {
    Tape<float> tape;
    tape.set_recording(false);
    auto res = model_forward(tape, v.frames, params, ckpt.model_config, false, rng);
    char head[96];
    std::snprintf(head, sizeof(head), "%s,%d,%.8f", v.id.c_str(), v.label,
                  positive_score(res.score));
    out << head;
    for (int64_t i = 0; i < res.embedding.numel(); ++i) {
      char cell[32];
      std::snprintf(cell, sizeof(cell), ",%.6g", double(res.embedding.ptr()[i]));
      out << cell;
    }
    out << "\n";
  }
}

}  // namespace rsmn
