#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rsmn/model.hpp"

using namespace rsmn;
namespace o = rsmn::ops;

namespace {

template <typename T>
Tensor<T> rand_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<T> t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t.ptr()[i] = T(rng.uniform(lo, hi));
  return t;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.in_channels = 1;
  cfg.resolution = 16;
  cfg.fpn_channels1 = 2;
  cfg.fpn_channels2 = 3;
  cfg.convlstm_hidden = 4;
  cfg.head_conv_channels = 3;
  cfg.head_conv_kernel = 2;
  cfg.nonlocal_bottleneck = 2;
  cfg.dropout_p = 0.5;
  return cfg;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg;
  cfg.validate();
  CHECK(cfg.feature_size() == 12);
  CHECK(cfg.embedding_width() == 25 * 64);
  cfg.resolution = 50;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg = ModelConfig{};
  cfg.nonlocal_bottleneck = 0;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
}

TEST_CASE("init_params is deterministic and biases are exactly zero") {
  ModelConfig cfg = tiny_config();
  Rng r1(99), r2(99);
  auto p1 = init_params<double>(cfg, r1);
  auto p2 = init_params<double>(cfg, r2);
  CHECK(p1.tensors.size() == p2.tensors.size());
  for (const auto& [name, t] : p1.tensors) {
    CHECK(t.data() == p2.at(name).data());
    if (name.ends_with(".b"))
      for (double v : t.data()) CHECK(v == 0.0);
    if (name.ends_with(".beta") || name.ends_with(".mean"))
      for (double v : t.data()) CHECK(v == 0.0);
    if (name.ends_with(".gamma") || name.ends_with(".var"))
      for (double v : t.data()) CHECK(v == 1.0);
  }
}

TEST_CASE("init weight variance tracks 2/fan_in") {
  // big kernel for >= 10^4 draws in one tensor
  ModelConfig cfg;
  cfg.in_channels = 3;
  cfg.fpn_channels1 = 64;
  Rng rng(7);
  auto p = init_params<double>(cfg, rng);
  const auto& w = p.at("fpn.block1.conv.W");  // 64 x 3 x 3 x 3 = 1728... use fc too
  auto stat = [](const Tensor<double>& t) {
    double mean = 0, var = 0;
    for (double v : t.data()) mean += v;
    mean /= double(t.numel());
    for (double v : t.data()) var += (v - mean) * (v - mean);
    return var / double(t.numel());
  };
  CHECK(stat(w) == doctest::Approx(2.0 / 27.0).epsilon(0.2));
  const auto& fc = p.at("head.fc.W");
  CHECK(stat(fc) == doctest::Approx(2.0 / double(fc.dim(0))).epsilon(0.2));
  // >= 10^4 draws: the biggest gate kernel (32 x 96 x 3 x 3 = 27648)
  const auto& gate = p.at("lstm.i.W");
  CHECK(gate.numel() >= 10000);
  CHECK(stat(gate) == doctest::Approx(2.0 / (96.0 * 9.0)).epsilon(0.2));
}

TEST_CASE("tsa identity and zero cases") {
  ModelConfig cfg = tiny_config();
  Rng rng(1);
  auto params = init_params<double>(cfg, rng);
  Tape<double> tape;
  auto x = rand_tensor<double>(Shape{1, 1, 16, 16}, rng, 0, 1);
  auto same = tsa_forward(tape, x, x, params);
  CHECK(same.data() == x.data());  // bit-exact with zero conv bias

  auto prev = rand_tensor<double>(Shape{1, 1, 16, 16}, rng, 0, 1);
  Tensor<double> zeros(Shape{1, 1, 16, 16});
  auto out = tsa_forward(tape, prev, zeros, params);
  for (double v : out.data()) CHECK(v == 0.0);

  Tensor<double> wrong(Shape{1, 1, 8, 8});
  CHECK_THROWS_AS(tsa_forward(tape, prev, wrong, params), ShapeError);
}

TEST_CASE("tsa equals the hand-composed per-op pipeline") {
  ModelConfig cfg = tiny_config();
  Rng rng(2);
  auto params = init_params<double>(cfg, rng);
  auto prev = rand_tensor<double>(Shape{1, 1, 16, 16}, rng, 0, 1);
  auto cur = rand_tensor<double>(Shape{1, 1, 16, 16}, rng, 0, 1);
  Tape<double> tape;
  auto got = tsa_forward(tape, prev, cur, params);
  // independent composition
  auto diff = o::sub(tape, cur, prev);
  auto conv = o::conv2d(tape, diff, params.at("tsa.conv.W"), params.at("tsa.conv.b"), 1, 1);
  auto want = o::add(tape, o::hadamard(tape, conv, cur), cur);
  for (int64_t i = 0; i < got.numel(); ++i)
    CHECK(got.ptr()[i] == doctest::Approx(want.ptr()[i]).epsilon(1e-6));
}

TEST_CASE("fpn output shapes and nonnegativity") {
  Rng rng(3);
  for (int r : {48, 64}) {
    ModelConfig cfg = tiny_config();
    cfg.resolution = r;
    auto params = init_params<double>(cfg, rng);
    Tape<double> tape;
    auto x = rand_tensor<double>(Shape{1, 1, r, r}, rng, 0, 1);
    auto e = fpn_forward(tape, x, params, cfg, true);
    CHECK(e.shape() == Shape{1, 3, r / 4, r / 4});
    for (double v : e.data()) CHECK(v >= 0.0);
  }
}

TEST_CASE("convlstm zero-weight analytic traces") {
  ModelConfig cfg = tiny_config();
  Rng rng(4);
  auto params = init_params<double>(cfg, rng);
  for (const char* g : {"i", "f", "o", "g"}) {
    params.at(std::string("lstm.") + g + ".W").data().assign(
        params.at(std::string("lstm.") + g + ".W").data().size(), 0.0);
    params.at(std::string("lstm.") + g + ".b").data().assign(
        size_t(cfg.convlstm_hidden), 0.0);
  }
  const int s = cfg.feature_size();
  Tape<double> tape;
  auto e = rand_tensor<double>(Shape{1, cfg.fpn_channels2, s, s}, rng);

  auto st = ConvLSTMState<double>::zeros(1, cfg.convlstm_hidden, s);
  auto next = convlstm_step(tape, e, st, params, cfg);
  for (double v : next.c.data()) CHECK(v == 0.0);
  for (double v : next.h.data()) CHECK(v == 0.0);

  // c0 = C constant: c1 = 0.5 C, h1 = 0.5 tanh(0.5 C)
  const double c0 = 0.8;
  auto st2 = ConvLSTMState<double>::zeros(1, cfg.convlstm_hidden, s);
  st2.c = Tensor<double>::full(st2.c.shape(), c0);
  auto n2 = convlstm_step(tape, e, st2, params, cfg);
  for (double v : n2.c.data()) CHECK(v == doctest::Approx(0.5 * c0).epsilon(1e-9));
  for (double v : n2.h.data())
    CHECK(v == doctest::Approx(0.5 * std::tanh(0.5 * c0)).epsilon(1e-9));
}

TEST_CASE("convlstm gate ranges on random inputs") {
  ModelConfig cfg = tiny_config();
  Rng rng(5);
  auto params = init_params<double>(cfg, rng);
  const int s = cfg.feature_size();
  // probe gates directly via the same convs
  for (int rep = 0; rep < 5; ++rep) {
    Tape<double> tape;
    auto e = rand_tensor<double>(Shape{1, cfg.fpn_channels2, s, s}, rng, -2, 2);
    auto h = rand_tensor<double>(Shape{1, cfg.convlstm_hidden, s, s}, rng, -2, 2);
    auto u = o::concat_channels(tape, e, h);
    for (const char* gname : {"i", "f", "o"}) {
      auto g = o::sigmoid(
          tape, o::conv2d(tape, u, params.at(std::string("lstm.") + gname + ".W"),
                          params.at(std::string("lstm.") + gname + ".b"), 1, 1));
      for (double v : g.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
      }
    }
    auto cg = o::tanh_op(tape, o::conv2d(tape, u, params.at("lstm.g.W"),
                                         params.at("lstm.g.b"), 1, 1));
    for (double v : cg.data()) {
      CHECK(v > -1.0);
      CHECK(v < 1.0);
    }
  }
}

TEST_CASE("nonlocal: zero z-projection is the identity; shapes hold") {
  Rng rng(6);
  for (int r : {48, 64}) {  // S = 12, 16
    ModelConfig cfg;
    cfg.resolution = r;
    auto params = init_params<double>(cfg, rng);
    params.at("nl.z.W").data().assign(params.at("nl.z.W").data().size(), 0.0);
    const int s = cfg.feature_size();
    Tape<double> tape;
    auto x = rand_tensor<double>(Shape{1, cfg.convlstm_hidden, s, s}, rng);
    auto y = nonlocal_forward(tape, x, params, cfg);
    CHECK(y.shape() == x.shape());
    CHECK(y.data() == x.data());
  }
}

TEST_CASE("nonlocal matches the brute-force pairwise oracle") {
  // P = 4 toy input (S = 2) and P = 16 (S = 4)
  for (int s : {2, 4}) {
    ModelConfig cfg = tiny_config();
    cfg.resolution = s * 4;
    cfg.head_conv_kernel = 1;
    Rng rng(7 + s);
    auto params = init_params<double>(cfg, rng);
    const int C = cfg.convlstm_hidden, B = cfg.nonlocal_bottleneck, P = s * s;
    Tape<double> tape;
    auto x = rand_tensor<double>(Shape{1, C, s, s}, rng);
    auto got = nonlocal_forward(tape, x, params, cfg);

    // double-loop oracle over position pairs
    auto embed = [&](const char* name) {
      std::vector<std::vector<double>> e(size_t(B), std::vector<double>(size_t(P), 0.0));
      const auto& w = params.at(std::string("nl.") + name + ".W");
      const auto& b = params.at(std::string("nl.") + name + ".b");
      for (int ob = 0; ob < B; ++ob)
        for (int p = 0; p < P; ++p) {
          double acc = b.ptr()[ob];
          for (int ic = 0; ic < C; ++ic)
            acc += w.ptr()[ob * C + ic] * x.ptr()[ic * P + p];
          e[size_t(ob)][size_t(p)] = acc;
        }
      return e;
    };
    auto th = embed("theta"), ph = embed("phi"), gg = embed("g");
    std::vector<std::vector<double>> y(size_t(B), std::vector<double>(size_t(P), 0.0));
    for (int p = 0; p < P; ++p)
      for (int q = 0; q < P; ++q) {
        double f = 0;
        for (int ob = 0; ob < B; ++ob) f += th[size_t(ob)][size_t(p)] * ph[size_t(ob)][size_t(q)];
        f /= double(P);
        for (int ob = 0; ob < B; ++ob) y[size_t(ob)][size_t(p)] += f * gg[size_t(ob)][size_t(q)];
      }
    const auto& zw = params.at("nl.z.W");
    const auto& zb = params.at("nl.z.b");
    for (int oc = 0; oc < C; ++oc)
      for (int p = 0; p < P; ++p) {
        double acc = zb.ptr()[oc];
        for (int ob = 0; ob < B; ++ob) acc += zw.ptr()[oc * B + ob] * y[size_t(ob)][size_t(p)];
        acc += x.ptr()[oc * P + p];
        CHECK(got.ptr()[oc * P + p] == doctest::Approx(acc).epsilon(1e-6).scale(1.0));
      }
  }
}

TEST_CASE("classify shape arithmetic and head ranges") {
  ModelConfig cfg;  // defaults: R=48 -> S=12 -> pool 6 -> conv2x2 valid 5x5
  Rng rng(9);
  auto params = init_params<double>(cfg, rng);
  Tape<double> tape;
  auto h = rand_tensor<double>(Shape{1, cfg.convlstm_hidden, 12, 12}, rng);
  Rng drng(1);
  auto res = classify(tape, h, params, cfg, false, drng);
  CHECK(res.embedding.shape() == Shape{1, 25 * 64});
  CHECK(res.score.numel() == 1);
  CHECK(res.score.item() > 0.0);
  CHECK(res.score.item() < 1.0);

  ModelConfig soft = cfg;
  soft.head = Head::kSoftmax;
  Rng rng2(9);
  auto params2 = init_params<double>(soft, rng2);
  auto res2 = classify(tape, h, params2, soft, false, drng);
  CHECK(res2.score.numel() == 2);
  CHECK(res2.score.ptr()[0] + res2.score.ptr()[1] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("model_forward handles arbitrary sequence lengths deterministically") {
  ModelConfig cfg = tiny_config();
  Rng rng(10);
  auto params = init_params<double>(cfg, rng);
  Rng drng(0);
  for (int n : {2, 9, 71}) {
    std::vector<Tensor<double>> frames;
    Rng frng(100 + uint64_t(n));
    for (int i = 0; i < n; ++i)
      frames.push_back(rand_tensor<double>(Shape{1, 1, 16, 16}, frng, 0, 1));
    Tape<double> tape;
    tape.set_recording(false);
    auto r1 = model_forward(tape, frames, params, cfg, false, drng);
    CHECK(std::isfinite(r1.score.item()));
    CHECK(r1.score.item() > 0.0);
    CHECK(r1.score.item() < 1.0);
    Tape<double> tape2;
    tape2.set_recording(false);
    auto r2 = model_forward(tape2, frames, params, cfg, false, drng);
    CHECK(r1.score.item() == r2.score.item());  // bit-identical
  }
  // too few frames
  std::vector<Tensor<double>> one = {rand_tensor<double>(Shape{1, 1, 16, 16}, rng)};
  Tape<double> tape;
  CHECK_THROWS_AS(model_forward(tape, one, params, cfg, false, drng), ArgumentError);
  // no-TSA variant accepts a single frame
  ModelConfig notsa = cfg;
  notsa.use_tsa = false;
  Rng rng2(10);
  auto params2 = init_params<double>(notsa, rng2);
  auto r = model_forward(tape, one, params2, notsa, false, drng);
  CHECK(std::isfinite(r.score.item()));
}

TEST_CASE("model config json round trip") {
  ModelConfig cfg = tiny_config();
  cfg.head = Head::kSoftmax;
  cfg.use_tsa = false;
  auto j = cfg.to_json();
  ModelConfig back = ModelConfig::from_json(j);
  CHECK(back.to_json() == j);
  // bottleneck defaults to hidden/2 when only hidden is given
  ModelConfig c2 = ModelConfig::from_json({{"convlstm_hidden", 10}});
  CHECK(c2.nonlocal_bottleneck == 5);
}
