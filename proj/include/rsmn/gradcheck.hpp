#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rsmn/model.hpp"
#include "rsmn/ops.hpp"
#include "rsmn/training.hpp"

namespace rsmn {

struct OpCheck {
  std::string name;
  double max_err = 0;  // max |analytic - fd| / (atol + rtol * |fd|); pass iff <= 1
  bool pass = false;
};

namespace gradcheck_detail {

template <typename T>
Tensor<T> cast_tensor(const Tensor<double>& x) {
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out.ptr()[i] = T(x.ptr()[i]);
  return out;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t.ptr()[i] = rng.uniform(lo, hi);
  return t;
}

// Compares tape gradients of loss = sum(op(inputs) . cotangent) against the
// central-difference oracle, which always runs in double precision.
template <typename T, typename Fn>
double case_max_err(Fn&& fn, std::vector<Tensor<double>> inputs, uint64_t seed,
                    double rtol, double atol, double h, bool perturb) {
  Rng cr(Rng::mix(seed, 0xC07A));
  // Fixed random cotangent so every output element is probed independently.
  auto with_loss = [&](auto& tape, auto& ins) {
    using S = std::decay_t<decltype(ins[0].ptr()[0])>;
    Tensor<S> out = fn(tape, ins);
    Rng local = cr;
    Tensor<S> cot(out.shape());
    for (int64_t i = 0; i < out.numel(); ++i) cot.ptr()[i] = S(local.uniform(-1, 1));
    return ops::sum_all(tape, ops::hadamard(tape, out, cot));
  };

  // Analytic gradients in precision T.
  std::vector<Tensor<T>> tin;
  for (const auto& x : inputs) tin.push_back(cast_tensor<T>(x));
  for (auto& x : tin) x.set_requires_grad(true);
  Tape<T> tape;
  Tensor<T> loss = with_loss(tape, tin);
  tape.backward(loss);

  double max_err = 0;
  for (size_t j = 0; j < inputs.size(); ++j) {
    auto f = [&](const Tensor<double>& probe) {
      std::vector<Tensor<double>> din = inputs;
      din[j] = probe;
      Tape<double> dtape;
      dtape.set_recording(false);
      return with_loss(dtape, din).item();
    };
    Tensor<double> fd = ops::finite_diff_grad(f, inputs[j], h);
    for (int64_t i = 0; i < fd.numel(); ++i) {
      double ga = double(tin[j].grad()[size_t(i)]);
      if (perturb) ga *= 1.01;  // deliberate fault-injection fixture
      const double err = std::abs(ga - fd.ptr()[i]) / (atol + rtol * std::abs(fd.ptr()[i]));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

// Full micro-model: 2 frames at 8x8, every trainable parameter checked.
template <typename T>
double micro_model_max_err(double rtol, double atol, double h, bool perturb) {
  ModelConfig cfg;
  cfg.in_channels = 1;
  cfg.resolution = 8;
  cfg.fpn_channels1 = 2;
  cfg.fpn_channels2 = 3;
  cfg.convlstm_hidden = 4;
  cfg.head_conv_channels = 3;
  cfg.head_conv_kernel = 1;
  cfg.nonlocal_bottleneck = 2;
  cfg.dropout_p = 0.0;
  cfg.bn_momentum = 0.0;  // keep the forward a pure function of its inputs
  cfg.validate();

  // Batch of 2 keeps the head batch-norm statistics well defined at 8x8.
  Rng rng(0xA11CE);
  std::vector<Tensor<double>> frames = {
      random_tensor(Shape{2, 1, 8, 8}, rng, 0, 1),
      random_tensor(Shape{2, 1, 8, 8}, rng, 0, 1)};
  const Tensor<double> cot(Shape{2, 1}, {1.0, 0.6});
  Rng init_rng(0xBEE5);
  ModelParams<double> base = init_params<double>(cfg, init_rng);

  auto forward = [&](ModelParams<double>& p) {
    Tape<double> tape;
    tape.set_recording(false);
    Rng drop(0);
    auto out = model_forward(tape, frames, p, cfg, /*train=*/true, drop);
    return ops::sum_all(tape, ops::hadamard(tape, out.score, cot)).item();
  };

  // Analytic side in precision T.
  ModelParams<T> tparams = base.template cast<T>();
  tparams.set_training_gradients(true);
  std::vector<Tensor<T>> tframes;
  for (const auto& f : frames) tframes.push_back(cast_tensor<T>(f));
  Tape<T> tape;
  Rng drop(0);
  auto out = model_forward(tape, tframes, tparams, cfg, /*train=*/true, drop);
  Tensor<T> tcot = cast_tensor<T>(cot);
  Tensor<T> loss = ops::sum_all(tape, ops::hadamard(tape, out.score, tcot));
  tape.backward(loss);

  double max_err = 0;
  for (const auto& [name, tensor] : base.tensors) {
    if (!ModelParams<double>::is_trainable(name)) continue;
    auto f = [&](const Tensor<double>& probe) {
      ModelParams<double> p;
      for (const auto& [n2, t2] : base.tensors)
        p.tensors.emplace(n2, n2 == name ? probe.clone() : t2.clone());
      return forward(p);
    };
    Tensor<double> fd = ops::finite_diff_grad(f, tensor, h);
    const auto& ga = tparams.at(name).grad();
    for (int64_t i = 0; i < fd.numel(); ++i) {
      double a = double(ga[size_t(i)]);
      if (perturb) a *= 1.01;
      const double err = std::abs(a - fd.ptr()[i]) / (atol + rtol * std::abs(fd.ptr()[i]));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace gradcheck_detail

// Runs the finite-difference oracle over every differentiable op plus the full
// micro-model. Each op appears exactly once in the report.
template <typename T>
std::vector<OpCheck> run_gradcheck(double rtol, double atol, bool perturb = false,
                                   int repeats = 10) {
  using namespace gradcheck_detail;
  namespace o = ops;
  const double h = 1e-5;
  std::vector<OpCheck> report;

  auto run = [&](const std::string& name, auto&& fn,
                 const std::function<std::vector<Tensor<double>>(Rng&)>& make_inputs) {
    double worst = 0;
    for (int r = 0; r < repeats; ++r) {
      Rng rng(Rng::mix(0x5EED, uint64_t(r) * 131 + report.size()));
      worst = std::max(worst, case_max_err<T>(fn, make_inputs(rng),
                                              0xC0FFEE + uint64_t(r), rtol, atol, h,
                                              perturb));
    }
    report.push_back({name, worst, worst <= 1.0});
  };

  auto two_equal = [](Rng& rng) {
    return std::vector<Tensor<double>>{random_tensor(Shape{2, 3, 4, 4}, rng),
                                       random_tensor(Shape{2, 3, 4, 4}, rng)};
  };
  run("ew_add", [](auto& t, auto& in) { return o::add(t, in[0], in[1]); }, two_equal);
  run("ew_sub", [](auto& t, auto& in) { return o::sub(t, in[0], in[1]); }, two_equal);
  run("ew_hadamard", [](auto& t, auto& in) { return o::hadamard(t, in[0], in[1]); },
      two_equal);
  run("ew_bias_broadcast", [](auto& t, auto& in) { return o::add(t, in[0], in[1]); },
      [](Rng& rng) {
        return std::vector<Tensor<double>>{random_tensor(Shape{2, 3, 4, 4}, rng),
                                           random_tensor(Shape{3}, rng)};
      });
  run("conv2d",
      [](auto& t, auto& in) { return o::conv2d(t, in[0], in[1], in[2], 1, 1); },
      [](Rng& rng) {
        return std::vector<Tensor<double>>{random_tensor(Shape{2, 3, 8, 8}, rng),
                                           random_tensor(Shape{4, 3, 3, 3}, rng),
                                           random_tensor(Shape{4}, rng)};
      });
  run("conv2d_strided",
      [](auto& t, auto& in) { return o::conv2d(t, in[0], in[1], in[2], 2, 0); },
      [](Rng& rng) {
        return std::vector<Tensor<double>>{random_tensor(Shape{1, 2, 7, 7}, rng),
                                           random_tensor(Shape{3, 2, 2, 2}, rng),
                                           random_tensor(Shape{3}, rng)};
      });
  run("avg_pool2d", [](auto& t, auto& in) { return o::avg_pool2d(t, in[0], 2, 2); },
      [](Rng& rng) {
        return std::vector<Tensor<double>>{random_tensor(Shape{1, 2, 6, 6}, rng)};
      });
  auto one_t = [](Rng& rng) {
    return std::vector<Tensor<double>>{random_tensor(Shape{2, 3, 4, 4}, rng)};
  };
  run("relu", [](auto& t, auto& in) { return o::relu(t, in[0]); },
      [](Rng& rng) {
        // keep values away from the kink at 0
        auto x = random_tensor(Shape{2, 3, 4, 4}, rng);
        for (int64_t i = 0; i < x.numel(); ++i)
          if (std::abs(x.ptr()[i]) < 0.05) x.ptr()[i] += 0.1;
        return std::vector<Tensor<double>>{x};
      });
  run("sigmoid", [](auto& t, auto& in) { return o::sigmoid(t, in[0]); }, one_t);
  run("tanh", [](auto& t, auto& in) { return o::tanh_op(t, in[0]); }, one_t);
  run("concat_channels",
      [](auto& t, auto& in) { return o::concat_channels(t, in[0], in[1]); },
      [](Rng& rng) {
        return std::vector<Tensor<double>>{random_tensor(Shape{1, 3, 4, 4}, rng),
                                           random_tensor(Shape{1, 5, 4, 4}, rng)};
      });
  run("slice_channels",
      [](auto& t, auto& in) { return o::slice_channels(t, in[0], 1, 3); }, one_t);
  run("batch_norm2d",
      [](auto& t, auto& in) {
        using S = std::decay_t<decltype(in[0].ptr()[0])>;
        Tensor<S> rmean(Shape{3});
        Tensor<S> rvar = Tensor<S>::full(Shape{3}, S(1));
        return o::batch_norm2d(t, in[0], in[1], in[2], rmean, rvar, true, 0.1, 1e-5);
      },
      [](Rng& rng) {
        return std::vector<Tensor<double>>{random_tensor(Shape{4, 3, 8, 8}, rng),
                                           random_tensor(Shape{3}, rng, 0.5, 1.5),
                                           random_tensor(Shape{3}, rng)};
      });
  run("dropout",
      [](auto& t, auto& in) {
        Rng rng(0xD0);
        return o::dropout(t, in[0], 0.5, true, rng);
      },
      one_t);
  run("affine",
      [](auto& t, auto& in) { return o::affine(t, in[0], in[1], in[2]); },
      [](Rng& rng) {
        return std::vector<Tensor<double>>{random_tensor(Shape{3, 5}, rng),
                                           random_tensor(Shape{5, 2}, rng),
                                           random_tensor(Shape{2}, rng)};
      });
  run("matmul", [](auto& t, auto& in) { return o::matmul(t, in[0], in[1]); },
      [](Rng& rng) {
        return std::vector<Tensor<double>>{random_tensor(Shape{2, 3, 4}, rng),
                                           random_tensor(Shape{2, 4, 5}, rng)};
      });
  run("transpose2", [](auto& t, auto& in) { return o::transpose2(t, in[0]); },
      [](Rng& rng) {
        return std::vector<Tensor<double>>{random_tensor(Shape{2, 3, 4}, rng)};
      });
  run("reshape",
      [](auto& t, auto& in) { return o::reshape(t, in[0], Shape{6, 16}); }, one_t);
  run("softmax", [](auto& t, auto& in) { return o::softmax(t, in[0], -1); },
      [](Rng& rng) {
        return std::vector<Tensor<double>>{random_tensor(Shape{5}, rng, -3, 3)};
      });
  run("sum_all", [](auto& t, auto& in) { return o::sum_all(t, in[0]); }, one_t);
  run("scale",
      [](auto& t, auto& in) {
        using S = std::decay_t<decltype(in[0].ptr()[0])>;
        return o::scale(t, in[0], S(0.37));
      },
      one_t);
  {
    // weighted_bce at p in {0.1, 0.5, 0.9} for both labels
    double worst = 0;
    for (double p : {0.1, 0.5, 0.9})
      for (int label : {0, 1}) {
        auto fn = [label](auto& t, auto& in) {
          return weighted_bce(t, in[0], label, LossWeights{0.7, 1.3});
        };
        worst = std::max(
            worst, case_max_err<T>(fn, {Tensor<double>::scalar(p)}, 0xBCE, rtol, atol,
                                   h, perturb));
      }
    report.push_back({"weighted_bce", worst, worst <= 1.0});
  }
  {
    const double err = micro_model_max_err<T>(rtol, atol, h, perturb);
    report.push_back({"model_forward_micro", err, err <= 1.0});
  }
  return report;
}

}  // namespace rsmn
