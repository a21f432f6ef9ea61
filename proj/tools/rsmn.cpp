// Command-line entry point: synthesize data, plan folds, train, evaluate,
// predict single videos, export embeddings, run the gradient-check suite and
// the resolution/FPS sweep.

#include <CLI11.hpp>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <thread>

#include "rsmn/data.hpp"
#include "rsmn/gradcheck.hpp"
#include "rsmn/model.hpp"
#include "rsmn/synth.hpp"
#include "rsmn/training.hpp"

namespace {

using namespace rsmn;

nlohmann::json load_config_file(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw DataError(std::string("config parse error: ") + e.what());
  }
  return j;
}

struct TrainFlags {
  std::string manifest_path, folds_path, config_path, out_dir;
  int fold = 0;
  // optional overrides; applied only when the flag was passed
  CLI::App* cmd = nullptr;
  int epochs = 60, batch = 16, resolution = 48;
  double lr = 1e-3, weight_decay = 0.005, fps = 5.0, dropout = 0.5;
  uint64_t seed = 0;
  std::string weighting = "auto", head = "sigmoid", decay_mode = "weight";
  bool no_tsa = false, permute_labels = false;

  void add_options(CLI::App* app) {
    cmd = app;
    app->add_option("--manifest", manifest_path, "manifest JSON")->required();
    app->add_option("--folds", folds_path, "fold plan JSON")->required();
    app->add_option("--fold", fold, "held-out fold index");
    app->add_option("--config", config_path, "JSON config file (flags override it)");
    app->add_option("--seed", seed, "random seed");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--batch", batch, "videos per gradient step");
    app->add_option("--lr", lr, "learning rate");
    app->add_option("--weight-decay", weight_decay, "decay constant");
    app->add_option("--decay-mode", decay_mode, "weight|lr")
        ->check(CLI::IsMember({"weight", "lr"}));
    app->add_option("--weighting", weighting, "auto|unit|proportion")
        ->check(CLI::IsMember({"auto", "unit", "proportion"}));
    app->add_option("--fps", fps, "target sampling FPS");
    app->add_option("--resolution", resolution, "input resolution");
    app->add_option("--dropout", dropout, "dropout probability");
    app->add_option("--head", head, "sigmoid|softmax")
        ->check(CLI::IsMember({"sigmoid", "softmax"}));
    app->add_flag("--no-tsa", no_tsa, "bypass the TSA block");
    app->add_flag("--permute-labels", permute_labels, "shuffle training labels");
  }

  // Precedence: built-in defaults < config file < explicit flags.
  std::pair<ModelConfig, TrainConfig> resolve() const {
    nlohmann::json j = load_config_file(config_path);
    ModelConfig mc = ModelConfig::from_json(j);
    TrainConfig tc = TrainConfig::from_json(j);
    auto passed = [&](const std::string& f) { return cmd->count(f) > 0; };
    if (passed("--seed")) tc.seed = seed;
    if (passed("--epochs")) tc.epochs = epochs;
    if (passed("--batch")) tc.batch_videos = batch;
    if (passed("--lr")) tc.lr = lr;
    if (passed("--weight-decay")) tc.weight_decay = weight_decay;
    if (passed("--decay-mode"))
      tc.decay_mode = decay_mode == "lr" ? DecayMode::kLr : DecayMode::kWeight;
    if (passed("--weighting")) tc.weighting = weighting_from_name(weighting);
    if (passed("--fps")) tc.target_fps = fps;
    if (passed("--resolution")) mc.resolution = resolution;
    if (passed("--dropout")) mc.dropout_p = dropout;
    if (passed("--head")) mc.head = head_from_name(head);
    if (no_tsa) mc.use_tsa = false;
    if (permute_labels) tc.permute_labels = true;
    tc.resolution = mc.resolution;
    return {mc, tc};
  }
};

void write_scores_csv(const EvalResult& res, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write scores file: " + path);
  out << "id,label,score,predicted\n";
  for (const auto& s : res.scores) {
    char line[160];
    std::snprintf(line, sizeof(line), "%s,%d,%.8f,%d\n", s.id.c_str(), s.label, s.score,
                  s.predicted);
    out << line;
  }
}

std::vector<VideoSample> select_split(const Manifest& m, const FoldPlan* plan, int fold,
                                      const std::string& split) {
  if (split == "all" || !plan) return m.samples;
  if (split == "train") return plan->split(m, fold, true);
  if (split == "test") return plan->split(m, fold, false);
  throw ArgumentError("unknown split '" + split + "' (expected train|test|all)");
}

int run_gradcheck_cmd(const std::string& precision, bool perturb) {
  const bool dbl = precision == "double";
  const double rtol = dbl ? 1e-5 : 1e-3;
  const double atol = dbl ? 1e-7 : 1e-5;
  auto report = dbl ? run_gradcheck<double>(rtol, atol, perturb)
                    : run_gradcheck<float>(rtol, atol, perturb);
  bool all_pass = true;
  for (const auto& c : report) {
    std::printf("op=%-22s max_rel_err=%.3e %s\n", c.name.c_str(), c.max_err * rtol,
                c.pass ? "PASS" : "FAIL");
    all_pass = all_pass && c.pass;
  }
  std::printf("gradcheck %s (%zu ops, precision=%s)\n", all_pass ? "PASSED" : "FAILED",
              report.size(), precision.c_str());
  return all_pass ? 0 : 2;
}

int worker_count() {
  if (const char* env = std::getenv("RSMN_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return int(std::max(1u, std::thread::hardware_concurrency()));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spontaneous vs posed smile video classifier"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic smile dataset");
  SynthConfig scfg;
  std::string synth_out;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--subjects", scfg.n_subjects, "number of subjects");
  synth->add_option("--videos-per-subject", scfg.videos_per_subject, "videos per subject");
  synth->add_option("--fps", scfg.source_fps, "source frame rate");
  synth->add_option("--resolution", scfg.resolution, "frame resolution in pixels");
  synth->add_option("--channels", scfg.channels, "1 (grayscale) or 3 (RGB)");
  synth->add_option("--noise", scfg.noise_level, "additive pixel noise level");
  synth->add_option("--duration-min", scfg.duration_min, "min video length (s)");
  synth->add_option("--duration-max", scfg.duration_max, "max video length (s)");
  synth->add_option("--seed", scfg.seed, "random seed");

  // folds
  auto* folds = app.add_subcommand("folds", "plan subject-disjoint folds");
  std::string folds_manifest, folds_out;
  int folds_k = 4;
  uint64_t folds_seed = 0;
  folds->add_option("--manifest", folds_manifest, "manifest JSON")->required();
  folds->add_option("--k", folds_k, "number of folds");
  folds->add_option("--seed", folds_seed, "random seed");
  folds->add_option("--out", folds_out, "output fold plan JSON")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "train on one fold");
  TrainFlags tf;
  tf.add_options(train_cmd);
  train_cmd->add_option("--out", tf.out_dir, "output directory")->required();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_manifest, eval_folds, eval_split = "test", eval_scores;
  int eval_fold = 0, eval_resolution = 0;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--manifest", eval_manifest, "manifest JSON")->required();
  eval_cmd->add_option("--folds", eval_folds, "fold plan JSON");
  eval_cmd->add_option("--fold", eval_fold, "fold index");
  eval_cmd->add_option("--split", eval_split, "train|test|all");
  eval_cmd->add_option("--resolution", eval_resolution,
                       "expected resolution (must match the checkpoint)");
  eval_cmd->add_option("--scores", eval_scores, "per-video scores CSV path");

  // predict
  auto* predict = app.add_subcommand("predict", "score a single frame directory");
  std::string pred_ckpt, pred_frames;
  double pred_fps = 0;
  predict->add_option("--checkpoint", pred_ckpt, "checkpoint file")->required();
  predict->add_option("--frames", pred_frames, "directory of PNG frames")->required();
  predict->add_option("--source-fps", pred_fps, "source frame rate")->required();

  // embed
  auto* embed = app.add_subcommand("embed", "export per-video embeddings");
  std::string emb_ckpt, emb_manifest, emb_folds, emb_split = "all", emb_out;
  int emb_fold = 0;
  embed->add_option("--checkpoint", emb_ckpt, "checkpoint file")->required();
  embed->add_option("--manifest", emb_manifest, "manifest JSON")->required();
  embed->add_option("--folds", emb_folds, "fold plan JSON");
  embed->add_option("--fold", emb_fold, "fold index");
  embed->add_option("--split", emb_split, "train|test|all");
  embed->add_option("--out", emb_out, "embeddings CSV path")->required();

  // gradcheck
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference oracle suite");
  std::string gc_precision = "double";
  bool gc_perturb = false;
  gradcheck_cmd->add_option("--precision", gc_precision, "double|single")
      ->check(CLI::IsMember({"double", "single"}));
  gradcheck_cmd
      ->add_flag("--perturb", gc_perturb, "inject a deliberate backward fault (self-test)")
      ->group("");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "resolution x FPS accuracy grid");
  TrainFlags sf;
  sf.add_options(sweep);
  std::string sweep_out, sweep_res = "48,64,96,112", sweep_fps = "1,3,5,7";
  sweep->add_option("--out", sweep_out, "grid CSV path")->required();
  sweep->add_option("--resolutions", sweep_res, "comma-separated resolutions");
  sweep->add_option("--fps-list", sweep_fps, "comma-separated FPS values");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*synth) {
      Manifest m = synth_generate(scfg, synth_out);
      std::printf("manifest=%s spontaneous=%d posed=%d\n",
                  (fs::path(synth_out) / "manifest.json").string().c_str(),
                  m.count_spontaneous(), m.count_posed());
      return 0;
    }
    if (*folds) {
      Manifest m = load_manifest(folds_manifest);
      FoldPlan plan = make_folds(m, folds_k, folds_seed);
      plan.save(folds_out);
      std::printf("folds=%s k=%d subjects=%zu\n", folds_out.c_str(), plan.k,
                  plan.assignment.size());
      return 0;
    }
    if (*train_cmd) {
      auto [mc, tc] = tf.resolve();
      Manifest m = load_manifest(tf.manifest_path);
      FoldPlan plan = FoldPlan::load(tf.folds_path);
      if (tf.fold < 0 || tf.fold >= plan.k)
        throw ArgumentError("fold index " + std::to_string(tf.fold) +
                            " out of range for k=" + std::to_string(plan.k));
      std::error_code ec;
      fs::create_directories(tf.out_dir, ec);
      auto res = train(m, plan, tf.fold, mc, tc);
      const std::string ckpt_path = (fs::path(tf.out_dir) / "checkpoint.rsmn").string();
      save_checkpoint(res.checkpoint, ckpt_path);
      save_metrics_csv(res.metrics, (fs::path(tf.out_dir) / "metrics.csv").string());
      double final_val = 0, final_train = 0;
      for (const auto& em : res.metrics) {
        if (em.split == "val") final_val = em.accuracy;
        if (em.split == "train") final_train = em.accuracy;
      }
      std::printf("checkpoint=%s train_accuracy=%.4f val_accuracy=%.4f\n",
                  ckpt_path.c_str(), final_train, final_val);
      return 0;
    }
    if (*eval_cmd) {
      Checkpoint ckpt = load_checkpoint(eval_ckpt);
      if (eval_cmd->count("--resolution") &&
          eval_resolution != ckpt.model_config.resolution)
        throw ArgumentError("resolution " + std::to_string(eval_resolution) +
                            " does not match checkpoint resolution " +
                            std::to_string(ckpt.model_config.resolution));
      Manifest m = load_manifest(eval_manifest);
      std::optional<FoldPlan> plan;
      if (!eval_folds.empty()) plan = FoldPlan::load(eval_folds);
      if (plan && (eval_fold < 0 || eval_fold >= plan->k))
        throw ArgumentError("fold index out of range");
      auto samples = select_split(m, plan ? &*plan : nullptr, eval_fold, eval_split);
      EvalResult res = evaluate(ckpt, samples);
      std::printf("accuracy=%.4f\n", res.accuracy);
      if (!eval_scores.empty()) write_scores_csv(res, eval_scores);
      return 0;
    }
    if (*predict) {
      Checkpoint ckpt = load_checkpoint(pred_ckpt);
      VideoSample s;
      s.id = "video";
      s.frame_dir = pred_frames;
      s.source_fps = pred_fps;
      auto frames = load_video<float>(s, ckpt.train_config.target_fps,
                                      ckpt.model_config.resolution);
      ModelParams<float> params = ckpt.params;
      Tape<float> tape;
      tape.set_recording(false);
      Rng rng(0);
      auto out = model_forward(tape, frames, params, ckpt.model_config, false, rng);
      std::printf("score=%.6f label=%d\n", positive_score(out.score),
                  predict_label(out.score));
      return 0;
    }
    if (*embed) {
      Checkpoint ckpt = load_checkpoint(emb_ckpt);
      Manifest m = load_manifest(emb_manifest);
      std::optional<FoldPlan> plan;
      if (!emb_folds.empty()) plan = FoldPlan::load(emb_folds);
      auto samples = select_split(m, plan ? &*plan : nullptr, emb_fold, emb_split);
      export_embeddings(ckpt, samples, emb_out);
      std::printf("embeddings=%s rows=%zu\n", emb_out.c_str(), samples.size());
      return 0;
    }
    if (*gradcheck_cmd) return run_gradcheck_cmd(gc_precision, gc_perturb);
    if (*sweep) {
      auto [mc0, tc0] = sf.resolve();
      Manifest m = load_manifest(sf.manifest_path);
      FoldPlan plan = FoldPlan::load(sf.folds_path);
      std::vector<int> resolutions;
      for (const auto& tok : CLI::detail::split(sweep_res, ','))
        resolutions.push_back(std::stoi(tok));
      std::vector<double> fps_list;
      for (const auto& tok : CLI::detail::split(sweep_fps, ','))
        fps_list.push_back(std::stod(tok));
      std::sort(resolutions.begin(), resolutions.end());
      std::sort(fps_list.begin(), fps_list.end());

      struct Cell {
        int resolution;
        double fps;
        double accuracy = 0;
        bool ok = false;
        std::string error;
      };
      std::vector<Cell> cells;
      for (int r : resolutions)
        for (double f : fps_list) cells.push_back({r, f});

      std::atomic<size_t> next{0};
      auto work = [&]() {
        for (;;) {
          const size_t i = next.fetch_add(1);
          if (i >= cells.size()) return;
          Cell& cell = cells[i];
          try {
            ModelConfig mc = mc0;
            TrainConfig tc = tc0;
            mc.resolution = cell.resolution;
            tc.resolution = cell.resolution;
            tc.target_fps = cell.fps;
            tc.seed = tc0.seed + i;
            auto res = train(m, plan, sf.fold, mc, tc);
            auto test = plan.split(m, sf.fold, false);
            cell.accuracy = evaluate(res.checkpoint, test).accuracy;
            cell.ok = true;
          } catch (const std::exception& e) {
            cell.error = e.what();
          }
        }
      };
      const int n_workers = std::min<int>(worker_count(), int(cells.size()));
      std::vector<std::thread> pool;
      for (int i = 0; i < n_workers; ++i) pool.emplace_back(work);
      for (auto& t : pool) t.join();

      std::ofstream out(sweep_out);
      if (!out) throw IoError("cannot write sweep file: " + sweep_out);
      out << "resolution,fps,accuracy\n";
      bool any_failed = false;
      for (const auto& cell : cells) {
        char line[96];
        if (cell.ok)
          std::snprintf(line, sizeof(line), "%d,%g,%.6f\n", cell.resolution, cell.fps,
                        cell.accuracy);
        else
          std::snprintf(line, sizeof(line), "%d,%g,nan\n", cell.resolution, cell.fps);
        out << line;
        if (!cell.ok) {
          any_failed = true;
          std::fprintf(stderr, "cell (%d, %g) failed: %s\n", cell.resolution, cell.fps,
                       cell.error.c_str());
        }
      }
      std::printf("sweep=%s cells=%zu\n", sweep_out.c_str(), cells.size());
      return any_failed ? 1 : 0;
    }
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 2;
  }
  return 0;
}
