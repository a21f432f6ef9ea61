#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "rsmn/data.hpp"
#include "rsmn/synth.hpp"

using namespace rsmn;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("rsmn_test_" + tag + "_" +
                                        std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_file(const fs::path& p, const std::string& body) {
  std::ofstream out(p);
  out << body;
}

}  // namespace

TEST_CASE("manifest parsing, counts and validation") {
  TempDir tmp("manifest");
  const auto mpath = (tmp.path / "m.json").string();

  write_file(mpath, R"([
    {"id":"a","subject_id":"s1","label":1,"frame_dir":"a","source_fps":25.0},
    {"id":"b","subject_id":"s2","label":0,"frame_dir":"b","source_fps":25.0,
     "crop":[2,3,10,12]}
  ])");
  Manifest m = load_manifest(mpath, /*require_frames=*/false);
  CHECK(m.samples.size() == 2);
  CHECK(m.count_spontaneous() == 1);
  CHECK(m.count_posed() == 1);
  CHECK(m.subjects() == std::set<std::string>{"s1", "s2"});
  REQUIRE(m.samples[1].crop.has_value());
  CHECK(m.samples[1].crop->w == 10);

  SUBCASE("duplicate id is reported by name") {
    write_file(mpath, R"([
      {"id":"dup","subject_id":"s1","label":1,"frame_dir":"a","source_fps":25.0},
      {"id":"dup","subject_id":"s2","label":0,"frame_dir":"b","source_fps":25.0}
    ])");
    try {
      load_manifest(mpath, false);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("dup") != std::string::npos);
    }
  }
  SUBCASE("bad label rejected") {
    write_file(mpath, R"([{"id":"x","subject_id":"s1","label":2,"frame_dir":"a","source_fps":25.0}])");
    CHECK_THROWS_AS(load_manifest(mpath, false), DataError);
  }
  SUBCASE("non-positive fps rejected") {
    write_file(mpath, R"([{"id":"x","subject_id":"s1","label":1,"frame_dir":"a","source_fps":0}])");
    CHECK_THROWS_AS(load_manifest(mpath, false), DataError);
  }
  SUBCASE("missing frame_dir rejected when frames are required") {
    write_file(mpath, R"([{"id":"x","subject_id":"s1","label":1,"frame_dir":"nope","source_fps":25.0}])");
    CHECK_THROWS_AS(load_manifest(mpath, true), DataError);
  }
  SUBCASE("dataset-scale class counts") {
    // a corpus with 597 spontaneous / 643 posed entries across 400 subjects
    nlohmann::json j = nlohmann::json::array();
    for (int i = 0; i < 1240; ++i)
      j.push_back({{"id", "v" + std::to_string(i)},
                   {"subject_id", "s" + std::to_string(i % 400)},
                   {"label", i < 597 ? 1 : 0},
                   {"frame_dir", "d"},
                   {"source_fps", 50.0}});
    write_file(mpath, j.dump());
    Manifest big = load_manifest(mpath, false);
    CHECK(big.count_spontaneous() == 597);
    CHECK(big.count_posed() == 643);
    CHECK(big.subjects().size() == 400);
  }
}

TEST_CASE("manifest save/load round trip") {
  TempDir tmp("mrt");
  Manifest m;
  VideoSample s;
  s.id = "vid0";
  s.subject_id = "subj0";
  s.label = 1;
  s.frame_dir = "/abs/frames";
  s.source_fps = 30.0;
  s.crop = CropBox{1, 2, 3, 4};
  m.samples.push_back(s);
  const auto p = (tmp.path / "m.json").string();
  save_manifest(m, p);
  Manifest back = load_manifest(p, false);
  REQUIRE(back.samples.size() == 1);
  CHECK(back.samples[0].id == "vid0");
  CHECK(back.samples[0].source_fps == 30.0);
  REQUIRE(back.samples[0].crop.has_value());
  CHECK(back.samples[0].crop->h == 4);
}

TEST_CASE("temporal resampling index arithmetic") {
  // 100 frames at 50 FPS down to 5 FPS: every 10th frame
  auto idx = sample_frames(100, 50.0, 5.0);
  std::vector<int> want(10);
  std::iota(want.begin(), want.end(), 0);
  for (auto& v : want) v *= 10;
  CHECK(idx == want);

  // source == target keeps every frame
  auto all = sample_frames(7, 5.0, 5.0);
  CHECK(all == std::vector<int>{0, 1, 2, 3, 4, 5, 6});

  // 25 -> 5 is a stride of 5
  auto s5 = sample_frames(12, 25.0, 5.0);
  CHECK(s5 == std::vector<int>{0, 5, 10});

  // strictly increasing and in range for awkward ratios
  auto odd = sample_frames(97, 29.97, 5.0);
  for (size_t i = 1; i < odd.size(); ++i) CHECK(odd[i] > odd[i - 1]);
  CHECK(odd.front() >= 0);
  CHECK(odd.back() < 97);

  CHECK_THROWS_AS(sample_frames(100, 5.0, 25.0), ArgumentError);
  CHECK_THROWS_AS(sample_frames(100, 50.0, 0.0), ArgumentError);
  CHECK_THROWS_AS(sample_frames(4, 50.0, 5.0), DataError);  // one frame left
}

TEST_CASE("png io round trip preserves channel order") {
  TempDir tmp("png");
  Image img{4, 5, 3, std::vector<uint8_t>(60)};
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 5; ++x) {
      img.pix[size_t((y * 5 + x) * 3 + 0)] = uint8_t(200);       // R
      img.pix[size_t((y * 5 + x) * 3 + 1)] = uint8_t(10 * y);    // G
      img.pix[size_t((y * 5 + x) * 3 + 2)] = uint8_t(10 * x);    // B
    }
  const auto p = (tmp.path / "t.png").string();
  save_png(img, p);
  Image back = load_png(p);
  CHECK(back.h == 4);
  CHECK(back.w == 5);
  CHECK(back.c == 3);
  CHECK(back.pix == img.pix);
  CHECK_THROWS_AS(load_png((tmp.path / "missing.png").string()), IoError);
}

TEST_CASE("frame preprocessing") {
  SUBCASE("constant image maps to v/255 everywhere") {
    Image img{10, 10, 3, std::vector<uint8_t>(300, 200)};
    auto t = preprocess_frame<double>(img, std::nullopt, 6);
    CHECK(t.shape() == Shape{1, 3, 6, 6});
    for (double v : t.data()) CHECK(v == doctest::Approx(200.0 / 255.0).epsilon(1e-12));
  }
  SUBCASE("2x downsample averages each 2x2 block") {
    // 96x96 checkerboard of 0/255: every 2x2 block averages to 127.5
    Image img{96, 96, 1, {}};
    img.pix.resize(96 * 96);
    for (int y = 0; y < 96; ++y)
      for (int x = 0; x < 96; ++x) img.pix[size_t(y * 96 + x)] = ((x + y) % 2) ? 255 : 0;
    auto t = preprocess_frame<double>(img, std::nullopt, 48);
    for (double v : t.data()) CHECK(v == doctest::Approx(127.5 / 255.0).epsilon(1e-9));
  }
  SUBCASE("full-image crop equals no crop on a square image") {
    Rng rng(11);
    Image img{20, 20, 3, {}};
    img.pix.resize(1200);
    for (auto& p : img.pix) p = uint8_t(rng.below(256));
    auto a = preprocess_frame<double>(img, std::nullopt, 8);
    auto b = preprocess_frame<double>(img, CropBox{0, 0, 20, 20}, 8);
    CHECK(a.data() == b.data());
  }
  SUBCASE("values stay in [0, 1]") {
    Rng rng(12);
    Image img{17, 31, 3, {}};
    img.pix.resize(size_t(17 * 31 * 3));
    for (auto& p : img.pix) p = uint8_t(rng.below(256));
    auto t = preprocess_frame<float>(img, std::nullopt, 48);
    for (float v : t.data()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
  SUBCASE("degenerate and out-of-bounds crops rejected") {
    Image img{10, 10, 1, std::vector<uint8_t>(100, 0)};
    CHECK_THROWS_AS(preprocess_frame<double>(img, CropBox{0, 0, 0, 5}, 4), DataError);
    CHECK_THROWS_AS(preprocess_frame<double>(img, CropBox{8, 8, 5, 5}, 4), DataError);
    CHECK_THROWS_AS(preprocess_frame<double>(img, CropBox{-1, 0, 5, 5}, 4), DataError);
  }
}

TEST_CASE("fold plans are subject-disjoint and exhaustive") {
  Manifest m;
  for (int s = 0; s < 10; ++s)
    for (int v = 0; v < 3; ++v) {
      VideoSample vs;
      vs.id = "s" + std::to_string(s) + "v" + std::to_string(v);
      vs.subject_id = "subj" + std::to_string(s);
      vs.label = v % 2;
      vs.source_fps = 25;
      m.samples.push_back(vs);
    }

  SUBCASE("k equal to subject count gives singleton folds") {
    auto plan = make_folds(m, 10, 42);
    std::map<int, int> fold_sizes;
    for (const auto& [subj, f] : plan.assignment) ++fold_sizes[f];
    CHECK(fold_sizes.size() == 10);
    for (const auto& [f, n] : fold_sizes) CHECK(n == 1);
  }
  SUBCASE("train/val splits partition the manifest with disjoint subjects") {
    for (int k : {2, 3, 4}) {
      auto plan = make_folds(m, k, 7);
      for (int f = 0; f < k; ++f) {
        auto val = plan.split(m, f, false);
        auto train = plan.split(m, f, true);
        CHECK(val.size() + train.size() == m.samples.size());
        CHECK(!val.empty());
        CHECK(!train.empty());
        std::set<std::string> vs, ts;
        for (const auto& s : val) vs.insert(s.subject_id);
        for (const auto& s : train) ts.insert(s.subject_id);
        for (const auto& s : vs) CHECK(ts.count(s) == 0);
      }
    }
  }
  SUBCASE("same seed, same plan; different seed, usually different") {
    auto a = make_folds(m, 4, 1);
    auto b = make_folds(m, 4, 1);
    CHECK(a.assignment == b.assignment);
  }
  SUBCASE("k out of range") {
    CHECK_THROWS_AS(make_folds(m, 11, 0), ArgumentError);
    CHECK_THROWS_AS(make_folds(m, 0, 0), ArgumentError);
  }
  SUBCASE("plan json round trip and missing-subject detection") {
    TempDir tmp("fold");
    auto plan = make_folds(m, 3, 5);
    const auto p = (tmp.path / "folds.json").string();
    plan.save(p);
    auto back = FoldPlan::load(p);
    CHECK(back.k == plan.k);
    CHECK(back.assignment == plan.assignment);
    VideoSample stray;
    stray.id = "stray";
    stray.subject_id = "unknown";
    stray.source_fps = 25;
    Manifest m2 = m;
    m2.samples.push_back(stray);
    CHECK_THROWS_AS(plan.split(m2, 0, true), DataError);
  }
}

TEST_CASE("synthetic corpus is byte-level deterministic") {
  SynthConfig cfg;
  cfg.n_subjects = 2;
  cfg.videos_per_subject = 2;
  cfg.resolution = 32;
  cfg.seed = 314;
  TempDir a("syn_a"), b("syn_b");
  Manifest ma = synth_generate(cfg, a.path.string());
  Manifest mb = synth_generate(cfg, b.path.string());
  CHECK(ma.samples.size() == 4);
  CHECK(ma.count_posed() == 2);
  CHECK(ma.count_spontaneous() == 2);
  CHECK(ma.subjects().size() == 2);
  for (size_t i = 0; i < ma.samples.size(); ++i) {
    const auto& sa = ma.samples[i];
    const auto& sb = mb.samples[i];
    CHECK(sa.frame_count == sb.frame_count);
    CHECK(sa.frame_count >= 2);
    auto names = list_frames(sa.frame_dir);
    CHECK(int(names.size()) == sa.frame_count);
    for (const auto& n : names) {
      std::ifstream fa(fs::path(sa.frame_dir) / n, std::ios::binary);
      std::ifstream fb(fs::path(sb.frame_dir) / n, std::ios::binary);
      std::string ba((std::istreambuf_iterator<char>(fa)), {});
      std::string bb((std::istreambuf_iterator<char>(fb)), {});
      CHECK(!ba.empty());
      CHECK(ba == bb);
    }
  }
  // a different seed changes the pixels
  SynthConfig cfg2 = cfg;
  cfg2.seed = 315;
  TempDir c("syn_c");
  Manifest mc = synth_generate(cfg2, c.path.string());
  std::ifstream fa(fs::path(ma.samples[0].frame_dir) / "000000.png", std::ios::binary);
  std::ifstream fc(fs::path(mc.samples[0].frame_dir) / "000000.png", std::ios::binary);
  std::string ba((std::istreambuf_iterator<char>(fa)), {});
  std::string bc((std::istreambuf_iterator<char>(fc)), {});
  CHECK(ba != bc);
}

namespace {

// Hand-built two-feature summary of one video, independent of the model:
//  f0: fraction of frames whose mouth extent is >= 80% of the video max
//      (plateau envelopes score high, sharp-peak envelopes score low)
//  f1: correlation between mouth extent and upper-face darkness
//      (eye brightness is coupled to the smile only in class 1)
std::pair<double, double> video_features(const VideoSample& s) {
  const auto names = list_frames(s.frame_dir);
  std::vector<double> mouth, eye;
  for (const auto& n : names) {
    Image img = load_png((fs::path(s.frame_dir) / n).string());
    const int r = img.h;
    int mouth_px = 0;
    std::vector<double> upper_gray;
    for (int y = 0; y < r; ++y)
      for (int x = 0; x < r; ++x) {
        const int R = img.at(y, x, 0), G = img.at(y, x, 1), B = img.at(y, x, 2);
        if (R > 55 && R < 150 && G < 90 && B < 90 && R - G > 30) ++mouth_px;
        const double dx = x - SynthLayout::kFaceCx * r;
        const double dy = y - SynthLayout::kFaceCy * r;
        if (std::hypot(dx, dy) < 0.30 * r && y < 0.5 * r)
          upper_gray.push_back((R + G + B) / 3.0);
      }
    // darkest pixels in the upper face are the eyes
    const size_t k = std::min<size_t>(upper_gray.size(), size_t(0.02 * r * r));
    std::partial_sort(upper_gray.begin(), upper_gray.begin() + long(k), upper_gray.end());
    double dark = 0;
    for (size_t i = 0; i < k; ++i) dark += upper_gray[i];
    mouth.push_back(double(mouth_px));
    eye.push_back(dark / double(k));
  }
  const double mmax = *std::max_element(mouth.begin(), mouth.end());
  int plateau = 0;
  for (double v : mouth) plateau += v >= 0.8 * mmax;
  const double f0 = double(plateau) / double(mouth.size());

  auto mean = [](const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  };
  const double mm = mean(mouth), em = mean(eye);
  double num = 0, dm = 0, de = 0;
  for (size_t i = 0; i < mouth.size(); ++i) {
    num += (mouth[i] - mm) * (eye[i] - em);
    dm += (mouth[i] - mm) * (mouth[i] - mm);
    de += (eye[i] - em) * (eye[i] - em);
  }
  const double f1 = (dm > 0 && de > 0) ? num / std::sqrt(dm * de) : 0.0;
  return {f0, f1};
}

}  // namespace

TEST_CASE("synthetic classes are separable by hand-built motion features") {
  SynthConfig cfg;  // defaults: 12 subjects x 4 videos, noise 0.05
  cfg.seed = 2024;
  TempDir tmp("syn_learn");
  Manifest m = synth_generate(cfg, tmp.path.string());
  auto plan = make_folds(m, 4, 2024);
  auto train = plan.split(m, 0, true);
  auto held = plan.split(m, 0, false);
  REQUIRE(held.size() >= 8);

  auto featurize = [](const std::vector<VideoSample>& vs) {
    std::vector<std::array<double, 2>> x;
    std::vector<int> y;
    for (const auto& s : vs) {
      auto [f0, f1] = video_features(s);
      x.push_back({f0, f1});
      y.push_back(s.label);
    }
    return std::pair(x, y);
  };
  auto [xt, yt] = featurize(train);
  auto [xv, yv] = featurize(held);

  // logistic regression by plain gradient descent
  double w0 = 0, w1 = 0, b = 0;
  for (int it = 0; it < 3000; ++it) {
    double g0 = 0, g1 = 0, gb = 0;
    for (size_t i = 0; i < xt.size(); ++i) {
      const double z = w0 * xt[i][0] + w1 * xt[i][1] + b;
      const double p = 1.0 / (1.0 + std::exp(-z));
      const double d = p - yt[i];
      g0 += d * xt[i][0];
      g1 += d * xt[i][1];
      gb += d;
    }
    const double lr = 0.5 / double(xt.size());
    w0 -= lr * g0;
    w1 -= lr * g1;
    b -= lr * gb;
  }
  int correct = 0;
  for (size_t i = 0; i < xv.size(); ++i) {
    const double z = w0 * xv[i][0] + w1 * xv[i][1] + b;
    correct += ((z >= 0) ? 1 : 0) == yv[i];
  }
  const double acc = double(correct) / double(xv.size());
  INFO("held-out accuracy ", acc, " (w0=", w0, " w1=", w1, ")");
  CHECK(acc >= 0.95);
}

TEST_CASE("load_video resamples and preprocesses end to end") {
  SynthConfig cfg;
  cfg.n_subjects = 1;
  cfg.videos_per_subject = 1;
  cfg.resolution = 32;
  cfg.seed = 9;
  TempDir tmp("syn_load");
  Manifest m = synth_generate(cfg, tmp.path.string());
  const auto& s = m.samples[0];
  auto frames = load_video<float>(s, 5.0, 16);
  const auto idx = sample_frames(s.frame_count, s.source_fps, 5.0);
  CHECK(frames.size() == idx.size());
  for (const auto& f : frames) {
    CHECK(f.shape() == Shape{1, 3, 16, 16});
    for (float v : f.data()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
}
