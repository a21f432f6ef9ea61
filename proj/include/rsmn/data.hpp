#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "rsmn/rng.hpp"
#include "rsmn/tensor.hpp"

namespace rsmn {

namespace fs = std::filesystem;

struct CropBox {
  int x = 0, y = 0, w = 0, h = 0;
};

struct VideoSample {
  std::string id;
  std::string subject_id;
  int label = 0;  // 0 posed, 1 spontaneous
  std::string frame_dir;
  double source_fps = 0;
  int frame_count = 0;
  std::optional<CropBox> crop;
};

struct Manifest {
  std::vector<VideoSample> samples;

  int count_spontaneous() const {
    int n = 0;
    for (const auto& s : samples) n += s.label == 1;
    return n;
  }
  int count_posed() const { return int(samples.size()) - count_spontaneous(); }
  std::set<std::string> subjects() const {
    std::set<std::string> out;
    for (const auto& s : samples) out.insert(s.subject_id);
    return out;
  }
};

// Frame files inside a sample directory, sorted by zero-padded numeric name.
inline std::vector<std::string> list_frames(const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("frame_dir does not exist: " + dir);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png")
      names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

inline Manifest load_manifest(const std::string& path, bool require_frames = true) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw DataError(std::string("manifest parse error: ") + e.what());
  }
  if (!j.is_array()) throw DataError("manifest must be a JSON array");
  Manifest m;
  std::set<std::string> ids;
  for (const auto& item : j) {
    VideoSample s;
    try {
      s.id = item.at("id").get<std::string>();
      s.subject_id = item.at("subject_id").get<std::string>();
      s.label = item.at("label").get<int>();
      s.frame_dir = item.at("frame_dir").get<std::string>();
      s.source_fps = item.at("source_fps").get<double>();
      if (item.contains("crop")) {
        auto c = item.at("crop");
        s.crop = CropBox{c.at(0).get<int>(), c.at(1).get<int>(), c.at(2).get<int>(),
                         c.at(3).get<int>()};
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("manifest entry invalid: ") + e.what());
    }
    if (s.label != 0 && s.label != 1)
      throw DataError("manifest entry '" + s.id + "' has bad label " +
                      std::to_string(s.label));
    if (s.source_fps <= 0)
      throw DataError("manifest entry '" + s.id + "' has non-positive source_fps");
    if (!ids.insert(s.id).second) throw DataError("duplicate manifest id '" + s.id + "'");
    if (require_frames) {
      // Relative frame_dir is resolved against the manifest location.
      fs::path dir(s.frame_dir);
      if (dir.is_relative()) dir = fs::path(path).parent_path() / dir;
      s.frame_dir = dir.string();
      s.frame_count = int(list_frames(s.frame_dir).size());
      if (s.frame_count < 1)
        throw DataError("manifest entry '" + s.id + "' has no frames in " + s.frame_dir);
    }
    m.samples.push_back(std::move(s));
  }
  return m;
}

inline void save_manifest(const Manifest& m, const std::string& path) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& s : m.samples) {
    nlohmann::json item = {{"id", s.id},
                           {"subject_id", s.subject_id},
                           {"label", s.label},
                           {"frame_dir", s.frame_dir},
                           {"source_fps", s.source_fps}};
    if (s.crop)
      item["crop"] = {s.crop->x, s.crop->y, s.crop->w, s.crop->h};
    j.push_back(item);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest: " + path);
  out << j.dump(2) << "\n";
}

// Indices floor(k * source/target) for k = 0, 1, ... below frame_count.
inline std::vector<int> sample_frames(int frame_count, double source_fps,
                                      double target_fps) {
  if (target_fps <= 0 || source_fps < target_fps)
    throw ArgumentError("sample_frames requires source_fps >= target_fps > 0");
  std::vector<int> idx;
  for (int k = 0;; ++k) {
    const int i = int(std::floor(double(k) * source_fps / target_fps));
    if (i >= frame_count) break;
    if (idx.empty() || i > idx.back()) idx.push_back(i);
  }
  if (idx.size() < 2)
    throw DataError("fewer than 2 frames remain after resampling (" +
                    std::to_string(frame_count) + " @ " + std::to_string(source_fps) +
                    " fps -> " + std::to_string(target_fps) + " fps)");
  return idx;
}

// 8-bit interleaved image buffer (H x W x C).
struct Image {
  int h = 0, w = 0, c = 0;
  std::vector<uint8_t> pix;

  uint8_t at(int y, int x, int ch) const { return pix[size_t((y * w + x) * c + ch)]; }
};

inline Image load_png(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (m.empty()) throw IoError("cannot decode image: " + path);
  if (m.channels() != 1 && m.channels() != 3)
    throw DataError("unsupported channel count in " + path);
  Image img{m.rows, m.cols, m.channels(), {}};
  img.pix.resize(size_t(m.rows) * m.cols * m.channels());
  // OpenCV decodes BGR; stored layout is RGB.
  for (int y = 0; y < m.rows; ++y) {
    const uint8_t* row = m.ptr<uint8_t>(y);
    uint8_t* dst = img.pix.data() + size_t(y) * m.cols * img.c;
    if (img.c == 3)
      for (int x = 0; x < m.cols; ++x) {
        dst[x * 3 + 0] = row[x * 3 + 2];
        dst[x * 3 + 1] = row[x * 3 + 1];
        dst[x * 3 + 2] = row[x * 3 + 0];
      }
    else
      std::copy_n(row, size_t(m.cols), dst);
  }
  return img;
}

inline void save_png(const Image& img, const std::string& path) {
  cv::Mat m(img.h, img.w, img.c == 3 ? CV_8UC3 : CV_8UC1);
  for (int y = 0; y < img.h; ++y) {
    const uint8_t* src = img.pix.data() + size_t(y) * img.w * img.c;
    uint8_t* row = m.ptr<uint8_t>(y);
    if (img.c == 3)
      for (int x = 0; x < img.w; ++x) {
        row[x * 3 + 0] = src[x * 3 + 2];
        row[x * 3 + 1] = src[x * 3 + 1];
        row[x * 3 + 2] = src[x * 3 + 0];
      }
    else
      std::copy_n(src, size_t(img.w), row);
  }
  if (!cv::imwrite(path, m)) throw IoError("cannot write image: " + path);
}

// Crop (or centered-square fallback), bilinear resize, scale to [0, 1],
// channel-first layout. Source samples are taken at pixel centers so a 2x
// downsample averages each 2x2 block.
template <typename T>
Tensor<T> preprocess_frame(const Image& img, const std::optional<CropBox>& crop,
                           int resolution) {
  int cx, cy, cw, ch;
  if (crop) {
    cx = crop->x;
    cy = crop->y;
    cw = crop->w;
    ch = crop->h;
    if (cw < 1 || ch < 1 || cx < 0 || cy < 0 || cx + cw > img.w || cy + ch > img.h)
      throw DataError("degenerate or out-of-bounds crop box");
  } else {
    const int side = std::min(img.h, img.w);
    cx = (img.w - side) / 2;
    cy = (img.h - side) / 2;
    cw = ch = side;
  }
  Tensor<T> out(Shape{1, img.c, resolution, resolution});
  const double sy = double(ch) / resolution, sx = double(cw) / resolution;
  for (int oy = 0; oy < resolution; ++oy) {
    double fy = (oy + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, double(ch - 1));
    const int y0 = int(fy), y1 = std::min(y0 + 1, ch - 1);
    const double wy = fy - y0;
    for (int ox = 0; ox < resolution; ++ox) {
      double fx = (ox + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, double(cw - 1));
      const int x0 = int(fx), x1 = std::min(x0 + 1, cw - 1);
      const double wx = fx - x0;
      for (int ic = 0; ic < img.c; ++ic) {
        const double v00 = img.at(cy + y0, cx + x0, ic), v01 = img.at(cy + y0, cx + x1, ic);
        const double v10 = img.at(cy + y1, cx + x0, ic), v11 = img.at(cy + y1, cx + x1, ic);
        const double v = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                         wy * ((1 - wx) * v10 + wx * v11);
        out.ptr()[(int64_t(ic) * resolution + oy) * resolution + ox] = T(v / 255.0);
      }
    }
  }
  return out;
}

// Frames of one video, resampled to target_fps and preprocessed.
template <typename T>
std::vector<Tensor<T>> load_video(const VideoSample& s, double target_fps, int resolution) {
  const auto names = list_frames(s.frame_dir);
  const auto idx = sample_frames(int(names.size()), s.source_fps, target_fps);
  std::vector<Tensor<T>> frames;
  frames.reserve(idx.size());
  for (int i : idx) {
    Image img = load_png((fs::path(s.frame_dir) / names[size_t(i)]).string());
    frames.push_back(preprocess_frame<T>(img, s.crop, resolution));
  }
  return frames;
}

// Subject-disjoint fold plan: subjects shuffled by seed, dealt round-robin.
struct FoldPlan {
  int k = 0;
  std::map<std::string, int> assignment;

  std::vector<VideoSample> split(const Manifest& m, int fold, bool train) const {
    if (fold < 0 || fold >= k) throw ArgumentError("fold index out of range");
    std::vector<VideoSample> out;
    for (const auto& s : m.samples) {
      auto it = assignment.find(s.subject_id);
      if (it == assignment.end())
        throw DataError("subject '" + s.subject_id + "' missing from fold plan");
      if ((it->second == fold) != train) out.push_back(s);
    }
    return out;
  }

  nlohmann::json to_json() const { return {{"k", k}, {"assignment", assignment}}; }
  static FoldPlan from_json(const nlohmann::json& j) {
    FoldPlan p;
    p.k = j.at("k").get<int>();
    p.assignment = j.at("assignment").get<std::map<std::string, int>>();
    return p;
  }
  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write fold plan: " + path);
    out << to_json().dump(2) << "\n";
  }
  static FoldPlan load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open fold plan: " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw DataError(std::string("fold plan parse error: ") + e.what());
    }
    return from_json(j);
  }
};

inline FoldPlan make_folds(const Manifest& m, int k, uint64_t seed) {
  const auto subject_set = m.subjects();
  if (k < 1 || size_t(k) > subject_set.size())
    throw ArgumentError("make_folds: k must be in [1, n_subjects]");
  std::vector<std::string> subjects(subject_set.begin(), subject_set.end());
  Rng rng(Rng::mix(seed, 0xF01D));
  rng.shuffle(subjects.begin(), subjects.end());
  FoldPlan plan;
  plan.k = k;
  for (size_t i = 0; i < subjects.size(); ++i) plan.assignment[subjects[i]] = int(i % k);
  return plan;
}

}  // namespace rsmn
