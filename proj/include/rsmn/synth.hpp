#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "rsmn/data.hpp"
#include "rsmn/rng.hpp"

namespace rsmn {

// Deterministic face-schematic video generator. Class 0 (posed) mouths follow
// a symmetric trapezoid amplitude envelope with constant eye brightness;
// class 1 (spontaneous) mouths follow an asymmetric smooth envelope (fast
// onset, slow offset, jittered) and the eye region brightness tracks the
// mouth amplitude. The classes are therefore motion-defined, not appearance-
// defined.
struct SynthConfig {
  int n_subjects = 12;
  int videos_per_subject = 4;
  int resolution = 64;
  int channels = 3;
  double source_fps = 25.0;
  double duration_min = 1.4;
  double duration_max = 2.4;
  double noise_level = 0.05;
  uint64_t seed = 0;

  void validate() const {
    if (n_subjects < 1 || videos_per_subject < 1 || resolution < 16)
      throw ArgumentError("synth config: counts must be positive, resolution >= 16");
    if (channels != 1 && channels != 3)
      throw ArgumentError("synth config: channels must be 1 or 3");
    if (source_fps <= 0 || duration_min <= 0 || duration_max < duration_min)
      throw ArgumentError("synth config: bad fps/duration range");
    if (duration_min * 5.0 < 2.0)
      throw ArgumentError("synth config: duration must yield >= 2 frames at 5 FPS");
    if (noise_level < 0) throw ArgumentError("synth config: noise_level must be >= 0");
  }
};

// Face layout as fractions of the frame; shared with the feature oracle used
// by the verification tests.
struct SynthLayout {
  static constexpr double kFaceCx = 0.5, kFaceCy = 0.52, kFaceR = 0.42;
  static constexpr double kEyeDx = 0.16, kEyeCy = 0.38, kEyeR = 0.06;
  static constexpr double kMouthCx = 0.5, kMouthCy = 0.72, kMouthH = 0.05;
  static constexpr double kMouthWMin = 0.10, kMouthWGain = 0.24;
};

namespace detail {

struct SubjectGeometry {
  double dx, dy;       // face center offset
  double face_scale;   // radius multiplier
  double eye_spacing;  // eye dx multiplier
  double tone;         // skin tone multiplier
};

inline SubjectGeometry subject_geometry(uint64_t seed, int subject) {
  Rng rng(Rng::mix(seed, 0x5AB0 + uint64_t(subject)));
  return {rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03), rng.uniform(0.92, 1.08),
          rng.uniform(0.9, 1.1), rng.uniform(0.9, 1.05)};
}

// Amplitude envelope in [0,1] at normalized time t in [0,1].
struct Envelope {
  int label;
  double rise;         // posed: onset/offset fraction
  double peak_time;    // spontaneous
  double tau_on, tau_off;
  std::vector<double> jitter;  // per-frame, spontaneous only

  double at(double t, int frame) const {
    if (label == 0) {
      double a;
      if (t < rise)
        a = t / rise;
      else if (t > 1.0 - rise)
        a = (1.0 - t) / rise;
      else
        a = 1.0;
      return std::clamp(a, 0.0, 1.0);
    }
    double a;
    if (t <= peak_time) {
      const double norm = 1.0 - std::exp(-peak_time / tau_on);
      a = (1.0 - std::exp(-t / tau_on)) / norm;
    } else {
      a = std::exp(-(t - peak_time) / tau_off);
    }
    if (frame >= 0 && frame < int(jitter.size())) a += jitter[size_t(frame)];
    return std::clamp(a, 0.0, 1.0);
  }
};

inline Envelope make_envelope(int label, int n_frames, Rng& rng) {
  Envelope e;
  e.label = label;
  e.rise = rng.uniform(0.10, 0.18);
  e.peak_time = rng.uniform(0.30, 0.50);
  e.tau_on = rng.uniform(0.05, 0.10);
  e.tau_off = rng.uniform(0.45, 0.75);
  if (label == 1)
    for (int i = 0; i < n_frames; ++i) e.jitter.push_back(rng.uniform(-0.04, 0.04));
  return e;
}

inline Image render_frame(const SynthConfig& cfg, const SubjectGeometry& geom,
                          double amp, int label, Rng& noise_rng) {
  const int r = cfg.resolution, c = cfg.channels;
  Image img{r, r, c, std::vector<uint8_t>(size_t(r) * r * c)};
  const double cx = (SynthLayout::kFaceCx + geom.dx) * r;
  const double cy = (SynthLayout::kFaceCy + geom.dy) * r;
  const double fr = SynthLayout::kFaceR * geom.face_scale * r;
  const double eye_y = cy - (SynthLayout::kFaceCy - SynthLayout::kEyeCy) * r;
  const double eye_dx = SynthLayout::kEyeDx * geom.eye_spacing * r;
  const double eye_r = SynthLayout::kEyeR * r;
  const double mouth_y = cy + (SynthLayout::kMouthCy - SynthLayout::kFaceCy) * r;
  const double mouth_w = (SynthLayout::kMouthWMin + SynthLayout::kMouthWGain * amp) * r;
  const double mouth_h = SynthLayout::kMouthH * r;
  // Eyes darken with the smile only for spontaneous videos.
  const double eye_v = label == 1 ? 0.60 - 0.40 * amp : 0.45;

  const double face_rgb[3] = {0.80 * geom.tone, 0.66 * geom.tone, 0.55 * geom.tone};
  const double bg_rgb[3] = {0.28, 0.30, 0.34};
  const double mouth_rgb[3] = {0.38, 0.12, 0.12};
  for (int y = 0; y < r; ++y)
    for (int x = 0; x < r; ++x) {
      double px[3];
      const double fd = std::hypot(x - cx, y - cy);
      for (int ch = 0; ch < 3; ++ch) px[ch] = fd <= fr ? face_rgb[ch] : bg_rgb[ch];
      if (std::hypot(x - (cx - eye_dx), y - eye_y) <= eye_r ||
          std::hypot(x - (cx + eye_dx), y - eye_y) <= eye_r)
        px[0] = px[1] = px[2] = eye_v;
      const double mx = (x - cx) / mouth_w, my = (y - mouth_y) / mouth_h;
      if (mx * mx + my * my <= 1.0)
        for (int ch = 0; ch < 3; ++ch) px[ch] = mouth_rgb[ch];
      for (int ch = 0; ch < c; ++ch) {
        double v = c == 3 ? px[ch] : (px[0] + px[1] + px[2]) / 3.0;
        v += cfg.noise_level * noise_rng.normal();
        img.pix[size_t((y * r + x) * c + ch)] =
            uint8_t(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  return img;
}

}  // namespace detail

// Writes frame directories plus manifest.json under out_dir and returns the
// loaded manifest. Byte-level deterministic in (config, seed).
inline Manifest synth_generate(const SynthConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir))
    throw IoError("cannot create output directory: " + out_dir);

  Manifest manifest;
  for (int s = 0; s < cfg.n_subjects; ++s) {
    const auto geom = detail::subject_geometry(cfg.seed, s);
    for (int v = 0; v < cfg.videos_per_subject; ++v) {
      const int label = v % 2;
      Rng rng(Rng::mix(cfg.seed, uint64_t(s) * 100003 + uint64_t(v)));
      const double duration = rng.uniform(cfg.duration_min, cfg.duration_max);
      const int n_frames = std::max(2, int(std::lround(duration * cfg.source_fps)));
      const auto env = detail::make_envelope(label, n_frames, rng);

      char name[64];
      std::snprintf(name, sizeof(name), "s%02d_v%02d", s, v);
      const fs::path dir = fs::path(out_dir) / name;
      fs::create_directories(dir, ec);
      if (ec) throw IoError("cannot create frame directory: " + dir.string());
      for (int f = 0; f < n_frames; ++f) {
        const double t = n_frames > 1 ? double(f) / double(n_frames - 1) : 0.0;
        Image img = detail::render_frame(cfg, geom, env.at(t, f), label, rng);
        char fname[32];
        std::snprintf(fname, sizeof(fname), "%06d.png", f);
        save_png(img, (dir / fname).string());
      }
      VideoSample sample;
      sample.id = name;
      sample.subject_id = "subj" + std::to_string(s);
      sample.label = label;
      sample.frame_dir = name;  // relative to the manifest
      sample.source_fps = cfg.source_fps;
      sample.frame_count = n_frames;
      manifest.samples.push_back(std::move(sample));
    }
  }
  const std::string mpath = (fs::path(out_dir) / "manifest.json").string();
  save_manifest(manifest, mpath);
  return load_manifest(mpath);
}

}  // namespace rsmn
