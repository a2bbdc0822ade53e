#pragma once

// Retrieval evaluation (Oxford-style average precision) and synthetic
// planted-object corpora for end-to-end checks without a CNN.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qamret/error.hpp"
#include "qamret/kmeans.hpp"
#include "qamret/manifest.hpp"
#include "qamret/pipeline.hpp"
#include "qamret/tensor.hpp"

namespace qamret {

/// Trapezoidal average precision over a ranked id list.
///
/// Junk ids are skipped entirely. Relevant ids missing from the list add no
/// area, so they pull AP down through the recall normalization only.
inline double average_precision(std::span<const std::string> ranked, const QueryJudgment& j) {
  if (j.relevant.empty()) throw ValidationError("average precision is undefined without relevant items");
  const double total = static_cast<double>(j.relevant.size());
  double ap = 0.0;
  double old_recall = 0.0;
  double old_precision = 1.0;
  std::size_t hits = 0;
  std::size_t seen = 0;
  for (const auto& id : ranked) {
    if (j.junk.count(id)) continue;
    if (j.relevant.count(id)) ++hits;
    ++seen;
    const double recall = static_cast<double>(hits) / total;
    const double precision = static_cast<double>(hits) / static_cast<double>(seen);
    ap += (recall - old_recall) * (old_precision + precision) / 2.0;
    old_recall = recall;
    old_precision = precision;
  }
  return ap;
}

inline double average_precision(const RankedList& ranked, const QueryJudgment& j) {
  const auto ids = ranked.ids();
  return average_precision(std::span<const std::string>(ids), j);
}

inline double mean_ap(std::span<const double> aps) {
  if (aps.empty()) throw ValidationError("mean AP of zero queries");
  return std::accumulate(aps.begin(), aps.end(), 0.0) / static_cast<double>(aps.size());
}

// ---------------------------------------------------------------------------
// Synthetic corpora

/// A planted-object corpus description.
///
/// The object signature is an object_height x object_width patch over a fixed
/// subset of `object_channels` channels (each active with probability
/// `object_fill`). Clutter cells appear with probability `clutter_density`;
/// each activates every channel with probability `clutter_sparsity`, with
/// magnitudes uniform in [0, clutter_scale). Relevant images carry the
/// signature at a random position with per-value multiplicative jitter
/// `noise_scale`; distractors carry clutter only.
struct SyntheticSpec {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 32;
  std::size_t object_height = 4;
  std::size_t object_width = 4;
  std::size_t object_channels = 16;
  double object_fill = 0.5;
  double clutter_density = 0.3;
  double clutter_sparsity = 0.3;
  double clutter_scale = 1.5;
  double noise_scale = 0.1;
  std::size_t relevant = 20;
  std::size_t distractors = 200;
  std::uint64_t seed = 0;

  void validate() const {
    if (height == 0 || width == 0 || channels == 0) throw ValidationError("synthetic grid must be non-empty");
    if (object_height == 0 || object_width == 0) throw ValidationError("object patch must be non-empty");
    if (object_height > height || object_width > width) throw ValidationError("object larger than grid");
    if (object_channels == 0 || object_channels > channels) {
      throw ValidationError("object channel count must lie in [1, channels]");
    }
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(object_fill) || !unit(clutter_density) || !unit(clutter_sparsity)) {
      throw ValidationError("probabilities must lie in [0, 1]");
    }
    if (clutter_scale < 0.0 || noise_scale < 0.0) throw ValidationError("scales must be nonnegative");
  }
};

struct SyntheticCorpus {
  std::vector<std::string> ids;
  std::vector<CfmTensor> images;
  CfmTensor query;
  QueryJudgment judgment;
  /// Top-left cell of the planted object, per image (relevant images only).
  std::vector<std::optional<GridBox>> placements;
};

inline SyntheticCorpus synthesize(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  auto u01 = [&] { return uniform01(rng); };
  auto below = [&](std::size_t n) { return std::min(n - 1, static_cast<std::size_t>(u01() * static_cast<double>(n))); };
  const std::size_t dim = spec.channels;

  // Object channels: first `object_channels` of a seeded permutation.
  std::vector<std::size_t> perm(dim);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = dim - 1; i > 0; --i) std::swap(perm[i], perm[below(i + 1)]);
  std::vector<std::size_t> obj_ch(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(spec.object_channels));
  std::sort(obj_ch.begin(), obj_ch.end());

  const std::size_t oh = spec.object_height;
  const std::size_t ow = spec.object_width;
  std::vector<float> signature(oh * ow * dim, 0.0f);
  for (std::size_t cell = 0; cell < oh * ow; ++cell) {
    bool any = false;
    for (std::size_t c : obj_ch) {
      if (u01() < spec.object_fill) {
        signature[cell * dim + c] = static_cast<float>(0.5 + u01());
        any = true;
      }
    }
    if (!any) signature[cell * dim + obj_ch[below(obj_ch.size())]] = static_cast<float>(0.5 + u01());
  }

  auto clutter_cell = [&](std::span<float> x) {
    if (u01() >= spec.clutter_density) return;
    for (std::size_t d = 0; d < dim; ++d) {
      if (u01() < spec.clutter_sparsity) x[d] = static_cast<float>(spec.clutter_scale * u01());
    }
  };

  const std::size_t total = spec.relevant + spec.distractors;
  // Seeded shuffle decides which image slots hold the object.
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = total; i > 1; --i) std::swap(order[i - 1], order[below(i)]);
  std::vector<char> is_relevant(total, 0);
  for (std::size_t i = 0; i < spec.relevant; ++i) is_relevant[order[i]] = 1;

  SyntheticCorpus corpus{{}, {}, CfmTensor(oh, ow, dim, signature), {}, {}};
  const int width = total < 10 ? 1 : static_cast<int>(std::to_string(total - 1).size());
  for (std::size_t i = 0; i < total; ++i) {
    std::string num = std::to_string(i);
    num.insert(0, static_cast<std::size_t>(std::max(0, width - static_cast<int>(num.size()))), '0');
    const std::string id = "img_" + num;

    std::vector<float> values(spec.height * spec.width * dim, 0.0f);
    std::optional<GridBox> placed;
    if (is_relevant[i]) {
      placed = GridBox{below(spec.height - oh + 1), below(spec.width - ow + 1), oh, ow};
    }
    for (std::size_t h = 0; h < spec.height; ++h) {
      for (std::size_t w = 0; w < spec.width; ++w) {
        std::span<float> x(values.data() + (h * spec.width + w) * dim, dim);
        const bool in_object = placed && h >= placed->top && h < placed->top + oh && w >= placed->left &&
                               w < placed->left + ow;
        if (in_object) {
          const std::size_t cell = (h - placed->top) * ow + (w - placed->left);
          for (std::size_t d = 0; d < dim; ++d) {
            const float s = signature[cell * dim + d];
            if (s == 0.0f) continue;
            const double jitter = 1.0 + spec.noise_scale * (2.0 * u01() - 1.0);
            x[d] = static_cast<float>(std::max(0.0, s * jitter));
          }
        } else {
          clutter_cell(x);
        }
      }
    }
    corpus.ids.push_back(id);
    corpus.images.emplace_back(spec.height, spec.width, dim, std::move(values));
    corpus.placements.push_back(placed);
    if (is_relevant[i]) corpus.judgment.relevant.insert(id);
  }
  return corpus;
}

/// Writes a synthetic corpus (one CFM1 file per image, `query.cfm`,
/// `manifest.json`) into `out_dir` and returns the manifest.
inline CorpusManifest generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
  const auto corpus = synthesize(spec);
  std::filesystem::create_directories(out_dir);
  CorpusManifest m;
  m.base_dir = out_dir;
  for (std::size_t i = 0; i < corpus.ids.size(); ++i) {
    const std::string file = corpus.ids[i] + ".cfm";
    write_tensor(corpus.images[i], out_dir / file);
    m.entries.push_back({corpus.ids[i], file, std::nullopt});
  }
  write_tensor(corpus.query, out_dir / "query.cfm");
  m.queries.push_back({"query", "query.cfm", std::nullopt});
  m.relevance.emplace("query", corpus.judgment);
  write_manifest(m, out_dir / "manifest.json");
  return m;
}

}  // namespace qamret
