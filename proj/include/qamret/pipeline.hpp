#pragma once

// Three-stage retrieval: exact inner-product search over global descriptors,
// QAM reranking of a shortlist, and average query expansion.
//
// IDX1 layout (little-endian), each section introduced by a 4-byte tag:
//   "IDX1"
//   "CFG " u8 aggregation | u32 rmac scales | u8 reranker | u32 fmp clusters |
//          u32 fmp max-iterations | u64 fmp seed | u32 ospp scales | f64 ospp overlap
//   "IDS " u32 N | N x (str id, str tensor path)          str = u32 length + UTF-8
//   "GLB " u32 N | u32 D' | N*D' f32
//   "WHT " u8 present | [u32 D | u32 D' | D f32 mean | D'*D f32 projection | D' f32 eigenvalues]
//   "REG " u8 provenance (0 none) | u32 N | N x (u32 K | u32 dim | K*dim f32)
//
// A region set with K = 0 marks an image without any activation.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qamret/aggregate.hpp"
#include "qamret/base_regions.hpp"
#include "qamret/binary_io.hpp"
#include "qamret/error.hpp"
#include "qamret/manifest.hpp"
#include "qamret/matrix.hpp"
#include "qamret/parallel.hpp"
#include "qamret/qam.hpp"
#include "qamret/region_grid.hpp"
#include "qamret/tensor.hpp"

namespace qamret {

enum class Reranker : std::uint8_t { None = 0, FMP = 1, OSPP = 2 };

inline const char* to_string(Reranker r) {
  switch (r) {
    case Reranker::None: return "none";
    case Reranker::FMP: return "fmp";
    case Reranker::OSPP: return "ospp";
  }
  return "?";
}

inline const char* to_string(AggregationMethod m) { return m == AggregationMethod::SPoC ? "spoc" : "rmac"; }

struct IndexConfig {
  AggregationMethod aggregation = AggregationMethod::RMAC;
  std::size_t rmac_scales = 3;
  Reranker reranker = Reranker::FMP;
  FmpConfig fmp;
  OsppConfig ospp;

  void validate() const {
    if (rmac_scales < 1) throw ConfigError("R-MAC scales must be >= 1");
    fmp.validate();
    ospp.validate();
  }

  bool operator==(const IndexConfig& o) const {
    return aggregation == o.aggregation && rmac_scales == o.rmac_scales && reranker == o.reranker &&
           fmp.clusters == o.fmp.clusters && fmp.max_iterations == o.fmp.max_iterations && fmp.seed == o.fmp.seed &&
           ospp.scales == o.ospp.scales && ospp.overlap == o.ospp.overlap;
  }
};

struct DescriptorIndex {
  std::vector<std::string> ids;
  /// Tensor file each entry was built from, as resolved at build time.
  std::vector<std::string> paths;
  Matrix globals;
  /// Empty when the index has no reranker; nullopt marks an image whose
  /// tensor had no activation.
  std::vector<std::optional<BaseRegionSet>> region_sets;
  std::optional<WhiteningModel> whitening;
  IndexConfig config;

  std::size_t size() const { return ids.size(); }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = std::find(ids.begin(), ids.end(), id);
    if (it == ids.end()) return std::nullopt;
    return static_cast<std::size_t>(it - ids.begin());
  }

  AggregationConfig aggregation_config() const {
    return AggregationConfig{config.aggregation, config.rmac_scales, whitening};
  }

  bool operator==(const DescriptorIndex&) const = default;
};

enum class Stage : std::uint8_t { Initial, Reranked, Expanded };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::Initial: return "initial";
    case Stage::Reranked: return "reranked";
    case Stage::Expanded: return "expanded";
  }
  return "?";
}

struct RankedEntry {
  std::string id;
  double score = 0.0;

  bool operator==(const RankedEntry&) const = default;
};

/// Ordered (id, score) pairs. Initial and expanded lists have non-increasing
/// scores; a reranked list is non-increasing within the shortlist and within
/// the tail separately, since the two parts carry different score kinds.
struct RankedList {
  std::vector<RankedEntry> entries;
  Stage stage = Stage::Initial;

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.id);
    return out;
  }

  bool operator==(const RankedList&) const = default;
};

struct PipelineConfig {
  std::size_t shortlist = 100;
  std::size_t qe_depth = 5;
  Reranker reranker = Reranker::FMP;
  SolverConfig solver;
  std::size_t threads = 1;

  void validate() const {
    if (shortlist < 1) throw ConfigError("shortlist size must be >= 1");
    if (qe_depth < 1) throw ConfigError("query expansion depth must be >= 1");
    solver.validate();
  }
};

// ---------------------------------------------------------------------------
// Building

/// Builds an index over `ids`, fetching tensor i through `load(i)`. The
/// whitening model must come from hold-out data; it is required for R-MAC
/// aggregation and OSPP regions.
template <typename Loader>
DescriptorIndex build_index_with(std::vector<std::string> ids, std::vector<std::string> paths, Loader&& load,
                                 const IndexConfig& cfg, std::optional<WhiteningModel> whitening,
                                 std::size_t threads = 1) {
  cfg.validate();
  if (ids.empty()) throw ValidationError("nothing to index");
  const bool needs_whitening = cfg.aggregation == AggregationMethod::RMAC || cfg.reranker == Reranker::OSPP;
  if (needs_whitening && !whitening) {
    throw ConfigError(std::string("a whitening model is required for ") +
                      (cfg.aggregation == AggregationMethod::RMAC ? "R-MAC aggregation" : "OSPP regions"));
  }
  {
    std::map<std::string, int> seen;
    for (const auto& id : ids) {
      if (seen[id]++) throw ValidationError("duplicate image id '" + id + "'");
    }
  }

  DescriptorIndex idx;
  idx.config = cfg;
  idx.whitening = std::move(whitening);
  idx.ids = std::move(ids);
  idx.paths = std::move(paths);
  idx.paths.resize(idx.ids.size());
  const std::size_t n = idx.ids.size();

  const AggregationConfig agg = idx.aggregation_config();
  std::vector<GlobalDescriptor> globals(n);
  std::vector<std::optional<BaseRegionSet>> regions(cfg.reranker == Reranker::None ? 0 : n);
  parallel_for(n, threads, [&](std::size_t i) {
    std::optional<CfmTensor> t;
    try {
      t.emplace(load(i));
    } catch (const Error& ex) {
      throw IoError("image '" + idx.ids[i] + "': " + ex.what());
    }
    globals[i] = aggregate(*t, agg);
    if (cfg.reranker == Reranker::FMP) {
      regions[i] = fmp(*t, cfg.fmp);
    } else if (cfg.reranker == Reranker::OSPP) {
      regions[i] = ospp(*t, cfg.ospp, *idx.whitening);
    }
  });

  const std::size_t dim = globals.front().dim();
  idx.globals = Matrix(0, dim);
  for (std::size_t i = 0; i < n; ++i) {
    if (globals[i].dim() != dim) throw ValidationError("image '" + idx.ids[i] + "': descriptor dim differs");
    idx.globals.append_row(globals[i].values);
  }
  idx.region_sets = std::move(regions);
  return idx;
}

inline DescriptorIndex build_index(const CorpusManifest& manifest, const IndexConfig& cfg,
                                   std::optional<WhiteningModel> whitening, std::size_t threads = 1) {
  if (manifest.entries.empty()) throw ValidationError("manifest has no entries to index");
  std::vector<std::string> ids;
  std::vector<std::string> paths;
  for (const auto& e : manifest.entries) {
    ids.push_back(e.id);
    paths.push_back(manifest.resolve(e.path).string());
  }
  auto load = [&paths](std::size_t i) { return read_tensor(paths[i]); };
  return build_index_with(std::move(ids), paths, load, cfg, std::move(whitening), threads);
}

/// In-memory variant; stored tensor paths are empty.
inline DescriptorIndex build_index(std::vector<std::string> ids, std::span<const CfmTensor> tensors,
                                   const IndexConfig& cfg, std::optional<WhiteningModel> whitening,
                                   std::size_t threads = 1) {
  if (ids.size() != tensors.size()) throw ValidationError("id count does not match tensor count");
  auto load = [tensors](std::size_t i) { return tensors[i]; };
  return build_index_with(std::move(ids), {}, load, cfg, std::move(whitening), threads);
}

/// The query's global descriptor under the index's aggregation settings.
inline GlobalDescriptor query_descriptor(const DescriptorIndex& idx, const CfmTensor& t) {
  return aggregate(t, idx.aggregation_config());
}

/// The query feature a reranker compares against region sets: raw SPoC for
/// FMP, R-MAC on the OSPP grid for OSPP.
inline GlobalDescriptor reranker_query(const DescriptorIndex& idx, const CfmTensor& t, Reranker reranker) {
  switch (reranker) {
    case Reranker::FMP: return spoc(t);
    case Reranker::OSPP: {
      if (!idx.whitening) throw ConfigError("OSPP reranking needs the index whitening model");
      const auto regions = sample_grid(t.height(), t.width(), idx.config.ospp);
      return rmac_over(t, regions, *idx.whitening);
    }
    case Reranker::None: break;
  }
  throw ConfigError("no reranker configured");
}

// ---------------------------------------------------------------------------
// Searching

namespace detail {

inline void sort_by_score(std::vector<RankedEntry>& entries) {
  std::sort(entries.begin(), entries.end(), [](const RankedEntry& a, const RankedEntry& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
}

}  // namespace detail

/// Exact inner-product ranking of the whole index; ties by ascending id.
inline RankedList initial_search(const DescriptorIndex& idx, std::span<const float> q) {
  if (q.size() != idx.globals.cols()) {
    throw ValidationError("query dim " + std::to_string(q.size()) + " != index dim " +
                          std::to_string(idx.globals.cols()));
  }
  RankedList out;
  out.stage = Stage::Initial;
  out.entries.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out.entries.push_back({idx.ids[i], dot(q, idx.globals.row(i))});
  detail::sort_by_score(out.entries);
  return out;
}

inline RankedList initial_search(const DescriptorIndex& idx, const GlobalDescriptor& q) {
  return initial_search(idx, q.view());
}

/// Rescores the top `cfg.shortlist` entries with QAM against `query_feature`
/// and re-sorts them (QAM score, then initial score, then id). Entries past
/// the shortlist keep their initial order and scores. Candidates without
/// regions keep their initial score.
inline RankedList rerank_with_feature(const DescriptorIndex& idx, const GlobalDescriptor& query_feature,
                                      const RankedList& initial, const PipelineConfig& cfg) {
  cfg.validate();
  if (cfg.reranker == Reranker::None) throw ConfigError("reranking requested without a reranker");
  if (idx.config.reranker != cfg.reranker || idx.region_sets.size() != idx.size()) {
    throw ConfigError(std::string("index holds ") + to_string(idx.config.reranker) + " regions, reranker '" +
                      to_string(cfg.reranker) + "' requested");
  }
  if (initial.entries.empty()) throw ValidationError("cannot rerank an empty list");

  const std::size_t n = std::min(cfg.shortlist, initial.entries.size());
  struct Scored {
    RankedEntry entry;
    double initial_score;
  };
  std::vector<Scored> shortlist(n);
  parallel_for(n, cfg.threads, [&](std::size_t i) {
    const auto& cand = initial.entries[i];
    const auto row = idx.find(cand.id);
    if (!row) throw ValidationError("ranked id '" + cand.id + "' is not in the index");
    const auto& regions = idx.region_sets[*row];
    double score = cand.score;
    if (regions) {
      if (regions->dim() != query_feature.dim()) {
        throw ValidationError("query feature dim " + std::to_string(query_feature.dim()) + " != region dim " +
                              std::to_string(regions->dim()));
      }
      score = query_feature.degenerate ? 0.0 : qam_similarity(query_feature.view(), regions->descriptors, cfg.solver);
    }
    shortlist[i] = Scored{{cand.id, score}, cand.score};
  });
  std::sort(shortlist.begin(), shortlist.end(), [](const Scored& a, const Scored& b) {
    if (a.entry.score != b.entry.score) return a.entry.score > b.entry.score;
    if (a.initial_score != b.initial_score) return a.initial_score > b.initial_score;
    return a.entry.id < b.entry.id;
  });

  RankedList out;
  out.stage = Stage::Reranked;
  out.entries.reserve(initial.entries.size());
  for (auto& s : shortlist) out.entries.push_back(std::move(s.entry));
  out.entries.insert(out.entries.end(), initial.entries.begin() + static_cast<std::ptrdiff_t>(n), initial.entries.end());
  return out;
}

inline RankedList rerank(const DescriptorIndex& idx, const CfmTensor& query, const RankedList& initial,
                         const PipelineConfig& cfg) {
  if (cfg.reranker == Reranker::None) throw ConfigError("reranking requested without a reranker");
  return rerank_with_feature(idx, reranker_query(idx, query, cfg.reranker), initial, cfg);
}

/// Averages q with the globals of the top `qe_depth` ranked images,
/// l2-normalizes, and searches the whole index again.
inline RankedList query_expansion(const DescriptorIndex& idx, std::span<const float> q, const RankedList& ranked,
                                  const PipelineConfig& cfg) {
  cfg.validate();
  if (ranked.entries.empty()) throw ValidationError("query expansion needs a non-empty ranked list");
  if (q.size() != idx.globals.cols()) throw ValidationError("query dim does not match index");
  std::vector<double> mean(q.begin(), q.end());
  const std::size_t depth = std::min(cfg.qe_depth, ranked.entries.size());
  for (std::size_t r = 0; r < depth; ++r) {
    const auto row = idx.find(ranked.entries[r].id);
    if (!row) throw ValidationError("ranked id '" + ranked.entries[r].id + "' is not in the index");
    auto g = idx.globals.row(*row);
    for (std::size_t d = 0; d < mean.size(); ++d) mean[d] += g[d];
  }
  for (double& v : mean) v /= static_cast<double>(depth + 1);
  const auto expanded = GlobalDescriptor::normalized(mean);
  auto out = initial_search(idx, expanded.view());
  out.stage = Stage::Expanded;
  return out;
}

struct SearchResult {
  RankedList initial;
  std::optional<RankedList> reranked;
  std::optional<RankedList> expanded;

  /// The list produced by the last enabled stage.
  const RankedList& final_list() const {
    if (expanded) return *expanded;
    if (reranked) return *reranked;
    return initial;
  }
};

/// Full pipeline for one query tensor. Reranking runs when cfg.reranker is not
/// None; expansion runs when `expand` is set (on the reranked list if any).
inline SearchResult search(const DescriptorIndex& idx, const CfmTensor& query, const PipelineConfig& cfg, bool expand) {
  cfg.validate();
  SearchResult res;
  const auto q = query_descriptor(idx, query);
  res.initial = initial_search(idx, q);
  if (cfg.reranker != Reranker::None) res.reranked = rerank(idx, query, res.initial, cfg);
  if (expand) res.expanded = query_expansion(idx, q.view(), res.reranked ? *res.reranked : res.initial, cfg);
  return res;
}

// ---------------------------------------------------------------------------
// Persistence

namespace detail {

inline void put_whitening(io::ByteWriter& w, const WhiteningModel& m) {
  w.u32(static_cast<std::uint32_t>(m.in_dim()));
  w.u32(static_cast<std::uint32_t>(m.out_dim()));
  w.f32s(m.mean);
  w.f32s(m.projection.data());
  w.f32s(m.eigenvalues);
}

inline WhiteningModel get_whitening(io::ByteReader& r) {
  WhiteningModel m;
  const std::uint32_t d = r.u32();
  const std::uint32_t dp = r.u32();
  if (d == 0 || dp == 0 || dp > d) r.fail("invalid whitening dims " + std::to_string(d) + " -> " + std::to_string(dp));
  m.mean.resize(d);
  r.f32s(m.mean);
  std::vector<float> proj(std::size_t{dp} * d);
  r.f32s(proj);
  m.projection = Matrix(dp, d, std::move(proj));
  m.eigenvalues.resize(dp);
  r.f32s(m.eigenvalues);
  return m;
}

inline void section(io::ByteReader& r, const char* tag, const char* name) {
  r.section(name);
  r.expect_magic(tag);
}

}  // namespace detail

inline std::string encode_index(const DescriptorIndex& idx) {
  io::ByteWriter w;
  w.magic("IDX1");

  w.magic("CFG ");
  w.u8(idx.config.aggregation == AggregationMethod::SPoC ? 0 : 1);
  w.u32(static_cast<std::uint32_t>(idx.config.rmac_scales));
  w.u8(static_cast<std::uint8_t>(idx.config.reranker));
  w.u32(static_cast<std::uint32_t>(idx.config.fmp.clusters));
  w.u32(static_cast<std::uint32_t>(idx.config.fmp.max_iterations));
  w.u64(idx.config.fmp.seed);
  w.u32(static_cast<std::uint32_t>(idx.config.ospp.scales));
  w.f64(idx.config.ospp.overlap);

  w.magic("IDS ");
  w.u32(static_cast<std::uint32_t>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    w.str(idx.ids[i]);
    w.str(idx.paths[i]);
  }

  w.magic("GLB ");
  w.u32(static_cast<std::uint32_t>(idx.globals.rows()));
  w.u32(static_cast<std::uint32_t>(idx.globals.cols()));
  w.f32s(idx.globals.data());

  w.magic("WHT ");
  w.u8(idx.whitening ? 1 : 0);
  if (idx.whitening) detail::put_whitening(w, *idx.whitening);

  w.magic("REG ");
  const bool has_regions = idx.config.reranker != Reranker::None;
  w.u8(static_cast<std::uint8_t>(idx.config.reranker));
  w.u32(static_cast<std::uint32_t>(has_regions ? idx.region_sets.size() : 0));
  if (has_regions) {
    for (const auto& rs : idx.region_sets) {
      w.u32(static_cast<std::uint32_t>(rs ? rs->size() : 0));
      w.u32(static_cast<std::uint32_t>(rs ? rs->dim() : 0));
      if (rs) w.f32s(rs->descriptors.data());
    }
  }
  return w.bytes();
}

inline DescriptorIndex decode_index(std::vector<char> bytes, const std::string& source = {}) {
  io::ByteReader r(std::move(bytes), source);
  r.section("header");
  r.expect_magic("IDX1");
  DescriptorIndex idx;

  detail::section(r, "CFG ", "config");
  const std::uint8_t agg = r.u8();
  if (agg > 1) r.fail("unknown aggregation code " + std::to_string(agg));
  idx.config.aggregation = agg == 0 ? AggregationMethod::SPoC : AggregationMethod::RMAC;
  idx.config.rmac_scales = r.u32();
  const std::uint8_t rr = r.u8();
  if (rr > 2) r.fail("unknown reranker code " + std::to_string(rr));
  idx.config.reranker = static_cast<Reranker>(rr);
  idx.config.fmp.clusters = r.u32();
  idx.config.fmp.max_iterations = r.u32();
  idx.config.fmp.seed = r.u64();
  idx.config.ospp.scales = r.u32();
  idx.config.ospp.overlap = r.f64();

  detail::section(r, "IDS ", "ids");
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    idx.ids.push_back(r.str());
    idx.paths.push_back(r.str());
  }

  detail::section(r, "GLB ", "globals");
  const std::uint32_t gn = r.u32();
  const std::uint32_t gd = r.u32();
  if (gn != n) r.fail("holds " + std::to_string(gn) + " rows for " + std::to_string(n) + " ids");
  std::vector<float> g(std::size_t{gn} * gd);
  r.f32s(g);
  idx.globals = Matrix(gn, gd, std::move(g));

  detail::section(r, "WHT ", "whitening");
  const std::uint8_t has_w = r.u8();
  if (has_w > 1) r.fail("bad presence flag");
  if (has_w) idx.whitening = detail::get_whitening(r);

  detail::section(r, "REG ", "regions");
  const std::uint8_t prov = r.u8();
  if (prov != rr) r.fail("provenance does not match config reranker");
  const std::uint32_t rn = r.u32();
  if (prov != 0 && rn != n) r.fail("holds " + std::to_string(rn) + " region sets for " + std::to_string(n) + " ids");
  if (prov == 0 && rn != 0) r.fail("region sets present without a reranker");
  for (std::uint32_t i = 0; i < rn; ++i) {
    const std::uint32_t k = r.u32();
    const std::uint32_t dim = r.u32();
    if (k == 0) {
      idx.region_sets.emplace_back(std::nullopt);
      continue;
    }
    std::vector<float> rows(std::size_t{k} * dim);
    r.f32s(rows);
    BaseRegionSet set;
    set.provenance = static_cast<RegionProvenance>(prov);
    set.descriptors = Matrix(k, dim, std::move(rows));
    idx.region_sets.emplace_back(std::move(set));
  }
  r.section("trailer");
  if (!r.at_end()) r.fail("unexpected trailing bytes");
  return idx;
}

inline void save_index(const DescriptorIndex& idx, const std::filesystem::path& path) {
  io::write_file(path, encode_index(idx));
}

inline DescriptorIndex load_index(const std::filesystem::path& path) {
  return decode_index(io::read_file(path), path.string());
}

/// Standalone whitening model file: "WHT1" followed by the whitening section body.
inline void save_whitening(const WhiteningModel& m, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.magic("WHT1");
  detail::put_whitening(w, m);
  io::write_file(path, w.bytes());
}

inline WhiteningModel load_whitening(const std::filesystem::path& path) {
  io::ByteReader r(io::read_file(path), path.string());
  r.section("header");
  r.expect_magic("WHT1");
  r.section("whitening");
  auto m = detail::get_whitening(r);
  if (!r.at_end()) r.fail("unexpected trailing bytes");
  return m;
}

/// Descriptor sample file: "DSC1" | u32 N | u32 D | N*D f32.
inline void save_descriptors(const Matrix& samples, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.magic("DSC1");
  w.u32(static_cast<std::uint32_t>(samples.rows()));
  w.u32(static_cast<std::uint32_t>(samples.cols()));
  w.f32s(samples.data());
  io::write_file(path, w.bytes());
}

inline Matrix decode_descriptors(std::vector<char> bytes, const std::string& source = {}) {
  io::ByteReader r(std::move(bytes), source);
  r.section("header");
  r.expect_magic("DSC1");
  const std::uint32_t n = r.u32();
  const std::uint32_t d = r.u32();
  r.section("payload");
  std::vector<float> v(std::size_t{n} * d);
  r.f32s(v);
  if (!r.at_end()) r.fail("unexpected trailing bytes");
  for (float x : v) {
    if (!std::isfinite(x)) throw ValidationError(source + ": non-finite descriptor value");
  }
  return Matrix(n, d, std::move(v));
}

inline Matrix load_descriptors(const std::filesystem::path& path) {
  return decode_descriptors(io::read_file(path), path.string());
}

}  // namespace qamret
