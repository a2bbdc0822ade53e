#include <gtest/gtest.h>

#include <set>

#include "oracles.hpp"
#include "support.hpp"

namespace qamret {
namespace {

using testing::Rng;

std::vector<std::string> make_ids(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("im" + std::to_string(100 + i));
  return ids;
}

std::vector<CfmTensor> make_tensors(Rng& rng, std::size_t n, std::size_t h = 6, std::size_t w = 6, std::size_t d = 8) {
  std::vector<CfmTensor> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(testing::random_tensor(rng, h, w, d, 0.6));
  return out;
}

WhiteningModel holdout_whitening(Rng& rng, std::size_t d, std::size_t out_dim) {
  Matrix samples;
  for (int i = 0; i < 60; ++i) {
    const auto t = testing::random_tensor(rng, 6, 6, d, 0.6);
    const auto s = whitening_samples(t, AggregationMethod::RMAC);
    for (std::size_t r = 0; r < s.rows(); ++r) samples.append_row(s.row(r));
  }
  return fit_whitening(samples, out_dim);
}

/// Index over hand-chosen unit globals, without regions.
DescriptorIndex globals_only(const std::vector<std::vector<float>>& rows) {
  DescriptorIndex idx;
  idx.config.reranker = Reranker::None;
  idx.ids = make_ids(rows.size());
  idx.paths.assign(rows.size(), "");
  for (const auto& r : rows) idx.globals.append_row(r);
  return idx;
}

TEST(BuildIndex, EmptyInputRejected) {
  EXPECT_THROW(build_index(CorpusManifest{}, IndexConfig{}, WhiteningModel::identity(2)), ValidationError);
  EXPECT_THROW(build_index({}, std::span<const CfmTensor>(), IndexConfig{}, WhiteningModel::identity(2)), ValidationError);
}

TEST(BuildIndex, ThreeImagesUnitGlobals) {
  Rng rng(101);
  const auto tensors = make_tensors(rng, 3);
  const auto wm = holdout_whitening(rng, 8, 8);
  const auto idx = build_index(make_ids(3), tensors, IndexConfig{}, wm);
  ASSERT_EQ(idx.size(), 3u);
  ASSERT_EQ(idx.globals.rows(), 3u);
  for (std::size_t r = 0; r < 3; ++r) EXPECT_NEAR(l2_norm(idx.globals.row(r)), 1.0, 1e-6);
  ASSERT_EQ(idx.region_sets.size(), 3u);
  for (const auto& rs : idx.region_sets) {
    ASSERT_TRUE(rs.has_value());
    EXPECT_LE(rs->size(), 25u);
  }
}

TEST(BuildIndex, RequiresWhiteningForRmacAndOspp) {
  Rng rng(102);
  const auto tensors = make_tensors(rng, 2);
  EXPECT_THROW(build_index(make_ids(2), tensors, IndexConfig{}, std::nullopt), ConfigError);
  IndexConfig spoc_ospp;
  spoc_ospp.aggregation = AggregationMethod::SPoC;
  spoc_ospp.reranker = Reranker::OSPP;
  EXPECT_THROW(build_index(make_ids(2), tensors, spoc_ospp, std::nullopt), ConfigError);
  IndexConfig spoc_fmp;
  spoc_fmp.aggregation = AggregationMethod::SPoC;
  EXPECT_NO_THROW(build_index(make_ids(2), tensors, spoc_fmp, std::nullopt));
}

TEST(BuildIndex, DuplicateIdsRejected) {
  Rng rng(103);
  const auto tensors = make_tensors(rng, 2);
  IndexConfig cfg;
  cfg.aggregation = AggregationMethod::SPoC;
  EXPECT_THROW(build_index({"a", "a"}, tensors, cfg, std::nullopt), ValidationError);
}

TEST(BuildIndex, UnreadableTensorNamesImage) {
  const auto dir = testing::scratch_dir("pipeline_unreadable");
  Rng rng(104);
  write_tensor(testing::random_tensor(rng, 3, 3, 2), dir / "ok.cfm");
  CorpusManifest m;
  m.base_dir = dir;
  m.entries = {{"good", "ok.cfm", std::nullopt}, {"broken", "gone.cfm", std::nullopt}};
  IndexConfig cfg;
  cfg.aggregation = AggregationMethod::SPoC;
  try {
    build_index(m, cfg, std::nullopt);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("'broken'"), std::string::npos) << e.what();
  }
}

TEST(BuildIndex, RebuildIsBitIdenticalAcrossThreadCounts) {
  Rng rng(105);
  const auto tensors = make_tensors(rng, 12);
  const auto wm = holdout_whitening(rng, 8, 6);
  for (Reranker r : {Reranker::FMP, Reranker::OSPP}) {
    IndexConfig cfg;
    cfg.reranker = r;
    cfg.fmp.clusters = 4;
    const auto a = encode_index(build_index(make_ids(12), tensors, cfg, wm, 1));
    const auto b = encode_index(build_index(make_ids(12), tensors, cfg, wm, 1));
    const auto c = encode_index(build_index(make_ids(12), tensors, cfg, wm, 4));
    EXPECT_EQ(a, b);
    EXPECT_EQ(a, c);
  }
}

TEST(BuildIndex, EmptyActivationImageHasNoRegions) {
  Rng rng(106);
  auto tensors = make_tensors(rng, 2);
  tensors.emplace_back(6, 6, 8, std::vector<float>(6 * 6 * 8, 0.0f));
  IndexConfig cfg;
  cfg.aggregation = AggregationMethod::SPoC;
  const auto idx = build_index(make_ids(3), tensors, cfg, std::nullopt);
  EXPECT_FALSE(idx.region_sets[2].has_value());
  EXPECT_EQ(l2_norm(idx.globals.row(2)), 0.0);
}

TEST(InitialSearch, StoredGlobalRanksFirst) {
  Rng rng(111);
  std::vector<std::vector<float>> rows;
  for (int i = 0; i < 6; ++i) rows.push_back(testing::random_unit(rng, 5));
  const auto idx = globals_only(rows);
  const auto l = initial_search(idx, std::span<const float>(rows[3]));
  EXPECT_EQ(l.entries.front().id, idx.ids[3]);
  EXPECT_NEAR(l.entries.front().score, 1.0, 1e-6);
  EXPECT_EQ(l.stage, Stage::Initial);
}

TEST(InitialSearch, OrthogonalQueryGivesIdOrder) {
  const auto idx = globals_only({{0, 1, 0}, {0, 0, 1}, {0, 0.6f, 0.8f}});
  const std::vector<float> q = {1, 0, 0};
  const auto l = initial_search(idx, std::span<const float>(q));
  ASSERT_EQ(l.entries.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(l.entries[i].id, idx.ids[i]);
    EXPECT_EQ(l.entries[i].score, 0.0);
  }
}

TEST(InitialSearch, PropertyMatchesBruteForce) {
  Rng rng(112);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = rng.index(1, 40);
    const std::size_t d = rng.index(1, 10);
    std::vector<std::vector<float>> rows;
    for (std::size_t i = 0; i < n; ++i) {
      // coarse values to provoke ties
      auto v = testing::random_unit(rng, d);
      if (rng.coin(0.3) && !rows.empty()) v = rows[rng.index(0, rows.size() - 1)];
      rows.push_back(v);
    }
    const auto idx = globals_only(rows);
    const auto q = testing::random_unit(rng, d);
    const auto l = initial_search(idx, std::span<const float>(q));
    std::vector<std::pair<double, std::string>> want;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += static_cast<double>(q[c]) * rows[i][c];
      want.emplace_back(-s, idx.ids[i]);
    }
    std::sort(want.begin(), want.end());
    ASSERT_EQ(l.entries.size(), n);
    for (std::size_t i = 0; i < n; ++i) {
      ASSERT_EQ(l.entries[i].id, want[i].second);
      ASSERT_EQ(l.entries[i].score, -want[i].first);
    }
  }
}

TEST(InitialSearch, DimensionMismatch) {
  const auto idx = globals_only({{1, 0}});
  const std::vector<float> q = {1, 0, 0};
  EXPECT_THROW(initial_search(idx, std::span<const float>(q)), ValidationError);
}

class RerankTest : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng(121);
    tensors_ = make_tensors(rng, 15);
    // image 7: channel 0 active everywhere, so one merged mask spans the map
    auto v = std::vector<float>(tensors_[7].values().begin(), tensors_[7].values().end());
    for (std::size_t i = 0; i < v.size(); i += 8) v[i] = 1.0f;
    tensors_[7] = CfmTensor(6, 6, 8, std::move(v));
    IndexConfig cfg;
    cfg.aggregation = AggregationMethod::SPoC;
    cfg.fmp.clusters = 5;
    index_ = build_index(make_ids(15), tensors_, cfg, std::nullopt);
  }

  std::vector<CfmTensor> tensors_;
  DescriptorIndex index_;
};

TEST_F(RerankTest, ShortlistOfOneKeepsTail) {
  const auto& q = tensors_[4];
  const auto initial = initial_search(index_, query_descriptor(index_, q));
  PipelineConfig cfg;
  cfg.shortlist = 1;
  const auto r = rerank(index_, q, initial, cfg);
  EXPECT_EQ(r.stage, Stage::Reranked);
  ASSERT_EQ(r.entries.size(), initial.entries.size());
  EXPECT_EQ(r.entries[0].id, initial.entries[0].id);
  for (std::size_t i = 1; i < r.entries.size(); ++i) EXPECT_EQ(r.entries[i], initial.entries[i]);
}

TEST_F(RerankTest, CandidateWithFullMaskRegionScoresOne) {
  const auto& q = tensors_[7];
  const auto initial = initial_search(index_, query_descriptor(index_, q));
  const auto r = rerank(index_, q, initial, PipelineConfig{});
  EXPECT_EQ(r.entries.front().id, index_.ids[7]);
  EXPECT_NEAR(r.entries.front().score, 1.0, 1e-6);
}

TEST_F(RerankTest, PropertyMembershipPreservedAndScoresOrdered) {
  Rng rng(122);
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = testing::random_tensor(rng, 4, 5, 8, 0.5);
    const auto initial = initial_search(index_, query_descriptor(index_, q));
    PipelineConfig cfg;
    cfg.shortlist = rng.index(1, 20);
    const auto r = rerank(index_, q, initial, cfg);
    const std::size_t n = std::min<std::size_t>(cfg.shortlist, initial.entries.size());
    std::set<std::string> before, after;
    for (std::size_t i = 0; i < n; ++i) {
      before.insert(initial.entries[i].id);
      after.insert(r.entries[i].id);
    }
    ASSERT_EQ(before, after);
    for (std::size_t i = 1; i < n; ++i) ASSERT_GE(r.entries[i - 1].score, r.entries[i].score);
    for (std::size_t i = n; i < r.entries.size(); ++i) ASSERT_EQ(r.entries[i], initial.entries[i]);
    // QAM scores never fall below the best single-region cosine for the candidate
    const auto qf = spoc(q);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = *index_.find(r.entries[i].id);
      const auto& regions = index_.region_sets[row]->descriptors;
      ASSERT_GE(r.entries[i].score, oracle::best_single_cosine({qf.values.begin(), qf.values.end()}, regions) - 1e-6);
    }
  }
}

TEST_F(RerankTest, EmptyRegionSetKeepsInitialScore) {
  auto idx = index_;
  idx.region_sets[2].reset();
  const auto& q = tensors_[2];
  const auto initial = initial_search(idx, query_descriptor(idx, q));
  const auto r = rerank(idx, q, initial, PipelineConfig{});
  const auto find = [](const RankedList& l, const std::string& id) {
    return std::find_if(l.entries.begin(), l.entries.end(), [&](const RankedEntry& e) { return e.id == id; })->score;
  };
  EXPECT_EQ(find(r, idx.ids[2]), find(initial, idx.ids[2]));
}

TEST_F(RerankTest, ConfigMismatchesRejected) {
  const auto& q = tensors_[0];
  const auto initial = initial_search(index_, query_descriptor(index_, q));
  PipelineConfig cfg;
  cfg.reranker = Reranker::OSPP;
  EXPECT_THROW(rerank(index_, q, initial, cfg), ConfigError);
  cfg.reranker = Reranker::None;
  EXPECT_THROW(rerank(index_, q, initial, cfg), ConfigError);
  cfg = PipelineConfig{};
  cfg.shortlist = 0;
  EXPECT_THROW(rerank(index_, q, initial, cfg), ConfigError);
  EXPECT_THROW(rerank(index_, q, RankedList{}, PipelineConfig{}), ValidationError);

  IndexConfig none;
  none.aggregation = AggregationMethod::SPoC;
  none.reranker = Reranker::None;
  const auto bare = build_index(make_ids(15), tensors_, none, std::nullopt);
  EXPECT_THROW(rerank(bare, q, initial_search(bare, query_descriptor(bare, q)), PipelineConfig{}), ConfigError);
}

TEST_F(RerankTest, ThreadCountDoesNotChangeResult) {
  const auto& q = tensors_[9];
  const auto initial = initial_search(index_, query_descriptor(index_, q));
  PipelineConfig one, four;
  four.threads = 4;
  EXPECT_EQ(rerank(index_, q, initial, one), rerank(index_, q, initial, four));
}

TEST(Rerank, OsppIndexUsesRmacQuery) {
  Rng rng(123);
  const auto tensors = make_tensors(rng, 6);
  const auto wm = holdout_whitening(rng, 8, 8);
  IndexConfig cfg;
  cfg.reranker = Reranker::OSPP;
  const auto idx = build_index(make_ids(6), tensors, cfg, wm);
  PipelineConfig pc;
  pc.reranker = Reranker::OSPP;
  const auto res = search(idx, tensors[1], pc, false);
  ASSERT_TRUE(res.reranked.has_value());
  EXPECT_EQ(res.reranked->entries.front().id, idx.ids[1]);
  EXPECT_NEAR(res.reranked->entries.front().score, 1.0, 1e-5);
  pc.reranker = Reranker::FMP;
  EXPECT_THROW(search(idx, tensors[1], pc, false), ConfigError);
}

TEST(Rerank, SyntheticCorpusImprovesMap) {
  SyntheticSpec spec;
  spec.relevant = 10;
  spec.distractors = 60;
  spec.seed = 3;
  const auto corpus = synthesize(spec);
  SyntheticSpec hold = spec;
  hold.seed = 1003;
  const auto held = synthesize(hold);
  Matrix samples;
  for (const auto& t : held.images) {
    const auto s = whitening_samples(t, AggregationMethod::SPoC);
    for (std::size_t r = 0; r < s.rows(); ++r) samples.append_row(s.row(r));
  }
  IndexConfig cfg;
  cfg.aggregation = AggregationMethod::SPoC;
  cfg.fmp.clusters = 8;
  const auto idx = build_index(corpus.ids, corpus.images, cfg, fit_whitening(samples, 32));
  const auto res = search(idx, corpus.query, PipelineConfig{}, true);
  const double init = average_precision(res.initial, corpus.judgment);
  const double rer = average_precision(*res.reranked, corpus.judgment);
  EXPECT_GE(rer, init);
}

TEST(QueryExpansion, CopiesOfQueryAreFixedPoint) {
  const std::vector<float> q = {0.6f, 0.8f, 0.0f};
  auto idx = globals_only({q, q, q, q, q, {0, 0, 1}, {1, 0, 0}});
  RankedList ranked = initial_search(idx, std::span<const float>(q));
  const auto ex = query_expansion(idx, q, ranked, PipelineConfig{});
  EXPECT_EQ(ex.stage, Stage::Expanded);
  EXPECT_EQ(ex.ids(), ranked.ids());
  for (std::size_t i = 0; i < ex.entries.size(); ++i) EXPECT_NEAR(ex.entries[i].score, ranked.entries[i].score, 1e-6);
}

TEST(QueryExpansion, DepthBeyondCorpusUsesAll) {
  const auto idx = globals_only({{1, 0}, {0, 1}});
  const std::vector<float> q = {1, 0};
  PipelineConfig cfg;
  cfg.qe_depth = 50;
  const auto ex = query_expansion(idx, q, initial_search(idx, std::span<const float>(q)), cfg);
  // mean of (1,0), (1,0), (0,1) -> (2,1)/sqrt5
  const double a = 2.0 / std::sqrt(5.0), b = 1.0 / std::sqrt(5.0);
  EXPECT_EQ(ex.entries[0].id, idx.ids[0]);
  EXPECT_NEAR(ex.entries[0].score, a, 1e-6);
  EXPECT_NEAR(ex.entries[1].score, b, 1e-6);
}

TEST(QueryExpansion, HandBuiltThreeVectors) {
  const auto idx = globals_only({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  const std::vector<float> q = {0.6f, 0.8f, 0.0f};
  RankedList ranked;
  ranked.entries = {{idx.ids[2], 0.9}, {idx.ids[0], 0.5}, {idx.ids[1], 0.1}};
  PipelineConfig cfg;
  cfg.qe_depth = 2;
  const auto ex = query_expansion(idx, q, ranked, cfg);
  // (q + e3 + e1) / 3 = (1.6, 0.8, 1) / 3, normalized
  const oracle::Vec want = oracle::unit({1.6, 0.8, 1.0});
  std::map<std::string, double> score;
  for (const auto& e : ex.entries) score[e.id] = e.score;
  EXPECT_NEAR(score[idx.ids[0]], want[0], 1e-6);
  EXPECT_NEAR(score[idx.ids[1]], want[1], 1e-6);
  EXPECT_NEAR(score[idx.ids[2]], want[2], 1e-6);
  EXPECT_THROW(query_expansion(idx, q, RankedList{}, cfg), ValidationError);
}

std::size_t str_bytes(const std::string& s) { return 4 + s.size(); }

TEST(IndexFile, RoundTripEquality) {
  Rng rng(131);
  const auto tensors = make_tensors(rng, 5);
  const auto wm = holdout_whitening(rng, 8, 7);
  for (Reranker r : {Reranker::None, Reranker::FMP, Reranker::OSPP}) {
    IndexConfig cfg;
    cfg.reranker = r;
    cfg.fmp.seed = 42;
    const auto idx = build_index(make_ids(5), tensors, cfg, wm);
    const auto dir = testing::scratch_dir("index_rt");
    save_index(idx, dir / "x.idx");
    const auto back = load_index(dir / "x.idx");
    EXPECT_EQ(back, idx);
    EXPECT_EQ(encode_index(back), encode_index(idx));
  }
}

TEST(IndexFile, TenImageSizeArithmetic) {
  Rng rng(132);
  const auto tensors = make_tensors(rng, 10);
  const auto wm = holdout_whitening(rng, 8, 6);
  IndexConfig cfg;
  cfg.fmp.clusters = 3;
  const auto idx = build_index(make_ids(10), tensors, cfg, wm);
  std::size_t want = 4;                                   // IDX1
  want += 4 + 1 + 4 + 1 + 4 + 4 + 8 + 4 + 8;              // config
  want += 4 + 4;                                          // ids header
  for (std::size_t i = 0; i < 10; ++i) want += str_bytes(idx.ids[i]) + str_bytes(idx.paths[i]);
  want += 4 + 8 + 10 * 6 * 4;                             // globals
  want += 4 + 1 + 8 + 8 * 4 + 6 * 8 * 4 + 6 * 4;         // whitening
  want += 4 + 1 + 4;                                      // regions header
  for (const auto& rs : idx.region_sets) want += 8 + rs->size() * rs->dim() * 4;
  EXPECT_EQ(encode_index(idx).size(), want);
}

TEST(IndexFile, TruncationNamesSection) {
  Rng rng(133);
  const auto tensors = make_tensors(rng, 4);
  IndexConfig cfg;
  cfg.aggregation = AggregationMethod::SPoC;
  const auto bytes = encode_index(build_index(make_ids(4), tensors, cfg, std::nullopt));
  const std::string globals_tag = "GLB ";
  const auto glb = bytes.find(globals_tag);
  ASSERT_NE(glb, std::string::npos);
  try {
    decode_index(std::vector<char>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(glb + 10)), "cut.idx");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("globals"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("cut.idx"), std::string::npos) << e.what();
  }
  auto bad = std::vector<char>(bytes.begin(), bytes.end());
  bad[0] = 'X';
  EXPECT_THROW(decode_index(bad), FormatError);
  auto trailing = std::vector<char>(bytes.begin(), bytes.end());
  trailing.push_back(0);
  EXPECT_THROW(decode_index(trailing), FormatError);
}

TEST(AuxFiles, WhiteningAndDescriptorRoundTrip) {
  Rng rng(134);
  const auto dir = testing::scratch_dir("aux_files");
  const auto wm = holdout_whitening(rng, 8, 5);
  save_whitening(wm, dir / "w.wht");
  EXPECT_EQ(load_whitening(dir / "w.wht"), wm);
  Matrix samples = testing::random_unit_rows(rng, 7, 3);
  save_descriptors(samples, dir / "s.dsc");
  EXPECT_EQ(load_descriptors(dir / "s.dsc"), samples);
  EXPECT_EQ(std::filesystem::file_size(dir / "s.dsc"), 4u + 8u + 7u * 3u * 4u);
}

TEST(Search, FullPipelineDeterministic) {
  SyntheticSpec spec;
  spec.relevant = 5;
  spec.distractors = 30;
  const auto c = synthesize(spec);
  IndexConfig cfg;
  cfg.aggregation = AggregationMethod::SPoC;
  cfg.fmp.clusters = 8;
  const auto a = build_index(c.ids, c.images, cfg, std::nullopt);
  const auto b = build_index(c.ids, c.images, cfg, std::nullopt);
  const auto ra = search(a, c.query, PipelineConfig{}, true);
  const auto rb = search(b, c.query, PipelineConfig{}, true);
  EXPECT_EQ(ra.initial, rb.initial);
  EXPECT_EQ(*ra.reranked, *rb.reranked);
  EXPECT_EQ(*ra.expanded, *rb.expanded);
  EXPECT_EQ(&ra.final_list(), &*ra.expanded);
}

}  // namespace
}  // namespace qamret
