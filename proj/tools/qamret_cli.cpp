// qamret-cli: command-line front end for indexing, search, evaluation and
// heat maps. Exit codes: 0 ok, 2 usage or validation error, 1 internal error.

#include "CLI11.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>
#include <sstream>

#include "json.hpp"

#include "qamret/qamret.hpp"

namespace {

using namespace qamret;
using Clock = std::chrono::steady_clock;

class Timer {
 public:
  explicit Timer(std::string label) : label_(std::move(label)), t0_(Clock::now()) {}
  ~Timer() {
    const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0_).count();
    std::fprintf(stderr, "[time] %s: %.1f ms\n", label_.c_str(), ms);
  }

 private:
  std::string label_;
  Clock::time_point t0_;
};

std::string format_score(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const std::map<std::string, AggregationMethod> kAggregation = {{"spoc", AggregationMethod::SPoC},
                                                               {"rmac", AggregationMethod::RMAC}};
const std::map<std::string, Reranker> kReranker = {
    {"fmp", Reranker::FMP}, {"ospp", Reranker::OSPP}, {"none", Reranker::None}};

Reranker pick_reranker(const std::string& name, const DescriptorIndex& idx) {
  return name == "auto" ? idx.config.reranker : kReranker.at(name);
}

nlohmann::ordered_json list_json(const RankedList& l) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < l.entries.size(); ++i) {
    arr.push_back({{"rank", i + 1}, {"id", l.entries[i].id}, {"score", l.entries[i].score}});
  }
  return arr;
}

// ---------------------------------------------------------------------------

struct FitWhiteningArgs {
  std::string input;
  std::string out;
  std::size_t dim = 0;
  std::string aggregation = "rmac";
  std::size_t scales = 3;
  std::size_t threads = 1;
};

int run_fit_whitening(const FitWhiteningArgs& a) {
  Matrix samples;
  if (std::filesystem::path(a.input).extension() == ".json") {
    Timer t("sample collection");
    const auto m = read_manifest(a.input);
    m.validate();
    const auto method = kAggregation.at(a.aggregation);
    for (const auto& e : m.entries) {
      const auto s = whitening_samples(read_tensor(m.resolve(e.path)), method, a.scales);
      for (std::size_t r = 0; r < s.rows(); ++r) samples.append_row(s.row(r));
    }
  } else {
    samples = load_descriptors(a.input);
  }
  std::fprintf(stderr, "samples: %zu x %zu\n", samples.rows(), samples.cols());
  WhiteningModel wm;
  {
    Timer t("fit");
    wm = fit_whitening(samples, a.dim == 0 ? samples.cols() : a.dim);
  }
  save_whitening(wm, a.out);
  std::printf("retained_dims\t%zu\neigenvalue_floor_hits\t%zu\n", wm.out_dim(), wm.clamped_dims());
  return 0;
}

struct IndexArgs {
  std::string manifest;
  std::string out;
  std::string aggregation = "rmac";
  std::string reranker = "fmp";
  std::size_t clusters = 25;
  std::size_t scales = 3;
  std::size_t rmac_scales = 3;
  std::size_t fmp_iterations = 100;
  std::uint64_t seed = 0;
  std::string whitening;
  std::size_t threads = 1;
};

int run_index(const IndexArgs& a) {
  CorpusManifest m;
  {
    Timer t("manifest");
    m = read_manifest(a.manifest);
    m.validate();
  }
  IndexConfig cfg;
  cfg.aggregation = kAggregation.at(a.aggregation);
  cfg.rmac_scales = a.rmac_scales;
  cfg.reranker = kReranker.at(a.reranker);
  cfg.fmp = FmpConfig{a.clusters, a.fmp_iterations, a.seed};
  cfg.ospp.scales = a.scales;
  cfg.validate();
  std::optional<WhiteningModel> wm;
  if (!a.whitening.empty()) wm = load_whitening(a.whitening);
  DescriptorIndex idx;
  {
    Timer t("build (" + std::to_string(m.entries.size()) + " images, " + std::to_string(a.threads) + " threads)");
    idx = build_index(m, cfg, wm, a.threads);
  }
  {
    Timer t("save");
    save_index(idx, a.out);
  }
  std::fprintf(stderr, "indexed %zu images, global dim %zu, reranker %s\n", idx.size(), idx.globals.cols(),
               to_string(idx.config.reranker));
  return 0;
}

struct SearchArgs {
  std::string index;
  std::string query;
  std::vector<std::size_t> crop;
  std::string rerank = "auto";
  bool qe = false;
  std::size_t shortlist = 100;
  std::size_t qe_depth = 5;
  long top = -1;
  std::string out;
  std::size_t threads = 1;
};

int run_search(const SearchArgs& a) {
  const auto idx = load_index(a.index);
  CfmTensor q = read_tensor(a.query);
  if (!a.crop.empty()) q = crop_tensor(q, GridBox{a.crop[0], a.crop[1], a.crop[2], a.crop[3]});
  PipelineConfig pc;
  pc.reranker = pick_reranker(a.rerank, idx);
  pc.shortlist = a.shortlist;
  pc.qe_depth = a.qe_depth;
  pc.threads = a.threads;
  SearchResult res;
  {
    Timer t("search");
    res = search(idx, q, pc, a.qe);
  }
  const auto& final_list = res.final_list();
  const std::size_t n =
      a.top < 0 ? final_list.entries.size() : std::min(final_list.entries.size(), static_cast<std::size_t>(a.top));
  if (n > 0) {
    std::printf("rank\tid\tscore\tstage\n");
    for (std::size_t i = 0; i < n; ++i) {
      std::printf("%zu\t%s\t%s\t%s\n", i + 1, final_list.entries[i].id.c_str(),
                  format_score(final_list.entries[i].score).c_str(), to_string(final_list.stage));
    }
  }
  if (!a.out.empty()) {
    nlohmann::ordered_json j;
    j["query"] = a.query;
    j["initial"] = list_json(res.initial);
    if (res.reranked) j["reranked"] = list_json(*res.reranked);
    if (res.expanded) j["expanded"] = list_json(*res.expanded);
    io::write_file(a.out, j.dump(2) + "\n");
  }
  return 0;
}

struct EvalArgs {
  std::string index;
  std::string manifest;
  std::string rerank = "auto";
  bool qe = false;
  std::size_t shortlist = 100;
  std::size_t qe_depth = 5;
  std::size_t threads = 1;
};

int run_eval(const EvalArgs& a) {
  const auto idx = load_index(a.index);
  const auto m = read_manifest(a.manifest);
  m.validate();
  if (m.queries.empty()) throw ValidationError("manifest has no queries");
  for (const auto& q : m.queries) {
    if (!m.relevance.count(q.id)) throw ValidationError("no relevance judgment for query '" + q.id + "'");
  }
  PipelineConfig pc;
  pc.reranker = pick_reranker(a.rerank, idx);
  pc.shortlist = a.shortlist;
  pc.qe_depth = a.qe_depth;
  pc.threads = a.threads;
  pc.validate();

  std::vector<double> initial, reranked, expanded;
  std::printf("query\tinitial%s%s\n", pc.reranker != Reranker::None ? "\treranked" : "", a.qe ? "\texpanded" : "");
  Timer t("eval (" + std::to_string(m.queries.size()) + " queries)");
  for (const auto& q : m.queries) {
    const auto res = search(idx, load_query_tensor(m, q), pc, a.qe);
    const auto& jd = m.relevance.at(q.id);
    initial.push_back(average_precision(res.initial, jd));
    std::string row = q.id + "\t" + format_score(initial.back());
    if (res.reranked) {
      reranked.push_back(average_precision(*res.reranked, jd));
      row += "\t" + format_score(reranked.back());
    }
    if (res.expanded) {
      expanded.push_back(average_precision(*res.expanded, jd));
      row += "\t" + format_score(expanded.back());
    }
    std::printf("%s\n", row.c_str());
  }
  std::string row = "mAP\t" + format_score(mean_ap(initial));
  if (!reranked.empty()) row += "\t" + format_score(mean_ap(reranked));
  if (!expanded.empty()) row += "\t" + format_score(mean_ap(expanded));
  std::printf("%s\n", row.c_str());
  return 0;
}

struct HeatmapArgs {
  std::string index;
  std::string query;
  std::string image;
  std::string out;
  std::string mode = "merged";
};

int run_heatmap(const HeatmapArgs& a) {
  const auto idx = load_index(a.index);
  const auto it = std::find(idx.ids.begin(), idx.ids.end(), a.image);
  if (it == idx.ids.end()) throw ValidationError("unknown image id '" + a.image + "'");
  const auto& path = idx.paths[static_cast<std::size_t>(it - idx.ids.begin())];
  if (path.empty()) throw ValidationError("index stores no tensor path for '" + a.image + "'");
  const auto t = read_tensor(path);

  HeatMap map;
  if (a.mode == "l1norm") {
    map = l1norm_heatmap(t);
  } else {
    const auto q = spoc(read_tensor(a.query));
    const auto regions = fmp_detailed(t, idx.config.fmp);
    std::vector<double> z;
    std::vector<int> cc(t.channels(), -1);
    if (q.degenerate || !regions) {
      std::fprintf(stderr, "warning: no usable activation in query or image; writing a zero map\n");
    } else {
      const auto sol = solve_qam(q.view(), regions->regions.descriptors);
      cc = regions->channel_cluster;
      z = sol.z;
      if (sol.status == QamStatus::Infeasible) {
        std::fprintf(stderr, "warning: QAM infeasible for '%s'; writing a zero map\n", a.image.c_str());
        std::fill(z.begin(), z.end(), 0.0);
      }
      std::fprintf(stderr, "similarity %.6f (%s, %zu regions)\n", sol.similarity, to_string(sol.status),
                   regions->regions.size());
    }
    if (z.empty()) {
      map.height = t.height();
      map.width = t.width();
      map.values.assign(t.height() * t.width(), 0.0);
    } else {
      map = merged_heatmap(t, cc, z);
    }
  }
  write_pgm(map, a.out);
  return 0;
}

struct GenArgs {
  std::string out;
  std::string holdout;
  std::uint64_t holdout_seed = 0;
  bool holdout_seed_set = false;
  SyntheticSpec spec;
};

int run_gen(GenArgs a) {
  const auto m = generate_synthetic(a.spec, a.out);
  std::fprintf(stderr, "wrote %zu images to %s\n", m.entries.size(), a.out.c_str());
  if (!a.holdout.empty()) {
    SyntheticSpec hold = a.spec;
    hold.seed = a.holdout_seed_set ? a.holdout_seed : a.spec.seed + 1000;
    const auto h = generate_synthetic(hold, a.holdout);
    std::fprintf(stderr, "wrote %zu hold-out images to %s\n", h.entries.size(), a.holdout.c_str());
  }
  return 0;
}

struct ConvertArgs {
  std::string gt_dir;
  std::string tensor_dir;
  std::string out;
  double scale = 1.0 / 16.0;
  std::string ext = ".cfm";
};

int run_convert(const ConvertArgs& a) {
  const auto m = convert_oxford_gt(a.gt_dir, a.tensor_dir, a.scale, a.ext);
  write_manifest(m, a.out);
  std::fprintf(stderr, "%zu entries, %zu queries\n", m.entries.size(), m.queries.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Instance retrieval with query-adaptive region merging"};
  app.require_subcommand(1);
  std::size_t threads = default_thread_count();
  app.add_option("--threads", threads, "Worker threads (default: QAM_THREADS or 1)")->check(CLI::PositiveNumber);

  auto agg_check = CLI::IsMember({"spoc", "rmac"});

  FitWhiteningArgs fw;
  auto* c_fw = app.add_subcommand("fit-whitening", "Fit PCA whitening on DSC1 samples or a manifest's tensors");
  c_fw->add_option("input", fw.input, "DSC1 descriptor file or manifest (.json)")->required();
  c_fw->add_option("out", fw.out, "Output whitening model")->required();
  c_fw->add_option("--dim", fw.dim, "Output dimensionality (default: input dimensionality)");
  c_fw->add_option("--aggregation", fw.aggregation, "Sample kind when reading a manifest")
      ->check(agg_check)
      ->capture_default_str();
  c_fw->add_option("--L", fw.scales, "R-MAC scales when sampling regions")->capture_default_str();

  IndexArgs ix;
  auto* c_ix = app.add_subcommand("index", "Build a descriptor index from a manifest");
  c_ix->add_option("manifest", ix.manifest)->required();
  c_ix->add_option("out", ix.out)->required();
  c_ix->add_option("--aggregation", ix.aggregation)->check(agg_check)->capture_default_str();
  c_ix->add_option("--reranker", ix.reranker)->check(CLI::IsMember({"fmp", "ospp", "none"}))->capture_default_str();
  c_ix->add_option("--K", ix.clusters, "FMP cluster count")->capture_default_str();
  c_ix->add_option("--L", ix.scales, "OSPP scales")->capture_default_str();
  c_ix->add_option("--rmac-L", ix.rmac_scales, "R-MAC scales")->capture_default_str();
  c_ix->add_option("--fmp-iterations", ix.fmp_iterations)->capture_default_str();
  c_ix->add_option("--seed", ix.seed, "FMP clustering seed")->capture_default_str();
  c_ix->add_option("--whitening", ix.whitening, "Whitening model (required for rmac or ospp)");

  SearchArgs se;
  auto* c_se = app.add_subcommand("search", "Rank the index for one query tensor");
  c_se->add_option("index", se.index)->required();
  c_se->add_option("query", se.query)->required();
  c_se->add_option("--crop", se.crop, "Query crop: top left height width")->expected(4);
  c_se->add_option("--rerank", se.rerank)->check(CLI::IsMember({"auto", "fmp", "ospp", "none"}))->capture_default_str();
  c_se->add_flag("--qe", se.qe, "Average query expansion");
  c_se->add_option("--N", se.shortlist, "Rerank shortlist length")->capture_default_str();
  c_se->add_option("--qe-depth", se.qe_depth)->capture_default_str();
  c_se->add_option("--top", se.top, "Rows to print (default: all)");
  c_se->add_option("--out", se.out, "Write every stage as JSON");

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "Per-query AP and mAP for each enabled stage");
  c_ev->add_option("index", ev.index)->required();
  c_ev->add_option("manifest", ev.manifest)->required();
  c_ev->add_option("--rerank", ev.rerank)->check(CLI::IsMember({"auto", "fmp", "ospp", "none"}))->capture_default_str();
  c_ev->add_flag("--qe", ev.qe);
  c_ev->add_option("--N", ev.shortlist)->capture_default_str();
  c_ev->add_option("--qe-depth", ev.qe_depth)->capture_default_str();

  HeatmapArgs hm;
  auto* c_hm = app.add_subcommand("heatmap", "Write a PGM heat map for one indexed image");
  c_hm->add_option("index", hm.index)->required();
  c_hm->add_option("query", hm.query)->required();
  c_hm->add_option("image", hm.image, "Image id")->required();
  c_hm->add_option("out", hm.out, "Output .pgm")->required();
  c_hm->add_option("--mode", hm.mode)->check(CLI::IsMember({"merged", "l1norm"}))->capture_default_str();

  GenArgs ge;
  auto* c_ge = app.add_subcommand("gen-synthetic", "Write a synthetic clutter corpus");
  c_ge->add_option("out", ge.out)->required();
  c_ge->add_option("--holdout", ge.holdout, "Also write a hold-out corpus here");
  auto* hs = c_ge->add_option("--holdout-seed", ge.holdout_seed, "Hold-out seed (default: seed + 1000)");
  c_ge->add_option("--seed", ge.spec.seed)->capture_default_str();
  c_ge->add_option("--height", ge.spec.height)->capture_default_str();
  c_ge->add_option("--width", ge.spec.width)->capture_default_str();
  c_ge->add_option("--channels", ge.spec.channels)->capture_default_str();
  c_ge->add_option("--object-height", ge.spec.object_height)->capture_default_str();
  c_ge->add_option("--object-width", ge.spec.object_width)->capture_default_str();
  c_ge->add_option("--object-channels", ge.spec.object_channels)->capture_default_str();
  c_ge->add_option("--object-fill", ge.spec.object_fill)->capture_default_str();
  c_ge->add_option("--clutter-density", ge.spec.clutter_density)->capture_default_str();
  c_ge->add_option("--clutter-sparsity", ge.spec.clutter_sparsity)->capture_default_str();
  c_ge->add_option("--clutter-scale", ge.spec.clutter_scale)->capture_default_str();
  c_ge->add_option("--noise-scale", ge.spec.noise_scale)->capture_default_str();
  c_ge->add_option("--relevant", ge.spec.relevant)->capture_default_str();
  c_ge->add_option("--distractors", ge.spec.distractors)->capture_default_str();

  ConvertArgs cv;
  auto* c_cv = app.add_subcommand("convert-oxford-gt", "Convert Oxford-style ground truth to a manifest");
  c_cv->add_option("gt_dir", cv.gt_dir)->required();
  c_cv->add_option("tensor_dir", cv.tensor_dir)->required();
  c_cv->add_option("out", cv.out)->required();
  c_cv->add_option("--scale", cv.scale, "Pixel to grid factor")->capture_default_str();
  c_cv->add_option("--ext", cv.ext)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    fw.threads = ix.threads = se.threads = ev.threads = threads;
    if (*c_fw) return run_fit_whitening(fw);
    if (*c_ix) return run_index(ix);
    if (*c_se) return run_search(se);
    if (*c_ev) return run_eval(ev);
    if (*c_hm) return run_heatmap(hm);
    if (*c_ge) {
      ge.holdout_seed_set = hs->count() > 0;
      return run_gen(ge);
    }
    if (*c_cv) return run_convert(cv);
  } catch (const qamret::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
