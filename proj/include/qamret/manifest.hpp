#pragma once

// Corpus manifests: which tensors make up the database, which tensors are
// queries, and the relevance judgments for each query. Stored as JSON:
//
//   {
//     "entries":   [{"id": "img0", "path": "img0.cfm", "label": "x"}, ...],
//     "queries":   [{"id": "q0", "path": "q0.cfm", "crop": [top, left, h, w]}, ...],
//     "relevance": {"q0": {"relevant": ["img0"], "junk": []}, ...}
//   }
//
// Relative paths are resolved against the manifest's directory.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "qamret/binary_io.hpp"
#include "qamret/error.hpp"
#include "qamret/tensor.hpp"

namespace qamret {

struct ManifestEntry {
  std::string id;
  std::string path;
  std::optional<std::string> label;

  bool operator==(const ManifestEntry&) const = default;
};

struct ManifestQuery {
  std::string id;
  std::string path;
  std::optional<GridBox> crop;

  bool operator==(const ManifestQuery&) const = default;
};

struct QueryJudgment {
  std::set<std::string> relevant;
  std::set<std::string> junk;

  bool operator==(const QueryJudgment&) const = default;
};

struct CorpusManifest {
  std::vector<ManifestEntry> entries;
  std::vector<ManifestQuery> queries;
  std::map<std::string, QueryJudgment> relevance;
  /// Directory that relative paths are resolved against.
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::string& p) const {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }

  /// Checks uniqueness of ids, disjointness of judgments and, when
  /// `check_files` is set, that every referenced tensor file exists.
  void validate(bool check_files = true) const {
    std::set<std::string> ids;
    for (const auto& e : entries) {
      if (e.id.empty()) throw ValidationError("manifest entry with empty id");
      if (!ids.insert(e.id).second) throw ValidationError("duplicate image id '" + e.id + "'");
      if (check_files && !std::filesystem::exists(resolve(e.path))) {
        throw ValidationError("image '" + e.id + "': tensor file not found: " + resolve(e.path).string());
      }
    }
    std::set<std::string> qids;
    for (const auto& q : queries) {
      if (!qids.insert(q.id).second) throw ValidationError("duplicate query id '" + q.id + "'");
      if (check_files && !std::filesystem::exists(resolve(q.path))) {
        throw ValidationError("query '" + q.id + "': tensor file not found: " + resolve(q.path).string());
      }
      if (q.crop && (q.crop->height == 0 || q.crop->width == 0)) {
        throw ValidationError("query '" + q.id + "': empty crop box");
      }
    }
    for (const auto& [qid, j] : relevance) {
      for (const auto& id : j.relevant) {
        if (j.junk.count(id)) {
          throw ValidationError("query '" + qid + "': id '" + id + "' is both relevant and junk");
        }
      }
    }
  }
};

inline nlohmann::ordered_json manifest_to_json(const CorpusManifest& m) {
  nlohmann::ordered_json j;
  j["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : m.entries) {
    nlohmann::ordered_json je{{"id", e.id}, {"path", e.path}};
    if (e.label) je["label"] = *e.label;
    j["entries"].push_back(je);
  }
  j["queries"] = nlohmann::ordered_json::array();
  for (const auto& q : m.queries) {
    nlohmann::ordered_json jq{{"id", q.id}, {"path", q.path}};
    if (q.crop) jq["crop"] = {q.crop->top, q.crop->left, q.crop->height, q.crop->width};
    j["queries"].push_back(jq);
  }
  j["relevance"] = nlohmann::ordered_json::object();
  for (const auto& [qid, jd] : m.relevance) {
    j["relevance"][qid] = {{"relevant", std::vector<std::string>(jd.relevant.begin(), jd.relevant.end())},
                           {"junk", std::vector<std::string>(jd.junk.begin(), jd.junk.end())}};
  }
  return j;
}

inline CorpusManifest manifest_from_json(const nlohmann::json& j, std::filesystem::path base_dir = {}) {
  CorpusManifest m;
  m.base_dir = std::move(base_dir);
  try {
    for (const auto& je : j.value("entries", nlohmann::json::array())) {
      ManifestEntry e{je.at("id").get<std::string>(), je.at("path").get<std::string>(), std::nullopt};
      if (je.contains("label") && !je["label"].is_null()) e.label = je["label"].get<std::string>();
      m.entries.push_back(std::move(e));
    }
    for (const auto& jq : j.value("queries", nlohmann::json::array())) {
      ManifestQuery q{jq.at("id").get<std::string>(), jq.at("path").get<std::string>(), std::nullopt};
      if (jq.contains("crop") && !jq["crop"].is_null()) {
        const auto& c = jq["crop"];
        if (!c.is_array() || c.size() != 4) throw FormatError("query '" + q.id + "': crop must be [top, left, height, width]");
        q.crop = GridBox{c[0].get<std::size_t>(), c[1].get<std::size_t>(), c[2].get<std::size_t>(),
                         c[3].get<std::size_t>()};
      }
      m.queries.push_back(std::move(q));
    }
    if (j.contains("relevance")) {
      for (const auto& [qid, jr] : j["relevance"].items()) {
        QueryJudgment jd;
        for (const auto& id : jr.value("relevant", nlohmann::json::array())) jd.relevant.insert(id.get<std::string>());
        for (const auto& id : jr.value("junk", nlohmann::json::array())) jd.junk.insert(id.get<std::string>());
        m.relevance.emplace(qid, std::move(jd));
      }
    }
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("manifest: ") + ex.what());
  }
  return m;
}

inline CorpusManifest read_manifest(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& ex) {
    throw FormatError(path.string() + ": " + ex.what());
  }
  auto m = manifest_from_json(j, path.parent_path());
  m.validate(true);
  return m;
}

inline void write_manifest(const CorpusManifest& m, const std::filesystem::path& path) {
  io::write_file(path, manifest_to_json(m).dump(2) + "\n");
}

/// Loads a query tensor, applying its crop box if the manifest gives one.
inline CfmTensor load_query_tensor(const CorpusManifest& m, const ManifestQuery& q) {
  CfmTensor t = read_tensor(m.resolve(q.path));
  return q.crop ? crop_tensor(t, *q.crop) : t;
}

namespace detail {

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

}  // namespace detail

/// Builds a manifest from Oxford/Paris-style ground truth.
///
/// `gt_dir` holds `<q>_query.txt` ("<image> x1 y1 x2 y2"), `<q>_good.txt`,
/// `<q>_ok.txt` and `<q>_junk.txt`. Every `<id><ext>` file in `tensor_dir`
/// becomes a database entry. Pixel boxes are mapped onto the feature-map grid
/// with `pixel_to_grid` (e.g. 1/16 for a stride-16 network) and clamped to the
/// query tensor's extent. good and ok images are relevant; junk stays junk.
inline CorpusManifest convert_oxford_gt(const std::filesystem::path& gt_dir,
                                        const std::filesystem::path& tensor_dir, double pixel_to_grid,
                                        const std::string& ext = ".cfm") {
  namespace fs = std::filesystem;
  if (!(pixel_to_grid > 0.0)) throw ValidationError("pixel-to-grid scale must be positive");
  CorpusManifest m;
  m.base_dir = tensor_dir;

  std::vector<fs::path> tensors;
  for (const auto& de : fs::directory_iterator(tensor_dir)) {
    if (de.is_regular_file() && de.path().extension() == ext) tensors.push_back(de.path());
  }
  std::sort(tensors.begin(), tensors.end());
  for (const auto& p : tensors) m.entries.push_back({p.stem().string(), p.filename().string(), std::nullopt});

  std::vector<fs::path> query_files;
  const std::string suffix = "_query.txt";
  for (const auto& de : fs::directory_iterator(gt_dir)) {
    const std::string name = de.path().filename().string();
    if (name.size() > suffix.size() && name.ends_with(suffix)) query_files.push_back(de.path());
  }
  std::sort(query_files.begin(), query_files.end());

  for (const auto& qf : query_files) {
    const std::string name = qf.filename().string();
    const std::string qid = name.substr(0, name.size() - suffix.size());
    const auto lines = detail::read_lines(qf);
    if (lines.empty()) throw FormatError(qf.string() + ": empty query file");
    std::istringstream ss(lines.front());
    std::string image;
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    if (!(ss >> image >> x1 >> y1 >> x2 >> y2)) throw FormatError(qf.string() + ": expected '<image> x1 y1 x2 y2'");
    if (image.starts_with("oxc1_")) image = image.substr(5);

    const std::string tensor_name = image + ext;
    const CfmTensor qt = read_tensor(tensor_dir / tensor_name);
    auto to_grid_lo = [&](double v, std::size_t limit) {
      return std::min<std::size_t>(static_cast<std::size_t>(std::max(0.0, std::floor(v * pixel_to_grid))), limit - 1);
    };
    auto to_grid_hi = [&](double v, std::size_t limit) {
      return std::min<std::size_t>(static_cast<std::size_t>(std::max(1.0, std::ceil(v * pixel_to_grid))), limit);
    };
    const std::size_t top = to_grid_lo(y1, qt.height());
    const std::size_t left = to_grid_lo(x1, qt.width());
    const std::size_t bottom = std::max(top + 1, to_grid_hi(y2, qt.height()));
    const std::size_t right = std::max(left + 1, to_grid_hi(x2, qt.width()));
    m.queries.push_back({qid, tensor_name, GridBox{top, left, bottom - top, right - left}});

    QueryJudgment jd;
    for (const char* kind : {"_good.txt", "_ok.txt"}) {
      const fs::path f = gt_dir / (qid + kind);
      if (fs::exists(f)) {
        for (auto& id : detail::read_lines(f)) jd.relevant.insert(id);
      }
    }
    const fs::path junk = gt_dir / (qid + "_junk.txt");
    if (fs::exists(junk)) {
      for (auto& id : detail::read_lines(junk)) jd.junk.insert(id);
    }
    m.relevance.emplace(qid, std::move(jd));
  }
  m.validate(true);
  return m;
}

}  // namespace qamret
