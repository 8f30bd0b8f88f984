#include "mitodet/manifest.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "json_detail.hpp"
#include "mitodet/image.hpp"
#include "mitodet/rng.hpp"

namespace mitodet {

namespace fs = std::filesystem;

std::string label_name(Label l) {
  return l == Label::MitoticFigure ? "mitotic-figure" : "non-mitotic-figure";
}

Label label_from_name(const std::string& s) {
  if (s == "mitotic-figure") return Label::MitoticFigure;
  if (s == "non-mitotic-figure") return Label::NonMitoticFigure;
  throw ValidationError("unknown annotation label '" + s + "'");
}

int ImageRecord::mitosis_count() const {
  int n = 0;
  for (const auto& a : annotations)
    if (a.label == Label::MitoticFigure) ++n;
  return n;
}

namespace {

json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path + "'");
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ValidationError("'" + path + "' is not valid JSON: " + e.what());
  }
}

void write_json_file(const json& j, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os << j.dump(2) << "\n";
  if (!os) throw IoError("short write to '" + path + "'");
}

}  // namespace

std::vector<ImageRecord> load_manifest(const std::string& path) {
  const json j = read_json_file(path);
  if (!j.is_object() || !j.contains("images") || !j["images"].is_array())
    throw ValidationError("manifest '" + path +
                          "': expected an object with an \"images\" array");
  const fs::path base = fs::path(path).parent_path();

  std::vector<ImageRecord> records;
  std::set<std::string> seen;
  size_t index = 0;
  for (const auto& ji : j["images"]) {
    const std::string where =
        "manifest '" + path + "' image #" + std::to_string(index);
    ImageRecord r;
    try {
      r.id = ji.at("id").get<std::string>();
      r.file = ji.at("file").get<std::string>();
      r.domain = ji.at("domain").get<std::string>();
      r.width = ji.at("width").get<int>();
      r.height = ji.at("height").get<int>();
      for (const auto& ja : ji.value("annotations", json::array())) {
        Annotation a;
        a.x = ja.at("x").get<double>();
        a.y = ja.at("y").get<double>();
        a.label = label_from_name(ja.at("label").get<std::string>());
        r.annotations.push_back(a);
      }
    } catch (const json::exception& e) {
      throw ValidationError(where + ": " + e.what());
    }
    if (!seen.insert(r.id).second)
      throw ValidationError(where + ": duplicate id '" + r.id + "'");
    if (r.width < 1 || r.height < 1)
      throw ValidationError(where + " ('" + r.id + "'): bad dimensions");
    for (const auto& a : r.annotations) {
      if (a.x < 0 || a.x >= r.width || a.y < 0 || a.y >= r.height)
        throw ValidationError(where + " ('" + r.id +
                              "'): annotation outside image bounds");
    }
    const fs::path file = fs::path(r.file).is_absolute()
                              ? fs::path(r.file)
                              : base / r.file;
    if (!fs::exists(file))
      throw IoError(where + " ('" + r.id + "'): missing image file '" +
                    file.string() + "'");
    int pw = 0, ph = 0;
    read_png_size(file, pw, ph);
    if (pw != r.width || ph != r.height)
      throw ValidationError(where + " ('" + r.id + "'): manifest says " +
                            std::to_string(r.width) + "x" +
                            std::to_string(r.height) + " but PNG is " +
                            std::to_string(pw) + "x" + std::to_string(ph));
    r.file = file.string();
    records.push_back(std::move(r));
    ++index;
  }
  return records;
}

void save_manifest(const std::vector<ImageRecord>& records,
                   const std::string& path) {
  json images = json::array();
  for (const auto& r : records) {
    json ja = json::array();
    for (const auto& a : r.annotations) {
      ja.push_back(
          {{"x", a.x}, {"y", a.y}, {"label", label_name(a.label)}});
    }
    images.push_back({{"id", r.id},
                      {"file", r.file},
                      {"domain", r.domain},
                      {"width", r.width},
                      {"height", r.height},
                      {"annotations", ja}});
  }
  write_json_file(json{{"images", images}}, path);
}

void save_split(const SplitManifest& split, const std::string& path) {
  json stats = json::object();
  for (const auto& [domain, s] : split.stats) {
    stats[domain] = {{"train_images", s.train_images},
                     {"val_images", s.val_images},
                     {"train_mitoses", s.train_mitoses},
                     {"val_mitoses", s.val_mitoses}};
  }
  write_json_file(json{{"train_ids", split.train_ids},
                       {"val_ids", split.val_ids},
                       {"stats", stats}},
                  path);
}

SplitManifest load_split(const std::string& path) {
  const json j = read_json_file(path);
  SplitManifest s;
  try {
    s.train_ids = j.at("train_ids").get<std::vector<std::string>>();
    s.val_ids = j.at("val_ids").get<std::vector<std::string>>();
    const json stats = j.value("stats", json::object());
    for (const auto& [domain, js] : stats.items()) {
      DomainStats d;
      d.train_images = js.at("train_images").get<int>();
      d.val_images = js.at("val_images").get<int>();
      d.train_mitoses = js.at("train_mitoses").get<int>();
      d.val_mitoses = js.at("val_mitoses").get<int>();
      s.stats[domain] = d;
    }
  } catch (const json::exception& e) {
    throw ValidationError("split '" + path + "': " + e.what());
  }
  return s;
}

std::vector<ImageRecord> select_records(const std::vector<ImageRecord>& records,
                                        const std::vector<std::string>& ids) {
  const std::set<std::string> want(ids.begin(), ids.end());
  std::vector<ImageRecord> out;
  std::set<std::string> found;
  for (const auto& r : records) {
    if (want.count(r.id)) {
      out.push_back(r);
      found.insert(r.id);
    }
  }
  for (const auto& id : ids) {
    if (!found.count(id))
      throw ValidationError("split references unknown image id '" + id + "'");
  }
  return out;
}

}  // namespace mitodet
