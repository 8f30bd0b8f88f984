#pragma once

#include <map>
#include <string>
#include <vector>

namespace mitodet {

enum class Label { MitoticFigure, NonMitoticFigure };

std::string label_name(Label l);
Label label_from_name(const std::string& s);

struct Annotation {
  double x = 0.0, y = 0.0;  // object center, pixels
  Label label = Label::MitoticFigure;
};

struct ImageRecord {
  std::string id;
  std::string file;  // resolved path to an 8-bit RGB PNG
  std::string domain;
  int width = 0, height = 0;
  std::vector<Annotation> annotations;

  int mitosis_count() const;
};

struct DomainStats {
  int train_images = 0, val_images = 0;
  int train_mitoses = 0, val_mitoses = 0;
};

struct SplitManifest {
  std::vector<std::string> train_ids, val_ids;
  std::map<std::string, DomainStats> stats;
};

// Parses the manifest JSON ({"images": [...]}), resolves image paths
// relative to the manifest's directory, and validates: unique ids,
// annotations inside image bounds, referenced files present with matching
// PNG dimensions. Schema problems name the offending record.
std::vector<ImageRecord> load_manifest(const std::string& path);

// Writes the manifest JSON; file paths are emitted as given.
void save_manifest(const std::vector<ImageRecord>& records,
                   const std::string& path);

void save_split(const SplitManifest& split, const std::string& path);
SplitManifest load_split(const std::string& path);

// Filters records down to the given id list, preserving manifest order.
std::vector<ImageRecord> select_records(const std::vector<ImageRecord>& records,
                                        const std::vector<std::string>& ids);

}  // namespace mitodet
