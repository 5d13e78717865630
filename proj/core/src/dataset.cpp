#include "scenelab/dataset.hpp"

#include <cstdio>
#include <filesystem>

#include "scenelab/image_io.hpp"

namespace scenelab {

LoadedImages load_images(const SampleManifest& m,
                         const std::vector<size_t>& row_indices,
                         const std::string& base_dir, int resize_to) {
  LoadedImages out;
  out.images.resize(row_indices.size());
  out.ok.assign(row_indices.size(), 0);
  for (size_t i = 0; i < row_indices.size(); ++i) {
    const auto& row = m.rows.at(row_indices[i]);
    std::string path = row.uri;
    if (!path.empty() && path[0] != '/' && !base_dir.empty()) {
      path = base_dir + "/" + path;
    }
    try {
      out.images[i] = resize_to > 0
                          ? load_image_resized(path, resize_to, resize_to)
                          : load_image(path);
      out.ok[i] = 1;
      ++out.loaded;
    } catch (const std::exception& e) {
      std::fprintf(stderr, "[data] skipping row %zu: %s\n", row_indices[i],
                   e.what());
      ++out.skipped;
    }
  }
  return out;
}

std::string manifest_base_dir(const std::string& manifest_path) {
  return std::filesystem::path(manifest_path).parent_path().string();
}

std::vector<size_t> split_indices(const SampleManifest& m,
                                  const std::string& split) {
  std::vector<size_t> out;
  for (size_t i = 0; i < m.rows.size(); ++i) {
    if (m.rows[i].split == split && m.rows[i].mapped_class != kUnmapped) {
      out.push_back(i);
    }
  }
  return out;
}

}  // namespace scenelab
