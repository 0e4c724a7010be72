#pragma once

// Procedural toy corpus for smoke runs and tests. Every RGB image combines an
// independently drawn style (palette and texture) with an independently drawn
// layout of shapes; bank sketches are wobbly dark strokes on a white background.

#include <cstdint>
#include <filesystem>
#include <vector>

namespace s2i::toy {

namespace fs = std::filesystem;

struct ToyOptions {
  int64_t resolution = 64;
  uint64_t seed = 0;
};

// Writes toy_<i>.png for i in [0, count). Returns the written paths.
std::vector<fs::path> write_rgb_corpus(const fs::path& dir, int64_t count, const ToyOptions& opts);

// Writes bank_<i>.png line sketches for i in [0, count).
std::vector<fs::path> write_sketch_bank(const fs::path& dir, int64_t count, const ToyOptions& opts);

}  // namespace s2i::toy
