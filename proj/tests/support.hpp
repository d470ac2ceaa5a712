#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "iir/data.hpp"
#include "iir/model.hpp"
#include "iir/train.hpp"

namespace iir::testing {

// 16x16, two levels, narrow everything. Fast enough for finite differences.
ModelConfig tiny_config(int image_size = 16);

// Generator scenes of the given size, rendered in memory.
std::vector<Example> synthetic_examples(int count, int size, std::uint64_t seed = 1);
std::vector<const Example*> pointers(const std::vector<Example>& examples);

// Replace the zero-initialised injection weights with random values so the
// condition path is live.
template <typename T>
void randomize_injection(Network<T>& net, std::uint64_t seed, double scale = 0.1);

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

std::string read_file(const std::filesystem::path& path);

}  // namespace iir::testing
