#pragma once

// Dense-matrix brute-force comparisons over a grid of small shapes.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace stbl::cli {

struct OracleResult {
  std::string name;
  std::size_t cases = 0;
  std::size_t failures = 0;
  double max_error = 0.0;
  double tolerance = 0.0;
};

std::vector<OracleResult> run_oracles(std::uint64_t seed, std::size_t instances);
void write_oracles(std::ostream& out, const std::vector<OracleResult>& results);

}  // namespace stbl::cli
