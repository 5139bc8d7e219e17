// Picks 2 of 3 candidate models from per-sample probabilities and features.
#include <cstdio>

#include "mmq/quantifier.hpp"

using namespace mmq;

int main() {
  std::vector<QuantifyRecord> records = {
      {"a", {{0.9f, {1, 0, 0}}, {0.8f, {1, 0.1f, 0}}, {0.6f, {0, 1, 0}}}},
      {"b", {{0.7f, {0, 1, 1}}, {0.9f, {0, 1, 0.9f}}, {0.5f, {1, 0, 0}}}},
  };
  FuseConfig cfg;
  cfg.gamma = 0.5;
  cfg.n = 2;
  const auto r = quantify(records, 3, cfg);
  for (const auto& s : r.scores)
    std::printf("model %zu  s_p %.3f  div %.3f  fuse %.3f%s\n", s.index, s.sum_sp, s.sum_diversity, s.sum_fuse,
                s.selected ? "  *" : "");
}
