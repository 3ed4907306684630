#pragma once

// Published results for the eight model rows of the reference results table
// and the cells it highlights as the best in each column.

#include <optional>
#include <utility>
#include <vector>

#include "mmfm/analysis.hpp"

namespace table1 {

inline mmfm::TableLayout layout() {
  return {{"Language", "Vision", "Pretrain"},
          {"GQA", "MME Cog.", "MME Per.", "MM-Vet", "POPE Acc.", "POPE F1", "VQAv2", "MMVP", "ScienceQA Img."},
          {3, 0, 0, 1, 3, 3, 1, 3, 3}};
}

inline std::vector<mmfm::TableRow> rows() {
  return {
      {{"2b", "CLIP", "Yes"}, {0.531, 236, 1130, 17.7, 0.850, 0.839, 70.7, 0.287, 0.564}},
      {{"2b", "CLIP", "No"}, {0.481, 249, 935, 13.1, 0.784, 0.762, 61.7, 0.180, 0.549}},
      {{"2b", "DinoV2", "Yes"}, {0.587, 307, 1133, 19.1, 0.853, 0.838, 71.4, 0.227, 0.555}},
      {{"2b", "DinoV2", "No"}, {0.501, 309, 959, 14.5, 0.793, 0.772, 61.7, 0.180, 0.568}},
      {{"7b", "CLIP", "Yes"}, {0.472, 254, 895, 18.2, 0.848, 0.829, 68.7, 0.327, 0.625}},
      {{"7b", "CLIP", "No"}, {0.472, 278, 857, 19.1, 0.782, 0.734, 65.1, 0.240, 0.636}},
      {{"7b", "DinoV2", "Yes"}, {0.519, 257, 1021, 14.3, 0.794, 0.762, 65.2, 0.327, 0.628}},
      {{"7b", "DinoV2", "No"}, {0.459, 226, 771, 12.2, 0.693, 0.567, 57.4, 0.267, 0.598}},
  };
}

/// (row, column) cells the published table highlights.
inline std::vector<std::pair<int, int>> published_highlights() {
  return {{2, 0}, {3, 1}, {2, 2}, {2, 3}, {2, 4}, {0, 5}, {2, 6}, {4, 7}, {6, 7}, {5, 8}};
}

}  // namespace table1
