#pragma once

// Independent answer checker: re-derives the gold answer of a sample from the
// question text and the scene object list alone.

#include <algorithm>
#include <cstdlib>
#include <sstream>
#include <string>
#include <vector>

#include "mmfm/data.hpp"

namespace oracle {

inline std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

struct Obj {
  std::string shape, color;
  int row, col;
};

inline std::vector<Obj> objects(const mmfm::Scene& scene) {
  std::vector<Obj> out;
  for (const auto& o : scene.objects)
    out.push_back({std::string(mmfm::name_of(o.shape)), std::string(mmfm::name_of(o.color)), o.row, o.col});
  return out;
}

inline std::string singular(const std::string& plural) { return plural.substr(0, plural.size() - 1); }

/// Returns the expected answer, or "?" when the question is not recognized.
inline std::string answer(const std::string& question, const mmfm::Scene& scene) {
  const auto w = words(question);
  const auto objs = objects(scene);
  if (question == "describe the image .") {
    auto sorted = objs;
    std::sort(sorted.begin(), sorted.end(), [](const Obj& a, const Obj& b) { return a.row * 4 + a.col < b.row * 4 + b.col; });
    std::string out;
    for (const auto& o : sorted) out += (out.empty() ? "" : " and ") + std::string("a ") + o.color + " " + o.shape;
    return out;
  }
  if (w.size() == 6 && w[0] == "is" && w[1] == "there") {
    for (const auto& o : objs)
      if (o.color == w[3] && o.shape == w[4]) return "yes";
    return "no";
  }
  if (w.size() == 6 && w[0] == "what" && w[1] == "color") {
    std::string found;
    int n = 0;
    for (const auto& o : objs)
      if (o.shape == w[4]) ++n, found = o.color;
    return n == 1 ? found : "?";
  }
  if (w.size() >= 4 && w[0] == "how" && w[1] == "many") {
    int n = 0;
    if (w[2] == "objects") {
      n = static_cast<int>(objs.size());
    } else if (w[3] == "objects") {
      for (const auto& o : objs) n += o.color == w[2];
    } else {
      for (const auto& o : objs) n += o.shape == singular(w[2]);
    }
    return std::to_string(n);
  }
  if (w.size() == 11 && w[0] == "where") {
    const Obj *a = nullptr, *b = nullptr;
    for (const auto& o : objs) {
      if (o.color == w[3] && o.shape == w[4]) a = &o;
      if (o.color == w[8] && o.shape == w[9]) b = &o;
    }
    if (!a || !b) return "?";
    const int dr = a->row - b->row, dc = a->col - b->col;
    if (std::abs(dr) == std::abs(dc)) return "?";
    if (std::abs(dc) > std::abs(dr)) return dc < 0 ? "left" : "right";
    return dr < 0 ? "above" : "below";
  }
  return "?";
}

}  // namespace oracle
