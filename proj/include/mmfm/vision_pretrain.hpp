#pragma once

// Desk-scale stand-ins for a pretrained image encoder. Variant A trains
// against captions with a symmetric InfoNCE objective through a throwaway
// bag-of-words text encoder; variant B matches two augmented views against
// an EMA teacher over a small set of prototypes (centered, sharpened
// teacher targets). Only the vision.* parameters are kept.

#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfm/config.hpp"
#include "mmfm/data.hpp"
#include "mmfm/model.hpp"
#include "mmfm/train.hpp"

namespace mmfm {

struct VisionPretrainOptions {
  int steps = 300;
  int batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 17;
  int corpus_size = 4000;
  // contrastive (A)
  double temperature = 0.1;
  int joint_dim = 32;
  // self-distillation (B)
  int prototypes = 32;
  double teacher_temperature = 0.04;
  double student_temperature = 0.1;
  double teacher_momentum = 0.97;
  double center_momentum = 0.9;
  int max_shift = 3;

  nlohmann::json to_json() const;
};

struct VisionPretrainResult {
  ParamStore params;  // vision.* only
  std::vector<double> losses;
};

/// Throws InputError on an empty dataset. steps == 0 returns the
/// initialization drawn from opts.seed.
VisionPretrainResult toy_pretrain_vision(const VisionTowerConfig& cfg, std::span<const Sample> dataset,
                                         const VisionPretrainOptions& opts, const StepCallback& on_step = {});

/// Packs a result as a cacheable checkpoint (stage "vision").
Checkpoint vision_checkpoint(const VisionTowerConfig& cfg, const VisionPretrainResult& result, const VisionPretrainOptions& opts);

}  // namespace mmfm
