#pragma once

// Two-stage training recipe: stage 1 trains only the connector on captions
// with both towers frozen; stage 2 tunes connector and language tower on the
// instruction mixture, vision still frozen. Plus checkpoints, the 8-cell
// ablation matrix and throughput measurement.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfm/config.hpp"
#include "mmfm/data.hpp"
#include "mmfm/model.hpp"

namespace mmfm {

struct Hyperparams {
  double lr_stage1 = 1e-3;
  double lr_stage2 = 3e-4;
  int batch_size = 32;
  int steps_stage1 = 2000;
  int steps_stage2 = 4000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // decoupled, matrices only
  double grad_clip = 1.0;      // global L2 norm; 0 disables
};

struct Seeds {
  std::uint64_t init = 17;
  std::uint64_t data = 17;
  std::uint64_t order = 17;
};

struct RunManifest {
  LmPreset lm = LmPreset::S;
  VisionVariant vision = VisionVariant::A;
  bool pretrain_connector = true;
  int vocab_size = 512;
  Seeds seeds;
  Hyperparams hp;
  int pretrain_samples = 20000;
  int instruct_samples = 20000;
  std::string mix = "attribute=0.2,caption=0.2,count=0.2,existence=0.2,spatial=0.2";
  std::string vision_params_hash;  // identity of the cached pretrained tower

  ModelConfig model_config() const;
  /// Canonical JSON of every field except run_id, sorted keys.
  nlohmann::json fields_json() const;
  /// git blob hash of fields_json().dump().
  std::string config_hash() const;
  /// e.g. "S-A-pt-V512-ab8e7c31cf"; a pure function of the other fields.
  std::string run_id() const;
  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

/// Design flags as the analysis consumes them; baseline is all zero.
struct DesignFlags {
  int skip_pretrain = 0;
  int dino_like = 0;
  int large_lm = 0;
};
DesignFlags design_flags(const RunManifest& m);

// ---------------------------------------------------------------------------
// Checkpoints

enum class Stage { Init, Stage1, Stage2, Vision };
std::string to_string(Stage s);
Stage parse_stage(const std::string& s);

struct AdamState {
  ParamStore m;
  ParamStore v;
  long long t = 0;
};

struct Checkpoint {
  nlohmann::json manifest;  // RunManifest JSON, or free-form for vision checkpoints
  Stage stage = Stage::Init;
  ModelConfig config;
  ParamStore params;
  AdamState optimizer;
  long long step = 0;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

/// "MMFM", u16 version, u32 header length, header JSON, u32 array count,
/// then per array: u16 name length, name, u8 dtype (1 = f32), u8 rank,
/// u32 dims, payload; finally "END!". Little-endian throughout.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Whole-file parse before anything is returned: a truncated or corrupted
/// file raises FormatError and yields nothing.
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Training

/// Vision-tower outputs for every sample of a corpus, g²×d_v each. The tower
/// is frozen in both stages so features are computed once.
struct FeatureBank {
  int tokens = 0;
  int width = 0;
  std::vector<float> data;
  std::span<const float> of(std::size_t i) const {
    const std::size_t n = static_cast<std::size_t>(tokens) * width;
    return {data.data() + i * n, n};
  }
};
FeatureBank encode_corpus(const MultimodalModel& model, std::span<const Sample> corpus);

/// Loss targets of one sequence: rows predicting the answer and <eoa>.
struct Supervision {
  std::vector<int> rows;     // text positions
  std::vector<int> targets;  // token ids
};
Supervision answer_supervision(std::span<const int> sequence);

struct StepInfo {
  int stage = 0;
  int step = 0;
  double loss = 0;
  double lr = 0;
  double grad_norm = 0;
};
using StepCallback = std::function<void(const StepInfo&)>;

struct StageOptions {
  int stage = 2;  // 1 or 2, selects lr/steps and the order stream
  double lr = 0;
  int steps = 0;
  int batch_size = 32;
  std::uint64_t order_seed = 17;
  int schedule_steps = 0;  // cosine horizon; 0 means `steps`
};

class AdamW {
 public:
  explicit AdamW(const Hyperparams& hp) : hp_(hp) {}
  AdamW(const Hyperparams& hp, AdamState state) : hp_(hp), state_(std::move(state)) {}
  /// One update of every parameter that has a gradient; returns the global
  /// gradient norm before clipping.
  double step(ParamStore& params, const std::map<std::string, std::vector<float>>& grads, double lr);
  const AdamState& state() const { return state_; }

 private:
  Hyperparams hp_;
  AdamState state_;
};

/// Cosine decay from `lr` at step 0 towards 0 at `total`.
double cosine_lr(double lr, int step, int total);

/// Sample indices of batch `step`: successive epochs of a seeded permutation.
std::vector<int> batch_indices(std::size_t corpus_size, int batch_size, int step, std::uint64_t order_seed, int stage);

/// Mean answer-token loss of a batch and the gradients of trainable params.
double batch_loss_and_grads(const MultimodalModel& model, std::span<const Sample* const> batch,
                            std::span<const std::span<const float>> features,
                            std::map<std::string, std::vector<float>>* grads);

/// Runs `opts.steps` AdamW steps on the model's trainable parameters.
AdamState train_steps(MultimodalModel& model, std::span<const Sample> corpus, const FeatureBank& features,
                      const Hyperparams& hp, const StageOptions& opts, const StepCallback& on_step = {});

/// Connector-only training on a caption corpus. Throws InputError on
/// non-caption samples, ContractError if a frozen hash moves.
Checkpoint stage1_pretrain_connector(MultimodalModel& model, std::span<const Sample> corpus, const FeatureBank& features,
                                     const RunManifest& manifest, const StepCallback& on_step = {});

/// Connector + language tower on the instruction mixture, starting from
/// `from` (Init when manifest.pretrain_connector is false, else Stage1).
Checkpoint stage2_finetune(MultimodalModel& model, std::span<const Sample> corpus, const FeatureBank& features,
                           const RunManifest& manifest, const Checkpoint& from, const StepCallback& on_step = {});

// ---------------------------------------------------------------------------
// Vision cache and the ablation matrix

std::filesystem::path vision_cache_path(const std::filesystem::path& runs_root, VisionVariant v);
/// Loads the cached tower, or throws InputError telling the caller to run
/// pretrain-vision first.
Checkpoint load_vision_cache(const std::filesystem::path& runs_root, VisionVariant v);

struct Cell {
  LmPreset lm;
  VisionVariant vision;
  bool pretrain_connector;
};
/// {S,L} × {A,B} × {pretrain, skip} in canonical order.
std::vector<Cell> canonical_cells();
RunManifest manifest_for(const RunManifest& base, const Cell& cell);

struct RunResult {
  std::string run_id;
  std::filesystem::path dir;
  bool trained = false;  // false when the run was already complete
  long long steps = 0;   // optimizer steps executed by this call
};

/// Trains one cell into runs_root/<run_id>/, skipping finished stages.
/// An empty vision_params_hash is filled in from the cache.
RunResult run_cell(const std::filesystem::path& runs_root, RunManifest manifest, const StepCallback& progress = {});

/// Runs every requested cell (all 8 by default), skipping completed ones, and
/// rewrites runs_root/index.json atomically.
std::vector<RunResult> run_ablation_matrix(const std::filesystem::path& runs_root, const RunManifest& base,
                                           const std::vector<Cell>& cells = canonical_cells(),
                                           const StepCallback& progress = {});
/// Rescans runs_root for run directories and atomically rewrites index.json.
void write_run_index(const std::filesystem::path& runs_root);

/// Loads runs_root/<run_id>/stage2.ckpt (or the latest stage present).
Checkpoint load_run(const std::filesystem::path& run_dir);

// ---------------------------------------------------------------------------
// Throughput

struct Workload {
  int batch_size = 8;
  int warmup_steps = 5;
  int measured_steps = 50;
  int generate_items = 20;
  int generate_tokens = 8;
  std::uint64_t seed = 17;
};

struct ThroughputReport {
  std::string preset;
  double steps_per_second = 0;
  double tokens_per_second = 0;
  double wall_seconds = 0;
  std::string hardware;
  nlohmann::json to_json() const;
};

std::string hardware_description();
ThroughputReport measure_throughput(LmPreset preset, const Workload& workload, VisionVariant vision = VisionVariant::A,
                                    int vocab_size = 512);

}  // namespace mmfm
