#pragma once

// Capture-run and value-vector files.
//
// Both share one framing: the magic bytes "XFRN1\n", a UTF-8 JSON header
// terminated by a single 0x00 byte, then a tensor region of contiguous
// little-endian f32 blocks. Block offsets in the header are byte offsets
// relative to the start of the tensor region, and the blocks tile that region
// exactly. Captures are for the final token of each input only.

#include "xfrn/types.hpp"

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace xfrn {

inline constexpr std::string_view kMagic = "XFRN1\n";

struct ModelManifest {
  std::string model_id;
  int num_layers = 0;
  int hidden_dim = 0;
  int mlp_dim = 0;
  std::string dtype = "f32";
  std::set<CaptureKind> capture_kinds;

  void validate() const;
  int dim_of(CaptureKind kind) const;
  bool operator==(const ModelManifest&) const = default;
};

struct ActivationRecord {
  std::string sample_id;
  std::string language;
  int layer = 0;
  // Absent kinds are empty vectors.
  VectorF hidden_state;
  VectorF pre_mlp;
  VectorF attention_out;
  VectorF mlp_activation;

  const VectorF& get(CaptureKind kind) const;
  VectorF& get(CaptureKind kind);
};

// Per-sample metadata carried in the header. pair_index links translations of
// the same sentence; split is "train" or "test".
struct SampleInfo {
  std::string sample_id;
  std::string language;
  int pair_index = -1;
  std::string split;
};

// Rows of the down projection per layer: layers[l-1] is d_m x d.
struct ValueVectorTable {
  std::string model_id;
  std::vector<RowMatrixF> layers;

  int num_layers() const { return static_cast<int>(layers.size()); }
  int mlp_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.front().rows()); }
  int hidden_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.front().cols()); }
};

struct LatentCentroid {
  enum class Space { language, shared };

  int layer = 0;
  Space space = Space::language;
  // language code, or "en+L2" for the shared space
  std::string tag;
  Vector vector;
  int sample_count = 0;
};

struct NeuronScoreRow {
  NeuronId neuron;
  double score = 0.0;
  // "to_shared" or "to_language:<code>"
  std::string target;
  int rank = 0;
};

// Slice rows are ordered by ascending sample_id.
struct Slice {
  std::vector<std::string> sample_ids;
  RowMatrixF rows;
};

struct BlockRef {
  std::uint64_t offset = 0;
  std::uint64_t length = 0;  // bytes
};

struct RecordIndex {
  std::string sample_id;
  int layer = 0;
  std::map<CaptureKind, BlockRef> blocks;
};

class CaptureRun;
using RunHandle = CaptureRun;

// Single-writer builder for a capture-run file. Records are validated against
// the manifest as they arrive; payload goes to a temporary file and the final
// file only appears (atomically, via rename) when finish() succeeds.
class CaptureWriter {
 public:
  CaptureWriter(ModelManifest manifest, std::filesystem::path path);
  ~CaptureWriter();
  CaptureWriter(const CaptureWriter&) = delete;
  CaptureWriter& operator=(const CaptureWriter&) = delete;

  void set_metadata(const std::string& key, const std::string& value);
  void add_sample(const SampleInfo& info);
  void write(const ActivationRecord& record);
  CaptureRun finish();

  // Fixed timestamp for reproducible files; defaults to wall-clock time.
  void set_created(std::string created) { created_ = std::move(created); }

 private:
  ModelManifest manifest_;
  std::filesystem::path path_;
  std::filesystem::path blob_path_;
  std::FILE* blob_ = nullptr;
  std::uint64_t written_ = 0;
  std::vector<RecordIndex> index_;
  std::set<std::pair<std::string, int>> seen_;
  std::map<std::string, SampleInfo> samples_;
  std::map<std::string, std::string> metadata_;
  std::string created_;
  bool finished_ = false;
};

class CaptureRun {
 public:
  static CaptureRun open(const std::filesystem::path& path);

  const ModelManifest& manifest() const { return manifest_; }
  const std::vector<RecordIndex>& records() const { return index_; }
  const std::map<std::string, SampleInfo>& samples() const { return samples_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }
  const std::filesystem::path& path() const { return path_; }
  const std::string& created() const { return created_; }

  ActivationRecord read_record(const std::string& sample_id, int layer) const;

  // n x dim matrix for one layer and kind, optionally restricted to one
  // language and/or split.
  Slice load_slice(int layer, CaptureKind kind, const std::optional<std::string>& language = {},
                   const std::optional<std::string>& split = {}) const;

  // Rows of two languages matched on pair_index (ascending); pairs missing
  // either side are left out.
  struct Aligned {
    std::vector<int> pair_indices;
    RowMatrixF first;
    RowMatrixF second;
  };
  Aligned load_aligned(int layer, CaptureKind kind, const std::string& language_a, const std::string& language_b,
                       const std::optional<std::string>& split = {}) const;

  std::set<std::string> languages() const;
  std::set<int> pair_indices(const std::string& split) const;

  // Checks that the block index tiles the tensor region with no gap or overlap.
  void verify_tiling() const;

 private:
  std::vector<float> read_block(const BlockRef& ref) const;

  std::filesystem::path path_;
  ModelManifest manifest_;
  std::vector<RecordIndex> index_;
  std::map<std::pair<std::string, int>, std::size_t> lookup_;
  std::map<std::string, SampleInfo> samples_;
  std::map<std::string, std::string> metadata_;
  std::string created_;
  std::uint64_t data_start_ = 0;
  std::uint64_t data_size_ = 0;
};

CaptureRun write_capture_run(const ModelManifest& manifest,
                             const std::vector<ActivationRecord>& records,
                             const std::filesystem::path& path);

void write_value_vectors(const ValueVectorTable& table, const std::filesystem::path& path);
ValueVectorTable read_value_vectors(const std::filesystem::path& path);

// Raw framing helpers shared with the weights file.
struct FramedFile {
  std::string header_json;
  std::uint64_t data_start = 0;
  std::uint64_t data_size = 0;
};
FramedFile read_framing(const std::filesystem::path& path);
void write_f32_le(std::FILE* out, const float* data, std::size_t count);
std::vector<float> read_f32_le(const std::filesystem::path& path, std::uint64_t offset,
                               std::uint64_t bytes);

}  // namespace xfrn
