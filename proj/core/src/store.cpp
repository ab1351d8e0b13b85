#include "xfrn/store.hpp"

#include "framing.hpp"
#include "json_util.hpp"
#include "xfrn/error.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>

namespace xfrn {

namespace fs = std::filesystem;

namespace {

constexpr CaptureKind kAllKinds[] = {CaptureKind::hidden_state, CaptureKind::pre_mlp,
                                     CaptureKind::attention_out, CaptureKind::mlp_activation};

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json manifest_to_json(const ModelManifest& m) {
  json kinds = json::array();
  for (auto k : m.capture_kinds) kinds.push_back(std::string(to_string(k)));
  return {{"model_id", m.model_id},   {"num_layers", m.num_layers}, {"hidden_dim", m.hidden_dim},
          {"mlp_dim", m.mlp_dim},     {"dtype", m.dtype},           {"capture_kinds", kinds}};
}

ModelManifest manifest_from_json(const json& j) {
  ModelManifest m;
  m.model_id = j.at("model_id").get<std::string>();
  m.num_layers = j.at("num_layers").get<int>();
  m.hidden_dim = j.at("hidden_dim").get<int>();
  m.mlp_dim = j.at("mlp_dim").get<int>();
  m.dtype = j.at("dtype").get<std::string>();
  for (const auto& k : j.at("capture_kinds")) m.capture_kinds.insert(parse_capture_kind(k.get<std::string>()));
  m.validate();
  return m;
}

}  // namespace

namespace detail {

void write_framed(const fs::path& path, const json& header, const fs::path& blob_path) {
  const fs::path tmp = fs::path(path).concat(".partial");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + tmp.string() + "' for writing");
    const std::string text = header.dump();
    out.write(kMagic.data(), static_cast<std::streamsize>(kMagic.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.put('\0');
    if (!blob_path.empty() && fs::file_size(blob_path) > 0) {
      std::ifstream in(blob_path, std::ios::binary);
      out << in.rdbuf();
    }
    out.flush();
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw DataError("short write to '" + tmp.string() + "'");
    }
  }
  fs::rename(tmp, path);
}

fs::path temp_blob_path(const fs::path& path) {
  return fs::path(path).concat(".blob.partial");
}

}  // namespace detail

using detail::write_framed;
using detail::temp_blob_path;

void ModelManifest::validate() const {
  if (num_layers < 2) throw DataError("manifest: num_layers must be >= 2, got " + std::to_string(num_layers));
  if (hidden_dim < 1) throw DataError("manifest: hidden_dim must be >= 1");
  if (mlp_dim < 1) throw DataError("manifest: mlp_dim must be >= 1");
  if (dtype != "f32") throw DataError("manifest: unsupported dtype '" + dtype + "'");
}

int ModelManifest::dim_of(CaptureKind kind) const {
  return kind == CaptureKind::mlp_activation ? mlp_dim : hidden_dim;
}

const VectorF& ActivationRecord::get(CaptureKind kind) const {
  switch (kind) {
    case CaptureKind::hidden_state: return hidden_state;
    case CaptureKind::pre_mlp: return pre_mlp;
    case CaptureKind::attention_out: return attention_out;
    case CaptureKind::mlp_activation: return mlp_activation;
  }
  return hidden_state;
}

VectorF& ActivationRecord::get(CaptureKind kind) {
  return const_cast<VectorF&>(static_cast<const ActivationRecord&>(*this).get(kind));
}

void write_f32_le(std::FILE* out, const float* data, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    if (std::fwrite(data, sizeof(float), count, out) != count) throw DataError("short write of tensor block");
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      auto bits = std::bit_cast<std::uint32_t>(data[i]);
      bits = __builtin_bswap32(bits);
      if (std::fwrite(&bits, 4, 1, out) != 1) throw DataError("short write of tensor block");
    }
  }
}

std::vector<float> read_f32_le(const fs::path& path, std::uint64_t offset, std::uint64_t bytes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::vector<float> out(bytes / sizeof(float));
  in.seekg(static_cast<std::streamoff>(offset));
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw DataError("truncated tensor block in '" + path.string() + "'");
  if constexpr (std::endian::native != std::endian::little) {
    for (auto& f : out) f = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(f)));
  }
  return out;
}

FramedFile read_framing(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::string magic(kMagic.size(), '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!in || magic != kMagic) throw DataError("'" + path.string() + "' is not an XFRN1 file (bad magic)");
  FramedFile f;
  std::getline(in, f.header_json, '\0');
  if (!in) throw DataError("'" + path.string() + "': header is not NUL-terminated");
  f.data_start = kMagic.size() + f.header_json.size() + 1;
  const auto total = fs::file_size(path);
  f.data_size = total - f.data_start;
  return f;
}

// ---------------------------------------------------------------------------

CaptureWriter::CaptureWriter(ModelManifest manifest, fs::path path)
    : manifest_(std::move(manifest)), path_(std::move(path)), blob_path_(temp_blob_path(path_)) {
  manifest_.validate();
  if (!path_.parent_path().empty()) fs::create_directories(path_.parent_path());
  blob_ = std::fopen(blob_path_.c_str(), "wb");
  if (!blob_) throw DataError("cannot open '" + blob_path_.string() + "' for writing");
  created_ = utc_now();
}

CaptureWriter::~CaptureWriter() {
  if (blob_) std::fclose(blob_);
  std::error_code ec;
  fs::remove(blob_path_, ec);
}

void CaptureWriter::set_metadata(const std::string& key, const std::string& value) {
  metadata_[key] = value;
}

void CaptureWriter::add_sample(const SampleInfo& info) {
  samples_[info.sample_id] = info;
}

void CaptureWriter::write(const ActivationRecord& record) {
  if (finished_) throw DataError("capture writer already finished");
  if (record.layer < 1 || record.layer > manifest_.num_layers) {
    throw DataError("record '" + record.sample_id + "': layer " + std::to_string(record.layer) +
                    " outside [1, " + std::to_string(manifest_.num_layers) + "]");
  }
  if (!seen_.emplace(record.sample_id, record.layer).second) {
    throw DataError("record '" + record.sample_id + "' layer " + std::to_string(record.layer) +
                    " written twice");
  }
  // Validate everything before touching the payload.
  for (auto kind : manifest_.capture_kinds) {
    const auto& v = record.get(kind);
    if (v.size() != manifest_.dim_of(kind)) {
      seen_.erase({record.sample_id, record.layer});
      throw DataError("record '" + record.sample_id + "': " + std::string(to_string(kind)) + " has length " +
                      std::to_string(v.size()) + ", manifest requires " +
                      std::to_string(manifest_.dim_of(kind)));
    }
  }
  RecordIndex entry{record.sample_id, record.layer, {}};
  for (auto kind : manifest_.capture_kinds) {
    const auto& v = record.get(kind);
    const std::uint64_t bytes = static_cast<std::uint64_t>(v.size()) * sizeof(float);
    write_f32_le(blob_, v.data(), static_cast<std::size_t>(v.size()));
    entry.blocks[kind] = {written_, bytes};
    written_ += bytes;
  }
  if (!samples_.count(record.sample_id)) {
    samples_[record.sample_id] = SampleInfo{record.sample_id, record.language, -1, ""};
  } else if (samples_[record.sample_id].language.empty()) {
    samples_[record.sample_id].language = record.language;
  }
  index_.push_back(std::move(entry));
}

CaptureRun CaptureWriter::finish() {
  if (finished_) throw DataError("capture writer already finished");
  if (std::fflush(blob_) != 0) throw DataError("flush failed for '" + blob_path_.string() + "'");
  std::fclose(blob_);
  blob_ = nullptr;

  json records = json::array();
  for (const auto& r : index_) {
    json blocks = json::object();
    for (const auto& [kind, ref] : r.blocks) blocks[std::string(to_string(kind))] = {ref.offset, ref.length};
    records.push_back({{"sample_id", r.sample_id}, {"layer", r.layer}, {"blocks", blocks}});
  }
  json samples = json::array();
  for (const auto& [id, s] : samples_) {
    samples.push_back({{"sample_id", id}, {"language", s.language}, {"pair_index", s.pair_index}, {"split", s.split}});
  }
  json header = {{"format", "XFRN1"},     {"kind", "capture"},         {"created", created_},
                 {"manifest", manifest_to_json(manifest_)}, {"metadata", metadata_},
                 {"samples", samples},    {"records", records},        {"data_bytes", written_}};
  write_framed(path_, header, blob_path_);
  finished_ = true;
  return CaptureRun::open(path_);
}

CaptureRun write_capture_run(const ModelManifest& manifest, const std::vector<ActivationRecord>& records,
                             const fs::path& path) {
  CaptureWriter writer(manifest, path);
  for (const auto& r : records) writer.write(r);
  return writer.finish();
}

// ---------------------------------------------------------------------------

CaptureRun CaptureRun::open(const fs::path& path) {
  const FramedFile framed = read_framing(path);
  json header;
  try {
    header = json::parse(framed.header_json);
  } catch (const json::exception& e) {
    throw DataError("'" + path.string() + "': malformed header: " + e.what());
  }
  if (header.value("kind", "") != "capture") throw DataError("'" + path.string() + "' is not a capture run");

  CaptureRun run;
  run.path_ = path;
  run.data_start_ = framed.data_start;
  run.data_size_ = framed.data_size;
  try {
    run.manifest_ = manifest_from_json(header.at("manifest"));
    run.created_ = header.value("created", "");
    run.metadata_ = header.value("metadata", std::map<std::string, std::string>{});
    for (const auto& s : header.at("samples")) {
      SampleInfo info{s.at("sample_id").get<std::string>(), s.at("language").get<std::string>(),
                      s.at("pair_index").get<int>(), s.at("split").get<std::string>()};
      run.samples_[info.sample_id] = info;
    }
    for (const auto& r : header.at("records")) {
      RecordIndex entry{r.at("sample_id").get<std::string>(), r.at("layer").get<int>(), {}};
      for (const auto& [name, ref] : r.at("blocks").items()) {
        entry.blocks[parse_capture_kind(name)] = {ref.at(0).get<std::uint64_t>(), ref.at(1).get<std::uint64_t>()};
      }
      run.lookup_[{entry.sample_id, entry.layer}] = run.index_.size();
      run.index_.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    throw DataError("'" + path.string() + "': malformed header: " + e.what());
  }
  run.verify_tiling();
  return run;
}

void CaptureRun::verify_tiling() const {
  std::vector<BlockRef> blocks;
  for (const auto& r : index_)
    for (const auto& [kind, ref] : r.blocks) blocks.push_back(ref);
  std::sort(blocks.begin(), blocks.end(), [](const BlockRef& a, const BlockRef& b) { return a.offset < b.offset; });
  std::uint64_t cursor = 0;
  for (const auto& b : blocks) {
    if (b.offset != cursor) throw DataError("'" + path_.string() + "': tensor blocks leave a gap or overlap at byte " + std::to_string(cursor));
    cursor += b.length;
  }
  if (cursor != data_size_) {
    throw DataError("'" + path_.string() + "': tensor region is " + std::to_string(data_size_) +
                    " bytes but the index covers " + std::to_string(cursor));
  }
}

std::vector<float> CaptureRun::read_block(const BlockRef& ref) const {
  return read_f32_le(path_, data_start_ + ref.offset, ref.length);
}

ActivationRecord CaptureRun::read_record(const std::string& sample_id, int layer) const {
  auto it = lookup_.find({sample_id, layer});
  if (it == lookup_.end()) {
    throw DataError("no record for sample '" + sample_id + "' at layer " + std::to_string(layer));
  }
  const auto& entry = index_[it->second];
  ActivationRecord rec;
  rec.sample_id = sample_id;
  rec.layer = layer;
  if (auto s = samples_.find(sample_id); s != samples_.end()) rec.language = s->second.language;
  std::ifstream in(path_, std::ios::binary);
  for (const auto& [kind, ref] : entry.blocks) {
    auto data = read_block(ref);
    rec.get(kind) = Eigen::Map<VectorF>(data.data(), static_cast<Eigen::Index>(data.size()));
  }
  return rec;
}

Slice CaptureRun::load_slice(int layer, CaptureKind kind, const std::optional<std::string>& language,
                             const std::optional<std::string>& split) const {
  if (layer < 1 || layer > manifest_.num_layers) {
    throw DataError("layer " + std::to_string(layer) + " out of range [1, " +
                    std::to_string(manifest_.num_layers) + "] for run '" + path_.string() + "'");
  }
  if (!manifest_.capture_kinds.count(kind)) {
    throw DataError("capture kind '" + std::string(to_string(kind)) + "' not present in run '" + path_.string() + "'");
  }
  std::vector<const RecordIndex*> hits;
  for (const auto& r : index_) {
    if (r.layer != layer) continue;
    auto s = samples_.find(r.sample_id);
    if (language && (s == samples_.end() || s->second.language != *language)) continue;
    if (split && (s == samples_.end() || s->second.split != *split)) continue;
    hits.push_back(&r);
  }
  std::sort(hits.begin(), hits.end(), [](auto* a, auto* b) { return a->sample_id < b->sample_id; });

  const int dim = manifest_.dim_of(kind);
  Slice slice;
  slice.rows.resize(static_cast<Eigen::Index>(hits.size()), dim);
  std::ifstream in(path_, std::ios::binary);
  std::vector<float> buffer(static_cast<std::size_t>(dim));
  for (std::size_t i = 0; i < hits.size(); ++i) {
    const auto& ref = hits[i]->blocks.at(kind);
    in.seekg(static_cast<std::streamoff>(data_start_ + ref.offset));
    in.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(ref.length));
    if (!in) throw DataError("truncated tensor block in '" + path_.string() + "'");
    if constexpr (std::endian::native != std::endian::little) {
      for (auto& f : buffer) f = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(f)));
    }
    slice.rows.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXf>(buffer.data(), dim);
    slice.sample_ids.push_back(hits[i]->sample_id);
  }
  return slice;
}

std::set<std::string> CaptureRun::languages() const {
  std::set<std::string> out;
  for (const auto& [id, s] : samples_) out.insert(s.language);
  return out;
}

CaptureRun::Aligned CaptureRun::load_aligned(int layer, CaptureKind kind, const std::string& language_a,
                                             const std::string& language_b,
                                             const std::optional<std::string>& split) const {
  const Slice a = load_slice(layer, kind, language_a, split);
  const Slice b = load_slice(layer, kind, language_b, split);
  auto by_pair = [&](const Slice& sl) {
    std::map<int, Eigen::Index> out;
    for (std::size_t i = 0; i < sl.sample_ids.size(); ++i) {
      const int p = samples_.at(sl.sample_ids[i]).pair_index;
      if (p >= 0) out.emplace(p, static_cast<Eigen::Index>(i));
    }
    return out;
  };
  const auto ia = by_pair(a);
  const auto ib = by_pair(b);
  Aligned out;
  for (const auto& [p, row] : ia)
    if (ib.count(p)) out.pair_indices.push_back(p);
  const Eigen::Index n = static_cast<Eigen::Index>(out.pair_indices.size());
  out.first.resize(n, a.rows.cols());
  out.second.resize(n, b.rows.cols());
  for (Eigen::Index k = 0; k < n; ++k) {
    const int p = out.pair_indices[static_cast<std::size_t>(k)];
    out.first.row(k) = a.rows.row(ia.at(p));
    out.second.row(k) = b.rows.row(ib.at(p));
  }
  return out;
}

std::set<int> CaptureRun::pair_indices(const std::string& split) const {
  std::set<int> out;
  for (const auto& [id, s] : samples_)
    if (s.split == split && s.pair_index >= 0) out.insert(s.pair_index);
  return out;
}

// ---------------------------------------------------------------------------

void write_value_vectors(const ValueVectorTable& table, const fs::path& path) {
  if (table.layers.empty()) throw DataError("value-vector table is empty");
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  const fs::path blob_path = temp_blob_path(path);
  json blocks = json::array();
  {
    std::FILE* blob = std::fopen(blob_path.c_str(), "wb");
    if (!blob) throw DataError("cannot open '" + blob_path.string() + "'");
    std::uint64_t offset = 0;
    for (int l = 0; l < table.num_layers(); ++l) {
      const auto& m = table.layers[static_cast<std::size_t>(l)];
      if (m.rows() != table.mlp_dim() || m.cols() != table.hidden_dim()) {
        std::fclose(blob);
        fs::remove(blob_path);
        throw DataError("value-vector layer " + std::to_string(l + 1) + " has inconsistent shape");
      }
      const std::uint64_t bytes = static_cast<std::uint64_t>(m.size()) * sizeof(float);
      write_f32_le(blob, m.data(), static_cast<std::size_t>(m.size()));
      blocks.push_back({{"layer", l + 1}, {"offset", offset}, {"length", bytes}});
      offset += bytes;
    }
    std::fclose(blob);
  }
  json header = {{"format", "XFRN1"},
                 {"kind", "values"},
                 {"model_id", table.model_id},
                 {"num_layers", table.num_layers()},
                 {"mlp_dim", table.mlp_dim()},
                 {"hidden_dim", table.hidden_dim()},
                 {"blocks", blocks}};
  try {
    write_framed(path, header, blob_path);
  } catch (...) {
    fs::remove(blob_path);
    throw;
  }
  fs::remove(blob_path);
}

ValueVectorTable read_value_vectors(const fs::path& path) {
  const FramedFile framed = read_framing(path);
  json header;
  try {
    header = json::parse(framed.header_json);
  } catch (const json::exception& e) {
    throw DataError("'" + path.string() + "': malformed header: " + e.what());
  }
  if (header.value("kind", "") != "values") throw DataError("'" + path.string() + "' is not a value-vector file");
  ValueVectorTable table;
  table.model_id = header.at("model_id").get<std::string>();
  const int rows = header.at("mlp_dim").get<int>();
  const int cols = header.at("hidden_dim").get<int>();
  for (const auto& b : header.at("blocks")) {
    auto data = read_f32_le(path, framed.data_start + b.at("offset").get<std::uint64_t>(),
                            b.at("length").get<std::uint64_t>());
    if (data.size() != static_cast<std::size_t>(rows) * cols) throw DataError("'" + path.string() + "': bad block size");
    table.layers.emplace_back(Eigen::Map<RowMatrixF>(data.data(), rows, cols));
  }
  return table;
}

}  // namespace xfrn
