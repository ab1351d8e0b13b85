#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace xfrn {

// Vocabulary-driven tokenizer.
//
// whitespace: text splits on spaces; '\n' is always its own piece. Each piece
//             must be a vocabulary entry (or maps to the unknown token).
// greedy:     longest-match over the vocabulary after replacing spaces with
//             the configured space marker ("▁" for SentencePiece vocabularies,
//             "Ġ" for byte-level BPE ones). Unmatched bytes fall back to
//             "<0xHH>" tokens when present, else to the unknown token.
class Tokenizer {
 public:
  enum class Mode { whitespace, greedy };

  struct Options {
    Mode mode = Mode::whitespace;
    std::string space_marker = "\xE2\x96\x81";  // U+2581
    bool add_prefix_space = true;
    std::optional<std::string> bos_token;
    std::optional<std::string> eos_token;
    std::optional<std::string> unk_token = "<unk>";
  };

  Tokenizer() = default;
  Tokenizer(std::vector<std::string> vocab, Options options);

  // Vocabulary file: {"tokens": [...], "mode": "greedy", "space_marker": "▁", ...}
  static Tokenizer load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  static Tokenizer from_json(std::string_view text);
  std::string to_json() const;

  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

  int size() const { return static_cast<int>(vocab_.size()); }
  const std::string& token(int id) const { return vocab_.at(static_cast<std::size_t>(id)); }
  std::optional<int> find(std::string_view token) const;

  std::optional<int> eos_id() const { return eos_; }
  std::optional<int> newline_id() const { return newline_; }
  const Options& options() const { return options_; }

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, int> ids_;
  Options options_;
  std::size_t max_token_bytes_ = 0;
  std::optional<int> bos_, eos_, unk_, newline_;
};

}  // namespace xfrn
