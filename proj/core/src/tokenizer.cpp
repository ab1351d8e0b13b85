#include "xfrn/tokenizer.hpp"

#include "json_util.hpp"
#include "xfrn/error.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iterator>

namespace xfrn {

namespace {

std::optional<int> lookup(const std::unordered_map<std::string, int>& ids, const std::optional<std::string>& tok) {
  if (!tok) return std::nullopt;
  auto it = ids.find(*tok);
  if (it == ids.end()) return std::nullopt;
  return it->second;
}

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  if (from.empty()) return;
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

}  // namespace

Tokenizer::Tokenizer(std::vector<std::string> vocab, Options options)
    : vocab_(std::move(vocab)), options_(std::move(options)) {
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    if (!ids_.emplace(vocab_[i], static_cast<int>(i)).second) {
      throw DataError("tokenizer: duplicate vocabulary entry '" + vocab_[i] + "'");
    }
    max_token_bytes_ = std::max(max_token_bytes_, vocab_[i].size());
  }
  bos_ = lookup(ids_, options_.bos_token);
  eos_ = lookup(ids_, options_.eos_token);
  unk_ = lookup(ids_, options_.unk_token);
  newline_ = lookup(ids_, std::string("\n"));
  if (!newline_ && options_.mode == Mode::greedy) newline_ = lookup(ids_, std::string("<0x0A>"));
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("tokenizer file '" + path.string() + "' not found");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return from_json(text);
  } catch (const ConfigError& e) {
    throw ConfigError("tokenizer file '" + path.string() + "': " + e.what());
  }
}

Tokenizer Tokenizer::from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(e.what());
  }
  Options o;
  const auto mode = j.value("mode", "whitespace");
  if (mode == "whitespace") o.mode = Mode::whitespace;
  else if (mode == "greedy") o.mode = Mode::greedy;
  else throw ConfigError("tokenizer mode '" + mode + "' unknown");
  o.space_marker = j.value("space_marker", o.space_marker);
  o.add_prefix_space = j.value("add_prefix_space", o.add_prefix_space);
  auto opt = [&](const char* key, std::optional<std::string> def) -> std::optional<std::string> {
    if (!j.contains(key)) return def;
    if (j[key].is_null()) return std::nullopt;
    return j[key].get<std::string>();
  };
  o.bos_token = opt("bos_token", std::nullopt);
  o.eos_token = opt("eos_token", std::nullopt);
  o.unk_token = opt("unk_token", o.unk_token);
  if (!j.contains("tokens") || !j["tokens"].is_array()) throw ConfigError("tokenizer has no \"tokens\" array");
  return Tokenizer(j["tokens"].get<std::vector<std::string>>(), o);
}

std::string Tokenizer::to_json() const {
  json j = {{"tokens", vocab_},
            {"mode", options_.mode == Mode::whitespace ? "whitespace" : "greedy"},
            {"space_marker", options_.space_marker},
            {"add_prefix_space", options_.add_prefix_space}};
  j["bos_token"] = options_.bos_token ? json(*options_.bos_token) : json(nullptr);
  j["eos_token"] = options_.eos_token ? json(*options_.eos_token) : json(nullptr);
  j["unk_token"] = options_.unk_token ? json(*options_.unk_token) : json(nullptr);
  return j.dump(1);
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write tokenizer to '" + path.string() + "'");
  out << to_json() << '\n';
}

std::optional<int> Tokenizer::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> out;
  if (bos_) out.push_back(*bos_);

  auto unknown = [&](std::string_view piece) {
    if (!unk_) throw DataError("tokenizer: '" + std::string(piece) + "' is not in the vocabulary");
    out.push_back(*unk_);
  };

  if (options_.mode == Mode::whitespace) {
    std::string piece;
    auto flush = [&] {
      if (piece.empty()) return;
      if (auto id = find(piece)) out.push_back(*id);
      else unknown(piece);
      piece.clear();
    };
    for (char c : text) {
      if (c == ' ' || c == '\t' || c == '\r') {
        flush();
      } else if (c == '\n') {
        flush();
        if (newline_) out.push_back(*newline_);
        else unknown("\\n");
      } else {
        piece.push_back(c);
      }
    }
    flush();
    return out;
  }

  std::string s(text);
  replace_all(s, " ", options_.space_marker);
  if (options_.add_prefix_space && !s.empty() && s.rfind(options_.space_marker, 0) != 0) {
    s.insert(0, options_.space_marker);
  }
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t best = 0;
    int best_id = -1;
    const std::size_t limit = std::min(max_token_bytes_, s.size() - pos);
    for (std::size_t len = limit; len > 0; --len) {
      auto it = ids_.find(s.substr(pos, len));
      if (it != ids_.end()) {
        best = len;
        best_id = it->second;
        break;
      }
    }
    if (best_id >= 0) {
      out.push_back(best_id);
      pos += best;
      continue;
    }
    char hex[8];
    std::snprintf(hex, sizeof hex, "<0x%02X>", static_cast<unsigned char>(s[pos]));
    if (auto id = find(hex)) out.push_back(*id);
    else unknown(s.substr(pos, 1));
    ++pos;
  }
  return out;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::string out;
  if (options_.mode == Mode::whitespace) {
    bool line_start = true;
    for (int id : ids) {
      if (bos_ && id == *bos_) continue;
      const auto& tok = token(id);
      if (tok == "\n") {
        out += '\n';
        line_start = true;
        continue;
      }
      if (!line_start) out += ' ';
      out += tok;
      line_start = false;
    }
    return out;
  }
  for (int id : ids) {
    if ((bos_ && id == *bos_) || (eos_ && id == *eos_)) continue;
    const auto& tok = token(id);
    unsigned byte = 0;
    if (tok.size() == 6 && tok.rfind("<0x", 0) == 0 && tok.back() == '>' &&
        std::sscanf(tok.c_str(), "<0x%02X>", &byte) == 1) {
      out.push_back(static_cast<char>(byte));
    } else {
      out += tok;
    }
  }
  replace_all(out, options_.space_marker, " ");
  if (options_.add_prefix_space && !out.empty() && out.front() == ' ') out.erase(0, 1);
  return out;
}

}  // namespace xfrn
