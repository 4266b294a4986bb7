#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace volrep::text {

/// Lower-cases, separates punctuation into its own tokens and collapses
/// whitespace within each line. Lines are joined with '\n'; empty lines drop.
std::string normalize(const std::string& text);

/// Word-level vocabulary. Ids 0..4 are reserved for the special tokens.
class Vocabulary {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kBos = 1;
  static constexpr std::int32_t kEos = 2;
  static constexpr std::int32_t kUnk = 3;
  static constexpr std::int32_t kNewline = 4;

  Vocabulary();
  /// Builds from the words of the given texts (normalized), sorted.
  static Vocabulary from_corpus(const std::vector<std::string>& texts);

  /// Tokens of normalize(text); line breaks become kNewline; unknown words kUnk.
  std::vector<std::int32_t> encode(const std::string& text) const;
  std::string decode(const std::vector<std::int32_t>& ids) const;

  std::int32_t id(const std::string& word) const;
  const std::string& word(std::int32_t id) const;
  std::int32_t size() const { return static_cast<std::int32_t>(words_.size()); }

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& doc);

  bool operator==(const Vocabulary& other) const { return words_ == other.words_; }

 private:
  void add(const std::string& w);
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

}  // namespace volrep::text
