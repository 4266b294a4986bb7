#include "volrep/vocabulary.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>
#include <stdexcept>

namespace volrep::text {

namespace {

const char* const kSpecials[] = {"<pad>", "<bos>", "<eos>", "<unk>", "<nl>"};

bool is_punct(char c) { return c == '.' || c == ',' || c == ':' || c == ';' || c == '(' || c == ')'; }

std::vector<std::string> split_words(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(cur);
    cur.clear();
  };
  for (char c : line) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (is_punct(c)) {
      flush();
      out.emplace_back(1, c);
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  flush();
  return out;
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) lines.push_back(line);
  return lines;
}

}  // namespace

std::string normalize(const std::string& text) {
  std::string out;
  for (const auto& line : split_lines(text)) {
    const auto words = split_words(line);
    if (words.empty()) continue;
    if (!out.empty()) out.push_back('\n');
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (i) out.push_back(' ');
      out += words[i];
    }
  }
  return out;
}

Vocabulary::Vocabulary() {
  for (const char* s : kSpecials) add(s);
}

void Vocabulary::add(const std::string& w) {
  if (ids_.count(w)) return;
  ids_.emplace(w, static_cast<std::int32_t>(words_.size()));
  words_.push_back(w);
}

Vocabulary Vocabulary::from_corpus(const std::vector<std::string>& texts) {
  std::set<std::string> words;
  for (const auto& t : texts) {
    for (const auto& line : split_lines(t)) {
      for (auto& w : split_words(line)) words.insert(std::move(w));
    }
  }
  Vocabulary v;
  for (const auto& w : words) v.add(w);
  return v;
}

std::vector<std::int32_t> Vocabulary::encode(const std::string& text) const {
  std::vector<std::int32_t> out;
  bool first = true;
  for (const auto& line : split_lines(text)) {
    const auto words = split_words(line);
    if (words.empty()) continue;
    if (!first) out.push_back(kNewline);
    first = false;
    for (const auto& w : words) out.push_back(id(w));
  }
  return out;
}

std::string Vocabulary::decode(const std::vector<std::int32_t>& ids) const {
  std::string out;
  bool line_start = true;
  for (auto i : ids) {
    if (i == kPad || i == kBos || i == kEos) continue;
    if (i == kNewline) {
      out.push_back('\n');
      line_start = true;
      continue;
    }
    if (!line_start) out.push_back(' ');
    out += word(i);
    line_start = false;
  }
  return out;
}

std::int32_t Vocabulary::id(const std::string& w) const {
  auto it = ids_.find(w);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(std::int32_t i) const {
  if (i < 0 || i >= size()) throw std::out_of_range("vocabulary id out of range");
  return words_[static_cast<std::size_t>(i)];
}

nlohmann::json Vocabulary::to_json() const { return {{"format", "volrep-vocabulary"}, {"version", 1}, {"words", words_}}; }

Vocabulary Vocabulary::from_json(const nlohmann::json& doc) {
  const auto words = doc.at("words").get<std::vector<std::string>>();
  if (words.size() < std::size(kSpecials)) throw std::invalid_argument("vocabulary JSON lacks special tokens");
  for (std::size_t i = 0; i < std::size(kSpecials); ++i) {
    if (words[i] != kSpecials[i]) throw std::invalid_argument("vocabulary JSON has misplaced special tokens");
  }
  Vocabulary v;
  for (std::size_t i = std::size(kSpecials); i < words.size(); ++i) {
    if (v.ids_.count(words[i])) throw std::invalid_argument("vocabulary JSON has duplicate word: " + words[i]);
    v.add(words[i]);
  }
  return v;
}

}  // namespace volrep::text
