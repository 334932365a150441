#pragma once

#include <cctype>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "rarelens/errors.hpp"

namespace rarelens {

// Word-level tokenizer. Text is lowercased and split on whitespace, with
// the punctuation marks in kPunct split off as tokens of their own, so a
// class name is always exactly one token.
class Tokenizer {
 public:
  static constexpr const char* kPad = "<pad>";
  static constexpr const char* kBos = "<bos>";
  static constexpr const char* kEos = "<eos>";
  static constexpr const char* kUnk = "<unk>";
  static constexpr const char* kImg = "<img>";  // placeholder id for visual positions
  static constexpr const char* kPunct = "[]:,.?";

  Tokenizer() = default;
  explicit Tokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
    for (std::size_t i = 0; i < vocab_.size(); ++i)
      if (!index_.emplace(vocab_[i], i).second) throw ConfigError("duplicate vocabulary entry '" + vocab_[i] + "'");
    for (const char* s : {kPad, kBos, kEos, kUnk, kImg})
      if (!index_.count(s)) throw ConfigError(std::string("vocabulary lacks ") + s);
  }

  // Specials, then words of `texts` in order of first appearance.
  static Tokenizer build(const std::vector<std::string>& texts) {
    std::vector<std::string> vocab = {kPad, kBos, kEos, kUnk, kImg};
    std::map<std::string, bool> seen;
    for (const auto& v : vocab) seen[v] = true;
    for (const auto& t : texts)
      for (const auto& w : split(t))
        if (!seen[w]) {
          seen[w] = true;
          vocab.push_back(w);
        }
    return Tokenizer(std::move(vocab));
  }

  static std::vector<std::string> split(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
      if (!cur.empty()) out.push_back(cur), cur.clear();
    };
    for (unsigned char ch : text) {
      if (std::isspace(ch)) {
        flush();
      } else if (std::string_view(kPunct).find(char(ch)) != std::string_view::npos) {
        flush();
        out.emplace_back(1, char(ch));
      } else {
        cur.push_back(char(std::tolower(ch)));
      }
    }
    flush();
    return out;
  }

  std::vector<std::size_t> encode(const std::string& text) const {
    std::vector<std::size_t> ids;
    for (const auto& w : split(text)) ids.push_back(id(w));
    return ids;
  }

  std::string decode(const std::vector<std::size_t>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += token(ids[i]);
    }
    return out;
  }

  std::size_t id(const std::string& word) const {
    const auto it = index_.find(word);
    return it == index_.end() ? index_.at(kUnk) : it->second;
  }
  bool contains(const std::string& word) const { return index_.count(word) > 0; }
  const std::string& token(std::size_t id) const { return vocab_.at(id); }
  std::size_t size() const { return vocab_.size(); }
  const std::vector<std::string>& vocab() const { return vocab_; }

  std::size_t bos() const { return index_.at(kBos); }
  std::size_t eos() const { return index_.at(kEos); }
  std::size_t img() const { return index_.at(kImg); }

  nlohmann::json to_json() const { return vocab_; }
  static Tokenizer from_json(const nlohmann::json& j) { return Tokenizer(j.get<std::vector<std::string>>()); }

 private:
  std::vector<std::string> vocab_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace rarelens
