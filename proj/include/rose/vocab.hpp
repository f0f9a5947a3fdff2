#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace rose {

enum class TokenId : std::uint32_t {};

constexpr std::size_t index(TokenId t) noexcept { return static_cast<std::size_t>(t); }
constexpr TokenId token_at(std::size_t i) noexcept { return static_cast<TokenId>(i); }

using TokenSeq = std::vector<TokenId>;

// Ordered token symbols plus the three markers the pipeline relies on.
class Vocab {
 public:
  Vocab(std::vector<std::string> symbols, std::string_view bos, std::string_view eos,
        std::string_view sep)
      : symbols_(std::move(symbols)) {
    if (symbols_.size() < 2) throw std::invalid_argument("vocab: need at least 2 tokens");
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      if (symbols_[i].empty()) throw std::invalid_argument("vocab: empty token symbol");
      if (symbols_[i].find_first_of(" \t\n") != std::string::npos)
        throw std::invalid_argument("vocab: whitespace in token symbol '" + symbols_[i] + "'");
      auto [it, inserted] = lookup_.emplace(symbols_[i], token_at(i));
      if (!inserted) throw std::invalid_argument("vocab: duplicate token '" + symbols_[i] + "'");
    }
    bos_ = require(bos);
    eos_ = require(eos);
    sep_ = require(sep);
  }

  std::size_t size() const noexcept { return symbols_.size(); }
  const std::vector<std::string>& symbols() const noexcept { return symbols_; }
  const std::string& symbol(TokenId t) const { return symbols_.at(index(t)); }

  std::optional<TokenId> find(std::string_view s) const {
    auto it = lookup_.find(std::string(s));
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
  }

  TokenId require(std::string_view s) const {
    if (auto t = find(s)) return *t;
    throw std::invalid_argument("vocab: unknown token '" + std::string(s) + "'");
  }

  bool contains(TokenId t) const noexcept { return index(t) < symbols_.size(); }

  TokenId bos() const noexcept { return bos_; }
  TokenId eos() const noexcept { return eos_; }
  TokenId sep() const noexcept { return sep_; }

  // Whitespace-separated symbols.
  TokenSeq encode(std::string_view text) const {
    TokenSeq out;
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) out.push_back(require(word));
    return out;
  }

  std::string decode(std::span<const TokenId> tokens) const {
    std::string out;
    for (TokenId t : tokens) {
      if (!out.empty()) out += ' ';
      out += symbol(t);
    }
    return out;
  }

  bool operator==(const Vocab& other) const {
    return symbols_ == other.symbols_ && bos_ == other.bos_ && eos_ == other.eos_ &&
           sep_ == other.sep_;
  }

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, TokenId> lookup_;
  TokenId bos_{}, eos_{}, sep_{};
};

}  // namespace rose
