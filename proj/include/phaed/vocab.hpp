#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "phaed/types.hpp"

namespace phaed {

/// Token <-> id bijection with fixed reserved ids at the front.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kSou = 2;
  static constexpr TokenId kEou = 3;
  static constexpr TokenId kSpeakerQ = 4;
  static constexpr TokenId kSpeakerR = 5;
  static constexpr TokenId kReservedCount = 6;

  Vocabulary();

  /// Id for a token; [UNK]'s id when the token is not in the vocabulary.
  TokenId id_of(const std::string& token) const;
  const std::string& token_of(TokenId id) const;
  bool contains(const std::string& token) const;

  /// Appends a non-reserved token, assigning the next free id.
  TokenId add_token(const std::string& token);

  Index size() const { return static_cast<Index>(tokens_.size()); }

  /// Non-reserved tokens in id order, for serialization.
  std::vector<std::string> content_tokens() const;
  static Vocabulary from_content_tokens(const std::vector<std::string>& tokens);

  static bool is_speaker_token(TokenId id) { return id == kSpeakerQ || id == kSpeakerR; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

}  // namespace phaed
