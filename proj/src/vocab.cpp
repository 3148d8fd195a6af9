#include "phaed/vocab.hpp"

#include "phaed/errors.hpp"

namespace phaed {

Vocabulary::Vocabulary() {
  tokens_ = {"[PAD]", "[UNK]", "[SOU]", "[EOU]", "[Speaker-Q]", "[Speaker-R]"};
  for (TokenId i = 0; i < kReservedCount; ++i) ids_.emplace(tokens_[i], i);
}

TokenId Vocabulary::id_of(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token_of(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw CapacityError("token id " + std::to_string(id) + " outside vocabulary of size " +
                        std::to_string(tokens_.size()));
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(const std::string& token) const { return ids_.count(token) > 0; }

TokenId Vocabulary::add_token(const std::string& token) {
  if (ids_.count(token))
    throw ContractViolation("token already present in vocabulary: " + token);
  TokenId id = static_cast<TokenId>(tokens_.size());
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

std::vector<std::string> Vocabulary::content_tokens() const {
  return std::vector<std::string>(tokens_.begin() + kReservedCount, tokens_.end());
}

Vocabulary Vocabulary::from_content_tokens(const std::vector<std::string>& tokens) {
  Vocabulary v;
  for (const auto& t : tokens) v.add_token(t);
  return v;
}

}  // namespace phaed
