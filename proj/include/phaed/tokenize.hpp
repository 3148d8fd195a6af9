#pragma once

#include <memory>
#include <string>
#include <vector>

namespace phaed {

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<std::string> tokenize(const std::string& text) const = 0;
};

/// Default tokenizer: split on whitespace, lowercase ASCII letters.
class WhitespaceLowercaseTokenizer : public Tokenizer {
 public:
  std::vector<std::string> tokenize(const std::string& text) const override;
};

std::unique_ptr<Tokenizer> make_default_tokenizer();

}  // namespace phaed
