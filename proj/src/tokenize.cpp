#include "phaed/tokenize.hpp"

#include <cctype>

namespace phaed {

std::vector<std::string> WhitespaceLowercaseTokenizer::tokenize(const std::string& text) const {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : text) {
    if (std::isspace(ch)) {
      if (!cur.empty()) {
        out.push_back(std::move(cur));
        cur.clear();
      }
    } else {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::unique_ptr<Tokenizer> make_default_tokenizer() {
  return std::make_unique<WhitespaceLowercaseTokenizer>();
}

}  // namespace phaed
