#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cloakforge {

inline constexpr const char* kIdentifierSlot = "[S*]";
inline constexpr const char* kClassSlot = "[class]";

class PromptError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A prompt template with an identifier slot (the rare subject token) and a
// class-noun slot. An empty identifier drops its slot, which is how the prior
// prompt ("a photo of person") is expressed with the same template.
struct PromptSpec {
  std::string templ = "a photo of [S*] [class]";
  std::string identifier = "sks";
  std::string class_noun = "person";

  bool operator==(const PromptSpec&) const = default;

  void validate() const {
    if (templ.find(kIdentifierSlot) == std::string::npos || templ.find(kClassSlot) == std::string::npos) {
      throw PromptError("prompt template '" + templ + "' must contain both " + kIdentifierSlot + " and " +
                        kClassSlot);
    }
    if (class_noun.empty() || class_noun.find(' ') != std::string::npos) {
      throw PromptError("class noun must be a single token");
    }
    if (identifier.find(' ') != std::string::npos) throw PromptError("identifier must be a single token");
  }

  std::vector<std::string> tokens() const {
    validate();
    std::vector<std::string> out;
    std::istringstream in(templ);
    std::string word;
    while (in >> word) {
      if (word == kIdentifierSlot) {
        if (!identifier.empty()) out.push_back(identifier);
      } else if (word == kClassSlot) {
        out.push_back(class_noun);
      } else {
        out.push_back(word);
      }
    }
    return out;
  }

  std::string render() const {
    std::string s;
    for (const auto& t : tokens()) {
      if (!s.empty()) s += ' ';
      s += t;
    }
    return s;
  }

  PromptSpec without_identifier() const {
    PromptSpec p = *this;
    p.identifier.clear();
    return p;
  }
};

inline PromptSpec instance_prompt(std::string identifier = "sks") {
  return PromptSpec{"a photo of [S*] [class]", std::move(identifier), "person"};
}

inline PromptSpec prior_prompt() { return PromptSpec{"a photo of [S*] [class]", "", "person"}; }

inline PromptSpec dslr_prompt(std::string identifier = "sks") {
  return PromptSpec{"a dslr portrait of [S*] [class]", std::move(identifier), "person"};
}

}  // namespace cloakforge
