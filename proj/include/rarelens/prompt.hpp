#pragma once

#include <string>
#include <vector>

namespace rarelens {

// Appends " [Detected: a, b, c]" to a prompt. An empty list returns the
// prompt unchanged. Not idempotent: a second call appends a second hint.
inline std::string enrich_prompt(const std::string& prompt, const std::vector<std::string>& names) {
  if (names.empty()) return prompt;
  std::string out = prompt + " [Detected: ";
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (i) out += ", ";
    out += names[i];
  }
  out += "]";
  return out;
}

}  // namespace rarelens
