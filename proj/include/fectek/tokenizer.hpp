#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace fectek {

// Lowercases ASCII letters and splits on whitespace and ASCII punctuation,
// dropping the separators. Bytes >= 0x80 are kept as word characters so
// UTF-8 sequences pass through intact.
std::vector<std::string> tokenize(std::string_view text);

}  // namespace fectek
