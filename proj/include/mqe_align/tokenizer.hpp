#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace mqe {

/// Byte-level tokenizer: ids 0..255 are raw bytes, then three specials.
struct ByteTokenizer {
  static constexpr int kBos = 256;
  static constexpr int kEos = 257;
  static constexpr int kPad = 258;
  static constexpr int kVocab = 259;

  static std::vector<int> encode(std::string_view text);
  /// Specials are dropped.
  static std::string decode(const std::vector<int>& ids);
};

}  // namespace mqe
