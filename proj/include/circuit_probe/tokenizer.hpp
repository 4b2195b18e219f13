#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace circuit_probe {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by three framing
// tokens.
inline constexpr TokenId kBos = 256;
inline constexpr TokenId kEos = 257;
inline constexpr TokenId kPad = 258;
inline constexpr std::size_t kByteVocabSize = 259;

/// BOS followed by one token per byte of `text`.
TokenSequence tokenize(std::string_view text);

/// Concatenates the byte tokens; BOS, EOS and PAD are dropped.
std::string detokenize(const TokenSequence& tokens);

/// Byte tokens of `text` without any framing.
TokenSequence encode_bytes(std::string_view text);

}  // namespace circuit_probe
