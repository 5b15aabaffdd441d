#pragma once

namespace camrw {

// Reserved vocabulary ids; they occupy the lowest indices.
inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kBosId = 2;
inline constexpr int kEosId = 3;
inline constexpr int kClsId = 4;  // sentence-start marker
inline constexpr int kSepId = 5;  // document separator in the source
inline constexpr int kNumReserved = 6;

inline constexpr const char* kReservedTokens[kNumReserved] = {"<pad>", "<unk>", "<s>", "</s>", "<cls>", "<sep>"};

}  // namespace camrw
