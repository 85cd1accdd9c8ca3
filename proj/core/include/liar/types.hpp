#pragma once

#include <cstdint>
#include <vector>

namespace liar {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

}  // namespace liar
