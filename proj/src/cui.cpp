#include "conceptset/cui.hpp"

#include <cstdio>

#include "conceptset/error.hpp"

namespace conceptset {

bool is_valid_cui(std::string_view text) noexcept {
  if (text.size() != 8 || text[0] != 'C') return false;
  for (std::size_t i = 1; i < text.size(); ++i) {
    if (text[i] < '0' || text[i] > '9') return false;
  }
  return true;
}

std::optional<Cui> Cui::parse(std::string_view text) noexcept {
  if (!is_valid_cui(text)) return std::nullopt;
  std::uint32_t value = 0;
  for (std::size_t i = 1; i < text.size(); ++i) {
    value = value * 10 + static_cast<std::uint32_t>(text[i] - '0');
  }
  return Cui(value);
}

Cui Cui::from_string(std::string_view text) {
  auto cui = parse(text);
  if (!cui) {
    throw Error(ErrorCode::kInvalidArgument,
                "malformed CUI '" + std::string(text) + "'");
  }
  return *cui;
}

Cui Cui::from_number(std::uint32_t number) {
  if (number > kMaxNumber) {
    throw Error(ErrorCode::kInvalidArgument,
                "CUI number out of range: " + std::to_string(number));
  }
  return Cui(number);
}

std::string Cui::str() const {
  char buffer[9];
  std::snprintf(buffer, sizeof(buffer), "C%07u", number_);
  return std::string(buffer, 8);
}

}  // namespace conceptset
