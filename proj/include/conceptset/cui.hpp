#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <string_view>

namespace conceptset {

// UMLS Concept Unique Identifier: "C" followed by exactly seven digits.
// Stored as its numeric part; the fixed width makes numeric order identical
// to lexicographic order of the string form.
class Cui {
 public:
  static constexpr std::uint32_t kMaxNumber = 9'999'999;

  constexpr Cui() = default;

  static std::optional<Cui> parse(std::string_view text) noexcept;
  // Throws Error(kInvalidArgument) on malformed input.
  static Cui from_string(std::string_view text);
  static Cui from_number(std::uint32_t number);

  constexpr std::uint32_t number() const noexcept { return number_; }
  std::string str() const;

  friend constexpr auto operator<=>(const Cui&, const Cui&) = default;

 private:
  constexpr explicit Cui(std::uint32_t number) : number_(number) {}

  std::uint32_t number_ = 0;
};

bool is_valid_cui(std::string_view text) noexcept;

using CuiSet = std::set<Cui>;

}  // namespace conceptset

template <>
struct std::hash<conceptset::Cui> {
  std::size_t operator()(const conceptset::Cui& cui) const noexcept {
    return std::hash<std::uint32_t>{}(cui.number());
  }
};
