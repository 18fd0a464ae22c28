#pragma once

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>
#include <cstdint>

#include "conceptset/cui.hpp"

namespace testing_support {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    auto base = std::filesystem::temp_directory_path();
    std::mt19937_64 rng(std::random_device{}());
    do {
      path_ = base / ("conceptset-test-" + std::to_string(::getpid()) + "-" + std::to_string(rng() % 1000000000));
    } while (std::filesystem::exists(path_));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline conceptset::Cui cui(std::uint32_t n) { return conceptset::Cui::from_number(n); }

// RRF line builders with every unused column left empty.
inline std::string conso_line(const std::string& cui, const std::string& name,
                              const std::string& sab = "SNOMEDCT_US", const std::string& lat = "ENG",
                              const std::string& ts = "P", const std::string& ispref = "Y",
                              const std::string& suppress = "N") {
  return cui + "|" + lat + "|" + ts + "|L1|PF|S1|" + ispref + "|A1||||" + sab + "|PT|X|" + name +
         "|0|" + suppress + "|256|";
}
inline std::string rel_line(const std::string& cui1, const std::string& rel, const std::string& cui2,
                            const std::string& rela = "", const std::string& sab = "SNOMEDCT_US") {
  return cui1 + "|A1|CUI|" + rel + "|" + cui2 + "|A2|CUI|" + rela + "|R1||" + sab + "|" + sab +
         "|||||";
}
inline std::string def_line(const std::string& cui, const std::string& sab, const std::string& text) {
  return cui + "|A1|AT1||" + sab + "|" + text + "|N||";
}
inline std::string sty_line(const std::string& cui, const std::string& sty) {
  return cui + "|T047|B2.2.1.2.1|" + sty + "|AT2||";
}

}  // namespace testing_support
