#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <string_view>

namespace advspk {

/// 64-bit FNV-1a of `bytes`, as 16 lowercase hex digits.
std::string fingerprint_hex(std::string_view bytes);

/// Deterministic child seed from a base seed and a path of indices.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path);

}  // namespace advspk
