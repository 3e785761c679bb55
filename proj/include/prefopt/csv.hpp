#pragma once

#include <charconv>
#include <string>
#include <system_error>

#include "prefopt/errors.hpp"

namespace prefopt {

// Shortest round-trip decimal form of a double, so CSVs are byte-stable and
// parse back to the exact value.
inline std::string format_double(double v) {
    char buf[32];
    const std::to_chars_result r = std::to_chars(buf, buf + sizeof buf, v);
    if (r.ec != std::errc()) throw DomainError("format_double: conversion failed");
    return std::string(buf, r.ptr);
}

} // namespace prefopt
