#pragma once

#include <stdexcept>
#include <string>

namespace patchrec {

// Error taxonomy mirrors the CLI exit codes: usage/config problems exit 1,
// data/format problems exit 2, numeric failures exit 3.
class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace patchrec
