#pragma once

#include <stdexcept>
#include <string>

namespace jem {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* kind() const noexcept { return "error"; }
};

// Bad configuration values or incompatible model/config combinations.
class ConfigError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "config"; }
};

// Malformed caller-provided data (shapes, batch sizes, token ids, ranges).
class InputError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "input"; }
};

// Non-finite losses or gradients.
class NumericError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "numeric"; }
};

// Checkpoint or manifest could not be loaded.
class LoadError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "load"; }
};

class IoError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "io"; }
};

}  // namespace jem
