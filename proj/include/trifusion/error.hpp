#pragma once

#include <stdexcept>
#include <string>

namespace trifusion {

// Base of every error raised by the library. Subclasses map onto the CLI
// exit codes (config/usage = 1, data = 2, integrity = 3).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class VocabError : public DataError {
public:
    using DataError::DataError;
};

class IntegrityError : public Error {
public:
    using Error::Error;
};

}  // namespace trifusion
