#pragma once

#include <stdexcept>
#include <string>

namespace kvcomm {

// Error taxonomy. Each family maps to a CLI exit code and, for protocol
// errors, to a wire nack code (see comm.hpp).
enum class ErrorCode {
    Config = 1,       // bad dimensions, invalid hyperparameters
    Shape,            // tensor shape mismatch
    BadMagic,         // wire: wrong magic bytes
    BadVersion,       // wire: unsupported protocol version
    BadCrc,           // wire: checksum mismatch
    Truncated,        // wire: fewer bytes than the header promises
    Invariant,        // wire: decoded payload violates an invariant
    Transport,        // socket/file failures, timeouts, nacks
    Io,               // filesystem errors outside the wire path
};

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}
    ErrorCode code() const { return code_; }

private:
    ErrorCode code_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(ErrorCode::Config, what) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& what) : Error(ErrorCode::Shape, what) {}
};

// Wire-format and inter-agent protocol violations.
struct ProtocolError : Error {
    ProtocolError(ErrorCode code, const std::string& what) : Error(code, what) {}
};

struct TransportError : Error {
    explicit TransportError(const std::string& what) : Error(ErrorCode::Transport, what) {}
};

struct IoError : Error {
    explicit IoError(const std::string& what) : Error(ErrorCode::Io, what) {}
};

} // namespace kvcomm
