#pragma once

#include <stdexcept>
#include <string>

namespace quicknat {

// Truncated or structurally invalid packet bytes.
struct MalformedPacket : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// An operation was called outside its stated preconditions.
struct ContractViolation : std::logic_error {
    using std::logic_error::logic_error;
};

struct DuplicateRule : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidRule : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NotFound : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A pool lease was released twice (or after its triple was re-leased).
struct DoubleRelease : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// pcap file does not start with a recognized magic number.
struct BadMagic : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// pcap record header or body is cut short.
struct TruncatedRecord : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace quicknat
