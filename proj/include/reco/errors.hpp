#pragma once

#include <stdexcept>
#include <string>

namespace reco {

// Every error carries a short machine-readable kind so the CLI can print a
// single parsable line.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& w) : Error("shape", w) {}
};

struct ValidationError : Error {
    explicit ValidationError(const std::string& w) : Error("validation", w) {}
};

struct NumericError : Error {
    NumericError(const std::string& w, int layer = -1) : Error("numeric", w), layer(layer) {}
    int layer;
};

struct UsageError : Error {
    explicit UsageError(const std::string& w) : Error("usage", w) {}
};

struct IoError : Error {
    explicit IoError(const std::string& w) : Error("io", w) {}
};

// Container decoding failures: bad magic, truncation and version mismatch
// are distinguished by kind.
struct FormatError : Error {
    using Error::Error;
    static FormatError magic(const std::string& w) { return {"bad_magic", w}; }
    static FormatError truncated(const std::string& w) { return {"truncated", w}; }
    static FormatError version(const std::string& w) { return {"version", w}; }
    static FormatError malformed(const std::string& w) { return {"malformed", w}; }
};

struct RaterError : Error {
    using Error::Error;
    static RaterError transport(const std::string& w) { return {"rater_transport", w}; }
    static RaterError malformed(const std::string& w) { return {"rater_json", w}; }
    static RaterError schema(const std::string& w) { return {"rater_schema", w}; }
    static RaterError range(const std::string& w) { return {"rater_range", w}; }
};

}  // namespace reco
