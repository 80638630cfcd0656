#pragma once

#include <stdexcept>
#include <string>

namespace filo {

// Coarse error taxonomy: the CLI maps `config`/`io`/`data`/`metric` to a
// user-error exit code and everything else to an internal one.
enum class ErrorKind {
    config,   // bad configuration or dimension mismatch caught at setup
    shape,    // tensor/image shape violations
    io,       // file system / parse failures
    data,     // dataset contents violate expectations
    metric,   // undefined metric (e.g. single-class AUROC)
    train,    // training aborted (NaN loss etc.)
    backend,  // detector / encoder backend failure
    internal, // bug guard
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) fail(kind, msg);
}

inline bool is_user_error(ErrorKind k) {
    return k == ErrorKind::config || k == ErrorKind::io ||
           k == ErrorKind::data || k == ErrorKind::metric ||
           k == ErrorKind::shape;
}

} // namespace filo
