#pragma once

#include <stdexcept>
#include <string>

namespace epimerge {

// Error taxonomy mirrors the process exit codes: 1 usage, 2 data/format,
// 3 numerical failure.
enum class errc { usage = 1, data = 2, numeric = 3 };

class error : public std::runtime_error {
public:
    error(errc code, std::string msg) : std::runtime_error(std::move(msg)), code_(code) {}
    errc code() const noexcept { return code_; }

private:
    errc code_;
};

[[noreturn]] inline void fail_usage(const std::string & msg)   { throw error(errc::usage,   msg); }
[[noreturn]] inline void fail_data(const std::string & msg)    { throw error(errc::data,    msg); }
[[noreturn]] inline void fail_numeric(const std::string & msg) { throw error(errc::numeric, msg); }

} // namespace epimerge
