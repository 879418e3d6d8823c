#pragma once

#include <stdexcept>
#include <string>

namespace gmfn {

// Error classes surfaced verbatim through the C API and the CLI's
// one-line machine-parsable failure output.
enum class Errc {
  usage,
  config,
  io,
  checksum,
  shape,
  topology,
  numeric,
  data,
  internal,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::usage: return "usage_error";
    case Errc::config: return "config_error";
    case Errc::io: return "io_error";
    case Errc::checksum: return "checksum_error";
    case Errc::shape: return "shape_error";
    case Errc::topology: return "topology_error";
    case Errc::numeric: return "numeric_error";
    case Errc::data: return "data_error";
    case Errc::internal: return "internal_error";
  }
  return "internal_error";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg)
      : std::runtime_error(std::string(errc_name(code)) + ": " + msg), code_(code) {}

  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) { throw Error(code, msg); }

}  // namespace gmfn
