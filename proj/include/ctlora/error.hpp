// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace ctlora {

enum class Errc {
  invalid_config,
  invalid_metadata,
  contract_violation,
  invalid_field,
  invalid_parameter,
  invalid_input,
  invalid_label,
  invalid_rank,
  injection,
  format,
  compatibility,
  missing_gradient,
  template_error,
  spec_error,
  data,
  numeric_fault,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::invalid_config: return "invalid-config";
    case Errc::invalid_metadata: return "invalid-metadata";
    case Errc::contract_violation: return "contract-violation";
    case Errc::invalid_field: return "invalid-field";
    case Errc::invalid_parameter: return "invalid-parameter";
    case Errc::invalid_input: return "invalid-input";
    case Errc::invalid_label: return "invalid-label";
    case Errc::invalid_rank: return "invalid-rank";
    case Errc::injection: return "injection";
    case Errc::format: return "format";
    case Errc::compatibility: return "compatibility";
    case Errc::missing_gradient: return "missing-gradient";
    case Errc::template_error: return "template";
    case Errc::spec_error: return "spec";
    case Errc::data: return "data";
    case Errc::numeric_fault: return "numeric-fault";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + " error: " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

/// Process exit code for the CLI: 2 config, 3 data, 4 numeric fault.
inline int exit_code(Errc c) {
  switch (c) {
    case Errc::numeric_fault:
    case Errc::missing_gradient:
      return 4;
    case Errc::data:
    case Errc::format:
    case Errc::compatibility:
    case Errc::invalid_metadata:
    case Errc::invalid_label:
    case Errc::invalid_input:
    case Errc::contract_violation:
      return 3;
    default:
      return 2;
  }
}

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool ok, Errc code, const std::string& what) {
  if (!ok) fail(code, what);
}

}  // namespace ctlora
