#include "ibpica/errors.hpp"

#include <iostream>
#include <mutex>

namespace ibpica {

namespace {

std::string join_diagnostics(const std::vector<FieldDiagnostic>& diags) {
  std::string out = "invalid configuration";
  for (const auto& d : diags) out += "; " + d.field + ": " + d.message;
  return out;
}

std::mutex g_sink_mutex;
WarningSink g_sink = nullptr;
void* g_sink_user = nullptr;

}  // namespace

ConfigError::ConfigError(std::vector<FieldDiagnostic> diagnostics)
    : Error(join_diagnostics(diagnostics)), diagnostics_(std::move(diagnostics)) {}

void warn(const std::string& message) {
  std::lock_guard<std::mutex> lock(g_sink_mutex);
  if (g_sink) {
    g_sink(message.c_str(), g_sink_user);
    return;
  }
  std::cerr << "warning: " << message << '\n';
}

void set_warning_sink(WarningSink sink, void* user) {
  std::lock_guard<std::mutex> lock(g_sink_mutex);
  g_sink = sink;
  g_sink_user = user;
}

}  // namespace ibpica
