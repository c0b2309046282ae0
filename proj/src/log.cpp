#include "himtm/log.hpp"

#include <iostream>

namespace himtm {

namespace {
thread_local WarningCapture* g_capture = nullptr;
}

WarningCapture::WarningCapture() : previous_(g_capture) { g_capture = this; }

WarningCapture::~WarningCapture() { g_capture = previous_; }

void warn(const std::string& message) {
  if (g_capture) {
    g_capture->messages_.push_back(message);
    return;
  }
  std::cerr << "warning: " << message << '\n';
}

}  // namespace himtm
