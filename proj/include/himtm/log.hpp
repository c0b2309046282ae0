#pragma once

#include <string>
#include <vector>

namespace himtm {

/// Emits "warning: <message>" on stderr, or into the innermost active capture.
void warn(const std::string& message);

/// Collects warnings on this thread instead of printing them.
class WarningCapture {
 public:
  WarningCapture();
  ~WarningCapture();
  WarningCapture(const WarningCapture&) = delete;
  WarningCapture& operator=(const WarningCapture&) = delete;

  const std::vector<std::string>& messages() const { return messages_; }

 private:
  friend void warn(const std::string&);
  std::vector<std::string> messages_;
  WarningCapture* previous_;
};

}  // namespace himtm
