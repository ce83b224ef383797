#pragma once

#include <functional>
#include <iostream>
#include <string>

namespace dfar {

/// Process-wide sink for recoverable-condition warnings (degenerate boxes,
/// clipped annotations, ...). Defaults to stderr; tests swap it out.
using WarningSink = std::function<void(const std::string&)>;

inline WarningSink& warning_sink() {
    static WarningSink sink = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
    return sink;
}

inline void warn(const std::string& msg) {
    if (warning_sink()) warning_sink()(msg);
}

/// Installs a sink for the lifetime of the guard.
class ScopedWarningSink {
public:
    explicit ScopedWarningSink(WarningSink sink) : prev_(warning_sink()) { warning_sink() = std::move(sink); }
    ~ScopedWarningSink() { warning_sink() = prev_; }
    ScopedWarningSink(const ScopedWarningSink&) = delete;
    ScopedWarningSink& operator=(const ScopedWarningSink&) = delete;

private:
    WarningSink prev_;
};

}  // namespace dfar
