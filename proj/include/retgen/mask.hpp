#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "retgen/errors.hpp"

namespace retgen {

// Boolean t×t attention mask; allow(i, j) means query position i may attend
// to key position j. Never allows attending to the future, and every row
// keeps at least one allowed position.
struct AttentionMask {
  int size = 0;
  std::vector<uint8_t> allow_;  // row-major t×t

  static AttentionMask disallow_all(int t) {
    if (t <= 0) throw ArgumentError("mask size must be positive, got " + std::to_string(t));
    AttentionMask m;
    m.size = t;
    m.allow_.assign(static_cast<size_t>(t) * t, 0);
    return m;
  }

  bool allow(int i, int j) const { return allow_[static_cast<size_t>(i) * size + j] != 0; }
  void set(int i, int j, bool v) {
    if (v && j > i)
      throw MaskError("mask may not attend to the future: (" + std::to_string(i) + "," +
                      std::to_string(j) + ")");
    allow_[static_cast<size_t>(i) * size + j] = v ? 1 : 0;
  }

  void validate() const {
    for (int i = 0; i < size; ++i) {
      bool any = false;
      for (int j = 0; j < size; ++j) {
        if (allow(i, j)) {
          if (j > i) throw MaskError("row " + std::to_string(i) + " attends to the future");
          any = true;
        }
      }
      if (!any) throw MaskError("row " + std::to_string(i) + " has no allowed positions");
    }
  }

  bool operator==(const AttentionMask& o) const { return size == o.size && allow_ == o.allow_; }
};

inline AttentionMask causal_mask(int t) {
  AttentionMask m = AttentionMask::disallow_all(t);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j <= i; ++j) m.set(i, j, true);
  return m;
}

// Session mask over a sequence of m session tokens (position m-1 is the
// appended end-of-sequence / representation position) followed by T response
// tokens. Session positions are causal among themselves; response positions
// see only the representation position and earlier response tokens.
inline AttentionMask build_session_mask(int session_len, int response_len) {
  if (session_len < 1)
    throw ArgumentError("session length must be >= 1, got " + std::to_string(session_len));
  if (response_len < 0)
    throw ArgumentError("response length must be >= 0, got " + std::to_string(response_len));
  const int m = session_len;
  const int t = m + response_len;
  AttentionMask mask = AttentionMask::disallow_all(t);
  for (int i = 0; i < t; ++i) {
    if (i < m) {
      for (int j = 0; j <= i; ++j) mask.set(i, j, true);
    } else {
      mask.set(i, m - 1, true);
      for (int j = m; j <= i; ++j) mask.set(i, j, true);
    }
  }
  return mask;
}

}  // namespace retgen
