#pragma once

#include <array>
#include <optional>
#include <string_view>

namespace bonesound {

/// The five finger gestures. The integer value is the class index used by
/// the model output layer and all per-class tables.
enum class Gesture : int { Pinch = 0, RubUp = 1, RubDown = 2, Flick = 3, OpenPalm = 4 };

inline constexpr int kNumGestures = 5;

inline constexpr std::array<Gesture, kNumGestures> kAllGestures = {
    Gesture::Pinch, Gesture::RubUp, Gesture::RubDown, Gesture::Flick, Gesture::OpenPalm};

std::string_view gesture_name(Gesture g);

/// Parses the lowercase manifest label. Accepts "pitching" as an alias of
/// "pinch" since the control tables use that spelling.
std::optional<Gesture> parse_gesture(std::string_view name);

/// Throws Error{UnknownClass} on an unrecognized label.
Gesture gesture_from_name(std::string_view name);

inline int index_of(Gesture g) { return static_cast<int>(g); }
Gesture gesture_at(int index);

}  // namespace bonesound
