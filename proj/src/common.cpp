#include "bonesound/error.hpp"
#include "bonesound/gesture.hpp"

namespace bonesound {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorCode::CorruptHeader: return "CorruptHeader";
    case ErrorCode::ChunkTooLarge: return "ChunkTooLarge";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::InvalidBand: return "InvalidBand";
    case ErrorCode::UnstableDesign: return "UnstableDesign";
    case ErrorCode::RateMismatch: return "RateMismatch";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::WrongWindowLength: return "WrongWindowLength";
    case ErrorCode::WrongSegmentLength: return "WrongSegmentLength";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::NonFiniteUpdate: return "NonFiniteUpdate";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::NoiseTooShort: return "NoiseTooShort";
    case ErrorCode::SilentClean: return "SilentClean";
    case ErrorCode::UnknownClass: return "UnknownClass";
    case ErrorCode::NoEventsFound: return "NoEventsFound";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::SplitLeak: return "SplitLeak";
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::InconsistentCounts: return "InconsistentCounts";
    case ErrorCode::SingleClassLabels: return "SingleClassLabels";
    case ErrorCode::EmptySplit: return "EmptySplit";
    case ErrorCode::DuplicateRatio: return "DuplicateRatio";
    case ErrorCode::SourceLost: return "SourceLost";
    case ErrorCode::ModelMissing: return "ModelMissing";
    case ErrorCode::PortInUse: return "PortInUse";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

std::string_view gesture_name(Gesture g) {
  switch (g) {
    case Gesture::Pinch: return "pinch";
    case Gesture::RubUp: return "rub_up";
    case Gesture::RubDown: return "rub_down";
    case Gesture::Flick: return "flick";
    case Gesture::OpenPalm: return "open_palm";
  }
  return "unknown";
}

std::optional<Gesture> parse_gesture(std::string_view name) {
  for (Gesture g : kAllGestures) {
    if (gesture_name(g) == name) return g;
  }
  if (name == "pitching") return Gesture::Pinch;
  return std::nullopt;
}

Gesture gesture_from_name(std::string_view name) {
  if (auto g = parse_gesture(name)) return *g;
  throw Error(ErrorCode::UnknownClass, "unknown gesture label '" + std::string(name) + "'");
}

Gesture gesture_at(int index) {
  if (index < 0 || index >= kNumGestures) {
    throw Error(ErrorCode::UnknownClass, "gesture index out of range: " + std::to_string(index));
  }
  return static_cast<Gesture>(index);
}

}  // namespace bonesound
