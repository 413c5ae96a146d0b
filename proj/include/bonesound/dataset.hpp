#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bonesound/augment.hpp"
#include "bonesound/detector.hpp"
#include "bonesound/filter.hpp"

namespace bonesound {

enum class Split { Train, Val, Test, Unassigned };
enum class RecordSource { Clean, Augmented, Synthetic };

std::string_view split_name(Split s);
Split parse_split(std::string_view name);
std::string_view source_name(RecordSource s);
RecordSource parse_source(std::string_view name);

struct SampleRecord {
  std::string id;
  std::string path;  // relative to the manifest directory unless absolute
  Gesture label = Gesture::Pinch;
  Split split = Split::Unassigned;
  RecordSource source = RecordSource::Clean;
  std::optional<std::string> parent_id;
  std::optional<double> snr_db;
  std::optional<std::string> noise_id;
  std::string recorder;

  bool operator==(const SampleRecord&) const = default;
};

nlohmann::json to_json(const SampleRecord& r);
SampleRecord record_from_json(const nlohmann::json& j);

struct DatasetManifest {
  std::vector<SampleRecord> records;
  nlohmann::json created_with = nlohmann::json::object();
};

/// JSON lines, one record per line. A non-empty created_with is written to
/// "<path>.meta.json" next to it.
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

struct ManifestReport {
  std::size_t total = 0;
  std::map<std::string, std::size_t> per_class;
  std::map<std::string, std::size_t> per_split;
  std::map<std::string, std::size_t> per_source;
  /// [source][split] -> count
  std::map<std::string, std::map<std::string, std::size_t>> by_source_split;
  /// train/val/test fractions of the non-augmented records
  std::array<double, 3> clean_fractions{};
  /// clean fractions within 0.02 of 70/10/20
  bool proportions_ok = false;
};

struct ValidateOptions {
  bool check_files = true;
  std::filesystem::path base_dir;
};

/// Throws Error{DuplicateId}, Error{SplitLeak}, Error{MissingFile}, or
/// Error{InvalidArgument} for records that break the parent/snr rules.
ManifestReport validate_manifest(const DatasetManifest& manifest, const ValidateOptions& opts = {});
ManifestReport validate_manifest(const std::filesystem::path& path, bool check_files = true);

std::string format_report(const ManifestReport& report);

struct SplitFractions {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

/// Seeded stratified split. Global val/test counts are round(f * N); they
/// are spread over classes by largest remainder, and train takes the rest.
/// Throws Error{TooFewSamples} when a class has fewer than 10 records.
std::vector<SampleRecord> assign_splits(std::vector<SampleRecord> records, const SplitFractions& fractions,
                                        std::uint64_t seed);

/// ratio augmented records per clean record, carrying the parent's split,
/// label and recorder. Draws match AugmentedClipSource for the same config.
std::vector<SampleRecord> augmented_records(std::span<const SampleRecord> clean,
                                            std::span<const std::string> noise_ids, const AugmentConfig& cfg);

struct SegmentConfig {
  BandpassDesign band{};
  double k = 6.0;
  double absolute_floor = 0.01;
  double min_interval_s = 0.5;
  double clip_s = 1.0;
};

/// Peaks of the band-passed recording above max(k * median|x|, floor),
/// greedily by height with the minimum interval, each cut to a 1 s clip
/// centered on the peak from the raw recording. Clips reaching past either
/// end are dropped. Throws Error{NoEventsFound}.
std::vector<LabeledClip> auto_segment(const AudioClip& recording, Gesture label,
                                      const SegmentConfig& cfg = {}, const std::string& id_prefix = "seg");

/// Records of one split (and optionally one source) loaded lazily from WAV.
class ManifestClipSource final : public ClipSource {
 public:
  ManifestClipSource(const DatasetManifest& manifest, std::filesystem::path base_dir,
                     std::optional<Split> split, std::optional<RecordSource> source = std::nullopt);
  std::size_t size() const override { return records_.size(); }
  Gesture label(std::size_t i) const override { return records_[i].label; }
  std::string id(std::size_t i) const override { return records_[i].id; }
  AudioClip clip(std::size_t i) const override;
  const std::vector<SampleRecord>& records() const { return records_; }

 private:
  std::vector<SampleRecord> records_;
  std::filesystem::path base_;
};

struct SynthCorpusConfig {
  int per_class = 200;
  std::uint64_t seed = 0;
  SynthJitter jitter{};
  SplitFractions fractions{};
};

/// Synthetic clips plus their split, in memory.
struct SynthCorpus {
  std::vector<LabeledClip> clips;
  std::vector<Split> splits;

  std::vector<LabeledClip> select(Split s) const;
};

SynthCorpus make_synthetic_corpus(const SynthCorpusConfig& cfg);

/// Writes <out>/clips/<id>.wav and <out>/manifest.jsonl.
DatasetManifest write_synthetic_corpus(const SynthCorpusConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace bonesound
