#include "bonesound/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include "bonesound/error.hpp"

namespace bonesound {

namespace fs = std::filesystem;

std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Unassigned: return "unassigned";
  }
  return "unassigned";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  if (name == "unassigned" || name.empty()) return Split::Unassigned;
  throw Error(ErrorCode::InvalidArgument, "unknown split '" + std::string(name) + "'");
}

std::string_view source_name(RecordSource s) {
  switch (s) {
    case RecordSource::Clean: return "clean";
    case RecordSource::Augmented: return "augmented";
    case RecordSource::Synthetic: return "synthetic";
  }
  return "clean";
}

RecordSource parse_source(std::string_view name) {
  if (name == "clean") return RecordSource::Clean;
  if (name == "augmented") return RecordSource::Augmented;
  if (name == "synthetic") return RecordSource::Synthetic;
  throw Error(ErrorCode::InvalidArgument, "unknown source '" + std::string(name) + "'");
}

nlohmann::json to_json(const SampleRecord& r) {
  nlohmann::json j;
  j["id"] = r.id;
  j["path"] = r.path;
  j["label"] = gesture_name(r.label);
  j["split"] = split_name(r.split);
  j["source"] = source_name(r.source);
  if (r.parent_id) j["parent_id"] = *r.parent_id;
  if (r.snr_db) j["snr_db"] = *r.snr_db;
  if (r.noise_id) j["noise_id"] = *r.noise_id;
  j["recorder"] = r.recorder;
  return j;
}

SampleRecord record_from_json(const nlohmann::json& j) {
  try {
    SampleRecord r;
    r.id = j.at("id").get<std::string>();
    r.path = j.at("path").get<std::string>();
    r.label = gesture_from_name(j.at("label").get<std::string>());
    r.split = parse_split(j.value("split", std::string("unassigned")));
    r.source = parse_source(j.value("source", std::string("clean")));
    if (j.contains("parent_id") && !j["parent_id"].is_null()) r.parent_id = j["parent_id"].get<std::string>();
    if (j.contains("snr_db") && !j["snr_db"].is_null()) r.snr_db = j["snr_db"].get<double>();
    if (j.contains("noise_id") && !j["noise_id"].is_null()) r.noise_id = j["noise_id"].get<std::string>();
    r.recorder = j.value("recorder", std::string());
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("malformed manifest record: ") + e.what());
  }
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  for (const auto& r : manifest.records) out << to_json(r).dump() << '\n';
  if (!manifest.created_with.empty()) {
    std::ofstream meta(path.string() + ".meta.json");
    meta << manifest.created_with.dump(2) << '\n';
  }
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MissingFile, "cannot open manifest " + path.string());
  DatasetManifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::InvalidArgument, "manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    m.records.push_back(record_from_json(j));
  }
  std::ifstream meta(path.string() + ".meta.json");
  if (meta) m.created_with = nlohmann::json::parse(meta, nullptr, false);
  if (m.created_with.is_discarded()) m.created_with = nlohmann::json::object();
  return m;
}

ManifestReport validate_manifest(const DatasetManifest& manifest, const ValidateOptions& opts) {
  std::unordered_map<std::string, const SampleRecord*> by_id;
  for (const auto& r : manifest.records) {
    if (!by_id.emplace(r.id, &r).second) throw Error(ErrorCode::DuplicateId, "duplicate id '" + r.id + "'");
  }

  ManifestReport rep;
  std::array<std::size_t, 3> clean_counts{};
  std::size_t clean_total = 0;
  for (const auto& r : manifest.records) {
    if (r.source == RecordSource::Augmented) {
      if (!r.parent_id || !r.snr_db) {
        throw Error(ErrorCode::InvalidArgument, "augmented record '" + r.id + "' lacks parent_id or snr_db");
      }
      auto it = by_id.find(*r.parent_id);
      if (it == by_id.end()) {
        throw Error(ErrorCode::InvalidArgument, "record '" + r.id + "' names unknown parent '" + *r.parent_id + "'");
      }
      const SampleRecord& parent = *it->second;
      if (parent.source == RecordSource::Augmented) {
        throw Error(ErrorCode::InvalidArgument, "parent of '" + r.id + "' is itself augmented");
      }
      if (parent.label != r.label) {
        throw Error(ErrorCode::InvalidArgument, "record '" + r.id + "' changes its parent's label");
      }
      if (parent.split != r.split) {
        throw Error(ErrorCode::SplitLeak, "record '" + r.id + "' is in " + std::string(split_name(r.split)) +
                                              " but its parent is in " + std::string(split_name(parent.split)));
      }
    } else {
      if (r.parent_id) {
        throw Error(ErrorCode::InvalidArgument, "non-augmented record '" + r.id + "' has a parent_id");
      }
      if (r.split != Split::Unassigned) {
        ++clean_counts[static_cast<std::size_t>(r.split)];
        ++clean_total;
      }
    }
    if (opts.check_files) {
      const fs::path p = fs::path(r.path).is_absolute() ? fs::path(r.path) : opts.base_dir / r.path;
      if (!fs::exists(p)) throw Error(ErrorCode::MissingFile, "missing file " + p.string());
    }
    const std::string sp(split_name(r.split)), so(source_name(r.source));
    ++rep.total;
    ++rep.per_class[std::string(gesture_name(r.label))];
    ++rep.per_split[sp];
    ++rep.per_source[so];
    ++rep.by_source_split[so][sp];
  }
  const std::array<double, 3> target{0.7, 0.1, 0.2};
  rep.proportions_ok = clean_total > 0;
  for (std::size_t s = 0; s < 3; ++s) {
    rep.clean_fractions[s] = clean_total ? static_cast<double>(clean_counts[s]) / clean_total : 0.0;
    if (std::abs(rep.clean_fractions[s] - target[s]) > 0.02) rep.proportions_ok = false;
  }
  return rep;
}

ManifestReport validate_manifest(const fs::path& path, bool check_files) {
  return validate_manifest(read_manifest(path), ValidateOptions{check_files, path.parent_path()});
}

std::string format_report(const ManifestReport& rep) {
  std::ostringstream os;
  os << "records " << rep.total << "\n";
  os << "per class:";
  for (const auto& [k, v] : rep.per_class) os << "  " << k << " " << v;
  os << "\nper split:";
  for (const auto& [k, v] : rep.per_split) os << "  " << k << " " << v;
  os << "\nper source:";
  for (const auto& [k, v] : rep.per_source) os << "  " << k << " " << v;
  os << "\n";
  for (const auto& [src, splits] : rep.by_source_split) {
    os << src << ":";
    for (const char* s : {"train", "val", "test", "unassigned"}) {
      auto it = splits.find(s);
      if (it != splits.end()) os << "  " << s << " " << it->second;
    }
    os << "\n";
  }
  char buf[128];
  std::snprintf(buf, sizeof buf, "clean fractions %.4f/%.4f/%.4f (%s)\n", rep.clean_fractions[0],
                rep.clean_fractions[1], rep.clean_fractions[2], rep.proportions_ok ? "ok" : "off target");
  os << buf;
  return os.str();
}

namespace {

// Distributes `total` over classes in proportion to counts[c] * f, flooring
// and handing the leftover units to the largest remainders (lowest class
// index on ties).
std::vector<std::size_t> largest_remainder(const std::vector<std::size_t>& counts, double f, std::size_t total) {
  std::vector<std::size_t> out(counts.size());
  std::vector<double> rem(counts.size());
  std::size_t used = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    const double q = f * static_cast<double>(counts[c]);
    out[c] = static_cast<std::size_t>(std::floor(q));
    rem[c] = q - std::floor(q);
    used += out[c];
  }
  std::vector<std::size_t> order(counts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t i = 0; used < total && i < order.size(); ++i, ++used) ++out[order[i]];
  return out;
}

}  // namespace

std::vector<SampleRecord> assign_splits(std::vector<SampleRecord> records, const SplitFractions& fr,
                                        std::uint64_t seed) {
  if (!(fr.train >= 0 && fr.val >= 0 && fr.test >= 0 && std::abs(fr.train + fr.val + fr.test - 1.0) < 1e-9)) {
    throw Error(ErrorCode::InvalidArgument, "split fractions must be non-negative and sum to 1");
  }
  std::array<std::vector<std::size_t>, kNumGestures> members;
  for (std::size_t i = 0; i < records.size(); ++i) members[index_of(records[i].label)].push_back(i);
  std::vector<std::size_t> counts;
  std::vector<int> classes;
  for (int c = 0; c < kNumGestures; ++c) {
    if (members[c].empty()) continue;
    if (members[c].size() < 10) {
      throw Error(ErrorCode::TooFewSamples, "class " + std::string(gesture_name(gesture_at(c))) + " has only " +
                                                std::to_string(members[c].size()) + " records");
    }
    counts.push_back(members[c].size());
    classes.push_back(c);
  }
  if (classes.empty()) throw Error(ErrorCode::TooFewSamples, "no records to split");

  const double n = static_cast<double>(records.size());
  const auto n_val = static_cast<std::size_t>(std::llround(fr.val * n));
  const auto n_test = static_cast<std::size_t>(std::llround(fr.test * n));
  const auto val = largest_remainder(counts, fr.val, n_val);
  const auto test = largest_remainder(counts, fr.test, n_test);

  for (std::size_t k = 0; k < classes.size(); ++k) {
    auto idx = members[classes[k]];
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(classes[k])));
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      records[idx[i]].split = i < val[k] ? Split::Val : i < val[k] + test[k] ? Split::Test : Split::Train;
    }
  }
  return records;
}

std::vector<SampleRecord> augmented_records(std::span<const SampleRecord> clean, std::span<const std::string> noise_ids,
                                            const AugmentConfig& cfg) {
  std::vector<SampleRecord> out;
  for (const AugmentDraw& d : plan_augmentation(clean.size(), noise_ids.size(), cfg)) {
    const SampleRecord& parent = clean[d.source_index];
    SampleRecord r;
    r.id = augmented_id(parent.id, d.copy);
    r.path = "augmented/" + r.id + ".wav";
    r.label = parent.label;
    r.split = parent.split;
    r.source = RecordSource::Augmented;
    r.parent_id = parent.id;
    r.snr_db = d.snr_db;
    r.noise_id = noise_ids[d.noise_index];
    r.recorder = parent.recorder;
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<LabeledClip> auto_segment(const AudioClip& recording, Gesture label, const SegmentConfig& cfg,
                                      const std::string& id_prefix) {
  const AudioClip raw = to_canonical(recording);
  const AudioClip filtered = apply(design_bandpass(cfg.band), raw);
  const Eigen::Index n = filtered.size();
  const int rate = filtered.sample_rate_hz;
  if (n == 0) throw Error(ErrorCode::NoEventsFound, "empty recording");

  const Eigen::VectorXd mag = filtered.samples.cwiseAbs();
  std::vector<double> sorted(mag.data(), mag.data() + n);
  const std::size_t mid = sorted.size() / 2;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(mid), sorted.end());
  const double level = std::max(cfg.k * sorted[mid], cfg.absolute_floor);

  std::vector<Eigen::Index> peaks;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (mag[i] < level) continue;
    const bool left = i == 0 || mag[i] >= mag[i - 1];
    const bool right = i + 1 == n || mag[i] > mag[i + 1];
    if (left && right) peaks.push_back(i);
  }
  std::stable_sort(peaks.begin(), peaks.end(), [&](Eigen::Index a, Eigen::Index b) { return mag[a] > mag[b]; });
  const auto gap = static_cast<Eigen::Index>(std::llround(cfg.min_interval_s * rate));
  std::vector<Eigen::Index> kept;
  for (Eigen::Index p : peaks) {
    const bool clear = std::none_of(kept.begin(), kept.end(), [&](Eigen::Index q) { return std::abs(p - q) < gap; });
    if (clear) kept.push_back(p);
  }
  if (kept.empty()) throw Error(ErrorCode::NoEventsFound, "no peak above the trigger level");
  std::sort(kept.begin(), kept.end());

  const auto len = static_cast<Eigen::Index>(std::llround(cfg.clip_s * rate));
  std::vector<LabeledClip> out;
  for (Eigen::Index p : kept) {
    const Eigen::Index start = p - len / 2;
    if (start < 0 || start + len > n) continue;
    char id[64];
    std::snprintf(id, sizeof id, "_%04zu", out.size());
    out.push_back({id_prefix + id, label, AudioClip(raw.samples.segment(start, len), rate)});
  }
  if (out.empty()) throw Error(ErrorCode::NoEventsFound, "every event touches the recording edge");
  return out;
}

ManifestClipSource::ManifestClipSource(const DatasetManifest& manifest, fs::path base_dir, std::optional<Split> split,
                                       std::optional<RecordSource> source)
    : base_(std::move(base_dir)) {
  for (const auto& r : manifest.records) {
    if (split && r.split != *split) continue;
    if (source && r.source != *source) continue;
    records_.push_back(r);
  }
}

AudioClip ManifestClipSource::clip(std::size_t i) const {
  const fs::path p = fs::path(records_[i].path).is_absolute() ? fs::path(records_[i].path) : base_ / records_[i].path;
  if (!fs::exists(p)) throw Error(ErrorCode::MissingFile, "missing file " + p.string());
  return to_canonical(load_wav(p));
}

std::vector<LabeledClip> SynthCorpus::select(Split s) const {
  std::vector<LabeledClip> out;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    if (splits[i] == s) out.push_back(clips[i]);
  }
  return out;
}

namespace {

std::vector<SampleRecord> synthetic_records(const SynthCorpusConfig& cfg, SynthCorpus* corpus) {
  if (cfg.per_class < 10) throw Error(ErrorCode::TooFewSamples, "need at least 10 clips per class");
  std::vector<SampleRecord> records;
  for (Gesture g : kAllGestures) {
    for (int i = 0; i < cfg.per_class; ++i) {
      SynthGestureSpec spec;
      spec.label = g;
      spec.jitter = cfg.jitter;
      const auto index = static_cast<std::uint64_t>(index_of(g)) * 1000000ULL + static_cast<std::uint64_t>(i);
      LabeledClip clip = synth_gesture(spec, derive_seed(cfg.seed, index));
      char id[64];
      std::snprintf(id, sizeof id, "%s_%04d", std::string(gesture_name(g)).c_str(), i);
      clip.id = id;
      SampleRecord r;
      r.id = id;
      r.path = "clips/" + r.id + ".wav";
      r.label = g;
      r.source = RecordSource::Synthetic;
      r.recorder = "synth";
      records.push_back(r);
      if (corpus) corpus->clips.push_back(std::move(clip));
    }
  }
  return assign_splits(std::move(records), cfg.fractions, derive_seed(cfg.seed, 0xC0FFEE));
}

}  // namespace

SynthCorpus make_synthetic_corpus(const SynthCorpusConfig& cfg) {
  SynthCorpus corpus;
  const auto records = synthetic_records(cfg, &corpus);
  for (const auto& r : records) corpus.splits.push_back(r.split);
  return corpus;
}

DatasetManifest write_synthetic_corpus(const SynthCorpusConfig& cfg, const fs::path& out_dir) {
  SynthCorpus corpus;
  DatasetManifest m;
  m.records = synthetic_records(cfg, &corpus);
  fs::create_directories(out_dir / "clips");
  for (std::size_t i = 0; i < m.records.size(); ++i) save_wav(corpus.clips[i].clip, out_dir / m.records[i].path);
  m.created_with = {{"generator", "synth"},
                    {"per_class", cfg.per_class},
                    {"seed", cfg.seed},
                    {"jitter",
                     {{"amplitude_db", cfg.jitter.amplitude_db},
                      {"duration_frac", cfg.jitter.duration_frac},
                      {"frequency_frac", cfg.jitter.frequency_frac},
                      {"time_shift_s", cfg.jitter.time_shift_s}}},
                    {"fractions", {cfg.fractions.train, cfg.fractions.val, cfg.fractions.test}}};
  write_manifest(m, out_dir / "manifest.jsonl");
  return m;
}

}  // namespace bonesound
