// bonesound-cli: corpus generation, training, evaluation and the live
// detector/service. Exit status 0 on success, 2 on usage errors, 1 on
// runtime errors.

#include <algorithm>
#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "bonesound/augment.hpp"
#include "bonesound/dataset.hpp"
#include "bonesound/error.hpp"
#include "bonesound/eval.hpp"
#include "bonesound/frontend.hpp"
#include "bonesound/model.hpp"
#include "bonesound/pipeline.hpp"
#include "bonesound/service.hpp"

namespace fs = std::filesystem;
using namespace bonesound;

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop.store(true); }

struct DetectorFlags {
  double window = 2.0;
  double step = 0.1;
  double k = 6.0;
  double threshold = 0.0;  // > 0 selects absolute mode
  double refractory = 0.5;

  void add(CLI::App* app) {
    app->add_option("--det-window", window, "Detector window (s)")->capture_default_str();
    app->add_option("--det-step", step, "Detector step (s)")->capture_default_str();
    app->add_option("--det-k", k, "Adaptive threshold multiplier")->capture_default_str();
    app->add_option("--det-threshold", threshold, "Absolute trigger level; switches to absolute mode");
    app->add_option("--det-refractory", refractory, "Refractory period (s)")->capture_default_str();
  }

  DetectorConfig config() const {
    DetectorConfig c;
    c.window_s = window;
    c.step_s = step;
    c.k = k;
    c.refractory_s = refractory;
    if (threshold > 0.0) {
      c.mode = ThresholdMode::Absolute;
      c.peak_threshold = threshold;
    }
    c.validate();
    return c;
  }
};

struct NmsFlags {
  double epsilon = 0.7;
  double secondary = 0.6;
  double window = 0.5;

  void add(CLI::App* app) {
    app->add_option("--epsilon", epsilon, "NMS probability threshold")->capture_default_str();
    app->add_option("--secondary-epsilon", secondary, "Secondary threshold reported alongside")->capture_default_str();
    app->add_option("--nms-window", window, "Suppression window (s)")->capture_default_str();
  }

  NmsConfig config() const {
    NmsConfig c{epsilon, secondary, window};
    c.validate();
    return c;
  }
};

std::vector<NoiseClip> load_noise_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::MissingFile, "noise directory " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".wav") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error(ErrorCode::MissingFile, "no .wav files in " + dir.string());
  std::vector<NoiseClip> out;
  for (const auto& f : files) out.push_back({f.stem().string(), to_canonical(load_wav(f))});
  return out;
}

void write_noise_corpus(const fs::path& dir, int count, double seconds, std::uint64_t seed) {
  fs::create_directories(dir);
  const NoiseKind kinds[] = {NoiseKind::Pink, NoiseKind::Brown, NoiseKind::Babble};
  for (int i = 0; i < count; ++i) {
    const NoiseKind kind = kinds[i % 3];
    char name[64];
    std::snprintf(name, sizeof name, "%s_%02d.wav", std::string(noise_kind_name(kind)).c_str(), i);
    save_wav(synth_noise(kind, seconds, derive_seed(seed, 0x5EED0000ULL + static_cast<std::uint64_t>(i))), dir / name,
             WavEncoding::Float32);
  }
}

fs::path manifest_dir(const fs::path& manifest) {
  const fs::path p = manifest.parent_path();
  return p.empty() ? fs::path(".") : p;
}

// Keeps feature matrices in memory when they fit comfortably.
struct FeatureSet {
  std::unique_ptr<ClipFeatureSource> lazy;
  InMemorySource memory;
  bool in_memory = false;

  FeatureSet(const ClipSource& clips, WindowPlacement placement) {
    lazy = std::make_unique<ClipFeatureSource>(clips, placement);
    if (clips.size() <= 20000) {
      memory = materialize(*lazy);
      in_memory = true;
    }
  }
  const SampleSource& get() const {
    if (in_memory) return memory;
    return *lazy;
  }
};

void print_event(const GestureEvent& ev, const ActionMapping& mapping) {
  std::cout << event_json(ev, map_action(ev, mapping)).dump() << std::endl;
}

// ---------------------------------------------------------------------------

int cmd_synth(std::uint64_t seed, int per_class, const fs::path& out, bool no_jitter, int noise_clips,
              double noise_seconds) {
  SynthCorpusConfig cfg;
  cfg.per_class = per_class;
  cfg.seed = seed;
  if (no_jitter) cfg.jitter = SynthJitter::none();
  const auto manifest = write_synthetic_corpus(cfg, out);
  if (noise_clips > 0) write_noise_corpus(out / "noise", noise_clips, noise_seconds, seed);
  const auto report = validate_manifest(out / "manifest.jsonl");
  std::cerr << "wrote " << manifest.records.size() << " clips";
  if (noise_clips > 0) std::cerr << " and " << noise_clips << " noise clips";
  std::cerr << " to " << out.string() << "\n" << format_report(report);
  return 0;
}

int cmd_segment(const std::vector<fs::path>& recordings, const std::string& label_name, const fs::path& out,
                const std::string& recorder, double k, bool assign, std::uint64_t seed) {
  const Gesture label = gesture_from_name(label_name);
  const fs::path manifest_path = out / "manifest.jsonl";
  DatasetManifest manifest;
  if (fs::exists(manifest_path)) manifest = read_manifest(manifest_path);
  fs::create_directories(out / "clips");

  SegmentConfig cfg;
  cfg.k = k;
  std::size_t written = 0;
  for (const auto& rec_path : recordings) {
    const AudioClip rec = to_canonical(load_wav(rec_path));
    const std::string prefix = rec_path.stem().string();
    for (auto& clip : auto_segment(rec, label, cfg, prefix)) {
      const fs::path rel = fs::path("clips") / (clip.id + ".wav");
      save_wav(clip.clip, out / rel);
      SampleRecord r;
      r.id = clip.id;
      r.path = rel.string();
      r.label = label;
      r.source = RecordSource::Clean;
      r.recorder = recorder;
      manifest.records.push_back(std::move(r));
      ++written;
    }
  }
  if (assign) {
    manifest.records = assign_splits(std::move(manifest.records), SplitFractions{}, seed);
    manifest.created_with["split_seed"] = seed;
  }
  write_manifest(manifest, manifest_path);
  std::cerr << "segmented " << written << " clips into " << manifest_path.string() << "\n";
  return 0;
}

int cmd_augment(const fs::path& manifest_path, const fs::path& noise_dir, const fs::path& out, AugmentConfig cfg) {
  cfg.validate();
  const DatasetManifest in = read_manifest(manifest_path);
  const fs::path in_base = manifest_dir(manifest_path);
  const auto noise = load_noise_dir(noise_dir);
  std::vector<std::string> noise_ids;
  for (const auto& n : noise) noise_ids.push_back(n.id);

  const ManifestClipSource clean(in, in_base, std::nullopt, RecordSource::Clean);
  const ManifestClipSource synthetic(in, in_base, std::nullopt, RecordSource::Synthetic);
  // Synthetic corpora stand in for clean recordings.
  const ManifestClipSource& base = clean.size() > 0 ? clean : synthetic;
  if (base.size() == 0) throw Error(ErrorCode::EmptySplit, "manifest has no clean records to augment");

  const auto records = augmented_records(base.records(), noise_ids, cfg);
  const AugmentedClipSource rendered(base, noise, cfg);
  fs::create_directories(out / "augmented");

  DatasetManifest result;
  for (auto r : in.records) {
    if (r.source == RecordSource::Augmented) continue;
    fs::path p = r.path;
    if (p.is_relative()) p = fs::absolute(in_base / p);
    r.path = fs::proximate(p, fs::absolute(out)).string();
    result.records.push_back(std::move(r));
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    save_wav(rendered.clip(i), out / records[i].path);
    result.records.push_back(records[i]);
  }
  result.created_with = in.created_with;
  result.created_with["augment"] = {{"ratio", cfg.ratio},
                                    {"snr_db", {cfg.snr_lo_db, cfg.snr_hi_db}},
                                    {"seed", cfg.seed},
                                    {"noise", noise_ids}};
  write_manifest(result, out / "manifest.jsonl");
  const auto report = validate_manifest(out / "manifest.jsonl");
  std::cerr << "wrote " << records.size() << " augmented clips\n" << format_report(report);
  return 0;
}

int cmd_train(const fs::path& manifest_path, const fs::path& out, TrainConfig cfg, bool use_double,
              double window_jitter, const std::string& history_csv) {
  const DatasetManifest m = read_manifest(manifest_path);
  const fs::path base = manifest_dir(manifest_path);
  const ManifestClipSource train_clips(m, base, Split::Train);
  const ManifestClipSource val_clips(m, base, Split::Val);
  if (train_clips.size() == 0) throw Error(ErrorCode::EmptySplit, "no train records");
  if (val_clips.size() == 0) throw Error(ErrorCode::EmptySplit, "no val records");
  std::cerr << "train " << train_clips.size() << " clips, val " << val_clips.size() << " clips\n";

  const FeatureSet train_set(train_clips, WindowPlacement{window_jitter, derive_seed(cfg.seed, 11)});
  const FeatureSet val_set(val_clips, WindowPlacement{});
  TrainHistory history;
  Model model;
  if (use_double) {
    model = init_model<double>(cfg.seed);
    history = train(model, train_set.get(), val_set.get(), cfg);
  } else {
    auto mf = init_model<float>(cfg.seed);
    history = train(mf, train_set.get(), val_set.get(), cfg);
    model = mf.cast<double>();
  }
  save_model(model, out);
  if (!history_csv.empty()) history.write_csv(history_csv);
  if (!history.epochs.empty()) {
    const auto& best = history.epochs[static_cast<std::size_t>(history.best_epoch - 1)];
    std::fprintf(stderr, "best epoch %d: val_loss %.4f val_acc %.4f (ran %zu epochs)\n", history.best_epoch,
                 best.val_loss, best.val_acc, history.epochs.size());
  }
  std::cerr << "saved " << out.string() << "\n";
  return 0;
}

int cmd_eval(const fs::path& manifest_path, const fs::path& model_path, const std::string& split_name,
             const NmsConfig& nms, const std::string& metrics_csv, const std::string& roc_dir) {
  const Model model = load_model(model_path);
  const DatasetManifest m = read_manifest(manifest_path);
  EvalConfig cfg;
  cfg.nms = nms;
  const auto result = evaluate_model(model, m, manifest_dir(manifest_path), parse_split(split_name), cfg);
  std::cout << format_eval(result);
  if (!metrics_csv.empty()) write_metrics_csv(result.report, metrics_csv);
  if (!roc_dir.empty()) {
    fs::create_directories(roc_dir);
    for (int c = 0; c < kNumGestures; ++c) {
      const auto& roc = result.roc[static_cast<std::size_t>(c)];
      if (roc.points.empty()) continue;
      write_roc_csv(roc, fs::path(roc_dir) / ("roc_" + std::string(gesture_name(gesture_at(c))) + ".csv"));
    }
  }
  return 0;
}

int cmd_sweep(const fs::path& manifest_path, const fs::path& noise_dir, SweepConfig cfg, const fs::path& out) {
  const DatasetManifest m = read_manifest(manifest_path);
  const fs::path base = manifest_dir(manifest_path);
  auto pick = [&](Split s) {
    ManifestClipSource clean(m, base, s, RecordSource::Clean);
    if (clean.size() > 0) return clean;
    return ManifestClipSource(m, base, s, RecordSource::Synthetic);
  };
  const auto train_clips = pick(Split::Train);
  const auto val_clips = pick(Split::Val);
  const auto test_clips = pick(Split::Test);
  const auto noise = load_noise_dir(noise_dir);
  const auto rows = ratio_sweep(train_clips, val_clips, test_clips, noise, cfg);
  write_sweep_csv(rows, out);
  std::printf("%-6s %-6s %7s %9s %7s %7s %7s\n", "ratio", "test", "epochs", "accuracy", "prec", "recall", "f1");
  for (const auto& r : rows) {
    std::printf("%-6d %-6s %7d %9.4f %7.4f %7.4f %7.4f\n", r.ratio, r.condition.c_str(), r.epochs,
                r.report.overall_accuracy, r.report.macro.precision, r.report.macro.recall, r.report.macro.f1);
  }
  return 0;
}

int cmd_falsealarm(const fs::path& model_path, const std::string& noise_wav, const std::string& synth_kind,
                   double seconds, std::uint64_t seed, const PipelineConfig& cfg) {
  const Model model = load_model(model_path);
  AudioClip stream;
  if (!noise_wav.empty()) {
    stream = to_canonical(load_wav(noise_wav));
  } else {
    stream = synth_noise(parse_noise_kind(synth_kind), seconds, seed);
  }
  const auto profile = false_alarm_profile(model, stream, cfg);
  std::cout << format_profile(profile, cfg.nms);
  return 0;
}

int cmd_detect(const fs::path& model_path, const std::string& replay, bool mic, int mic_rate, bool realtime,
               const std::string& context, const PipelineConfig& cfg) {
  const Model model = load_model(model_path);
  StreamProcessor proc(model, cfg);
  const ActionMapping mapping = ActionMapping::for_context(parse_context(context));
  std::unique_ptr<AudioSource> source;
  if (mic) {
    source = std::make_unique<PcmStreamSource>(std::cin, mic_rate);
  } else {
    source = std::make_unique<ReplaySource>(load_wav(replay), realtime);
  }
  RunOptions opts;
  opts.stop = &g_stop;
  const auto stats = run_stream(*source, proc, [&](const GestureEvent& ev) { print_event(ev, mapping); }, opts);
  std::fprintf(stderr, "%.1f s of audio in %.2f s: %llu triggers, %llu inferences, %llu events\n", stats.stream_s,
               stats.wall_s, static_cast<unsigned long long>(stats.triggers),
               static_cast<unsigned long long>(stats.inferences), static_cast<unsigned long long>(stats.events));
  return 0;
}

int cmd_serve(const fs::path& model_path, ServiceConfig scfg, const std::string& replay, bool mic, int mic_rate,
              bool exit_when_done, const std::string& context, const PipelineConfig& cfg) {
  const Model model = load_model(model_path);
  StreamProcessor proc(model, cfg);
  const ActionMapping mapping = ActionMapping::for_context(parse_context(context));
  scfg.model_id = model_path.stem().string();
  scfg.detector_mode = cfg.detector.mode == ThresholdMode::Adaptive ? "adaptive" : "absolute";
  GestureService service(scfg, hooks_for(proc));
  service.start();
  std::fprintf(stderr, "listening on http://%s:%d\n", scfg.host.c_str(), service.port());

  std::unique_ptr<AudioSource> source;
  if (mic) source = std::make_unique<PcmStreamSource>(std::cin, mic_rate);
  if (!replay.empty()) source = std::make_unique<ReplaySource>(load_wav(replay), true);
  if (source) {
    RunOptions opts;
    opts.stop = &g_stop;
    run_stream(*source, proc, [&](const GestureEvent& ev) {
      service.publish(ev, map_action(ev, mapping));
      print_event(ev, mapping);
    }, opts);
  }
  while (!(exit_when_done && source) && !g_stop.load()) {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }
  service.stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bone-conducted sound gesture toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML file with option values; sections name subcommands");
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "Master seed")->capture_default_str();

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic gesture corpus and manifest")->fallthrough();
  int per_class = 200, noise_clips = 6;
  double noise_seconds = 10.0;
  fs::path synth_out;
  bool no_jitter = false;
  synth->add_option("--per-class", per_class, "Clips per gesture class")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_flag("--no-jitter", no_jitter, "Render the class templates without jitter");
  synth->add_option("--noise-clips", noise_clips, "Background noise clips written to <out>/noise")->capture_default_str();
  synth->add_option("--noise-seconds", noise_seconds, "Length of each noise clip")->capture_default_str();

  // segment
  auto* segment = app.add_subcommand("segment", "Cut a session recording into 1 s labeled clips")->fallthrough();
  std::vector<fs::path> recordings;
  std::string seg_label, recorder = "unknown";
  fs::path seg_out;
  double seg_k = 6.0;
  bool seg_assign = false;
  segment->add_option("--recording", recordings, "Session WAV file(s) of one gesture")->required()->check(CLI::ExistingFile);
  segment->add_option("--label", seg_label, "Gesture performed in the session")->required();
  segment->add_option("--out", seg_out, "Dataset directory (manifest.jsonl is appended)")->required();
  segment->add_option("--recorder", recorder, "Recorder tag stored per record")->capture_default_str();
  segment->add_option("--k", seg_k, "Peak threshold multiplier")->capture_default_str();
  segment->add_flag("--assign-splits", seg_assign, "Assign stratified 70/10/20 splits to the whole manifest");

  // augment
  auto* augment = app.add_subcommand("augment", "Mix clean clips with background noise")->fallthrough();
  fs::path aug_manifest, aug_noise, aug_out;
  AugmentConfig aug_cfg;
  augment->add_option("--manifest", aug_manifest, "Input manifest")->required()->check(CLI::ExistingFile);
  augment->add_option("--noise-dir", aug_noise, "Directory of noise WAV files")->required();
  augment->add_option("--out", aug_out, "Output directory")->required();
  augment->add_option("--ratio", aug_cfg.ratio, "Augmented copies per clean clip")->capture_default_str();
  augment->add_option("--snr-lo", aug_cfg.snr_lo_db, "Lowest SNR (dB)")->capture_default_str();
  augment->add_option("--snr-hi", aug_cfg.snr_hi_db, "Highest SNR (dB)")->capture_default_str();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the CNN on a manifest's train/val splits")->fallthrough();
  fs::path train_manifest, train_out;
  TrainConfig train_cfg;
  bool train_double = false;
  double window_jitter = 0.2;
  std::string history_csv;
  train_cmd->add_option("--manifest", train_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_out, "Model file to write")->required();
  train_cmd->add_option("--epochs", train_cfg.max_epochs, "Maximum epochs")->capture_default_str();
  train_cmd->add_option("--batch", train_cfg.batch_size, "Mini-batch size")->capture_default_str();
  train_cmd->add_option("--lr", train_cfg.learning_rate, "Adam learning rate")->capture_default_str();
  train_cmd->add_option("--patience", train_cfg.early_stop_patience, "Early-stopping patience")->capture_default_str();
  train_cmd->add_option("--window-jitter", window_jitter, "Random training window offset (s)")->capture_default_str();
  train_cmd->add_option("--history", history_csv, "Write per-epoch history CSV");
  train_cmd->add_flag("--double", train_double, "Train in double precision");
  train_cmd->add_flag("--verbose", train_cfg.verbose, "Print per-epoch progress");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Clip-level evaluation with NMS")->fallthrough();
  fs::path eval_manifest, eval_model;
  std::string eval_split = "test", metrics_csv, roc_dir;
  NmsFlags eval_nms;
  eval_cmd->add_option("--manifest", eval_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--model", eval_model, "Model file")->required();
  eval_cmd->add_option("--split", eval_split, "Split to evaluate")->capture_default_str()->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_option("--metrics-csv", metrics_csv, "Write per-class metrics CSV");
  eval_cmd->add_option("--roc-dir", roc_dir, "Write per-class ROC CSVs");
  eval_nms.add(eval_cmd);

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Augmentation ratio sweep")->fallthrough();
  fs::path sweep_manifest, sweep_noise, sweep_out = "sweep.csv";
  SweepConfig sweep_cfg;
  sweep->add_option("--manifest", sweep_manifest, "Clean dataset manifest")->required()->check(CLI::ExistingFile);
  sweep->add_option("--noise-dir", sweep_noise, "Directory of noise WAV files")->required();
  sweep->add_option("--ratios", sweep_cfg.ratios, "Synthesized:clean ratios")->delimiter(',')->capture_default_str();
  sweep->add_option("--epoch-budget", sweep_cfg.epoch_budget, "Clean-set passes per model; epochs scale by 1/(1+r)")->capture_default_str();
  sweep->add_option("--min-epochs", sweep_cfg.min_epochs, "Lower bound on epochs per model")->capture_default_str();
  sweep->add_option("--window-jitter", sweep_cfg.window_jitter_s, "Random training window offset (s)")
      ->capture_default_str();
  sweep->add_option("--out", sweep_out, "CSV output")->capture_default_str();
  sweep->add_flag("--verbose", sweep_cfg.verbose, "Print progress");

  // falsealarm
  auto* fa = app.add_subcommand("falsealarm", "Trigger and false-alarm profile on gesture-free audio")->fallthrough();
  fs::path fa_model;
  std::string fa_wav, fa_kind = "babble";
  double fa_seconds = 300.0;
  DetectorFlags fa_det;
  NmsFlags fa_nms;
  fa->add_option("--model", fa_model, "Model file")->required();
  auto* fa_wav_opt = fa->add_option("--noise", fa_wav, "Gesture-free WAV file")->check(CLI::ExistingFile);
  fa->add_option("--synth", fa_kind, "Synthesize noise of this kind instead")
      ->check(CLI::IsMember({"pink", "brown", "babble"}))
      ->excludes(fa_wav_opt)
      ->capture_default_str();
  fa->add_option("--seconds", fa_seconds, "Synthesized stream length")->capture_default_str();
  fa_det.add(fa);
  fa_nms.add(fa);

  // detect
  auto* detect = app.add_subcommand("detect", "Run the live two-stage detector")->fallthrough();
  fs::path det_model;
  std::string det_replay, det_context = "object_viewer";
  bool det_mic = false, det_realtime = false;
  int mic_rate = kCanonicalRate;
  DetectorFlags det_flags;
  NmsFlags det_nms;
  detect->add_option("--model", det_model, "Model file")->required();
  auto* replay_opt = detect->add_option("--replay", det_replay, "WAV file to replay")->check(CLI::ExistingFile);
  auto* mic_opt = detect->add_flag("--mic", det_mic, "Read s16le mono PCM from standard input");
  replay_opt->excludes(mic_opt);
  detect->add_option("--mic-rate", mic_rate, "Sample rate of the --mic stream")->capture_default_str();
  detect->add_flag("--realtime", det_realtime, "Pace replay to the wall clock");
  detect->add_option("--context", det_context, "Action mapping")->check(CLI::IsMember({"object_viewer", "web_browser"}))->capture_default_str();
  det_flags.add(detect);
  det_nms.add(detect);

  // serve
  auto* serve = app.add_subcommand("serve", "Serve the live event stream over HTTP")->fallthrough();
  fs::path serve_model;
  ServiceConfig scfg;
  std::string serve_replay, serve_ui, serve_context = "object_viewer";
  bool serve_mic = false, exit_when_done = false;
  int serve_mic_rate = kCanonicalRate;
  DetectorFlags serve_det;
  NmsFlags serve_nms;
  serve->add_option("--model", serve_model, "Model file")->required();
  serve->add_option("--port", scfg.port, "TCP port (0 picks one)")->capture_default_str();
  serve->add_option("--host", scfg.host, "Bind address")->capture_default_str();
  auto* sreplay = serve->add_option("--replay", serve_replay, "WAV file replayed in real time")->check(CLI::ExistingFile);
  auto* smic = serve->add_flag("--mic", serve_mic, "Read s16le mono PCM from standard input");
  sreplay->excludes(smic);
  serve->add_option("--mic-rate", serve_mic_rate, "Sample rate of the --mic stream")->capture_default_str();
  serve->add_option("--ui-dir", serve_ui, "Static files served under /ui/")->check(CLI::ExistingDirectory);
  serve->add_option("--context", serve_context, "Action mapping")->check(CLI::IsMember({"object_viewer", "web_browser"}))->capture_default_str();
  serve->add_flag("--exit-when-done", exit_when_done, "Stop once the source ends");
  serve_det.add(serve);
  serve_nms.add(serve);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);

  auto pipeline_config = [](const DetectorFlags& d, const NmsFlags& n) {
    PipelineConfig c;
    c.detector = d.config();
    c.nms = n.config();
    return c;
  };

  try {
    if (*synth) return cmd_synth(seed, per_class, synth_out, no_jitter, noise_clips, noise_seconds);
    if (*segment) return cmd_segment(recordings, seg_label, seg_out, recorder, seg_k, seg_assign, seed);
    if (*augment) {
      aug_cfg.seed = seed;
      return cmd_augment(aug_manifest, aug_noise, aug_out, aug_cfg);
    }
    if (*train_cmd) {
      train_cfg.seed = seed;
      return cmd_train(train_manifest, train_out, train_cfg, train_double, window_jitter, history_csv);
    }
    if (*eval_cmd) return cmd_eval(eval_manifest, eval_model, eval_split, eval_nms.config(), metrics_csv, roc_dir);
    if (*sweep) {
      sweep_cfg.seed = seed;
      sweep_cfg.train.seed = seed;
      return cmd_sweep(sweep_manifest, sweep_noise, sweep_cfg, sweep_out);
    }
    if (*fa) return cmd_falsealarm(fa_model, fa_wav, fa_kind, fa_seconds, seed, pipeline_config(fa_det, fa_nms));
    if (*detect) {
      if (det_replay.empty() && !det_mic) {
        std::cerr << "detect: one of --replay or --mic is required\n";
        return 2;
      }
      return cmd_detect(det_model, det_replay, det_mic, mic_rate, det_realtime, det_context,
                        pipeline_config(det_flags, det_nms));
    }
    if (*serve) {
      if (!serve_ui.empty()) scfg.ui_dir = serve_ui;
      return cmd_serve(serve_model, scfg, serve_replay, serve_mic, serve_mic_rate, exit_when_done, serve_context,
                       pipeline_config(serve_det, serve_nms));
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == ErrorCode::InvalidArgument ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
