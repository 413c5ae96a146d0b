#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>

#include <sys/wait.h>

#include "bonesound/dataset.hpp"
#include "bonesound/pipeline.hpp"
#include "support/fixtures.hpp"
#include "support/temp_dir.hpp"

#include <httplib.h>  // after Eigen, see test_service.cpp

using namespace bonesound;
using namespace bonesound::testing_support;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

CliResult cli(const std::string& args, const TempDir& scratch) {
  const fs::path out = scratch.path() / "stdout.txt", err = scratch.path() / "stderr.txt";
  const std::string cmd = std::string("'") + BONESOUND_CLI_PATH + "' " + args + " >'" + out.string() + "' 2>'" +
                          err.string() + "' </dev/null";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::size_t count_wavs(const fs::path& dir) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ".wav";
  return n;
}

// Quiet stream with synthetic gestures placed at the given peak times.
fs::path write_stream(const fs::path& dir, double seconds, const std::vector<PlacedGesture>& g) {
  Eigen::VectorXd x = quiet_floor(seconds, 0.002, 31);
  place_gestures(x, g, 17);
  const fs::path p = dir / "stream.wav";
  save_wav(AudioClip(x, kCanonicalRate), p, WavEncoding::Float32);
  return p;
}

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  TempDir d;
  EXPECT_EQ(cli("", d).code, 2);
  const CliResult unknown = cli("frobnicate", d);
  EXPECT_EQ(unknown.code, 2);
  EXPECT_FALSE(unknown.err.empty());
  EXPECT_EQ(cli("synth", d).code, 2);  // --out required
  EXPECT_EQ(cli("synth --out x --per-class -3", d).code, 2);
  EXPECT_EQ(cli("--help", d).code, 0);
  EXPECT_EQ(cli("train --help", d).code, 0);
}

TEST(Cli, SynthWritesCorpusAndNoise) {
  TempDir d;
  const CliResult r = cli("--seed 4 synth --per-class 12 --noise-clips 3 --noise-seconds 2 --out " + q(d.path() / "data"), d);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_wavs(d.path() / "data/clips"), 60u);
  EXPECT_EQ(count_wavs(d.path() / "data/noise"), 3u);
  const auto rep = validate_manifest(d.path() / "data/manifest.jsonl");
  EXPECT_EQ(rep.total, 60u);
  EXPECT_TRUE(rep.proportions_ok);
  EXPECT_EQ(read_manifest(d.path() / "data/manifest.jsonl").created_with.at("seed"), 4);
}

TEST(Cli, ConfigFileSuppliesOptions) {
  TempDir d;
  const fs::path cfg = d.path() / "run.toml";
  std::ofstream(cfg) << "seed = 9\n\n[synth]\nper-class = 10\nnoise-clips = 0\nout = \""
                     << (d.path() / "fromcfg").string() << "\"\n";
  const CliResult r = cli("synth --config " + q(cfg), d);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_wavs(d.path() / "fromcfg/clips"), 50u);
  EXPECT_FALSE(fs::exists(d.path() / "fromcfg/noise"));
  EXPECT_EQ(read_manifest(d.path() / "fromcfg/manifest.jsonl").created_with.at("seed"), 9);
}

TEST(Cli, AugmentKeepsSplitsAndCounts) {
  TempDir d;
  ASSERT_EQ(cli("synth --per-class 10 --noise-clips 2 --noise-seconds 2 --out " + q(d.path() / "data"), d).code, 0);
  const CliResult r = cli("augment --ratio 2 --manifest " + q(d.path() / "data/manifest.jsonl") + " --noise-dir " +
                        q(d.path() / "data/noise") + " --out " + q(d.path() / "aug"),
                    d);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = validate_manifest(d.path() / "aug/manifest.jsonl");
  EXPECT_EQ(rep.total, 150u);
  EXPECT_EQ(rep.per_source.at("augmented"), 100u);
  EXPECT_EQ(rep.by_source_split.at("augmented").at("test"), 20u);
  EXPECT_EQ(count_wavs(d.path() / "aug/augmented"), 100u);

  const CliResult bad = cli("augment --ratio 0 --manifest " + q(d.path() / "data/manifest.jsonl") + " --noise-dir " +
                          q(d.path() / "data/noise") + " --out " + q(d.path() / "aug2"),
                      d);
  EXPECT_EQ(bad.code, 2);
}

TEST(Cli, SegmentRecordings) {
  TempDir d;
  Eigen::VectorXd x = quiet_floor(12.0, 0.002, 3);
  std::vector<PlacedGesture> want;
  for (int i = 0; i < 5; ++i) want.push_back({Gesture::Pinch, 1.5 + 2.0 * i});
  place_gestures(x, want, 2);
  save_wav(AudioClip(x, kCanonicalRate), d.path() / "session.wav");
  const CliResult r = cli("segment --recording " + q(d.path() / "session.wav") + " --label pinch --recorder extmic --out " +
                        q(d.path() / "ds"),
                    d);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = read_manifest(d.path() / "ds/manifest.jsonl");
  ASSERT_EQ(m.records.size(), 5u);
  for (const auto& rec : m.records) {
    EXPECT_EQ(rec.label, Gesture::Pinch);
    EXPECT_EQ(rec.recorder, "extmic");
    EXPECT_EQ(rec.source, RecordSource::Clean);
  }
  EXPECT_EQ(cli("segment --recording " + q(d.path() / "session.wav") + " --label wave --out " + q(d.path() / "ds"), d)
                .code,
            1);
}

TEST(Cli, TrainThenEvalPrintsReport) {
  TempDir d;
  ASSERT_EQ(cli("--seed 2 synth --per-class 20 --noise-clips 0 --out " + q(d.path() / "data"), d).code, 0);
  const CliResult t = cli("--seed 2 train --epochs 4 --batch 16 --manifest " + q(d.path() / "data/manifest.jsonl") +
                        " --out " + q(d.path() / "model.json") + " --history " + q(d.path() / "hist.csv"),
                    d);
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_TRUE(fs::exists(d.path() / "model.json"));
  EXPECT_NO_THROW(load_model(d.path() / "model.json"));
  const std::string hist = slurp(d.path() / "hist.csv");
  EXPECT_EQ(std::count(hist.begin(), hist.end(), '\n'), 5);  // header + 4 epochs

  const CliResult e = cli("eval --manifest " + q(d.path() / "data/manifest.jsonl") + " --model " +
                        q(d.path() / "model.json") + " --metrics-csv " + q(d.path() / "m.csv") + " --roc-dir " +
                        q(d.path() / "roc"),
                    d);
  ASSERT_EQ(e.code, 0) << e.err;
  for (const char* row : {"Precision", "pinch", "rub_up", "rub_down", "flick", "open_palm", "Average", "confusion"}) {
    EXPECT_NE(e.out.find(row), std::string::npos) << row;
  }
  EXPECT_NE(e.out.find("over 20 clips"), std::string::npos);
  EXPECT_TRUE(fs::exists(d.path() / "m.csv"));

  EXPECT_EQ(cli("eval --manifest " + q(d.path() / "data/manifest.jsonl") + " --model " + q(d.path() / "none.json"), d)
                .code,
            1);
  EXPECT_EQ(cli("eval --epsilon 0.5 --manifest " + q(d.path() / "data/manifest.jsonl") + " --model " +
                    q(d.path() / "model.json"),
                d)
                .code,
            2);
}

TEST(Cli, DetectReplayPrintsEvents) {
  TempDir d;
  save_model(constant_model(3, 20.0), d.path() / "flick.json");
  const fs::path wav = write_stream(d.path(), 9.0, {{Gesture::Flick, 2.5}, {Gesture::Flick, 4.5}, {Gesture::Flick, 6.5}});
  const CliResult r = cli("detect --model " + q(d.path() / "flick.json") + " --replay " + q(wav), d);
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream lines(r.out);
  std::vector<nlohmann::json> events;
  for (std::string line; std::getline(lines, line);) events.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(events.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(events[i]["seq"], i + 1);
    EXPECT_EQ(events[i]["gesture"], "flick");
    EXPECT_EQ(events[i]["action"], "zoom_out");
  }
  const CliResult browser = cli("detect --context web_browser --model " + q(d.path() / "flick.json") + " --replay " + q(wav), d);
  EXPECT_NE(browser.out.find("\"go_back\""), std::string::npos);

  EXPECT_EQ(cli("detect --model " + q(d.path() / "flick.json"), d).code, 2);
  EXPECT_EQ(cli("detect --det-k -1 --model " + q(d.path() / "flick.json") + " --replay " + q(wav), d).code, 2);
}

TEST(Cli, DetectFromPcmStdin) {
  TempDir d;
  save_model(constant_model(0, 20.0), d.path() / "pinch.json");
  Eigen::VectorXd x = quiet_floor(5.0, 0.002, 4);
  place_gestures(x, {{Gesture::Pinch, 2.5}}, 5);
  {
    std::ofstream pcm(d.path() / "in.pcm", std::ios::binary);
    for (double v : x) {
      const auto s = static_cast<std::int16_t>(std::lround(std::clamp(v, -1.0, 1.0) * 32767));
      pcm.put(static_cast<char>(s & 0xFF));
      pcm.put(static_cast<char>((static_cast<std::uint16_t>(s) >> 8) & 0xFF));
    }
  }
  const std::string cmd = std::string("'") + BONESOUND_CLI_PATH + "' detect --mic --model " + q(d.path() / "pinch.json") +
                          " <" + q(d.path() / "in.pcm") + " >" + q(d.path() / "o.txt") + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 0);
  const std::string out = slurp(d.path() / "o.txt");
  EXPECT_EQ(std::count(out.begin(), out.end(), '\n'), 1);
  EXPECT_NE(out.find("\"zoom_in\""), std::string::npos);
}

TEST(Cli, FalseAlarmReport) {
  TempDir d;
  save_model(constant_model(1, 20.0), d.path() / "m.json");
  const CliResult r = cli("falsealarm --synth babble --seconds 30 --model " + q(d.path() / "m.json"), d);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("false alarms at 0.70"), std::string::npos);
  EXPECT_NE(r.out.find("false alarms at 0.60"), std::string::npos);
  EXPECT_EQ(cli("falsealarm --synth hum --model " + q(d.path() / "m.json"), d).code, 2);
}

TEST(Cli, ServeExposesHealthAndEvents) {
  TempDir d;
  save_model(constant_model(4, 20.0), d.path() / "palm.json");
  const fs::path wav = write_stream(d.path(), 4.0, {{Gesture::OpenPalm, 2.5}});
  const std::string cmd = std::string("'") + BONESOUND_CLI_PATH + "' serve --port 0 --exit-when-done --model " +
                          q(d.path() / "palm.json") + " --replay " + q(wav) + " 2>&1 </dev/null";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  ASSERT_NE(pipe, nullptr);
  int port = 0;
  std::vector<std::string> lines;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) {
    lines.emplace_back(buf);
    std::smatch m;
    if (std::regex_search(lines.back(), m, std::regex(R"(listening on http://[^:]+:(\d+))"))) {
      port = std::stoi(m[1]);
      break;
    }
  }
  ASSERT_GT(port, 0);
  httplib::Client http("127.0.0.1", port);
  auto h = http.Get("/health");
  ASSERT_TRUE(h);
  EXPECT_EQ(h->body, "ok");
  auto s = http.Get("/state");
  ASSERT_TRUE(s);
  const auto state = nlohmann::json::parse(s->body);
  EXPECT_EQ(state["model_id"], "palm");
  EXPECT_EQ(state["detector_mode"], "adaptive");

  // the replay runs in real time; its one event is echoed on stdout
  while (std::fgets(buf, sizeof buf, pipe)) lines.emplace_back(buf);
  const int status = ::pclose(pipe);
  EXPECT_TRUE(WIFEXITED(status) && WEXITSTATUS(status) == 0);
  int events = 0;
  for (const auto& l : lines) events += l.find("\"default_view\"") != std::string::npos;
  EXPECT_EQ(events, 1);
}
