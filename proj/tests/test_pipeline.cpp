#include <gtest/gtest.h>
#include <sys/file.h>
#include <sys/wait.h>
#include <fcntl.h>
#include <unistd.h>

#include <array>
#include <cstdio>
#include <fstream>

#include "conceptset/curation.hpp"
#include "conceptset/error.hpp"
#include "conceptset/pipeline.hpp"
#include "support.hpp"

using namespace conceptset;
using testing_support::TempDir;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int status = -1;
  std::string output;  // stdout and stderr together
};

CliResult cli(const fs::path& cwd, const std::string& args) {
  const std::string command = "cd '" + cwd.string() + "' && '" CONCEPTSET_CLI "' " + args + " 2>&1";
  CliResult r;
  FILE* pipe = ::popen(command.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buffer;
  while (auto n = std::fread(buffer.data(), 1, buffer.size(), pipe)) r.output.append(buffer.data(), n);
  const int raw = ::pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class PipelineCli : public ::testing::Test {
 protected:
  void SetUp() override {
    auto r = cli(dir.path(), "fixture generate --out . --seed 7 --concepts 500");
    ASSERT_EQ(r.status, 0) << r.output;
  }
  CliResult run(const std::string& args) { return cli(dir.path(), args); }

  TempDir dir;
};

}  // namespace

TEST_F(PipelineCli, FullRunMatchesManifestAndIsDeterministic) {
  for (const char* stage : {"ingest", "graph build", "embed", "index build", "retrieve", "sweep",
                            "curate --runs 3", "evaluate"}) {
    auto r = run(stage);
    ASSERT_EQ(r.status, 0) << stage << "\n" << r.output;
    EXPECT_NE(r.output.find(": done"), std::string::npos) << stage << "\n" << r.output;
  }
  auto stats = run("graph stats");
  ASSERT_EQ(stats.status, 0) << stats.output;
  const auto s = nlohmann::json::parse(stats.output);
  const auto manifest = read_json(dir / "manifest.json");
  EXPECT_EQ(s["graph"]["node_count"], manifest["graph_nodes"]);
  EXPECT_EQ(s["graph"]["edge_count"], manifest["graph_edges"]);
  EXPECT_EQ(s["restricted"]["node_count"], manifest["restricted_nodes"]);
  EXPECT_EQ(s["restricted"]["edge_count"], manifest["restricted_edges"]);
  EXPECT_EQ(s["graph"]["directed_edge_count"], 2 * manifest["graph_edges"].get<int>());

  const auto run_dir = dir / "run";
  for (const auto& t : manifest["targets"]) {
    const std::string id = t["id"];
    EXPECT_TRUE(fs::exists(run_dir / "candidates" / (id + ".tsv")));
    EXPECT_TRUE(fs::exists(run_dir / "sweep" / (id + ".json")));
    EXPECT_TRUE(fs::exists(run_dir / "plots" / (id + ".csv")));
    const auto first = slurp(run_dir / "curated" / id / "run-1" / "curated.json");
    ASSERT_FALSE(first.empty());
    for (int n = 2; n <= 3; ++n)
      EXPECT_EQ(slurp(run_dir / "curated" / id / ("run-" + std::to_string(n)) / "curated.json"), first);
    auto meta = read_json(run_dir / "curated" / id / "run-2" / "run_meta.json");
    EXPECT_EQ(meta["run"], 2);
    EXPECT_EQ(CuratedSet::from_json(nlohmann::json::parse(first)).status, RunStatus::kComplete);
  }
  EXPECT_TRUE(fs::exists(run_dir / "report.json"));
  EXPECT_NE(slurp(run_dir / "report.txt").find("target"), std::string::npos);

  // A second pass does no work.
  for (const char* stage : {"ingest", "graph build", "embed", "index build", "retrieve"}) {
    auto r = run(stage);
    ASSERT_EQ(r.status, 0) << r.output;
    EXPECT_NE(r.output.find("up to date"), std::string::npos) << stage << "\n" << r.output;
  }
  // Changed parameters invalidate the stage.
  auto changed = run("retrieve --k 100");
  ASSERT_EQ(changed.status, 0) << changed.output;
  EXPECT_NE(changed.output.find(": done"), std::string::npos);
}

TEST_F(PipelineCli, MissingUpstreamArtifactIsAStageDependencyError) {
  ASSERT_EQ(run("ingest").status, 0);
  ASSERT_EQ(run("graph build").status, 0);
  auto r = run("retrieve");
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.output.find("stage-dependency"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("index.bin"), std::string::npos) << r.output;
}

TEST_F(PipelineCli, ConcurrentStageIsRefusedByTheRunLock) {
  fs::create_directories(dir / "run");
  const int fd = ::open((dir / "run" / ".lock").c_str(), O_RDWR | O_CREAT, 0644);
  ASSERT_GE(fd, 0);
  ASSERT_EQ(::flock(fd, LOCK_EX | LOCK_NB), 0);
  auto r = run("ingest");
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.output.find("locked"), std::string::npos) << r.output;
  ::flock(fd, LOCK_UN);
  ::close(fd);
  EXPECT_EQ(run("ingest").status, 0);
}

TEST_F(PipelineCli, BadConfigAndUsageFail) {
  EXPECT_NE(run("--config absent.json ingest").status, 0);
  EXPECT_NE(run("").status, 0);
  EXPECT_EQ(run("--provider nonsense curate").status, 1);
}

TEST(PipelineConfig, RelativePathsResolveAgainstBase) {
  TempDir dir;
  auto j = nlohmann::json::parse(R"({"rrf_dir":"rrf","run_dir":"out","targets":"t.json",
                                     "retrieval":{"k":12,"hops":1},"curation":{"runs":2}})");
  auto c = PipelineConfig::from_json(j, dir.path());
  EXPECT_EQ(c.rrf_dir, dir / "rrf");
  EXPECT_EQ(c.run_dir, dir / "out");
  EXPECT_EQ(c.retrieval.k, 12u);
  EXPECT_EQ(c.retrieval.hops, 1u);
  EXPECT_EQ(c.curation.runs, 2u);
  EXPECT_THROW(c.validate(), Error);  // the RRF directory does not exist
  j["retrieval"]["k"] = "many";
  try {
    PipelineConfig::from_json(j, dir.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParse);
  }
}
