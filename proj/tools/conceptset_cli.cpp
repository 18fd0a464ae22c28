#include <csignal>
#include <cstdio>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "conceptset/error.hpp"
#include "conceptset/fixture.hpp"
#include "conceptset/pipeline.hpp"
#include "conceptset/review.hpp"

namespace cs = conceptset;

namespace {

struct Overrides {
  std::string config = "config.json";
  std::string run_dir;
  std::string provider;
  std::optional<std::size_t> runs, chunk_size, k, hops, max_neighbours;
};

cs::PipelineConfig load_config(const Overrides& o) {
  auto config = cs::PipelineConfig::load(o.config);
  if (!o.run_dir.empty()) config.run_dir = std::filesystem::absolute(o.run_dir);
  if (!o.provider.empty()) config.chat.provider = o.provider;
  if (o.runs) config.curation.runs = *o.runs;
  if (o.chunk_size) config.curation.chunk_size = *o.chunk_size;
  if (o.k) config.retrieval.k = *o.k;
  if (o.hops) config.retrieval.hops = *o.hops;
  if (o.max_neighbours) config.retrieval.max_neighbours = *o.max_neighbours;
  return config;
}

void report(const cs::StageResult& r) {
  std::cout << r.stage << (r.skipped ? ": up to date" : ": done") << '\n';
  if (!r.summary.empty()) std::cout << r.summary << (r.summary.back() == '\n' ? "" : "\n");
}

int serve(const cs::PipelineConfig& config, const std::string& host, std::optional<int> port,
          const std::string& static_dir) {
  auto review = config.review;
  if (!host.empty()) review.host = host;
  if (port) review.port = *port;
  if (!static_dir.empty()) review.static_dir = static_dir;
  if (review.tokens.empty())
    throw cs::Error(cs::ErrorCode::kInvalidArgument, "review.tokens is empty; nobody could sign in");

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  cs::ReviewStore store(config.run_dir / "review", cs::queue_loader_from_dir(config.run_dir / "candidates"));
  cs::ReviewServer server(store, review);
  const int bound = server.bind();
  std::cout << "listening on http://" << review.host << ':' << bound << std::endl;
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    server.stop();
  });
  server.serve();
  // serve() also returns on bind/listen failure; wake the waiter either way.
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept-set curation pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  Overrides o;
  app.add_option("--config", o.config, "Pipeline config file")->capture_default_str();
  app.add_option("--run-dir", o.run_dir, "Override the run directory");
  app.add_option("--provider", o.provider, "Chat provider: mock-permissive, mock-strict or openai");
  app.add_option("--runs", o.runs, "Curation runs per target");
  app.add_option("--chunk-size", o.chunk_size, "Candidates per prompt");
  app.add_option("--k", o.k, "Seed count");
  app.add_option("--hops", o.hops, "Edge traversals from seeds");
  app.add_option("--max-neighbours", o.max_neighbours, "Candidate cap");

  auto* fixture = app.add_subcommand("fixture", "Synthetic RRF fixture");
  fixture->require_subcommand(1);
  auto* generate = fixture->add_subcommand("generate", "Write a fixture directory");
  std::string out_dir;
  cs::fixture::FixtureParams params;
  generate->add_option("--out", out_dir, "Output directory")->required();
  generate->add_option("--seed", params.seed)->capture_default_str();
  generate->add_option("--concepts", params.n_concepts)->capture_default_str();
  generate->add_option("--targets", params.n_targets)->capture_default_str();

  auto* ingest = app.add_subcommand("ingest", "Parse RRF files");
  auto* graph = app.add_subcommand("graph", "Concept graph");
  graph->require_subcommand(1);
  auto* graph_build = graph->add_subcommand("build", "Build full and restricted graphs");
  auto* graph_stats = graph->add_subcommand("stats", "Print graph statistics as JSON");
  auto* embed = app.add_subcommand("embed", "Embed restricted graph nodes");
  auto* index = app.add_subcommand("index", "Vector index");
  index->require_subcommand(1);
  auto* index_build = index->add_subcommand("build", "Build the flat L2 index");
  auto* retrieve = app.add_subcommand("retrieve", "Retrieve candidates per target");
  auto* sweep = app.add_subcommand("sweep", "Retrieval parameter sweep against manual sets");
  auto* curate = app.add_subcommand("curate", "LLM filtering and classification");
  auto* evaluate = app.add_subcommand("evaluate", "Evaluation report");
  auto* review = app.add_subcommand("review", "Clinician review service");
  review->require_subcommand(1);
  auto* review_serve = review->add_subcommand("serve", "Run the review HTTP service");
  std::string host, static_dir;
  std::optional<int> port;
  review_serve->add_option("--host", host);
  review_serve->add_option("--port", port, "0 picks a free port");
  review_serve->add_option("--static", static_dir, "Directory with the review UI bundle");

  CLI11_PARSE(app, argc, argv);

  try {
    if (generate->parsed()) {
      const auto files = cs::fixture::generate_fixture(params);
      cs::fixture::write_fixture(files, out_dir);
      std::cout << "fixture written to " << out_dir << " (" << files.manifest.n_concepts << " concepts, "
                << files.manifest.targets.size() << " targets)\n";
      return 0;
    }
    const auto config = load_config(o);
    if (review_serve->parsed()) return serve(config, host, port, static_dir);
    cs::Pipeline pipeline(config);
    if (ingest->parsed()) report(pipeline.ingest());
    else if (graph_build->parsed()) report(pipeline.graph_build());
    else if (graph_stats->parsed()) std::cout << pipeline.graph_stats().summary;
    else if (embed->parsed()) report(pipeline.embed());
    else if (index_build->parsed()) report(pipeline.index_build());
    else if (retrieve->parsed()) report(pipeline.retrieve());
    else if (sweep->parsed()) report(pipeline.sweep());
    else if (curate->parsed()) report(pipeline.curate());
    else if (evaluate->parsed()) report(pipeline.evaluate());
    return 0;
  } catch (const cs::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
