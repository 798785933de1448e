#pragma once
// deepedit command line: build, probe, eval, stats, mock-edit, sequence, seeds, serve.
// Exit codes: 0 ok, 2 config error, 3 data error, 4 endpoint error.

#include <csignal>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "deepedit/dataset_io.hpp"
#include "deepedit/endpoint_config.hpp"
#include "deepedit/error.hpp"
#include "deepedit/evaluation.hpp"
#include "deepedit/http_responder.hpp"
#include "deepedit/pipeline.hpp"
#include "deepedit/review_service.hpp"

namespace deepedit::cli {

inline std::shared_ptr<const Responder> make_responder(const EndpointFile& f) {
  if (f.is_mock()) return make_mock_responder(*f.mock);
  return std::make_shared<HttpResponder>(f.endpoint);
}

inline Triplet parse_seed_arg(const std::string& s) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == '|') {
      parts.push_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  if (parts.size() != 3) throw Error(ErrorCode::ConfigError, "--seed expects subject|relation|object");
  try {
    return make_triplet(parts[0], parts[1], parts[2]);
  } catch (const Error& e) {
    throw Error(ErrorCode::ConfigError, e.what());
  }
}

struct PipelineArgs {
  std::string seed;
  std::string seeds_file;
  int seed_row = 0;
  std::string graph_id = "graph";
  std::string endpoint_config;
  std::string templates_dir;
  int k_max = 3;
  int l_max = kMaxChainLength;
  int max_iterations = 8;
  std::string checkpoint;

  void add_to(CLI::App* app) {
    app->add_option("--seed", seed, "seed triplet as subject|relation|object");
    app->add_option("--seeds", seeds_file, "seed template file (CSV or JSON)");
    app->add_option("--row", seed_row, "row of --seeds to use (0-based)");
    app->add_option("--graph-id", graph_id, "id of the graph being built");
    app->add_option("--endpoint-config", endpoint_config, "endpoint config JSON")->required();
    app->add_option("--templates", templates_dir, "directory of prompt template overrides");
    app->add_option("--k-max", k_max, "validation attempts before discard");
    app->add_option("--l-max", l_max, "maximum chain length");
    app->add_option("--max-iterations", max_iterations, "chain-of-thought expansion budget");
    app->add_option("--checkpoint", checkpoint, "pipeline checkpoint file");
  }

  Triplet seed_triplet() const {
    if (!seed.empty()) return parse_seed_arg(seed);
    if (seeds_file.empty()) throw Error(ErrorCode::ConfigError, "give --seed or --seeds");
    const auto seeds = import_seed_templates(seeds_file);
    if (seed_row < 0 || static_cast<std::size_t>(seed_row) >= seeds.size()) {
      throw Error(ErrorCode::ConfigError, "--row " + std::to_string(seed_row) + " outside " + seeds_file);
    }
    return seeds[static_cast<std::size_t>(seed_row)].triplet;
  }

  PipelineConfig config(const EndpointFile& endpoint) const {
    PipelineConfig c;
    c.k_max = k_max;
    c.l_max = l_max;
    c.max_iterations = max_iterations;
    c.endpoint = endpoint.endpoint;
    if (!templates_dir.empty()) c.templates = QueryTemplates::load(templates_dir);
    c.validate();
    return c;
  }
};

inline void print(std::ostream& out, const nlohmann::json& j) { out << canonical_dump(j); }

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Deep-editing evaluation toolkit"};
  app.require_subcommand(1);

  // build
  PipelineArgs build_args;
  std::string build_out, decisions_file;
  bool resume = false;
  auto* build = app.add_subcommand("build", "run the graph construction pipeline with scripted review decisions");
  build_args.add_to(build);
  build->add_option("--decisions", decisions_file, "decision script JSON");
  build->add_option("--out", build_out, "bundle name to write")->required();
  build->add_flag("--resume", resume, "continue from --checkpoint");

  // probe
  std::string phase_name = "pre", probe_bundle_name, probe_endpoint, probe_out, transcripts_out;
  bool probe_dry = false, conversation = false;
  auto* probe = app.add_subcommand("probe", "sample an endpoint on every chain step and contextual edge");
  probe->add_option("--phase", phase_name, "pre or post")->check(CLI::IsMember({"pre", "post"}));
  probe->add_option("--bundle", probe_bundle_name, "bundle name")->required();
  probe->add_option("--endpoint-config", probe_endpoint, "endpoint config JSON")->required();
  probe->add_option("--out", probe_out, "probe records (.jsonl)");
  probe->add_option("--transcripts", transcripts_out, "raw responses (.jsonl)");
  probe->add_flag("--dry-run", probe_dry, "validate inputs without contacting the endpoint");
  probe->add_flag("--conversation", conversation, "thread earlier chain answers into later queries");

  // eval
  std::string eval_bundle, pre_file, post_file, report_out, preferences_file, texts_file;
  bool eval_dry = false, as_printed = false;
  auto* eval = app.add_subcommand("eval", "compute the metrics report from pre/post probe records");
  eval->add_option("--bundle", eval_bundle, "bundle name")->required();
  eval->add_option("--pre", pre_file, "pre-edit probe records")->required();
  eval->add_option("--post", post_file, "post-edit probe records")->required();
  eval->add_option("--out", report_out, "report file");
  eval->add_option("--preferences", preferences_file, "preference cases JSON");
  eval->add_option("--texts", texts_file, "generated texts JSON for fluency/consistency");
  eval->add_flag("--fluency-as-printed", as_printed, "subtract the trigram term");
  eval->add_flag("--dry-run", eval_dry, "check schemas only");

  // stats
  std::string stats_bundle;
  auto* stats_cmd = app.add_subcommand("stats", "chain counts per length");
  stats_cmd->add_option("--bundle", stats_bundle, "bundle name")->required();

  // mock-edit
  std::string mock_bundle, scope_name = "shallow", new_object, mock_out, mock_pre_out, mock_post_out;
  double noise = 0.0;
  std::uint64_t mock_seed = 0;
  int samples = 5;
  bool mock_conversation = false;
  auto* mock = app.add_subcommand("mock-edit", "probe a graph-backed mock before and after a simulated edit");
  mock->add_option("--bundle", mock_bundle, "bundle name")->required();
  mock->add_option("--scope", scope_name, "shallow or deep")->check(CLI::IsMember({"shallow", "deep"}));
  mock->add_option("--noise", noise, "probability of flipping a mock answer");
  mock->add_option("--seed", mock_seed, "mock RNG seed");
  mock->add_option("--samples", samples, "samples per query");
  mock->add_option("--new-object", new_object, "replacement for each seed object");
  mock->add_option("--out", mock_out, "report file");
  mock->add_option("--pre-out", mock_pre_out, "pre-edit probe records");
  mock->add_option("--post-out", mock_post_out, "post-edit probe records");
  mock->add_flag("--conversation", mock_conversation, "thread earlier chain answers into later queries");

  // sequence
  std::string graphs_in, sequence_out;
  int sequence_l_max = kMaxChainLength;
  auto* sequence = app.add_subcommand("sequence", "derive seed chains and query sequences for existing graphs");
  sequence->add_option("--graphs", graphs_in, "graph file (.graph.json)")->required();
  sequence->add_option("--l-max", sequence_l_max, "maximum chain length");
  sequence->add_option("--out", sequence_out, "bundle name to write")->required();

  // seeds
  std::string seeds_in;
  auto* seeds_cmd = app.add_subcommand("seeds", "parse a seed template file");
  seeds_cmd->add_option("--file", seeds_in, "CSV or JSON seed file")->required();

  // serve
  PipelineArgs serve_args;
  int port = 8765;
  std::string host = "127.0.0.1";
  auto* serve = app.add_subcommand("serve", "serve the review API on localhost");
  serve_args.add_to(serve);
  serve->add_option("--port", port, "TCP port");
  serve->add_option("--host", host, "bind address");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n";
    return 2;
  }

  try {
    if (*build) {
      const auto endpoint = load_endpoint_file(build_args.endpoint_config);
      const auto config = build_args.config(endpoint);
      auto responder = make_responder(endpoint);
      std::optional<Pipeline> pipeline;
      if (resume) {
        if (build_args.checkpoint.empty()) throw Error(ErrorCode::ConfigError, "--resume needs --checkpoint");
        const auto j = parse_json(read_file(build_args.checkpoint), build_args.checkpoint);
        pipeline.emplace(Pipeline::restore(j.contains("pipeline") ? j.at("pipeline") : j, config, responder));
      } else {
        pipeline.emplace(config, responder, build_args.seed_triplet(), build_args.graph_id);
      }
      if (!build_args.checkpoint.empty()) pipeline->set_checkpoint_path(build_args.checkpoint);
      std::vector<ScriptedDecision> decisions;
      if (!decisions_file.empty()) {
        decisions = decisions_from_json(parse_json(read_file(decisions_file), decisions_file));
      }
      run_scripted(*pipeline, decisions);
      const auto bundle = pipeline->bundle();
      if (bundle.graphs.empty()) throw Error(ErrorCode::InvariantViolation, "seed fact was discarded; nothing to save");
      save_bundle(bundle, build_out);
      print(out, {{"digest", pipeline->digest()},
                  {"edges", bundle.graphs.front().edge_count()},
                  {"stats", to_json(stats(bundle))},
                  {"discarded", pipeline->discarded()}});
      return 0;
    }

    if (*probe) {
      const auto bundle = load_bundle(probe_bundle_name);
      const auto endpoint = load_endpoint_file(probe_endpoint);
      const auto phase = phase_name == "pre" ? Phase::Pre : Phase::Post;
      std::size_t queries = context_probes(bundle).size();
      for (const auto& c : bundle.chains) queries += c.steps.size();
      if (probe_dry) {
        print(out, {{"dry_run", true},
                    {"phase", phase_name},
                    {"queries", queries},
                    {"samples", queries * static_cast<std::size_t>(endpoint.endpoint.samples_per_query)}});
        return 0;
      }
      if (probe_out.empty()) throw Error(ErrorCode::ConfigError, "--out is required unless --dry-run");
      auto responder = make_responder(endpoint);
      ProbeRunOptions opts;
      opts.phase = phase;
      opts.conversation = conversation;
      opts.keep_raw_responses = !transcripts_out.empty();
      auto records = probe_bundle(bundle, *responder, endpoint.endpoint, opts);
      if (!transcripts_out.empty()) {
        std::vector<TranscriptLine> lines;
        for (const auto& r : records) {
          for (auto& l : transcript_lines(r.steps)) lines.push_back(std::move(l));
        }
        write_file_atomic(transcripts_out, transcripts_jsonl(lines));
        for (auto& r : records) {
          for (auto& s : r.steps) s.raw_responses.reset();
        }
      }
      save_probes(records, probe_out);
      std::size_t failed = 0;
      for (const auto& r : records) {
        for (const auto& s : r.steps) failed += s.p ? 0 : 1;
      }
      print(out, {{"phase", phase_name}, {"records", records.size()}, {"queries", queries}, {"failed", failed}});
      return failed == 0 ? 0 : exit_code_for(ErrorCode::EndpointFailure);
    }

    if (*eval) {
      if (!eval_dry && std::filesystem::weakly_canonical(pre_file) == std::filesystem::weakly_canonical(post_file)) {
        throw Error(ErrorCode::ConfigError, "--pre and --post name the same file");
      }
      const auto bundle = load_bundle(eval_bundle);
      const auto pre = load_probes(pre_file);
      const auto post = load_probes(post_file);
      if (eval_dry) {
        check_probe_schema(bundle, pre, Phase::Pre);
        check_probe_schema(bundle, post, Phase::Post);
        print(out, {{"dry_run", true}, {"chains", bundle.chains.size()}, {"records", pre.size()}});
        return 0;
      }
      ReportInputs inputs;
      if (!preferences_file.empty()) inputs.preferences = load_preferences(preferences_file);
      if (!texts_file.empty()) inputs.texts = load_text_samples(texts_file);
      inputs.fluency_sign = as_printed ? FluencySign::AsPrinted : FluencySign::Intended;
      const auto report = build_report(bundle, pre, post, inputs);
      if (!report_out.empty()) save_report(report, report_out);
      print(out, to_json(report));
      return 0;
    }

    if (*stats_cmd) {
      print(out, to_json(stats(load_bundle(stats_bundle))));
      return 0;
    }

    if (*mock) {
      const auto bundle = load_bundle(mock_bundle);
      MockExperimentConfig config;
      config.scope = edit_scope_from_string(scope_name);
      config.noise = noise;
      config.seed = mock_seed;
      config.new_object = new_object;
      config.endpoint.samples_per_query = samples;
      config.conversation = mock_conversation;
      config.endpoint.validate();
      if (!(noise >= 0.0 && noise < 1.0)) throw Error(ErrorCode::ConfigError, "--noise must be in [0, 1)");
      const auto result = run_mock_experiment(bundle, config);
      if (!mock_pre_out.empty()) save_probes(result.pre, mock_pre_out);
      if (!mock_post_out.empty()) save_probes(result.post, mock_post_out);
      if (!mock_out.empty()) save_report(result.report, mock_out);
      print(out, to_json(result.report));
      return 0;
    }

    if (*sequence) {
      const auto doc = parse_json(read_file(graphs_in), graphs_in);
      std::vector<KnowledgeGraph> graphs;
      for (const auto& g : convert("graphs", [&] { return doc.at("graphs"); })) {
        graphs.push_back(convert(graphs_in, [&] { return graph_from_json(g); }));
      }
      check_length(sequence_l_max);
      const auto bundle = bundle_from_graphs(graphs, sequence_l_max);
      validate_bundle(bundle);
      save_bundle(bundle, sequence_out);
      print(out, to_json(stats(bundle)));
      return 0;
    }

    if (*seeds_cmd) {
      const auto seeds = import_seed_templates(seeds_in);
      std::set<std::string> categories;
      auto list = nlohmann::json::array();
      for (const auto& s : seeds) {
        categories.insert(s.category);
        list.push_back({{"category", s.category}, {"query", s.instantiate()}, {"triplet", to_json(s.triplet)}});
      }
      print(out, {{"seeds", list}, {"count", seeds.size()}, {"categories", categories.size()}});
      return 0;
    }

    if (*serve) {
      const auto endpoint = load_endpoint_file(serve_args.endpoint_config);
      const auto config = serve_args.config(endpoint);
      auto responder = make_responder(endpoint);
      std::unique_ptr<ReviewSession> session;
      if (!serve_args.checkpoint.empty() && std::filesystem::exists(serve_args.checkpoint)) {
        session = ReviewSession::load(serve_args.checkpoint, config, responder);
      } else {
        session = std::make_unique<ReviewSession>(
            serve_args.graph_id, Pipeline(config, responder, serve_args.seed_triplet(), serve_args.graph_id),
            serve_args.checkpoint);
      }
      httplib::Server server;
      register_review_routes(server, *session);
      err << "review API on http://" << host << ":" << port << "/api/session\n";
      if (!server.listen(host, port)) throw Error(ErrorCode::ConfigError, "cannot bind " + host + ":" + std::to_string(port));
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

}  // namespace deepedit::cli
