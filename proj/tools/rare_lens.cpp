// rare-lens: staged experiment runner.
//
//   rare-lens <stage> [--config cfg.json] [--seed N] [--out DIR] [--force]
//
// Exit codes: 0 ok, 2 bad config, 3 quality gate failed, 4 checksum mismatch.

#include <chrono>
#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "rarelens/harness.hpp"

using namespace rarelens;

namespace {

struct Options {
  std::string config, out = "runs/default", mode, preset = "default";
  std::uint64_t seed = 0;
  bool seed_set = false, force = false;
  std::size_t k = 0;
  std::vector<std::string> scenes;
};

ExperimentConfig resolve(const Options& o) {
  ExperimentConfig cfg = !o.config.empty() ? load_config(o.config)
                         : o.preset == "large" ? large_config()
                                                     : ExperimentConfig{};
  if (o.seed_set) cfg.seed = o.seed;
  if (o.k) cfg.inference.k = o.k;
  if (!o.mode.empty()) cfg.inference.mode = parse_mode(o.mode);
  cfg.validate();
  return cfg;
}

void print_summary(const EvalReport& r) {
  std::printf("%-18s %8s %8s %8s %8s\n", "arm", "acc", "rare", "common", "trust");
  for (const auto& a : r.arms) {
    std::printf("%-18s %8.4f %8.4f %8.4f ", mode_name(a.mode).c_str(), a.accuracy(), a.rare_accuracy(),
                a.common_accuracy());
    if (uses_hints(a.mode)) std::printf("%8.4f\n", a.trust_rate());
    else std::printf("%8s\n", "-");
  }
  std::printf("detection@k=%zu %.4f\n", r.k, r.detection.all.at(std::min(r.k, r.detection.all.size()) - 1));
  std::printf("lens median rank baseline %.1f refined %.1f; object attention %.4f -> %.4f\n",
              r.probe.median_rank_baseline, r.probe.median_rank_refined, r.probe.attention_baseline,
              r.probe.attention_refined);
  std::printf("params vlm %zu adapter %zu heads %zu table %zu (added %.2f%%)\n", r.params.vlm, r.params.adapter,
              r.params.heads, r.params.table, 100.0 * r.params.ratio());
}

int run(const std::string& cmd, const Options& o) {
  if (cmd == "config") {
    std::cout << config_to_json(resolve(o)).dump(2) << '\n';
    return 0;
  }
  const auto t0 = std::chrono::steady_clock::now();
  Pipeline p(resolve(o), o.out, [t0](const std::string& m) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "[%7.1fs] %s\n", s, m.c_str());
  });
  if (cmd == "gen-data") p.ensure(Stage::Data, o.force);
  else if (cmd == "pretrain-vlm") p.ensure(Stage::Vlm, o.force);
  else if (cmd == "train-embeddings") p.ensure(Stage::Embeddings, o.force);
  else if (cmd == "train-adapter") p.ensure(Stage::Adapter, o.force);
  else if (cmd == "eval" || cmd == "run") print_summary(p.evaluate());
  else if (cmd == "sweep") {
    const auto rows = p.sweep();
    std::cout << sweep_csv(rows);
  } else if (cmd == "probe") {
    for (const auto& s : p.probe(o.scenes)) std::printf("wrote probe/%s_*\n", s.scene_id.c_str());
  } else if (cmd == "detect") {
    const Artifacts a = p.artifacts();
    const auto& cfg = p.config();
    std::vector<const SyntheticScene*> scenes;
    if (o.scenes.empty()) scenes = a.world->data.test();
    for (const auto& id : o.scenes) {
      const auto& all = a.world->data.scenes;
      const auto it = std::find_if(all.begin(), all.end(), [&](const SyntheticScene& s) { return s.scene_id == id; });
      if (it == all.end()) throw ConfigError("unknown scene id '" + id + "'");
      scenes.push_back(&*it);
    }
    const auto names = a.world->data.class_names();
    for (const auto* s : scenes) {
      const ScoreMap m = score_map(*s, a.world->vision, *a.heads, *a.table);
      const auto det = top_k(m, cfg.inference.k, names);
      const AnswerResult ans = detect_and_answer(*s, a, cfg.inference.k, cfg.inference.mode, cfg.inference.max_answer_len);
      json top = json::array();
      for (const auto& d : det)
        top.push_back({{"name", d.name}, {"score", d.score}, {"patch", d.patch}});
      std::cout << json{{"scene_id", s->scene_id}, {"top_k", top}, {"prompt", ans.prompt}, {"answer", ans.text}}.dump()
                << '\n';
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rare-class hinting and visual refinement for a frozen toy VLM"};
  app.require_subcommand(1, 1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) { o.seed = s, o.seed_set = true; },
                                            "overrides the config seed");
    sub->add_option("--out", o.out, "output directory")->capture_default_str();
  };
  const std::vector<std::pair<std::string, std::string>> stages = {
      {"gen-data", "generate the synthetic dataset"},
      {"pretrain-vlm", "pretrain the frozen toy VLM"},
      {"train-embeddings", "train projection heads and class prototypes"},
      {"train-adapter", "train the refinement adapter"},
      {"eval", "evaluate every arm and write report.json"},
      {"run", "all stages then eval"},
      {"sweep", "ablation sweep over arms and k"},
      {"probe", "attention and logit-lens probes"},
      {"detect", "print top-k detections as JSON lines"},
      {"config", "print the effective config"},
  };
  for (const auto& [name, help] : stages) {
    auto* sub = app.add_subcommand(name, help);
    common(sub);
    if (name.starts_with("gen") || name.starts_with("pretrain") || name.starts_with("train"))
      sub->add_flag("--force", o.force, "rerun the stage even if it is current");
    if (name == "detect" || name == "eval" || name == "run") {
      sub->add_option("--k", o.k, "number of detected classes");
      sub->add_option("--mode", o.mode, "baseline|visual-only|hints-only|all-classes-hints|full");
    }
    if (name == "detect" || name == "probe") sub->add_option("--scene", o.scenes, "scene ids (repeatable)");
    if (name == "config")
      sub->add_option("--preset", o.preset, "defaults to start from")->check(CLI::IsMember({"default", "large"}));
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  try {
    return run(app.get_subcommands().front()->get_name(), o);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  } catch (const GateError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 3;
  } catch (const ChecksumError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
