// capaudit: command-line front end for invariance audits.
//
//   capaudit run --config cfg.json [--stats.seed=7 ...]
//   capaudit synth --out DIR [--n 100]
//
// Exit codes: 0 ok, 1 other failure, 2 config error, 3 scorer handshake
// failure, 4 failure budget exceeded.

#include <iostream>

#include "CLI11.hpp"
#include "capaudit/audit.hpp"
#include "capaudit/synth.hpp"

namespace {

using namespace capaudit;

// Turns leftover "--a.b=value" / "--a.b value" arguments into overrides.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + a + "'");
    std::string body = a.substr(2);
    if (body.rfind("max-item-failure-rate", 0) == 0) body.replace(0, 21, "max_item_failure_rate");
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
    } else if (i + 1 < extras.size() && extras[i + 1].rfind("--", 0) != 0) {
      out.emplace_back(body, extras[++i]);
    } else {
      throw ConfigError("override '" + a + "' has no value");
    }
  }
  return out;
}

int run_stage(const std::string& verb, const std::string& config,
              const std::vector<std::string>& extras) {
  const auto cfg = audit::RunConfig::load(config, parse_overrides(extras));
  const auto rs = audit::run_audit(cfg, audit::parse_stage(verb));
  std::size_t hits = 0;
  for (const auto& [stage, hit] : rs.cache_hits) hits += hit;
  std::cerr << verb << ": " << rs.cache_hits.size() << " stages (" << hits << " reused), failure rate "
            << fmt(rs.failure_rate) << ", reports in " << rs.report_dir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Invariance audits for image-caption metrics"};
  app.require_subcommand(1);

  std::string config;
  std::vector<CLI::App*> stage_cmds;
  for (const char* verb : {"curate", "perturb", "score", "analyze", "rrf", "calibrate", "humanval", "run", "report"}) {
    auto* sub = app.add_subcommand(verb, std::string("run the pipeline through '") + verb + "'");
    sub->add_option("--config", config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
    sub->allow_extras();
    stage_cmds.push_back(sub);
  }

  synth::SynthOptions so;
  std::string synth_out;
  auto* syn = app.add_subcommand("synth", "write a synthetic detection corpus");
  syn->add_option("--out", synth_out, "output directory")->required();
  syn->add_option("--n", so.n_items, "number of usable scenes");
  syn->add_option("--rejects", so.n_rejects, "extra scenes that curation should reject");
  syn->add_option("--seed", so.seed, "corpus seed");
  syn->add_option("--size", so.width, "image side in pixels")->each([&](const std::string&) { so.height = so.width; });
  syn->add_option("--dataset", so.dataset, "dataset tag");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (syn->parsed()) {
      std::cout << synth::write_corpus(synth_out, so).string() << "\n";
      return 0;
    }
    for (auto* sub : stage_cmds)
      if (sub->parsed()) return run_stage(sub->get_name(), config, sub->remaining());
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const ScorerUnavailable& e) {
    std::cerr << e.what() << "\n";
    return 3;
  } catch (const audit::FailureBudgetExceeded& e) {
    std::cerr << "FailureBudgetExceeded: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 1;
}
