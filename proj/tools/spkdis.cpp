// Copyright 2026 The spkdis Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//       http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// spkdis: command-line front end for corpus synthesis, UAI training,
// probing, PLDA scoring and DET evaluation.
//
// Every command writes into its -o directory together with a manifest that
// records the resolved configuration and SHA-256 fingerprints of its inputs.
// Passing a manifest back through --config reproduces the run.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "spkdis/backend.hpp"
#include "spkdis/dataio.hpp"
#include "spkdis/probe.hpp"
#include "spkdis/synth.hpp"
#include "spkdis/uai.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace spkdis;

namespace {

// ---------------------------------------------------------------------------
// JSON config files for CLI11. Keys are option long names; underscores are
// accepted for dashes. A manifest is accepted too: its "config" object is
// used.

class JsonConfig : public CLI::Config {
 public:
  /// Subcommand the items are routed to.
  std::string section;

  std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}\n"; }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json j;
    try {
      j = json::parse(input);
    } catch (const json::exception& e) {
      throw CLI::ConversionError(std::string("config is not valid JSON: ") + e.what());
    }
    if (j.is_object() && j.contains("command") && j.contains("config")) j = j.at("config");
    if (!j.is_object()) throw CLI::ConversionError("config must be a JSON object");
    std::vector<CLI::ConfigItem> items;
    for (const auto& [key, value] : j.items()) {
      CLI::ConfigItem item;
      if (!section.empty()) item.parents = {section};
      item.name = key;
      std::replace(item.name.begin(), item.name.end(), '_', '-');
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(scalar(v));
      } else {
        item.inputs.push_back(scalar(value));
      }
      items.push_back(std::move(item));
    }
    return items;
  }

 private:
  static std::string scalar(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }
};

// ---------------------------------------------------------------------------
// Fingerprints and manifests

std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    fail<Error>("SHA-256 computation failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

/// Content hash of a file, or of a directory's files in name order.
std::string fingerprint(const fs::path& path) {
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(path))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::string acc;
    for (const auto& f : files) acc += f.filename().string() + ' ' + fingerprint(f) + '\n';
    return sha256_hex(acc);
  }
  require<DataError>(fs::is_regular_file(path), "input '", path.string(), "' does not exist");
  return sha256_hex(spkdis::detail::read_file(path));
}

struct Run {
  CLI::App* app = nullptr;
  std::string out;
  std::uint64_t seed = 0;
  ordered_json inputs = ordered_json::object();
  std::vector<std::string> outputs;
  std::vector<std::string> warnings;
  ordered_json extra = ordered_json::object();

  fs::path out_path(const std::string& name) {
    if (std::find(outputs.begin(), outputs.end(), name) == outputs.end()) outputs.push_back(name);
    return fs::path(out) / name;
  }

  void input(const std::string& key, const std::string& path) {
    inputs[key] = {{"path", path}, {"sha256", fingerprint(path)}};
  }

  void warn(const std::string& msg) {
    std::cerr << "warning: " << msg << '\n';
    warnings.push_back(msg);
  }
};

/// Resolved value of every option except help, config and out.
ordered_json config_snapshot(const CLI::App* app) {
  ordered_json cfg = ordered_json::object();
  for (const CLI::Option* opt : app->get_options()) {
    const std::string name = opt->get_single_name();
    if (name.empty() || name == "help" || name == "config" || name == "out" || opt->get_lnames().empty()) continue;
    std::vector<std::string> values;
    if (opt->count() > 0) {
      values = opt->results();
    } else if (std::string def = opt->get_default_str(); !def.empty()) {
      if (def.size() >= 2 && def.front() == '[' && def.back() == ']') {
        std::stringstream items(def.substr(1, def.size() - 2));
        for (std::string item; std::getline(items, item, ',');) values.push_back(item);
      } else {
        values = {def};
      }
    } else {
      continue;
    }
    if (opt->get_items_expected_max() > 1 || opt->get_expected_max() > 1)
      cfg[name] = values;
    else
      cfg[name] = values.empty() ? std::string() : values.back();
  }
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require<DataError>(static_cast<bool>(out), "cannot open '", path.string(), "' for writing");
  out << text;
  require<DataError>(static_cast<bool>(out), "write to '", path.string(), "' failed");
}

void write_manifest(Run& run, const std::string& name = "manifest.json") {
  ordered_json m;
  m["command"] = run.app->get_name();
  m["config"] = config_snapshot(run.app);
  m["seed"] = run.seed;
  m["inputs"] = run.inputs;
  for (auto& [k, v] : run.extra.items()) m[k] = v;
  m["warnings"] = run.warnings;
  std::vector<std::string> outputs = run.outputs;
  outputs.push_back(name);
  m["outputs"] = outputs;
  m["version"] = kVersion;
  write_text(fs::path(run.out) / name, m.dump(2) + "\n");
}

void ensure_out(const Run& run) {
  std::error_code ec;
  fs::create_directories(run.out, ec);
  require<DataError>(!ec && fs::is_directory(run.out), "cannot create output directory '", run.out, "'");
}

SplitSpec load_split_checked(Run& run, const std::string& path) {
  run.input("split", path);
  return load_split(path);
}

std::vector<std::string> split_part(const SplitSpec& split, const std::string& part) {
  if (part == "train") return split.train_ids;
  if (part == "val") return split.val_ids;
  if (part == "test") return split.test_ids;
  if (part == "eval") {
    auto ids = split.val_ids;
    ids.insert(ids.end(), split.test_ids.begin(), split.test_ids.end());
    return ids;
  }
  std::vector<std::string> ids = split.train_ids;
  ids.insert(ids.end(), split.val_ids.begin(), split.val_ids.end());
  ids.insert(ids.end(), split.test_ids.begin(), split.test_ids.end());
  return ids;
}

const std::vector<std::string> kParts{"train", "val", "test", "eval", "all"};

// ---------------------------------------------------------------------------
// Commands

synth::FactorSpec parse_factor(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  require<ConfigError>(parts.size() == 2 || parts.size() == 3, "factor '", text, "' must be name:classes[:strength]");
  synth::FactorSpec f;
  f.name = parts[0];
  try {
    std::size_t used = 0;
    f.n_classes = std::stoul(parts[1], &used);
    require<ConfigError>(used == parts[1].size(), "bad class count in '", text, "'");
    if (parts.size() == 3) {
      f.strength = std::stod(parts[2], &used);
      require<ConfigError>(used == parts[2].size(), "bad strength in '", text, "'");
    }
  } catch (const std::logic_error&) {
    fail<ConfigError>("bad factor '", text, "'");
  }
  return f;
}

struct SynthArgs {
  synth::GeneratorSpec spec;
  std::vector<std::string> factors{"noise:4:1.0"};
};

void cmd_synth(Run& run, SynthArgs& a) {
  a.spec.nuisance_factors.clear();
  for (const auto& f : a.factors) a.spec.nuisance_factors.push_back(parse_factor(f));
  a.spec.seed = run.seed;
  a.spec.validate();
  ensure_out(run);
  const synth::Corpus c = synth::generate_corpus(a.spec);
  for (const auto& w : c.warnings) run.warn(w);
  save_archive(c.archive, run.out_path("embeddings.emba"));
  save_labels(c.labels, run.out_path("labels.tsv"));
  run.extra["generator"] = synth::to_json(a.spec);
  write_manifest(run);
}

synth::GeneratorSpec load_generator(const std::string& path) {
  json j;
  try {
    j = json::parse(spkdis::detail::read_file(path));
  } catch (const json::exception& e) {
    fail<DataError>(path, ": not valid JSON: ", e.what());
  }
  if (j.contains("generator")) j = j.at("generator");
  return synth::generator_from_json(j);
}

struct AugmentArgs {
  std::string embeddings, labels, generator;
  synth::AugmentSpec spec;
};

void cmd_augment(Run& run, AugmentArgs& a) {
  run.input("embeddings", a.embeddings);
  run.input("labels", a.labels);
  run.input("generator", a.generator);
  a.spec.seed = run.seed;
  const auto gen = load_generator(a.generator);
  const auto archive = load_archive(a.embeddings);
  const auto labels = load_labels(a.labels);
  ensure_out(run);
  const synth::Corpus c = synth::augment_corpus(archive, labels, a.spec, gen);
  save_archive(c.archive, run.out_path("embeddings.emba"));
  save_labels(c.labels, run.out_path("labels.tsv"));
  run.extra["augment"] = synth::to_json(a.spec);
  run.extra["generator"] = synth::to_json(gen);
  write_manifest(run);
}

struct SplitArgs {
  std::string labels;
  std::string group_by = "speaker";
  SplitFractions fractions;
};

void cmd_split(Run& run, SplitArgs& a) {
  run.input("labels", a.labels);
  const auto labels = load_labels(a.labels);
  std::optional<GroupBy> group;
  if (!a.group_by.empty()) {
    require<ConfigError>(labels.has_factor(a.group_by), "unknown group-by factor '", a.group_by, "'");
    group = GroupBy{a.group_by, &labels};
  }
  ensure_out(run);
  const SplitSpec split = make_splits(labels.ids(), a.fractions, group, run.seed);
  for (const auto& w : split.warnings) run.warn(w);
  save_split(split, run.out_path("split.tsv"));
  write_manifest(run);
}

struct TrialsArgs {
  std::string labels, split;
  std::string part = "test";
  std::string pool = "part";
  std::size_t targets = 500, nontargets = 500;
  std::string condition;
};

void cmd_make_trials(Run& run, TrialsArgs& a) {
  run.input("labels", a.labels);
  const auto labels = load_labels(a.labels);
  std::vector<std::string> ids;
  if (a.split.empty()) {
    ids = labels.ids();
  } else {
    ids = split_part(load_split_checked(run, a.split), a.part);
  }
  if (a.pool != "part") {
    std::vector<std::string> copies;
    for (const auto& id : ids)
      for (std::size_t k = 1; labels.contains(id + "-aug" + std::to_string(k)); ++k)
        copies.push_back(id + "-aug" + std::to_string(k));
    if (a.pool == "copies") ids = std::move(copies);
    else ids.insert(ids.end(), copies.begin(), copies.end());
  }
  std::optional<synth::TrialCondition> cond;
  if (!a.condition.empty()) {
    const auto eq = a.condition.find('=');
    require<ConfigError>(eq != std::string::npos, "condition must be factor=value");
    cond = synth::TrialCondition{a.condition.substr(0, eq), a.condition.substr(eq + 1)};
  }
  ensure_out(run);
  const TrialList trials = synth::make_trials(labels, ids, a.targets, a.nontargets, cond, run.seed);
  save_trials(trials, run.out_path("trials.txt"));
  write_manifest(run);
}

struct TrainArgs {
  std::string embeddings, labels, split;
  uai::UaiConfig cfg;
  bool log_json = false;
};

void cmd_train_uai(Run& run, TrainArgs& a) {
  run.input("embeddings", a.embeddings);
  run.input("labels", a.labels);
  const auto split = load_split_checked(run, a.split);
  const auto archive = load_archive(a.embeddings);
  const auto labels = load_labels(a.labels);
  a.cfg.seed = run.seed;
  a.cfg.input_dim = archive.dim();
  a.cfg.n_speakers = labels.classes("speaker", split.train_ids).size();
  uai::UaiModel m = uai::build_uai(a.cfg);
  ensure_out(run);
  std::ostringstream log;
  uai::train_uai(m, archive, labels, split, [&](const uai::EpochRecord& r) {
    const std::string line = uai::to_json(r).dump();
    log << line << '\n';
    if (a.log_json) std::cout << line << std::endl;
  });
  std::string data_fp = run.inputs["embeddings"]["sha256"].get<std::string>();
  uai::save_uai(m, run.out_path("model"), data_fp);
  write_text(run.out_path("train_log.jsonl"), log.str());
  run.extra["uai"] = uai::to_json(m.cfg);
  write_manifest(run);
}

struct ExtractArgs {
  std::string model, embeddings;
};

void cmd_extract(Run& run, ExtractArgs& a) {
  run.input("model", a.model);
  run.input("embeddings", a.embeddings);
  const auto m = uai::load_uai(a.model);
  const auto archive = load_archive(a.embeddings);
  ensure_out(run);
  const auto [h1, h2] = uai::extract_embeddings(m, archive);
  save_archive(h1, run.out_path("h1.emba"));
  save_archive(h2, run.out_path("h2.emba"));
  write_manifest(run);
}

struct ProbeArgs {
  std::string embeddings, labels, split, factor, name;
  probe::ProbeConfig cfg;
  bool no_standardize = false;
  bool permute_labels = false;
};

void cmd_probe(Run& run, ProbeArgs& a) {
  run.input("embeddings", a.embeddings);
  run.input("labels", a.labels);
  const auto split = load_split_checked(run, a.split);
  const auto archive = load_archive(a.embeddings);
  auto labels = load_labels(a.labels);
  a.cfg.seed = run.seed;
  a.cfg.standardize = !a.no_standardize;
  if (a.name.empty()) a.name = fs::path(a.embeddings).stem().string();
  if (a.permute_labels) labels = probe::permute_factor(labels, a.factor, split_part(split, "all"), run.seed);
  ensure_out(run);
  const auto result = probe::train_probe(archive, labels, a.factor, split, a.cfg);

  const fs::path tsv = run.out_path("probe.tsv");
  const bool fresh = !fs::exists(tsv) || fs::file_size(tsv) == 0;
  std::ofstream out(tsv, std::ios::binary | std::ios::app);
  require<DataError>(static_cast<bool>(out), "cannot open '", tsv.string(), "' for appending");
  if (fresh) out << "embedding\tfactor\tn_test\taccuracy\n";
  out << probe::tsv_row(a.name, result.report) << '\n';
  out.close();
  const std::string stem = a.name + "_" + a.factor;
  write_text(run.out_path("report_" + stem + ".json"), probe::to_json(result.report).dump(2) + "\n");
  write_manifest(run, "manifest_" + stem + ".json");
}

struct ScoreArgs {
  std::string embeddings, labels, split, trials;
  std::string train_embeddings, train_labels;
  std::string kind = "raw";
  int lda_dim = -1;
  bool no_lda = false;
  backend::PldaConfig plda;
};

void cmd_score(Run& run, ScoreArgs& a) {
  run.input("embeddings", a.embeddings);
  run.input("labels", a.labels);
  run.input("trials", a.trials);
  const auto split = load_split_checked(run, a.split);
  if (a.train_embeddings.empty()) a.train_embeddings = a.embeddings;
  if (a.train_labels.empty()) a.train_labels = a.labels;
  if (a.train_embeddings != a.embeddings) run.input("train-embeddings", a.train_embeddings);
  if (a.train_labels != a.labels) run.input("train-labels", a.train_labels);

  const auto eval = load_archive(a.embeddings);
  const auto train = a.train_embeddings == a.embeddings ? eval : load_archive(a.train_embeddings);
  const auto train_labels = load_labels(a.train_labels);
  const auto trials = load_trials(a.trials);

  backend::BackendConfig cfg;
  cfg.plda = a.plda;
  if (!a.no_lda) {
    std::size_t want = a.lda_dim >= 0 ? static_cast<std::size_t>(a.lda_dim) : (a.kind == "raw" ? 150 : 96);
    const std::size_t speakers = train_labels.classes("speaker", split.train_ids).size();
    const std::size_t limit = std::min(train.dim(), speakers > 0 ? speakers - 1 : 0);
    if (want > limit) {
      run.warn(spkdis::detail::concat("LDA dimension ", want, " reduced to ", limit,
                                      " (at most speakers - 1 and the input dimension)"));
      want = limit;
    }
    cfg.lda_dim = want;
    run.extra["lda_dim"] = want;
  }
  ensure_out(run);
  const auto b = backend::fit_backend(train, train_labels, split.train_ids, cfg);
  const auto scores = backend::score_trials(b, eval, trials);
  backend::save_scores(scores, run.out_path("scores.txt"));
  write_manifest(run);
}

struct DetArgs {
  std::string scores;
};

void cmd_det(Run& run, DetArgs& a) {
  run.input("scores", a.scores);
  const auto scores = backend::load_scores(a.scores);
  const auto curve = backend::compute_det(scores);
  ensure_out(run);
  backend::save_det_csv(curve, run.out_path("det.csv"));
  const std::string summary = backend::det_summary(curve).dump();
  write_text(run.out_path("det.json"), summary + "\n");
  std::cout << summary << std::endl;
  write_manifest(run);
}

probe::CountTable load_count_table(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require<DataError>(static_cast<bool>(in), "cannot open '", path, "' for reading");
  probe::CountTable table;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    spkdis::detail::strip_cr(line);
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
        require<DataError>(cell.find_first_not_of(" \t", used) == std::string::npos, "trailing text");
      } catch (const std::exception&) {
        fail<DataError>(path, ": line ", lineno, ": bad count '", cell, "'");
      }
    }
    table.push_back(std::move(row));
  }
  return table;
}

struct Chi2Args {
  std::string table, labels, split, factor_a = "speaker", factor_b;
  std::string part = "all";
  double alpha = 0.01;
};

void cmd_chi2(Run& run, Chi2Args& a) {
  json result;
  if (!a.table.empty()) {
    run.input("table", a.table);
    result = probe::to_json(probe::chi_squared_independence(load_count_table(a.table), a.alpha));
  } else {
    require<ConfigError>(!a.labels.empty() && !a.factor_b.empty(), "chi2 needs --table or --labels with --factor-b");
    run.input("labels", a.labels);
    const auto labels = load_labels(a.labels);
    const auto ids = a.split.empty() ? labels.ids() : split_part(load_split_checked(run, a.split), a.part);
    const auto ct = probe::build_contingency(labels, a.factor_a, a.factor_b, ids);
    require<DataError>(ct.testable(), "contingency table of ", a.factor_a, " x ", a.factor_b,
                       " is not testable (needs 2+ classes per factor)");
    result = probe::to_json(probe::chi_squared_independence(ct.counts, a.alpha));
    result["table"] = probe::to_json(ct);
  }
  const std::string text = result.dump();
  std::cout << text << std::endl;
  if (!run.out.empty()) {
    ensure_out(run);
    write_text(run.out_path("chi2.json"), text + "\n");
    write_manifest(run);
  }
}

// ---------------------------------------------------------------------------

void print_error(const std::string& type, const std::string& message) {
  std::cerr << json{{"error", {{"type", type}, {"message", message}}}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spkdis: speaker/nuisance disentanglement toolkit"};
  app.set_version_flag("--version", std::string("spkdis ") + kVersion);
  app.require_subcommand(1, 1);
  app.failure_message(CLI::FailureMessage::help);
  auto config = std::make_shared<JsonConfig>();
  app.config_formatter(config);
  app.set_config("--config", "", "JSON config file or a previous manifest (flags win)");
  app.fallthrough();
  app.option_defaults()->always_capture_default();

  Run run;
  std::function<void()> action;
  auto command = [&](const std::string& name, const std::string& help, bool out_required = true) {
    CLI::App* sub = app.add_subcommand(name, help);
    auto* out = sub->add_option("-o,--out", run.out, "Output directory");
    if (out_required) out->required();
    return sub;
  };

  SynthArgs synth_a;
  {
    auto* s = command("synth", "Generate a synthetic factor-entangled corpus");
    s->add_option("--dim", synth_a.spec.dim, "Embedding dimension");
    s->add_option("--speakers", synth_a.spec.n_speakers, "Number of speakers");
    s->add_option("--utts", synth_a.spec.utts_per_speaker, "Utterances per speaker");
    s->add_option("--factor", synth_a.factors, "Nuisance factor name:classes[:strength] (repeatable)");
    s->add_option("--speaker-strength", synth_a.spec.speaker_strength, "Speaker signal strength");
    s->add_option("--noise-sigma", synth_a.spec.noise_sigma, "RMS norm of isotropic noise");
    s->add_option("--confound", synth_a.spec.confound, "Probability a nuisance class follows the speaker");
    s->add_option("--seed", run.seed, "Random seed");
    s->callback([&] { action = [&] { cmd_synth(run, synth_a); }; });
  }
  AugmentArgs aug_a;
  {
    auto* s = command("augment", "Append nuisance-perturbed copies of every utterance");
    s->add_option("--embeddings", aug_a.embeddings, "Input archive")->required();
    s->add_option("--labels", aug_a.labels, "Input labels")->required();
    s->add_option("--generator", aug_a.generator, "Synth manifest or generator JSON")->required();
    s->add_option("--copies", aug_a.spec.copies, "Copies per utterance");
    s->add_option("--perturb-factor", aug_a.spec.perturb_factor, "Factor to resample");
    s->add_option("--perturb-strength", aug_a.spec.perturb_strength, "Strength of the re-mixed contribution");
    s->add_option("--seed", run.seed, "Random seed");
    s->callback([&] { action = [&] { cmd_augment(run, aug_a); }; });
  }
  SplitArgs split_a;
  {
    auto* s = command("split", "Partition utterances into train/val/test");
    s->add_option("--labels", split_a.labels, "Label table")->required();
    s->add_option("--group-by", split_a.group_by, "Factor to stratify by (empty for none)");
    s->add_option("--train", split_a.fractions.train, "Train fraction");
    s->add_option("--val", split_a.fractions.val, "Validation fraction");
    s->add_option("--test", split_a.fractions.test, "Test fraction");
    s->add_option("--seed", run.seed, "Random seed");
    s->callback([&] { action = [&] { cmd_split(run, split_a); }; });
  }
  TrialsArgs trials_a;
  {
    auto* s = command("make-trials", "Sample target and nontarget verification trials");
    s->add_option("--labels", trials_a.labels, "Label table")->required();
    s->add_option("--split", trials_a.split, "Split file (omit to use every labeled id)");
    s->add_option("--part", trials_a.part, "Split part")->check(CLI::IsMember(kParts));
    s->add_option("--pool", trials_a.pool, "Use the part, its -augK copies, or both")
        ->check(CLI::IsMember({"part", "copies", "both"}));
    s->add_option("--targets", trials_a.targets, "Number of target trials");
    s->add_option("--nontargets", trials_a.nontargets, "Number of nontarget trials");
    s->add_option("--condition", trials_a.condition, "Require the test side to carry factor=value");
    s->add_option("--seed", run.seed, "Random seed");
    s->callback([&] { action = [&] { cmd_make_trials(run, trials_a); }; });
  }
  TrainArgs train_a;
  {
    auto& c = train_a.cfg;
    auto* s = command("train-uai", "Train the adversarial invariance model");
    s->add_option("--embeddings", train_a.embeddings, "Training archive")->required();
    s->add_option("--labels", train_a.labels, "Label table")->required();
    s->add_option("--split", train_a.split, "Split file")->required();
    s->add_option("--h1-dim", c.h1_dim, "Speaker code width");
    s->add_option("--h2-dim", c.h2_dim, "Nuisance code width");
    s->add_option("--encoder-hidden", c.encoder_hidden, "Encoder hidden widths");
    s->add_option("--predictor-hidden", c.predictor_hidden, "Predictor hidden widths");
    s->add_option("--decoder-hidden", c.decoder_hidden, "Decoder hidden widths");
    s->add_option("--disentangler-hidden", c.disentangler_hidden, "Disentangler hidden widths");
    s->add_option("--w-pred", c.w_pred, "Speaker prediction weight");
    s->add_option("--w-recon", c.w_recon, "Reconstruction weight");
    s->add_option("--w-adv", c.w_adv, "Adversarial weight");
    s->add_option("--adv-steps", c.adv_steps_per_main, "Adversary steps per main step");
    s->add_option("--keep-prob", c.keep_prob, "Dropout keep probability on h1");
    s->add_option("--lr", c.lr, "Main learning rate");
    s->add_option("--adv-lr", c.adv_lr, "Adversary learning rate");
    s->add_option("--epochs", c.epochs, "Training epochs");
    s->add_option("--batch-size", c.batch_size, "Mini-batch size");
    s->add_flag("--augmented", c.augmented, "Mark the model as trained on augmented data");
    s->add_flag("--log-json", train_a.log_json, "Print one JSON line per epoch");
    s->add_option("--seed", run.seed, "Random seed");
    s->callback([&] { action = [&] { cmd_train_uai(run, train_a); }; });
  }
  ExtractArgs extract_a;
  {
    auto* s = command("extract", "Write h1 and h2 archives from a trained model");
    s->add_option("--model", extract_a.model, "Model directory")->required();
    s->add_option("--embeddings", extract_a.embeddings, "Input archive")->required();
    s->callback([&] { action = [&] { cmd_extract(run, extract_a); }; });
  }
  ProbeArgs probe_a;
  {
    auto& c = probe_a.cfg;
    auto* s = command("probe", "Train a probing classifier and append a result row");
    s->add_option("--embeddings", probe_a.embeddings, "Input archive")->required();
    s->add_option("--labels", probe_a.labels, "Label table")->required();
    s->add_option("--split", probe_a.split, "Split file")->required();
    s->add_option("--factor", probe_a.factor, "Factor to predict")->required();
    s->add_option("--name", probe_a.name, "Row name (default: archive file stem)");
    s->add_option("--hidden-layers", c.hidden_layers, "Hidden layers");
    s->add_option("--hidden-width", c.hidden_width, "Hidden width");
    s->add_option("--l2", c.l2_coeff, "L2 coefficient");
    s->add_option("--lr", c.lr, "Learning rate");
    s->add_option("--batch-size", c.batch_size, "Mini-batch size");
    s->add_option("--max-epochs", c.max_epochs, "Maximum epochs");
    s->add_option("--patience", c.patience, "Early-stopping patience");
    s->add_flag("--no-standardize", probe_a.no_standardize, "Skip per-dimension standardization");
    s->add_flag("--permute-labels", probe_a.permute_labels, "Shuffle the factor labels (null run)");
    s->add_option("--seed", run.seed, "Random seed");
    s->callback([&] { action = [&] { cmd_probe(run, probe_a); }; });
  }
  ScoreArgs score_a;
  {
    auto* s = command("score", "Fit LDA+PLDA on the train split and score trials");
    s->add_option("--embeddings", score_a.embeddings, "Archive holding the trial utterances")->required();
    s->add_option("--labels", score_a.labels, "Label table for the trial archive")->required();
    s->add_option("--split", score_a.split, "Split whose train part fits the backend")->required();
    s->add_option("--trials", score_a.trials, "Trial list")->required();
    s->add_option("--train-embeddings", score_a.train_embeddings, "Backend training archive (default: --embeddings)");
    s->add_option("--train-labels", score_a.train_labels, "Backend training labels (default: --labels)");
    s->add_option("--kind", score_a.kind, "Embedding kind, selects the default LDA dimension")
        ->check(CLI::IsMember({"raw", "disentangled"}));
    s->add_option("--lda-dim", score_a.lda_dim, "LDA output dimension (-1: 150 raw, 96 disentangled)");
    s->add_flag("--no-lda", score_a.no_lda, "Skip LDA");
    s->add_option("--em-iters", score_a.plda.em_iters, "PLDA EM iterations");
    s->add_flag("--length-norm", score_a.plda.length_norm, "Length-normalize before PLDA");
    s->callback([&] { action = [&] { cmd_score(run, score_a); }; });
  }
  DetArgs det_a;
  {
    auto* s = command("det", "Compute the DET curve and EER of a score file");
    s->add_option("--scores", det_a.scores, "Score file")->required();
    s->callback([&] { action = [&] { cmd_det(run, det_a); }; });
  }
  Chi2Args chi2_a;
  {
    auto* s = command("chi2", "Chi-squared independence test", false);
    auto* table = s->add_option("--table", chi2_a.table, "CSV contingency table");
    auto* labels = s->add_option("--labels", chi2_a.labels, "Label table");
    table->excludes(labels);
    s->add_option("--split", chi2_a.split, "Restrict to a split part");
    s->add_option("--part", chi2_a.part, "Split part")->check(CLI::IsMember(kParts));
    s->add_option("--factor-a", chi2_a.factor_a, "Row factor");
    s->add_option("--factor-b", chi2_a.factor_b, "Column factor");
    s->add_option("--alpha", chi2_a.alpha, "Significance level");
    s->callback([&] { action = [&] { cmd_chi2(run, chi2_a); }; });
  }

  for (int i = 1; i < argc && config->section.empty(); ++i)
    if (app.get_subcommand_no_throw(argv[i]) != nullptr) config->section = argv[i];

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  run.app = app.get_subcommands().front();
  try {
    action();
  } catch (const ConfigError& e) {
    print_error("ConfigError", e.what());
    return 2;
  } catch (const DataError& e) {
    print_error("DataError", e.what());
    return 1;
  } catch (const ShapeError& e) {
    print_error("ShapeError", e.what());
    return 1;
  } catch (const NumericError& e) {
    print_error("NumericError", e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("Error", e.what());
    return 1;
  }
  return 0;
}
