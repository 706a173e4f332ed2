#include "advspk/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <regex>
#include <set>

#include "advspk/util.hpp"

namespace advspk {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items()) {
    if (!ok.count(key)) throw ConfigError((section.empty() ? "" : section + ".") + key + ": unknown key");
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}

const char* corpus_kind_name(CorpusKind k) { return k == CorpusKind::kSynthetic ? "synthetic" : "directory"; }

json lr_schedule_json(const std::vector<LrStep>& s) {
  json out = json::array();
  for (const auto& step : s) out.push_back({{"until_epoch", step.until_epoch}, {"lr", step.lr}});
  return out;
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw MissingArtifact("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw Error("cannot write " + p.string());
  f << text;
  if (!f) throw Error("write failed: " + p.string());
}

void log_line(const RunOptions& o, const std::string& line) {
  if (o.log) *o.log << line << std::endl;
}

void require_valid(const ExperimentConfig& c) {
  const Diagnostics d = validate_config(c);
  if (d.ok()) return;
  std::string msg = "invalid configuration:";
  for (const auto& v : d.violations) msg += "\n  " + v;
  throw ConfigError(msg);
}

EvalOptions eval_options(const ExperimentConfig& c) {
  EvalOptions o;
  o.batch_size = c.eval.batch_size;
  o.segment_length = c.eval.segment_length;
  o.split = Split::kTest;
  o.seed = c.seed;
  return o;
}

TrainConfig effective_train(const ExperimentConfig& c) {
  TrainConfig t = c.train;
  t.seed = c.seed;
  return t;
}

Checkpoint load_matching_checkpoint(const fs::path& path, const ExperimentConfig& c, const Corpus& corpus) {
  if (!fs::exists(path)) throw MissingArtifact("checkpoint not found: " + path.string());
  Checkpoint ck = load_checkpoint(path);
  if (json(ck.frontend) != json(c.frontend) || json(ck.cnn) != json(c.model)) {
    throw ConfigError(path.string() + ": checkpoint architecture does not match the configuration");
  }
  const std::string corpus_fp = ck.metadata.value("corpus_fingerprint", "");
  if (corpus_fp != corpus.fingerprint) {
    throw ConfigError(path.string() + ": checkpoint was trained on corpus " + corpus_fp + ", configuration gives " +
                      corpus.fingerprint);
  }
  return ck;
}

std::string timestamp_or_fixed(const RunOptions& o) { return o.deterministic ? "deterministic" : ""; }

}  // namespace

void to_json(json& j, const ExperimentConfig& c) {
  j = {{"name", c.name},
       {"seed", c.seed},
       {"output_dir", c.output_dir},
       {"corpus",
        {{"kind", corpus_kind_name(c.corpus.kind)},
         {"synthetic", c.corpus.synthetic},
         {"root", c.corpus.root},
         {"sample_rate", c.corpus.sample_rate},
         {"split_seed", c.corpus.split_seed}}},
       {"frontend", c.frontend},
       {"model", c.model},
       {"train",
        {{"defense", defense_name(c.train.defense)},
         {"epochs", c.train.epochs},
         {"batch_size", c.train.batch_size},
         {"segment_length", c.train.segment_length},
         {"lr_schedule", lr_schedule_json(c.train.lr_schedule)},
         {"momentum", c.train.momentum},
         {"w1", c.train.w1},
         {"w2", c.train.w2},
         {"attack", c.train.attack},
         {"checkpoint_every", c.checkpoint_every}}},
       {"eval",
        {{"epsilon", c.eval.epsilon},
         {"attacks", c.eval.attacks},
         {"transfer_sources", c.eval.transfer_sources},
         {"transfer_attacks", c.eval.transfer_attacks},
         {"epsilon_sweep", c.eval.epsilon_sweep},
         {"iteration_sweep", c.eval.iteration_sweep},
         {"sweep_attack", c.eval.sweep_attack},
         {"batch_size", c.eval.batch_size},
         {"segment_length", c.eval.segment_length}}}};
}

ExperimentConfig experiment_from_json(const json& j) {
  ExperimentConfig c;
  check_keys(j, "", {"name", "seed", "output_dir", "corpus", "frontend", "model", "train", "eval"});
  read(j, "name", c.name, "");
  read(j, "seed", c.seed, "");
  read(j, "output_dir", c.output_dir, "");

  if (j.contains("corpus")) {
    const json& s = j["corpus"];
    check_keys(s, "corpus", {"kind", "synthetic", "root", "sample_rate", "split_seed"});
    std::string kind = corpus_kind_name(c.corpus.kind);
    read(s, "kind", kind, "corpus");
    if (kind == "synthetic") {
      c.corpus.kind = CorpusKind::kSynthetic;
    } else if (kind == "directory") {
      c.corpus.kind = CorpusKind::kDirectory;
    } else {
      throw ConfigError("corpus.kind: expected 'synthetic' or 'directory', got '" + kind + "'");
    }
    if (s.contains("synthetic")) {
      check_keys(s["synthetic"], "corpus.synthetic",
                 {"num_speakers", "utterances_per_speaker", "duration", "sample_rate", "seed", "noise_snr_db", "rms",
                  "f0_min", "f0_max"});
      read(s, "synthetic", c.corpus.synthetic, "corpus");
    }
    read(s, "root", c.corpus.root, "corpus");
    read(s, "sample_rate", c.corpus.sample_rate, "corpus");
    read(s, "split_seed", c.corpus.split_seed, "corpus");
  }
  if (j.contains("frontend")) {
    check_keys(j["frontend"], "frontend",
               {"sample_rate", "window_length", "hop_length", "fft_size", "mel_bins", "log_floor"});
    read(j, "frontend", c.frontend, "");
  }
  if (j.contains("model")) {
    check_keys(j["model"], "model",
               {"num_stacks", "channels_per_stack", "kernel_size", "pool_every", "pool_width", "num_speakers"});
    read(j, "model", c.model, "");
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    check_keys(t, "train",
               {"defense", "epochs", "batch_size", "segment_length", "lr_schedule", "momentum", "w1", "w2", "attack",
                "checkpoint_every"});
    read(t, "checkpoint_every", c.checkpoint_every, "train");
    std::string defense = defense_name(c.train.defense);
    read(t, "defense", defense, "train");
    try {
      c.train.defense = parse_defense(defense);
    } catch (const Error& e) {
      throw ConfigError(std::string("train.defense: ") + e.what());
    }
    read(t, "epochs", c.train.epochs, "train");
    read(t, "batch_size", c.train.batch_size, "train");
    read(t, "segment_length", c.train.segment_length, "train");
    if (t.contains("lr_schedule")) {
      c.train.lr_schedule.clear();
      if (!t["lr_schedule"].is_array()) throw ConfigError("train.lr_schedule: expected an array");
      for (const json& step : t["lr_schedule"]) {
        check_keys(step, "train.lr_schedule[]", {"until_epoch", "lr"});
        LrStep s;
        read(step, "until_epoch", s.until_epoch, "train.lr_schedule[]");
        read(step, "lr", s.lr, "train.lr_schedule[]");
        c.train.lr_schedule.push_back(s);
      }
    }
    read(t, "momentum", c.train.momentum, "train");
    read(t, "w1", c.train.w1, "train");
    read(t, "w2", c.train.w2, "train");
    if (t.contains("attack")) {
      const json& a = t["attack"];
      check_keys(a, "train.attack", {"weights", "epsilon", "alpha", "iterations", "random_init", "margin", "sinkhorn"});
      json merged = c.train.attack;
      merged.update(a);
      if (a.contains("sinkhorn")) {
        check_keys(a["sinkhorn"], "train.attack.sinkhorn", {"regularization", "max_iters", "tolerance"});
        merged["sinkhorn"] = json(c.train.attack)["sinkhorn"];
        merged["sinkhorn"].update(a["sinkhorn"]);
      }
      // Budget given without a step size keeps the epsilon / 5 ratio.
      if (a.contains("epsilon") && !a.contains("alpha")) {
        merged["alpha"] = merged["epsilon"].get<double>() / 5.0;
      }
      try {
        merged.get_to(c.train.attack);
      } catch (const json::exception& e) {
        throw ConfigError(std::string("train.attack: ") + e.what());
      }
    }
  }
  if (j.contains("eval")) {
    const json& e = j["eval"];
    check_keys(e, "eval",
               {"epsilon", "attacks", "transfer_sources", "transfer_attacks", "epsilon_sweep", "iteration_sweep",
                "sweep_attack", "batch_size", "segment_length"});
    read(e, "epsilon", c.eval.epsilon, "eval");
    read(e, "attacks", c.eval.attacks, "eval");
    read(e, "transfer_sources", c.eval.transfer_sources, "eval");
    read(e, "transfer_attacks", c.eval.transfer_attacks, "eval");
    read(e, "epsilon_sweep", c.eval.epsilon_sweep, "eval");
    read(e, "iteration_sweep", c.eval.iteration_sweep, "eval");
    read(e, "sweep_attack", c.eval.sweep_attack, "eval");
    read(e, "batch_size", c.eval.batch_size, "eval");
    read(e, "segment_length", c.eval.segment_length, "eval");
  }
  return c;
}

AttackSpec parse_attack(const std::string& name, double epsilon, const AttackSpec& base) {
  static const std::regex re("(FGSM|PGD|CW|FS|HYB)([0-9]*)");
  std::smatch m;
  if (!std::regex_match(name, m, re)) {
    throw ConfigError("unknown attack '" + name + "' (expected FGSM, PGD<T>, CW<T>, FS<T> or HYB<T>)");
  }
  const std::string family = m[1];
  if (family == "FGSM") {
    if (m[2].length() > 0) throw ConfigError("attack '" + name + "': FGSM takes no iteration count");
    AttackSpec s = AttackSpec::fgsm(epsilon);
    s.margin = base.margin;
    s.sinkhorn = base.sinkhorn;
    return s;
  }
  if (m[2].length() == 0) throw ConfigError("attack '" + name + "': missing iteration count");
  const std::size_t t = std::stoul(m[2]);
  if (t < 1) throw ConfigError("attack '" + name + "': iteration count must be at least 1");
  AttackSpec s = family == "PGD"  ? AttackSpec::pgd(epsilon, t)
                 : family == "CW" ? AttackSpec::cw(epsilon, t)
                 : family == "FS" ? AttackSpec::fs(epsilon, t)
                                  : AttackSpec::hybrid(epsilon, t);
  s.margin = base.margin;
  s.sinkhorn = base.sinkhorn;
  return s;
}

Diagnostics validate_config(const ExperimentConfig& c) {
  Diagnostics d;
  auto check = [&](const std::string& prefix, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      d.violations.push_back(prefix + e.what());
    }
  };
  check("", [&] { c.frontend.validate(); });
  check("", [&] { c.model.validate(); });
  check("", [&] {
    TrainConfig t = c.train;
    t.attack.validate();
  });
  if (c.train.epochs < 1) d.violations.push_back("train.epochs must be at least 1");
  if (c.train.batch_size < 1) d.violations.push_back("train.batch_size must be at least 1");
  if (c.train.lr_schedule.empty()) d.violations.push_back("train.lr_schedule must not be empty");
  for (const auto& s : c.train.lr_schedule) {
    if (!(s.lr > 0.0) || !std::isfinite(s.lr)) d.violations.push_back("train.lr_schedule learning rates must be positive");
  }
  for (std::size_t i = 1; i < c.train.lr_schedule.size(); ++i) {
    if (c.train.lr_schedule[i].until_epoch <= c.train.lr_schedule[i - 1].until_epoch) {
      d.violations.push_back("train.lr_schedule until_epoch values must be strictly ascending");
    }
  }
  if (!(c.train.momentum >= 0.0 && c.train.momentum < 1.0)) d.violations.push_back("train.momentum must be in [0, 1)");
  if (!(c.train.w1 >= 0.0) || !(c.train.w2 >= 0.0)) d.violations.push_back("train.w1 and train.w2 must be >= 0");

  if (c.corpus.kind == CorpusKind::kSynthetic) {
    const SynthConfig& s = c.corpus.synthetic;
    if (s.num_speakers < 2) d.violations.push_back("corpus.synthetic.num_speakers must be at least 2");
    if (s.utterances_per_speaker < 2) d.violations.push_back("corpus.synthetic.utterances_per_speaker must be at least 2");
    if (!(s.duration > 0.0)) d.violations.push_back("corpus.synthetic.duration must be positive");
    if (s.num_speakers != c.model.num_speakers) {
      d.violations.push_back("model.num_speakers (" + std::to_string(c.model.num_speakers) +
                             ") must equal corpus.synthetic.num_speakers (" + std::to_string(s.num_speakers) + ")");
    }
    if (s.sample_rate != c.frontend.sample_rate) {
      d.violations.push_back("corpus.synthetic.sample_rate must equal frontend.sample_rate");
    }
  } else {
    if (c.corpus.root.empty()) d.violations.push_back("corpus.root is required for a directory corpus");
    if (c.corpus.sample_rate != c.frontend.sample_rate) {
      d.violations.push_back("corpus.sample_rate must equal frontend.sample_rate");
    }
  }

  if (d.violations.empty()) {
    const SpeakerModel m(c.frontend, c.model);
    if (c.train.segment_length < m.min_samples()) {
      d.violations.push_back("train.segment_length (" + std::to_string(c.train.segment_length) +
                             ") is below the model's receptive field of " + std::to_string(m.min_samples()));
    }
    if (c.eval.segment_length < m.min_samples()) {
      d.violations.push_back("eval.segment_length (" + std::to_string(c.eval.segment_length) +
                             ") is below the model's receptive field of " + std::to_string(m.min_samples()));
    }
  }
  if (!(c.eval.epsilon >= 0.0) || !std::isfinite(c.eval.epsilon)) d.violations.push_back("eval.epsilon must be >= 0");
  if (c.eval.batch_size < 1) d.violations.push_back("eval.batch_size must be at least 1");
  for (const auto& name : c.eval.attacks) check("eval.attacks: ", [&] { parse_attack(name, 1.0); });
  for (const auto& name : c.eval.transfer_attacks) check("eval.transfer_attacks: ", [&] { parse_attack(name, 1.0); });
  if (c.eval.sweep_attack != "PGD" && c.eval.sweep_attack != "CW" && c.eval.sweep_attack != "FS" &&
      c.eval.sweep_attack != "HYB") {
    d.violations.push_back("eval.sweep_attack must be PGD, CW, FS or HYB");
  }
  for (std::size_t i = 0; i < c.eval.epsilon_sweep.size(); ++i) {
    if (!(c.eval.epsilon_sweep[i] >= 0.0) || (i > 0 && !(c.eval.epsilon_sweep[i] > c.eval.epsilon_sweep[i - 1]))) {
      d.violations.push_back("eval.epsilon_sweep must be non-negative and strictly ascending");
      break;
    }
  }
  for (std::size_t i = 0; i < c.eval.iteration_sweep.size(); ++i) {
    if (c.eval.iteration_sweep[i] < 1 || (i > 0 && c.eval.iteration_sweep[i] <= c.eval.iteration_sweep[i - 1])) {
      d.violations.push_back("eval.iteration_sweep must be >= 1 and strictly ascending");
      break;
    }
  }

  const AttackSpec& a = c.train.attack;
  auto warn_if = [&](bool cond, const std::string& msg) {
    if (cond) d.warnings.push_back(msg);
  };
  warn_if(a.epsilon != 0.002, "train.attack.epsilon is " + std::to_string(a.epsilon) + ", reference recipe uses 0.002");
  warn_if(c.eval.epsilon != a.epsilon, "eval.epsilon differs from train.attack.epsilon");
  warn_if(std::abs(a.alpha - a.epsilon / 5.0) > 1e-15 * a.epsilon, "train.attack.alpha is not epsilon / 5");
  warn_if(a.iterations != 10, "train.attack.iterations is not 10");
  warn_if(a.margin != 50.0, "train.attack.margin is not 50");
  warn_if(a.sinkhorn.regularization != 0.01, "train.attack.sinkhorn.regularization is not 0.01");
  warn_if(c.train.defense == DefenseKind::kHat && !(a.weights == LossWeights{1, 1, 1}),
          "train.attack.weights differ from (1, 1, 1)");
  warn_if(c.train.w1 != 1.0 || c.train.w2 != 1.0, "train.w1 / train.w2 differ from 1");
  warn_if(c.train.momentum != 0.9, "train.momentum is not 0.9");
  for (const auto& src : c.eval.transfer_sources) {
    warn_if(fs::path(src) == RunPaths{c.output_dir}.checkpoint(),
            "eval.transfer_sources contains the target checkpoint; transfer degenerates to white-box");
  }
  return d;
}

std::string config_fingerprint(const ExperimentConfig& config) {
  json j = config;
  j.erase("name");
  j.erase("output_dir");
  return fingerprint_hex(j.dump());
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected KEY=VALUE");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override '" + assignment + "': empty key segment");
    if (!node->is_object()) throw ConfigError("override '" + assignment + "': '" + part + "' is not inside an object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

json load_config_json(const fs::path& path, const std::vector<std::string>& overrides) {
  if (!fs::exists(path)) throw MissingArtifact("config file not found: " + path.string());
  json doc;
  try {
    doc = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return doc;
}

DirectoryLock::DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (!f) {
    throw Error("output directory " + dir.string() + " is in use by another run (remove " + path_.string() +
                " if it is stale)");
  }
  std::fclose(f);
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

Corpus build_corpus(const ExperimentConfig& c) {
  if (c.corpus.kind == CorpusKind::kSynthetic) return synth_corpus(c.corpus.synthetic);
  if (!fs::is_directory(c.corpus.root)) throw MissingArtifact("corpus directory not found: " + c.corpus.root);
  return load_corpus(ingest(c.corpus.root, {c.corpus.sample_rate, c.corpus.split_seed}));
}

TrainState state_from_checkpoint(const Checkpoint& checkpoint) {
  TrainState s;
  s.params = checkpoint.params;
  s.velocity = checkpoint.velocity;
  if (s.velocity.empty()) {
    for (const Tensor& t : s.params.trainable) s.velocity.emplace_back(t.shape(), 0.0);
  }
  s.epochs_done = checkpoint.metadata.value("epochs", std::size_t{0});
  return s;
}

Checkpoint run_train(const ExperimentConfig& config, const RunOptions& options) {
  require_valid(config);
  const RunPaths paths{config.output_dir};
  DirectoryLock lock(paths.dir);
  const Corpus corpus = build_corpus(config);
  if (corpus.speakers.size() != config.model.num_speakers) {
    throw ConfigError("model.num_speakers is " + std::to_string(config.model.num_speakers) + " but the corpus has " +
                      std::to_string(corpus.speakers.size()) + " speakers");
  }
  const std::string fp = config_fingerprint(config);
  const SpeakerModel model(config.frontend, config.model);
  const TrainConfig tc = effective_train(config);

  TrainState state = initial_state(model, config.seed);
  bool resumed = false;
  if (fs::exists(paths.checkpoint())) {
    const Checkpoint prev = load_checkpoint(paths.checkpoint());
    if (prev.config_fingerprint != fp) {
      throw ConfigError(paths.checkpoint().string() + " was written by a different configuration (" +
                        prev.config_fingerprint + " vs " + fp + "); choose another output directory");
    }
    state = state_from_checkpoint(prev);
    resumed = true;
    log_line(options, "resuming after epoch " + std::to_string(state.epochs_done));
  }
  write_text(paths.config(), json(config).dump(2) + "\n");

  auto make_checkpoint = [&](const TrainState& s) {
    Checkpoint ck;
    ck.frontend = config.frontend;
    ck.cnn = config.model;
    ck.params = s.params;
    ck.velocity = s.velocity;
    ck.seed = config.seed;
    ck.config_fingerprint = fp;
    ck.metadata = {{"name", config.name},
                   {"defense", defense_name(tc.defense)},
                   {"epochs", s.epochs_done},
                   {"corpus_fingerprint", corpus.fingerprint},
                   {"attack_weights", {tc.attack.weights.beta, tc.attack.weights.gamma, tc.attack.weights.zeta}}};
    return ck;
  };

  std::ofstream log(paths.train_log(), resumed ? std::ios::app : std::ios::trunc);
  if (!log) throw Error("cannot write " + paths.train_log().string());
  train(model, state, corpus, tc, [&](const EpochRecord& r, const TrainState& s) {
    EpochRecord rec = r;
    if (options.deterministic) rec.wall_seconds = 0.0;
    json line = rec;
    line["config_fingerprint"] = fp;
    line["seed"] = config.seed;
    log << line.dump() << '\n' << std::flush;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "epoch %zu  lr %.4g  clean %.4f  adv %.4f  acc %.2f%%  %.1fs", r.epoch, r.lr,
                  r.clean_loss, r.adv_loss, r.train_accuracy, r.wall_seconds);
    log_line(options, buf);
    if (config.checkpoint_every > 0 && r.epoch % config.checkpoint_every == 0) {
      save_checkpoint(paths.checkpoint(), make_checkpoint(s));
    }
  });

  const Checkpoint ck = make_checkpoint(state);
  save_checkpoint(paths.checkpoint(), ck);
  log_line(options, "wrote " + paths.checkpoint().string());
  return ck;
}

SnrStats run_attack(const ExperimentConfig& config, const std::string& attack, const RunOptions& options) {
  require_valid(config);
  const RunPaths paths{config.output_dir};
  DirectoryLock lock(paths.dir);
  const Corpus corpus = build_corpus(config);
  const Checkpoint ck = load_matching_checkpoint(paths.checkpoint(), config, corpus);
  const SpeakerModel model(ck.frontend, ck.cnn);
  const AttackSpec spec = parse_attack(attack, config.eval.epsilon, config.train.attack);
  if (!(spec.epsilon > 0.0)) throw ConfigError("eval.epsilon must be positive to export adversarial audio");

  const EvalOptions eo = eval_options(config);
  fs::create_directories(paths.adversarial());
  std::vector<double> all_snr;
  json per_utt = json::array();
  const auto batches = batch_iter(corpus, Split::kTest, eo.batch_size, eo.segment_length, eo.seed, 0, CropMode::kCenter);
  for (std::size_t bi = 0; bi < batches.size(); ++bi) {
    const Batch& b = batches[bi];
    const AttackRequest req{model, ck.params, ag::NormMode::kEval, derive_seed(config.seed, {bi})};
    const AdversarialBatch adv = generate(req, b.waveforms, b.labels, spec);
    const std::size_t len = b.waveforms.dim(1);
    for (std::size_t i = 0; i < b.labels.size(); ++i) {
      std::string id = corpus.utterances[b.utterances[i]].id;
      std::replace(id.begin(), id.end(), '/', '_');
      write_wav(paths.adversarial() / (id + ".wav"),
                std::span<const double>(adv.x_adv.data() + i * len, len), corpus.sample_rate);
      per_utt.push_back({{"utterance", corpus.utterances[b.utterances[i]].id},
                         {"snr_db", std::isfinite(adv.snr_db[i]) ? json(adv.snr_db[i]) : json(nullptr)}});
    }
    all_snr.insert(all_snr.end(), adv.snr_db.begin(), adv.snr_db.end());
  }
  const SnrStats stats = summarize_snr(all_snr);
  const json out = {{"attack", attack_label(spec)},
                    {"spec", spec},
                    {"mean_db", stats.mean},
                    {"min_db", stats.min},
                    {"max_db", stats.max},
                    {"perturbed", stats.perturbed},
                    {"utterances", per_utt},
                    {"config_fingerprint", config_fingerprint(config)},
                    {"seed", config.seed}};
  write_text(paths.snr(), out.dump(2) + "\n");
  log_line(options, "wrote " + std::to_string(all_snr.size()) + " files to " + paths.adversarial().string());
  return stats;
}

RobustnessReport run_eval(const ExperimentConfig& config, const RunOptions& options) {
  require_valid(config);
  const RunPaths paths{config.output_dir};
  DirectoryLock lock(paths.dir);
  const Corpus corpus = build_corpus(config);
  const Checkpoint ck = load_matching_checkpoint(paths.checkpoint(), config, corpus);
  const SpeakerModel model(ck.frontend, ck.cnn);
  const ModelRef target{&model, &ck.params, config.name};
  const EvalOptions eo = eval_options(config);
  const std::string fp = config_fingerprint(config);

  RobustnessReport report;
  report.model = config.name;
  auto entry = [&](const std::string& source, const std::string& label, const AttackSpec& spec,
                   const AttackOutcome& o) {
    ReportEntry e;
    e.model = config.name;
    e.source = source;
    e.attack = label;
    e.spec = spec;
    e.accuracy = o.accuracy;
    e.snr = o.snr;
    e.seed = config.seed;
    e.config_fingerprint = fp;
    e.corpus_fingerprint = corpus.fingerprint;
    e.timestamp = timestamp_or_fixed(options);
    report.entries.push_back(e);
    log_line(options, (source.empty() ? "" : source + " -> ") + label + ": " + std::to_string(o.accuracy));
  };

  AttackSpec clean_spec = AttackSpec::fgsm(0.002);
  clean_spec.epsilon = clean_spec.alpha = 0.0;
  report.clean_accuracy = clean_accuracy(target, corpus, eo);
  entry("", "Clean", clean_spec, AttackOutcome{report.clean_accuracy, 0, {}, 0.0});

  for (const auto& name : config.eval.attacks) {
    const AttackSpec spec = parse_attack(name, config.eval.epsilon, config.train.attack);
    // A zero budget still reports under the configured name.
    entry("", name, spec, accuracy_under_attack(target, corpus, spec, eo));
  }

  std::vector<Checkpoint> sources;
  for (const auto& src : config.eval.transfer_sources) sources.push_back(load_matching_checkpoint(src, config, corpus));
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const SpeakerModel src_model(sources[i].frontend, sources[i].cnn);
    const ModelRef source{&src_model, &sources[i].params, config.eval.transfer_sources[i]};
    for (const auto& name : config.eval.transfer_attacks) {
      const AttackSpec spec = parse_attack(name, config.eval.epsilon, config.train.attack);
      entry(source.name, name, spec, transfer_eval(source, target, corpus, spec, eo));
    }
  }

  std::vector<Curve> curves;
  const std::string family = config.eval.sweep_attack;
  if (!config.eval.epsilon_sweep.empty()) {
    const AttackSpec tmpl = parse_attack(family + "10", 0.002, config.train.attack);
    curves.push_back(epsilon_sweep(target, corpus, config.eval.epsilon_sweep, tmpl, eo));
  }
  if (!config.eval.iteration_sweep.empty()) {
    const AttackSpec tmpl = parse_attack(family + "10", config.eval.epsilon, config.train.attack);
    curves.push_back(iteration_sweep(target, corpus, config.eval.iteration_sweep, tmpl, eo));
  }
  if (!curves.empty()) write_curves_csv(paths.curves(), curves);

  append_jsonl(paths.report(), report.entries);
  std::vector<std::size_t> iters;
  for (const auto& name : config.eval.attacks) {
    const AttackSpec s = parse_attack(name, 1.0);
    if (name != "FGSM" && std::find(iters.begin(), iters.end(), s.iterations) == iters.end()) {
      iters.push_back(s.iterations);
    }
  }
  std::sort(iters.begin(), iters.end());
  write_text(paths.table(), render_table({report}, iters));
  return report;
}

AblationReport run_ablate(const ExperimentConfig& config, const RunOptions& options) {
  require_valid(config);
  const RunPaths paths{config.output_dir};
  DirectoryLock lock(paths.dir);
  const Corpus corpus = build_corpus(config);
  const SpeakerModel model(config.frontend, config.model);
  const AttackSpec pgd = parse_attack("PGD10", config.eval.epsilon, config.train.attack);
  const AttackSpec cw = parse_attack("CW10", config.eval.epsilon, config.train.attack);
  const AblationReport report =
      ablation_grid(model, corpus, effective_train(config), all_loss_subsets(), pgd, cw, eval_options(config),
                    [&](const LossSubset& s, const EpochRecord& r) {
                      log_line(options, s.name + " epoch " + std::to_string(r.epoch) +
                                            " clean loss " + std::to_string(r.clean_loss));
                    });
  std::ofstream f(paths.ablation_log(), std::ios::trunc);
  for (const AblationRow& r : report.rows) {
    f << json{{"subset", r.subset.name},
              {"weights", {r.subset.weights.beta, r.subset.weights.gamma, r.subset.weights.zeta}},
              {"trained_weights", {r.trained_weights.beta, r.trained_weights.gamma, r.trained_weights.zeta}},
              {"pgd", r.pgd},
              {"cw", r.cw},
              {"pgd_diff", r.pgd_diff},
              {"cw_diff", r.cw_diff},
              {"config_fingerprint", config_fingerprint(config)},
              {"seed", config.seed}}
             .dump()
      << '\n';
  }
  write_text(paths.ablation(), render_ablation(report));
  return report;
}

std::string run_report(const std::vector<fs::path>& run_dirs, const std::vector<std::size_t>& iterations) {
  if (run_dirs.empty()) throw ConfigError("report: no run directories given");
  std::vector<RobustnessReport> reports;
  std::string corpus_fp;
  fs::path corpus_owner;
  for (const fs::path& dir : run_dirs) {
    const RunPaths p{dir};
    if (!fs::exists(p.report())) throw MissingArtifact("no report in " + dir.string() + " (run eval first)");
    const auto entries = read_jsonl(p.report());
    if (entries.empty()) throw MissingArtifact(p.report().string() + " is empty");
    RobustnessReport r;
    r.model = entries.back().model;
    // Later entries supersede earlier ones for the same attack.
    std::map<std::string, ReportEntry> latest;
    for (const ReportEntry& e : entries) {
      if (corpus_fp.empty()) {
        corpus_fp = e.corpus_fingerprint;
        corpus_owner = dir;
      } else if (e.corpus_fingerprint != corpus_fp) {
        throw ConfigError("report: " + dir.string() + " was evaluated on corpus " + e.corpus_fingerprint + ", but " +
                          corpus_owner.string() + " used " + corpus_fp);
      }
      if (e.source.empty()) latest[e.attack] = e;
    }
    for (auto& [name, e] : latest) {
      if (name == "Clean") {
        r.clean_accuracy = e.accuracy;
      } else {
        r.entries.push_back(e);
      }
    }
    reports.push_back(std::move(r));
  }
  return render_table(reports, iterations);
}

}  // namespace advspk
