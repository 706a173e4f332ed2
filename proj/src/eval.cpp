#include "advspk/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "advspk/util.hpp"

namespace advspk {

namespace {

void require_ref(const ModelRef& r, const char* what) {
  if (!r.model || !r.params) throw Error(std::string(what) + ": model reference is empty");
  r.model->check_params(*r.params);
}

std::vector<Batch> eval_batches(const Corpus& corpus, const EvalOptions& o) {
  auto batches = batch_iter(corpus, o.split, o.batch_size, o.segment_length, o.seed, 0, CropMode::kCenter);
  if (batches.empty()) throw Error("evaluation split '" + std::string(split_name(o.split)) + "' is empty");
  return batches;
}

std::size_t count_correct(const ModelRef& m, const Tensor& x, std::span<const int> labels) {
  const Value logits = m.model->forward_logits(*m.params, Value::constant(x));
  const Tensor& l = logits.data();
  const std::size_t k = l.dim(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double* row = l.data() + i * k;
    if (std::max_element(row, row + k) - row == labels[i]) ++hits;
  }
  return hits;
}

double percent(std::size_t hits, std::size_t n) { return 100.0 * static_cast<double>(hits) / static_cast<double>(n); }

// Craft on `source`, score on `target`.
AttackOutcome run_attack(const ModelRef& source, const ModelRef& target, const Corpus& corpus, const AttackSpec& spec,
                         const EvalOptions& options) {
  AttackOutcome out;
  const auto batches = eval_batches(corpus, options);
  if (spec.epsilon == 0.0) {
    std::size_t hits = 0;
    for (const Batch& b : batches) {
      hits += count_correct(target, b.waveforms, b.labels);
      out.samples += b.labels.size();
    }
    out.accuracy = percent(hits, out.samples);
    return out;
  }
  spec.validate();
  std::size_t hits = 0;
  std::vector<double> snr;
  for (std::size_t bi = 0; bi < batches.size(); ++bi) {
    const Batch& b = batches[bi];
    const AttackRequest req{*source.model, *source.params, ag::NormMode::kEval, derive_seed(options.seed, {bi})};
    const AdversarialBatch adv = generate(req, b.waveforms, b.labels, spec);
    hits += count_correct(target, adv.x_adv, b.labels);
    out.samples += b.labels.size();
    out.max_linf = std::max(out.max_linf, adv.linf);
    snr.insert(snr.end(), adv.snr_db.begin(), adv.snr_db.end());
  }
  out.accuracy = percent(hits, out.samples);
  out.snr = summarize_snr(snr);
  return out;
}

std::string fmt2(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << v;
  return s.str();
}

std::string now_utc() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

SnrStats summarize_snr(std::span<const double> snr) {
  SnrStats s;
  double sum = 0.0;
  for (double v : snr) {
    if (!std::isfinite(v)) continue;
    if (s.perturbed == 0) {
      s.min = s.max = v;
    } else {
      s.min = std::min(s.min, v);
      s.max = std::max(s.max, v);
    }
    sum += v;
    ++s.perturbed;
  }
  if (s.perturbed > 0) s.mean = sum / static_cast<double>(s.perturbed);
  return s;
}

double clean_accuracy(const ModelRef& target, const Corpus& corpus, const EvalOptions& options) {
  require_ref(target, "clean_accuracy");
  std::size_t hits = 0, n = 0;
  for (const Batch& b : eval_batches(corpus, options)) {
    hits += count_correct(target, b.waveforms, b.labels);
    n += b.labels.size();
  }
  return percent(hits, n);
}

AttackOutcome accuracy_under_attack(const ModelRef& target, const Corpus& corpus, const AttackSpec& spec,
                                    const EvalOptions& options) {
  require_ref(target, "accuracy_under_attack");
  return run_attack(target, target, corpus, spec, options);
}

AttackOutcome transfer_eval(const ModelRef& source, const ModelRef& target, const Corpus& corpus,
                            const AttackSpec& spec, const EvalOptions& options) {
  require_ref(source, "transfer_eval source");
  require_ref(target, "transfer_eval target");
  if (source.model->cnn_config().num_speakers != target.model->cnn_config().num_speakers) {
    throw Error("transfer_eval: source and target disagree on the number of speakers");
  }
  return run_attack(source, target, corpus, spec, options);
}

std::string attack_label(const AttackSpec& spec) {
  const LossWeights& w = spec.weights;
  const std::string t = std::to_string(spec.iterations);
  if (w == LossWeights{1, 0, 0} && spec.iterations == 1 && !spec.random_init && spec.alpha == spec.epsilon) {
    return "FGSM";
  }
  if (w == LossWeights{1, 0, 0}) return "PGD" + t;
  if (w == LossWeights{0, 0, 1}) return "CW" + t;
  if (w == LossWeights{0, 1, 0}) return "FS" + t;
  if (w == LossWeights{1, 1, 1}) return "HYB" + t;
  std::ostringstream s;
  s << "MIX(" << w.beta << "," << w.gamma << "," << w.zeta << ")" << t;
  return s.str();
}

Curve epsilon_sweep(const ModelRef& target, const Corpus& corpus, std::span<const double> epsilons,
                    const AttackSpec& attack_template, const EvalOptions& options) {
  require_ref(target, "epsilon_sweep");
  if (epsilons.empty()) throw Error("epsilon_sweep: no budgets given");
  for (std::size_t i = 0; i < epsilons.size(); ++i) {
    if (!(epsilons[i] >= 0.0) || !std::isfinite(epsilons[i])) throw Error("epsilon_sweep: budgets must be >= 0");
    if (i > 0 && !(epsilons[i] > epsilons[i - 1])) throw Error("epsilon_sweep: budgets must be strictly ascending");
  }
  attack_template.validate();
  const double ratio = attack_template.alpha / attack_template.epsilon;
  Curve c{attack_label(attack_template), options.seed, {}};
  for (double eps : epsilons) {
    AttackSpec s = attack_template;
    s.epsilon = eps;
    s.alpha = ratio * eps;
    c.points.push_back({eps, run_attack(target, target, corpus, s, options).accuracy});
  }
  return c;
}

Curve iteration_sweep(const ModelRef& target, const Corpus& corpus, std::span<const std::size_t> iterations,
                      const AttackSpec& attack_template, const EvalOptions& options) {
  require_ref(target, "iteration_sweep");
  if (iterations.empty()) throw Error("iteration_sweep: no iteration counts given");
  for (std::size_t i = 0; i < iterations.size(); ++i) {
    if (iterations[i] < 1) throw Error("iteration_sweep: iteration counts must be >= 1");
    if (i > 0 && !(iterations[i] > iterations[i - 1])) {
      throw Error("iteration_sweep: iteration counts must be strictly ascending");
    }
  }
  attack_template.validate();
  AttackSpec label_spec = attack_template;
  label_spec.iterations = iterations.back();
  Curve c{attack_label(label_spec), options.seed, {}};
  for (std::size_t t : iterations) {
    AttackSpec s = attack_template;
    s.iterations = t;
    if (t == 1) {
      s.alpha = s.epsilon;
      s.random_init = false;
    }
    c.points.push_back({static_cast<double>(t), run_attack(target, target, corpus, s, options).accuracy});
  }
  return c;
}

void write_curves_csv(const std::filesystem::path& path, const std::vector<Curve>& curves) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f << "x,accuracy,attack,seed\n";
  f << std::setprecision(17);
  for (const Curve& c : curves) {
    for (const CurvePoint& p : c.points) f << p.x << ',' << p.accuracy << ',' << c.attack << ',' << c.seed << '\n';
  }
  if (!f) throw Error("write failed: " + path.string());
}

std::vector<LossSubset> all_loss_subsets() {
  return {{"CE", {1, 0, 0}},     {"FS", {0, 1, 0}},    {"M", {0, 0, 1}},         {"CE+FS", {1, 1, 0}},
          {"CE+M", {1, 0, 1}},   {"FS+M", {0, 1, 1}},  {"CE+FS+M", {1, 1, 1}}};
}

AblationReport ablation_grid(const SpeakerModel& model, const Corpus& corpus, const TrainConfig& recipe,
                             const std::vector<LossSubset>& subsets, const AttackSpec& pgd, const AttackSpec& cw,
                             const EvalOptions& options, const AblationProgress& progress) {
  const auto full = std::find_if(subsets.begin(), subsets.end(),
                                 [](const LossSubset& s) { return s.weights == LossWeights{1, 1, 1}; });
  if (full == subsets.end()) throw Error("ablation_grid: the CE+FS+M subset is required as the reference row");
  for (const LossSubset& s : subsets) {
    if (s.weights.beta == 0 && s.weights.gamma == 0 && s.weights.zeta == 0) {
      throw Error("ablation_grid: subset '" + s.name + "' is empty");
    }
  }

  AblationReport report;
  report.pgd = pgd;
  report.cw = cw;
  for (const LossSubset& s : subsets) {
    TrainConfig cfg = recipe;
    cfg.defense = DefenseKind::kHat;
    cfg.attack.weights = s.weights;
    TrainState state = initial_state(model, cfg.seed);
    AblationRow row;
    row.subset = s;
    const auto log = train(model, state, corpus, cfg, [&](const EpochRecord& r, const TrainState&) {
      if (progress) progress(s, r);
    });
    row.trained_weights = log.back().attack_weights;
    for (const EpochRecord& r : log) {
      if (!(r.attack_weights == s.weights)) {
        throw Error("ablation_grid: epoch " + std::to_string(r.epoch) + " of '" + s.name +
                    "' trained with different loss weights");
      }
    }
    const ModelRef ref{&model, &state.params, s.name};
    row.pgd = run_attack(ref, ref, corpus, pgd, options).accuracy;
    row.cw = run_attack(ref, ref, corpus, cw, options).accuracy;
    report.rows.push_back(row);
  }
  const AblationRow& ref = report.rows[static_cast<std::size_t>(full - subsets.begin())];
  const double ref_pgd = ref.pgd, ref_cw = ref.cw;
  for (AblationRow& r : report.rows) {
    r.pgd_diff = ref_pgd - r.pgd;
    r.cw_diff = ref_cw - r.cw;
  }
  return report;
}

std::string render_ablation(const AblationReport& report) {
  std::ostringstream s;
  const std::string pl = attack_label(report.pgd), cl = attack_label(report.cw);
  s << std::left << std::setw(10) << "Losses" << std::right << std::setw(10) << pl << std::setw(10) << cl
    << std::setw(12) << ("d" + pl) << std::setw(12) << ("d" + cl) << '\n';
  for (const AblationRow& r : report.rows) {
    s << std::left << std::setw(10) << r.subset.name << std::right << std::setw(10) << fmt2(r.pgd) << std::setw(10)
      << fmt2(r.cw) << std::setw(12) << fmt2(r.pgd_diff) << std::setw(12) << fmt2(r.cw_diff) << '\n';
  }
  return s.str();
}

std::string MaskingReport::evidence() const {
  std::ostringstream s;
  s << "(a) " << (black_box_above_white_box ? "pass" : "FAIL") << ": white-box " << fmt2(white_box);
  for (const auto& [name, acc] : black_box) s << ", from " << name << " " << fmt2(acc);
  s << "\n(b) " << (iterative_below_one_step ? "pass" : "FAIL") << ": iterative " << fmt2(white_box) << " vs one-step "
    << fmt2(one_step);
  s << "\n(c) " << (large_budget_breaks_model ? "pass" : "FAIL") << ": large budget " << fmt2(large_budget) << '\n';
  return s.str();
}

MaskingReport masking_checks(const ModelRef& target, const std::vector<ModelRef>& sources, const Corpus& corpus,
                             const MaskingOptions& masking, const EvalOptions& options) {
  require_ref(target, "masking_checks");
  MaskingReport r;
  r.white_box = run_attack(target, target, corpus, masking.iterative, options).accuracy;
  r.black_box_above_white_box = true;
  for (const ModelRef& src : sources) {
    const double acc = transfer_eval(src, target, corpus, masking.iterative, options).accuracy;
    r.black_box.emplace_back(src.name, acc);
    if (acc + masking.tolerance < r.white_box) r.black_box_above_white_box = false;
  }
  r.one_step = run_attack(target, target, corpus, masking.one_step, options).accuracy;
  r.iterative_below_one_step = r.white_box <= r.one_step + masking.tolerance;

  AttackSpec large = masking.iterative;
  large.alpha = large.alpha / large.epsilon * masking.large_epsilon;
  large.epsilon = masking.large_epsilon;
  r.large_budget = run_attack(target, target, corpus, large, options).accuracy;
  r.large_budget_breaks_model = r.large_budget <= masking.large_epsilon_ceiling;
  return r;
}

void to_json(nlohmann::json& j, const AttackSpec& s) {
  j = {{"weights", {s.weights.beta, s.weights.gamma, s.weights.zeta}},
       {"epsilon", s.epsilon},
       {"alpha", s.alpha},
       {"iterations", s.iterations},
       {"random_init", s.random_init},
       {"margin", s.margin},
       {"sinkhorn",
        {{"regularization", s.sinkhorn.regularization},
         {"max_iters", s.sinkhorn.max_iters},
         {"tolerance", s.sinkhorn.tolerance}}}};
}

void from_json(const nlohmann::json& j, AttackSpec& s) {
  const auto& w = j.at("weights");
  s.weights = {w.at(0).get<double>(), w.at(1).get<double>(), w.at(2).get<double>()};
  j.at("epsilon").get_to(s.epsilon);
  j.at("alpha").get_to(s.alpha);
  j.at("iterations").get_to(s.iterations);
  j.at("random_init").get_to(s.random_init);
  j.at("margin").get_to(s.margin);
  const auto& sk = j.at("sinkhorn");
  sk.at("regularization").get_to(s.sinkhorn.regularization);
  sk.at("max_iters").get_to(s.sinkhorn.max_iters);
  sk.at("tolerance").get_to(s.sinkhorn.tolerance);
}

void to_json(nlohmann::json& j, const ReportEntry& e) {
  j = {{"model", e.model},
       {"source", e.source},
       {"attack", e.attack},
       {"spec", e.spec},
       {"accuracy", e.accuracy},
       {"snr", {{"mean", e.snr.mean}, {"min", e.snr.min}, {"max", e.snr.max}, {"perturbed", e.snr.perturbed}}},
       {"seed", e.seed},
       {"config_fingerprint", e.config_fingerprint},
       {"corpus_fingerprint", e.corpus_fingerprint},
       {"timestamp", e.timestamp.empty() ? now_utc() : e.timestamp}};
}

void from_json(const nlohmann::json& j, ReportEntry& e) {
  j.at("model").get_to(e.model);
  j.at("source").get_to(e.source);
  j.at("attack").get_to(e.attack);
  j.at("spec").get_to(e.spec);
  j.at("accuracy").get_to(e.accuracy);
  const auto& s = j.at("snr");
  s.at("mean").get_to(e.snr.mean);
  s.at("min").get_to(e.snr.min);
  s.at("max").get_to(e.snr.max);
  s.at("perturbed").get_to(e.snr.perturbed);
  j.at("seed").get_to(e.seed);
  j.at("config_fingerprint").get_to(e.config_fingerprint);
  j.at("corpus_fingerprint").get_to(e.corpus_fingerprint);
  j.at("timestamp").get_to(e.timestamp);
}

std::optional<double> RobustnessReport::find(const std::string& attack) const {
  if (attack == "Clean") return clean_accuracy;
  for (const ReportEntry& e : entries) {
    if (e.source.empty() && e.attack == attack) return e.accuracy;
  }
  return std::nullopt;
}

void append_jsonl(const std::filesystem::path& path, const std::vector<ReportEntry>& entries) {
  std::ofstream f(path, std::ios::app);
  if (!f) throw Error("cannot append to " + path.string());
  for (const ReportEntry& e : entries) f << nlohmann::json(e).dump() << '\n';
  if (!f) throw Error("write failed: " + path.string());
}

std::vector<ReportEntry> read_jsonl(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read " + path.string());
  std::vector<ReportEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<ReportEntry>());
    } catch (const nlohmann::json::exception& e) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::string render_table(const std::vector<RobustnessReport>& reports, const std::vector<std::size_t>& iterations) {
  std::vector<std::string> cols{"Clean", "FGSM"};
  for (const char* family : {"PGD", "CW", "FS"}) {
    for (std::size_t t : iterations) cols.push_back(family + std::to_string(t));
  }
  std::size_t name_width = 8;
  for (const auto& r : reports) name_width = std::max(name_width, r.model.size() + 2);

  std::ostringstream s;
  s << std::left << std::setw(static_cast<int>(name_width)) << "Defense" << std::right;
  for (const auto& c : cols) s << std::setw(9) << c;
  s << '\n';
  for (const auto& r : reports) {
    s << std::left << std::setw(static_cast<int>(name_width)) << r.model << std::right;
    for (const auto& c : cols) {
      const auto v = r.find(c);
      s << std::setw(9) << (v ? fmt2(*v) : "-");
    }
    s << '\n';
  }
  return s.str();
}

}  // namespace advspk
