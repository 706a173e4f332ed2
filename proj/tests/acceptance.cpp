// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails. Trains the desk models under --work.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "advspk/experiment.hpp"
#include "advspk/util.hpp"
#include "op_catalog.hpp"

using namespace advspk;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kSmoothFd = 1e-6;
constexpr double kKinkFd = 1e-4;
constexpr double kEndToEndFd = 1e-4;
constexpr double kFdSeconds = 120.0;
constexpr double kOtGap = 0.02;
constexpr double kOtViolation = 1e-6;
constexpr double kOtSeconds = 60.0;
constexpr double kBallSlack = 1e-12;
constexpr double kStandardCleanMin = 95.0;
constexpr double kStandardPgdMax = 20.0;
constexpr double kHatCleanMin = 90.0;
constexpr double kHatOverStandard = 30.0;
constexpr double kHatVsFsSlack = 2.0;
constexpr double kTrainSeconds = 30.0 * 60.0;
constexpr double kMonotoneSlack = 2.0;
constexpr double kLargeBudgetCeiling = 5.0;
constexpr double kSnrLow = 25.0;
constexpr double kSnrHigh = 60.0;
constexpr double kSnrFormula = 1e-9;

const fs::path kPresets = fs::path(ADVSPK_SOURCE_DIR) / "presets";

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 2) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(precision);
  s << v;
  return s.str();
}

std::string sci(double v) {
  std::ostringstream s;
  s.precision(2);
  s << std::scientific << v;
  return s.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig preset(const std::string& name, const fs::path& work, std::vector<std::string> overrides = {}) {
  overrides.push_back("output_dir=" + (work / name).string());
  return experiment_from_json(load_config_json(kPresets / (name + ".json"), overrides));
}

EvalOptions eval_options(const ExperimentConfig& c) {
  EvalOptions o;
  o.batch_size = c.eval.batch_size;
  o.segment_length = c.eval.segment_length;
  o.seed = c.seed;
  return o;
}

// ---------------------------------------------------------------------------

Verdict gradients() {
  const auto t0 = Clock::now();
  double worst_smooth = 0.0, worst_kink = 0.0;
  std::string smooth_name, kink_name;
  const auto ops = fixtures::op_catalog();
  for (std::size_t i = 0; i < ops.size(); ++i) {
    std::mt19937_64 rng(1000 + i);
    for (int k = 0; k < 20; ++k) {
      const double err = finite_diff_check(ops[i].fn, ops[i].sample(rng), {1e-5, 1e-6});
      double& worst = ops[i].smooth ? worst_smooth : worst_kink;
      if (err > worst) {
        worst = err;
        (ops[i].smooth ? smooth_name : kink_name) = ops[i].name;
      }
    }
  }

  // Waveform to CE through the desk model, every input coordinate.
  const ExperimentConfig c = preset("desk-standard", "unused");
  const SpeakerModel m(c.frontend, c.model);
  const ModelParams p = m.build(7);
  std::mt19937_64 rng(77);
  const Tensor x = fixtures::random_tensor({2, m.min_samples()}, rng, -0.3, 0.3);
  const std::vector<int> y{3, 8};
  const double e2e =
      finite_diff_check([&](const Value& v) { return ce_loss(m.forward_logits(p, v), y); }, x, {1e-5, 1e-6});

  const double secs = seconds_since(t0);
  const bool pass = worst_smooth < kSmoothFd && worst_kink < kKinkFd && e2e < kEndToEndFd && secs < kFdSeconds;
  return {pass, std::to_string(ops.size()) + " primitives x 20 points, worst smooth " + sci(worst_smooth) + " (" +
                    smooth_name + "), worst kinked " + sci(worst_kink) + " (" + kink_name + "), waveform->CE " +
                    sci(e2e) + ", " + fmt(secs, 1) + " s"};
}

double brute_force_ot(const Tensor& cost) {
  const std::size_t n = cost.dim(0);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (std::size_t i = 0; i < n; ++i) c += cost.at(i, perm[i]);
    best = std::min(best, c / static_cast<double>(n));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

Verdict sinkhorn() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> size(1, 4);
  double worst_gap = 0.0, worst_violation = 0.0;
  bool below = false;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = size(rng);
    const Tensor cost = fixtures::random_tensor({n, n}, rng, 0.0, 2.0);
    const double exact = brute_force_ot(cost);
    const TransportPlan plan = sinkhorn_ot(TransportProblem::uniform(cost, 0.01));
    below |= plan.distance < exact - 1e-9;
    worst_gap = std::max(worst_gap, plan.distance - exact);
    worst_violation = std::max(worst_violation, plan.marginal_violation);
  }
  const double secs = seconds_since(t0);
  const bool pass = !below && worst_gap < kOtGap && worst_violation < kOtViolation && secs < kOtSeconds;
  return {pass, "50 problems n<=4, worst gap " + sci(worst_gap) + ", worst marginal violation " +
                    sci(worst_violation) + (below ? ", a value fell below the exact optimum" : "") + ", " +
                    fmt(secs, 1) + " s"};
}

Verdict invariants() {
  const ExperimentConfig c = preset("desk-standard", "unused");
  const SpeakerModel m(c.frontend, c.model);
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> kind(0, 4), steps(1, 4), label(0, static_cast<int>(c.model.num_speakers) - 1);
  std::uniform_real_distribution<double> log_eps(std::log(1e-4), std::log(0.05));
  std::bernoulli_distribution coin(0.5);

  std::size_t calls = 0, iterates = 0, ball_breaks = 0, range_breaks = 0, fgsm_checks = 0, fgsm_mismatch = 0;
  double worst_excess = 0.0;
  for (int call = 0; call < 1000; ++call) {
    const ModelParams p = m.build(call % 5);
    // Start near the range edges now and then so the clip is exercised.
    Tensor x = fixtures::random_tensor({2, 2000}, rng, -1.0, 1.0);
    if (call % 3 == 0) {
      for (std::size_t i = 0; i < x.size(); i += 7) x[i] = (i % 2 ? 1.0 : -1.0);
    }
    const std::vector<int> y{label(rng), label(rng)};
    const double eps = std::exp(log_eps(rng));
    const std::size_t t = static_cast<std::size_t>(steps(rng));
    AttackSpec spec;
    switch (kind(rng)) {
      case 0: spec = AttackSpec::fgsm(eps); break;
      case 1: spec = AttackSpec::pgd(eps, t); break;
      case 2: spec = AttackSpec::cw(eps, t); break;
      case 3: spec = AttackSpec::fs(eps, t); break;
      default: spec = AttackSpec::hybrid(eps, t); break;
    }
    const ag::NormMode mode = coin(rng) ? ag::NormMode::kEval : ag::NormMode::kTrain;
    const AttackRequest req{m, p, mode, static_cast<std::uint64_t>(call),
                            [&](std::size_t, const Tensor& it) {
                              ++iterates;
                              const double d = linf_distance(it, x);
                              worst_excess = std::max(worst_excess, d - eps);
                              if (d > eps + kBallSlack) ++ball_breaks;
                              for (double v : it.values()) {
                                if (v < kWaveMin || v > kWaveMax) {
                                  ++range_breaks;
                                  break;
                                }
                              }
                            }};
    const AdversarialBatch out = generate(req, x, y, spec);
    ++calls;

    if (spec.iterations == 1 && !spec.random_init) {
      const Value xv = Value::leaf(x, true);
      ForwardOptions fo;
      fo.mode = mode;
      backward(ce_loss(m.forward_logits(p, xv, fo), y));
      Tensor direct = x;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double g = xv.grad()[i];
        direct[i] = std::clamp(x[i] + eps * static_cast<double>((g > 0) - (g < 0)), kWaveMin, kWaveMax);
      }
      ++fgsm_checks;
      fgsm_mismatch += !(out.x_adv == direct);
    }
  }
  const bool pass = ball_breaks == 0 && range_breaks == 0 && fgsm_mismatch == 0 && fgsm_checks > 0;
  return {pass, std::to_string(calls) + " calls, " + std::to_string(iterates) + " iterates, ball breaks " +
                    std::to_string(ball_breaks) + ", range breaks " + std::to_string(range_breaks) +
                    ", largest excess " + sci(worst_excess) + ", FGSM bit-equal " +
                    std::to_string(fgsm_checks - fgsm_mismatch) + "/" + std::to_string(fgsm_checks)};
}

// The three desk models, trained once and shared by criteria 4, 5, 6 and 8.
struct DeskModels {
  struct Trained {
    ExperimentConfig config;
    SpeakerModel model;
    ModelParams params;
    ModelRef ref() const { return {&model, &params, config.name}; }
  };
  Corpus corpus;
  std::map<std::string, Trained> runs;
  double train_seconds = 0.0;
  bool reused = false;  // runs were already finished, so train_seconds is not a training time

  const Trained& operator[](const std::string& name) const { return runs.at(name); }
};

DeskModels train_desk(const fs::path& work, bool verbose) {
  DeskModels d;
  const auto t0 = Clock::now();
  for (const std::string name : {"desk-standard", "desk-hat", "desk-fs-at"}) {
    const ExperimentConfig c = preset(name, work);
    d.reused |= fs::exists(RunPaths{c.output_dir}.checkpoint());
    RunOptions o;
    o.deterministic = true;
    o.log = verbose ? &std::cerr : nullptr;
    const Checkpoint ck = run_train(c, o);
    d.runs.emplace(name, DeskModels::Trained{c, SpeakerModel(c.frontend, c.model), ck.params});
    if (d.corpus.utterances.empty()) d.corpus = build_corpus(c);
  }
  d.train_seconds = seconds_since(t0);
  return d;
}

Verdict desk_training(const DeskModels& d) {
  const auto& std_run = d["desk-standard"];
  const auto& hat = d["desk-hat"];
  const auto& fsat = d["desk-fs-at"];
  const EvalOptions eo = eval_options(hat.config);
  const AttackSpec pgd10 = parse_attack("PGD10", 0.002);
  const double std_clean = clean_accuracy(std_run.ref(), d.corpus, eo);
  const double std_pgd = accuracy_under_attack(std_run.ref(), d.corpus, pgd10, eo).accuracy;
  const double hat_clean = clean_accuracy(hat.ref(), d.corpus, eo);
  const double hat_pgd = accuracy_under_attack(hat.ref(), d.corpus, pgd10, eo).accuracy;
  const double fs_pgd = accuracy_under_attack(fsat.ref(), d.corpus, pgd10, eo).accuracy;
  const bool pass = std_clean >= kStandardCleanMin && std_pgd <= kStandardPgdMax && hat_clean >= kHatCleanMin &&
                    hat_pgd >= std_pgd + kHatOverStandard && hat_pgd >= fs_pgd - kHatVsFsSlack &&
                    (d.reused || d.train_seconds < kTrainSeconds);
  return {pass, "standard clean " + fmt(std_clean) + " PGD10 " + fmt(std_pgd) + "; HAT clean " + fmt(hat_clean) +
                    " PGD10 " + fmt(hat_pgd) + "; FS-AT PGD10 " + fmt(fs_pgd) + "; training " +
                    (d.reused ? std::string("reused") : fmt(d.train_seconds, 0) + " s")};
}

Verdict attack_strength(const DeskModels& d) {
  const auto& hat = d["desk-hat"];
  const EvalOptions eo = eval_options(hat.config);
  const double fgsm = accuracy_under_attack(hat.ref(), d.corpus, parse_attack("FGSM", 0.002), eo).accuracy;
  const double pgd10 = accuracy_under_attack(hat.ref(), d.corpus, parse_attack("PGD10", 0.002), eo).accuracy;
  const double pgd100 = accuracy_under_attack(hat.ref(), d.corpus, parse_attack("PGD100", 0.002), eo).accuracy;

  const std::vector<double> budgets{0.001, 0.002, 0.005, 0.01, 0.1};
  const Curve curve = epsilon_sweep(hat.ref(), d.corpus, budgets, AttackSpec::pgd(0.002, 10), eo);
  bool monotone = true;
  std::string sweep;
  for (std::size_t i = 0; i < curve.points.size(); ++i) {
    if (i > 0 && curve.points[i].accuracy > curve.points[i - 1].accuracy + kMonotoneSlack) monotone = false;
    sweep += (i ? " " : "") + fmt(curve.points[i].accuracy, 1);
  }
  const double largest = curve.points.back().accuracy;
  const bool pass = pgd100 <= pgd10 + kMonotoneSlack && pgd10 <= fgsm + kMonotoneSlack && monotone &&
                    largest <= kLargeBudgetCeiling;
  return {pass, "HAT FGSM " + fmt(fgsm) + " PGD10 " + fmt(pgd10) + " PGD100 " + fmt(pgd100) +
                    "; PGD10 at eps {0.001 0.002 0.005 0.01 0.1}: " + sweep};
}

Verdict transfer(const DeskModels& d) {
  const auto& hat = d["desk-hat"];
  const auto& std_run = d["desk-standard"];
  const EvalOptions eo = eval_options(hat.config);
  bool pass = true;
  std::string detail;
  for (const std::string name : {"PGD10", "CW10"}) {
    const AttackSpec spec = parse_attack(name, 0.002);
    const double white = accuracy_under_attack(hat.ref(), d.corpus, spec, eo).accuracy;
    const double black = transfer_eval(std_run.ref(), hat.ref(), d.corpus, spec, eo).accuracy;
    pass &= black >= white;
    detail += (detail.empty() ? "" : "; ") + name + " standard->HAT " + fmt(black) + " vs white-box " + fmt(white);
  }
  return {pass, detail};
}

Verdict pgd_at_equivalence(const fs::path& work) {
  const ExperimentConfig pgd = preset("desk-pgd-at", work, {"train.epochs=2"});
  ExperimentConfig hat = preset("desk-hat", work, {"train.epochs=2"});
  hat.train.attack.weights = {1, 0, 0};
  const Corpus corpus = build_corpus(pgd);
  const SpeakerModel m(pgd.frontend, pgd.model);
  TrainConfig tp = pgd.train, th = hat.train;
  tp.seed = th.seed = pgd.seed;
  TrainState a = initial_state(m, pgd.seed), b = initial_state(m, hat.seed);
  const auto la = train(m, a, corpus, tp);
  const auto lb = train(m, b, corpus, th);
  bool logs = la.size() == lb.size();
  for (std::size_t i = 0; logs && i < la.size(); ++i) {
    EpochRecord relabeled = lb[i];  // the defense name is the one field expected to differ
    relabeled.defense = la[i].defense;
    logs = la[i].same_result(relabeled);
  }
  const bool params = a.params == b.params && a.velocity == b.velocity;
  return {logs && params, std::string("2 epochs on the desk corpus: parameters ") +
                              (params ? "bit-identical" : "differ") + ", epoch logs " + (logs ? "match" : "differ")};
}

Verdict snr(const DeskModels& d) {
  const auto& hat = d["desk-hat"];
  const EvalOptions eo = eval_options(hat.config);
  SnrStats pooled{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
                  -std::numeric_limits<double>::infinity(), 0};
  std::string detail;
  for (const std::string name : {"FGSM", "PGD10", "HYB10"}) {
    const AttackOutcome o = accuracy_under_attack(hat.ref(), d.corpus, parse_attack(name, 0.002), eo);
    pooled.min = std::min(pooled.min, o.snr.min);
    pooled.max = std::max(pooled.max, o.snr.max);
    pooled.perturbed += o.snr.perturbed;
    detail += name + " mean " + fmt(o.snr.mean) + " dB; ";
  }

  // 30 dB by construction: noise power is 1e-3 of signal power.
  const std::size_t n = 64;
  Tensor x({1, n}, 0.5), adv({1, n});
  for (std::size_t i = 0; i < n; ++i) adv[i] = 0.5 + (i % 2 ? 1.0 : -1.0) * 0.5 * std::sqrt(1e-3);
  const double formula = snr_db(x, adv)[0];

  const bool pass = pooled.perturbed > 0 && pooled.min >= kSnrLow && pooled.max <= kSnrHigh &&
                    std::abs(formula - 30.0) < kSnrFormula;
  return {pass, detail + "range [" + fmt(pooled.min) + ", " + fmt(pooled.max) + "] over " +
                    std::to_string(pooled.perturbed) + " rows; 30 dB case off by " + sci(std::abs(formula - 30.0))};
}

Verdict determinism(const fs::path& work) {
  auto once = [&](const std::string& tag) {
    ExperimentConfig c = preset("desk-standard", work,
                                {"train.epochs=3", "eval.attacks=[\"FGSM\",\"PGD10\",\"HYB10\"]", "eval.epsilon_sweep=[]",
                                 "eval.iteration_sweep=[]", "eval.transfer_sources=[]"});
    c.output_dir = (work / ("determinism-" + tag)).string();
    fs::remove_all(c.output_dir);
    RunOptions o;
    o.deterministic = true;
    run_train(c, o);
    run_eval(c, o);
    const RunPaths p{c.output_dir};
    return fingerprint_hex(slurp(p.checkpoint()) + slurp(p.train_log()) + slurp(p.report()) + slurp(p.table()));
  };
  const std::string a = once("a"), b = once("b");
  return {a == b, "train + eval hashes " + a + " / " + b};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance run"};
  fs::path work = fs::temp_directory_path() / "advspk-acceptance";
  std::vector<int> only;
  bool reuse = false, verbose = false;
  app.add_option("--work", work, "Scratch directory for trained models");
  app.add_option("--only", only, "Criteria to run (1-9)")->check(CLI::Range(1, 9));
  app.add_flag("--reuse", reuse, "Keep finished desk runs from an earlier invocation");
  app.add_flag("-v,--verbose", verbose, "Print training progress");
  CLI11_PARSE(app, argc, argv);

  const std::set<int> selected = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9}
                                              : std::set<int>(only.begin(), only.end());
  if (!reuse) fs::remove_all(work);
  fs::create_directories(work);

  std::optional<DeskModels> desk;
  auto models = [&]() -> const DeskModels& {
    if (!desk) desk = train_desk(work, verbose);
    return *desk;
  };

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradients match finite differences", gradients},
      {"sinkhorn matches exact transport", sinkhorn},
      {"attack iterates stay in the ball and range", invariants},
      {"desk training separates the defenses", [&] { return desk_training(models()); }},
      {"attacks strengthen with steps and budget", [&] { return attack_strength(models()); }},
      {"transfer attacks are weaker than white-box", [&] { return transfer(models()); }},
      {"HAT with CE only reproduces PGD-AT", [&] { return pgd_at_equivalence(work); }},
      {"perturbation SNR", [&] { return snr(models()); }},
      {"deterministic reruns are byte-identical", [&] { return determinism(work); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.count(id)) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " [" << id << "] " << criteria[i].first << ": " << v.detail << " ("
              << fmt(seconds_since(t0), 1) << " s)" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
