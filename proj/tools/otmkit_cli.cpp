// otmkit command-line front end: load chains/graphs/costs from files, run a
// distance or gradient, emit a structured JSON report.
//
// Exit codes: 0 success, 1 input/precondition error, 2 non-convergence
// (partial results still reported).

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "otmkit/otmkit.hpp"

namespace {

using json = nlohmann::ordered_json;
using namespace otmkit;

struct CommonArgs {
  std::string x_path, y_path;
  std::string cost = "labels:euclidean";
  std::string mode = "dwl-inf";
  int depth = -1;
  double delta = 0.5;
  double epsilon = 0.0;
  double tol = 0.0;
  int max_iter = 100000;
  int schedule = 0;
  bool sparse = false;
  std::string init = "deltaC";
  std::string p_file;
  std::uint64_t seed = 0;
  int threads = 0;
  std::string out;
  std::string format = "json";
  bool check_fd = false;
  std::string upstream_file;
  std::string graph_initial = "uniform";
  long mc_paths = 20000;
};

struct LoadedInput {
  MarkovChain chain;
  std::string digest;
};

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

LoadedInput load_input(const std::string& path, const std::string& graph_initial) {
  LoadedInput input;
  input.digest = io::digest(io::read_file(path));
  if (ends_with(path, ".tsv")) {
    std::string labels_path = path + ".labels.json";
    std::ifstream probe(labels_path);
    LabeledGraph g = io::read_graph_tsv(path, probe.good() ? labels_path : "");
    InitialPolicy policy = graph_initial == "stationary"
                               ? InitialPolicy::stationary()
                               : InitialPolicy::uniform();
    input.chain = graph_to_chain(g, DanglingPolicy::self_loop, 0.0, policy);
  } else {
    input.chain = io::read_chain_json(path);
  }
  return input;
}

Matrix build_cost(const MarkovChain& x, const MarkovChain& y,
                  const std::string& spec) {
  if (spec.rfind("file:", 0) == 0) {
    Matrix c = io::read_cost_csv(spec.substr(5));
    if (c.rows() != x.size() || c.cols() != y.size())
      throw InputError("cost file shape does not match the chains");
    if (!c.allFinite() || c.minCoeff() < 0.0)
      throw InputError("cost file must be finite and nonnegative");
    return c;
  }
  if (spec.rfind("labels:", 0) != 0)
    throw InputError("cost must be labels:<metric> or file:PATH");
  std::string metric = spec.substr(7);
  CostSpec cs;
  if (metric == "euclidean") cs.metric = CostMetric::euclidean;
  else if (metric == "manhattan") cs.metric = CostMetric::manhattan;
  else if (metric == "hamming") cs.metric = CostMetric::hamming;
  else if (metric == "discrete") cs.metric = CostMetric::discrete;
  else throw InputError("unknown cost metric: " + metric);
  return cost_matrix(x, y, cs);
}

otm::DiscountParams build_params(const CommonArgs& args, bool infinite) {
  otm::DiscountParams p;
  p.delta = args.delta;
  p.epsilon = args.epsilon;
  p.depth = infinite ? otm::kInfiniteDepth : args.depth;
  p.tol = args.tol;
  p.max_iter = args.max_iter;
  p.schedule = args.schedule;
  if (args.init == "deltaC") p.init = otm::InitKind::delta_C;
  else if (args.init == "C") p.init = otm::InitKind::C;
  else if (args.init == "zero") p.init = otm::InitKind::zero;
  else throw InputError("unknown init: " + args.init);
  return p;
}

std::vector<double> otc_schedule(double min_delta) {
  if (min_delta < 1e-4) min_delta = 1e-4;
  std::vector<double> schedule;
  for (double d = 0.5; d > min_delta; d /= 2.0) schedule.push_back(d);
  if (schedule.empty() || schedule.back() > min_delta)
    schedule.push_back(min_delta);
  return schedule;
}

json params_json(const CommonArgs& args) {
  json p;
  p["mode"] = args.mode;
  p["depth"] = args.depth;
  p["delta"] = args.delta;
  p["epsilon"] = args.epsilon;
  p["tol"] = args.tol;
  p["max_iter"] = args.max_iter;
  p["schedule"] = args.schedule;
  p["sparse"] = args.sparse;
  p["init"] = args.init;
  p["cost"] = args.cost;
  p["seed"] = args.seed;
  p["threads"] = args.threads;
  return p;
}

json base_report(const char* command, const CommonArgs& args,
                 const LoadedInput& x, const LoadedInput& y) {
  json report;
  report["schema_version"] = 1;
  report["tool"] = "otmkit";
  report["version"] = kVersion;
  report["command"] = command;
  report["inputs"] = {{"x", {{"path", args.x_path}, {"digest", x.digest}}},
                      {"y", {{"path", args.y_path}, {"digest", y.digest}}}};
  report["params"] = params_json(args);
  return report;
}

int emit(json report, const CommonArgs& args, double wall_seconds,
         int exit_code) {
  report["wall_time_s"] = wall_seconds;
  std::string text;
  if (args.format == "tsv") {
    std::ostringstream ss;
    if (report.contains("result") && report["result"].contains("value")) {
      ss << "value\t" << report["result"]["value"].dump() << "\n";
    } else if (report.contains("result")) {
      for (auto& [key, val] : report["result"].items())
        if (val.is_number()) ss << key << "\t" << val.dump() << "\n";
    }
    text = ss.str();
  } else {
    text = report.dump(2) + "\n";
  }
  if (!args.out.empty()) {
    std::ofstream out(args.out);
    if (!out) throw InputError("cannot write " + args.out);
    out << text;
  } else {
    std::cout << text;
  }
  return exit_code;
}

json fixed_point_json(const otm::FixedPointResult& r) {
  json out;
  out["value"] = r.value;
  out["iterations"] = r.iterations;
  out["residual"] = r.residual;
  out["converged"] = r.converged;
  out["cell_work"] = r.cell_work;
  return out;
}

int run_distance(const CommonArgs& args) {
  auto start = std::chrono::steady_clock::now();
  LoadedInput x = load_input(args.x_path, args.graph_initial);
  LoadedInput y = load_input(args.y_path, args.graph_initial);
  Matrix cost = build_cost(x.chain, y.chain, args.cost);

  json report = base_report("distance", args, x, y);
  bool converged = true;

  if (args.mode == "wl" || args.mode == "dwl") {
    if (args.depth < 0) throw InputError("--depth is required for finite modes");
    otm::DiscountParams p = build_params(args, false);
    if (args.mode == "wl") p.delta = 0.0;
    otm::FixedPointResult r =
        args.sparse ? otm::dwl_depth_k_sparse(x.chain, y.chain, cost, p,
                                              args.threads)
                    : otm::dwl_depth_k(x.chain, y.chain, cost, p, args.threads);
    converged = r.converged;
    report["result"] = fixed_point_json(r);
  } else if (args.mode == "dwl-inf") {
    if (args.sparse)
      throw InputError("--sparse applies to finite depths (wl/dwl) only");
    auto r = otm::dwl_infinity(x.chain, y.chain, cost,
                               build_params(args, true), args.threads);
    converged = r.converged;
    report["result"] = fixed_point_json(r);
  } else if (args.mode == "otm-p") {
    if (args.p_file.empty()) throw InputError("--p FILE is required for otm-p");
    otm::HorizonDistribution p{io::read_probability_array(args.p_file)};
    auto r = otm::otm_general_p(x.chain, y.chain, cost, p, args.epsilon,
                                args.threads);
    converged = r.converged;
    report["result"] = fixed_point_json(r);
  } else if (args.mode == "otc") {
    auto schedule = otc_schedule(args.delta);
    auto est = otm::otc_estimate(x.chain, y.chain, cost, schedule, args.epsilon,
                                 args.threads);
    converged = est.all_converged;
    json entries = json::array();
    for (const auto& e : est.entries)
      entries.push_back({{"delta", e.delta},
                         {"value", e.value},
                         {"iterations", e.iterations},
                         {"residual", e.residual},
                         {"converged", e.converged}});
    report["result"] = {{"value", est.estimate},
                        {"entries", entries},
                        {"trend_nondecreasing", est.trend_nondecreasing},
                        {"converged", est.all_converged}};
  } else if (args.mode == "wl-inf") {
    double tol = args.tol > 0.0
                     ? args.tol
                     : 1e-6 * std::max(1e-300, cost.cwiseAbs().maxCoeff());
    auto r = otm::wl_infinity(x.chain, y.chain, cost, tol, args.max_iter,
                              args.threads);
    converged = r.converged;
    report["result"] = {{"value", r.value},
                        {"gap", r.gap},
                        {"iterations", r.iterations},
                        {"converged", r.converged}};
  } else {
    throw InputError("unknown mode: " + args.mode);
  }

  double wall = std::chrono::duration<double>(
                    std::chrono::steady_clock::now() - start)
                    .count();
  return emit(std::move(report), args, wall, converged ? 0 : 2);
}

json matrix_json(const Matrix& m) { return io::matrix_to_json(m); }

int run_gradient(const CommonArgs& args) {
  auto start = std::chrono::steady_clock::now();
  if (!(args.delta > 0.0)) throw InputError("gradient requires --delta > 0");
  if (!(args.epsilon > 0.0)) throw InputError("gradient requires --epsilon > 0");
  LoadedInput x = load_input(args.x_path, args.graph_initial);
  LoadedInput y = load_input(args.y_path, args.graph_initial);
  Matrix cost = build_cost(x.chain, y.chain, args.cost);
  otm::DiscountParams p = build_params(args, true);

  json report = base_report("gradient", args, x, y);
  bool converged = true;

  if (!args.upstream_file.empty()) {
    // custom upstream: pullbacks through the fixed point only
    Matrix upstream = io::matrix_from_json(
        io::json::parse(io::read_file(args.upstream_file)), "upstream");
    auto fp = otm::dwl_infinity(x.chain, y.chain, cost, p, args.threads);
    converged = fp.converged;
    auto kg = grad::backward(fp, upstream);
    report["result"] = {{"value", fp.value},
                        {"converged", fp.converged},
                        {"d_C", matrix_json(kg.d_C)},
                        {"d_mX", matrix_json(kg.d_mX)},
                        {"d_mY", matrix_json(kg.d_mY)}};
  } else {
    auto fp = otm::dwl_infinity(x.chain, y.chain, cost, p, args.threads);
    converged = fp.converged;
    auto bundle = grad::full_gradient(x.chain, y.chain, cost, p, args.threads,
                                      &fp);
    report["result"] = {{"value", fp.value},
                        {"iterations", fp.iterations},
                        {"residual", fp.residual},
                        {"converged", fp.converged},
                        {"d_C", matrix_json(bundle.d_C)},
                        {"d_mX", matrix_json(bundle.d_mX)},
                        {"d_mY", matrix_json(bundle.d_mY)},
                        {"d_nuX", io::vector_to_json(bundle.d_nuX)},
                        {"d_nuY", io::vector_to_json(bundle.d_nuY)}};
    if (args.check_fd) {
      auto fd = grad::finite_difference_check(x.chain, y.chain, cost, p, 8,
                                              {1e-4, 1e-5, 1e-6}, args.seed,
                                              args.threads);
      json errs;
      for (const auto& [key, val] : fd.max_rel_err) errs[key] = val;
      report["result"]["fd_check"] = {{"max_rel_err", errs},
                                      {"worst", fd.worst()},
                                      {"n_directions", fd.n_directions},
                                      {"seed", fd.seed}};
    }
  }

  double wall = std::chrono::duration<double>(
                    std::chrono::steady_clock::now() - start)
                    .count();
  return emit(std::move(report), args, wall, converged ? 0 : 2);
}

int run_compare(const CommonArgs& args) {
  auto start = std::chrono::steady_clock::now();
  LoadedInput x = load_input(args.x_path, args.graph_initial);
  LoadedInput y = load_input(args.y_path, args.graph_initial);
  Matrix cost = build_cost(x.chain, y.chain, args.cost);
  int depth = args.depth >= 0 ? args.depth : 3;

  json report = base_report("compare", args, x, y);
  bool converged = true;

  json table = json::array();
  std::vector<double> wl_values(depth + 1);
  {
    // one recursion yields every depth <= depth
    Matrix cur = cost;
    wl_values[0] =
        ot::solve_ot(x.chain.initial, y.chain.initial, cur, args.epsilon).value;
    for (int t = 1; t <= depth; ++t) {
      cur = otm::apply_discounted_sweep(x.chain, y.chain, cost, cur, 0.0,
                                        args.epsilon, args.threads);
      wl_values[t] =
          ot::solve_ot(x.chain.initial, y.chain.initial, cur, args.epsilon)
              .value;
    }
  }
  for (int t = 0; t <= depth; ++t)
    table.push_back({{"name", "wl_depth_" + std::to_string(t)},
                     {"value", wl_values[t]}});

  otm::DiscountParams p = build_params(args, false);
  auto dwl = otm::dwl_depth_k(x.chain, y.chain, cost, p, args.threads);
  table.push_back({{"name", "dwl_depth_" + std::to_string(depth)},
                   {"value", dwl.value}});
  auto dinf = otm::dwl_infinity(x.chain, y.chain, cost, build_params(args, true),
                                args.threads);
  converged = converged && dinf.converged;
  table.push_back({{"name", "dwl_infinity"}, {"value", dinf.value}});

  otm::HorizonDistribution horizon =
      args.p_file.empty()
          ? otm::truncated_geometric(args.delta, depth)
          : otm::HorizonDistribution{io::read_probability_array(args.p_file)};
  auto otm_p = otm::otm_general_p(x.chain, y.chain, cost, horizon, args.epsilon,
                                  args.threads);
  table.push_back({{"name", "otm_general_p"}, {"value", otm_p.value}});

  double mix = 0.0;
  for (std::size_t t = 0; t < horizon.probs.size() && t < wl_values.size(); ++t)
    mix += horizon.probs[t] * wl_values[t];
  json bounds;
  bounds["wl_mixture"] = mix;
  bounds["lower_bound_holds"] = otm_p.value >= mix - 1e-9;

  bool stationary = otm::stationarity_residual(x.chain) <= 1e-8 &&
                    otm::stationarity_residual(y.chain) <= 1e-8;
  if (stationary) {
    auto est = otm::otc_estimate(x.chain, y.chain, cost,
                                 otc_schedule(std::max(args.delta / 8.0, 1e-2)),
                                 args.epsilon, args.threads);
    converged = converged && est.all_converged;
    table.push_back({{"name", "otc_estimate"}, {"value", est.estimate}});
    bounds["upper_trend_holds"] = otm_p.value <= est.estimate + 1e-7;
    bounds["otc_trend_nondecreasing"] = est.trend_nondecreasing;
  } else {
    bounds["otc_skipped"] = "chains are not stationary-initialized";
  }

  report["result"] = {{"table", table}, {"bounds", bounds}};
  report["result"]["converged"] = converged;
  double wall = std::chrono::duration<double>(
                    std::chrono::steady_clock::now() - start)
                    .count();
  return emit(std::move(report), args, wall, converged ? 0 : 2);
}

int run_diagnose(const CommonArgs& args) {
  auto start = std::chrono::steady_clock::now();
  LoadedInput x = load_input(args.x_path, args.graph_initial);
  LoadedInput y = load_input(args.y_path, args.graph_initial);
  Matrix cost = build_cost(x.chain, y.chain, args.cost);

  json report = base_report("diagnose", args, x, y);
  auto structure_json = [](const StructureReport& s) {
    return json{{"irreducible", s.irreducible},
                {"aperiodic", s.aperiodic},
                {"max_out_degree", s.max_out_degree},
                {"support_sizes", s.support_sizes},
                {"dangling_states", s.dangling_states}};
  };
  StructureReport sx = structure_check(x.chain);
  StructureReport sy = structure_check(y.chain);
  report["result"]["structure_x"] = structure_json(sx);
  report["result"]["structure_y"] = structure_json(sy);
  report["result"]["wl_infinity_eligible"] =
      sx.irreducible && sx.aperiodic && sy.irreducible && sy.aperiodic;

  bool converged = true;
  if (args.delta > 0.0) {
    otm::DiscountParams p = build_params(args, true);
    std::vector<Matrix> iterates;
    std::vector<double> mins, maxs, residuals;
    bool keep_iterates = x.chain.size() * y.chain.size() <= 4096;
    otm::SweepObserver observer = [&](const otm::SweepRecord& rec,
                                      const Matrix& next) {
      mins.push_back(rec.min_entry);
      maxs.push_back(rec.max_entry);
      residuals.push_back(rec.residual);
      if (keep_iterates) iterates.push_back(next);
    };
    auto fp = otm::dwl_infinity(x.chain, y.chain, cost, p, args.threads,
                                &observer);
    converged = fp.converged;
    report["result"]["fixed_point"] = fixed_point_json(fp);
    report["result"]["envelope"] = {{"min", mins}, {"max", maxs}};
    report["result"]["residual_trace"] = residuals;

    if (keep_iterates) {
      // rate-bound replay against the final iterate (within tol of the
      // fixed point), with the tol slack added on the right side
      double norm_c = cost.cwiseAbs().maxCoeff();
      double tol = p.tol > 0.0 ? p.tol : 1e-8 * std::max(norm_c, 1e-300);
      bool ok = true;
      json trace = json::array();
      for (std::size_t k = 0; k < iterates.size(); ++k) {
        double dist = (iterates[k] - fp.cost_final).cwiseAbs().maxCoeff();
        double bound = 2.0 * std::pow(1.0 - args.delta, static_cast<double>(k + 1)) /
                           args.delta * norm_c +
                       tol;
        trace.push_back({{"k", k + 1}, {"distance", dist}, {"bound", bound}});
        ok = ok && dist <= bound;
      }
      report["result"]["rate_bound"] = {{"holds", ok}, {"trace", trace}};
    }

    if (fp.converged && args.epsilon == 0.0) {
      auto policy = otm::extract_optimal_coupling(fp, x.chain, y.chain);
      int horizon = reference::horizon_for_tail(
          args.delta, cost.cwiseAbs().maxCoeff(), 1e-4);
      auto mc = reference::simulate_discounted_cost(policy, cost, args.delta,
                                                    horizon, args.mc_paths,
                                                    args.seed, args.threads);
      bool within = std::abs(mc.mean - fp.value) <=
                    3.0 * mc.std_error + 1e-6 * std::max(1.0, fp.value);
      report["result"]["mc_check"] = {{"mean", mc.mean},
                                      {"std_error", mc.std_error},
                                      {"n_paths", mc.n_paths},
                                      {"seed", mc.seed},
                                      {"horizon", horizon},
                                      {"within_3se", within}};
    }
  }

  double wall = std::chrono::duration<double>(
                    std::chrono::steady_clock::now() - start)
                    .count();
  return emit(std::move(report), args, wall, converged ? 0 : 2);
}

void add_common_flags(CLI::App* cmd, CommonArgs& args, bool with_mode) {
  cmd->add_option("x", args.x_path, "chain JSON or graph TSV")->required();
  cmd->add_option("y", args.y_path, "chain JSON or graph TSV")->required();
  if (with_mode)
    cmd->add_option("--mode", args.mode,
                    "wl|dwl|dwl-inf|otm-p|otc|wl-inf (default dwl-inf)");
  cmd->add_option("--depth", args.depth, "finite depth k");
  cmd->add_option("--delta", args.delta, "discount parameter");
  cmd->add_option("--epsilon", args.epsilon, "entropic regularization (0 = exact)");
  cmd->add_option("--tol", args.tol, "fixed-point residual tolerance");
  cmd->add_option("--max-iter", args.max_iter, "sweep cap");
  cmd->add_option("--schedule", args.schedule,
                  "Sinkhorn iteration-cap growth step (0 = off)");
  cmd->add_flag("--sparse", args.sparse, "restrict cell solves to kernel supports");
  cmd->add_option("--init", args.init, "deltaC|C|zero");
  cmd->add_option("--cost", args.cost,
                  "labels:euclidean|labels:manhattan|labels:hamming|"
                  "labels:discrete|file:PATH");
  cmd->add_option("--p", args.p_file, "JSON array of horizon probabilities");
  cmd->add_option("--seed", args.seed, "RNG seed echoed in the report");
  cmd->add_option("--threads", args.threads, "cell-solve pool cap (0 = hardware)");
  cmd->add_option("--out", args.out, "write the report here instead of stdout");
  cmd->add_option("--format", args.format, "json|tsv");
  cmd->add_flag("--check-fd", args.check_fd, "finite-difference gradient check");
  cmd->add_option("--upstream", args.upstream_file,
                  "JSON matrix d(loss)/d(fixed point) for custom pullbacks");
  cmd->add_option("--graph-initial", args.graph_initial,
                  "uniform|stationary initial for TSV graph inputs");
  cmd->add_option("--paths", args.mc_paths, "Monte-Carlo paths for diagnose");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Optimal Transport Markov distances between finite Markov chains"};
  app.require_subcommand(1);

  CommonArgs args;
  CLI::App* distance = app.add_subcommand("distance", "compute one distance");
  add_common_flags(distance, args, true);
  CLI::App* gradient =
      app.add_subcommand("gradient", "distance gradient w.r.t. all inputs");
  add_common_flags(gradient, args, false);
  CLI::App* compare =
      app.add_subcommand("compare", "distance family table with bound flags");
  add_common_flags(compare, args, false);
  CLI::App* diagnose =
      app.add_subcommand("diagnose", "structure, envelopes, rate bound, MC check");
  add_common_flags(diagnose, args, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (distance->parsed()) return run_distance(args);
    if (gradient->parsed()) return run_gradient(args);
    if (compare->parsed()) return run_compare(args);
    if (diagnose->parsed()) return run_diagnose(args);
  } catch (const OtmError& e) {
    nlohmann::ordered_json err{
        {"error", {{"code", e.code()}, {"message", e.what()}}}};
    std::cout << err.dump(2) << "\n";
    return 1;
  } catch (const std::exception& e) {
    nlohmann::ordered_json err{
        {"error", {{"code", "InternalError"}, {"message", e.what()}}}};
    std::cout << err.dump(2) << "\n";
    return 1;
  }
  return 1;
}
