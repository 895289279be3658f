#include "magnaforge/trajectory.hpp"

#include "magnaforge/errors.hpp"

#include <json.hpp>

#include <fstream>

namespace magnaforge {
namespace {

using json = nlohmann::json;

json action_json(const Action& a) {
  json moves = json::array();
  for (Eigen::Index b = 0; b < a.block_moves.rows(); ++b) {
    std::vector<double> row(6);
    for (int k = 0; k < 6; ++k) row[k] = a.block_moves(b, k);
    moves.push_back(row);
  }
  return {{"gripper_choice", a.gripper_choice}, {"block_moves", moves}};
}

Action parse_action(const json& j) {
  Action a;
  a.gripper_choice = j.at("gripper_choice").get<std::vector<int>>();
  const auto& moves = j.at("block_moves");
  a.block_moves.resize(static_cast<Eigen::Index>(moves.size()), 6);
  for (std::size_t b = 0; b < moves.size(); ++b) {
    auto row = moves[b].get<std::vector<double>>();
    if (row.size() != 6) throw ParseError("trajectory: block move rows need 6 entries");
    for (int k = 0; k < 6; ++k) a.block_moves(static_cast<Eigen::Index>(b), k) = row[k];
  }
  return a;
}

struct Episode {
  std::shared_ptr<const BlockSet> bs;
  EnvConfig env;
  Blueprint goal;
  std::optional<Blueprint> prebuilt;
  std::uint64_t seed = 0;
  std::vector<json> steps;
};

Episode parse_log(const TrajectoryLog& log) {
  if (log.lines.empty()) throw ParseError("trajectory: empty log");
  Episode ep;
  try {
    json head = json::parse(log.lines.front());
    if (head.at("type") != "header") throw ParseError("trajectory: first record must be the header");
    if (head.at("format_version").get<int>() != kFormatVersion) throw ParseError("trajectory: unsupported version");
    ep.bs = std::make_shared<const BlockSet>(parse_blockset(head.at("blockset").dump()));
    KeyValues kv;
    for (const auto& [k, v] : head.at("env").items()) kv.set(k, v.get<std::string>());
    ep.env = EnvConfig::from_kv(kv);
    ep.goal = parse_blueprint(head.at("goal").dump(), *ep.bs);
    if (!head.at("prebuilt").is_null()) ep.prebuilt = parse_blueprint(head.at("prebuilt").dump(), *ep.bs);
    ep.seed = head.at("seed").get<std::uint64_t>();
    for (std::size_t i = 1; i < log.lines.size(); ++i) {
      if (log.lines[i].empty()) continue;
      json rec = json::parse(log.lines[i]);
      if (rec.at("type") != "step") throw ParseError("trajectory: unexpected record type");
      ep.steps.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("trajectory: ") + e.what());
  }
  return ep;
}

StepResult start(AssemblyEnv& env, const Episode& ep) {
  Rng rng(ep.seed);
  return env.reset(ep.goal, ep.prebuilt ? ResetMode::from_blueprint(*ep.prebuilt) : ResetMode::scattered(), rng);
}

}  // namespace

void TrajectoryLog::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& line : lines) out << line << '\n';
}

TrajectoryLog TrajectoryLog::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open trajectory " + path.string());
  TrajectoryLog log;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) log.lines.push_back(line);
  return log;
}

TrajectoryLog record_trajectory(std::shared_ptr<const BlockSet> bs, const EnvConfig& env, const Blueprint& goal,
                                const EnvPolicy& policy, const RecordOptions& options) {
  TrajectoryLog log;
  json env_kv = json::object();
  const KeyValues kv = env.to_kv();
  for (const auto& [k, v] : kv.entries()) env_kv[k] = v;
  json head = {{"type", "header"},
               {"format_version", kFormatVersion},
               {"blockset", json::parse(blockset_to_json(*bs))},
               {"env", env_kv},
               {"goal", json::parse(blueprint_to_json(goal))},
               {"prebuilt", options.prebuilt ? json::parse(blueprint_to_json(*options.prebuilt)) : json(nullptr)},
               {"seed", options.seed}};
  log.lines.push_back(head.dump());

  AssemblyEnv sim(bs, env);
  Rng rng(options.seed);
  StepResult r = sim.reset(goal, options.prebuilt ? ResetMode::from_blueprint(*options.prebuilt) : ResetMode::scattered(), rng);
  for (int t = 0; !sim.done() && (options.max_steps <= 0 || t < options.max_steps); ++t) {
    Action a = policy(sim, r.obs);
    r = sim.step(a);
    json rec = {{"type", "step"},
                {"step", t},
                {"action", action_json(a)},
                {"reward", r.reward},
                {"reward_terms", r.info.reward_terms},
                {"success", r.info.success},
                {"done", r.done}};
    log.lines.push_back(rec.dump());
  }
  return log;
}

std::string ReplayReport::to_json() const {
  json j = {{"identical", identical}, {"steps", steps}, {"detail", detail}};
  j["first_divergent_step"] = first_divergent_step ? json(*first_divergent_step) : json(nullptr);
  return j.dump(2);
}

ReplayReport replay_trajectory(const TrajectoryLog& log) {
  const Episode ep = parse_log(log);
  AssemblyEnv sim(ep.bs, ep.env);
  start(sim, ep);
  ReplayReport rep;
  for (std::size_t t = 0; t < ep.steps.size(); ++t) {
    const json& rec = ep.steps[t];
    double logged = 0.0;
    Action a;
    try {
      logged = rec.at("reward").get<double>();
      a = parse_action(rec.at("action"));
    } catch (const json::exception& e) {
      throw ParseError(std::string("trajectory step: ") + e.what());
    }
    double reward = 0.0;
    try {
      if (sim.done()) throw std::logic_error("episode already ended");
      reward = sim.step(a).reward;
    } catch (const std::exception& e) {
      rep.identical = false;
      rep.first_divergent_step = static_cast<int>(t);
      rep.detail = std::string("action rejected: ") + e.what();
      return rep;
    }
    ++rep.steps;
    if (reward != logged) {
      rep.identical = false;
      rep.first_divergent_step = static_cast<int>(t);
      rep.detail = "reward " + format_double(reward) + " differs from logged " + format_double(logged);
      return rep;
    }
  }
  return rep;
}

std::vector<GraphObs> trajectory_observations(const TrajectoryLog& log) {
  const Episode ep = parse_log(log);
  AssemblyEnv sim(ep.bs, ep.env);
  std::vector<GraphObs> out{start(sim, ep).obs};
  for (std::size_t t = 0; t + 1 < ep.steps.size(); ++t) {
    try {
      out.push_back(sim.step(parse_action(ep.steps[t].at("action"))).obs);
    } catch (const json::exception& e) {
      throw ParseError(std::string("trajectory step: ") + e.what());
    }
  }
  return out;
}

}  // namespace magnaforge
