#include "magnaforge/blockset.hpp"
#include "magnaforge/errors.hpp"
#include "magnaforge/nets.hpp"
#include "magnaforge/simenv.hpp"
#include "magnaforge/trainer.hpp"
#include "magnaforge/trajectory.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace mf = magnaforge;
using json = nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitUsage = 64;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// SHA-1 of "blob <size>\0<content>", as git computes object ids.
std::string git_blob_sha1(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, content.data(), content.size());
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return hex.str();
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw mf::ParseError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text << '\n';
    return;
  }
  std::ofstream out(path);
  if (!out) throw mf::Error("cannot write " + path);
  out << text << '\n';
}

/// Run config from --config (if any), else the config.cfg stored next to a checkpoint, else defaults.
mf::TrainConfig run_config(const std::string& config_path, const std::string& checkpoint_path) {
  if (!config_path.empty()) return mf::TrainConfig::from_kv(mf::KeyValues::load(config_path));
  if (!checkpoint_path.empty()) {
    auto sibling = std::filesystem::path(checkpoint_path).parent_path() / "config.cfg";
    if (std::filesystem::exists(sibling)) return mf::TrainConfig::from_kv(mf::KeyValues::load(sibling));
  }
  return {};
}

mf::PolicyFactory checkpoint_policy(const std::string& path, const mf::TrainContext& ctx, const mf::EnvConfig& env) {
  mf::Checkpoint ck = mf::load_checkpoint(path);
  if (ck.agent.config.n_blocks != ctx.blockset->size() || ck.agent.config.n_grippers != env.n_grippers)
    throw mf::ShapeError("checkpoint was trained for " + std::to_string(ck.agent.config.n_blocks) + " blocks and " +
                         std::to_string(ck.agent.config.n_grippers) + " grippers");
  auto params = std::make_shared<const mf::AgentParams<float>>(std::move(ck.agent));
  return [params](std::uint64_t seed) { return mf::agent_policy(params, true, seed); };
}

std::string bar_plot_svg(const mf::EvalReport& rep) {
  const int w = 480, h = 260, base = 220, bar = 70, gap = 40;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<line x1=\"30\" y1=\"" << base << "\" x2=\"" << w - 10 << "\" y2=\"" << base << "\" stroke=\"black\"/>\n";
  int x = 40;
  for (const auto& [name, rate] : rep.buckets) {
    const double v = rate.value_or(0.0);
    const int bh = static_cast<int>(v * 180.0);
    svg << "<rect x=\"" << x << "\" y=\"" << base - bh << "\" width=\"" << bar << "\" height=\"" << bh
        << "\" fill=\"" << (rate ? "steelblue" : "lightgray") << "\"/>\n";
    svg << "<text x=\"" << x + bar / 2 << "\" y=\"" << base + 18 << "\" font-size=\"12\" text-anchor=\"middle\">" << name << "</text>\n";
    svg << "<text x=\"" << x + bar / 2 << "\" y=\"" << base - bh - 6 << "\" font-size=\"12\" text-anchor=\"middle\">"
        << (rate ? std::to_string(static_cast<int>(std::lround(v * 100))) + "%" : std::string("n/a")) << "</text>\n";
    x += bar + gap;
  }
  svg << "</svg>";
  return svg.str();
}

std::string iso_now() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::ostringstream ss;
  ss << std::put_time(std::gmtime(&t), "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

// Commands ------------------------------------------------------------------------------------

struct GenArgs {
  std::uint64_t seed = 0;
  int count = 1000;
  int min_blocks = 2;
  int max_blocks = 16;
  std::string blockset;
  std::string out = "blueprints.json";
};

int cmd_gen_blueprints(const GenArgs& a) {
  if (a.min_blocks > a.max_blocks) throw UsageError("--min-blocks must not exceed --max-blocks");
  if (a.min_blocks < 1 || a.count < 1) throw UsageError("--count and --min-blocks must be positive");
  const mf::BlockSet bs = a.blockset.empty() ? mf::default_blockset() : mf::load_blockset(a.blockset);
  mf::BlueprintLibrary lib;
  try {
    lib = mf::generate_blueprints(bs, a.seed, a.count, a.min_blocks, a.max_blocks);
  } catch (const mf::GenerationExhausted& e) {
    std::cerr << "generation exhausted: " << e.what() << '\n';
    return kExitConfig;
  }
  mf::save_library(lib, a.out);
  json report = {{"train", lib.train.size()}, {"test", lib.test.size()}, {"violations", json::array()}};
  bool valid = true;
  for (const auto* split : {&lib.train, &lib.test})
    for (const auto& bp : *split)
      for (const auto& v : mf::validate_blueprint(bp, bs)) {
        valid = false;
        report["violations"].push_back({{"blueprint", bp.id}, {"kind", mf::to_string(v.kind)}, {"detail", v.detail}});
      }
  report["valid"] = valid;
  write_text(a.out + ".report.json", report.dump(2));
  std::cerr << "wrote " << lib.train.size() << " train and " << lib.test.size() << " test blueprints to " << a.out << '\n';
  return valid ? kExitOk : kExitFailure;
}

struct TrainArgs {
  std::string config;
  std::string resume;
  std::vector<std::string> modes;
  std::string run_dir;
};

int cmd_train(const TrainArgs& a) {
  mf::TrainConfig cfg = a.config.empty() ? mf::TrainConfig{} : mf::TrainConfig::from_kv(mf::KeyValues::load(a.config));
  for (const auto& m : a.modes) mf::apply_mode(cfg, m);
  if (!a.run_dir.empty()) cfg.run_dir = a.run_dir;
  const mf::TrainContext ctx = mf::load_context(cfg);
  std::filesystem::create_directories(cfg.run_dir);

  json manifest;
  manifest["run_id"] = std::filesystem::path(cfg.run_dir).filename().string() + "-" + std::to_string(cfg.seed);
  manifest["seed"] = std::to_string(cfg.seed);
  manifest["config_path"] = a.config;
  manifest["modes"] = a.modes;
  manifest["architecture"] = mf::to_string(cfg.net.architecture);
  manifest["blockset_sha1"] = git_blob_sha1(cfg.blockset_path.empty() ? mf::blockset_to_json(*ctx.blockset) : read_file(cfg.blockset_path));
  manifest["library_sha1"] = git_blob_sha1(cfg.library_path.empty() ? mf::library_to_json(ctx.library) : read_file(cfg.library_path));
  manifest["blueprints"] = json::array();
  for (const auto& bp : ctx.tasks) manifest["blueprints"].push_back(bp.id);
  manifest["resume"] = a.resume.empty() ? json(nullptr) : json(a.resume);
  manifest["started"] = iso_now();
  manifest["start_step"] = 0;
  if (!a.resume.empty()) manifest["start_step"] = mf::load_checkpoint(a.resume).env_steps;
  const auto manifest_path = std::filesystem::path(cfg.run_dir) / "manifest.json";
  write_text(manifest_path.string(), manifest.dump(2));

  std::optional<std::filesystem::path> resume;
  if (!a.resume.empty()) resume = a.resume;
  auto result = mf::train(cfg, ctx, resume, [](const mf::IterationMetrics& m) {
    std::cerr << "iter " << m.iteration << " steps " << m.env_steps << " return " << m.mean_episode_return << " success "
              << m.episode_success;
    if (m.eval) std::cerr << " eval " << m.eval->overall();
    std::cerr << '\n';
  });
  manifest["end_step"] = result.env_steps;
  manifest["finished"] = iso_now();
  manifest["stopped_early"] = result.stopped_early;
  if (result.last_eval) manifest["last_eval"] = result.last_eval->overall();
  write_text(manifest_path.string(), manifest.dump(2));
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  bool oracle = false;
  std::string config;
  std::string split = "all";
  int episodes = 40;
  std::uint64_t seed = 0;
  std::string out;
  std::string plot;
};

int cmd_eval(const EvalArgs& a) {
  if (a.checkpoint.empty() == !a.oracle) throw UsageError("give exactly one of --checkpoint or --oracle");
  if (a.episodes <= 0) throw UsageError("--episodes must be positive");
  const mf::TrainConfig cfg = run_config(a.config, a.checkpoint);
  const mf::TrainContext ctx = mf::load_context(cfg);
  const mf::PolicyFactory policy = a.oracle ? mf::PolicyFactory(mf::teleport_oracle) : checkpoint_policy(a.checkpoint, ctx, cfg.env);
  const auto rep = mf::evaluate(policy, ctx.library, mf::parse_split(a.split), a.episodes, ctx.blockset, cfg.env, a.seed,
                                mf::resolve_workers(cfg.ppo.n_workers));
  write_text(a.out, rep.to_json());
  if (!a.plot.empty()) write_text(a.plot, bar_plot_svg(rep));
  return kExitOk;
}

struct ResetFreeArgs {
  std::string checkpoint;
  bool oracle = false;
  std::string config;
  int episodes = 50;
  int targets = 10;
  int min_blocks = 12;
  int cap = 100;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_reset_free(const ResetFreeArgs& a) {
  if (a.checkpoint.empty() == !a.oracle) throw UsageError("give exactly one of --checkpoint or --oracle");
  if (a.episodes <= 0 || a.targets <= 0 || a.cap <= 0) throw UsageError("counts must be positive");
  const mf::TrainConfig cfg = run_config(a.config, a.checkpoint);
  const mf::TrainContext ctx = mf::load_context(cfg);
  const mf::PolicyFactory policy = a.oracle ? mf::PolicyFactory(mf::teleport_oracle) : checkpoint_policy(a.checkpoint, ctx, cfg.env);
  const auto rep = mf::reset_free_eval(policy, ctx.library, a.episodes, a.targets, a.min_blocks, a.cap, ctx.blockset, cfg.env, a.seed);
  write_text(a.out, rep.to_json());
  return kExitOk;
}

struct RolloutArgs {
  std::string checkpoint;
  std::string config;
  std::string blueprint;
  std::string prebuilt;
  std::uint64_t seed = 0;
  int steps = 0;
  std::string out = "trajectory.jsonl";
};

int cmd_rollout(const RolloutArgs& a) {
  const mf::TrainConfig cfg = run_config(a.config, a.checkpoint);
  const mf::TrainContext ctx = mf::load_context(cfg);
  const mf::Blueprint* goal = a.blueprint.empty() ? &ctx.tasks.front() : ctx.library.find(a.blueprint);
  if (!goal) throw mf::ConfigError("blueprint '" + a.blueprint + "' is not in the library");
  const mf::Blueprint* prebuilt = nullptr;
  if (!a.prebuilt.empty() && !(prebuilt = ctx.library.find(a.prebuilt))) throw mf::ConfigError("blueprint '" + a.prebuilt + "' is not in the library");
  const mf::EnvPolicy policy = a.checkpoint.empty() ? mf::random_policy(a.seed + 1) : checkpoint_policy(a.checkpoint, ctx, cfg.env)(a.seed + 1);
  const auto log = mf::record_trajectory(ctx.blockset, cfg.env, *goal, policy, {a.seed, prebuilt, a.steps});
  log.save(a.out);
  return kExitOk;
}

int cmd_replay(const std::string& trajectory, const std::string& out) {
  const auto rep = mf::replay_trajectory(mf::TrajectoryLog::load(trajectory));
  write_text(out, rep.to_json());
  if (!rep.identical) {
    std::cerr << "replay diverged at step " << *rep.first_divergent_step << ": " << rep.detail << '\n';
    return kExitDivergence;
  }
  return kExitOk;
}

int cmd_attention(const std::string& checkpoint, const std::string& trajectory, const std::string& out) {
  const mf::Checkpoint ck = mf::load_checkpoint(checkpoint);
  const auto obs = mf::trajectory_observations(mf::TrajectoryLog::load(trajectory));
  if (!obs.empty() && (obs.front().n_blocks() != ck.agent.config.n_blocks || obs.front().n_grippers != ck.agent.config.n_grippers))
    throw mf::ShapeError("trajectory does not match the checkpoint's world size");
  std::ostringstream text;
  for (const auto& line : mf::attention_dump(ck.agent, obs)) text << line << '\n';
  std::string s = text.str();
  if (!s.empty()) s.pop_back();
  write_text(out, s);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Magnetic block assembly: environment, agents and training"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen-blueprints", "Generate a blueprint library");
  c_gen->add_option("--seed", gen.seed);
  c_gen->add_option("--count", gen.count);
  c_gen->add_option("--min-blocks", gen.min_blocks);
  c_gen->add_option("--max-blocks", gen.max_blocks);
  c_gen->add_option("--blockset", gen.blockset);
  c_gen->add_option("--out", gen.out);

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train an agent");
  c_train->add_option("--config", tr.config);
  c_train->add_option("--resume", tr.resume);
  c_train->add_option("--mode", tr.modes, "multi, single:<id>, no-attention, resnet, single-gripper, no-curriculum, delay:<k>");
  c_train->add_option("--run-dir", tr.run_dir);

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  c_eval->add_option("--checkpoint", ev.checkpoint);
  c_eval->add_flag("--oracle", ev.oracle, "Use the teleporting oracle instead of a checkpoint");
  c_eval->add_option("--config", ev.config);
  c_eval->add_option("--split", ev.split)->check(CLI::IsMember({"train", "test", "all"}));
  c_eval->add_option("--episodes", ev.episodes);
  c_eval->add_option("--seed", ev.seed);
  c_eval->add_option("--out", ev.out);
  c_eval->add_option("--plot", ev.plot, "Write an SVG bar plot of the buckets");

  ResetFreeArgs rf;
  auto* c_rf = app.add_subcommand("reset-free", "Reset-free evaluation");
  c_rf->add_option("--checkpoint", rf.checkpoint);
  c_rf->add_flag("--oracle", rf.oracle);
  c_rf->add_option("--config", rf.config);
  c_rf->add_option("--episodes", rf.episodes);
  c_rf->add_option("--targets", rf.targets);
  c_rf->add_option("--min-blocks", rf.min_blocks);
  c_rf->add_option("--cap", rf.cap);
  c_rf->add_option("--seed", rf.seed);
  c_rf->add_option("--out", rf.out);

  RolloutArgs ro;
  auto* c_ro = app.add_subcommand("rollout", "Record one episode as a trajectory log");
  c_ro->add_option("--checkpoint", ro.checkpoint, "Omit for a random policy");
  c_ro->add_option("--config", ro.config);
  c_ro->add_option("--blueprint", ro.blueprint);
  c_ro->add_option("--prebuilt", ro.prebuilt, "Start from this blueprint already built");
  c_ro->add_option("--seed", ro.seed);
  c_ro->add_option("--steps", ro.steps);
  c_ro->add_option("--out", ro.out);

  std::string traj, out;
  auto* c_replay = app.add_subcommand("replay", "Re-simulate a trajectory log and check rewards bit for bit");
  c_replay->add_option("--trajectory", traj)->required();
  c_replay->add_option("--out", out);

  std::string att_ckpt, att_traj, att_out;
  auto* c_att = app.add_subcommand("attention", "Dump attention matrices along a trajectory");
  c_att->add_option("--checkpoint", att_ckpt)->required();
  c_att->add_option("--trajectory", att_traj)->required();
  c_att->add_option("--out", att_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (c_gen->parsed()) return cmd_gen_blueprints(gen);
    if (c_train->parsed()) return cmd_train(tr);
    if (c_eval->parsed()) return cmd_eval(ev);
    if (c_rf->parsed()) return cmd_reset_free(rf);
    if (c_ro->parsed()) return cmd_rollout(ro);
    if (c_replay->parsed()) return cmd_replay(traj, out);
    if (c_att->parsed()) return cmd_attention(att_ckpt, att_traj, att_out);
  } catch (const UsageError& e) {
    std::cerr << "usage: " << e.what() << '\n';
    return kExitUsage;
  } catch (const mf::NonFiniteLoss& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return kExitFailure;
  } catch (const mf::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
