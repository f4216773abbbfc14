#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <string>

#include "doctest.h"

#include "agro/error.hpp"
#include "agro/experiment.hpp"
#include "support.hpp"

using namespace agro;
namespace ex = agro::experiment;

namespace {

const std::vector<std::string> kSmall{
    "data.n_train=400", "data.n_dev=100",       "data.n_test=100",     "data.n_ood=100",
    "erm.epochs=2",     "gdro.epochs=2",        "features.epochs=2",   "agro.t1_epochs=1",
    "agro.primary_epochs=2", "grouper.pretrain_epochs=2", "slices.max_iters=10"};

ex::ExperimentConfig small() { return ex::with_overrides(ex::default_config(), kSmall); }

std::string set_flags() {
  std::string s;
  for (const auto& a : kSmall) s += " --set " + a;
  return s;
}

struct Cli {
  int code;
  std::string err;
};

Cli run_cli(const std::string& args, const std::filesystem::path& dir) {
  const auto err = dir / "stderr.txt";
  const std::string cmd = std::string(AGRO_CLI_PATH) + " " + args + " > " + (dir / "stdout.txt").string() + " 2> " +
                          err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, testing::file_bytes(err)};
}

}  // namespace

TEST_CASE("config json round trip") {
  const auto c = ex::default_config();
  const auto j = ex::to_json(c);
  CHECK(ex::to_json(ex::from_json(j)) == j);
  CHECK(ex::to_json(ex::parse_config_text(j.dump())) == j);
  const auto r = c.resolved();
  CHECK(ex::to_json(r.resolved()) == ex::to_json(r));
  CHECK_NOTHROW(r.validate());
}

TEST_CASE("unknown or mistyped fields name themselves") {
  try {
    ex::parse_config_text(R"({"agro": {"alpah": 0.3}})");
    FAIL("accepted an unknown key");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("alpah") != std::string::npos);
  }
  try {
    ex::parse_config_text(R"({"agro": {"m": "six"}})");
    FAIL("accepted a string for m");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("m") != std::string::npos);
  }
  CHECK_THROWS_AS(ex::parse_config_text("{not json"), ConfigError);
  // missing keys keep defaults
  CHECK(ex::parse_config_text(R"({"seed": 4})").pipeline.agro.alpha == ex::default_config().pipeline.agro.alpha);
}

TEST_CASE("overrides") {
  const auto c = ex::with_overrides(ex::default_config(), {"agro.alpha=0.3", "run_id=abc", "net.hidden=[8,8]"});
  CHECK(c.pipeline.agro.alpha == 0.3);
  CHECK(c.run_id == "abc");
  CHECK(c.net.hidden == std::vector<std::size_t>{8, 8});
  CHECK_THROWS_AS(ex::with_overrides(ex::default_config(), {"agro.nope=1"}), ConfigError);
  CHECK_THROWS_AS(ex::with_overrides(ex::default_config(), {"agro.alpha"}), ConfigError);
  CHECK_THROWS_AS(ex::with_overrides(ex::default_config(), {"agro.alpha=2"}).resolved().validate(), ConfigError);
}

TEST_CASE("cli exit codes") {
  const auto root = testing::temp_dir("cli_codes");
  auto r = run_cli("train-agro --root " + root.string() + set_flags(), root);
  CHECK(r.code == 2);
  CHECK(r.err.find("features") != std::string::npos);

  { std::ofstream(root / "bad.json") << R"({"agro": {"alpah": 1}})"; }
  r = run_cli("generate --root " + root.string() + " -c " + (root / "bad.json").string(), root);
  CHECK(r.code == 3);
  CHECK(r.err.find("alpah") != std::string::npos);

  r = run_cli("sweep --root " + root.string() + " --param m --values ,", root);
  CHECK(r.code == 3);
  r = run_cli("sweep --root " + root.string() + " --param colour --values 1", root);
  CHECK(r.code == 3);

  r = run_cli("generate --root " + root.string() + set_flags(), root);
  CHECK(r.code == 0);
  std::filesystem::remove_all(root);
}

TEST_CASE("sweep writes one row per value") {
  const auto root = testing::temp_dir("cli_sweep");
  const auto r = run_cli("sweep --root " + root.string() + " --run-id sw --param m --values 2,4,8" + set_flags(), root);
  REQUIRE(r.code == 0);
  std::ifstream in(root / "sw" / "sweep_m.csv");
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line);) lines += !line.empty();
  CHECK(lines == 4);  // header plus three values
  std::filesystem::remove_all(root);
}

TEST_CASE("pipeline is deterministic and resumable") {
  const auto a = testing::temp_dir("pipe_a"), b = testing::temp_dir("pipe_b");
  const auto cfg = small();
  const auto pa = ex::run_paths(cfg, a), pb = ex::run_paths(cfg, b);
  ex::run_pipeline(cfg, pa);
  ex::run_pipeline(cfg, pb);
  for (const auto& m : ex::method_names()) {
    REQUIRE(std::filesystem::exists(pa.metrics(m)));
    CHECK(testing::file_bytes(pa.metrics(m)) == testing::file_bytes(pb.metrics(m)));
  }
  CHECK(std::filesystem::exists(pa.manifest("train-agro")));

  // rerunning the last stages from the files on disk reproduces them
  const auto before = testing::file_bytes(pa.metrics("agro"));
  std::filesystem::remove_all(pa.agro_dir());
  std::filesystem::remove(pa.metrics("agro"));
  ex::stage_train_agro(cfg, pa);
  ex::stage_evaluate(cfg, pa, "agro");
  CHECK(testing::file_bytes(pa.metrics("agro")) == before);

  // a different seed lands elsewhere and differs
  auto other = cfg;
  other.seed = 1;
  CHECK(ex::run_paths(other, a).dir != pa.dir);
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
}

TEST_CASE("stages check their inputs") {
  const auto root = testing::temp_dir("stage_inputs");
  const auto cfg = small();
  const auto p = ex::run_paths(cfg, root);
  CHECK_THROWS_AS(ex::stage_fit_slices(cfg, p), MissingInputError);
  ex::stage_generate(cfg, p);
  CHECK_NOTHROW(ex::stage_train_erm(cfg, p));
  CHECK_THROWS_AS(ex::stage_pretrain_grouper(cfg, p), MissingInputError);
  std::filesystem::remove_all(root);
}
