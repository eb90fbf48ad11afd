#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tsflora/checkpoint.hpp"
#include "tsflora/cli.hpp"
#include "tsflora/config.hpp"
#include "tsflora/errors.hpp"

using namespace tsflora;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

CliResult cli(std::vector<std::string> args) {
  std::ostringstream out;
  std::ostringstream err;
  CliResult r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("tsflora_cli_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
    config_ = write("tiny.cfg",
                    "# tiny run\n"
                    "seed = 3\n"
                    "blocks = 2\ncut = 1\ndim = 8\npatches = 4\npatch_dim = 3\nclasses = 3\n"
                    "rounds = 2\nlocal_steps = 1\nbatch = 4\nclients = 3\nclients_per_round = 2\n"
                    "train_size = 60\ntest_size = 20\nkeep_tokens = 2\nbits = 8\n"
                    "search_cuts = 1, 2\nsearch_bits = 4, 8\n");
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string write(const std::string& name, const std::string& text) {
    const fs::path p = dir_ / name;
    std::ofstream(p) << text;
    return p.string();
  }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
  std::string config_;
};

TEST(Config, ParsesEveryKindOfValue) {
  const ExperimentConfig c = parse_config(
      "# comment\n\n dim = 12 \nrank=3\nlora_site = value\nfp32_wire = true\npipeline = uncompressed\n"
      "client_tokens = 1, 2,3\nclients = 3\nclients_per_round = 3\nc_max_bits = inf\nsigma2 = 0.5\nseed = 99\n");
  EXPECT_EQ(c.model.dim, 12);
  EXPECT_EQ(c.model.rank, 3);
  EXPECT_EQ(c.model.lora_site, LoraSite::kValue);
  EXPECT_TRUE(c.train.fp32_wire);
  EXPECT_EQ(c.train.pipeline, Pipeline::kUncompressed);
  EXPECT_EQ(c.train.client_tokens, (std::vector<int>{1, 2, 3}));
  EXPECT_TRUE(std::isinf(c.search.c_max_bits));
  EXPECT_EQ(c.train.seed, 99U);
  EXPECT_EQ(c.search.k_max, c.model.patches);
  EXPECT_EQ(c.bounds.clients, 3);
  EXPECT_EQ(c.bounds.eta, (std::vector<double>{c.train.eta}));
  EXPECT_EQ(c.data.patches, c.model.patches);
}

TEST(Config, ErrorsNameTheKey) {
  auto key_of = [](const std::string& text) {
    try {
      (void)parse_config(text);
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string("ok");
  };
  EXPECT_EQ(key_of("seed = 1\n"), "ok");
  EXPECT_EQ(key_of("learning_rate = 0.1\n"), "learning_rate");
  EXPECT_EQ(key_of("eta = fast\n"), "eta");
  EXPECT_EQ(key_of("rounds = 2.5\n"), "rounds");
  EXPECT_EQ(key_of("bits = 6\n"), "bits");
  EXPECT_EQ(key_of("keep_tokens = 10\n"), "keep_tokens");
  EXPECT_EQ(key_of("fp32_wire = maybe\n"), "fp32_wire");
  EXPECT_EQ(key_of("heads = 2\n"), "heads");
  EXPECT_EQ(key_of("seed = -1\n"), "seed");
  EXPECT_EQ(key_of("just text\n"), "line1");
}

TEST(Config, KeyListIsUnique) {
  const auto& keys = config_keys();
  std::set<std::string> unique(keys.begin(), keys.end());
  EXPECT_EQ(unique.size(), keys.size());
  EXPECT_GT(keys.size(), 40U);
}

TEST(Config, ShippedConfigsLoad) {
  for (const auto& entry : fs::directory_iterator(fs::path(TSFLORA_SOURCE_DIR) / "configs")) {
    EXPECT_NO_THROW((void)load_config(entry.path())) << entry.path();
  }
}

TEST_F(CliTest, TrainWritesOneLinePerRound) {
  const CliResult r = cli({"train", "--config", config_, "--jsonl", path("m.jsonl"), "--csv", path("m.csv"),
                     "--checkpoint", path("model.tsfl")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(path("m.jsonl"));
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["schema"], "tsflora.round.v1");
    EXPECT_EQ(j["round"], n);
    ++n;
  }
  EXPECT_EQ(n, 2);
  std::ifstream csv(path("m.csv"));
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 3);
  EXPECT_NO_THROW((void)load_checkpoint(path("model.tsfl")));

  const CliResult again = cli({"train", "--config", config_});
  EXPECT_EQ(again.code, 0);
  std::ifstream first(path("m.jsonl"));
  std::stringstream ss;
  ss << first.rdbuf();
  EXPECT_EQ(again.out, ss.str());
}

TEST_F(CliTest, PartitionCoversTrainingSet) {
  const CliResult r = cli({"partition", "--config", config_});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  ASSERT_EQ(j["clients"].size(), 3U);
  std::size_t total = 0;
  for (const auto& c : j["clients"]) total += c["size"].get<std::size_t>();
  EXPECT_EQ(total, 60U);
}

TEST_F(CliTest, AnalyzeDeltaAndPenalty) {
  CliResult r = cli({"analyze", "--q", "8", "--d", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("delta=0.0039215686", 0), 0U) << r.out;

  ASSERT_EQ(cli({"train", "--config", config_, "--checkpoint", path("model.tsfl"), "--jsonl", path("x")}).code, 0);
  r = cli({"analyze", "--config", config_, "--checkpoint", path("model.tsfl")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("psi="), std::string::npos);
  EXPECT_NE(r.out.find("lambda="), std::string::npos);
  EXPECT_NE(r.out.find("\nr="), std::string::npos);

  r = cli({"analyze", "--q", "3", "--d", "4"});
  EXPECT_NE(r.code, 0);
  EXPECT_EQ(r.err.rfind("error kind=config key=q", 0), 0U) << r.err;
}

TEST_F(CliTest, SearchReportsJson) {
  const CliResult r = cli({"search", "--config", config_});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_TRUE(j["feasible"].get<bool>());
  EXPECT_EQ(j["bits"], 8);
  const std::string capped = write("capped.cfg", "c_max_bits = 1\n");
  const auto k = nlohmann::json::parse(cli({"search", "--config", capped}).out);
  EXPECT_FALSE(k["feasible"].get<bool>());
  EXPECT_EQ(k["binding"][0], "payload");
}

TEST_F(CliTest, CodecEncodeInspectDecode) {
  CliResult r = cli({"codec", "encode", "--config", config_, "--out", path("a.tsfa")});
  ASSERT_EQ(r.code, 0) << r.err;
  r = cli({"codec", "inspect", path("a.tsfa")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["kept"], 2);
  EXPECT_EQ(j["bits"], 8);
  EXPECT_EQ(j["batch"], 4);
  EXPECT_EQ(j["bytes"].get<std::size_t>(), fs::file_size(path("a.tsfa")));
  r = cli({"codec", "decode", path("a.tsfa")});
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 1 + 4 * 4 * 8);

  std::vector<std::uint8_t> bytes = read_file(path("a.tsfa"));
  bytes.pop_back();
  write_file(path("bad.tsfa"), bytes);
  r = cli({"codec", "inspect", path("bad.tsfa")});
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(r.err.rfind("error kind=decode reason=truncated", 0), 0U) << r.err;
}

TEST_F(CliTest, CodecReadsCheckedInGoldens) {
  const CliResult r = cli({"codec", "inspect", (fs::path(TSFLORA_SOURCE_DIR) / "tests" / "golden" / "act_q4.tsfa").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(nlohmann::json::parse(r.out)["bits"], 4);
}

TEST_F(CliTest, GoldensNeedExplicitFlag) {
  CliResult r = cli({"goldens", "--dir", path("g")});
  EXPECT_NE(r.code, 0);
  EXPECT_FALSE(fs::exists(path("g")));
  r = cli({"goldens", "--dir", path("g"), "--write"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(path("g/act_q8.tsfa")));
}

TEST_F(CliTest, ErrorsAreSingleMachineParsableLines) {
  const std::regex line(R"(^error kind=[a-z]+( (key|reason)=[A-Za-z0-9_]+)? msg="[^"\n]*"\n$)");
  const std::string bad = write("bad.cfg", "no_such_key = 1\n");
  for (const auto& args : std::vector<std::vector<std::string>>{
           {"train", "--config", bad},
           {"train", "--config", path("missing.cfg")},
           {"frobnicate"},
           {"train"},
           {"codec", "inspect", path("missing.tsfa")},
       }) {
    const CliResult r = cli(args);
    EXPECT_NE(r.code, 0);
    EXPECT_TRUE(std::regex_match(r.err, line)) << r.err;
  }
  const CliResult r = cli({"train", "--config", bad});
  EXPECT_NE(r.err.find("key=no_such_key"), std::string::npos);
}

TEST_F(CliTest, HelpSucceeds) {
  const CliResult r = cli({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("train"), std::string::npos);
}

}  // namespace
