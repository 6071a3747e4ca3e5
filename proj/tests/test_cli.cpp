#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "camforge/io.hpp"

namespace camforge {
namespace {

namespace fs = std::filesystem;

const fs::path kWork = fs::temp_directory_path() / "camforge_cli";

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

Run cli(const std::string& args) {
  const auto out = kWork / "stdout.txt", err = kWork / "stderr.txt";
  const std::string cmd = std::string(CAMFORGE_CLI) + " " + args + " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::string p(const fs::path& x) { return x.string(); }

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    ASSERT_EQ(cli("gen-data --out " + p(corpus()) + " --n 40 --seed 3 --height 32 --width 32 --max-radius 5").code, 0);
    ASSERT_EQ(cli("train --corpus " + p(corpus()) + " --out " + p(model()) + " --epochs 2 --seed 1").code, 0);
  }
  static fs::path corpus() { return kWork / "corpus"; }
  static fs::path model() { return kWork / "m.cgf"; }
};

TEST_F(Cli, HelpAndUsage) {
  const auto help = cli("--help");
  EXPECT_EQ(help.code, 0);
  for (const char* sub : {"gen-data", "train", "transform", "explain", "evaluate"})
    EXPECT_NE(help.out.find(sub), std::string::npos) << sub;
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("bogus").code, 2);
  EXPECT_EQ(cli("gen-data --n 5").code, 2);
  EXPECT_EQ(cli("gen-data --out " + p(kWork / "zero") + " --n 0").code, 2);
  EXPECT_EQ(cli("gen-data --out " + p(kWork / "odd") + " --height 30").code, 2);
}

TEST_F(Cli, GenDataIsDeterministic) {
  ASSERT_EQ(cli("gen-data --out " + p(kWork / "g1") + " --n 20 --seed 7 --height 32 --width 32 --max-radius 5").code, 0);
  ASSERT_EQ(cli("gen-data --out " + p(kWork / "g2") + " --n 20 --seed 7 --height 32 --width 32 --max-radius 5").code, 0);
  EXPECT_EQ(tree(kWork / "g1"), tree(kWork / "g2"));
  const auto manifest = nlohmann::json::parse(slurp(kWork / "g1" / "manifest.json"));
  EXPECT_EQ(manifest["n"], 20);
}

TEST_F(Cli, TrainIsDeterministic) {
  ASSERT_EQ(cli("train --corpus " + p(corpus()) + " --out " + p(kWork / "again.cgf") + " --epochs 2 --seed 1").code, 0);
  EXPECT_EQ(slurp(model()), slurp(kWork / "again.cgf"));
  EXPECT_TRUE(fs::exists(kWork / "m.json"));
  const auto curve = slurp(kWork / "m.curve.csv");
  EXPECT_EQ(std::count(curve.begin(), curve.end(), '\n'), 3);
  const auto side = nlohmann::json::parse(slurp(kWork / "m.json"));
  EXPECT_EQ(side["head_kind"], "GapFc");
}

TEST_F(Cli, Transform) {
  const auto r = cli("transform --in " + p(model()) + " --out " + p(kWork / "t.cgf") + " --report " +
                     p(kWork / "t_report.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = nlohmann::json::parse(slurp(kWork / "t_report.json"));
  EXPECT_EQ(report["compatible"], true);
  EXPECT_EQ(report["feature_channels"], 16);
  EXPECT_EQ(load_checkpoint(kWork / "t.cgf").head_kind(), HeadKind::BuiltInCam);

  ParamStore<float> params;
  params.emplace("fc", ConvParams<float>{Tensor4<float>(Dims{2, 48, 1, 1}), {0, 0}, 1, 0});
  save_checkpoint(ModelGraph<float>({LayerSpec::simple(LayerKind::Flatten), LayerSpec::fully_connected(48, 2, "fc")},
                                    params, InputShape{3, 4, 4}),
                  kWork / "vgg.cgf");
  const auto bad = cli("transform --in " + p(kWork / "vgg.cgf") + " --out " + p(kWork / "vgg_t.cgf") + " --report " +
                       p(kWork / "vgg_report.json"));
  EXPECT_EQ(bad.code, 4);
  EXPECT_NE(bad.err.find("head consumes spatial layout"), std::string::npos);
  EXPECT_EQ(nlohmann::json::parse(slurp(kWork / "vgg_report.json"))["compatible"], false);
  EXPECT_FALSE(fs::exists(kWork / "vgg_t.cgf"));
}

TEST_F(Cli, ExplainCamAndTteOverlaysMatch) {
  const auto out = kWork / "ex";
  const auto r = cli("explain --model " + p(model()) + " --corpus " + p(corpus()) +
                     " --samples 0,1,2,3 --methods cam,tte,scorecam --out " + p(out));
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* s : {"sample000000", "sample000001", "sample000002", "sample000003"}) {
    const std::string name(s);
    EXPECT_EQ(slurp(out / (name + "_cam.pgm")), slurp(out / (name + "_tte.pgm"))) << name;
    const auto score = nlohmann::json::parse(slurp(out / (name + "_scorecam.json")));
    EXPECT_EQ(score["forward_passes"], 17);
    EXPECT_EQ(score["backward_passes"], 0);
    const auto tte = nlohmann::json::parse(slurp(out / (name + "_tte.json")));
    EXPECT_EQ(tte["forward_passes"], 1);
    EXPECT_EQ(tte["backward_passes"], 0);
  }
  const auto map = load_saliency(out / "sample000000_cam");
  EXPECT_EQ(map.grid.rows(), 8);
}

TEST_F(Cli, ExplainErrors) {
  const auto r = cli("explain --model " + p(model()) + " --corpus " + p(corpus()) + " --samples 0 --methods gradcam,shap --out " +
                     p(kWork / "ex_bad"));
  EXPECT_EQ(r.code, 2);
  for (const char* m : {"cam", "gradcam", "layercam", "scorecam", "ig", "tte"}) EXPECT_NE(r.err.find(m), std::string::npos);
  EXPECT_EQ(cli("explain --model " + p(model()) + " --out " + p(kWork / "ex_none")).code, 2);
  EXPECT_EQ(cli("explain --model " + p(kWork / "nope.cgf") + " --out x").code, 2);
}

TEST_F(Cli, EvaluateReport) {
  const auto args = "evaluate --model " + p(model()) + " --corpus " + p(corpus()) +
                    " --methods cam,gradcam,tte --split test --report ";
  const auto r = cli(args + p(kWork / "r1.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  ASSERT_EQ(cli(args + p(kWork / "r2.json")).code, 0);
  EXPECT_EQ(slurp(kWork / "r1.json"), slurp(kWork / "r2.json"));
  EXPECT_EQ(slurp(kWork / "r1.csv"), slurp(kWork / "r2.csv"));
  const auto j = nlohmann::json::parse(slurp(kWork / "r1.json"));
  ASSERT_EQ(j.size(), 3u);
  for (const char* m : {"cam", "gradcam", "tte"}) {
    for (const char* key : {"topk_localization", "activation_precision"}) {
      EXPECT_TRUE(j[m][key].contains("mean"));
      EXPECT_TRUE(j[m][key].contains("sd"));
    }
  }
  for (const char* key : {"topk_sensitivity", "accuracy", "auc"}) {
    if (!j["cam"][key].is_null()) {
      EXPECT_LE(std::abs(j["cam"][key].get<double>() - j["tte"][key].get<double>()), 5e-7) << key;
    }
  }
  for (const char* key : {"topk_localization", "activation_precision"})
    for (const char* f : {"mean", "sd"})
      EXPECT_LE(std::abs(j["cam"][key][f].get<double>() - j["tte"][key][f].get<double>()), 5e-7) << key << f;
  EXPECT_EQ(cli(args + p(kWork / "r3.json") + " --k 65").code, 2);
  EXPECT_EQ(cli(args + p(kWork / "r3.json") + " --k 64").code, 0);
  EXPECT_EQ(cli(args + p(kWork / "r4.json") + " --split holdout").code, 2);
}

TEST_F(Cli, ConfigFile) {
  const auto cfg = kWork / "gen.json";
  std::ofstream(cfg) << R"({"out": ")" << p(kWork / "cfg_a") << R"(", "n": 12, "height": 32, "width": 32, "max-radius": 5})";
  ASSERT_EQ(cli("gen-data --config " + p(cfg)).code, 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(kWork / "cfg_a" / "manifest.json"))["n"], 12);
  ASSERT_EQ(cli("gen-data --config " + p(cfg) + " --n 14").code, 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(kWork / "cfg_a" / "manifest.json"))["n"], 14);
  std::ofstream(kWork / "bad.json") << R"({"out": "x", "colour": 3})";
  EXPECT_EQ(cli("gen-data --config " + p(kWork / "bad.json")).code, 2);
}

}  // namespace
}  // namespace camforge
