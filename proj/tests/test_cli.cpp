#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

const fs::path& work() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "evograsp_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    std::ofstream(d / "tiny.conf") << "seed=3\n"
                                      "data.n_objects=4\n"
                                      "data.grasps_per_object=6\n"
                                      "data.test_fraction=0.5\n"
                                      "diffusion.epochs=3\n"
                                      "diffusion.hidden=32\n"
                                      "diffusion.desc_dim=16\n"
                                      "diffusion.enc_hidden=16\n"
                                      "distill.epochs=2\n"
                                      "hpo.epochs=1\n"
                                      "hpo.batch=3\n"
                                      "sample.n=4\n";
    return d;
  }();
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = std::string(EVOGRASP_CLI) + " " + args + " > " + (work() / "last.log").string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string conf() { return "--config " + (work() / "tiny.conf").string(); }

std::string w(const std::string& name) { return (work() / name).string(); }

}  // namespace

TEST(Cli, PipelineIsBitwiseReproducible) {
  for (const char* tag : {"a", "b"}) {
    const std::string t(tag);
    ASSERT_EQ(run("gen-data " + conf() + " --out " + w("data_" + t)), 0) << slurp(work() / "last.log");
    ASSERT_EQ(run("train-teacher " + conf() + " --data " + w("data_" + t + "/dataset.jsonl") + " --out " +
                  w("teacher_" + t + ".ckpt")),
              0)
        << slurp(work() / "last.log");
    ASSERT_EQ(run("distill " + conf() + " --teacher " + w("teacher_" + t + ".ckpt") + " --data " +
                  w("data_" + t + "/dataset.jsonl") + " --out " + w("student_" + t + ".ckpt")),
              0)
        << slurp(work() / "last.log");
    ASSERT_EQ(run("sample " + conf() + " --model " + w("student_" + t + ".ckpt") + " --data " +
                  w("data_" + t + "/dataset.jsonl") + " --nfe 2 --out " + w("poses_" + t + ".jsonl")),
              0)
        << slurp(work() / "last.log");
    ASSERT_EQ(run("evaluate " + conf() + " --poses " + w("poses_" + t + ".jsonl") + " --objects " +
                  w("data_" + t + "/objects") + " --out " + w("metrics_" + t + ".json")),
              0)
        << slurp(work() / "last.log");
    ASSERT_EQ(run("finetune-hpo " + conf() + " --model " + w("student_" + t + ".ckpt") + " --data " +
                  w("data_" + t + "/dataset.jsonl") + " --out " + w("evolved_" + t + ".ckpt") + " --report " +
                  w("report_" + t + ".csv")),
              0)
        << slurp(work() / "last.log");
  }
  for (const std::string f : {"data_%/dataset.jsonl", "teacher_%.ckpt", "student_%.ckpt", "poses_%.jsonl",
                              "evolved_%.ckpt", "report_%.csv"}) {
    std::string fa = f, fb = f;
    fa.replace(fa.find('%'), 1, "a");
    fb.replace(fb.find('%'), 1, "b");
    const std::string ca = slurp(work() / fa);
    EXPECT_FALSE(ca.empty()) << fa;
    EXPECT_EQ(ca, slurp(work() / fb)) << f;
  }

  std::ifstream poses(work() / "poses_a.jsonl");
  int lines = 0;
  for (std::string l; std::getline(poses, l); ++lines) {
    const auto j = nlohmann::json::parse(l);
    EXPECT_EQ(j["nfe"], 2);
    EXPECT_EQ(j["pose"].size(), 7u);
  }
  EXPECT_EQ(lines, 2 * 4);
  const auto m = nlohmann::json::parse(slurp(work() / "metrics_a.json"));
  EXPECT_TRUE(m.contains("suc_all"));
  EXPECT_TRUE(fs::exists(w("student_a.ckpt.config.txt")));
  EXPECT_EQ(slurp(work() / "report_a.csv").find("epoch"), 0u);
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run("gen-data " + conf() + " --set hpo.betta=1 --out " + w("bad_cfg")), 2);
  EXPECT_FALSE(fs::exists(w("bad_cfg")));
  EXPECT_EQ(run("gen-data --set data.test_fraction=1.5 --out " + w("bad_cfg")), 2);
  EXPECT_EQ(run("gen-data --config " + w("missing.conf") + " --out " + w("bad_cfg")), 4);
  EXPECT_EQ(run("train-teacher " + conf() + " --data " + w("missing.jsonl") + " --out " + w("t.ckpt")), 4);
  EXPECT_FALSE(fs::exists(w("t.ckpt")));
  std::ofstream(work() / "junk.ckpt") << "not a checkpoint";
  EXPECT_EQ(run("sample " + conf() + " --model " + w("junk.ckpt") + " --data " + w("missing.jsonl") + " --out " +
                w("p.jsonl")),
            4);
  EXPECT_EQ(run("no-such-command"), 2);
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("--help"), 0);
}
