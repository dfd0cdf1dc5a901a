// Integration tests that drive the built CLI binary through a shell.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "nests6/checkpoint.hpp"
#include "nests6/data.hpp"

#ifndef NESTS6_BIN
#error "NESTS6_BIN must point at the CLI binary"
#endif

using namespace nests6;
namespace fs = std::filesystem;

namespace {

const std::string kBin = NESTS6_BIN;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::path("/tmp") / ("nests6_cli_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
};

int run(const std::string& cmd) {
    const int rc = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(rc);
}

void write_config(const fs::path& p, const std::string& out_dir, const std::string& extra = "") {
    std::ofstream os(p, std::ios::trunc);
    os << "[run]\nrun_id = cli\nseed = 7\nout_dir = " << out_dir << "\nworkers = 1\n"
       << "[data]\nsource = synth\nH = 20\nW = 20\nN = 150\nn_hotspots = 3\nnoise_std = 0.25\n"
       << "[model]\nchannels = 6\nstate_dim = 2\nn_blocks = 1\npatch_h = 10\npatch_w = 10\n"
          "window_size = 5\nt_window = 4\n"
       << "[train]\nepochs = 0\n"
       << extra;
}

std::string first_lines(const fs::path& p, int n) {
    std::ifstream is(p);
    std::string out, line;
    for (int i = 0; i < n && std::getline(is, line); ++i) out += line + "\n";
    return out;
}

}  // namespace

TEST_CASE("synth: magic, size arithmetic, and seed determinism") {
    TempDir dir("synth");
    write_config(dir.path / "cfg.txt", (dir.path / "out").string());
    const std::string base = kBin + " synth --config " + (dir.path / "cfg.txt").string();
    REQUIRE(run(base + " --out " + (dir.path / "a.bin").string()) == 0);
    REQUIRE(run(base + " --out " + (dir.path / "b.bin").string()) == 0);

    std::ifstream in(dir.path / "a.bin", std::ios::binary);
    char magic[8];
    in.read(magic, 8);
    CHECK(std::string(magic, 8) == "GRIDSER1");
    in.seekg(0, std::ios::end);
    CHECK(static_cast<long long>(in.tellg()) == 32 + 150LL * 20 * 20 * 4);

    CHECK(file_hash((dir.path / "a.bin").string()) == file_hash((dir.path / "b.bin").string()));
}

TEST_CASE("train: epochs=0 writes an initialized checkpoint and an empty log body") {
    TempDir dir("train0");
    write_config(dir.path / "cfg.txt", (dir.path / "out").string());
    REQUIRE(run(kBin + " train --config " + (dir.path / "cfg.txt").string()) == 0);
    CHECK(fs::exists(dir.path / "out" / "model.ckpt"));
    const std::string log = first_lines(dir.path / "out" / "train_log.csv", 3);
    CHECK(log == "epoch,step,train_loss,val_mae,val_rmse,lr,skipped_steps\n");
}

TEST_CASE("train: identical config and seed give identical artifact hashes") {
    TempDir dir("repro");
    write_config(dir.path / "cfg.txt", (dir.path / "out1").string(),
                 "[eval]\nhorizon = 1\n");
    // one short epoch of real training
    std::ifstream is(dir.path / "cfg.txt");
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    is.close();
    text.replace(text.find("epochs = 0"), 10, "epochs = 1");
    std::ofstream(dir.path / "cfg.txt", std::ios::trunc) << text;

    REQUIRE(run(kBin + " train --config " + (dir.path / "cfg.txt").string()) == 0);
    text.replace(text.find("out1"), 4, "out2");
    std::ofstream(dir.path / "cfg.txt", std::ios::trunc) << text;
    REQUIRE(run(kBin + " train --config " + (dir.path / "cfg.txt").string()) == 0);

    CHECK(file_hash((dir.path / "out1" / "model.ckpt").string()) ==
          file_hash((dir.path / "out2" / "model.ckpt").string()));
    CHECK(file_hash((dir.path / "out1" / "train_log.csv").string()) ==
          file_hash((dir.path / "out2" / "train_log.csv").string()));
}

TEST_CASE("eval: flags show up in the report; rollout is eval with horizon") {
    TempDir dir("eval");
    write_config(dir.path / "cfg.txt", (dir.path / "out").string());
    const std::string cfg = (dir.path / "cfg.txt").string();
    REQUIRE(run(kBin + " train --config " + cfg) == 0);
    const std::string ckpt = (dir.path / "out" / "model.ckpt").string();

    REQUIRE(run(kBin + " eval --config " + cfg + " --ckpt " + ckpt + " --drift scale_offset") == 0);
    const std::string report = first_lines(dir.path / "out" / "report.csv", 2);
    CHECK(report.find("run_id,split,horizon,drift_kind,memory,mae,rmse,n") != std::string::npos);
    CHECK(report.find("scale_offset") != std::string::npos);

    REQUIRE(run(kBin + " rollout --config " + cfg + " --ckpt " + ckpt) == 0);
    std::ifstream rr(dir.path / "out" / "report.csv");
    int lines = 0;
    std::string l;
    while (std::getline(rr, l)) ++lines;
    CHECK(lines == 1 + 6);  // header + h=1..6

    // per-pixel map export: P5 header plus max sidecar
    REQUIRE(run(kBin + " eval --config " + cfg + " --ckpt " + ckpt + " --per-pixel-map") == 0);
    REQUIRE(fs::exists(dir.path / "out" / "rmse_map.pgm"));
    CHECK(fs::exists(dir.path / "out" / "rmse_map.pgm.max.txt"));
    std::ifstream pgm(dir.path / "out" / "rmse_map.pgm", std::ios::binary);
    std::string hdr(2, '\0');
    pgm.read(hdr.data(), 2);
    CHECK(hdr == "P5");

    // drift suite: 4 kinds x {memory, no-memory}
    REQUIRE(run(kBin + " drift --config " + cfg + " --ckpt " + ckpt) == 0);
    std::ifstream dr(dir.path / "out" / "drift_report.csv");
    int drift_lines = 0;
    bool has_off = false;
    while (std::getline(dr, l)) {
        ++drift_lines;
        if (l.find(",off,") != std::string::npos) has_off = true;
    }
    CHECK(drift_lines == 1 + 8);
    CHECK(has_off);
}

TEST_CASE("eval: checkpoint/config architecture mismatch is rejected") {
    TempDir dir("mismatch");
    write_config(dir.path / "cfg.txt", (dir.path / "out").string());
    const std::string cfg = (dir.path / "cfg.txt").string();
    REQUIRE(run(kBin + " train --config " + cfg) == 0);
    // a config that contradicts the checkpoint's architecture
    write_config(dir.path / "cfg2.txt", (dir.path / "out").string());
    {
        std::ifstream is(dir.path / "cfg2.txt");
        std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        is.close();
        text.replace(text.find("channels = 6"), 12, "channels = 8");
        std::ofstream(dir.path / "cfg2.txt", std::ios::trunc) << text;
    }
    CHECK(run(kBin + " eval --config " + (dir.path / "cfg2.txt").string() + " --ckpt " +
              (dir.path / "out" / "model.ckpt").string()) == 1);
}

TEST_CASE("exit codes: 1 for config errors, 2 for data errors") {
    TempDir dir("codes");
    // unknown key -> config error
    std::ofstream(dir.path / "bad.txt", std::ios::trunc) << "[run]\nbogus_key = 1\n";
    CHECK(run(kBin + " synth --config " + (dir.path / "bad.txt").string()) == 1);
    // missing data file -> data error
    write_config(dir.path / "cfg.txt", (dir.path / "out").string());
    {
        std::ifstream is(dir.path / "cfg.txt");
        std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        is.close();
        text.replace(text.find("source = synth"), 14,
                     "source = file\npath = /tmp/does_not_exist_nests6.bin");
        std::ofstream(dir.path / "cfg.txt", std::ios::trunc) << text;
    }
    CHECK(run(kBin + " train --config " + (dir.path / "cfg.txt").string()) == 2);
    // malformed flag value -> usage error
    write_config(dir.path / "cfg_ok.txt", (dir.path / "out").string());
    REQUIRE(run(kBin + " train --config " + (dir.path / "cfg_ok.txt").string()) == 0);
    CHECK(run(kBin + " eval --config " + (dir.path / "cfg_ok.txt").string() + " --ckpt " +
              (dir.path / "out" / "model.ckpt").string() + " --drift nonsense") == 1);
}

TEST_CASE("NSTS6_OUT overrides the output directory") {
    TempDir dir("envout");
    write_config(dir.path / "cfg.txt", (dir.path / "ignored").string());
    const std::string env_dir = (dir.path / "env_out").string();
    const int rc = std::system(("NSTS6_OUT=" + env_dir + " " + kBin + " synth --config " +
                                (dir.path / "cfg.txt").string() + " >/dev/null 2>&1")
                                   .c_str());
    REQUIRE(WEXITSTATUS(rc) == 0);
    CHECK(fs::exists(fs::path(env_dir) / "series.bin"));
    CHECK_FALSE(fs::exists(dir.path / "ignored" / "series.bin"));
}
