#include "doctest.h"

#include "json.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

const fs::path& workdir() {
    static const fs::path dir = [] {
        const fs::path p = fs::temp_directory_path() / "mrham_unit_cli";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return dir;
}

int run(const std::string& args) {
    const std::string cmd = "cd '" + workdir().string() + "' && '" MRHAM_CLI_PATH "' " + args + " >> cli.log 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::string> lines_of(const fs::path& p) {
    std::ifstream is(p);
    std::vector<std::string> out;
    for (std::string line; std::getline(is, line);)
        if (!line.empty()) out.push_back(line);
    return out;
}

fs::path only_run(const fs::path& root) {
    std::vector<fs::path> runs;
    for (const auto& e : fs::directory_iterator(root)) runs.push_back(e.path());
    REQUIRE(runs.size() == 1);
    return runs[0];
}

}  // namespace

TEST_CASE("synth then anchors writes nine bounded anchors") {
    REQUIRE(run("synth --n 64 --size 320 --seed 7 --out d/") == 0);
    CHECK(fs::exists(workdir() / "d" / "manifest.txt"));
    CHECK(lines_of(workdir() / "d" / "manifest.txt").size() == 64);
    REQUIRE(run("anchors --data d/ --k 9") == 0);
    const auto anchors = lines_of(workdir() / "d" / "anchors.txt");
    REQUIRE(anchors.size() == 9);
    for (const auto& l : anchors) {
        std::istringstream is(l);
        double w = 0, h = 0;
        is >> w >> h;
        CHECK(w > 0);
        CHECK(w < 320);
        CHECK(h > 0);
        CHECK(h < 320);
    }
}

TEST_CASE("validation failures exit with status 1") {
    CHECK(run("train-det --data d/ --set model.widht=1") == 1);
    CHECK(run("train-det --data d/ --input 100") == 1);
    CHECK(run("eval --weights missing.bin --dataset d/") == 1);
    CHECK(run("detect --weights missing.bin --image none.ppm") == 1);
    CHECK(run("no-such-command") != 0);
}

TEST_CASE("train, detect and eval round trip") {
    REQUIRE(run("synth --n 4 --size 64 --seed 3 --out small/") == 0);
    REQUIRE(run("train-det --data small/ --val small/ --input 64 --width 0.125 --epochs 2 --batch 4 --mosaic 0 "
                "--run-root runs") == 0);
    const fs::path dir = only_run(workdir() / "runs");
    for (const char* f : {"config.json", "metrics.csv", "last.bin", "eval.json"}) CHECK(fs::exists(dir / f));
    CHECK_FALSE(fs::exists(dir / "INCOMPLETE"));
    const auto csv = lines_of(dir / "metrics.csv");
    REQUIRE(csv.size() == 3);
    CHECK(csv[0] == "epoch,lr,loss_box,loss_obj,loss_cls,val_map50,val_p,val_r,val_f1");

    const std::string weights = (dir / "last.bin").string();
    REQUIRE(run("detect --weights '" + weights + "' --image small/images/" +
                fs::path(lines_of(workdir() / "small" / "manifest.txt")[0]).filename().string() +
                " --out det --conf 0.01") == 0);
    bool json_found = false, overlay_found = false;
    for (const auto& e : fs::directory_iterator(workdir() / "det")) {
        if (e.path().extension() == ".json") {
            json_found = true;
            std::ifstream is(e.path());
            const auto j = nlohmann::json::parse(is);
            CHECK(j.contains("detections"));
        }
        if (e.path().stem().string().ends_with("_det")) overlay_found = true;
    }
    CHECK(json_found);
    CHECK(overlay_found);

    REQUIRE(run("eval --weights '" + weights + "' --dataset small/ --out report.json") == 0);
    std::ifstream is(workdir() / "report.json");
    const auto report = nlohmann::json::parse(is);
    CHECK(report["map50"].get<double>() >= 0);
    CHECK(report["map50"].get<double>() <= 1);

    REQUIRE(run("eval --predictions det --dataset small/ --out pred.json") == 0);
    CHECK(fs::exists(workdir() / "pred.json"));
}

TEST_CASE("gradcheck subcommand passes") {
    CHECK(run("gradcheck --seeds 1") == 0);
}
