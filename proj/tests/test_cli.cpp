#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "cli.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace rf;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result rf_run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Scratch directory with a small config file.
struct Sandbox {
    fs::path dir, config;

    explicit Sandbox(const std::string& name) {
        dir = fs::temp_directory_path() / ("rf_cli_" + name);
        fs::remove_all(dir);
        fs::create_directories(dir);
        config = dir / "run.cfg";
        std::ofstream f(config);
        f << "data.count = 8\ndata.frames = 8\ndata.tokens = 2\ndata.channels = 4\ndata.latent_dim = 4\n"
          << "model.tokens = 2\nmodel.d_in = 4\nmodel.d_model = 16\nmodel.n_heads = 2\nmodel.n_layers = 2\n"
          << "model.n_max = 16\nmodel.ffn_mult = 2\ntrain.batch_size = 2\ntrain.checkpoint_every = 3\n"
          << "eval.solver_steps = 2\neval.num_frames = 6\nrun.eval_seeds = 2\nrun.target_frame = 4\n"
          << "paths.dataset = " << (dir / "data.rfds").string() << "\n"
          << "paths.checkpoint_dir = " << (dir / "run").string() << "\n"
          << "paths.output_dir = " << (dir / "out").string() << "\n";
    }
    ~Sandbox() { fs::remove_all(dir); }

    Result operator()(std::vector<std::string> args) const {
        args.insert(args.begin() + 1, {"--config", config.string()});
        return rf_run(std::move(args));
    }
};

std::vector<std::string> metric_losses(const fs::path& csv) {
    std::ifstream in(csv);
    std::vector<std::string> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#' || line.rfind("step", 0) == 0) continue;
        rows.push_back(line.substr(0, line.rfind(',')));  // drop wall_time
    }
    return rows;
}

}  // namespace

TEST_CASE("config prints every key and rejects unknown ones") {
    const auto r = rf_run({"config"});
    CHECK(r.code == 0);
    CHECK(r.out == cli::default_config_text());
    CHECK(r.out.find("train.shift = 0.6") != std::string::npos);
    CHECK(r.out.find("config_version = 1") != std::string::npos);

    CHECK(rf_run({"config", "--set", "train.nope=1"}).code == cli::kExitUsage);
    CHECK(rf_run({"config", "--set", "config_version=2"}).code == cli::kExitRuntime);
    CHECK(rf_run({"config", "--set", "model.d_in=3"}).code == cli::kExitUsage);  // layout mismatch
    CHECK(rf_run({"bogus"}).code == cli::kExitUsage);
    CHECK(rf_run({"--help"}).code == 0);

    const auto round = cli::RunConfig::from_table(kv::parse(r.out));
    CHECK(round.text() == r.out);
}

TEST_CASE("gen-data is reproducible and guards existing files") {
    Sandbox sb("gen");
    auto r = sb({"gen-data"});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("8 sequences x 8 frames") != std::string::npos);
    const auto first = slurp(sb.dir / "data.rfds");

    CHECK(sb({"gen-data"}).code == cli::kExitRuntime);
    CHECK(sb({"gen-data", "--force"}).code == 0);
    CHECK(slurp(sb.dir / "data.rfds") == first);

    CHECK(sb({"gen-data", "--force", "--seed", "2"}).code == 0);
    CHECK(slurp(sb.dir / "data.rfds") != first);

    r = sb({"gen-data", "--force", "--family", "spiral"});
    CHECK(r.code == cli::kExitUsage);
    CHECK(r.err.find("spiral") != std::string::npos);
}

TEST_CASE("train writes one metric row per step and resumes exactly") {
    Sandbox sb("train");
    CHECK(sb({"train", "--strategy", "teacher", "--steps", "10"}).code == cli::kExitRuntime);  // no dataset yet
    REQUIRE(sb({"gen-data"}).code == 0);

    auto r = sb({"train", "--strategy", "teacher", "--steps", "10"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto rows = metric_losses(sb.dir / "run" / "metrics.csv");
    CHECK(rows.size() == 10);
    CHECK(slurp(sb.dir / "run" / "metrics.csv").rfind("# config_hash=", 0) == 0);
    CHECK(fs::exists(sb.dir / "run" / "final.rfck"));
    // --steps alone pulls the default warmup of 500 down to the budget
    CHECK(slurp(sb.dir / "run" / "config.txt").find("train.warmup_steps = 10\n") != std::string::npos);
    CHECK(sb({"train", "--set", "train.total_steps=10", "--force"}).code == cli::kExitUsage);
    CHECK(sb({"train", "--strategy", "teacher", "--steps", "10"}).code == cli::kExitRuntime);  // occupied

    // Uninterrupted run of the full schedule, then an interrupted copy.
    const std::vector<std::string> full = {"train", "--steps", "8", "--warmup", "4", "--force"};
    REQUIRE(sb(full).code == 0);
    const auto want_rows = metric_losses(sb.dir / "run" / "metrics.csv");
    const auto want = ckpt::load(sb.dir / "run" / "final.rfck");
    fs::remove(sb.dir / "run" / "final.rfck");
    fs::remove(sb.dir / "run" / "ckpt_00000006.rfck");
    auto resumed = full;
    resumed.back() = "--resume";
    r = sb(resumed);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto got = ckpt::load(sb.dir / "run" / "final.rfck");
    REQUIRE(got.params.size() == want.params.size());
    for (std::size_t i = 0; i < got.params.size(); ++i) CHECK(got.params[i].data == want.params[i].data);
    CHECK(metric_losses(sb.dir / "run" / "metrics.csv") == want_rows);

    // resuming under another shift is refused
    resumed.push_back("--shift");
    resumed.push_back("0.3");
    CHECK(sb(resumed).code == cli::kExitRuntime);
}

TEST_CASE("sample, eval, route-stats and matrix") {
    Sandbox sb("eval");
    REQUIRE(sb({"gen-data"}).code == 0);
    REQUIRE(sb({"train", "--strategy", "teacher", "--steps", "4"}).code == 0);
    const auto ck = (sb.dir / "run" / "final.rfck").string();

    SUBCASE("sample is deterministic per seed") {
        const auto a = sb.dir / "a.csv", b = sb.dir / "b.csv", c = sb.dir / "c.csv";
        REQUIRE(sb({"sample", "--frames", "8", "--seed", "7", "--out", a.string()}).code == 0);
        REQUIRE(sb({"sample", "--frames", "8", "--seed", "7", "--out", b.string()}).code == 0);
        REQUIRE(sb({"sample", "--frames", "8", "--seed", "8", "--out", c.string()}).code == 0);
        CHECK(slurp(a) == slurp(b));
        CHECK(slurp(a) != slurp(c));
        std::size_t lines = 0;
        std::ifstream in(a);
        for (std::string l; std::getline(in, l);) ++lines;
        CHECK(lines == 2 + 8 * 2 * 4);
        CHECK(sb({"sample", "--frames", "40"}).code == cli::kExitRuntime);  // beyond capacity
        CHECK(sb({"sample", "--checkpoint", (sb.dir / "missing.rfck").string()}).code == cli::kExitRuntime);
    }
    SUBCASE("eval writes per-seed drift, summary and plot") {
        auto r = sb({"eval", "--a", ck, "--b", ck});
        REQUIRE_MESSAGE(r.code == 0, r.err);
        std::size_t csv = 0, svg = 0;
        for (const auto& e : fs::directory_iterator(sb.dir / "out")) {
            csv += e.path().filename().string().rfind("drift_", 0) == 0 && e.path().extension() == ".csv";
            if (e.path().extension() == ".svg") {
                ++svg;
                CHECK(slurp(e.path()).find("config_hash=") != std::string::npos);
            }
            if (e.path().extension() == ".csv") CHECK(slurp(e.path()).rfind("# config_hash=", 0) == 0);
        }
        CHECK(csv == 2);
        CHECK(svg == 1);
        CHECK(sb({"eval"}).code == cli::kExitUsage);
    }
    SUBCASE("route-stats needs routing") {
        auto r = sb({"route-stats"});
        CHECK(r.code == cli::kExitUsage);
        CHECK(r.err.find("routing off") != std::string::npos);
        r = sb({"route-stats", "--routing", "topk:1"});
        REQUIRE_MESSAGE(r.code == 0, r.err);
        CHECK(r.out.find("frame  3") != std::string::npos);
    }
    SUBCASE("matrix ranks every strategy") {
        auto r = sb({"matrix", "--steps", "4", "--warmup", "2", "--n-seeds", "1", "--entries",
                     "teacher,noise_aug@0.6,parallel_resample@0.6,ar_resample@0.6"});
        REQUIRE_MESSAGE(r.code == 0, r.err);
        for (const char* s : {"teacher,0,", "noise_aug,0.6,", "parallel_resample,0.6,", "ar_resample,0.6,"})
            CHECK(r.out.find(s) != std::string::npos);
        CHECK(sb({"matrix", "--entries", "sideways@1", "--force"}).code == cli::kExitUsage);
    }
}
