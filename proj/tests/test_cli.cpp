#include <doctest.h>

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "aerolite/cli.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code = 0;
    std::string out, err;
};

Result run(std::vector<std::string> args) {
    std::ostringstream out, err;
    Result r;
    args.insert(args.begin(), "aerolite");
    r.code = aerolite::cli::run(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void write(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

/// Builds a small corpus and a trained checkpoint once for the whole suite.
struct Workspace {
    fs::path dir;
    std::string cfg, tagged, ckpt, images;

    Workspace() {
        dir = testsupport::scratch_dir("cli");
        cfg = (dir / "cfg.txt").string();
        write(cfg,
              "encoder.dim=8\nlm.layers=2\nlm.d_model=16\nlm.heads=2\nlm.d_ff=32\nbridge.prefix_len=2\n"
              "train.lr=1e-3\ntrain.batch_size=8\ntrain.max_epochs=2\ntrain.patience=1\nlm.max_len=10\n"
              "vocab.min_count=2\n");
        testsupport::Gen g(1);
        const std::vector<std::string> cats = {"building", "tree", "road", "car", "river"};
        std::string polys, ids;
        for (int i = 0; i < 24; ++i) {
            const std::string id = "img" + std::to_string(100 + i);
            ids += id + "\n";
            for (int k = 0; k < 3; ++k) {
                const double x = g.uniform(0, 0.8), y = g.uniform(0, 0.8);
                json j = {{"image_id", id}, {"category", g.pick(cats)}, {"coords", {x, y, x + 0.1, y, x + 0.1, y + 0.1}}};
                polys += j.dump() + "\n";
            }
        }
        write(dir / "polygons.jsonl", polys);
        images = (dir / "images.txt").string();
        write(images, ids);
        auto p = dir.string();
        must({"corpus", "build-prompts", "--polygons", p + "/polygons.jsonl", "--out", p + "/p"});
        must({"corpus", "generate", "--config", cfg, "--prompts", p + "/p/prompts.jsonl", "--out", p + "/g"});
        must({"corpus", "extract-tags", "--config", cfg, "--captions", p + "/g/captions.jsonl", "--out", p + "/t"});
        tagged = p + "/t/captions_tagged.jsonl";
        must({"train", "caption", "--config", cfg, "--captions", tagged, "--out", p + "/m"});
        ckpt = p + "/m/model.ckpt";
    }

    static void must(const std::vector<std::string>& args) {
        auto r = run(args);
        if (r.code != 0) FAIL("command failed: " << testsupport::join(args) << "\n" << r.err);
    }

    static Workspace& get() {
        static Workspace w;
        return w;
    }
};

}  // namespace

TEST_SUITE("cli") {
    TEST_CASE("help and usage errors") {
        CHECK(run({"--help"}).code == 0);
        CHECK(run({}).code == 2);
        CHECK(run({"train"}).code == 2);
        CHECK(run({"infer", "--images", "x"}).code == 2);
        CHECK(run({"corpus", "filter-vocab", "--captions", "x", "--out", "/tmp/y", "--vocab.min_count", "abc"}).code == 2);
    }

    TEST_CASE("missing inputs are validation errors") {
        auto dir = testsupport::scratch_dir("cli_missing");
        auto r = run({"corpus", "extract-tags", "--captions", (dir / "nope.jsonl").string(), "--out", (dir / "o").string()});
        CHECK(r.code == 2);
        CHECK_FALSE(r.err.empty());
    }

    TEST_CASE("refine stage needs an initial checkpoint") {
        auto& w = Workspace::get();
        auto r = run({"train", "caption", "--config", w.cfg, "--captions", w.tagged, "--stage", "refine_real", "--out",
                      (w.dir / "refine_bad").string()});
        CHECK(r.code == 2);
    }

    TEST_CASE("unreachable provider exits with the transport code") {
        auto& w = Workspace::get();
        auto r = run({"corpus", "generate", "--prompts", (w.dir / "p/prompts.jsonl").string(), "--provider.kind", "http",
                      "--provider.url", "http://127.0.0.1:9/", "--provider.attempts", "1", "--provider.backoff", "0",
                      "--out", (w.dir / "g_fail").string()});
        CHECK(r.code == 3);
    }

    TEST_CASE("census mismatch is reported") {
        auto& w = Workspace::get();
        auto r = run({"infer", "--config", w.cfg, "--checkpoint", w.ckpt, "--images", w.images, "--lm.d_model", "32",
                      "--out", (w.dir / "inf_bad").string()});
        CHECK(r.code == 2);
        CHECK(r.err.find("census") != std::string::npos);
    }

    TEST_CASE("inference writes one row per image in order and is repeatable") {
        auto& w = Workspace::get();
        const auto a = w.dir / "inf_a", b = w.dir / "inf_b";
        REQUIRE(run({"infer", "--checkpoint", w.ckpt, "--images", w.images, "--out", a.string()}).code == 0);
        REQUIRE(run({"infer", "--checkpoint", w.ckpt, "--images", w.images, "--out", b.string()}).code == 0);
        const auto text = slurp(a / "captions.jsonl");
        CHECK(text == slurp(b / "captions.jsonl"));
        std::istringstream lines(text);
        std::string line;
        int i = 0;
        while (std::getline(lines, line)) {
            auto j = json::parse(line);
            CHECK(j.at("image_id") == "img" + std::to_string(100 + i));
            ++i;
        }
        CHECK(i == 24);
    }

    TEST_CASE("a high threshold leaves prompts without tags") {
        auto& w = Workspace::get();
        const auto o = w.dir / "inf_tau";
        auto r = run({"infer", "--checkpoint", w.ckpt, "--images", w.images, "--train.tau", "0.999", "--out", o.string()});
        REQUIRE(r.code == 0);
        CHECK(r.out.find("without tags: 24") != std::string::npos);
    }

    TEST_CASE("manifest records inputs, outputs and config") {
        auto& w = Workspace::get();
        auto m = json::parse(slurp(w.dir / "m/manifest.json"));
        CHECK(m.at("command") == "train caption");
        CHECK(m.at("config").at("lm.d_model") == "16");
        auto listed = [](const json& arr, const std::string& suffix) {
            for (const auto& f : arr) {
                const auto path = f.at("path").get<std::string>();
                if (path.size() >= suffix.size() && path.ends_with(suffix)) return f.at("git_hash").get<std::string>();
            }
            return std::string();
        };
        CHECK(listed(m.at("inputs"), "captions_tagged.jsonl").size() == 40);
        CHECK(listed(m.at("outputs"), "model.ckpt").size() == 40);
    }

    TEST_CASE("replay reproduces training and inference byte for byte") {
        auto& w = Workspace::get();
        auto r = run({"replay", "--manifest", (w.dir / "m/manifest.json").string(), "--out", (w.dir / "m_again").string()});
        CHECK(r.code == 0);
        CHECK(slurp(w.dir / "m/model.ckpt") == slurp(w.dir / "m_again/model.ckpt"));
        CHECK(slurp(w.dir / "m/train_log.csv") == slurp(w.dir / "m_again/train_log.csv"));
        REQUIRE(run({"infer", "--checkpoint", w.ckpt, "--images", w.images, "--out", (w.dir / "inf_r").string()}).code == 0);
        auto r2 = run({"replay", "--manifest", (w.dir / "inf_r/manifest.json").string(), "--out",
                       (w.dir / "inf_r2").string()});
        CHECK(r2.code == 0);
        CHECK(r2.out.find("identical") != std::string::npos);
    }

    TEST_CASE("replay detects a changed input") {
        auto& w = Workspace::get();
        const auto imgs = w.dir / "images_copy.txt";
        write(imgs, slurp(w.images));
        REQUIRE(run({"infer", "--checkpoint", w.ckpt, "--images", imgs.string(), "--out", (w.dir / "inf_c").string()}).code == 0);
        write(imgs, "img100\n");
        CHECK(run({"replay", "--manifest", (w.dir / "inf_c/manifest.json").string(), "--out", (w.dir / "inf_c2").string()})
                  .code != 0);
    }

    TEST_CASE("ablation of a model against itself has zero deltas") {
        auto& w = Workspace::get();
        auto r = run({"ablate", "--with", w.ckpt, "--without", w.ckpt, "--refs", w.tagged, "--out", (w.dir / "ab").string()});
        REQUIRE(r.code == 0);
        auto j = json::parse(slurp(w.dir / "ab/ablation.json"));
        REQUIRE(j.contains("delta"));
        for (auto& [k, v] : j.at("delta").items()) CHECK(v.get<double>() == 0.0);
        CHECK(run({"ablate", "--with", w.ckpt, "--refs", w.tagged, "--out", (w.dir / "ab2").string()}).code == 2);
    }

    TEST_CASE("caption evaluation of references against themselves") {
        auto& w = Workspace::get();
        auto r = run({"eval", "caption", "--pred", w.tagged, "--refs", w.tagged});
        REQUIRE(r.code == 0);
        auto j = json::parse(r.out);
        CHECK(j.at("bleu_4").get<double>() == doctest::Approx(1.0));
        CHECK(j.at("rouge_l").get<double>() == doctest::Approx(1.0));
    }

    TEST_CASE("tag evaluation writes metrics and predictions") {
        auto& w = Workspace::get();
        auto r = run({"eval", "tags", "--checkpoint", w.ckpt, "--captions", w.tagged, "--out", (w.dir / "et").string()});
        REQUIRE(r.code == 0);
        auto j = json::parse(slurp(w.dir / "et/tag_metrics.json"));
        CHECK(j.contains("map"));
        CHECK(fs::exists(w.dir / "et/tag_predictions.jsonl"));
    }
}
