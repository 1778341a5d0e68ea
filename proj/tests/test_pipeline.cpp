#include <filesystem>
#include <string>

#include <gtest/gtest.h>

#include "ibmd/pipeline.hpp"

using namespace ibmd;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
    const auto d = std::filesystem::temp_directory_path() / ("ibmd_pipeline_" + name);
    std::filesystem::remove_all(d);
    return d;
}

ExperimentConfig tiny(const std::string& name) {
    ExperimentConfig c = parse_config(R"({
      "seed": 11,
      "teacher": {"iterations": 200, "hidden": [16, 16]},
      "distill": {"K": 20, "L": 2, "batch_size": 64, "checkpoints": [0, 10, 20]},
      "eval": {"samples": 300, "teacher_steps": 20, "proxy_iterations": 50, "probe_points": 200,
               "kl_proxy_iterations": 20, "kl_samples": 2000}
    })");
    c.output_dir = scratch_dir(name).string();
    return c;
}

}  // namespace

TEST(Pipeline, ZeroRoundsKeepsInitCheckpointBytes) {
    ExperimentConfig c = tiny("k0");
    c.distill.K = 0;
    c.distill.checkpoints.clear();
    c.eval.proxy_iterations = 0;
    run_command(Command::Distill, c);
    const std::filesystem::path d = c.output_dir;
    EXPECT_EQ(read_text(d / "generator.ckpt"), read_text(d / "generator_init.ckpt"));
    EXPECT_EQ(read_text(d / "losses.csv"), "round,bridge_loss,generator_loss\n");
    std::filesystem::remove_all(d);
}

TEST(Pipeline, RerunReproducesMetricsBytes) {
    const ExperimentConfig a = tiny("det_a");
    ExperimentConfig b = tiny("det_b");
    const RunResult ra = run_command(Command::Distill, a);
    run_command(Command::Distill, b);
    EXPECT_EQ(read_text(std::filesystem::path(a.output_dir) / "metrics.json"),
              read_text(std::filesystem::path(b.output_dir) / "metrics.json"));
    EXPECT_EQ(ra.metrics["eval"]["path_kl"].size(), 3u);
    EXPECT_EQ(ra.metrics["distill"]["clean_draws"].get<long>(), 0);
    EXPECT_EQ(ra.metrics["eval"]["clean_draws"].get<long>(), 0);
    EXPECT_TRUE(ra.metrics["eval"].contains("drift_discrepancy"));
    for (const char* f : {"teacher.ckpt", "teacher.json", "generator_round_10.ckpt", "trajectories.csv", "report.txt",
                          "config.json", "teacher_losses.csv"})
        EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(a.output_dir) / f)) << f;
    std::filesystem::remove_all(a.output_dir);
    std::filesystem::remove_all(b.output_dir);
}

TEST(Pipeline, SeedChangesMetrics) {
    ExperimentConfig a = tiny("seed_a"), b = tiny("seed_b");
    a.output_dir = b.output_dir = "";
    b.seed = 12;
    a.distill.K = b.distill.K = 2;
    a.distill.checkpoints = b.distill.checkpoints = {};
    EXPECT_NE(run_command(Command::Distill, a).metrics.dump(), run_command(Command::Distill, b).metrics.dump());
}

TEST(Pipeline, NfeSweepReportsRowsAndTrend) {
    ExperimentConfig c = tiny("nfe");
    c.output_dir = "";
    c.coupling.kind = "masked";
    c.distill.steps = 4;
    c.distill.style = MultistepStyle::FullInference;
    c.distill.checkpoints.clear();
    c.eval.nfe = {4, 1, 2};
    c.eval.proxy_iterations = 0;
    const RunResult r = run_command(Command::Eval, c);
    const auto& rows = r.metrics["eval"]["rows"];
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0]["nfe"].get<int>(), 1);
    EXPECT_EQ(rows[2]["nfe"].get<int>(), 4);
    EXPECT_EQ(rows[2]["energy_distance_replicates"].size(), 3u);
    EXPECT_TRUE(r.metrics["eval"].contains("nfe_trend_non_increasing"));
}

TEST(Pipeline, IdentityOnTwoAtoms) {
    ExperimentConfig c = parse_config(R"({
      "coupling": {"kind": "finite_support",
                   "finite_support": {"atoms": [{"x0": [1, 0.5], "xT": [-1, 0], "weight": 0.4},
                                                {"x0": [-1, 1], "xT": [1, 0.5], "weight": 0.6}]}},
      "identity": {"n_mc": 100000}
    })");
    c.output_dir = "";
    const RunResult r = run_command(Command::VerifyIdentity, c);
    EXPECT_TRUE(r.passed);
    EXPECT_EQ(r.metrics["identity"]["exact_teacher"]["lhs"].get<double>(), 0.0);
}

TEST(Pipeline, IdentityRejectsCouplingsWithoutOracle) {
    ExperimentConfig c;
    c.output_dir = "";
    EXPECT_THROW(run_command(Command::VerifyIdentity, c), ConfigError);
}

TEST(Pipeline, MissingCheckpointIsAnIoError) {
    ExperimentConfig c = tiny("missing");
    c.output_dir = "";
    c.teacher.checkpoint = "/nonexistent/teacher.ckpt";
    EXPECT_THROW(run_command(Command::TrainTeacher, c), std::ios_base::failure);
}
