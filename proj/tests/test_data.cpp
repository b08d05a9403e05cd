#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dozer/data.hpp"

using namespace dozer;

namespace {

std::string temp_csv(const std::string& stem, const std::string& content) {
    const std::string path = (std::filesystem::temp_directory_path() / stem).string();
    std::ofstream out(path);
    out << content;
    return path;
}

}  // namespace

TEST_CASE("csv loading parses rows, columns and timestamps") {
    const std::string path = temp_csv("dozer_data_ok.csv",
                                      "date,alpha,beta\n"
                                      "2020-01-01 00:00:00,1.5,-2\n"
                                      "2020-01-01 01:00:00,2.5,0.125\n"
                                      "2020-01-01 02:00:00,3,4e2\n");
    Series s = load_csv(path);
    std::filesystem::remove(path);
    REQUIRE(s.T == 3);
    REQUIRE(s.D == 2);
    REQUIRE(s.at(0, 0) == 1.5);
    REQUIRE(s.at(0, 1) == -2.0);
    REQUIRE(s.at(1, 1) == 0.125);
    REQUIRE(s.at(2, 1) == 400.0);
    REQUIRE(s.timestamps.size() == 3);
    REQUIRE(s.timestamps[2] == "2020-01-01 02:00:00");
}

TEST_CASE("csv loading infers the variable count from the header") {
    std::string content = "date,a,b,c,d,e,f,g\n";
    content += "t0,1,2,3,4,5,6,7\n";
    const std::string path = temp_csv("dozer_data_wide.csv", content);
    Series s = load_csv(path);
    std::filesystem::remove(path);
    REQUIRE(s.D == 7);
    REQUIRE(s.T == 1);
    REQUIRE(s.at(0, 6) == 7.0);
}

TEST_CASE("csv errors name the offending row and column") {
    SECTION("unparsable field") {
        const std::string path = temp_csv("dozer_data_bad.csv",
                                          "date,a,b\nt0,1,2\nt1,abc,3\n");
        REQUIRE_THROWS_MATCHES(load_csv(path), DataError,
                               Catch::Matchers::MessageMatches(
                                   Catch::Matchers::ContainsSubstring("row 3") &&
                                   Catch::Matchers::ContainsSubstring("column 2") &&
                                   Catch::Matchers::ContainsSubstring("abc")));
        std::filesystem::remove(path);
    }
    SECTION("non-finite value") {
        const std::string path = temp_csv("dozer_data_inf.csv", "date,a\nt0,inf\n");
        REQUIRE_THROWS_MATCHES(load_csv(path), DataError,
                               Catch::Matchers::MessageMatches(
                                   Catch::Matchers::ContainsSubstring("non-finite")));
        std::filesystem::remove(path);
    }
    SECTION("ragged row") {
        const std::string path = temp_csv("dozer_data_ragged.csv",
                                          "date,a,b\nt0,1,2\nt1,5\n");
        REQUIRE_THROWS_MATCHES(load_csv(path), DataError,
                               Catch::Matchers::MessageMatches(
                                   Catch::Matchers::ContainsSubstring("row 3") &&
                                   Catch::Matchers::ContainsSubstring("expected 3")));
        std::filesystem::remove(path);
    }
    SECTION("structural failures") {
        REQUIRE_THROWS_AS(load_csv("/nonexistent/dozer.csv"), DataError);
        const std::string empty = temp_csv("dozer_data_empty.csv", "");
        REQUIRE_THROWS_AS(load_csv(empty), DataError);
        std::filesystem::remove(empty);
        const std::string no_vals = temp_csv("dozer_data_novals.csv", "date\nt0\n");
        REQUIRE_THROWS_AS(load_csv(no_vals), DataError);
        std::filesystem::remove(no_vals);
        const std::string no_rows = temp_csv("dozer_data_norows.csv", "date,a\n");
        REQUIRE_THROWS_AS(load_csv(no_rows), DataError);
        std::filesystem::remove(no_rows);
    }
}

TEST_CASE("csv save and load round-trip") {
    Series s = synth_series(20, 3, 8.0, 0.05, 0.2, 99);
    const std::string path =
        (std::filesystem::temp_directory_path() / "dozer_data_roundtrip.csv").string();
    save_csv(s, path);
    Series back = load_csv(path);
    std::filesystem::remove(path);
    REQUIRE(back.T == s.T);
    REQUIRE(back.D == s.D);
    REQUIRE(back.timestamps == s.timestamps);
    for (int t = 0; t < s.T; ++t)
        for (int d = 0; d < s.D; ++d)
            REQUIRE_THAT(back.at(t, d), Catch::Matchers::WithinRel(s.at(t, d), 1e-11));
}

TEST_CASE("synthetic series is a drifting sinusoid") {
    Series s = synth_series(100, 1, 24.0, 0.0, 0.0, 1);
    SECTION("noiseless samples match the closed form") {
        for (int t = 0; t < 100; ++t)
            REQUIRE_THAT(s.at(t, 0),
                         Catch::Matchers::WithinAbs(
                             std::sin(2.0 * M_PI * t / 24.0), 1e-12));
    }
    SECTION("one full period repeats exactly up to the drift") {
        Series d = synth_series(100, 1, 24.0, 0.1, 0.0, 1);
        for (int t = 0; t + 24 < 100; ++t)
            REQUIRE_THAT(d.at(t + 24, 0) - d.at(t, 0),
                         Catch::Matchers::WithinAbs(0.1 * 24.0, 1e-9));
    }
}

TEST_CASE("synthetic variables are phase shifted") {
    Series s = synth_series(1, 4, 24.0, 0.0, 0.0, 1);
    REQUIRE_THAT(s.at(0, 0), Catch::Matchers::WithinAbs(0.0, 1e-12));   // sin(0)
    REQUIRE_THAT(s.at(0, 1), Catch::Matchers::WithinAbs(1.0, 1e-12));   // sin(pi/2)
    REQUIRE_THAT(s.at(0, 2), Catch::Matchers::WithinAbs(0.0, 1e-12));   // sin(pi)
    REQUIRE_THAT(s.at(0, 3), Catch::Matchers::WithinAbs(-1.0, 1e-12));  // sin(3pi/2)
}

TEST_CASE("synthetic series is deterministic in the seed") {
    Series a = synth_series(50, 2, 12.0, 0.01, 0.5, 7);
    Series b = synth_series(50, 2, 12.0, 0.01, 0.5, 7);
    Series c = synth_series(50, 2, 12.0, 0.01, 0.5, 8);
    REQUIRE(a.values == b.values);
    REQUIRE(a.values != c.values);
    REQUIRE(a.timestamps == b.timestamps);
}

TEST_CASE("synthetic series timestamps are hourly from 2020") {
    Series s = synth_series(3, 1, 24.0, 0.0, 0.0, 1);
    REQUIRE(s.timestamps[0] == "2020-01-01 00:00:00");
    REQUIRE(s.timestamps[1] == "2020-01-01 01:00:00");
    REQUIRE(s.timestamps[2] == "2020-01-01 02:00:00");
}

TEST_CASE("synthetic series validates its arguments") {
    REQUIRE_THROWS_AS(synth_series(0, 1, 24.0, 0.0, 0.0, 1), ConfigError);
    REQUIRE_THROWS_AS(synth_series(10, 0, 24.0, 0.0, 0.0, 1), ConfigError);
    REQUIRE_THROWS_MATCHES(synth_series(10, 1, 1.5, 0.0, 0.0, 1), ConfigError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("period")));
    REQUIRE_THROWS_AS(synth_series(10, 1, 24.0, 0.0, -0.1, 1), ConfigError);
}

TEST_CASE("split sizes are floored with the remainder going to test") {
    Series s = synth_series(10, 1, 4.0, 0.0, 0.1, 3);
    Splits sp = split_and_standardize(s, 0.7, 0.1);
    REQUIRE(sp.train.T == 7);
    REQUIRE(sp.val.T == 1);
    REQUIRE(sp.test.T == 2);

    SECTION("splits are chronological and disjoint") {
        Series raw = s;
        sp.scaler.inverse(sp.train);
        sp.scaler.inverse(sp.val);
        sp.scaler.inverse(sp.test);
        for (int t = 0; t < 7; ++t)
            REQUIRE_THAT(sp.train.at(t, 0), Catch::Matchers::WithinAbs(raw.at(t, 0), 1e-12));
        REQUIRE_THAT(sp.val.at(0, 0), Catch::Matchers::WithinAbs(raw.at(7, 0), 1e-12));
        REQUIRE_THAT(sp.test.at(1, 0), Catch::Matchers::WithinAbs(raw.at(9, 0), 1e-12));
    }
}

TEST_CASE("split validation") {
    Series s = synth_series(10, 1, 4.0, 0.0, 0.1, 3);
    REQUIRE_THROWS_AS(split_and_standardize(s, 0.0, 0.1), ConfigError);
    REQUIRE_THROWS_AS(split_and_standardize(s, 0.9, 0.1), ConfigError);
    Series tiny = synth_series(3, 1, 4.0, 0.0, 0.1, 3);
    REQUIRE_THROWS_MATCHES(split_and_standardize(tiny, 0.7, 0.1), DataError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("empty split")));
}

TEST_CASE("training rows are standardized to zero mean and unit variance") {
    Series s = synth_series(500, 3, 24.0, 0.02, 0.3, 11);
    Splits sp = split_and_standardize(s);
    for (int d = 0; d < 3; ++d) {
        double m = 0.0;
        for (int t = 0; t < sp.train.T; ++t) m += sp.train.at(t, d);
        m /= sp.train.T;
        double var = 0.0;
        for (int t = 0; t < sp.train.T; ++t) {
            const double x = sp.train.at(t, d) - m;
            var += x * x;
        }
        var /= sp.train.T;
        REQUIRE_THAT(m, Catch::Matchers::WithinAbs(0.0, 1e-9));
        REQUIRE_THAT(var, Catch::Matchers::WithinAbs(1.0, 1e-9));
    }
}

TEST_CASE("standardization statistics come from the training rows only") {
    // A jump in the test region must not affect the transform: the train
    // rows decide the mean, so the standardized train head stays put.
    Series s;
    s.T = 10;
    s.D = 1;
    s.values = {1, 1, 1, 1, 1, 1, 1, 100, 100, 100};
    Splits sp = split_and_standardize(s, 0.7, 0.1);
    REQUIRE(sp.scaler.mean[0] == 1.0);
    // Train is constant, so the variable is flagged degenerate and the
    // stdev floor keeps the transform invertible.
    REQUIRE(sp.scaler.degenerate == std::vector<int>{0});
    REQUIRE(sp.scaler.stdev[0] == Scaler::kMinStdev);
    for (int t = 0; t < sp.train.T; ++t) REQUIRE(sp.train.at(t, 0) == 0.0);
    REQUIRE(sp.test.at(0, 0) > 0.0);
}

TEST_CASE("scaler transform and inverse are mutual inverses") {
    Series s = synth_series(50, 2, 12.0, 0.05, 0.4, 13);
    Scaler sc = Scaler::fit(s);
    REQUIRE(sc.degenerate.empty());
    Series copy = s;
    sc.transform(copy);
    sc.inverse(copy);
    for (int t = 0; t < s.T; ++t)
        for (int d = 0; d < s.D; ++d)
            REQUIRE_THAT(copy.at(t, d), Catch::Matchers::WithinAbs(s.at(t, d), 1e-12));

    Series wrong;
    wrong.T = 1;
    wrong.D = 3;
    wrong.values = {1, 2, 3};
    REQUIRE_THROWS_AS(sc.transform(wrong), DataError);
    REQUIRE_THROWS_AS(sc.inverse(wrong), DataError);
}

TEST_CASE("window sampling covers the split exactly") {
    Series s;
    s.T = 10;
    s.D = 1;
    s.values = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::vector<Window> w = sample_windows(s, 4, 2);
    REQUIRE(w.size() == 5);
    REQUIRE(w[0].origin == 0);
    REQUIRE(w[0].input == std::vector<double>{0, 1, 2, 3});
    REQUIRE(w[0].target == std::vector<double>{4, 5});
    REQUIRE(w[4].origin == 4);
    REQUIRE(w[4].input == std::vector<double>{4, 5, 6, 7});
    REQUIRE(w[4].target == std::vector<double>{8, 9});  // ends at the last row

    SECTION("stride skips origins") {
        std::vector<Window> strided = sample_windows(s, 4, 2, 2);
        REQUIRE(strided.size() == 3);
        REQUIRE(strided[2].origin == 4);
    }
    SECTION("exactly one window fits") {
        REQUIRE(sample_windows(s.rows(0, 6), 4, 2).size() == 1);
    }
    SECTION("too-short split yields no windows") {
        REQUIRE(sample_windows(s.rows(0, 5), 4, 2).empty());
    }
    SECTION("argument validation") {
        REQUIRE_THROWS_AS(sample_windows(s, 0, 2), ConfigError);
        REQUIRE_THROWS_AS(sample_windows(s, 4, 0), ConfigError);
        REQUIRE_THROWS_AS(sample_windows(s, 4, 2, 0), ConfigError);
    }
}

TEST_CASE("windows keep variables interleaved row-major") {
    Series s;
    s.T = 4;
    s.D = 2;
    s.values = {0, 10, 1, 11, 2, 12, 3, 13};
    std::vector<Window> w = sample_windows(s, 2, 1);
    REQUIRE(w.size() == 2);
    REQUIRE(w[1].input == std::vector<double>{1, 11, 2, 12});
    REQUIRE(w[1].target == std::vector<double>{3, 13});
}

TEST_CASE("one-step naive denominator matches hand results") {
    Series s;
    s.T = 3;
    s.D = 1;
    s.values = {1, 2, 4};
    REQUIRE_THAT(naive_abs_diff_mean(s), Catch::Matchers::WithinAbs(1.5, 1e-15));

    Series two;
    two.T = 3;
    two.D = 2;
    two.values = {0, 0, 1, 2, 3, 6};  // per-step diffs: (1,2) then (2,4)
    REQUIRE_THAT(naive_abs_diff_mean(two), Catch::Matchers::WithinAbs(2.25, 1e-15));

    Series one;
    one.T = 1;
    one.D = 1;
    one.values = {5};
    REQUIRE_THROWS_AS(naive_abs_diff_mean(one), DataError);
}
