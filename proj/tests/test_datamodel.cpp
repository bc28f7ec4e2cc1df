#include <doctest.h>

#include <fstream>

#include "support/temp_dir.hpp"
#include "viser/datamodel.hpp"

using namespace viser;

namespace {

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
    std::ofstream out(path);
    for (const auto& l : lines) out << l << '\n';
}

std::string record(const std::string& id, const std::string& label, const std::string& type,
                   const std::string& corpus = "corpus_a") {
    return "{\"sample_id\":\"" + id + "\",\"image_path\":\"img/" + id +
           ".pgm\",\"label\":\"" + label + "\",\"attack_type\":\"" + type +
           "\",\"source_corpus\":\"" + corpus + "\"}";
}

}  // namespace

TEST_CASE("attack type taxonomy is closed with seven attack tags") {
    CHECK(kAttackTags.size() == 7);
    CHECK(kAllTags.size() == 8);
    for (AttackType t : kAllTags) CHECK(parse_attack_type(to_string(t)) == t);
    CHECK_FALSE(parse_attack_type("hologram").has_value());
    CHECK_FALSE(parse_attack_type("Printout").has_value());
}

TEST_CASE("load_manifest parses well-formed records and builds the histogram") {
    test::TempDir tmp("manifest");
    const auto path = tmp.path() / "manifest.jsonl";
    write_lines(path, {
                          record("s1", "bonafide", "bonafide"),
                          record("s2", "attack", "printout"),
                          record("s3", "attack", "printout"),
                      });
    const auto manifest = load_manifest(path);
    REQUIRE(manifest.samples.size() == 3);
    const auto hist = manifest.histogram();
    CHECK(hist.at(AttackType::bonafide) == 1);
    CHECK(hist.at(AttackType::printout) == 2);
}

TEST_CASE("load_manifest rejects bad input") {
    test::TempDir tmp("manifest_bad");
    const auto path = tmp.path() / "manifest.jsonl";

    SUBCASE("empty file has no bonafide samples") {
        write_lines(path, {});
        CHECK_THROWS_WITH_AS(load_manifest(path), "no bonafide samples", ValidationError);
    }
    SUBCASE("unknown attack type names the closed tag set") {
        write_lines(path, {record("s1", "bonafide", "bonafide"),
                           record("s2", "attack", "hologram")});
        try {
            load_manifest(path);
            FAIL("expected ValidationError");
        } catch (const ValidationError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("hologram") != std::string::npos);
            CHECK(msg.find("textured_contact") != std::string::npos);
        }
    }
    SUBCASE("duplicate sample_id") {
        write_lines(path, {record("s1", "bonafide", "bonafide"),
                           record("s1", "attack", "printout")});
        CHECK_THROWS_AS(load_manifest(path), ValidationError);
    }
    SUBCASE("malformed line reports the line number") {
        write_lines(path, {record("s1", "bonafide", "bonafide"), "not json"});
        try {
            load_manifest(path);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("line 2") != std::string::npos);
        }
    }
    SUBCASE("label and attack_type must agree") {
        write_lines(path, {record("s1", "bonafide", "bonafide"),
                           record("s2", "bonafide", "printout")});
        CHECK_THROWS_AS(load_manifest(path), ValidationError);
    }
}

TEST_CASE("manifest round-trips through save and load") {
    test::TempDir tmp("manifest_rt");
    const auto path = tmp.path() / "manifest.jsonl";
    write_lines(path, {
                          record("s1", "bonafide", "bonafide", "corpus_a"),
                          record("s2", "attack", "post_mortem", "corpus_b"),
                          record("s3", "attack", "textured_contact", "corpus_a"),
                      });
    const auto manifest = load_manifest(path);
    const auto copy_path = tmp.path() / "copy.jsonl";
    save_manifest(manifest, copy_path);
    const auto reloaded = load_manifest(copy_path);
    REQUIRE(reloaded.samples.size() == manifest.samples.size());
    for (size_t i = 0; i < manifest.samples.size(); ++i) {
        CHECK(reloaded.samples[i].sample_id == manifest.samples[i].sample_id);
        CHECK(reloaded.samples[i].image_path == manifest.samples[i].image_path);
        CHECK(reloaded.samples[i].label == manifest.samples[i].label);
        CHECK(reloaded.samples[i].attack_type == manifest.samples[i].attack_type);
        CHECK(reloaded.samples[i].source_corpus == manifest.samples[i].source_corpus);
    }
}

TEST_CASE("manifest_summary counts conserve the sample total") {
    DatasetManifest manifest;
    manifest.samples = {
        {"s1", "p1", Label::bonafide, AttackType::bonafide, "a"},
        {"s2", "p2", Label::attack, AttackType::printout, "a"},
        {"s3", "p3", Label::attack, AttackType::printout, "b"},
        {"s4", "p4", Label::attack, AttackType::synthetic, "a"},
        {"s5", "p5", Label::bonafide, AttackType::bonafide, "a"},
    };
    const auto rows = manifest_summary(manifest);
    int total = 0;
    for (const auto& row : rows) total += row.count;
    CHECK(total == 5);

    SUBCASE("single sample gives one row") {
        DatasetManifest single;
        single.samples = {{"s1", "p1", Label::bonafide, AttackType::bonafide, "a"}};
        const auto one = manifest_summary(single);
        REQUIRE(one.size() == 1);
        CHECK(one.front().count == 1);
    }

    SUBCASE("all eight tags present gives at least eight rows") {
        DatasetManifest all;
        int i = 0;
        for (AttackType t : kAllTags) {
            all.samples.push_back({"s" + std::to_string(i++), "p",
                                   t == AttackType::bonafide ? Label::bonafide : Label::attack, t,
                                   "a"});
        }
        CHECK(manifest_summary(all).size() >= 8);
    }
}

TEST_CASE("histogram is conserved under manifest reordering") {
    DatasetManifest manifest;
    manifest.samples = {
        {"s1", "p1", Label::bonafide, AttackType::bonafide, "a"},
        {"s2", "p2", Label::attack, AttackType::printout, "a"},
        {"s3", "p3", Label::attack, AttackType::diseased, "b"},
        {"s4", "p4", Label::attack, AttackType::printout, "b"},
    };
    const auto before = manifest.histogram();
    std::reverse(manifest.samples.begin(), manifest.samples.end());
    CHECK(manifest.histogram() == before);
}
