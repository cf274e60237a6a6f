#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "delia/model.hpp"
#include "delia/runio.hpp"
#include "delia/util.hpp"
#include "delia/vocab.hpp"
#include "doctest.h"

using namespace delia;
using namespace delia::runio;

namespace {

std::filesystem::path temp_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() / ("delia_runio_" + tag);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

model::ModelState tiny_model(vocab::Vocabulary& v, bool adapters) {
  v = vocab::build_vocab({"alpha beta gamma", "beta beta delta"},
                         {"<pad>", "<bos>", "<eos>", "<resp>"});
  model::TransformerConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.context_len = 32;
  cfg.vocab_size = v.size();
  auto m = model::ModelState::init(cfg, 11);
  vocab::InitStrategy init;
  init.kind = vocab::InitStrategy::Kind::RandomSeeded;
  init.seed = 12;
  m.add_special_row(v, "<sep>", init);
  if (adapters) m.enable_adapters(2, 4.0, 13);
  return m;
}

}  // namespace

TEST_CASE("kv config parses comments, blanks and embedded equals") {
  auto c = KvConfig::parse(
      "# experiment knobs\n"
      "\n"
      "alpha = 3\n"
      "note = a = b\n"
      "  ratio =  0.25 \n");
  CHECK(c.get_int("alpha") == 3);
  CHECK(c.get_string("note") == "a = b");
  CHECK(c.get_double("ratio") == 0.25);
  CHECK(c.has("ratio"));
  CHECK_FALSE(c.has("missing"));
  CHECK(c.get_int("missing", 7) == 7);
  CHECK(c.get_string("missing", "x") == "x");
  CHECK(c.get_bool("missing", true));
}

TEST_CASE("kv config rejects malformed documents") {
  CHECK_THROWS_WITH(KvConfig::parse("just words\n"), doctest::Contains("expected 'key = value'"));
  CHECK_THROWS_WITH(KvConfig::parse("a = 1\na = 2\n"), doctest::Contains("duplicate key"));
  CHECK_THROWS_WITH(KvConfig::parse("= 1\n"), doctest::Contains("empty key"));
  CHECK_THROWS_WITH(KvConfig::parse("two words = 1\n"), doctest::Contains("whitespace"));
  auto c = KvConfig::parse("n = 12x\nf = nope\nb = yes\n");
  CHECK_THROWS_WITH(c.get_int("n"), doctest::Contains("not an integer"));
  CHECK_THROWS_WITH(c.get_double("f"), doctest::Contains("not a number"));
  CHECK_THROWS_WITH(c.get_bool("b"), doctest::Contains("not a bool"));
  CHECK_THROWS_WITH(c.get_string("absent"), doctest::Contains("missing required key"));
}

TEST_CASE("kv config normalization is order independent and hashable") {
  auto a = KvConfig::parse("b = 2\na = 1\n");
  auto b = KvConfig::parse("# comment\na = 1\n\nb = 2\n");
  CHECK(a.normalized() == "a = 1\nb = 2\n");
  CHECK(a.normalized() == b.normalized());
  CHECK(a.hash() == b.hash());
  b.set("c", "3");
  CHECK(a.hash() != b.hash());
}

TEST_CASE("kv config rejects unknown keys by name") {
  auto c = KvConfig::parse("alpha = 1\nbeta = 2\n");
  c.require_known({"alpha", "beta", "gamma"});
  CHECK_THROWS_WITH(c.require_known({"alpha"}), doctest::Contains("unknown key: beta"));
}

TEST_CASE("csv escapes delimiters and round trips") {
  Csv csv({"id", "text", "value"});
  csv.add_row({"a", "plain", "1.5"});
  csv.add_row({"b", "comma, quote \" and\nnewline", "2"});
  CHECK(csv.rows() == 2);
  CHECK_THROWS_WITH(csv.add_row({"short"}), doctest::Contains("expected 3"));

  auto dir = temp_dir("csv");
  csv.write(dir / "t.csv");
  auto rows = read_csv(dir / "t.csv");
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == std::vector<std::string>{"id", "text", "value"});
  CHECK(rows[2][1] == "comma, quote \" and\nnewline");
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint round trips every parameter bit for bit") {
  vocab::Vocabulary v;
  auto m = tiny_model(v, true);
  auto dir = temp_dir("ckpt");
  auto path = dir / "model.ckpt";
  save_checkpoint(path, m, v.hash(), 0xabcdef12u);

  auto c = read_checkpoint(path);
  CHECK(c.vocab_hash == v.hash());
  CHECK(c.rng_state == 0xabcdef12u);
  CHECK(c.config.vocab_size == m.config().vocab_size);
  CHECK(c.adapters.size() == m.adapters().size());

  auto r = restore_model(c);
  auto want = m.named_parameters();
  auto got = r.named_parameters();
  REQUIRE(want.size() == got.size());
  for (size_t i = 0; i < want.size(); ++i) {
    CHECK(want[i].name == got[i].name);
    CHECK(want[i].tensor.value() == got[i].tensor.value());
  }
  CHECK(r.adapters().size() == m.adapters().size());
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint reader rejects corrupt files") {
  auto dir = temp_dir("ckpt_bad");
  write_file(dir / "not.ckpt", "BOGUSMAGICxxxxxxxxxxxxxxxxx");
  CHECK_THROWS_WITH(read_checkpoint(dir / "not.ckpt"), doctest::Contains("not a checkpoint"));

  vocab::Vocabulary v;
  auto m = tiny_model(v, false);
  auto path = dir / "model.ckpt";
  save_checkpoint(path, m, v.hash(), 0);
  auto raw = read_file(path);
  write_file(dir / "trunc.ckpt", raw.substr(0, raw.size() - 64));
  CHECK_THROWS_WITH(read_checkpoint(dir / "trunc.ckpt"), doctest::Contains("truncated"));
  write_file(dir / "pad.ckpt", raw + "extra");
  CHECK_THROWS_WITH(read_checkpoint(dir / "pad.ckpt"), doctest::Contains("trailing bytes"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("manifest verifies presence and content hashes") {
  auto dir = temp_dir("manifest");
  write_file(dir / "a.csv", "x,y\n1,2\n");
  std::filesystem::create_directories(dir / "sub");
  write_file(dir / "sub" / "b.txt", "payload");

  RunManifest man;
  man.add(dir, "table_a", "a.csv");
  man.add(dir, "blob_b", "sub/b.txt");
  CHECK_THROWS_WITH(man.add(dir, "table_a", "a.csv"), doctest::Contains("duplicate artifact"));
  man.write(dir);

  auto loaded = RunManifest::load(dir);
  REQUIRE(loaded.entries().size() == 2);
  CHECK(loaded.entry("blob_b").path == "sub/b.txt");
  CHECK_THROWS_WITH(loaded.entry("nope"), doctest::Contains("no artifact named"));
  loaded.verify(dir);

  write_file(dir / "a.csv", "x,y\n1,3\n");
  CHECK_THROWS_WITH(loaded.verify(dir), doctest::Contains("hash mismatch"));
  std::filesystem::remove(dir / "a.csv");
  CHECK_THROWS_WITH(loaded.verify(dir), doctest::Contains("missing artifact"));
  std::filesystem::remove_all(dir);
}
