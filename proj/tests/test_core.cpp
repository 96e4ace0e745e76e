#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dfb/io.hpp"
#include "dfb/rng.hpp"
#include "dfb/tensor.hpp"

using namespace dfb;
namespace fs = std::filesystem;

namespace {
fs::path tmpdir(const char* tag) {
    fs::path p = fs::temp_directory_path() / (std::string("dfb-core-") + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}
}  // namespace

TEST_CASE("tensor shape bookkeeping") {
    Tensor t({2, 3, 4});
    CHECK(t.rank() == 3);
    CHECK(t.numel() == 24);
    CHECK(t.dim(0) == 2);
    CHECK(t.dim(2) == 4);
    t.fill(1.5f);
    for (float v : t.flat()) CHECK(v == 1.5f);
    t.reshape({6, 4});
    CHECK(t.rank() == 2);
    CHECK(t.numel() == 24);
    CHECK_THROWS(t.reshape({5, 5}));
    CHECK(Tensor::zeros({3}).numel() == 3);
    Tensor f = Tensor::full({2, 2}, -2.0f);
    CHECK(f.flat()[3] == -2.0f);
}

TEST_CASE("tensor elementwise helpers") {
    Tensor t({4});
    t.flat()[0] = -3.0f;
    t.flat()[1] = 0.25f;
    t.flat()[2] = 2.0f;
    t.flat()[3] = -0.5f;
    CHECK(linf_norm(t) == doctest::Approx(3.0));

    Tensor c = t;
    clip_inplace(c, 0.0f, 1.0f);
    CHECK(c.flat()[0] == 0.0f);
    CHECK(c.flat()[1] == 0.25f);
    CHECK(c.flat()[2] == 1.0f);

    Tensor l = t;
    clip_linf_inplace(l, 0.5f);
    CHECK(l.flat()[0] == -0.5f);
    CHECK(l.flat()[1] == 0.25f);
    CHECK(l.flat()[2] == 0.5f);
    CHECK(l.flat()[3] == -0.5f);

    Tensor s = t;
    scale_inplace(s, 2.0f);
    CHECK(s.flat()[2] == 4.0f);

    Tensor a = Tensor::zeros({4});
    add_scaled_inplace(a, t, 0.5f);
    CHECK(a.flat()[0] == -1.5f);
    CHECK(max_abs_diff(a, Tensor::zeros({4})) == doctest::Approx(1.5));

    CHECK(all_finite(t));
    Tensor bad({1});
    bad.flat()[0] = std::numeric_limits<float>::infinity();
    CHECK(!all_finite(bad));
}

TEST_CASE("rng streams are seeded and fork by label") {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 16; ++i) {
        uint64_t va = a.next_u64(), vb = b.next_u64();
        CHECK(va == vb);
    }
    bool differs = false;
    Rng a2(42);
    for (int i = 0; i < 16; ++i)
        if (a2.next_u64() != c.next_u64()) differs = true;
    CHECK(differs);

    // Same parent state + same label -> the same stream; a different label
    // diverges.
    Rng f1 = Rng(7).fork("epoch0");
    Rng f2 = Rng(7).fork("epoch0");
    Rng f3 = Rng(7).fork("epoch1");
    CHECK(f1.next_u64() == f2.next_u64());
    CHECK(f1.next_u64() == f2.next_u64());
    Rng f1b = Rng(7).fork("epoch0");
    bool label_matters = false;
    for (int i = 0; i < 8; ++i)
        if (f1b.next_u64() != f3.next_u64()) label_matters = true;
    CHECK(label_matters);
}

TEST_CASE("rng sampling utilities") {
    Rng rng(5);
    auto picks = rng.sample_without_replacement(100, 20);
    CHECK(picks.size() == 20);
    std::set<int64_t> seen(picks.begin(), picks.end());
    CHECK(seen.size() == 20);
    for (int64_t p : picks) {
        CHECK(p >= 0);
        CHECK(p < 100);
    }
    Rng rng2(5);
    CHECK(rng2.sample_without_replacement(100, 20) == picks);

    auto all = Rng(9).sample_without_replacement(10, 10);
    std::set<int64_t> full(all.begin(), all.end());
    CHECK(full.size() == 10);

    std::vector<int> v{1, 2, 3, 4, 5, 6, 7, 8};
    auto w = v;
    Rng s1(3), s2(3);
    s1.shuffle(v);
    s2.shuffle(w);
    CHECK(v == w);

    Rng u(11);
    for (int i = 0; i < 100; ++i) {
        int64_t x = u.uniform_int(0, 4);
        CHECK(x >= 0);
        CHECK(x <= 4);
    }
}

TEST_CASE("sha256 known answers") {
    CHECK(sha256_hex(std::string{}) ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex(std::string{"abc"}) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    Tensor t({2});
    t.flat()[0] = 1.0f;
    t.flat()[1] = 2.0f;
    CHECK(sha256_hex(t) == sha256_hex(t.data(), sizeof(float) * 2));
}

TEST_CASE("tensor container round trip") {
    auto dir = tmpdir("tensor");
    Tensor t({2, 3});
    for (int i = 0; i < 6; ++i) t.flat()[static_cast<size_t>(i)] = 0.5f * float(i) - 1.0f;

    std::stringstream ss;
    write_tensor(ss, t);
    Tensor back = read_tensor(ss);
    CHECK(back.shape() == t.shape());
    for (int i = 0; i < 6; ++i)
        CHECK(back.flat()[static_cast<size_t>(i)] == t.flat()[static_cast<size_t>(i)]);

    save_tensor(dir / "t.dfbt", t);
    Tensor file = load_tensor(dir / "t.dfbt");
    CHECK(file.shape() == t.shape());
    CHECK(sha256_hex(file) == sha256_hex(t));

    // Same content twice -> identical bytes on disk.
    save_tensor(dir / "t2.dfbt", t);
    CHECK(sha256_file(dir / "t.dfbt") == sha256_file(dir / "t2.dfbt"));

    // A corrupted magic must be rejected.
    auto bytes = read_text_file(dir / "t.dfbt");
    bytes[0] = 'X';
    write_text_file(dir / "bad.dfbt", bytes);
    CHECK_THROWS(load_tensor(dir / "bad.dfbt"));
}

TEST_CASE("canonical json is order independent and idempotent") {
    json a;
    a["zeta"] = 1;
    a["alpha"] = json::array({1.5, true, nullptr});
    a["mid"] = json{{"y", 2}, {"x", 1}};
    json b;
    b["mid"] = json{{"x", 1}, {"y", 2}};
    b["alpha"] = json::array({1.5, true, nullptr});
    b["zeta"] = 1;
    CHECK(canonical_dump(a) == canonical_dump(b));
    CHECK(json_hash(a) == json_hash(b));
    CHECK(canonical_dump(a) == R"({"alpha":[1.5,true,null],"mid":{"x":1,"y":2},"zeta":1})");

    json re = json::parse(canonical_dump(a));
    CHECK(canonical_dump(re) == canonical_dump(a));

    json c = a;
    c["zeta"] = 2;
    CHECK(json_hash(c) != json_hash(a));
}

TEST_CASE("json file helpers") {
    auto dir = tmpdir("json");
    json j = {{"k", 1}, {"v", "s"}};
    save_json(dir / "x.json", j);
    CHECK(load_json_file(dir / "x.json") == j);
    CHECK_THROWS(load_json_file(dir / "missing.json"));
    write_text_file(dir / "broken.json", "{nope");
    CHECK_THROWS(load_json_file(dir / "broken.json"));
}
