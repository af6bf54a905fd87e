#pragma once

// Scoring layer: deterministic mock scorers, an external evaluator bridge
// speaking newline-delimited JSON over a child process's stdio, and a
// content-addressed score cache.

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "capaudit/catalog.hpp"
#include "capaudit/error.hpp"
#include "capaudit/perturb.hpp"
#include "capaudit/rng.hpp"
#include "capaudit/stats.hpp"
#include "capaudit/util.hpp"

namespace capaudit::scorebridge {

// One scoring question. variant_key is the canonical chain key ("orig" for
// the unperturbed image) and caption_key names the caption variant; mocks
// read them, external scorers only see image bytes and caption text.
struct ScoreQuery {
  std::string item_id;
  std::string variant_key = "orig";
  std::string caption_key = "base";
  std::string caption;
  std::string image_path;
};

struct ScoreOutcome {
  std::optional<double> score;
  std::string error;  // set when score is empty
};

struct ScoreRecord {
  std::string item_id;
  std::string variant_key;
  std::string caption_key;
  std::string scorer_id;
  double score = 0.0;
  bool cached = false;

  json to_json() const {
    return {{"item_id", item_id}, {"variant_key", variant_key}, {"caption_key", caption_key},
            {"scorer_id", scorer_id}, {"score", score},         {"cached", cached}};
  }
  static ScoreRecord from_json(const json& j) {
    return {j.at("item_id"),   j.at("variant_key"), j.at("caption_key"),
            j.at("scorer_id"), j.at("score"),       j.value("cached", false)};
  }
};

struct Handshake {
  std::string scorer_id;
  double lo = 0.0, hi = 1.0;
  std::vector<std::string> capabilities;
  json metadata;  // anything else the scorer advertised (preprocessing etc.)

  bool can(std::string_view cap) const {
    return std::find(capabilities.begin(), capabilities.end(), cap) != capabilities.end();
  }

  static Handshake parse(const std::string& line) {
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ScorerUnavailable(std::string("handshake is not JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("scorer_id") || !j["scorer_id"].is_string() ||
        !j.contains("range") || !j["range"].is_array() || j["range"].size() != 2 ||
        !j.contains("capabilities") || !j["capabilities"].is_array())
      throw ScorerUnavailable("handshake lacks scorer_id/range/capabilities: " + line);
    Handshake h;
    h.scorer_id = j["scorer_id"];
    h.lo = j["range"][0].get<double>();
    h.hi = j["range"][1].get<double>();
    if (!(h.lo < h.hi)) throw ScorerUnavailable("handshake range is empty");
    h.capabilities = j["capabilities"].get<std::vector<std::string>>();
    h.metadata = j;
    for (const char* k : {"scorer_id", "range", "capabilities"}) h.metadata.erase(k);
    return h;
  }
};

class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual const Handshake& info() const = 0;
  const std::string& id() const { return info().scorer_id; }
  double range_width() const { return info().hi - info().lo; }

  virtual std::vector<ScoreOutcome> score(std::span<const ScoreQuery> queries) = 0;

  virtual std::vector<double> embed_text(const std::string& caption) {
    (void)caption;
    throw Unsupported("scorer '" + id() + "' does not provide text embeddings");
  }
};

// ---------------------------------------------------------------------------
// Mock scorers

// Planted shift for one perturbation family or caption modifier:
// absolute + relative * base_i * m_i, where m_i is the item's sensitivity
// multiplier.
struct PlantedShift {
  double absolute = 0.0;
  double relative = 0.0;
};

struct MockScorerSpec {
  std::string id = "mock";
  double base = 0.6;
  double base_spread = 0.4;     // base_i = base + base_spread * (q_i - 0.5)
  double quality_noise = 0.0;   // scorer-specific per-item deviation from q_i
  std::map<std::string, PlantedShift> planted;  // family name -> shift
  std::map<std::string, PlantedShift> framing;  // modifier word -> shift
  double heterogeneity = 0.0;   // m_i uniform on [1 - h, 1 + h]
  double compounding = 0.0;     // the k-th transform in a chain is scaled by 1 + c (k - 1)
  double noise_sd = 0.005;
  std::uint64_t seed = 2025;
  std::size_t embed_dim = 16;

  json to_json() const {
    auto shifts = [](const std::map<std::string, PlantedShift>& m) {
      json j = json::object();
      for (const auto& [k, v] : m) j[k] = {{"absolute", v.absolute}, {"relative", v.relative}};
      return j;
    };
    return {{"id", id},
            {"base", base},
            {"base_spread", base_spread},
            {"quality_noise", quality_noise},
            {"planted", shifts(planted)},
            {"framing", shifts(framing)},
            {"heterogeneity", heterogeneity},
            {"compounding", compounding},
            {"noise_sd", noise_sd},
            {"seed", seed},
            {"embed_dim", embed_dim}};
  }

  static MockScorerSpec from_json(const json& j) {
    MockScorerSpec s;
    auto shifts = [](const json& m) {
      std::map<std::string, PlantedShift> out;
      for (const auto& [k, v] : m.items())
        out[k] = {v.value("absolute", 0.0), v.value("relative", 0.0)};
      return out;
    };
    try {
      s.id = j.value("id", s.id);
      s.base = j.value("base", s.base);
      s.base_spread = j.value("base_spread", s.base_spread);
      s.quality_noise = j.value("quality_noise", s.quality_noise);
      if (j.contains("planted")) s.planted = shifts(j["planted"]);
      if (j.contains("framing")) s.framing = shifts(j["framing"]);
      s.heterogeneity = j.value("heterogeneity", s.heterogeneity);
      s.compounding = j.value("compounding", s.compounding);
      s.noise_sd = j.value("noise_sd", s.noise_sd);
      s.seed = j.value("seed", s.seed);
      s.embed_dim = j.value("embed_dim", s.embed_dim);
    } catch (const json::exception& e) {
      throw ConfigError("mock scorer spec: " + std::string(e.what()));
    }
    if (s.noise_sd < 0 || s.heterogeneity < 0 || s.heterogeneity > 1 || s.embed_dim < 2)
      throw ConfigError("mock scorer '" + s.id + "': invalid parameters");
    return s;
  }
};

// Latent item quality in [0, 1), shared by every mock so that audited and
// reference mocks agree up to their own noise.
inline double latent_quality(std::string_view item_id) {
  return Rng(derive_seed(0x9E3779B97F4A7C15ULL, "quality|" + std::string(item_id))).uniform();
}

inline std::string modifier_of(std::string_view caption_key) {
  constexpr std::string_view prefix = "modifier:";
  if (caption_key.substr(0, prefix.size()) != prefix) return {};
  return std::string(caption_key.substr(prefix.size()));
}

class MockScorer : public Scorer {
 public:
  explicit MockScorer(MockScorerSpec spec) : spec_(std::move(spec)) {
    info_.scorer_id = spec_.id;
    info_.lo = 0.0;
    info_.hi = 1.0;
    info_.capabilities = {"score", "embed_text"};
    info_.metadata = {{"kind", "mock"}, {"spec", spec_.to_json()}};
  }

  const Handshake& info() const override { return info_; }
  const MockScorerSpec& spec() const { return spec_; }

  double item_base(std::string_view item_id) const {
    double b = spec_.base + spec_.base_spread * (latent_quality(item_id) - 0.5);
    if (spec_.quality_noise > 0)
      b += spec_.quality_noise *
           Rng(derive_seed(spec_.seed, "quality|" + std::string(item_id))).truncated_normal(3.0);
    return b;
  }

  double item_multiplier(std::string_view item_id) const {
    if (spec_.heterogeneity == 0) return 1.0;
    const double u = Rng(derive_seed(spec_.seed, "sens|" + std::string(item_id))).uniform();
    return 1.0 + spec_.heterogeneity * (2.0 * u - 1.0);
  }

  // Noise-free score; exposed so tests can check the closed form.
  double expected(const ScoreQuery& q) const {
    const double b = item_base(q.item_id);
    const double m = item_multiplier(q.item_id);
    double shift = 0.0;
    const auto chain = perturb::parse_chain(q.variant_key);
    for (std::size_t k = 0; k < chain.size(); ++k) {
      const auto it = spec_.planted.find(perturb::family_name(chain[k].family));
      if (it == spec_.planted.end()) continue;
      const double step = it->second.absolute + it->second.relative * b * m;
      shift += step * (1.0 + spec_.compounding * static_cast<double>(k));
    }
    if (const std::string mod = modifier_of(q.caption_key); !mod.empty())
      if (const auto it = spec_.framing.find(mod); it != spec_.framing.end())
        shift += it->second.absolute + it->second.relative * b * m;
    return b + shift;
  }

  double score_one(const ScoreQuery& q) const {
    double s = expected(q);
    // Unperturbed (image, base caption) pairs are noise-free so every planted
    // shift is measured against an exact reference point.
    if (q.variant_key != "orig" || q.caption_key != "base") {
      Rng rng(derive_seed(spec_.seed, q.item_id + "|" + q.variant_key + "|" + q.caption));
      s += spec_.noise_sd * rng.truncated_normal(3.0);
    }
    return std::clamp(s, 0.0, 1.0);
  }

  std::vector<ScoreOutcome> score(std::span<const ScoreQuery> queries) override {
    std::vector<ScoreOutcome> out;
    out.reserve(queries.size());
    for (const auto& q : queries) out.push_back({score_one(q), {}});
    return out;
  }

  // Fixed synthetic table: axis 0 is the valence direction. Positive pole
  // words sit at +1 on it, negative ones at -1, framing modifiers at their
  // planted relative shift scaled by 10; every word also gets a small
  // hash-seeded component on the remaining axes.
  std::vector<double> embed_text(const std::string& caption) override {
    if (caption.find_first_not_of(" \t\n") == std::string::npos)
      throw Unsupported("embed_text: empty caption");
    std::vector<double> v(spec_.embed_dim, 0.0);
    Rng rng(derive_seed(0xE3BEDULL, "embed|" + caption));
    for (std::size_t i = 1; i < v.size(); ++i) v[i] = 0.1 * rng.normal();
    v[0] = valence_coordinate(caption);
    return v;
  }

  static void set_poles(std::vector<std::string> positive, std::vector<std::string> negative) {
    poles().first = std::move(positive);
    poles().second = std::move(negative);
  }

 private:
  static std::pair<std::vector<std::string>, std::vector<std::string>>& poles() {
    static std::pair<std::vector<std::string>, std::vector<std::string>> p{
        {"good", "great", "excellent", "beautiful", "wonderful", "pleasant", "nice", "superb"},
        {"bad", "poor", "terrible", "ugly", "awful", "unpleasant", "nasty", "horrible"}};
    return p;
  }

  double valence_coordinate(const std::string& word) const {
    const std::string w = catalog::lowercase(word);
    for (const auto& p : poles().first)
      if (catalog::lowercase(p) == w) return 1.0;
    for (const auto& p : poles().second)
      if (catalog::lowercase(p) == w) return -1.0;
    for (const auto& [mod, shift] : spec_.framing)
      if (catalog::lowercase(mod) == w) return 10.0 * shift.relative;
    return 0.0;
  }

  MockScorerSpec spec_;
  Handshake info_;
};

// Built-in catalogue. Planted magnitudes are realistic evaluator shifts:
// flips +6.9%, repositioning +8.4%, rotation +5.1% of the item base; the
// framing mock moves African -7%, American +1.2%, cheap +2%, expensive -6.2%.
inline std::map<std::string, MockScorerSpec> mock_catalogue() {
  std::map<std::string, MockScorerSpec> cat;

  MockScorerSpec inv;
  inv.id = "mock-invariant";
  inv.quality_noise = 0.03;
  inv.noise_sd = 0.0;  // planted zero: every variant scores exactly as its original
  cat[inv.id] = inv;

  MockScorerSpec sp = inv;
  sp.id = "mock-spatial";
  sp.planted = {{"vertical_flip", {0, 0.069}},
                {"horizontal_flip", {0, 0.069}},
                {"rotation", {0, 0.051}},
                {"reposition", {0, 0.084}}};
  sp.heterogeneity = 0.8;
  sp.noise_sd = 0.005;
  sp.compounding = 1.0;
  cat[sp.id] = sp;

  MockScorerSpec fr = inv;
  fr.id = "mock-framing";
  fr.framing = {{"African", {0, -0.07}},
                {"American", {0, 0.012}},
                {"cheap", {0, 0.02}},
                {"expensive", {0, -0.062}}};
  fr.heterogeneity = 0.5;
  fr.noise_sd = 0.005;
  cat[fr.id] = fr;

  // Reference scorers for the correlation constraint: same latent quality,
  // independent idiosyncratic noise, no planted sensitivity.
  MockScorerSpec ref_a = inv;
  ref_a.id = "mock-ref-a";
  ref_a.quality_noise = 0.05;
  ref_a.seed = 7001;
  cat[ref_a.id] = ref_a;
  MockScorerSpec ref_b = ref_a;
  ref_b.id = "mock-ref-b";
  ref_b.seed = 7002;
  cat[ref_b.id] = ref_b;
  return cat;
}

// ---------------------------------------------------------------------------
// External bridge

struct BridgeOptions {
  std::vector<std::string> command;  // argv; command[0] resolved via PATH
  std::size_t window = 32;
  double timeout_s = 60.0;
  int retries = 3;
  double handshake_timeout_s = 60.0;
};

class ExternalScorer : public Scorer {
 public:
  explicit ExternalScorer(BridgeOptions opt) : opt_(std::move(opt)) {
    if (opt_.command.empty()) throw ConfigError("external scorer: empty command");
    if (opt_.window == 0) throw ConfigError("external scorer: window must be positive");
    start();
  }
  ~ExternalScorer() override { stop(); }
  ExternalScorer(const ExternalScorer&) = delete;
  ExternalScorer& operator=(const ExternalScorer&) = delete;

  const Handshake& info() const override { return info_; }
  int restarts() const { return restarts_; }

  std::vector<ScoreOutcome> score(std::span<const ScoreQuery> queries) override {
    std::vector<json> requests;
    requests.reserve(queries.size());
    for (const auto& q : queries)
      requests.push_back({{"op", "score"}, {"image", q.image_path}, {"caption", q.caption}});
    const auto responses = exchange(requests);
    std::vector<ScoreOutcome> out(queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const auto& r = responses[i];
      if (!r) {
        out[i].error = "no response for " + queries[i].item_id;
        continue;
      }
      if (r->contains("error")) {
        out[i].error = r->at("error").dump();
        continue;
      }
      const auto it = r->find("score");
      if (it == r->end() || !it->is_number()) {
        out[i].error = "response without numeric score";
        continue;
      }
      const double s = it->get<double>();
      if (!std::isfinite(s) || s < info_.lo || s > info_.hi) {
        out[i].error = "score " + fmt(s) + " outside declared range";
        continue;
      }
      out[i].score = s;
    }
    return out;
  }

  std::vector<double> embed_text(const std::string& caption) override {
    if (!info_.can("embed_text"))
      throw Unsupported("scorer '" + id() + "' does not advertise embed_text");
    if (caption.empty()) throw Unsupported("embed_text: empty caption");
    const auto r = exchange({json{{"op", "embed_text"}, {"caption", caption}}}).front();
    if (!r || !r->contains("vector") || !(*r)["vector"].is_array())
      throw ScorerUnavailable("embed_text failed for '" + caption + "'");
    return (*r)["vector"].get<std::vector<double>>();
  }

 private:
  using Clock = std::chrono::steady_clock;

  struct Pending {
    std::size_t index;
    int attempts = 0;
    Clock::time_point deadline;
  };

  void start() {
    int to_child[2], from_child[2];
    if (pipe(to_child) != 0 || pipe(from_child) != 0) throw ScorerUnavailable("pipe() failed");
    pid_ = fork();
    if (pid_ < 0) throw ScorerUnavailable("fork() failed");
    if (pid_ == 0) {
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      close(to_child[0]);
      close(to_child[1]);
      close(from_child[0]);
      close(from_child[1]);
      std::vector<char*> argv;
      for (auto& a : opt_.command) argv.push_back(a.data());
      argv.push_back(nullptr);
      execvp(argv[0], argv.data());
      _exit(127);
    }
    close(to_child[0]);
    close(from_child[1]);
    in_fd_ = to_child[1];
    out_fd_ = from_child[0];
    fcntl(out_fd_, F_SETFL, fcntl(out_fd_, F_GETFL) | O_NONBLOCK);
    fcntl(in_fd_, F_SETFL, fcntl(in_fd_, F_GETFL) | O_NONBLOCK);
    read_buf_.clear();
    const auto deadline =
        Clock::now() + std::chrono::duration_cast<Clock::duration>(
                           std::chrono::duration<double>(opt_.handshake_timeout_s));
    std::string line;
    while (!next_line(line)) {
      if (!pump(deadline, false)) {
        stop();
        throw ScorerUnavailable("no handshake from '" + opt_.command[0] + "'");
      }
    }
    try {
      info_ = Handshake::parse(line);
    } catch (...) {
      stop();
      throw;
    }
    if (!info_.can("score")) {
      stop();
      throw ScorerUnavailable("scorer '" + info_.scorer_id + "' does not advertise score");
    }
  }

  void stop() {
    if (in_fd_ >= 0) close(in_fd_);
    if (out_fd_ >= 0) close(out_fd_);
    in_fd_ = out_fd_ = -1;
    if (pid_ > 0) {
      kill(pid_, SIGKILL);
      waitpid(pid_, nullptr, 0);
    }
    pid_ = -1;
    write_buf_.clear();
  }

  void restart() {
    stop();
    ++restarts_;
    start();
  }

  bool next_line(std::string& line) {
    const auto nl = read_buf_.find('\n');
    if (nl == std::string::npos) return false;
    line = read_buf_.substr(0, nl);
    read_buf_.erase(0, nl + 1);
    return true;
  }

  // Moves bytes in both directions until something was read, the deadline
  // passes (false) or the child closes its output (false).
  bool pump(Clock::time_point deadline, bool want_write) {
    while (true) {
      const auto now = Clock::now();
      if (now >= deadline) return false;
      pollfd fds[2] = {{out_fd_, POLLIN, 0}, {in_fd_, POLLOUT, 0}};
      const bool writing = want_write && !write_buf_.empty();
      const int ms = static_cast<int>(
          std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count() + 1);
      const int rc = poll(fds, writing ? 2 : 1, ms);
      if (rc < 0) {
        if (errno == EINTR) continue;
        return false;
      }
      if (writing && (fds[1].revents & POLLOUT)) {
        const ssize_t n = write(in_fd_, write_buf_.data(), write_buf_.size());
        if (n > 0) write_buf_.erase(0, static_cast<std::size_t>(n));
        else if (n < 0 && errno != EAGAIN) return false;
      }
      if (writing && (fds[1].revents & (POLLERR | POLLHUP))) return false;
      if (fds[0].revents & (POLLIN | POLLHUP | POLLERR)) {
        char buf[65536];
        const ssize_t n = read(out_fd_, buf, sizeof buf);
        if (n > 0) {
          read_buf_.append(buf, static_cast<std::size_t>(n));
          return true;
        }
        if (n == 0 || errno != EAGAIN) return false;
      }
    }
  }

  // Sends every request with at most `window` in flight; retries timed-out
  // or rejected requests, restarting the child when the stream breaks.
  std::vector<std::optional<json>> exchange(const std::vector<json>& requests) {
    std::vector<std::optional<json>> results(requests.size());
    std::deque<std::size_t> queue;
    std::vector<int> attempts(requests.size(), 0);
    for (std::size_t i = 0; i < requests.size(); ++i) queue.push_back(i);
    std::unordered_map<std::string, Pending> inflight;
    const auto timeout = std::chrono::duration_cast<Clock::duration>(
        std::chrono::duration<double>(opt_.timeout_s));

    auto requeue = [&](std::size_t idx) {
      if (++attempts[idx] <= opt_.retries) queue.push_front(idx);
    };
    auto requeue_all_inflight = [&] {
      std::vector<std::size_t> idx;
      for (const auto& [id, p] : inflight) idx.push_back(p.index);
      std::sort(idx.rbegin(), idx.rend());
      inflight.clear();
      for (auto i : idx) requeue(i);
    };

    while (!queue.empty() || !inflight.empty()) {
      while (!queue.empty() && inflight.size() < opt_.window) {
        const std::size_t idx = queue.front();
        queue.pop_front();
        const std::string rid = "r" + std::to_string(++next_id_);
        json req = requests[idx];
        req["id"] = rid;
        write_buf_ += req.dump() + "\n";
        inflight[rid] = {idx, attempts[idx], Clock::now() + timeout};
      }
      Clock::time_point earliest = Clock::time_point::max();
      for (const auto& [id, p] : inflight) earliest = std::min(earliest, p.deadline);

      const bool alive = pump(earliest, true);
      bool broken = false;
      std::string line;
      while (next_line(line)) {
        json resp;
        try {
          resp = json::parse(line);
        } catch (const json::parse_error&) {
          broken = true;
          continue;
        }
        if (!resp.is_object() || !resp.contains("id") || !resp["id"].is_string()) {
          broken = true;
          continue;
        }
        const auto it = inflight.find(resp["id"].get<std::string>());
        if (it == inflight.end()) continue;  // late answer to a retried request
        const std::size_t idx = it->second.index;
        inflight.erase(it);
        if (resp.contains("error")) {
          results[idx] = resp;
          requeue(idx);
        } else {
          results[idx] = std::move(resp);
        }
      }
      if (broken || (!alive && Clock::now() < earliest)) {
        // Protocol violation or the child died: start over with a fresh process.
        requeue_all_inflight();
        try {
          restart();
        } catch (const ScorerUnavailable&) {
          return results;
        }
        continue;
      }
      const auto now = Clock::now();
      std::vector<std::string> expired;
      for (const auto& [id, p] : inflight)
        if (p.deadline <= now) expired.push_back(id);
      std::sort(expired.begin(), expired.end());
      for (const auto& id : expired) {
        const std::size_t idx = inflight[id].index;
        inflight.erase(id);
        requeue(idx);
      }
    }
    return results;
  }

  BridgeOptions opt_;
  Handshake info_;
  pid_t pid_ = -1;
  int in_fd_ = -1, out_fd_ = -1;
  std::string read_buf_, write_buf_;
  std::uint64_t next_id_ = 0;
  int restarts_ = 0;
};

// ---------------------------------------------------------------------------
// Cache

inline std::string cache_key(std::string_view image_sha, std::string_view caption,
                             std::string_view scorer_id) {
  return Sha256().field(image_sha).field(caption).field(scorer_id).hex();
}

// Append-only JSONL ledger. Lookups compare the full key tuple, so a digest
// collision can never return another entry's score.
class ScoreCache {
 public:
  ScoreCache() = default;
  explicit ScoreCache(fs::path file) : file_(std::move(file)) {
    if (fs::exists(file_))
      for (const auto& j : read_jsonl(file_)) {
        Entry e{j.at("image_sha"), j.at("caption"), j.at("scorer_id"), j.at("score")};
        entries_[j.at("key").get<std::string>()] = std::move(e);
      }
  }

  std::optional<double> get(const std::string& image_sha, const std::string& caption,
                            const std::string& scorer_id) const {
    std::lock_guard lock(mu_);
    const auto it = entries_.find(cache_key(image_sha, caption, scorer_id));
    if (it == entries_.end()) return std::nullopt;
    const Entry& e = it->second;
    if (e.image_sha != image_sha || e.caption != caption || e.scorer_id != scorer_id)
      return std::nullopt;
    return e.score;
  }

  void put(const std::string& image_sha, const std::string& caption, const std::string& scorer_id,
           double score) {
    std::lock_guard lock(mu_);
    const std::string key = cache_key(image_sha, caption, scorer_id);
    if (entries_.count(key)) return;
    entries_[key] = {image_sha, caption, scorer_id, score};
    if (file_.empty()) return;
    if (!out_.is_open()) {
      if (file_.has_parent_path()) fs::create_directories(file_.parent_path());
      out_.open(file_, std::ios::app);
      if (!out_) throw IoError("cannot append to " + file_.string());
    }
    out_ << json{{"key", key}, {"image_sha", image_sha}, {"caption", caption},
                 {"scorer_id", scorer_id}, {"score", score}}.dump()
         << '\n';
    out_.flush();
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
  }

  // Test hook: plant an entry under an arbitrary digest.
  void inject_raw(const std::string& key, const std::string& image_sha, const std::string& caption,
                  const std::string& scorer_id, double score) {
    std::lock_guard lock(mu_);
    entries_[key] = {image_sha, caption, scorer_id, score};
  }

 private:
  struct Entry {
    std::string image_sha, caption, scorer_id;
    double score = 0.0;
  };
  fs::path file_;
  std::unordered_map<std::string, Entry> entries_;
  mutable std::mutex mu_;
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// Scoring service

struct ScoreResult {
  std::vector<ScoreRecord> records;
  struct Missing {
    std::string item_id, variant_key, caption_key, scorer_id, reason;
    json to_json() const {
      return {{"item_id", item_id}, {"variant_key", variant_key}, {"caption_key", caption_key},
              {"scorer_id", scorer_id}, {"reason", reason}};
    }
  };
  std::vector<Missing> missing;
};

class ScoreService {
 public:
  ScoreService(Scorer& scorer, ScoreCache& cache) : scorer_(scorer), cache_(cache) {}

  ScoreResult score(std::span<const ScoreQuery> queries) {
    ScoreResult out;
    std::vector<std::optional<ScoreRecord>> slots(queries.size());
    std::vector<std::string> shas(queries.size());
    std::vector<ScoreQuery> todo;
    std::vector<std::size_t> todo_idx;
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const auto& q = queries[i];
      try {
        shas[i] = image_sha(q.image_path);
      } catch (const IoError& e) {
        out.missing.push_back({q.item_id, q.variant_key, q.caption_key, scorer_.id(),
                               "ScorerUnavailable: unreadable image for item " + q.item_id});
        continue;
      }
      if (const auto hit = cache_.get(shas[i], q.caption, scorer_.id())) {
        slots[i] = ScoreRecord{q.item_id, q.variant_key, q.caption_key, scorer_.id(), *hit, true};
      } else {
        todo.push_back(q);
        todo_idx.push_back(i);
      }
    }
    if (!todo.empty()) {
      std::vector<ScoreOutcome> outcomes;
      try {
        outcomes = scorer_.score(todo);
      } catch (const ScorerUnavailable& e) {
        outcomes.assign(todo.size(), ScoreOutcome{std::nullopt, e.what()});
      }
      for (std::size_t k = 0; k < todo.size(); ++k) {
        const auto i = todo_idx[k];
        const auto& q = queries[i];
        if (!outcomes[k].score) {
          out.missing.push_back({q.item_id, q.variant_key, q.caption_key, scorer_.id(),
                                 "ScorerUnavailable: " + outcomes[k].error});
          continue;
        }
        cache_.put(shas[i], q.caption, scorer_.id(), *outcomes[k].score);
        slots[i] = ScoreRecord{q.item_id, q.variant_key, q.caption_key, scorer_.id(),
                               *outcomes[k].score, false};
      }
    }
    for (auto& s : slots)
      if (s) out.records.push_back(std::move(*s));
    return out;
  }

  // Single-query convenience; throws ScorerUnavailable instead of reporting.
  ScoreRecord score(const ScoreQuery& q) {
    auto r = score(std::span<const ScoreQuery>(&q, 1));
    if (r.records.empty()) throw ScorerUnavailable(r.missing.front().reason);
    return r.records.front();
  }

 private:
  std::string image_sha(const std::string& path) {
    if (const auto it = sha_memo_.find(path); it != sha_memo_.end()) return it->second;
    return sha_memo_[path] = sha256_file(path);
  }

  Scorer& scorer_;
  ScoreCache& cache_;
  std::unordered_map<std::string, std::string> sha_memo_;
};

// ---------------------------------------------------------------------------
// Valence analysis over text embeddings

struct ValenceResult {
  std::vector<std::string> modifiers;
  std::vector<double> projections;
  std::vector<double> shifts;
  double spearman_rho = 0.0;
};

inline std::vector<double> unit(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0)
    for (double& x : v) x /= n;
  return v;
}

inline ValenceResult valence_analysis(const std::map<std::string, double>& modifier_shifts,
                                      const std::map<std::string, std::vector<double>>& embeds,
                                      const std::vector<std::string>& pos_words,
                                      const std::vector<std::string>& neg_words) {
  if (modifier_shifts.size() < 3) throw InsufficientData("valence analysis needs >= 3 modifiers");
  if (pos_words.empty() || neg_words.empty())
    throw InsufficientData("valence analysis needs nonempty pole lists");
  auto embedding = [&](const std::string& w) {
    const auto it = embeds.find(w);
    if (it == embeds.end()) throw InputError("no embedding for '" + w + "'");
    return unit(it->second);
  };
  const std::size_t dim = embedding(pos_words.front()).size();
  auto pole_mean = [&](const std::vector<std::string>& words) {
    std::vector<double> m(dim, 0.0);
    for (const auto& w : words) {
      const auto e = embedding(w);
      if (e.size() != dim) throw InputError("embedding dimension mismatch for '" + w + "'");
      for (std::size_t i = 0; i < dim; ++i) m[i] += e[i] / static_cast<double>(words.size());
    }
    return m;
  };
  const auto p = pole_mean(pos_words), n = pole_mean(neg_words);
  std::vector<double> dir(dim);
  double norm = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    dir[i] = p[i] - n[i];
    norm += dir[i] * dir[i];
  }
  if (std::sqrt(norm) < 1e-9) throw DegenerateDirection("valence direction has zero norm");
  dir = unit(std::move(dir));

  ValenceResult r;
  for (const auto& [mod, shift] : modifier_shifts) {
    const auto e = embedding(mod);
    if (e.size() != dim) throw InputError("embedding dimension mismatch for '" + mod + "'");
    double s = 0.0;
    for (std::size_t i = 0; i < dim; ++i) s += e[i] * dir[i];
    r.modifiers.push_back(mod);
    r.projections.push_back(s);
    r.shifts.push_back(shift);
  }
  r.spearman_rho = stats::spearman(r.projections, r.shifts);
  return r;
}

}  // namespace capaudit::scorebridge
