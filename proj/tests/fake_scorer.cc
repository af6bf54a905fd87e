// Scripted evaluator process for bridge tests.
//
//   fake_scorer MODE [MARKER_FILE]
//
// normal        answer each request in order
// reverse       answer in batches of up to 8, last request first
// drop          ignore the first request seen for each caption
// garbage       first process (no marker yet) writes a non-JSON line
// crash         first process (no marker yet) exits on the first request
// error         every request gets an error response
// out_of_range  scores 1.5 against a [0,1] range
// bad_handshake handshake line is not JSON
// silent        never writes a handshake
// noembed       like normal but advertises score only

#include <poll.h>
#include <unistd.h>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

using json = nlohmann::json;

namespace {

std::uint64_t fnv(const std::string& s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

bool first_run(const std::string& marker) {
  if (marker.empty()) return false;
  if (std::ifstream(marker).good()) return false;
  std::ofstream(marker) << "seen\n";
  return true;
}

json answer(const json& req, const std::string& mode) {
  json resp = {{"id", req.value("id", "")}};
  if (mode == "error") {
    resp["error"] = "scripted failure";
    return resp;
  }
  const std::string op = req.value("op", "");
  if (op == "embed_text") {
    const auto h = fnv(req.value("caption", ""));
    resp["vector"] = {double(h % 97) / 97.0, double((h >> 8) % 89) / 89.0, 1.0};
    return resp;
  }
  if (op != "score") {
    resp["error"] = "unknown op";
    return resp;
  }
  std::ifstream img(req.value("image", ""), std::ios::binary);
  if (!img) {
    resp["error"] = "unreadable image";
    return resp;
  }
  std::stringstream bytes;
  bytes << img.rdbuf();
  const auto h = fnv(req.value("caption", ""), fnv(bytes.str()));
  resp["score"] = mode == "out_of_range" ? 1.5 : double(h % 100000) / 100000.0;
  return resp;
}

bool stdin_ready(int ms) {
  pollfd p{STDIN_FILENO, POLLIN, 0};
  return poll(&p, 1, ms) > 0;
}

}  // namespace

int main(int argc, char** argv) {
  const std::string mode = argc > 1 ? argv[1] : "normal";
  const std::string marker = argc > 2 ? argv[2] : "";
  std::ios::sync_with_stdio(false);

  if (mode == "silent") {
    std::this_thread::sleep_for(std::chrono::seconds(30));
    return 0;
  }
  if (mode == "bad_handshake") {
    std::cout << "hello there" << std::endl;
    std::this_thread::sleep_for(std::chrono::seconds(30));
    return 0;
  }
  json hs = {{"scorer_id", "fake-" + mode},
             {"range", {0, 1}},
             {"capabilities", mode == "noembed" ? json{"score"} : json{"score", "embed_text"}},
             {"resolution", 64}};
  std::cout << hs.dump() << std::endl;

  const bool misbehave = (mode == "garbage" || mode == "crash") && first_run(marker);
  std::set<std::string> seen;
  std::vector<json> batch;
  std::string line;

  auto flush_batch = [&] {
    std::reverse(batch.begin(), batch.end());
    for (const auto& r : batch) std::cout << answer(r, mode).dump() << '\n';
    std::cout.flush();
    batch.clear();
  };

  while (true) {
    if (mode == "reverse" && !batch.empty() && !stdin_ready(50)) flush_batch();
    if (!std::getline(std::cin, line)) break;
    if (line.empty()) continue;
    json req;
    try {
      req = json::parse(line);
    } catch (const json::parse_error&) {
      std::cout << json{{"id", nullptr}, {"error", "malformed request"}}.dump() << std::endl;
      continue;
    }
    if (misbehave) {
      if (mode == "crash") return 3;
      std::cout << "<<not json>>" << std::endl;
      continue;
    }
    if (mode == "drop" && seen.insert(req.value("caption", "")).second) continue;
    if (mode == "reverse") {
      batch.push_back(req);
      if (batch.size() == 8) flush_batch();
      continue;
    }
    std::cout << answer(req, mode).dump() << std::endl;
  }
  if (!batch.empty()) flush_batch();
  return 0;
}
