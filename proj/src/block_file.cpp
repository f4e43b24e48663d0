#include "cfx/block_file.hpp"

#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "cfx/errors.hpp"

namespace cfx {

std::optional<std::string> Block::Get(std::string_view key) const {
  for (const auto& e : entries) {
    if (e.key == key) return e.value;
  }
  return std::nullopt;
}

std::string Block::Require(std::string_view key, std::string_view context) const {
  auto v = Get(key);
  if (!v) {
    throw ParseError(fmt::format("{} (line {}): missing key '{}'", context, line, key));
  }
  return *v;
}

std::string Trim(std::string_view s) {
  const auto* ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> SplitList(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(Trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  auto last = Trim(cur);
  if (!last.empty() || !out.empty()) out.push_back(last);
  return out;
}

std::vector<Block> ParseBlocks(std::string_view text) {
  std::vector<Block> blocks(1);
  std::istringstream in{std::string(text)};
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    auto line = Trim(raw);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ParseError(fmt::format("line {}: unterminated section header", lineno));
      }
      Block b;
      b.header = Trim(std::string_view(line).substr(1, line.size() - 2));
      b.line = lineno;
      blocks.push_back(std::move(b));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError(fmt::format("line {}: expected 'key = value'", lineno));
    }
    BlockEntry e{Trim(std::string_view(line).substr(0, eq)),
                 Trim(std::string_view(line).substr(eq + 1)), lineno};
    if (e.key.empty()) throw ParseError(fmt::format("line {}: empty key", lineno));
    blocks.back().entries.push_back(std::move(e));
  }
  return blocks;
}

std::string ReadFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(fmt::format("cannot open '{}'", path));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<Block> ParseBlockFile(const std::string& path) {
  try {
    return ParseBlocks(ReadFile(path));
  } catch (const ParseError& e) {
    throw ParseError(fmt::format("{}: {}", path, e.what()));
  }
}

}  // namespace cfx
