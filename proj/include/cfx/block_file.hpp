#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cfx {

// Line-oriented "key = value" text grouped into [bracketed] sections.
// Used by the dictionary and rules files. '#' starts a comment line.
struct BlockEntry {
  std::string key;
  std::string value;
  int line = 0;
};

struct Block {
  std::string header;  // text between brackets; empty for the preamble
  int line = 0;
  std::vector<BlockEntry> entries;

  std::optional<std::string> Get(std::string_view key) const;
  std::string Require(std::string_view key, std::string_view context) const;
};

std::vector<Block> ParseBlocks(std::string_view text);
std::vector<Block> ParseBlockFile(const std::string& path);

std::string Trim(std::string_view s);
std::vector<std::string> SplitList(std::string_view s, char sep = ',');
std::string ReadFile(const std::string& path);

}  // namespace cfx
