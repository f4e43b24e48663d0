#pragma once

#include <istream>
#include <string>
#include <vector>

namespace cfx::csv {

// Splits one CSV record (RFC 4180 quoting, no embedded newlines).
std::vector<std::string> SplitRow(const std::string& line);

// Quotes a field when it contains a comma, quote, or leading/trailing space.
std::string Escape(const std::string& field);

std::string JoinRow(const std::vector<std::string>& fields);

}  // namespace cfx::csv
