#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace arl {

// Summarizes metrics.jsonl files: utilization, reward per published
// version, drop/pad counts and KV-reuse savings. With two files a
// utilization delta line is added. Returns 0 on success and 1 when a file
// cannot be read or a line is not a JSON object (reported with its line
// number on `err`).
int report(const std::vector<std::string>& paths, std::ostream& out, std::ostream& err);

}  // namespace arl
