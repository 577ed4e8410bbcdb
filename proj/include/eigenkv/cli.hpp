#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace eigenkv::cli {

// Runs one invocation: args holds the tokens after the program name, e.g.
// {"train", "--corpus", "data/sample_corpus.txt"}. Lives in the library so
// tests can drive full invocations in-process.
//
// Exit codes: 0 success, 2 configuration errors (bad flags, unreadable or
// malformed inputs, mismatched checkpoints), 3 numeric failures (training
// diverged, decomposition failed).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace eigenkv::cli
