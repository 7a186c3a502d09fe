#pragma once

#include <string>
#include <vector>

namespace stx::cli {

// Entry point used by the binary and by tests. Subcommands: gen-data,
// pretrain-disc, train, transfer, eval, report. Returns 0 on success;
// failures print one machine-parsable line `error [CATEGORY] message` and
// map the category to an exit code (CONFIG=2, DATA=3, GATE=4, NUMERIC=5,
// IO=6).
int run(const std::vector<std::string>& args);

int exit_code_for(const std::string& category);

}  // namespace stx::cli
