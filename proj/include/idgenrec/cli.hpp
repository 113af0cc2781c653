#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "idgenrec/allocator.hpp"
#include "idgenrec/error.hpp"
#include "idgenrec/model.hpp"
#include "idgenrec/training.hpp"

namespace idgenrec {

enum ExitCode : int {
    kExitOk = 0,
    kExitInput = 2,
    kExitState = 3,
    kExitInternal = 4,
};

int exit_code_for(ErrorKind kind);

/// Settings read from a `--config` JSON file with optional "model", "train"
/// and "allocator" sections. Unknown keys are rejected.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    AllocatorConfig alloc;
};

RunConfig load_run_config(const std::filesystem::path& path);

/// Entry point behind the `idgenrec` binary. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace idgenrec
