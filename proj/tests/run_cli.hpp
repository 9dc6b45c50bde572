#pragma once

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "temp_dir.hpp"

struct CliResult {
    int status = -1;
    std::string out;
    std::string err;

    std::vector<std::string> err_lines() const {
        std::vector<std::string> lines;
        std::istringstream is(err);
        for (std::string l; std::getline(is, l);) lines.push_back(l);
        return lines;
    }
};

inline std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline std::string shell_quote(const std::string& s) {
    std::string q = "'";
    for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
    return q + "'";
}

// Runs the CLI binary with args; stdout and stderr are captured separately.
inline CliResult run_cli(const std::vector<std::string>& args) {
    TempDir io;
    std::string cmd = shell_quote(STGCN_CLI_PATH);
    for (const auto& a : args) cmd += ' ' + shell_quote(a);
    cmd += " >" + shell_quote(io.file("out")) + " 2>" + shell_quote(io.file("err"));
    const int raw = std::system(cmd.c_str());
    CliResult r;
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.out = slurp(io.file("out"));
    r.err = slurp(io.file("err"));
    return r;
}
