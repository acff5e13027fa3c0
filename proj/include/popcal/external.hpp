/*
 * Copyright (C) 2026 The popcal authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include "popcal/errors.hpp"
#include "popcal/models.hpp"

#include <csignal>
#include <cstdio>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

namespace popcal {

/// Child process speaking the line protocol: the host writes
/// "x_1 ... x_d phi_1 ... phi_k seed\n" and reads back one whitespace-separated
/// observation row, or the token FAIL.
class ChildProcess {
 public:
  explicit ChildProcess(std::vector<std::string> argv) : argv_(std::move(argv)) {
    if (argv_.empty()) throw ConfigError("external model command is empty");
  }
  ChildProcess(const ChildProcess&) = delete;
  ChildProcess& operator=(const ChildProcess&) = delete;
  ~ChildProcess() { stop(); }

  /// One request/response round trip. Returns an empty optional on protocol
  /// failure; the child is restarted on the next request.
  std::optional<std::string> request(const std::string& line) {
    std::lock_guard<std::mutex> lock(mutex_);
    if (pid_ <= 0) start();
    if (std::fputs(line.c_str(), to_child_) == EOF || std::fputc('\n', to_child_) == EOF ||
        std::fflush(to_child_) == EOF) {
      stop();
      return std::nullopt;
    }
    std::string reply;
    int c;
    while ((c = std::fgetc(from_child_)) != EOF && c != '\n') reply.push_back(static_cast<char>(c));
    if (c == EOF) {
      stop();
      return std::nullopt;
    }
    return reply;
  }

 private:
  void start() {
    int in_pipe[2], out_pipe[2];
    if (pipe(in_pipe) != 0 || pipe(out_pipe) != 0) throw std::runtime_error("external model: pipe failed");
    std::signal(SIGPIPE, SIG_IGN);
    pid_ = fork();
    if (pid_ < 0) throw std::runtime_error("external model: fork failed");
    if (pid_ == 0) {
      dup2(in_pipe[0], STDIN_FILENO);
      dup2(out_pipe[1], STDOUT_FILENO);
      close(in_pipe[0]);
      close(in_pipe[1]);
      close(out_pipe[0]);
      close(out_pipe[1]);
      std::vector<char*> args;
      for (auto& a : argv_) args.push_back(a.data());
      args.push_back(nullptr);
      execvp(args[0], args.data());
      _exit(127);
    }
    close(in_pipe[0]);
    close(out_pipe[1]);
    to_child_ = fdopen(in_pipe[1], "w");
    from_child_ = fdopen(out_pipe[0], "r");
  }

  void stop() {
    if (to_child_) std::fclose(to_child_);
    if (from_child_) std::fclose(from_child_);
    to_child_ = from_child_ = nullptr;
    if (pid_ > 0) {
      int status = 0;
      if (waitpid(pid_, &status, WNOHANG) == 0) {
        kill(pid_, SIGTERM);
        waitpid(pid_, &status, 0);
      }
    }
    pid_ = -1;
  }

  std::vector<std::string> argv_;
  std::mutex mutex_;
  pid_t pid_ = -1;
  FILE* to_child_ = nullptr;
  FILE* from_child_ = nullptr;
};

/// Hook backed by an executable. Each call draws the seed it sends from the
/// caller's stream, so results do not depend on call order across threads.
inline ModelHook executable_hook(std::vector<std::string> argv, std::size_t columns) {
  auto child = std::make_shared<ChildProcess>(std::move(argv));
  return [child, columns](std::span<const double> x, std::span<const double> phi,
                          Stream& stream) -> std::optional<std::vector<double>> {
    std::ostringstream line;
    line.precision(17);
    for (double v : x) line << v << ' ';
    for (double v : phi) line << v << ' ';
    line << stream();
    const auto reply = child->request(line.str());
    if (!reply) return std::nullopt;
    std::istringstream in(*reply);
    std::vector<double> row;
    std::string token;
    while (in >> token) {
      if (token == "FAIL") return std::nullopt;
      try {
        std::size_t used = 0;
        row.push_back(std::stod(token, &used));
        if (used != token.size()) return std::nullopt;
      } catch (const std::exception&) {
        return std::nullopt;
      }
    }
    if (row.size() != columns) return std::nullopt;
    return row;
  };
}

inline std::shared_ptr<const SimulationModel> register_external_model(std::vector<std::string> argv,
                                                                      std::vector<std::string> columns,
                                                                      std::size_t parameter_dim,
                                                                      std::vector<std::string> nuisance = {}) {
  auto hook = executable_hook(std::move(argv), columns.size());
  return std::make_shared<HookModel>(std::move(hook), std::move(columns), parameter_dim, std::move(nuisance),
                                     "external_process");
}

}  // namespace popcal
