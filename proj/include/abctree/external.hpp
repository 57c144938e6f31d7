#pragma once

// Simulator backed by a child process speaking line-delimited JSON on its
// stdin/stdout:
//   child  -> {"protocol":1,"dim_theta":d,"dim_summary":m}     (once, at start)
//   parent -> {"id":n,"theta":[...],"seed":u64}
//   child  -> {"id":n,"summary":[...]}
// One object per line, LF terminated. Null summary entries read as NaN.

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "abctree/errors.hpp"
#include "abctree/models.hpp"
#include "abctree/random.hpp"

namespace abctree {

inline constexpr int kProtocolVersion = 1;

class ExternalSimulator final : public Simulator {
public:
    using Clock = std::chrono::steady_clock;

    /// Launch `argv` (argv[0] looked up on PATH) and read the handshake.
    explicit ExternalSimulator(std::vector<std::string> argv,
                               std::chrono::milliseconds timeout = std::chrono::seconds(30))
        : argv_(std::move(argv)), timeout_(timeout) {
        if (argv_.empty()) throw ProcessError("external simulator: empty command");
        spawn();
        const auto line = read_line("handshake");
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception&) {
            throw ProtocolError("external simulator: malformed handshake: " + line);
        }
        if (!j.is_object() || !j.contains("protocol") || !j["protocol"].is_number_integer() ||
            j["protocol"].get<int>() != kProtocolVersion || !j.contains("dim_theta") ||
            !j["dim_theta"].is_number_unsigned() || !j.contains("dim_summary") ||
            !j["dim_summary"].is_number_unsigned()) {
            throw ProtocolError("external simulator: bad handshake: " + line);
        }
        dim_theta_ = j["dim_theta"].get<std::size_t>();
        dim_summary_ = j["dim_summary"].get<std::size_t>();
        if (dim_theta_ == 0 || dim_summary_ == 0) throw ProtocolError("external simulator: zero dimension in handshake: " + line);
    }

    /// Run `command` through /bin/sh -c.
    static std::shared_ptr<ExternalSimulator> shell(const std::string& command,
                                                    std::chrono::milliseconds timeout = std::chrono::seconds(30)) {
        return std::make_shared<ExternalSimulator>(std::vector<std::string>{"/bin/sh", "-c", "exec " + command}, timeout);
    }

    ExternalSimulator(const ExternalSimulator&) = delete;
    ExternalSimulator& operator=(const ExternalSimulator&) = delete;

    ~ExternalSimulator() override { shutdown(); }

    std::string name() const override { return "external"; }
    std::size_t dim_theta() const override { return dim_theta_; }
    std::size_t dim_summary() const override { return dim_summary_; }
    std::uint64_t calls() const noexcept { return next_id_; }

    /// One request with a seed drawn from `rng`.
    std::vector<double> simulate(std::span<const double> theta, Rng& rng) override {
        return call(theta, rng());
    }

    std::vector<double> call(std::span<const double> theta, std::uint64_t seed) {
        if (theta.size() != dim_theta_) throw ShapeError("external simulator: theta length mismatch");
        const std::uint64_t id = next_id_++;
        nlohmann::json req;
        req["id"] = id;
        req["theta"] = std::vector<double>(theta.begin(), theta.end());
        req["seed"] = seed;
        write_line(req.dump());

        const auto line = read_line("response");
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception&) {
            throw ProtocolError("external simulator: malformed line: " + line);
        }
        if (!j.is_object() || !j.contains("id") || !j["id"].is_number_unsigned() || !j.contains("summary") ||
            !j["summary"].is_array()) {
            throw ProtocolError("external simulator: malformed line: " + line);
        }
        if (j["id"].get<std::uint64_t>() != id) {
            throw ProtocolError("external simulator: id mismatch (expected " + std::to_string(id) + "): " + line);
        }
        const auto& s = j["summary"];
        if (s.size() != dim_summary_) throw ProtocolError("external simulator: summary length mismatch: " + line);
        std::vector<double> out;
        out.reserve(s.size());
        for (const auto& v : s) {
            if (v.is_number()) {
                out.push_back(v.get<double>());
            } else if (v.is_null()) {
                out.push_back(std::numeric_limits<double>::quiet_NaN());
            } else {
                throw ProtocolError("external simulator: non-numeric summary entry: " + line);
            }
        }
        return out;
    }

private:
    void spawn() {
        int sv[2];
        if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0) {
            throw ProcessError(std::string("external simulator: socketpair failed: ") + std::strerror(errno));
        }
        std::vector<char*> args;
        for (auto& a : argv_) args.push_back(a.data());
        args.push_back(nullptr);
        const pid_t pid = ::fork();
        if (pid < 0) {
            ::close(sv[0]);
            ::close(sv[1]);
            throw ProcessError(std::string("external simulator: fork failed: ") + std::strerror(errno));
        }
        if (pid == 0) {
            ::dup2(sv[1], STDIN_FILENO);
            ::dup2(sv[1], STDOUT_FILENO);
            ::execvp(args[0], args.data());
            ::_exit(127);
        }
        ::close(sv[1]);
        fd_ = sv[0];
        pid_ = pid;
    }

    [[noreturn]] void child_gone(const char* during) {
        int status = 0;
        std::string how = "closed its output";
        if (pid_ > 0 && ::waitpid(pid_, &status, 0) == pid_) {
            pid_ = -1;
            if (WIFEXITED(status)) how = "exited with status " + std::to_string(WEXITSTATUS(status));
            else if (WIFSIGNALED(status)) how = "killed by signal " + std::to_string(WTERMSIG(status));
        }
        throw ProcessError(std::string("external simulator: child ") + how + " during " + during);
    }

    void write_line(const std::string& text) {
        std::string data = text + "\n";
        std::size_t off = 0;
        while (off < data.size()) {
            const ssize_t n = ::send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
            if (n < 0) {
                if (errno == EINTR) continue;
                child_gone("request");
            }
            off += static_cast<std::size_t>(n);
        }
    }

    std::string read_line(const char* during) {
        const auto deadline = Clock::now() + timeout_;
        for (;;) {
            const auto nl = buffer_.find('\n');
            if (nl != std::string::npos) {
                std::string line = buffer_.substr(0, nl);
                buffer_.erase(0, nl + 1);
                return line;
            }
            const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
            if (left.count() <= 0) throw_timeout(during);
            pollfd p{fd_, POLLIN, 0};
            const int r = ::poll(&p, 1, static_cast<int>(std::min<long long>(left.count(), 1 << 30)));
            if (r < 0) {
                if (errno == EINTR) continue;
                throw ProcessError(std::string("external simulator: poll failed: ") + std::strerror(errno));
            }
            if (r == 0) throw_timeout(during);
            char chunk[4096];
            const ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
            if (n < 0) {
                if (errno == EINTR) continue;
                child_gone(during);
            }
            if (n == 0) child_gone(during);
            buffer_.append(chunk, static_cast<std::size_t>(n));
        }
    }

    [[noreturn]] void throw_timeout(const char* during) {
        shutdown();
        throw SimulatorTimeoutError("external simulator: no " + std::string(during) + " within " +
                                    std::to_string(timeout_.count()) + " ms");
    }

    void shutdown() noexcept {
        if (fd_ >= 0) {
            ::close(fd_);
            fd_ = -1;
        }
        if (pid_ > 0) {
            int status = 0;
            // Closing the socket ends a well-behaved child; give it a moment.
            for (int i = 0; i < 50; ++i) {
                if (::waitpid(pid_, &status, WNOHANG) == pid_) {
                    pid_ = -1;
                    return;
                }
                ::usleep(2000);
            }
            ::kill(pid_, SIGKILL);
            ::waitpid(pid_, &status, 0);
            pid_ = -1;
        }
    }

    std::vector<std::string> argv_;
    std::chrono::milliseconds timeout_;
    int fd_ = -1;
    pid_t pid_ = -1;
    std::string buffer_;
    std::size_t dim_theta_ = 0;
    std::size_t dim_summary_ = 0;
    std::uint64_t next_id_ = 0;
};

}  // namespace abctree
