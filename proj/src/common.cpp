#include "panfield/common.hpp"

#include <sstream>
#include <thread>

namespace panfield {

double rotation_orthonormality_error(const Mat4& pose) {
  double err = 0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += pose.at(k, i) * pose.at(k, j);
      err = std::max(err, std::fabs(s - (i == j ? 1.0 : 0.0)));
    }
  }
  return err;
}

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream iss(line);
  std::vector<std::string> out;
  std::string tok;
  while (iss >> tok) out.push_back(tok);
  return out;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

int default_thread_count() {
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

void parallel_chunks(size_t n, size_t chunk, int n_threads,
                     const std::function<void(size_t, size_t, size_t)>& fn) {
  if (n == 0) return;
  if (chunk == 0) chunk = n;
  size_t n_chunks = (n + chunk - 1) / chunk;
  if (n_threads <= 1 || n_chunks == 1) {
    for (size_t c = 0; c < n_chunks; ++c) fn(c, c * chunk, std::min(n, (c + 1) * chunk));
    return;
  }
  size_t t_count = std::min<size_t>(static_cast<size_t>(n_threads), n_chunks);
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(t_count);
  pool.reserve(t_count);
  for (size_t t = 0; t < t_count; ++t) {
    pool.emplace_back([=, &fn, &errors]() {
      try {
        for (size_t c = t; c < n_chunks; c += t_count) {
          fn(c, c * chunk, std::min(n, (c + 1) * chunk));
        }
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace panfield
