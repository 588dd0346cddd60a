#include "storyviz/blas.hpp"

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>
#include <vector>

#include <cblas.h>
#include <malloc.h>
#include <unistd.h>

#include "storyviz/common.hpp"

extern "C" char* openblas_get_corename(void);

namespace storyviz {

namespace {

std::atomic<uint64_t> g_gemm_calls{0};

// Dynamic-arch OpenBLAS builds probe the CPU in the shared library's own
// constructor, before any code in this binary runs, and fall back to a
// generic (Prescott-era) kernel when the model is unknown; on AVX-512 hosts
// that costs roughly 4x GEMM throughput. The only supported override is the
// OPENBLAS_CORETYPE environment variable, which must be set before the
// library loads, so when the mismatch is detected the process re-executes
// itself exactly once with the variable in place.
#if defined(__x86_64__) && defined(__linux__)
void reexec_with_skylakex() {
  std::FILE* f = std::fopen("/proc/self/cmdline", "rb");
  if (f == nullptr) return;
  std::string raw;
  char buf[4096];
  size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), f)) > 0) raw.append(buf, n);
  std::fclose(f);
  if (raw.empty()) return;
  std::vector<char*> argv;
  for (size_t pos = 0; pos < raw.size();) {
    argv.push_back(raw.data() + pos);
    pos += std::strlen(raw.data() + pos) + 1;
  }
  argv.push_back(nullptr);
  setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 1);
  setenv("STORYVIZ_CORETYPE_REEXEC", "1", 1);
  execv("/proc/self/exe", argv.data());
  // Exec failed: continue with the slow kernels rather than abort.
}

__attribute__((constructor)) void openblas_coretype_guard() {
  if (std::getenv("OPENBLAS_CORETYPE") != nullptr) return;
  if (std::getenv("STORYVIZ_CORETYPE_REEXEC") != nullptr) return;
  if (!__builtin_cpu_supports("avx512f")) return;
  const char* core = openblas_get_corename();
  if (core != nullptr && std::strcmp(core, "Prescott") == 0) {
    reexec_with_skylakex();
  }
}

// Tape forwards allocate and free multi-megabyte scratch tensors every
// iteration; with default thresholds glibc serves them with mmap/munmap and
// the kernel re-zeroes the pages each time, which shows up as system time
// comparable to the compute itself. Keep large blocks inside the arena.
__attribute__((constructor)) void malloc_reuse_guard() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
}
#endif

CBLAS_TRANSPOSE to_cblas(bool trans) { return trans ? CblasTrans : CblasNoTrans; }

}  // namespace

template <>
void gemm<float>(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
                 float alpha, const float* a, const float* b, float beta, float* c) {
  SV_CHECK(m >= 0 && n >= 0 && k >= 0, "gemm with negative size");
  if (m == 0 || n == 0) return;
  g_gemm_calls.fetch_add(1, std::memory_order_relaxed);
  const int lda = static_cast<int>(trans_a ? m : k);
  const int ldb = static_cast<int>(trans_b ? k : n);
  cblas_sgemm(CblasRowMajor, to_cblas(trans_a), to_cblas(trans_b),
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k),
              alpha, a, lda, b, ldb, beta, c, static_cast<int>(n));
}

template <>
void gemm<double>(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
                  double alpha, const double* a, const double* b, double beta,
                  double* c) {
  SV_CHECK(m >= 0 && n >= 0 && k >= 0, "gemm with negative size");
  if (m == 0 || n == 0) return;
  g_gemm_calls.fetch_add(1, std::memory_order_relaxed);
  const int lda = static_cast<int>(trans_a ? m : k);
  const int ldb = static_cast<int>(trans_b ? k : n);
  cblas_dgemm(CblasRowMajor, to_cblas(trans_a), to_cblas(trans_b),
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k),
              alpha, a, lda, b, ldb, beta, c, static_cast<int>(n));
}

uint64_t gemm_call_count() { return g_gemm_calls.load(std::memory_order_relaxed); }

}  // namespace storyviz
