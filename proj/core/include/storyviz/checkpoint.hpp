#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "storyviz/model.hpp"
#include "storyviz/training.hpp"

namespace storyviz {

// Checkpoint = config text + iteration + rng state + every parameter, buffer
// and Adam moment, all length- and name-checked on load. The payload is
// CRC32-guarded and written temp-then-rename so a torn write never leaves a
// plausible file. Serialization is deterministic, so save -> load -> save is
// byte-identical.

namespace ckpt_detail {

inline constexpr char kMagic[8] = {'S', 'V', 'C', 'K', 'P', 'T', '0', '1'};

inline void put_u64(std::ostream& os, uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>(v >> (8 * i));
  os.write(bytes, 8);
}

inline uint64_t get_u64(std::istream& is) {
  unsigned char bytes[8];
  is.read(reinterpret_cast<char*>(bytes), 8);
  SV_CHECK(is.good(), "checkpoint: truncated");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(bytes[i]) << (8 * i);
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  const uint64_t n = get_u64(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  SV_CHECK(is.good(), "checkpoint: truncated string");
  return s;
}

template <typename T>
void put_tensor_data(std::ostream& os, const Tensor<T>& t) {
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(sizeof(T) * t.numel()));
}

template <typename T>
void get_tensor_data(std::istream& is, Tensor<T>& t) {
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(sizeof(T) * t.numel()));
  SV_CHECK(is.good(), "checkpoint: truncated tensor");
}

template <typename T>
void put_named_tensor(std::ostream& os, const std::string& name, const Tensor<T>& t) {
  put_string(os, name);
  put_u64(os, t.rank());
  for (size_t i = 0; i < t.rank(); ++i) put_u64(os, static_cast<uint64_t>(t.dim(i)));
  put_tensor_data(os, t);
}

template <typename T>
void get_named_tensor(std::istream& is, const std::string& expect_name, Tensor<T>& t) {
  const std::string name = get_string(is);
  SV_CHECK(name == expect_name, "checkpoint: parameter order mismatch, found '", name,
           "' where '", expect_name, "' was expected");
  const uint64_t rank = get_u64(is);
  SV_CHECK(rank == t.rank(), "checkpoint: rank mismatch for ", name);
  for (size_t i = 0; i < t.rank(); ++i) {
    const uint64_t d = get_u64(is);
    SV_CHECK(static_cast<int64_t>(d) == t.dim(i), "checkpoint: shape mismatch for ",
             name, " axis ", i);
  }
  get_tensor_data(is, t);
}

template <typename T>
void put_adam(std::ostream& os, Adam<T>& opt) {
  put_u64(os, static_cast<uint64_t>(opt.step_count()));
  put_u64(os, opt.params().size());
  for (size_t i = 0; i < opt.params().size(); ++i) {
    put_tensor_data(os, opt.moment1(i));
    put_tensor_data(os, opt.moment2(i));
  }
}

template <typename T>
void get_adam(std::istream& is, Adam<T>& opt) {
  opt.set_step_count(static_cast<int64_t>(get_u64(is)));
  const uint64_t n = get_u64(is);
  SV_CHECK(n == opt.params().size(), "checkpoint: optimizer parameter count mismatch");
  for (size_t i = 0; i < opt.params().size(); ++i) {
    get_tensor_data(is, opt.moment1(i));
    get_tensor_data(is, opt.moment2(i));
  }
}

}  // namespace ckpt_detail

template <typename T>
void save_checkpoint(const std::string& path, Model<T>& model, Trainer<T>& trainer) {
  using namespace ckpt_detail;
  std::ostringstream payload(std::ios::binary);
  put_string(payload, trainer.config().serialize());
  put_u64(payload, static_cast<uint64_t>(model.config().story_len));
  put_u64(payload, static_cast<uint64_t>(trainer.iter()));
  trainer.rng().serialize(payload);

  for (ParamRegistry<T>* reg :
       {&model.theta(), &model.psi_image(), &model.psi_story()}) {
    put_u64(payload, reg->params.size());
    for (const Param<T>* p : reg->params) put_named_tensor(payload, p->name, p->value);
    put_u64(payload, reg->buffers.size());
    for (const NamedBuffer<T>& b : reg->buffers) {
      put_named_tensor(payload, b.name, *b.tensor);
    }
  }
  put_adam(payload, trainer.opt_theta());
  put_adam(payload, trainer.opt_disc_image());
  put_adam(payload, trainer.opt_disc_story());

  const std::string body = payload.str();
  const uint32_t crc = static_cast<uint32_t>(::crc32(
      0L, reinterpret_cast<const unsigned char*>(body.data()),
      static_cast<uInt>(body.size())));

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    SV_CHECK(f.good(), "checkpoint: cannot open ", tmp);
    f.write(kMagic, sizeof(kMagic));
    put_u64(f, body.size());
    put_u64(f, crc);
    f.write(body.data(), static_cast<std::streamsize>(body.size()));
    SV_CHECK(f.good(), "checkpoint: write failed for ", tmp);
  }
  std::filesystem::rename(tmp, path);
}

namespace ckpt_detail {

inline std::string read_checked_payload(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  SV_CHECK(f.good(), "checkpoint: cannot open ", path);
  char magic[8];
  f.read(magic, sizeof(magic));
  SV_CHECK(f.good() && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0,
           "checkpoint: bad magic in ", path);
  const uint64_t len = get_u64(f);
  const uint64_t crc_expect = get_u64(f);
  std::string body(len, '\0');
  f.read(body.data(), static_cast<std::streamsize>(len));
  SV_CHECK(f.good(), "checkpoint: truncated payload in ", path);
  const uint32_t crc = static_cast<uint32_t>(::crc32(
      0L, reinterpret_cast<const unsigned char*>(body.data()),
      static_cast<uInt>(body.size())));
  SV_CHECK(crc == crc_expect, "checkpoint: CRC mismatch in ", path, " (corrupt file)");
  return body;
}

}  // namespace ckpt_detail

// Reads only the embedded config and story length, for constructing a
// matching model before a full load.
struct CheckpointHeader {
  TrainingConfig config;
  int64_t story_len = 0;
  int64_t iter = 0;
};

inline CheckpointHeader checkpoint_header(const std::string& path) {
  using namespace ckpt_detail;
  std::istringstream is(read_checked_payload(path), std::ios::binary);
  CheckpointHeader h;
  h.config.apply_text(get_string(is));
  h.story_len = static_cast<int64_t>(get_u64(is));
  h.iter = static_cast<int64_t>(get_u64(is));
  return h;
}

// Restores parameters and buffers only (for generation/evaluation); trainer
// state in the file is read and discarded.
template <typename T>
void load_checkpoint_model(const std::string& path, Model<T>& model) {
  using namespace ckpt_detail;
  std::istringstream is(read_checked_payload(path), std::ios::binary);
  TrainingConfig cfg;
  cfg.apply_text(get_string(is));
  SV_CHECK(cfg.variant == model.kind(), "checkpoint: variant mismatch (file has ",
           to_string(cfg.variant), ", model is ", to_string(model.kind()), ")");
  const int64_t story_len = static_cast<int64_t>(get_u64(is));
  SV_CHECK(story_len == model.config().story_len,
           "checkpoint: story length mismatch (file has T=", story_len,
           ", model expects T=", model.config().story_len, ")");
  get_u64(is);  // iteration
  Rng scratch;
  scratch.deserialize(is);
  for (ParamRegistry<T>* reg :
       {&model.theta(), &model.psi_image(), &model.psi_story()}) {
    const uint64_t np = get_u64(is);
    SV_CHECK(np == reg->params.size(), "checkpoint: parameter count mismatch");
    for (Param<T>* p : reg->params) get_named_tensor(is, p->name, p->value);
    const uint64_t nb = get_u64(is);
    SV_CHECK(nb == reg->buffers.size(), "checkpoint: buffer count mismatch");
    for (NamedBuffer<T>& b : reg->buffers) get_named_tensor(is, b.name, *b.tensor);
  }
}

template <typename T>
void load_checkpoint(const std::string& path, Model<T>& model, Trainer<T>& trainer) {
  using namespace ckpt_detail;
  std::istringstream is(read_checked_payload(path), std::ios::binary);

  TrainingConfig cfg;
  cfg.apply_text(get_string(is));
  SV_CHECK(cfg.variant == model.kind(), "checkpoint: variant mismatch (file has ",
           to_string(cfg.variant), ", model is ", to_string(model.kind()), ")");
  const int64_t story_len = static_cast<int64_t>(get_u64(is));
  SV_CHECK(story_len == model.config().story_len,
           "checkpoint: story length mismatch (file has T=", story_len,
           ", model expects T=", model.config().story_len, ")");
  SV_CHECK(cfg.trace_signature() == trainer.config().trace_signature(),
           "checkpoint: config mismatch with trainer");

  trainer.set_iter(static_cast<int64_t>(get_u64(is)));
  trainer.rng().deserialize(is);

  for (ParamRegistry<T>* reg :
       {&model.theta(), &model.psi_image(), &model.psi_story()}) {
    const uint64_t np = get_u64(is);
    SV_CHECK(np == reg->params.size(), "checkpoint: parameter count mismatch");
    for (Param<T>* p : reg->params) get_named_tensor(is, p->name, p->value);
    const uint64_t nb = get_u64(is);
    SV_CHECK(nb == reg->buffers.size(), "checkpoint: buffer count mismatch");
    for (NamedBuffer<T>& b : reg->buffers) get_named_tensor(is, b.name, *b.tensor);
  }
  get_adam(is, trainer.opt_theta());
  get_adam(is, trainer.opt_disc_image());
  get_adam(is, trainer.opt_disc_story());
}

}  // namespace storyviz
