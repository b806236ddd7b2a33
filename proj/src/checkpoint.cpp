#include "sae/checkpoint.hpp"

#include <string>

#include "bytes.hpp"
#include "sae/config.hpp"
#include "sae/error.hpp"

namespace sae {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

const char* const kSlotNames[4] = {"W_enc", "b_enc", "W_dec", "b_pre"};

std::vector<std::size_t> slot_shape(std::size_t slot, std::size_t n, std::size_t d, bool has_b_enc) {
  switch (slot) {
    case 0: return {n, d};
    case 1: return {has_b_enc ? n : 0};
    case 2: return {d, n};
    default: return {d};
  }
}

// Slot 2 (decoder) is latent-major in memory and d x n on disk.
std::vector<float> to_disk(std::size_t slot, std::span<const float> v, std::size_t n, std::size_t d) {
  if (slot != 2) return {v.begin(), v.end()};
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j * n + i] = v[i * d + j];
  return out;
}

std::vector<float> from_disk(std::size_t slot, std::vector<float> v, std::size_t n, std::size_t d) {
  if (slot != 2) return v;
  std::vector<float> out(v.size());
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t i = 0; i < n; ++i) out[i * d + j] = v[j * n + i];
  return out;
}

struct Entry {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;
};

void add_set(std::vector<Entry>& out, const std::string& prefix, const std::vector<std::span<const float>>& slots,
             std::size_t n, std::size_t d, bool has_b_enc) {
  for (std::size_t s = 0; s < 4; ++s)
    out.push_back({prefix + kSlotNames[s], slot_shape(s, n, d, has_b_enc), to_disk(s, slots[s], n, d)});
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  const auto& p = ck.params;
  require(p.W_enc.rows == p.n && p.W_enc.cols == p.d && p.W_dec.rows == p.n && p.W_dec.cols == p.d &&
              p.b_pre.size() == p.d && (p.b_enc.empty() || p.b_enc.size() == p.n),
          "checkpoint: inconsistent parameter shapes");
  std::vector<Entry> tensors;
  add_set(tensors, "", param_slots(p), p.n, p.d, p.has_b_enc());
  if (ck.ema) add_set(tensors, "ema.", param_slots(*ck.ema), p.n, p.d, p.has_b_enc());
  if (ck.adam) {
    auto view = [](const std::vector<std::vector<float>>& m) {
      return std::vector<std::span<const float>>(m.begin(), m.end());
    };
    require(ck.adam->m.size() == 4 && ck.adam->v.size() == 4, "checkpoint: adam state must have 4 slots");
    add_set(tensors, "adam.m.", view(ck.adam->m), p.n, p.d, p.has_b_enc());
    add_set(tensors, "adam.v.", view(ck.adam->v), p.n, p.d, p.has_b_enc());
  }

  ordered_json h;
  h["n"] = p.n;
  h["d"] = p.d;
  h["activation"] = std::string(activation_name(ck.config.activation));
  h["k"] = ck.config.k;
  h["config"] = to_json(ck.config);
  h["step"] = ck.step;
  h["tokens_seen"] = ck.tokens_seen;
  h["loss_baseline"] = ck.loss_baseline;
  h["has_ema"] = ck.ema.has_value();
  h["has_optimizer"] = ck.adam.has_value();
  if (ck.adam)
    h["adam"] = {{"lr", ck.adam->lr},     {"beta1", ck.adam->beta1}, {"beta2", ck.adam->beta2},
                 {"eps", ck.adam->eps},   {"step", ck.adam->step},   {"skipped_steps", ck.adam->skipped_steps}};
  h["extra"] = ck.extra;
  ordered_json list = ordered_json::array();
  for (const auto& t : tensors) list.push_back({{"name", t.name}, {"shape", t.shape}});
  h["tensors"] = list;

  const std::string header = h.dump();
  detail::ByteWriter w;
  w.magic("SAECKPT1");
  w.put<std::uint64_t>(header.size());
  w.put_bytes(header);
  for (const auto& t : tensors) w.put_array<float>(t.data);
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "checkpoint");
  r.expect_magic("SAECKPT1");
  const auto hlen = r.get<std::uint64_t>("header length");
  if (hlen > r.remaining())
    throw FormatError("checkpoint: header length " + std::to_string(hlen) + " at byte 8 exceeds remaining " +
                      std::to_string(r.remaining()) + " bytes");
  json h;
  try {
    h = json::parse(r.get_string(hlen, "header"));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("checkpoint: malformed JSON header at byte 16: ") + e.what());
  }

  Checkpoint ck;
  try {
    merge_json(h.at("config"), ck.config);
    ck.params.n = h.at("n").get<std::size_t>();
    ck.params.d = h.at("d").get<std::size_t>();
    ck.step = h.at("step").get<std::uint64_t>();
    ck.tokens_seen = h.at("tokens_seen").get<std::uint64_t>();
    ck.loss_baseline = h.value("loss_baseline", 0.0);
    if (h.contains("extra")) ck.extra = h.at("extra");
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header field: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("checkpoint: bad config echo: ") + e.what());
  }
  const std::size_t n = ck.params.n;
  const std::size_t d = ck.params.d;

  std::vector<std::pair<std::string, std::vector<float>>> loaded;
  for (const auto& t : h.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<std::vector<std::size_t>>();
    std::size_t count = 1;
    for (std::size_t s : shape) count *= s;
    loaded.emplace_back(name, r.get_array<float>(count, name.c_str()));
  }
  r.expect_end();

  auto take = [&](const std::string& prefix, std::vector<std::vector<float>>& slots) -> bool {
    slots.assign(4, {});
    std::size_t found = 0;
    for (std::size_t s = 0; s < 4; ++s)
      for (auto& [name, data] : loaded)
        if (name == prefix + kSlotNames[s]) {
          slots[s] = from_disk(s, std::move(data), n, d);
          ++found;
        }
    if (found == 0) return false;
    if (found != 4) throw FormatError("checkpoint: incomplete tensor set '" + prefix + "'");
    const bool has_b = !slots[1].empty();
    for (std::size_t s = 0; s < 4; ++s) {
      std::size_t expect = 1;
      for (std::size_t v : slot_shape(s, n, d, has_b)) expect *= v;
      if (slots[s].size() != expect)
        throw FormatError("checkpoint: tensor " + prefix + kSlotNames[s] + " has " + std::to_string(slots[s].size()) +
                          " values, expected " + std::to_string(expect));
    }
    return true;
  };
  auto to_params = [&](std::vector<std::vector<float>>& s) {
    AutoencoderParams p;
    p.n = n;
    p.d = d;
    p.W_enc = DenseMatrix(n, d);
    p.W_enc.data = std::move(s[0]);
    p.b_enc = std::move(s[1]);
    p.W_dec = DenseMatrix(n, d);
    p.W_dec.data = std::move(s[2]);
    p.b_pre = std::move(s[3]);
    return p;
  };

  std::vector<std::vector<float>> slots;
  if (!take("", slots)) throw FormatError("checkpoint: missing base tensors");
  ck.params = to_params(slots);
  if (take("ema.", slots)) ck.ema = to_params(slots);
  std::vector<std::vector<float>> m, v;
  if (take("adam.m.", m) && take("adam.v.", v)) {
    AdamState a;
    const auto& ah = h.at("adam");
    a.lr = ah.at("lr").get<float>();
    a.beta1 = ah.at("beta1").get<float>();
    a.beta2 = ah.at("beta2").get<float>();
    a.eps = ah.at("eps").get<float>();
    a.step = ah.at("step").get<std::uint64_t>();
    a.skipped_steps = ah.at("skipped_steps").get<std::uint64_t>();
    a.m = std::move(m);
    a.v = std::move(v);
    ck.adam = std::move(a);
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  detail::write_file(path, encode_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(detail::read_file(path)); }

}  // namespace sae
