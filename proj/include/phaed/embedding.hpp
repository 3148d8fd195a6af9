#pragma once

#include <string>
#include <vector>

#include "phaed/model.hpp"
#include "phaed/tape.hpp"
#include "phaed/types.hpp"

namespace phaed {

/// Input representation of one utterance: per row i, token embedding plus the
/// shared turn embedding (the same table row serves the query and the response
/// of turn t) plus the token-position embedding. Plain sum, no scaling.
template <typename S>
ad::VarId input_representation(ad::Tape<S>& tape, const EmbeddingP<ad::VarId>& emb,
                               const ModelConfig& cfg, const TokenIds& ids, int turn) {
  const Index len = static_cast<Index>(ids.size());
  if (turn < 1)
    throw ContractViolation("turn index must be 1-based, got " + std::to_string(turn));
  if (turn > cfg.t_max)
    throw CapacityError("turn index " + std::to_string(turn) + " exceeds t_max (" +
                        std::to_string(cfg.t_max) + ")");
  if (len > cfg.i_max)
    throw CapacityError("utterance length " + std::to_string(len) + " exceeds i_max (" +
                        std::to_string(cfg.i_max) + ")");
  std::vector<Index> token_rows;
  token_rows.reserve(ids.size());
  for (TokenId id : ids) {
    if (id < 0 || id >= cfg.vocab_size)
      throw CapacityError("token id " + std::to_string(id) + " outside vocabulary (" +
                          std::to_string(cfg.vocab_size) + ")");
    token_rows.push_back(static_cast<Index>(id));
  }

  ad::VarId x = ad::gather_rows(tape, emb.token, std::move(token_rows));
  if (emb.turn) {
    ad::VarId te = ad::gather_rows(tape, *emb.turn, {static_cast<Index>(turn - 1)});
    x = ad::add_row_bias(tape, x, te);
  }
  std::vector<Index> positions(static_cast<std::size_t>(len));
  for (Index i = 0; i < len; ++i) positions[static_cast<std::size_t>(i)] = i;
  ad::VarId pe = ad::gather_rows(tape, emb.pos, std::move(positions));
  return ad::add(tape, x, pe);
}

}  // namespace phaed
