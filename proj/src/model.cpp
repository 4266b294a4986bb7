#include "volrep/model.hpp"

#include <algorithm>
#include <set>

namespace volrep::model {

io::json ModelConfig::to_json() const {
  return {{"width", width}, {"depth", depth}, {"heads", heads}, {"pe_dims", pe_dims}, {"code_dim", code_dim},
          {"shared_dim", shared_dim}};
}

ModelConfig ModelConfig::from_json(const io::json& j) {
  ModelConfig c;
  c.width = j.value("width", c.width);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.pe_dims = j.value("pe_dims", c.pe_dims);
  c.code_dim = j.value("code_dim", c.code_dim);
  c.shared_dim = j.value("shared_dim", c.shared_dim);
  return c;
}

StudyInput make_study_input(const cohort::StudyRecord& study, const vq::VqModel& vq, const tokens::PatchSpec& spec,
                            const tokens::BackgroundFilter& filter, std::vector<TokenOrigin>* origins) {
  StudyInput in;
  in.study_id = study.study_id;
  in.study_name = study.study_name;
  if (origins) origins->clear();
  for (std::size_t s = 0; s < study.sequences.size(); ++s) {
    const auto& seq = study.sequences[s];
    tokens::TokenGrid grid;
    const auto kept = tokens::tokenize_sequence(seq, spec, filter, &grid);
    if (kept.empty()) throw EncodeError(study.study_id + ": sequence " + std::to_string(s) + " has no foreground tokens");
    SequenceInput si;
    si.latents = vq.downstream_latents(kept);
    si.extents = grid.extents;
    si.name = seq.meta.sequence_name;
    for (const auto& t : kept) {
      si.grid_pos.push_back(t.grid_pos);
      if (!origins) continue;
      TokenOrigin o;
      o.sequence = static_cast<int>(s);
      o.grid_pos = t.grid_pos;
      std::set<int> found;
      const auto& shape = seq.volume.shape;
      for (int i = 0; i < t.shape.d0; ++i) {
        const int vi = t.grid_pos[0] * t.shape.d0 + i;
        if (vi >= shape.d0) break;
        for (int j = 0; j < t.shape.d1; ++j) {
          const int vj = t.grid_pos[1] * t.shape.d1 + j;
          if (vj >= shape.d1) break;
          for (int k = 0; k < t.shape.d2; ++k) {
            const int vk = t.grid_pos[2] * t.shape.d2 + k;
            if (vk >= shape.d2) break;
            const auto m = seq.lesion_mask[seq.volume.index(vi, vj, vk)];
            if (m) found.insert(m - 1);
          }
        }
      }
      o.lesion_labels.assign(found.begin(), found.end());
      origins->push_back(std::move(o));
    }
    in.sequences.push_back(std::move(si));
  }
  return in;
}

HierarchicalEncoder::HierarchicalEncoder(std::shared_ptr<const text::Vocabulary> vocab, const ModelConfig& cfg,
                                         const text::TextConfig& text_cfg, std::mt19937_64& rng)
    : cfg_(cfg) {
  if (text_cfg.width != cfg.width) throw EncodeError("name encoders must emit the model width");
  if (cfg.width % cfg.heads != 0) throw EncodeError("width must be divisible by heads");
  seq_names_ = text::SequenceNameEncoder(vocab, text_cfg, rng);
  study_names_ = text::StudyNameEncoder(vocab, text_cfg, rng);
  token_in_ = nn::Linear(cfg.code_dim + cfg.pe_dims, cfg.width, rng);
  seq_register_ = ad::parameter(nn::randn(1, cfg.width, 0.1, rng));
  study_register_ = ad::parameter(nn::randn(1, cfg.width, 0.1, rng));
  const nn::TransformerConfig tc{cfg.width, cfg.depth, cfg.heads, 2};
  vit_seq_ = nn::Transformer(tc, rng);
  vit_st_ = nn::Transformer(tc, rng);
  study_out_ = nn::Linear(cfg.width, cfg.shared_dim, rng);
  patdis_ = nn::Linear(cfg.width, cfg.width, rng, false);
}

Var HierarchicalEncoder::sequence_hidden(const std::vector<const SequenceInput*>& seqs) const {
  ad::Index total = 0;
  std::vector<std::string> names;
  for (const auto* s : seqs) {
    if (s->latents.rows() == 0) throw EncodeError("sequence with zero foreground tokens");
    if (s->latents.cols() != cfg_.code_dim) throw EncodeError("latent width does not match the model");
    if (static_cast<ad::Index>(s->grid_pos.size()) != s->latents.rows()) throw EncodeError("one grid position per token");
    total += s->latents.rows();
    names.push_back(s->name);
  }
  // latent | positional encoding, one row per token
  Matrix feats(total, cfg_.code_dim + cfg_.pe_dims);
  ad::Index r = 0;
  for (const auto* s : seqs) {
    for (ad::Index t = 0; t < s->latents.rows(); ++t, ++r) {
      feats.row(r).head(cfg_.code_dim) = s->latents.row(t);
      const auto pe = tokens::sinusoidal_encode(s->grid_pos[static_cast<std::size_t>(t)], s->extents, cfg_.pe_dims);
      for (int c = 0; c < cfg_.pe_dims; ++c) feats(r, cfg_.code_dim + c) = pe[static_cast<std::size_t>(c)];
    }
  }
  const Var tok = token_in_(ad::constant(std::move(feats)));
  const Var name_emb = seq_names_.encode(names);

  std::vector<ad::RowPick> picks;
  std::vector<ad::Segment> segments;
  std::vector<std::int32_t> registers;
  std::int32_t tok_row = 0;
  ad::Index row = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto len = seqs[i]->latents.rows();
    segments.push_back({row, len + 2});
    picks.push_back({0, static_cast<std::int32_t>(i)});
    picks.push_back({1, 0});
    registers.push_back(static_cast<std::int32_t>(row + 1));
    for (ad::Index t = 0; t < len; ++t) picks.push_back({2, tok_row++});
    row += len + 2;
  }
  const Var x = ad::gather_rows({name_emb, seq_register_, tok}, picks);
  return ad::gather_rows(vit_seq_(x, segments), registers);
}

Var HierarchicalEncoder::encode_sequences(const std::vector<SequenceInput>& seqs) const {
  if (seqs.empty()) throw EncodeError("no sequences");
  std::vector<const SequenceInput*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  return ad::l2_normalize_rows(sequence_hidden(ptrs));
}

Encoded HierarchicalEncoder::encode(const std::vector<StudyInput>& studies) const {
  if (studies.empty()) throw EncodeError("no studies");
  Encoded out;
  std::vector<const SequenceInput*> ptrs;
  std::vector<std::string> names;
  for (std::size_t s = 0; s < studies.size(); ++s) {
    if (studies[s].sequences.empty()) throw EncodeError(studies[s].study_id + ": study has no sequences");
    names.push_back(studies[s].study_name);
    for (const auto& q : studies[s].sequences) {
      ptrs.push_back(&q);
      out.seq_map.push_back(static_cast<int>(s));
    }
  }
  out.sequences = ad::l2_normalize_rows(sequence_hidden(ptrs));
  const Var name_emb = study_names_.encode(names);

  std::vector<ad::RowPick> picks;
  std::vector<ad::Segment> segments;
  std::vector<std::int32_t> registers;
  std::int32_t seq_row = 0;
  ad::Index row = 0;
  for (std::size_t s = 0; s < studies.size(); ++s) {
    const auto n = static_cast<ad::Index>(studies[s].sequences.size());
    segments.push_back({row, n + 2});
    picks.push_back({0, static_cast<std::int32_t>(s)});
    picks.push_back({1, 0});
    registers.push_back(static_cast<std::int32_t>(row + 1));
    for (ad::Index q = 0; q < n; ++q) picks.push_back({2, seq_row++});
    row += n + 2;
  }
  const Var x = ad::gather_rows({name_emb, study_register_, out.sequences}, picks);
  const Var reg = ad::gather_rows(vit_st_(x, segments), registers);
  out.studies = ad::l2_normalize_rows(study_out_(reg));
  return out;
}

std::vector<double> HierarchicalEncoder::encode_study(const StudyInput& study) const {
  ad::NoGradGuard g;
  const auto m = encode({study}).studies.value();
  return std::vector<double>(m.data(), m.data() + m.size());
}

Var HierarchicalEncoder::patient_projection_raw(const Var& seq_embeddings) const { return patdis_(seq_embeddings); }

Var HierarchicalEncoder::patient_projection(const Var& seq_embeddings) const {
  return ad::l2_normalize_rows(patdis_(seq_embeddings));
}

void HierarchicalEncoder::collect(nn::ParamList& out, const std::string& prefix) const {
  seq_names_.collect(out, prefix + ".e_sn");
  study_names_.collect(out, prefix + ".e_stn");
  token_in_.collect(out, prefix + ".token_in");
  out.push_back({prefix + ".seq_register", seq_register_});
  out.push_back({prefix + ".study_register", study_register_});
  vit_seq_.collect(out, prefix + ".vit_seq");
  vit_st_.collect(out, prefix + ".vit_st");
  study_out_.collect(out, prefix + ".study_out");
  patdis_.collect(out, prefix + ".patdis");
}

}  // namespace volrep::model
