//! The micro vision-language decoder: a two-block, single-head, pre-norm
//! causal transformer over a closed vocabulary, small enough to pretrain
//! from scratch in seconds yet large enough to answer templated questions
//! about synthetic scenes.
//!
//! A sequence is rows in hidden space: one image row (the image embedding
//! through a fixed random map that is never trained), the prompt tokens,
//! optionally one injected signal row, then BOS and the answer tokens.
//! Learned positional embeddings are added to the whole sequence. The same
//! tape-built forward serves training and greedy decoding, so the two can
//! never drift apart.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedder::EmbeddingVector;
use crate::error::{Result, UpdError};
use crate::injlora::LoraAdapter;
use crate::numerics::random::{derive_seed, gaussian_matrix, rng_from_seed};
use crate::numerics::{DenseMatrix, GradientTape, GraphBinder, NodeId, Params};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

/// The fixed abstention answer, exactly four tokens once encoded.
pub const ABSTAIN_TEXT: &str = "I cannot answer.";

pub const MAX_GENERATED: usize = 8;

const ATTENTION_MASK: f64 = -1e9;

/// Closed token set: specials, punctuation, option letters, the abstention
/// words, the question template words, then the world's object and color
/// words.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn for_world(objects: &[String], colors: &[String]) -> Self {
        let mut tokens: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let fixed = [
            ".", "?", "a", "b", "c", "d", "i", "cannot", "answer", "what", "which", "color",
            "object", "is", "the", "say", "you",
        ];
        tokens.extend(fixed.iter().map(|s| s.to_string()));
        for word in objects.iter().chain(colors) {
            let w = word.to_lowercase();
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Lowercases, splits alphanumeric runs, and keeps '.' and '?' as their
    /// own tokens. Unknown words map to `UNK`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        let mut word = String::new();
        let flush = |word: &mut String, ids: &mut Vec<usize>| {
            if !word.is_empty() {
                ids.push(self.id(word.as_str()).unwrap_or(UNK));
                word.clear();
            }
        };
        for ch in text.to_lowercase().chars() {
            if ch.is_alphanumeric() {
                word.push(ch);
            } else {
                flush(&mut word, &mut ids);
                if ch == '.' || ch == '?' {
                    ids.push(self.id(&ch.to_string()).expect("punctuation in vocab"));
                }
            }
        }
        flush(&mut word, &mut ids);
        ids
    }

    /// Inverse of `encode` up to case: words joined with spaces, '.' and '?'
    /// attached to the preceding word.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id);
            if tok == "." || tok == "?" {
                out.push_str(tok);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VlmConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub ff_dim: usize,
    pub max_seq: usize,
    /// Dim of the raw image embedding entering the fixed random map.
    pub emb_dim: usize,
    pub seed: u64,
}

impl Default for VlmConfig {
    fn default() -> Self {
        VlmConfig {
            hidden: 64,
            blocks: 2,
            ff_dim: 128,
            max_seq: 64,
            emb_dim: 64,
            seed: 0,
        }
    }
}

/// One piece of an assembled sequence: either rows already on the tape
/// (image row, injected signal row) or token ids to embed.
#[derive(Clone, Debug)]
pub enum Segment {
    Rows(NodeId),
    Tokens(Vec<usize>),
}

/// Adapters to apply during a forward pass, keyed by the adapted base
/// parameter name. The signal feeds every injected adapter's mixing matrix.
pub struct AdapterSet<'a> {
    pub adapters: &'a BTreeMap<String, LoraAdapter>,
    pub signal: Option<&'a [f64]>,
}

#[derive(Clone, Debug)]
pub struct MicroVlm {
    config: VlmConfig,
    vocab: Vocab,
    /// Fixed random map (emb_dim, hidden) taking the raw image embedding to
    /// one sequence row. Seeded from the config and deliberately not a
    /// parameter: the image pathway stays pinned through every phase.
    img_map: DenseMatrix,
}

impl MicroVlm {
    pub fn new(config: VlmConfig, vocab: Vocab) -> Self {
        let mut rng = rng_from_seed(derive_seed(config.seed, "img-map"));
        let img_map = gaussian_matrix(&mut rng, config.emb_dim, config.hidden, 0.02);
        MicroVlm {
            config,
            vocab,
            img_map,
        }
    }

    pub fn config(&self) -> &VlmConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    /// The raw image embedding mapped into hidden space, as one row.
    pub fn image_row(&self, image: &EmbeddingVector) -> Result<DenseMatrix> {
        if image.dim() != self.config.emb_dim {
            return Err(UpdError::ShapeMismatch {
                op: "image_row".into(),
                left: (1, self.config.emb_dim),
                right: (1, image.dim()),
            });
        }
        DenseMatrix::row_vector(image.values()).matmul(&self.img_map)
    }

    pub fn base_param_names(&self) -> Vec<String> {
        let mut names = vec!["vlm.tok_emb".to_string(), "vlm.pos_emb".to_string()];
        for b in 0..self.config.blocks {
            for part in [
                "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv",
                "attn.bv", "attn.wo", "attn.bo", "ln2.gain", "ln2.bias", "ff.w1", "ff.b1",
                "ff.w2", "ff.b2",
            ] {
                names.push(format!("vlm.block{b}.{part}"));
            }
        }
        names.push("vlm.ln_f.gain".to_string());
        names.push("vlm.ln_f.bias".to_string());
        names
    }

    /// The twelve adaptable linear layers (attention and feed-forward
    /// weights in each block), as (name, out_dim, in_dim). The output head
    /// and the embeddings are deliberately not adaptable.
    pub fn adapted_layers(&self) -> Vec<(String, usize, usize)> {
        let h = self.config.hidden;
        let f = self.config.ff_dim;
        let mut layers = Vec::new();
        for b in 0..self.config.blocks {
            for attn in ["wq", "wk", "wv", "wo"] {
                layers.push((format!("vlm.block{b}.attn.{attn}"), h, h));
            }
            layers.push((format!("vlm.block{b}.ff.w1"), f, h));
            layers.push((format!("vlm.block{b}.ff.w2"), h, f));
        }
        layers
    }

    /// Fresh base weights. Linear weights and embeddings start small and
    /// gaussian, norms start at gain one bias zero, biases start at zero.
    pub fn init_params(&self, params: &mut Params) {
        let h = self.config.hidden;
        let f = self.config.ff_dim;
        let v = self.vocab.size();
        let mut rng = rng_from_seed(derive_seed(self.config.seed, "vlm-init"));
        let mut gauss = |rows: usize, cols: usize| gaussian_matrix(&mut rng, rows, cols, 0.02);

        params.insert("vlm.tok_emb".into(), gauss(v, h));
        params.insert("vlm.pos_emb".into(), gauss(self.config.max_seq, h));
        for b in 0..self.config.blocks {
            let p = |part: &str| format!("vlm.block{b}.{part}");
            params.insert(p("ln1.gain"), ones(1, h));
            params.insert(p("ln1.bias"), DenseMatrix::zeros(1, h));
            params.insert(p("attn.wq"), gauss(h, h));
            params.insert(p("attn.bq"), DenseMatrix::zeros(1, h));
            params.insert(p("attn.wk"), gauss(h, h));
            params.insert(p("attn.bk"), DenseMatrix::zeros(1, h));
            params.insert(p("attn.wv"), gauss(h, h));
            params.insert(p("attn.bv"), DenseMatrix::zeros(1, h));
            params.insert(p("attn.wo"), gauss(h, h));
            params.insert(p("attn.bo"), DenseMatrix::zeros(1, h));
            params.insert(p("ln2.gain"), ones(1, h));
            params.insert(p("ln2.bias"), DenseMatrix::zeros(1, h));
            params.insert(p("ff.w1"), gauss(h, f));
            params.insert(p("ff.b1"), DenseMatrix::zeros(1, f));
            params.insert(p("ff.w2"), gauss(f, h));
            params.insert(p("ff.b2"), DenseMatrix::zeros(1, h));
        }
        params.insert("vlm.ln_f.gain".into(), ones(1, h));
        params.insert("vlm.ln_f.bias".into(), DenseMatrix::zeros(1, h));
    }

    /// Base weight plus bias plus any adapter delta for one linear layer,
    /// over row-major activations.
    fn linear(
        &self,
        tape: &mut GradientTape,
        binder: &mut GraphBinder,
        x: NodeId,
        weight_name: &str,
        bias_name: &str,
        adapters: Option<&AdapterSet>,
    ) -> Result<NodeId> {
        let w = binder.bind(tape, weight_name)?;
        let b = binder.bind(tape, bias_name)?;
        let wx = tape.matmul(x, w)?;
        let mut out = tape.add(wx, b)?;
        if let Some(set) = adapters {
            if let Some(adapter) = set.adapters.get(weight_name) {
                let delta = adapter.delta_rows_on_tape(tape, binder.params(), x, set.signal)?;
                out = tape.add(out, delta)?;
            }
        }
        Ok(out)
    }

    fn norm(
        &self,
        tape: &mut GradientTape,
        binder: &mut GraphBinder,
        x: NodeId,
        gain_name: &str,
        bias_name: &str,
    ) -> Result<NodeId> {
        let normed = tape.layer_norm_rows(x);
        let gain = binder.bind(tape, gain_name)?;
        let bias = binder.bind(tape, bias_name)?;
        let scaled = tape.mul(normed, gain)?;
        tape.add(scaled, bias)
    }

    /// Assembles the sequence rows and runs the decoder. Returns the logits
    /// node, shape (seq_len, vocab).
    pub fn forward_logits(
        &self,
        tape: &mut GradientTape,
        binder: &mut GraphBinder,
        segments: &[Segment],
        adapters: Option<&AdapterSet>,
    ) -> Result<NodeId> {
        let h = self.config.hidden;
        let mut parts = Vec::new();
        let mut seq_len = 0usize;
        for segment in segments {
            match segment {
                Segment::Rows(node) => {
                    let shape = tape.value(*node).shape();
                    if shape.1 != h {
                        return Err(UpdError::ShapeMismatch {
                            op: "forward_logits segment".into(),
                            left: (shape.0, h),
                            right: shape,
                        });
                    }
                    seq_len += shape.0;
                    parts.push(*node);
                }
                Segment::Tokens(ids) => {
                    if ids.is_empty() {
                        continue;
                    }
                    let table = binder.bind(tape, "vlm.tok_emb")?;
                    let rows = tape.embedding_lookup(table, ids)?;
                    seq_len += ids.len();
                    parts.push(rows);
                }
            }
        }
        if seq_len == 0 {
            return Err(UpdError::contract("empty sequence"));
        }
        if seq_len > self.config.max_seq {
            return Err(UpdError::contract(format!(
                "sequence length {seq_len} exceeds position table {}",
                self.config.max_seq
            )));
        }
        let tokens = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)?
        };
        let pos_table = binder.bind(tape, "vlm.pos_emb")?;
        let positions: Vec<usize> = (0..seq_len).collect();
        let pos_rows = tape.embedding_lookup(pos_table, &positions)?;
        let mut x = tape.add(tokens, pos_rows)?;

        let mask = tape.input(causal_mask(seq_len));
        let scale = 1.0 / (h as f64).sqrt();
        for b in 0..self.config.blocks {
            let p = |part: &str| format!("vlm.block{b}.{part}");
            let normed = self.norm(tape, binder, x, &p("ln1.gain"), &p("ln1.bias"))?;
            let q = self.linear(tape, binder, normed, &p("attn.wq"), &p("attn.bq"), adapters)?;
            let k = self.linear(tape, binder, normed, &p("attn.wk"), &p("attn.bk"), adapters)?;
            let v = self.linear(tape, binder, normed, &p("attn.wv"), &p("attn.bv"), adapters)?;
            let k_t = tape.transpose(k);
            let scores = tape.matmul(q, k_t)?;
            let scaled = tape.scale(scores, scale);
            let masked = tape.add(scaled, mask)?;
            let weights = tape.softmax_rows(masked);
            let ctx = tape.matmul(weights, v)?;
            let o = self.linear(tape, binder, ctx, &p("attn.wo"), &p("attn.bo"), adapters)?;
            x = tape.add(x, o)?;

            let normed2 = self.norm(tape, binder, x, &p("ln2.gain"), &p("ln2.bias"))?;
            let f1 = self.linear(tape, binder, normed2, &p("ff.w1"), &p("ff.b1"), adapters)?;
            let act = tape.gelu(f1);
            let f2 = self.linear(tape, binder, act, &p("ff.w2"), &p("ff.b2"), adapters)?;
            x = tape.add(x, f2)?;
        }
        let final_norm = self.norm(tape, binder, x, "vlm.ln_f.gain", "vlm.ln_f.bias")?;
        // tied output head: answering by copying a token into the residual
        // stream then needs no separate readout map
        let table = binder.bind(tape, "vlm.tok_emb")?;
        let table_t = tape.transpose(table);
        tape.matmul(final_norm, table_t)
    }

    /// Mean token cross entropy of the answer under teacher forcing. The
    /// prefix is everything before BOS; the model must then produce each
    /// answer token and finally EOS.
    pub fn teacher_forced_loss(
        &self,
        tape: &mut GradientTape,
        binder: &mut GraphBinder,
        prefix: &[Segment],
        answer_ids: &[usize],
        adapters: Option<&AdapterSet>,
    ) -> Result<NodeId> {
        if answer_ids.is_empty() {
            return Err(UpdError::contract("empty answer sequence"));
        }
        if answer_ids.contains(&UNK) {
            return Err(UpdError::contract(
                "answer contains a token outside the vocabulary",
            ));
        }
        let mut segments: Vec<Segment> = prefix.to_vec();
        let mut teacher: Vec<usize> = vec![BOS];
        teacher.extend_from_slice(answer_ids);
        segments.push(Segment::Tokens(teacher));

        let logits = self.forward_logits(tape, binder, &segments, adapters)?;
        let seq_len = tape.value(logits).rows();
        let targets: Vec<usize> = answer_ids.iter().copied().chain([EOS]).collect();
        let m = targets.len();
        // rows BOS..last answer token predict the m targets
        let predicting = tape.slice_rows(logits, seq_len - m, seq_len)?;
        let log_probs = tape.log_softmax_rows(predicting);
        let onehot = tape.input(one_hot_rows(&targets, self.vocab.size()));
        let picked = tape.mul(log_probs, onehot)?;
        let total = tape.sum(picked);
        Ok(tape.scale(total, -1.0 / m as f64))
    }

    /// Greedy decoding: argmax token by token until EOS or the cap. Each
    /// step rebuilds the forward pass through `build_prefix`, which lets the
    /// caller place image and signal rows on the fresh tape.
    pub fn generate<F>(
        &self,
        params: &Params,
        build_prefix: F,
        adapters: Option<&AdapterSet>,
        max_new: usize,
    ) -> Result<Vec<usize>>
    where
        F: Fn(&mut GradientTape) -> Result<Vec<Segment>>,
    {
        let mut produced: Vec<usize> = Vec::new();
        loop {
            if produced.len() >= max_new {
                return Ok(produced);
            }
            let mut tape = GradientTape::new();
            let mut binder = GraphBinder::frozen(params);
            let mut segments = build_prefix(&mut tape)?;
            let mut tail = vec![BOS];
            tail.extend_from_slice(&produced);
            segments.push(Segment::Tokens(tail));
            let logits = self.forward_logits(&mut tape, &mut binder, &segments, adapters)?;
            let value = tape.value(logits);
            let last = value.row(value.rows() - 1);
            let next = argmax(last);
            if next == EOS {
                return Ok(produced);
            }
            produced.push(next);
        }
    }

    /// Decodes generated token ids into answer text.
    pub fn render(&self, ids: &[usize]) -> String {
        self.vocab.decode(ids)
    }
}

fn ones(rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::new(rows, cols, vec![1.0; rows * cols]).expect("shape is consistent")
}

/// Additive causal mask: zero at or below the diagonal, a large negative
/// number above it. Softmax turns the masked entries into exact zeros.
fn causal_mask(n: usize) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            m.set(i, j, ATTENTION_MASK);
        }
    }
    m
}

fn one_hot_rows(ids: &[usize], vocab: usize) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(ids.len(), vocab);
    for (r, &id) in ids.iter().enumerate() {
        m.set(r, id, 1.0);
    }
    m
}

/// First maximum wins, so ties resolve to the lowest token id.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::SyntheticWorld;
    use crate::injlora::{AdapterVariant, LoraConfig};
    use crate::numerics::{check_gradients, DEFAULT_EPSILON};

    fn test_vocab() -> Vocab {
        // only the word lists matter here; the default dim fits all pairs
        let world = SyntheticWorld::new(0, 64, 0.1).unwrap();
        Vocab::for_world(world.objects(), world.colors())
    }

    fn tiny_model() -> MicroVlm {
        let config = VlmConfig {
            hidden: 16,
            blocks: 2,
            ff_dim: 24,
            max_seq: 32,
            emb_dim: 16,
            seed: 9,
        };
        MicroVlm::new(config, test_vocab())
    }

    #[test]
    fn abstention_encodes_to_four_tokens_and_round_trips() {
        let vocab = test_vocab();
        let ids = vocab.encode(ABSTAIN_TEXT);
        assert_eq!(ids.len(), 4);
        assert!(!ids.contains(&UNK));
        assert_eq!(vocab.decode(&ids), "i cannot answer.");
    }

    #[test]
    fn prompt_vocabulary_is_closed() {
        let vocab = test_vocab();
        let prompt = "What color is the dress? A. White B. Blue C. Red D. Green";
        let ids = vocab.encode(prompt);
        assert!(!ids.contains(&UNK), "prompt hit UNK: {ids:?}");
        let open = "Which object is yellow?";
        assert!(!vocab.encode(open).contains(&UNK));
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let vocab = test_vocab();
        let ids = vocab.encode("zebra?");
        assert_eq!(ids[0], UNK);
    }

    #[test]
    fn zero_weights_give_uniform_cross_entropy() {
        let model = tiny_model();
        let mut params = Params::new();
        model.init_params(&mut params);
        for value in params.values_mut() {
            let (r, c) = value.shape();
            *value = DenseMatrix::zeros(r, c);
        }
        let mut tape = GradientTape::new();
        let mut binder = GraphBinder::frozen(&params);
        let answer = model.vocab().encode("b.");
        let prefix = vec![Segment::Tokens(model.vocab().encode("what color?"))];
        let loss = model
            .teacher_forced_loss(&mut tape, &mut binder, &prefix, &answer, None)
            .unwrap();
        let expected = (model.vocab().size() as f64).ln();
        assert!((tape.scalar(loss).unwrap() - expected).abs() <= 1e-12);
    }

    #[test]
    fn future_tokens_cannot_influence_past_logits() {
        let model = tiny_model();
        let mut params = Params::new();
        model.init_params(&mut params);
        let vocab = model.vocab().clone();
        let a = vocab.encode("what color is the dress");
        let mut with_x = a.clone();
        with_x.extend(vocab.encode("white"));
        let mut with_y = a.clone();
        with_y.extend(vocab.encode("black"));

        let logits = |ids: &[usize]| {
            let mut tape = GradientTape::new();
            let mut binder = GraphBinder::frozen(&params);
            let node = model
                .forward_logits(&mut tape, &mut binder, &[Segment::Tokens(ids.to_vec())], None)
                .unwrap();
            tape.value(node).clone()
        };
        let lx = logits(&with_x);
        let ly = logits(&with_y);
        for row in 0..a.len() {
            assert_eq!(lx.row(row), ly.row(row), "row {row} depends on the future");
        }
    }

    #[test]
    fn zero_init_adapters_leave_logits_bitwise_unchanged() {
        let model = tiny_model();
        let mut params = Params::new();
        model.init_params(&mut params);
        let mut adapters = BTreeMap::new();
        for (layer, out_dim, in_dim) in model.adapted_layers() {
            let adapter = LoraAdapter::new(
                &layer,
                out_dim,
                in_dim,
                LoraConfig {
                    rank: 2,
                    alpha: 4.0,
                    variant: AdapterVariant::Injected,
                    signal_dim: 6,
                },
            )
            .unwrap();
            adapter.init_params(11, &mut params);
            adapters.insert(layer, adapter);
        }
        assert_eq!(adapters.len(), 12);
        let signal = vec![0.25; 6];
        let ids = model.vocab().encode("what color is the cup?");

        let mut t1 = GradientTape::new();
        let mut b1 = GraphBinder::frozen(&params);
        let plain = model
            .forward_logits(&mut t1, &mut b1, &[Segment::Tokens(ids.clone())], None)
            .unwrap();

        let mut t2 = GradientTape::new();
        let mut b2 = GraphBinder::frozen(&params);
        let set = AdapterSet {
            adapters: &adapters,
            signal: Some(&signal),
        };
        let adapted = model
            .forward_logits(&mut t2, &mut b2, &[Segment::Tokens(ids)], Some(&set))
            .unwrap();

        for (x, y) in t1.value(plain).data().iter().zip(t2.value(adapted).data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn injected_row_changes_the_logits() {
        let model = tiny_model();
        let mut params = Params::new();
        model.init_params(&mut params);
        let ids = model.vocab().encode("what color is the cup?");
        let run = |signal_row: Option<Vec<f64>>| {
            let mut tape = GradientTape::new();
            let mut binder = GraphBinder::frozen(&params);
            let mut segments = vec![Segment::Tokens(ids.clone())];
            if let Some(row) = signal_row {
                let node = tape.input_row(&row);
                segments.push(Segment::Rows(node));
            }
            segments.push(Segment::Tokens(vec![BOS]));
            let node = model
                .forward_logits(&mut tape, &mut binder, &segments, None)
                .unwrap();
            let v = tape.value(node);
            v.row(v.rows() - 1).to_vec()
        };
        let without = run(None);
        let with = run(Some(vec![0.5; 16]));
        assert_ne!(without, with);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let model = MicroVlm::new(
            VlmConfig {
                hidden: 8,
                blocks: 2,
                ff_dim: 12,
                max_seq: 24,
                emb_dim: 8,
                seed: 13,
            },
            test_vocab(),
        );
        let mut params = Params::new();
        model.init_params(&mut params);
        // push weights away from init so every gradient path is active
        let mut rng = rng_from_seed(14);
        for value in params.values_mut() {
            let (r, c) = value.shape();
            *value = gaussian_matrix(&mut rng, r, c, 0.3);
        }
        let answer = model.vocab().encode("white.");
        let prompt = model.vocab().encode("what color is the dress?");
        let report = check_gradients(
            |p| {
                let mut tape = GradientTape::new();
                let mut binder = GraphBinder::all_trainable(p);
                let prefix = vec![Segment::Tokens(prompt.clone())];
                let loss =
                    model.teacher_forced_loss(&mut tape, &mut binder, &prefix, &answer, None)?;
                Ok((tape, loss))
            },
            &params,
            DEFAULT_EPSILON,
            3,
            15,
        )
        .unwrap();
        assert!(
            report.max_rel_err <= 1e-4,
            "max rel err {} per param {:?}",
            report.max_rel_err,
            report.per_param
        );
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let model = tiny_model();
        let mut params = Params::new();
        model.init_params(&mut params);
        let ids = model.vocab().encode("what color is the ball?");
        let build = |_tape: &mut GradientTape| Ok(vec![Segment::Tokens(ids.clone())]);
        let first = model.generate(&params, build, None, MAX_GENERATED).unwrap();
        let build2 = |_tape: &mut GradientTape| Ok(vec![Segment::Tokens(ids.clone())]);
        let second = model.generate(&params, build2, None, MAX_GENERATED).unwrap();
        assert_eq!(first, second);
        assert!(first.len() <= MAX_GENERATED);
    }

    #[test]
    fn sequences_past_the_position_table_are_rejected() {
        let model = tiny_model();
        let mut params = Params::new();
        model.init_params(&mut params);
        let mut tape = GradientTape::new();
        let mut binder = GraphBinder::frozen(&params);
        let long = vec![UNK; model.config().max_seq + 1];
        let err = model.forward_logits(&mut tape, &mut binder, &[Segment::Tokens(long)], None);
        assert!(err.is_err());
    }

    #[test]
    fn image_row_is_a_deterministic_fixed_map() {
        let world = SyntheticWorld::with_vocabulary(
            0,
            16,
            0.1,
            vec!["dress".to_string(), "cat".to_string()],
            vec!["white".to_string(), "red".to_string()],
        )
        .unwrap();
        let model = tiny_model();
        let scene = crate::embedder::Scene::new(
            "s0",
            vec![("dress".to_string(), "white".to_string())],
        );
        let v = world.embed_image(&scene).unwrap();
        let r1 = model.image_row(&v).unwrap();
        let r2 = model.image_row(&v).unwrap();
        assert_eq!(r1.data(), r2.data());
        assert_eq!(r1.shape(), (1, 16));
        // a second model with the same seed has the same map
        let model2 = tiny_model();
        assert_eq!(model2.image_row(&v).unwrap().data(), r1.data());
    }

    #[test]
    fn base_param_names_match_init_exactly() {
        let model = tiny_model();
        let mut params = Params::new();
        model.init_params(&mut params);
        let mut names = model.base_param_names();
        names.sort();
        let mut keys: Vec<String> = params.keys().cloned().collect();
        keys.sort();
        assert_eq!(names, keys);
    }
}
