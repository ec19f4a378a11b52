//! Trainable audio-to-token projection and the prompt it is placed into.
//!
//! Frames `[T, d_a]` go through `g = MLP2 ∘ softplus ∘ MLP1` and are pooled with
//! attention weights `α = softmax_t ⟨q, g(f_t)⟩`; the resulting pseudo-token is
//! appended after a fixed prefix and read by the frozen text encoder.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, Var};
use crate::encoders::{AudioClipSample, EmbeddingVector, FrameEmbeddingSequence, FrozenStack, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::rng;

pub use crate::lexicon::PROMPT_PREFIX as DEFAULT_PREFIX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    /// Attention query, `[1, d_tok]`.
    pub query: Matrix,
}

impl ProjectionParams {
    /// Hidden width is `2 * d_tok`. The output layer starts small so tokens begin at word-token scale.
    /// The query starts at zero, so pooling begins as a plain mean.
    pub fn init(d_a: usize, d_tok: usize, seed: u64) -> Self {
        let dh = 2 * d_tok;
        let mut r = rng::stream(seed, "projection");
        Self {
            w1: rng::gaussian(&mut r, d_a, dh, 1.0 / (d_a as f64).sqrt()),
            b1: Matrix::zeros(1, dh),
            w2: rng::gaussian(&mut r, dh, d_tok, 0.25 / (dh as f64).sqrt()),
            b2: Matrix::zeros(1, d_tok),
            query: Matrix::zeros(1, d_tok),
        }
    }

    pub fn d_a(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_tok(&self) -> usize {
        self.w2.cols()
    }

    pub fn tensors(&self) -> [&Matrix; 5] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.query]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 5] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.query]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        let (d_a, dh, d_tok) = (self.w1.rows(), self.w1.cols(), self.w2.cols());
        let ok = self.b1.shape() == (1, dh)
            && self.w2.rows() == dh
            && self.b2.shape() == (1, d_tok)
            && self.query.shape() == (1, d_tok)
            && d_a > 0
            && d_tok > 0;
        if !ok {
            return Err(Error::Shape("inconsistent projection parameter shapes".into()));
        }
        if !self.is_finite() {
            return Err(Error::InvalidInput("projection parameters must be finite".into()));
        }
        Ok(())
    }

    /// Registers every tensor as a trainable graph leaf.
    pub fn bind(&self, g: &mut Graph) -> ProjectionVars {
        ProjectionVars {
            w1: g.param(self.w1.clone()),
            b1: g.param(self.b1.clone()),
            w2: g.param(self.w2.clone()),
            b2: g.param(self.b2.clone()),
            query: g.param(self.query.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectionVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub query: Var,
}

impl ProjectionVars {
    pub fn all(&self) -> [Var; 5] {
        [self.w1, self.b1, self.w2, self.b2, self.query]
    }

    /// `g(f_t)` for every row of `frames`.
    pub fn frame_tokens(&self, g: &mut Graph, frames: Var) -> Var {
        let h = g.matmul(frames, self.w1);
        let h = g.add_row(h, self.b1);
        let h = g.softplus(h);
        let h = g.matmul(h, self.w2);
        g.add_row(h, self.b2)
    }

    /// Attentive pooling of one clip, `[T, d_a]` → `[1, d_tok]`.
    pub fn pool(&self, g: &mut Graph, frames: Var) -> Var {
        let tokens = self.frame_tokens(g, frames);
        self.attend(g, tokens)
    }

    fn attend(&self, g: &mut Graph, tokens: Var) -> Var {
        let qt = g.transpose(self.query);
        let scores = g.matmul(tokens, qt);
        let scores = g.transpose(scores);
        let alpha = g.softmax_rows(scores);
        g.matmul(alpha, tokens)
    }

    /// Pools a batch of clips into `[B, d_tok]`. One MLP pass over all frames.
    pub fn pool_batch(&self, g: &mut Graph, clips: &[&Matrix]) -> Result<Var> {
        if clips.is_empty() {
            return Err(Error::InvalidInput("empty clip batch".into()));
        }
        let cols = clips[0].cols();
        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(clips.len());
        for c in clips {
            if c.rows() == 0 {
                return Err(Error::InvalidInput("clip has no frames".into()));
            }
            if c.cols() != cols {
                return Err(Error::Shape("clips disagree on frame width".into()));
            }
            spans.push((data.len() / cols, c.rows()));
            data.extend_from_slice(c.data());
        }
        let total = data.len() / cols;
        let frames = g.constant(Matrix::from_vec(total, cols, data)?);
        let tokens = self.frame_tokens(g, frames);
        let pooled: Vec<Var> = spans
            .into_iter()
            .map(|(start, len)| {
                let idx: Vec<usize> = (start..start + len).collect();
                let t = g.select_rows(tokens, &idx);
                self.attend(g, t)
            })
            .collect();
        Ok(g.concat_rows(&pooled))
    }
}

/// Attention weights of one clip (diagnostics and tests).
pub fn attention_weights(frames: &FrameEmbeddingSequence, params: &ProjectionParams) -> Vec<f64> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let f = g.constant(frames.values().clone());
    let tokens = vars.frame_tokens(&mut g, f);
    let qt = g.transpose(vars.query);
    let s = g.matmul(tokens, qt);
    let s = g.transpose(s);
    let a = g.softmax_rows(s);
    g.value(a).data().to_vec()
}

pub fn project_audio_token(frames: &FrameEmbeddingSequence, params: &ProjectionParams) -> Result<EmbeddingVector> {
    if frames.is_empty() {
        return Err(Error::InvalidInput("frame sequence is empty".into()));
    }
    if frames.values().cols() != params.d_a() {
        return Err(Error::Shape(format!(
            "projection expects frames of width {}, got {}",
            params.d_a(),
            frames.values().cols()
        )));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let f = g.constant(frames.values().clone());
    let t = vars.pool(&mut g, f);
    EmbeddingVector::new(g.value(t).data().to_vec())
}

/// Fixed token rows standing in for the tokenized prompt prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPrefix {
    text: String,
    embeddings: Matrix,
}

impl PromptPrefix {
    pub fn new(text: &str, embeddings: Matrix) -> Self {
        Self { text: text.to_string(), embeddings }
    }

    pub fn from_vocab(vocab: &Vocabulary, text: &str) -> Self {
        let words: Vec<&str> = text.split_whitespace().collect();
        Self::new(text, vocab.tokens(&words))
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }
}

/// `[prefix; token]` with the slot at index `L_p`.
pub fn assemble_prompt(token: &EmbeddingVector, prefix: &PromptPrefix) -> Result<TokenSequence> {
    if token.dim() != prefix.embeddings.cols() {
        return Err(Error::Shape(format!(
            "token width {} does not match prefix width {}",
            token.dim(),
            prefix.embeddings.cols()
        )));
    }
    let mut data = prefix.embeddings.data().to_vec();
    data.extend_from_slice(token.values());
    TokenSequence::new(Matrix::from_vec(prefix.len() + 1, token.dim(), data)?, prefix.len())
}

/// Raw (unnormalized) audio-driven embedding `A` of one clip.
pub fn audio_driven_embedding(
    stack: &FrozenStack,
    prefix: &PromptPrefix,
    clip: &AudioClipSample,
    params: &ProjectionParams,
) -> Result<EmbeddingVector> {
    let spec = stack.compute_spectrogram(clip)?;
    let frames = stack.encode_audio_frames(&spec)?;
    embedding_from_frames(stack, prefix, &frames, params)
}

pub fn embedding_from_frames(
    stack: &FrozenStack,
    prefix: &PromptPrefix,
    frames: &FrameEmbeddingSequence,
    params: &ProjectionParams,
) -> Result<EmbeddingVector> {
    let token = project_audio_token(frames, params)?;
    stack.encode_text_tokens(&assemble_prompt(&token, prefix)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;

    fn params() -> ProjectionParams {
        let mut p = ProjectionParams::init(6, 4, 3);
        p.query = Matrix::row_vector(vec![0.7, -1.1, 0.4, 2.0]);
        p.b1 = Matrix::row_vector((0..8).map(|i| 0.1 * i as f64 - 0.3).collect());
        p
    }

    fn frames(rows: usize, seed: u64) -> FrameEmbeddingSequence {
        FrameEmbeddingSequence::new(rng::gaussian(&mut rng::stream(seed, "f"), rows, 6, 1.0)).unwrap()
    }

    #[test]
    fn single_frame_ignores_query() {
        let f = frames(1, 1);
        let mut p = params();
        let a = project_audio_token(&f, &p).unwrap();
        p.query = Matrix::row_vector(vec![-5.0, 3.0, 9.0, 0.1]);
        let b = project_audio_token(&f, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn repeated_frames_match_single_frame() {
        let one = frames(1, 2);
        let mut rows = Vec::new();
        for _ in 0..5 {
            rows.extend_from_slice(one.values().data());
        }
        let rep = FrameEmbeddingSequence::new(Matrix::from_vec(5, 6, rows).unwrap()).unwrap();
        let a = project_audio_token(&one, &params()).unwrap();
        let b = project_audio_token(&rep, &params()).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn three_frames_match_hand_rolled_attention() {
        let f = frames(3, 4);
        let p = params();
        let softplus = |x: f64| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
        let g: Vec<Vec<f64>> = (0..3)
            .map(|t| {
                let x = f.values().row(t);
                let h: Vec<f64> = (0..8)
                    .map(|j| softplus((0..6).map(|i| x[i] * p.w1.get(i, j)).sum::<f64>() + p.b1.get(0, j)))
                    .collect();
                (0..4).map(|k| (0..8).map(|j| h[j] * p.w2.get(j, k)).sum::<f64>() + p.b2.get(0, k)).collect()
            })
            .collect();
        let s: Vec<f64> = g.iter().map(|gt| gt.iter().zip(p.query.data()).map(|(a, b)| a * b).sum()).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
        let alpha: Vec<f64> = s.iter().map(|v| (v - m).exp() / z).collect();
        let expected: Vec<f64> = (0..4).map(|k| (0..3).map(|t| alpha[t] * g[t][k]).sum()).collect();
        let got = project_audio_token(&f, &p).unwrap();
        for (a, b) in got.values().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = attention_weights(&f, &p);
        for (a, b) in w.iter().zip(&alpha) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_pooling_matches_single() {
        let p = params();
        let a = frames(4, 5);
        let b = frames(2, 6);
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let out = vars.pool_batch(&mut g, &[a.values(), b.values()]).unwrap();
        let out = g.value(out).clone();
        for (i, f) in [a, b].iter().enumerate() {
            let single = project_audio_token(f, &p).unwrap();
            for (x, y) in single.values().iter().zip(out.row(i)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn assemble_prompt_layout() {
        let stack = FrozenStack::toy(&EncoderConfig::default()).unwrap();
        let prefix = PromptPrefix::from_vocab(&stack.vocab, DEFAULT_PREFIX);
        assert_eq!(prefix.len(), 4);
        let t1 = EmbeddingVector::new(vec![0.5; 32]).unwrap();
        let t2 = EmbeddingVector::new(vec![-0.5; 32]).unwrap();
        let s1 = assemble_prompt(&t1, &prefix).unwrap();
        let s2 = assemble_prompt(&t2, &prefix).unwrap();
        assert_eq!((s1.len(), s1.audio_slot_index()), (5, 4));
        assert_eq!(&s1.token_embeddings().data()[..128], prefix.embeddings().data());
        assert_eq!(&s1.token_embeddings().data()[..128], &s2.token_embeddings().data()[..128]);
        assert_ne!(s1.token_embeddings().row(4), s2.token_embeddings().row(4));
        assert!(assemble_prompt(&EmbeddingVector::new(vec![0.0; 3]).unwrap(), &prefix).is_err());
    }

    #[test]
    fn empty_frames_rejected() {
        assert!(FrameEmbeddingSequence::new(Matrix::zeros(0, 6)).is_err());
        let mut g = Graph::new();
        let vars = params().bind(&mut g);
        let empty = Matrix::zeros(0, 6);
        assert!(vars.pool_batch(&mut g, &[&empty]).is_err());
    }
}
