//! Spatial/temporal convolutional encoders and the recurrent text encoder.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{he_uniform, lecun_uniform, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const NUM_STAGES: usize = 5;
pub const DEFAULT_STAGE_CHANNELS: [usize; NUM_STAGES] = [16, 32, 64, 64, 64];

/// Target frame, the frame `delta` steps earlier, and the interval itself.
#[derive(Clone, Debug)]
pub struct FramePair<F> {
    pub target: Tensor<F>,
    pub reference: Tensor<F>,
    pub delta: usize,
}

/// Index of the reference frame for target `t`, clamped to the first frame.
pub fn reference_index(t: usize, delta: usize) -> usize {
    t.saturating_sub(delta)
}

/// Per-element `|I_t - I_{t-δ}|`.
pub fn frame_difference<F: Scalar>(pair: &FramePair<F>) -> Result<Tensor<F>> {
    if pair.delta == 0 {
        return Err(Error::invalid("frame interval must be at least 1"));
    }
    if pair.target.shape() != pair.reference.shape() {
        return Err(Error::Shape {
            op: "frame_difference",
            lhs: pair.target.shape().to_vec(),
            rhs: pair.reference.shape().to_vec(),
        });
    }
    let data = pair
        .target
        .data()
        .iter()
        .zip(pair.reference.data())
        .map(|(&a, &b)| (a - b).abs())
        .collect();
    Tensor::new(pair.target.shape(), data)
}

/// Per-stage feature maps; stage `s` (1-based) is C_s × H_0/2^s × W_0/2^s.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<F> {
    pub stages: Vec<Tensor<F>>,
}

impl<F: Scalar> FeaturePyramid<F> {
    pub fn stage(&self, s: usize) -> &Tensor<F> {
        &self.stages[s - 1]
    }
}

/// Five-stage toy backbone: each stage is a stride-2 conv + relu, then a stride-1 conv + relu.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub prefix: String,
    pub in_channels: usize,
    pub channels: [usize; NUM_STAGES],
}

impl VisualEncoder {
    pub fn new(prefix: impl Into<String>, in_channels: usize, channels: [usize; NUM_STAGES]) -> Self {
        Self {
            prefix: prefix.into(),
            in_channels,
            channels,
        }
    }

    fn name(&self, stage: usize, conv: usize, what: &str) -> String {
        format!("{}.s{stage}.conv{conv}.{what}", self.prefix)
    }

    pub fn init<F: Scalar, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        let mut cin = self.in_channels;
        for (i, &cout) in self.channels.iter().enumerate() {
            let s = i + 1;
            for (conv, ci) in [(1, cin), (2, cout)] {
                store.insert(
                    self.name(s, conv, "w"),
                    he_uniform(rng, &[cout, ci, 3, 3], ci * 9),
                );
                store.insert(self.name(s, conv, "b"), Tensor::zeros(&[cout]));
            }
            cin = cout;
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = shape.len() == 3
            && shape[0] == self.in_channels
            && shape[1].is_multiple_of(32)
            && shape[2].is_multiple_of(32)
            && shape[1] > 0
            && shape[2] > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "encoder input must be {}×H×W with H, W divisible by 32, got {shape:?}",
                self.in_channels
            )))
        }
    }

    /// Runs stage `s` (1-based) on the previous stage's output (or the image for `s == 1`).
    pub fn stage<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        s: usize,
        x: Var,
    ) -> Result<Var> {
        let w1 = tape.param(store, &self.name(s, 1, "w"))?;
        let b1 = tape.param(store, &self.name(s, 1, "b"))?;
        let w2 = tape.param(store, &self.name(s, 2, "w"))?;
        let b2 = tape.param(store, &self.name(s, 2, "b"))?;
        let h = tape.conv2d(x, w1, b1, 2)?;
        let h = tape.relu(h);
        let h = tape.conv2d(h, w2, b2, 1)?;
        Ok(tape.relu(h))
    }

    /// All five stages without any cross-stream interaction.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Vec<Var>> {
        self.check_input(tape.shape(x))?;
        let mut out = Vec::with_capacity(NUM_STAGES);
        let mut h = x;
        for s in 1..=NUM_STAGES {
            h = self.stage(tape, store, s, h)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Inference-only pyramid extraction.
pub fn encode_visual<F: Scalar>(
    input: &Tensor<F>,
    encoder: &VisualEncoder,
    store: &ParamStore<F>,
) -> Result<FeaturePyramid<F>> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(input.clone());
    let stages = encoder.forward(&mut tape, store, x)?;
    Ok(FeaturePyramid {
        stages: stages.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Token list with `<pad>` at id 0 and `<unk>` at id 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        for w in words {
            let w = w.into();
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        sentence.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::Format(
                "vocabulary must start with <pad> and <unk>".into(),
            ));
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// N×C_m word matrix; rows past `n_valid` are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct WordFeatures<F> {
    pub matrix: Tensor<F>,
    pub mask: Vec<bool>,
    pub n_valid: usize,
}

/// Word features living on a tape.
#[derive(Clone, Debug)]
pub struct WordVars {
    pub matrix: Var,
    pub mask: Vec<bool>,
    pub n_valid: usize,
}

pub fn word_mask(n_valid: usize, max_words: usize) -> Vec<bool> {
    (0..max_words).map(|i| i < n_valid).collect()
}

/// Embedding table followed by a single-layer gated recurrent cell.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub prefix: String,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub max_words: usize,
}

impl TextEncoder {
    fn p(&self, what: &str) -> String {
        format!("{}.{what}", self.prefix)
    }

    pub fn init<F: Scalar, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        let (e, h) = (self.embed_dim, self.hidden);
        let mut table = lecun_uniform::<F, R>(rng, &[self.vocab_size, e], 1);
        table.data_mut()[PAD_ID * e..(PAD_ID + 1) * e]
            .iter_mut()
            .for_each(|v| *v = F::zero());
        store.insert(self.p("embed"), table);
        for gate in ["z", "r", "n"] {
            store.insert(self.p(&format!("w_{gate}")), lecun_uniform(rng, &[e, h], e));
            store.insert(self.p(&format!("u_{gate}")), lecun_uniform(rng, &[h, h], h));
            store.insert(self.p(&format!("b_{gate}")), Tensor::zeros(&[h]));
        }
        store.insert(self.p("b_hn"), Tensor::zeros(&[h]));
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        ids: &[usize],
    ) -> Result<WordVars> {
        if ids.is_empty() {
            return Err(Error::invalid("encode_text: empty token list"));
        }
        if ids.len() > self.max_words {
            return Err(Error::invalid(format!(
                "encode_text: {} tokens exceed the maximum of {}",
                ids.len(),
                self.max_words
            )));
        }
        let ids: Vec<usize> = ids
            .iter()
            .map(|&i| if i < self.vocab_size { i } else { UNK_ID })
            .collect();
        let table = tape.param(store, &self.p("embed"))?;
        let emb = tape.embedding(table, &ids)?;
        let mut wp = |name: &str| tape.param(store, &self.p(name));
        let (wz, wr, wn) = (wp("w_z")?, wp("w_r")?, wp("w_n")?);
        let (uz, ur, un) = (wp("u_z")?, wp("u_r")?, wp("u_n")?);
        let (bz, br, bn, bhn) = (wp("b_z")?, wp("b_r")?, wp("b_n")?, wp("b_hn")?);

        let mut h = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let mut rows = Vec::with_capacity(self.max_words);
        for t in 0..ids.len() {
            let x = tape.slice_rows(emb, t, 1)?;
            let xz = tape.linear(x, wz, bz)?;
            let hz = tape.matmul(h, uz)?;
            let z = tape.add(xz, hz)?;
            let z = tape.sigmoid(z);
            let xr = tape.linear(x, wr, br)?;
            let hr = tape.matmul(h, ur)?;
            let r = tape.add(xr, hr)?;
            let r = tape.sigmoid(r);
            let xn = tape.linear(x, wn, bn)?;
            let hn = tape.linear(h, un, bhn)?;
            let hn = tape.mul(r, hn)?;
            let n = tape.add(xn, hn)?;
            let n = tape.tanh(n);
            // h' = (1 - z)·n + z·h = n + z·(h - n)
            let d = tape.sub(h, n)?;
            let zd = tape.mul(z, d)?;
            h = tape.add(n, zd)?;
            rows.push(h);
        }
        let n_valid = ids.len();
        if n_valid < self.max_words {
            rows.push(tape.constant(Tensor::zeros(&[self.max_words - n_valid, self.hidden])));
        }
        let matrix = if rows.len() == 1 {
            rows[0]
        } else {
            tape.concat(&rows, 0)?
        };
        Ok(WordVars {
            matrix,
            mask: word_mask(n_valid, self.max_words),
            n_valid,
        })
    }
}

/// Inference-only text encoding.
pub fn encode_text<F: Scalar>(
    ids: &[usize],
    encoder: &TextEncoder,
    store: &ParamStore<F>,
) -> Result<WordFeatures<F>> {
    let mut tape = Tape::no_grad();
    let w = encoder.forward(&mut tape, store, ids)?;
    Ok(WordFeatures {
        matrix: tape.value(w.matrix).clone(),
        mask: w.mask,
        n_valid: w.n_valid,
    })
}
