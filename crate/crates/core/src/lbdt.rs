//! Language-bridged duplex transfer between the spatial and temporal encoders.
//!
//! Inside one module both streams are projected to `C_m` channels, the word
//! features are self-attention enhanced once, and `L` layers exchange
//! information through the words: temporal features are pooled into a language
//! medium that spatial pixels then read from, and symmetrically in the other
//! direction. Both directions of a layer read the same layer inputs. The final
//! streams are projected back to the stage width and added residually.
//!
//! Feature maps are channel-first (`C×H×W`); attention runs on the reshaped
//! pixel-major form (`HW×C`).

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::encoders::WordVars;
use crate::error::{Error, Result};
use crate::nn::{Dense, Init, ParamStore};
use crate::posenc::{sinusoid_1d, sinusoid_2d};
use crate::tensor::{io, Scalar, Tape, Tensor, Var};

pub const VALID_STAGES: [usize; 4] = [2, 3, 4, 5];

#[derive(Clone, Debug, PartialEq)]
pub struct LbdtConfig {
    pub layers: usize,
    pub c_m: usize,
    pub insert_stages: Vec<usize>,
    pub mlp_hidden: usize,
    /// temporal → language → spatial transfer.
    pub enable_t2s: bool,
    /// spatial → language → temporal transfer.
    pub enable_s2t: bool,
}

impl Default for LbdtConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            c_m: 64,
            insert_stages: vec![4, 5],
            mlp_hidden: 128,
            enable_t2s: true,
            enable_s2t: true,
        }
    }
}

impl LbdtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.c_m == 0 || !self.c_m.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "c_m must be a positive multiple of 4, got {}",
                self.c_m
            )));
        }
        if self.insert_stages.is_empty() {
            return Err(Error::Config("insert_stages must not be empty".into()));
        }
        if let Some(s) = self
            .insert_stages
            .iter()
            .find(|s| !VALID_STAGES.contains(s))
        {
            return Err(Error::Config(format!(
                "insert stage {s} outside {{2, 3, 4, 5}}"
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn inserts(&self, stage: usize) -> bool {
        self.insert_stages.contains(&stage)
    }
}

/// Which encoder a feature map belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Spatial,
    Temporal,
}

/// Direction a language medium carries information in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    TemporalToSpatial,
    SpatialToTemporal,
}

impl Direction {
    pub fn source(self) -> Stream {
        match self {
            Direction::TemporalToSpatial => Stream::Temporal,
            Direction::SpatialToTemporal => Stream::Spatial,
        }
    }

    pub fn target(self) -> Stream {
        match self {
            Direction::TemporalToSpatial => Stream::Spatial,
            Direction::SpatialToTemporal => Stream::Temporal,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Direction::TemporalToSpatial => "t2s",
            Direction::SpatialToTemporal => "s2t",
        }
    }
}

/// N×C_m multimodal word matrix produced by aggregation.
#[derive(Clone, Debug)]
pub struct LanguageMedium {
    pub matrix: Var,
    pub direction: Direction,
}

/// Attention weights of one aggregation or transfer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Words (rows) over pixels (cols).
    WordToPixel,
    /// Pixels (rows) over words (cols).
    PixelToWord,
    /// Words over words.
    WordToWord,
}

/// Per-layer attention handles recorded during a module forward.
#[derive(Clone, Debug, Default)]
pub struct LayerTrace {
    /// A_{R×T}: words over temporal pixels (aggregation feeding the spatial stream).
    pub words_over_temporal: Option<Var>,
    /// A_{S×R}: spatial pixels over medium words.
    pub spatial_over_words: Option<Var>,
    /// Words over spatial pixels (aggregation feeding the temporal stream).
    pub words_over_spatial: Option<Var>,
    /// Temporal pixels over medium words.
    pub temporal_over_words: Option<Var>,
}

#[derive(Clone, Debug, Default)]
pub struct ModuleTrace {
    pub stage: usize,
    pub height: usize,
    pub width: usize,
    pub word_self_attention: Option<Var>,
    pub layers: Vec<LayerTrace>,
}

/// Flattens C×H×W into pixel-major HW×C.
pub fn to_pixels<F: Scalar>(tape: &mut Tape<F>, map: Var) -> Result<Var> {
    let s = tape.shape(map).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "to_pixels",
            lhs: s,
            rhs: vec![],
        });
    }
    let flat = tape.reshape(map, &[s[0], s[1] * s[2]])?;
    tape.transpose(flat)
}

/// Inverse of [`to_pixels`].
pub fn from_pixels<F: Scalar>(tape: &mut Tape<F>, pixels: Var, h: usize, w: usize) -> Result<Var> {
    let t = tape.transpose(pixels)?;
    let c = tape.shape(t)[0];
    tape.reshape(t, &[c, h, w])
}

fn scaled_scores<F: Scalar>(tape: &mut Tape<F>, q: Var, k: Var, c_m: usize) -> Result<Var> {
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    Ok(tape.scale(s, 1.0 / (c_m as f64).sqrt()))
}

/// Row mask over N×C_m: 1 for valid word rows, 0 for padding.
fn row_mask<F: Scalar>(mask: &[bool], c_m: usize) -> Tensor<F> {
    let data = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { F::one() } else { F::zero() }, c_m))
        .collect();
    Tensor::new(&[mask.len(), c_m], data).expect("row mask")
}

/// Word self-attention: `R' = softmax(R^Q R^K^T / sqrt(C_m)) R^V + R`, with `R^{Q,K,V} = Linear(R + P_R)`.
#[derive(Clone, Debug)]
pub struct WordEnhancer {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub c_m: usize,
}

impl WordEnhancer {
    pub fn new(prefix: &str, c_m: usize) -> Self {
        Self {
            q: Dense::new(format!("{prefix}.q"), c_m, c_m),
            k: Dense::new(format!("{prefix}.k"), c_m, c_m),
            v: Dense::new(format!("{prefix}.v"), c_m, c_m),
            c_m,
        }
    }

    pub fn init<F: Scalar, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        for d in [&self.q, &self.k, &self.v] {
            d.init(store, rng, Init::Lecun);
        }
    }

    /// Returns `(R', attention)`.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        words: &WordVars,
        pe: Var,
    ) -> Result<(Var, Var)> {
        if words.n_valid == 0 || !words.mask.iter().any(|&m| m) {
            return Err(Error::invalid("enhance_words: no valid words"));
        }
        let r = words.matrix;
        if tape.shape(r) != [words.mask.len(), self.c_m] {
            return Err(Error::Shape {
                op: "enhance_words",
                lhs: tape.shape(r).to_vec(),
                rhs: vec![words.mask.len(), self.c_m],
            });
        }
        let rp = tape.add(r, pe)?;
        let q = self.q.forward(tape, store, rp)?;
        let k = self.k.forward(tape, store, rp)?;
        let v = self.v.forward(tape, store, rp)?;
        let scores = scaled_scores(tape, q, k, self.c_m)?;
        let attn = tape.masked_softmax(scores, Some(&words.mask))?;
        let ctx = tape.matmul(attn, v)?;
        Ok((tape.add(ctx, r)?, attn))
    }
}

/// Projections of one transfer direction in one layer.
#[derive(Clone, Debug)]
pub struct DirectionalTransfer {
    pub direction: Direction,
    pub c_m: usize,
    /// Aggregation: word queries, source-pixel keys and values.
    pub agg_q: Dense,
    pub agg_k: Dense,
    pub agg_v: Dense,
    /// Transfer: target-pixel queries, medium keys and values.
    pub tr_q: Dense,
    pub tr_k: Dense,
    pub tr_v: Dense,
    pub mlp_in: Dense,
    pub mlp_out: Dense,
}

impl DirectionalTransfer {
    pub fn new(prefix: &str, direction: Direction, c_m: usize, mlp_hidden: usize) -> Self {
        let d = |n: &str, i, o| Dense::new(format!("{prefix}.{}.{n}", direction.tag()), i, o);
        Self {
            direction,
            c_m,
            agg_q: d("agg_q", c_m, c_m),
            agg_k: d("agg_k", c_m, c_m),
            agg_v: d("agg_v", c_m, c_m),
            tr_q: d("tr_q", c_m, c_m),
            tr_k: d("tr_k", c_m, c_m),
            tr_v: d("tr_v", c_m, c_m),
            mlp_in: d("mlp1", c_m, mlp_hidden),
            mlp_out: d("mlp2", mlp_hidden, c_m),
        }
    }

    pub fn init<F: Scalar, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        for d in [
            &self.agg_q,
            &self.agg_k,
            &self.agg_v,
            &self.tr_q,
            &self.tr_k,
            &self.tr_v,
        ] {
            d.init(store, rng, Init::Lecun);
        }
        self.mlp_in.init(store, rng, Init::He);
        self.mlp_out.init(store, rng, Init::Zero);
    }

    /// Pools language-relevant source information into the words.
    ///
    /// `source` is C_m×H×W, `words` is R' (N×C_m), `pe` the C_m×H×W positional map.
    /// Returns the medium `A·X^V + R'` (pad rows keep only R') and `A` (N×HW).
    pub fn aggregate<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        source: Var,
        words: Var,
        word_mask: &[bool],
        pe: Var,
    ) -> Result<(LanguageMedium, Var)> {
        let (sx, sr) = (tape.shape(source).to_vec(), tape.shape(words).to_vec());
        if sx.len() != 3 || sx[0] != self.c_m || sr.len() != 2 || sr[1] != sx[0] {
            return Err(Error::Shape {
                op: "aggregate_to_medium",
                lhs: sx,
                rhs: sr,
            });
        }
        if tape.shape(pe) != sx.as_slice() {
            return Err(Error::Shape {
                op: "aggregate_to_medium",
                lhs: sx,
                rhs: tape.shape(pe).to_vec(),
            });
        }
        let xp = tape.add(source, pe)?;
        let xp = to_pixels(tape, xp)?;
        let q = self.agg_q.forward(tape, store, words)?;
        let k = self.agg_k.forward(tape, store, xp)?;
        let v = self.agg_v.forward(tape, store, xp)?;
        let scores = scaled_scores(tape, q, k, self.c_m)?;
        let attn = tape.masked_softmax(scores, None)?;
        let pooled = tape.matmul(attn, v)?;
        let pooled = if word_mask.iter().all(|&m| m) {
            pooled
        } else {
            let m = tape.constant(row_mask(word_mask, self.c_m));
            tape.mul(pooled, m)?
        };
        let medium = tape.add(pooled, words)?;
        Ok((
            LanguageMedium {
                matrix: medium,
                direction: self.direction,
            },
            attn,
        ))
    }

    /// Lets every target pixel read from the medium: `X + MLP(A·M^V)` with A (HW×N) masked over pad words.
    #[allow(clippy::too_many_arguments)]
    pub fn transfer<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        target: Var,
        target_stream: Stream,
        medium: &LanguageMedium,
        word_mask: Option<&[bool]>,
        pe: Var,
    ) -> Result<(Var, Var)> {
        if medium.direction.target() != target_stream {
            return Err(Error::invalid(format!(
                "transfer_from_medium: {:?} medium cannot feed the {:?} stream",
                medium.direction, target_stream
            )));
        }
        let mask = word_mask.ok_or_else(|| Error::invalid("transfer_from_medium: word mask required"))?;
        let s = tape.shape(target).to_vec();
        if s.len() != 3 || s[0] != self.c_m || tape.shape(pe) != s.as_slice() {
            return Err(Error::Shape {
                op: "transfer_from_medium",
                lhs: s,
                rhs: tape.shape(pe).to_vec(),
            });
        }
        let (h, w) = (s[1], s[2]);
        let xp = tape.add(target, pe)?;
        let xp = to_pixels(tape, xp)?;
        let q = self.tr_q.forward(tape, store, xp)?;
        let k = self.tr_k.forward(tape, store, medium.matrix)?;
        let v = self.tr_v.forward(tape, store, medium.matrix)?;
        let scores = scaled_scores(tape, q, k, self.c_m)?;
        let attn = tape.masked_softmax(scores, Some(mask))?;
        let ctx = tape.matmul(attn, v)?;
        let hidden = self.mlp_in.forward(tape, store, ctx)?;
        let hidden = tape.relu(hidden);
        let delta = self.mlp_out.forward(tape, store, hidden)?;
        let delta = from_pixels(tape, delta, h, w)?;
        Ok((tape.add(delta, target)?, attn))
    }
}

/// One LBDT module attached to a single encoder stage.
#[derive(Clone, Debug)]
pub struct LbdtModule {
    pub prefix: String,
    pub stage: usize,
    pub channels: usize,
    pub cfg: LbdtConfig,
    pub in_spatial: Dense,
    pub in_temporal: Dense,
    pub words: WordEnhancer,
    pub layers: Vec<[DirectionalTransfer; 2]>,
    pub out_spatial: Dense,
    pub out_temporal: Dense,
}

impl LbdtModule {
    pub fn new(prefix: impl Into<String>, stage: usize, channels: usize, cfg: &LbdtConfig) -> Self {
        let prefix = prefix.into();
        let c_m = cfg.c_m;
        let layers = (0..cfg.layers)
            .map(|l| {
                let lp = format!("{prefix}.l{l}");
                [
                    DirectionalTransfer::new(&lp, Direction::TemporalToSpatial, c_m, cfg.mlp_hidden),
                    DirectionalTransfer::new(&lp, Direction::SpatialToTemporal, c_m, cfg.mlp_hidden),
                ]
            })
            .collect();
        Self {
            in_spatial: Dense::new(format!("{prefix}.in_s"), channels, c_m),
            in_temporal: Dense::new(format!("{prefix}.in_t"), channels, c_m),
            words: WordEnhancer::new(&format!("{prefix}.words"), c_m),
            layers,
            out_spatial: Dense::new(format!("{prefix}.out_s"), c_m, channels),
            out_temporal: Dense::new(format!("{prefix}.out_t"), c_m, channels),
            prefix,
            stage,
            channels,
            cfg: cfg.clone(),
        }
    }

    pub fn init<F: Scalar, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        self.in_spatial.init(store, rng, Init::Lecun);
        self.in_temporal.init(store, rng, Init::Lecun);
        self.words.init(store, rng);
        for pair in &self.layers {
            for d in pair {
                d.init(store, rng);
            }
        }
        self.out_spatial.init(store, rng, Init::Zero);
        self.out_temporal.init(store, rng, Init::Zero);
    }

    /// Number of scalar parameters this module owns.
    pub fn param_count(&self, store: &ParamStore<impl Scalar>) -> usize {
        let dot = format!("{}.", self.prefix);
        store
            .iter()
            .filter(|(n, _)| n.starts_with(&dot))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// `T¹ = Linear(T)`, `S¹ = Linear(S)` on every pixel; outputs stay C_m×H×W.
    pub fn project_in<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        spatial: Var,
        temporal: Var,
    ) -> Result<(Var, Var)> {
        let (ss, st) = (tape.shape(spatial).to_vec(), tape.shape(temporal).to_vec());
        if ss != st || ss.len() != 3 || ss[0] != self.channels {
            return Err(Error::Shape {
                op: "project_in",
                lhs: ss,
                rhs: st,
            });
        }
        let (h, w) = (ss[1], ss[2]);
        let sp = to_pixels(tape, spatial)?;
        let s1 = self.in_spatial.forward(tape, store, sp)?;
        let tp = to_pixels(tape, temporal)?;
        let t1 = self.in_temporal.forward(tape, store, tp)?;
        Ok((from_pixels(tape, s1, h, w)?, from_pixels(tape, t1, h, w)?))
    }

    /// Full module: returns updated `(S, T)` at the stage width plus the attention trace.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        spatial: Var,
        temporal: Var,
        words: &WordVars,
    ) -> Result<(Var, Var, ModuleTrace)> {
        let s = tape.shape(spatial).to_vec();
        let (h, w) = (s[1], s[2]);
        let c_m = self.cfg.c_m;
        let (mut s_l, mut t_l) = self.project_in(tape, store, spatial, temporal)?;

        let pe_words = tape.constant(sinusoid_1d(words.mask.len(), c_m)?.tensor());
        let (enhanced, word_attn) = self.words.forward(tape, store, words, pe_words)?;
        let pe = tape.constant(sinusoid_2d(h, w, c_m)?.tensor());

        let mut trace = ModuleTrace {
            stage: self.stage,
            height: h,
            width: w,
            word_self_attention: Some(word_attn),
            layers: Vec::with_capacity(self.layers.len()),
        };
        for [t2s, s2t] in &self.layers {
            let mut lt = LayerTrace::default();
            let mut next_s = s_l;
            let mut next_t = t_l;
            if self.cfg.enable_t2s {
                let (medium, a_rt) = t2s.aggregate(tape, store, t_l, enhanced, &words.mask, pe)?;
                let (out, a_sr) =
                    t2s.transfer(tape, store, s_l, Stream::Spatial, &medium, Some(&words.mask), pe)?;
                next_s = out;
                lt.words_over_temporal = Some(a_rt);
                lt.spatial_over_words = Some(a_sr);
            }
            if self.cfg.enable_s2t {
                let (medium, a_rs) = s2t.aggregate(tape, store, s_l, enhanced, &words.mask, pe)?;
                let (out, a_tr) =
                    s2t.transfer(tape, store, t_l, Stream::Temporal, &medium, Some(&words.mask), pe)?;
                next_t = out;
                lt.words_over_spatial = Some(a_rs);
                lt.temporal_over_words = Some(a_tr);
            }
            s_l = next_s;
            t_l = next_t;
            trace.layers.push(lt);
        }

        let sp = to_pixels(tape, s_l)?;
        let s_up = self.out_spatial.forward(tape, store, sp)?;
        let s_up = from_pixels(tape, s_up, h, w)?;
        let tp = to_pixels(tape, t_l)?;
        let t_up = self.out_temporal.forward(tape, store, tp)?;
        let t_up = from_pixels(tape, t_up, h, w)?;
        Ok((
            tape.add(spatial, s_up)?,
            tape.add(temporal, t_up)?,
            trace,
        ))
    }
}

/// Baseline that skips the language bridge: sentence-fused spatial and temporal pixels
/// attend to each other directly (HW×HW attention in each direction).
#[derive(Clone, Debug)]
pub struct DirectCrossAttention {
    pub c_m: usize,
    pub fuse: Dense,
    /// Per direction: queries, keys, values, MLP.
    pub s_from_t: [Dense; 5],
    pub t_from_s: [Dense; 5],
}

impl DirectCrossAttention {
    pub fn new(prefix: &str, c_m: usize, mlp_hidden: usize) -> Self {
        let set = |tag: &str| {
            [
                Dense::new(format!("{prefix}.{tag}.q"), c_m, c_m),
                Dense::new(format!("{prefix}.{tag}.k"), c_m, c_m),
                Dense::new(format!("{prefix}.{tag}.v"), c_m, c_m),
                Dense::new(format!("{prefix}.{tag}.mlp1"), c_m, mlp_hidden),
                Dense::new(format!("{prefix}.{tag}.mlp2"), mlp_hidden, c_m),
            ]
        };
        Self {
            c_m,
            fuse: Dense::new(format!("{prefix}.fuse"), c_m, c_m),
            s_from_t: set("s_from_t"),
            t_from_s: set("t_from_s"),
        }
    }

    pub fn init<F: Scalar, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        self.fuse.init(store, rng, Init::Lecun);
        for d in self.s_from_t.iter().chain(&self.t_from_s) {
            d.init(store, rng, Init::Lecun);
        }
    }

    fn one_way<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        set: &[Dense; 5],
        query: Var,
        source: Var,
    ) -> Result<Var> {
        let q = set[0].forward(tape, store, query)?;
        let k = set[1].forward(tape, store, source)?;
        let v = set[2].forward(tape, store, source)?;
        let scores = scaled_scores(tape, q, k, self.c_m)?;
        let attn = tape.masked_softmax(scores, None)?;
        let ctx = tape.matmul(attn, v)?;
        let hdn = set[3].forward(tape, store, ctx)?;
        let hdn = tape.relu(hdn);
        let out = set[4].forward(tape, store, hdn)?;
        tape.add(out, query)
    }

    /// `spatial`, `temporal`: HW×C_m pixel matrices; `sentence`: 1×C_m.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        spatial: Var,
        temporal: Var,
        sentence: Var,
    ) -> Result<(Var, Var)> {
        let hw = tape.shape(spatial)[0];
        let lang = self.fuse.forward(tape, store, sentence)?;
        let ones = tape.constant(Tensor::full(&[hw, 1], F::one()));
        let lang = tape.matmul(ones, lang)?;
        let s = tape.add(spatial, lang)?;
        let t = tape.add(temporal, lang)?;
        let s_out = self.one_way(tape, store, &self.s_from_t, s, t)?;
        let t_out = self.one_way(tape, store, &self.t_from_s, t, s)?;
        Ok((s_out, t_out))
    }
}

/// Writes a words×pixels attention map as `n_valid×H×W` plus a sidecar with one word per line.
///
/// The tensor goes to `out` and the words to `out` with a `.words.txt` suffix appended.
pub fn dump_attention<F: Scalar>(
    attention: &Tensor<F>,
    words: &[String],
    height: usize,
    width: usize,
    out: &Path,
) -> Result<()> {
    let s = attention.shape();
    if s.len() != 2 || s[1] != height * width || words.len() > s[0] || words.is_empty() {
        return Err(Error::Shape {
            op: "dump_attention",
            lhs: s.to_vec(),
            rhs: vec![words.len(), height, width],
        });
    }
    let n = words.len();
    let data = attention.data()[..n * height * width].to_vec();
    let maps = Tensor::new(&[n, height, width], data)?;
    io::write(out, &maps)?;
    let mut side = words.join("\n");
    side.push('\n');
    let side_path = sidecar_path(out);
    fs::write(&side_path, side).map_err(|e| Error::io(side_path, e))
}

pub fn sidecar_path(out: &Path) -> std::path::PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".words.txt");
    p.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::word_mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn words_var(tape: &mut Tape<f64>, data: &[f64], n: usize, c: usize, valid: usize) -> WordVars {
        let m = tape.constant(Tensor::from_f64(&[n, c], data).unwrap());
        WordVars {
            matrix: m,
            mask: word_mask(valid, n),
            n_valid: valid,
        }
    }

    fn identity(store: &mut ParamStore<f64>, d: &Dense) {
        let mut w = vec![0.0; d.inp * d.out];
        for i in 0..d.inp.min(d.out) {
            w[i * d.out + i] = 1.0;
        }
        store.insert(d.weight_name(), Tensor::new(&[d.inp, d.out], w).unwrap());
        store.insert(d.bias_name(), Tensor::zeros(&[d.out]));
    }

    #[test]
    fn config_validation() {
        assert!(LbdtConfig::default().validate().is_ok());
        let bad = LbdtConfig {
            insert_stages: vec![1],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LbdtConfig {
            layers: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn project_in_zero_and_identity() {
        let cfg = LbdtConfig {
            c_m: 4,
            ..Default::default()
        };
        let m = LbdtModule::new("m", 4, 4, &cfg);
        let mut store = ParamStore::new();
        m.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[4, 3, 2]));
        let (s1, t1) = m.project_in(&mut tape, &store, z, z).unwrap();
        assert_eq!(tape.shape(s1), &[4, 3, 2]);
        assert!(tape.data(s1).iter().chain(tape.data(t1)).all(|&v| v == 0.0));

        identity(&mut store, &m.in_spatial);
        let mut tape = Tape::new();
        let x: Vec<f64> = (0..24).map(|i| i as f64 * 0.1).collect();
        let xv = tape.constant(Tensor::from_f64(&[4, 3, 2], &x).unwrap());
        let (s1, _) = m.project_in(&mut tape, &store, xv, xv).unwrap();
        assert_eq!(tape.data(s1), &x[..]);
    }

    #[test]
    fn single_word_self_attention_doubles_row() {
        let enh = WordEnhancer::new("w", 4);
        let mut store = ParamStore::new();
        for d in [&enh.q, &enh.k, &enh.v] {
            identity(&mut store, d);
        }
        let mut tape = Tape::new();
        let mut data = vec![0.0; 3 * 4];
        data[..4].copy_from_slice(&[0.3, -0.2, 0.5, 1.0]);
        let words = words_var(&mut tape, &data, 3, 4, 1);
        let pe = tape.constant(Tensor::zeros(&[3, 4]));
        let (r, a) = enh.forward(&mut tape, &store, &words, pe).unwrap();
        assert_eq!(tape.shape(r), &[3, 4]);
        let a = tape.data(a);
        for row in 0..3 {
            assert_eq!(&a[row * 3..row * 3 + 3], &[1.0, 0.0, 0.0]);
        }
        let r = tape.data(r);
        for c in 0..4 {
            assert!((r[c] - 2.0 * data[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn enhance_rejects_no_valid_words() {
        let enh = WordEnhancer::new("w", 4);
        let mut store = ParamStore::new();
        enh.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let words = words_var(&mut tape, &[0.0; 8], 2, 4, 0);
        let pe = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(enh.forward(&mut tape, &store, &words, pe).is_err());
    }

    fn transfer_with_identity(c_m: usize) -> (DirectionalTransfer, ParamStore<f64>) {
        let d = DirectionalTransfer::new("x", Direction::TemporalToSpatial, c_m, 2 * c_m);
        let mut store = ParamStore::new();
        d.init(&mut store, &mut ChaCha8Rng::seed_from_u64(5));
        for p in [&d.agg_q, &d.agg_k, &d.agg_v, &d.tr_q, &d.tr_k, &d.tr_v] {
            identity(&mut store, p);
        }
        (d, store)
    }

    #[test]
    fn uniform_pixels_give_value_plus_words() {
        let (d, store) = transfer_with_identity(4);
        let mut tape = Tape::new();
        let v = [0.4, -0.1, 0.7, 0.2];
        let map: Vec<f64> = v.iter().flat_map(|&c| std::iter::repeat(c).take(6)).collect();
        let x = tape.constant(Tensor::from_f64(&[4, 2, 3], &map).unwrap());
        let r: Vec<f64> = (0..8).map(|i| i as f64 * 0.05).collect();
        let words = tape.constant(Tensor::from_f64(&[2, 4], &r).unwrap());
        let pe = tape.constant(Tensor::zeros(&[4, 2, 3]));
        let (m, a) = d.aggregate(&mut tape, &store, x, words, &[true, true], pe).unwrap();
        assert_eq!(m.direction, Direction::TemporalToSpatial);
        for row in tape.data(a).chunks(6) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let med = tape.data(m.matrix);
        for n in 0..2 {
            for c in 0..4 {
                assert!((med[n * 4 + c] - (v[c] + r[n * 4 + c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_two_keys_by_hand() {
        // N = 1, HW = 2, 2 channels; brute-force scalar evaluation
        let d = DirectionalTransfer::new("x", Direction::SpatialToTemporal, 4, 8);
        let mut store = ParamStore::new();
        d.init(&mut store, &mut ChaCha8Rng::seed_from_u64(5));
        for p in [&d.agg_q, &d.agg_k, &d.agg_v] {
            identity(&mut store, p);
        }
        let mut tape = Tape::new();
        // pixels p0 = (1, 0, 0, 0), p1 = (0, 2, 0, 0); channels-first 4×1×2
        let x = tape.constant(Tensor::from_f64(&[4, 1, 2], &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let r = [0.5, 0.25, 0.0, 0.0];
        let words = tape.constant(Tensor::from_f64(&[1, 4], &r).unwrap());
        let pe = tape.constant(Tensor::zeros(&[4, 1, 2]));
        let (m, a) = d.aggregate(&mut tape, &store, x, words, &[true], pe).unwrap();
        let s0 = (0.5 * 1.0) / 2.0;
        let s1 = (0.25 * 2.0) / 2.0;
        let (e0, e1) = (f64::exp(s0), f64::exp(s1));
        let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        assert!((tape.data(a)[0] - a0).abs() < 1e-14);
        let expect = [a0 * 1.0 + 0.5, a1 * 2.0 + 0.25, 0.0, 0.0];
        for (got, want) in tape.data(m.matrix).iter().zip(expect) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn transfer_is_identity_with_zero_mlp_output() {
        let (d, store) = transfer_with_identity(4);
        let mut tape = Tape::new();
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let xv = tape.constant(Tensor::from_f64(&[4, 2, 2], &x).unwrap());
        let med = tape.constant(Tensor::from_f64(&[3, 4], &[0.1; 12]).unwrap());
        let medium = LanguageMedium {
            matrix: med,
            direction: Direction::TemporalToSpatial,
        };
        let pe = tape.constant(sinusoid_2d(2, 2, 4).unwrap().tensor());
        let mask = [true, true, false];
        let (out, a) = d
            .transfer(&mut tape, &store, xv, Stream::Spatial, &medium, Some(&mask), pe)
            .unwrap();
        assert_eq!(tape.data(out), &x[..]);
        for row in tape.data(a).chunks(3) {
            assert_eq!(row[2], 0.0);
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
        assert!(d
            .transfer(&mut tape, &store, xv, Stream::Spatial, &medium, None, pe)
            .is_err());
        assert!(d
            .transfer(&mut tape, &store, xv, Stream::Temporal, &medium, Some(&mask), pe)
            .is_err());
    }

    #[test]
    fn transfer_hand_case_one_pixel_two_words() {
        let (d, mut store) = transfer_with_identity(4);
        identity(&mut store, &d.mlp_in);
        let mut w2 = vec![0.0; 8 * 4];
        for i in 0..4 {
            w2[i * 4 + i] = 1.0;
        }
        store.insert(d.mlp_out.weight_name(), Tensor::new(&[8, 4], w2).unwrap());
        let mut tape = Tape::new();
        let x = [0.6, -0.4, 0.0, 1.0];
        let xv = tape.constant(Tensor::from_f64(&[4, 1, 1], &x).unwrap());
        let m = [1.0, 0.0, 0.5, 0.0, -0.5, 1.0, 0.0, 2.0];
        let med = tape.constant(Tensor::from_f64(&[2, 4], &m).unwrap());
        let medium = LanguageMedium {
            matrix: med,
            direction: Direction::TemporalToSpatial,
        };
        let pe = tape.constant(Tensor::zeros(&[4, 1, 1]));
        let (out, _) = d
            .transfer(&mut tape, &store, xv, Stream::Spatial, &medium, Some(&[true, true]), pe)
            .unwrap();
        let dot = |w: usize| (0..4).map(|c| x[c] * m[w * 4 + c]).sum::<f64>() / 2.0;
        let (e0, e1) = (dot(0).exp(), dot(1).exp());
        let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        for c in 0..4 {
            let ctx = a0 * m[c] + a1 * m[4 + c];
            let want = x[c] + ctx.max(0.0);
            assert!((tape.data(out)[c] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn dump_uniform_map() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("attn.lbdt");
        let a = Tensor::<f32>::full(&[25, 16], 1.0 / 16.0);
        let words: Vec<String> = ["red", "circle", "jumping"].map(String::from).to_vec();
        dump_attention(&a, &words, 4, 4, &out).unwrap();
        let back: Tensor<f32> = io::read(&out).unwrap();
        assert_eq!(back.shape(), &[3, 4, 4]);
        assert!(back.data().iter().all(|&v| v == 1.0 / 16.0));
        let side = fs::read_to_string(sidecar_path(&out)).unwrap();
        assert_eq!(side.lines().count(), 3);
        let again = io::encode(&back);
        assert_eq!(again, fs::read(&out).unwrap());
    }
}
