//! Analytic FLOP counts and wall-clock timing of bridged versus direct attention.
//!
//! Counting conventions: a multiply-add is 2 FLOPs, so a linear map m→n on B
//! rows costs `2·B·m·n` (bias excluded), a 3×3 convolution
//! `2·9·C_in·C_out·H_out·W_out`, and a product rows×inner×cols
//! `2·rows·inner·cols`. Nonlinearities, softmax, elementwise arithmetic,
//! pooling and resampling cost 1 FLOP per element they produce (pooling: per
//! element read).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{word_mask, WordVars, NUM_STAGES};
use crate::error::{Error, Result};
use crate::lbdt::{DirectCrossAttention, LbdtConfig, LbdtModule};
use crate::model::ModelConfig;
use crate::nn::{uniform, ParamStore};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopEntry {
    pub module: String,
    pub op: &'static str,
    pub dims: Vec<usize>,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopsLedger {
    pub entries: Vec<FlopEntry>,
}

pub fn linear_flops(rows: usize, inp: usize, out: usize) -> u64 {
    2 * (rows * inp * out) as u64
}

pub fn product_flops(rows: usize, inner: usize, cols: usize) -> u64 {
    2 * (rows * inner * cols) as u64
}

pub fn conv_flops(c_in: usize, c_out: usize, h_out: usize, w_out: usize) -> u64 {
    2 * 9 * (c_in * c_out * h_out * w_out) as u64
}

/// Word-by-pixel score product of the bridged path.
pub fn bridged_score_flops(hw: usize, n: usize, c_m: usize) -> u64 {
    product_flops(n, c_m, hw)
}

/// Pixel-by-pixel score product of the direct path.
pub fn direct_score_flops(hw: usize, c_m: usize) -> u64 {
    product_flops(hw, c_m, hw)
}

impl FlopsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, module: &str, op: &'static str, dims: &[usize], flops: u64) {
        self.entries.push(FlopEntry {
            module: module.to_string(),
            op,
            dims: dims.to_vec(),
            flops,
        });
    }

    pub fn linear(&mut self, module: &str, rows: usize, inp: usize, out: usize) {
        self.push(module, "linear", &[rows, inp, out], linear_flops(rows, inp, out));
    }

    pub fn product(&mut self, module: &str, op: &'static str, rows: usize, inner: usize, cols: usize) {
        self.push(module, op, &[rows, inner, cols], product_flops(rows, inner, cols));
    }

    pub fn conv(&mut self, module: &str, c_in: usize, c_out: usize, h_out: usize, w_out: usize) {
        self.push(
            module,
            "conv3x3",
            &[c_in, c_out, h_out, w_out],
            conv_flops(c_in, c_out, h_out, w_out),
        );
    }

    /// One FLOP per element.
    pub fn pointwise(&mut self, module: &str, op: &'static str, dims: &[usize]) {
        let n: usize = dims.iter().product();
        self.push(module, op, dims, n as u64);
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn total_for(&self, module_prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.module.starts_with(module_prefix))
            .map(|e| e.flops)
            .sum()
    }

    /// Sum of entries with the given op label.
    pub fn total_op(&self, op: &str) -> u64 {
        self.entries.iter().filter(|e| e.op == op).map(|e| e.flops).sum()
    }

    pub fn by_module(&self) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.module.clone()).or_insert(0) += e.flops;
        }
        m
    }

    pub fn extend(&mut self, other: FlopsLedger) {
        self.entries.extend(other.entries);
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("module\top\tdims\tflops\n");
        for e in &self.entries {
            let dims: Vec<String> = e.dims.iter().map(usize::to_string).collect();
            writeln!(s, "{}\t{}\t{}\t{}", e.module, e.op, dims.join("x"), e.flops).unwrap();
        }
        for (m, f) in self.by_module() {
            writeln!(s, "{m}\ttotal\t-\t{f}").unwrap();
        }
        writeln!(s, "model\ttotal\t-\t{}", self.total()).unwrap();
        s
    }

    pub fn to_json(&self) -> String {
        let entries: Vec<String> = self
            .entries
            .iter()
            .map(|e| {
                let dims: Vec<String> = e.dims.iter().map(usize::to_string).collect();
                format!(
                    "{{\"module\": \"{}\", \"op\": \"{}\", \"dims\": [{}], \"flops\": {}}}",
                    e.module,
                    e.op,
                    dims.join(", "),
                    e.flops
                )
            })
            .collect();
        let modules: Vec<String> = self
            .by_module()
            .iter()
            .map(|(m, f)| format!("\"{m}\": {f}"))
            .collect();
        format!(
            "{{\"entries\": [{}], \"modules\": {{{}}}, \"total\": {}}}",
            entries.join(", "),
            modules.join(", "),
            self.total()
        )
    }
}

/// Attention sub-block shared by both transfer directions.
fn attention_block(l: &mut FlopsLedger, m: &str, rows: usize, cols: usize, c_m: usize) {
    l.product(m, "scores", rows, c_m, cols);
    l.pointwise(m, "scale", &[rows, cols]);
    l.pointwise(m, "softmax", &[rows, cols]);
    l.product(m, "context", rows, cols, c_m);
}

/// One transfer module at a stage with `hw` pixels, `channels` stage width,
/// `n` word slots of which `n_valid` hold words.
pub fn lbdt_module_flops(
    module: &str,
    hw: usize,
    channels: usize,
    n: usize,
    n_valid: usize,
    cfg: &LbdtConfig,
) -> FlopsLedger {
    let mut l = FlopsLedger::new();
    let (c, c_m, hid) = (channels, cfg.c_m, cfg.mlp_hidden);
    for _ in 0..2 {
        l.linear(module, hw, c, c_m);
    }
    let w = format!("{module}.words");
    l.pointwise(&w, "add", &[n, c_m]);
    for _ in 0..3 {
        l.linear(&w, n, c_m, c_m);
    }
    attention_block(&mut l, &w, n, n, c_m);
    l.pointwise(&w, "add", &[n, c_m]);

    for layer in 0..cfg.layers {
        for (tag, on) in [("t2s", cfg.enable_t2s), ("s2t", cfg.enable_s2t)] {
            if !on {
                continue;
            }
            let m = format!("{module}.l{layer}.{tag}");
            // aggregation into the words
            l.pointwise(&m, "add", &[hw, c_m]);
            l.linear(&m, n, c_m, c_m);
            l.linear(&m, hw, c_m, c_m);
            l.linear(&m, hw, c_m, c_m);
            attention_block(&mut l, &m, n, hw, c_m);
            if n_valid < n {
                l.pointwise(&m, "mask", &[n, c_m]);
            }
            l.pointwise(&m, "add", &[n, c_m]);
            // transfer back to pixels
            l.pointwise(&m, "add", &[hw, c_m]);
            l.linear(&m, hw, c_m, c_m);
            l.linear(&m, n, c_m, c_m);
            l.linear(&m, n, c_m, c_m);
            attention_block(&mut l, &m, hw, n, c_m);
            l.linear(&m, hw, c_m, hid);
            l.pointwise(&m, "relu", &[hw, hid]);
            l.linear(&m, hw, hid, c_m);
            l.pointwise(&m, "add", &[hw, c_m]);
        }
    }
    for _ in 0..2 {
        l.linear(module, hw, c_m, c);
        l.pointwise(module, "add", &[hw, c]);
    }
    l
}

/// Direct spatial↔temporal cross-attention on `hw` pixels of width `c_m`.
pub fn direct_attention_flops(module: &str, hw: usize, c_m: usize, mlp_hidden: usize) -> FlopsLedger {
    let mut l = FlopsLedger::new();
    l.linear(module, 1, c_m, c_m);
    l.product(module, "broadcast", hw, 1, c_m);
    l.pointwise(module, "add", &[hw, c_m]);
    l.pointwise(module, "add", &[hw, c_m]);
    for tag in ["s_from_t", "t_from_s"] {
        let m = format!("{module}.{tag}");
        for _ in 0..3 {
            l.linear(&m, hw, c_m, c_m);
        }
        attention_block(&mut l, &m, hw, hw, c_m);
        l.linear(&m, hw, c_m, mlp_hidden);
        l.pointwise(&m, "relu", &[hw, mlp_hidden]);
        l.linear(&m, hw, mlp_hidden, c_m);
        l.pointwise(&m, "add", &[hw, c_m]);
    }
    l
}

/// Full model forward pass for an expression of `words` tokens.
pub fn count_flops(cfg: &ModelConfig, words: usize) -> FlopsLedger {
    let mut l = FlopsLedger::new();
    let (h0, w0) = (cfg.height, cfg.width);
    l.pointwise("input", "abs_diff", &[3, h0, w0]);
    for enc in ["spatial", "temporal"] {
        let (mut c_in, mut h, mut w) = (3, h0, w0);
        for s in 1..=NUM_STAGES {
            let c = cfg.stage_channels[s - 1];
            let m = format!("{enc}.s{s}");
            h /= 2;
            w /= 2;
            l.conv(&m, c_in, c, h, w);
            l.pointwise(&m, "relu", &[c, h, w]);
            l.conv(&m, c, c, h, w);
            l.pointwise(&m, "relu", &[c, h, w]);
            c_in = c;
        }
    }
    let (e, hd) = (cfg.word_dim, cfg.lbdt.c_m);
    for _ in 0..words {
        for _ in 0..3 {
            l.linear("text", 1, e, hd);
            l.product("text", "recurrent", 1, hd, hd);
        }
        l.pointwise("text", "sigmoid", &[2, hd]);
        l.pointwise("text", "tanh", &[hd]);
        l.pointwise("text", "gate", &[7, hd]);
    }
    for &s in &cfg.lbdt.insert_stages {
        let (h, w) = (h0 >> s, w0 >> s);
        l.extend(lbdt_module_flops(
            &format!("lbdt.s{s}"),
            h * w,
            cfg.stage_channels[s - 1],
            cfg.max_words,
            words,
            &cfg.lbdt,
        ));
    }
    let (h2, w2) = (h0 / 4, w0 / 4);
    let c_d = cfg.c_d;
    for dec in ["decode_s", "decode_t"] {
        for s in 2..=NUM_STAGES {
            let (h, w) = (h0 >> s, w0 >> s);
            l.linear(dec, h * w, cfg.stage_channels[s - 1], c_d);
            if s > 2 {
                l.pointwise(dec, "upsample", &[c_d, h2, w2]);
                l.pointwise(dec, "add", &[c_d, h2, w2]);
            }
        }
    }
    l.pointwise("bca", "sentence", &[words, hd]);
    l.pointwise("bca", "pool", &[2, c_d, h2, w2]);
    if cfg.bca.denoiser {
        for _ in 0..2 {
            l.linear("bca", 1, c_d + hd, c_d);
            l.pointwise("bca", "sigmoid", &[c_d]);
            l.pointwise("bca", "gate", &[c_d, h2, w2]);
        }
    }
    if cfg.bca.activator {
        l.linear("bca", 1, 2 * c_d, c_d);
        l.pointwise("bca", "relu", &[c_d]);
        for _ in 0..2 {
            l.linear("bca", 1, c_d, c_d);
            l.pointwise("bca", "sigmoid", &[c_d]);
            l.pointwise("bca", "gate", &[c_d, h2, w2]);
        }
    }
    l.conv("head", 2 * c_d, c_d, h2, w2);
    l.pointwise("head", "relu", &[c_d, h2, w2]);
    l.conv("head", c_d, 1, h2, w2);
    l.pointwise("head", "sigmoid", &[h2, w2]);
    l.pointwise("head", "upsample", &[h0, w0]);
    l
}

/// Exact quadratic fit `a + b·x + c·x²` through three points.
pub fn quadratic_fit(points: [(f64, f64); 3]) -> (f64, f64, f64) {
    let [(x0, y0), (x1, y1), (x2, y2)] = points;
    let d01 = (y1 - y0) / (x1 - x0);
    let d12 = (y2 - y1) / (x2 - x1);
    let c = (d12 - d01) / (x2 - x0);
    let b = d01 - c * (x0 + x1);
    let a = y0 - b * x0 - c * x0 * x0;
    (a, b, c)
}

/// True when the three points are collinear, checked in exact integer arithmetic.
pub fn is_affine(points: [(u64, u64); 3]) -> bool {
    let [(x0, y0), (x1, y1), (x2, y2)] = points.map(|(x, y)| (x as i128, y as i128));
    (y1 - y0) * (x2 - x1) == (y2 - y1) * (x1 - x0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: &'static str,
    pub height: usize,
    pub width: usize,
    pub words: usize,
    pub c_m: usize,
    pub median_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub flops: u64,
}

impl BenchRow {
    pub fn tsv_header() -> &'static str {
        "variant\theight\twidth\twords\tc_m\tmedian_s\tmin_s\tmax_s\tflops"
    }

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{:.6e}\t{:.6e}\t{:.6e}\t{}",
            self.variant, self.height, self.width, self.words, self.c_m, self.median_s, self.min_s, self.max_s, self.flops
        )
    }

    pub fn to_json(&self) -> String {
        format!(
            "{{\"variant\": \"{}\", \"height\": {}, \"width\": {}, \"words\": {}, \"c_m\": {}, \
             \"median_s\": {:e}, \"min_s\": {:e}, \"max_s\": {:e}, \"flops\": {}}}",
            self.variant, self.height, self.width, self.words, self.c_m, self.median_s, self.min_s, self.max_s, self.flops
        )
    }
}

fn timed(reps: usize, f: &dyn Fn() -> Result<()>) -> Result<(f64, f64, f64)> {
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = if reps % 2 == 1 {
        times[reps / 2]
    } else {
        0.5 * (times[reps / 2 - 1] + times[reps / 2])
    };
    Ok((median, times[0], times[reps - 1]))
}

/// Inputs and weights for timing one attention variant at a fixed size.
pub struct AttentionCase {
    pub height: usize,
    pub width: usize,
    pub words: usize,
    pub c_m: usize,
    cfg: LbdtConfig,
    module: LbdtModule,
    direct: DirectCrossAttention,
    store: ParamStore<f32>,
    spatial: Tensor<f32>,
    temporal: Tensor<f32>,
    word_matrix: Tensor<f32>,
    sentence: Tensor<f32>,
}

impl AttentionCase {
    /// Random C_m×H×W maps, N words and fixed weights; the MLP width is 2·C_m.
    pub fn new(height: usize, width: usize, words: usize, c_m: usize) -> Result<Self> {
        let cfg = LbdtConfig {
            c_m,
            mlp_hidden: 2 * c_m,
            insert_stages: vec![4],
            ..Default::default()
        };
        cfg.validate()?;
        if height * width == 0 || words == 0 {
            return Err(Error::invalid("attention case needs pixels and words"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let module = LbdtModule::new("bench", 4, c_m, &cfg);
        let direct = DirectCrossAttention::new("direct", c_m, 2 * c_m);
        let mut store = ParamStore::new();
        module.init(&mut store, &mut rng);
        direct.init(&mut store, &mut rng);
        Ok(Self {
            height,
            width,
            words,
            c_m,
            spatial: uniform(&mut rng, &[c_m, height, width], 1.0),
            temporal: uniform(&mut rng, &[c_m, height, width], 1.0),
            word_matrix: uniform(&mut rng, &[words, c_m], 1.0),
            sentence: uniform(&mut rng, &[1, c_m], 1.0),
            cfg,
            module,
            direct,
            store,
        })
    }

    /// One LBDT module forward pass (both directions, one layer).
    pub fn run_bridged(&self) -> Result<()> {
        let mut tape = Tape::no_grad();
        let s = tape.constant(self.spatial.clone());
        let t = tape.constant(self.temporal.clone());
        let words = WordVars {
            matrix: tape.constant(self.word_matrix.clone()),
            mask: word_mask(self.words, self.words),
            n_valid: self.words,
        };
        self.module.forward(&mut tape, &self.store, s, t, &words)?;
        Ok(())
    }

    /// Direct pixel-to-pixel cross-attention in both directions.
    pub fn run_direct(&self) -> Result<()> {
        let hw = self.height * self.width;
        let mut tape = Tape::no_grad();
        let s = tape.constant(self.spatial.clone().reshaped(&[self.c_m, hw])?);
        let s = tape.transpose(s)?;
        let t = tape.constant(self.temporal.clone().reshaped(&[self.c_m, hw])?);
        let t = tape.transpose(t)?;
        let sentence = tape.constant(self.sentence.clone());
        self.direct.forward(&mut tape, &self.store, s, t, sentence)?;
        Ok(())
    }

    pub fn bridged_flops(&self) -> u64 {
        let hw = self.height * self.width;
        lbdt_module_flops("bench", hw, self.c_m, self.words, self.words, &self.cfg).total()
    }

    pub fn direct_flops(&self) -> u64 {
        direct_attention_flops("direct", self.height * self.width, self.c_m, 2 * self.c_m).total()
    }
}

/// Times one bridged transfer module (both directions) against direct cross-attention.
///
/// Each size is `(H, W, N, C_m)`; inputs are already at width `C_m`.
pub fn bench_attention(sizes: &[(usize, usize, usize, usize)], reps: usize) -> Result<Vec<BenchRow>> {
    if reps < 5 {
        return Err(Error::invalid("bench_attention needs at least 5 repetitions"));
    }
    let mut rows = Vec::new();
    for &(h, w, n, c_m) in sizes {
        let case = AttentionCase::new(h, w, n, c_m)?;
        let variants: [(&'static str, u64, &dyn Fn() -> Result<()>); 2] = [
            ("bridged", case.bridged_flops(), &|| case.run_bridged()),
            ("direct", case.direct_flops(), &|| case.run_direct()),
        ];
        for (variant, flops, f) in variants {
            let (median_s, min_s, max_s) = timed(reps, f)?;
            rows.push(BenchRow {
                variant,
                height: h,
                width: w,
                words: n,
                c_m,
                median_s,
                min_s,
                max_s,
                flops,
            });
        }
    }
    Ok(rows)
}
