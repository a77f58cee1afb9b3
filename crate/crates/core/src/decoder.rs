//! Multi-scale decoding, bilateral channel activation and the mask head.

use rand::Rng;

use crate::encoders::{WordVars, NUM_STAGES};
use crate::error::{Error, Result};
use crate::lbdt::{from_pixels, to_pixels};
use crate::nn::{he_uniform, Dense, Init, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const DEFAULT_DECODER_CHANNELS: usize = 32;

/// Applies a [`Dense`] map to every pixel of a C×H×W map.
pub fn pointwise<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    dense: &Dense,
    x: Var,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let px = to_pixels(tape, x)?;
    let y = dense.forward(tape, store, px)?;
    from_pixels(tape, y, s[1], s[2])
}

/// Sum of the valid word rows.
pub fn sentence_feature<F: Scalar>(tape: &mut Tape<F>, words: &WordVars) -> Result<Var> {
    if words.n_valid == 0 {
        return Err(Error::invalid("sentence feature needs at least one word"));
    }
    let rows = tape.slice_rows(words.matrix, 0, words.n_valid)?;
    tape.sum_axis(rows, 0)
}

/// Projects stages 2–5 to C_d channels and sums them at stage-2 resolution.
#[derive(Clone, Debug)]
pub struct PyramidDecoder {
    pub c_d: usize,
    /// 1×1 projections for stages 2, 3, 4, 5.
    pub proj: Vec<Dense>,
}

impl PyramidDecoder {
    pub fn new(prefix: &str, channels: [usize; NUM_STAGES], c_d: usize) -> Self {
        let proj = (2..=NUM_STAGES)
            .map(|s| Dense::new(format!("{prefix}.p{s}"), channels[s - 1], c_d))
            .collect();
        Self { c_d, proj }
    }

    pub fn init<F: Scalar, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        for d in &self.proj {
            d.init(store, rng, Init::Lecun);
        }
    }

    /// `stages[s - 1]` is stage `s`; stage 1 is ignored.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        stages: &[Var],
    ) -> Result<Var> {
        if stages.len() != NUM_STAGES {
            return Err(Error::invalid(format!(
                "decoder expects {NUM_STAGES} stages, got {}",
                stages.len()
            )));
        }
        let s2 = tape.shape(stages[1]).to_vec();
        let (h, w) = (s2[1], s2[2]);
        let mut acc = pointwise(tape, store, &self.proj[0], stages[1])?;
        for (dense, &x) in self.proj[1..].iter().zip(&stages[2..]) {
            let p = pointwise(tape, store, dense, x)?;
            let up = tape.upsample_to(p, h, w)?;
            acc = tape.add(acc, up)?;
        }
        Ok(acc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BcaFlags {
    /// Language denoisers `s_r`, `t_r`.
    pub denoiser: bool,
    /// Consistency activators `f_s`, `f_t`.
    pub activator: bool,
}

impl Default for BcaFlags {
    fn default() -> Self {
        Self {
            denoiser: true,
            activator: true,
        }
    }
}

/// Channel gates; `None` where the component is disabled.
#[derive(Clone, Copy, Debug, Default)]
pub struct Gates {
    pub s_r: Option<Var>,
    pub t_r: Option<Var>,
    pub f_s: Option<Var>,
    pub f_t: Option<Var>,
}

/// Bilateral channel activation on decoded spatial and temporal features.
#[derive(Clone, Debug)]
pub struct Bca {
    pub c_d: usize,
    pub c_r: usize,
    pub flags: BcaFlags,
    pub denoise_s: Dense,
    pub denoise_t: Dense,
    pub joint: Dense,
    pub act_s: Dense,
    pub act_t: Dense,
}

impl Bca {
    pub fn new(prefix: &str, c_d: usize, c_r: usize, flags: BcaFlags) -> Self {
        Self {
            c_d,
            c_r,
            flags,
            denoise_s: Dense::new(format!("{prefix}.denoise_s"), c_d + c_r, c_d),
            denoise_t: Dense::new(format!("{prefix}.denoise_t"), c_d + c_r, c_d),
            joint: Dense::new(format!("{prefix}.joint"), 2 * c_d, c_d),
            act_s: Dense::new(format!("{prefix}.act_s"), c_d, c_d),
            act_t: Dense::new(format!("{prefix}.act_t"), c_d, c_d),
        }
    }

    pub fn init<F: Scalar, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        self.denoise_s.init(store, rng, Init::Lecun);
        self.denoise_t.init(store, rng, Init::Lecun);
        self.joint.init(store, rng, Init::He);
        self.act_s.init(store, rng, Init::Lecun);
        self.act_t.init(store, rng, Init::Lecun);
    }

    /// Returns `(D_S', D_T', gates)`; `sentence` is the C_r sentence feature.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        d_s: Var,
        d_t: Var,
        sentence: Var,
    ) -> Result<(Var, Var, Gates)> {
        let (ss, st) = (tape.shape(d_s).to_vec(), tape.shape(d_t).to_vec());
        if ss != st || ss.len() != 3 || ss[0] != self.c_d {
            return Err(Error::Shape {
                op: "bca",
                lhs: ss,
                rhs: st,
            });
        }
        let sr = tape.shape(sentence).to_vec();
        if sr != [self.c_r] {
            return Err(Error::Shape {
                op: "bca",
                lhs: vec![self.c_r],
                rhs: sr,
            });
        }
        let s = tape.global_avg_pool(d_s)?;
        let t = tape.global_avg_pool(d_t)?;
        let mut gates = Gates::default();
        let (mut out_s, mut out_t) = (d_s, d_t);
        if self.flags.denoiser {
            let sr_in = tape.concat(&[s, sentence], 0)?;
            let s_r = self.denoise_s.forward(tape, store, sr_in)?;
            let s_r = tape.sigmoid(s_r);
            let tr_in = tape.concat(&[t, sentence], 0)?;
            let t_r = self.denoise_t.forward(tape, store, tr_in)?;
            let t_r = tape.sigmoid(t_r);
            out_s = tape.scale_channels(out_s, s_r)?;
            out_t = tape.scale_channels(out_t, t_r)?;
            gates.s_r = Some(s_r);
            gates.t_r = Some(t_r);
        }
        if self.flags.activator {
            let ts = tape.concat(&[t, s], 0)?;
            let f = self.joint.forward(tape, store, ts)?;
            let f = tape.relu(f);
            let f_s = self.act_s.forward(tape, store, f)?;
            let f_s = tape.sigmoid(f_s);
            let f_t = self.act_t.forward(tape, store, f)?;
            let f_t = tape.sigmoid(f_t);
            out_s = tape.scale_channels(out_s, f_s)?;
            out_t = tape.scale_channels(out_t, f_t)?;
            gates.f_s = Some(f_s);
            gates.f_t = Some(f_t);
        }
        Ok((out_s, out_t, gates))
    }
}

/// Concat → 3×3 conv → relu → 3×3 conv to one channel → sigmoid → upsample.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub prefix: String,
    pub c_d: usize,
}

impl PredictionHead {
    pub fn new(prefix: impl Into<String>, c_d: usize) -> Self {
        Self {
            prefix: prefix.into(),
            c_d,
        }
    }

    fn p(&self, what: &str) -> String {
        format!("{}.{what}", self.prefix)
    }

    pub fn init<F: Scalar, R: Rng>(&self, store: &mut ParamStore<F>, rng: &mut R) {
        let c = self.c_d;
        store.insert(self.p("fuse.w"), he_uniform(rng, &[c, 2 * c, 3, 3], 2 * c * 9));
        store.insert(self.p("fuse.b"), Tensor::zeros(&[c]));
        store.insert(self.p("logit.w"), he_uniform(rng, &[1, c, 3, 3], c * 9));
        store.insert(self.p("logit.b"), Tensor::zeros(&[1]));
    }

    /// Mask logits at decoder resolution (1×H_2×W_2).
    pub fn logits<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        d_t: Var,
        d_s: Var,
    ) -> Result<Var> {
        let x = tape.concat(&[d_t, d_s], 0)?;
        let w1 = tape.param(store, &self.p("fuse.w"))?;
        let b1 = tape.param(store, &self.p("fuse.b"))?;
        let w2 = tape.param(store, &self.p("logit.w"))?;
        let b2 = tape.param(store, &self.p("logit.b"))?;
        let f = tape.conv2d(x, w1, b1, 1)?;
        let f = tape.relu(f);
        tape.conv2d(f, w2, b2, 1)
    }

    /// Foreground probability map 1×H_0×W_0.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        d_t: Var,
        d_s: Var,
        out_size: (usize, usize),
    ) -> Result<Var> {
        let logits = self.logits(tape, store, d_t, d_s)?;
        let p = tape.sigmoid(logits);
        tape.upsample_to(p, out_size.0, out_size.1)
    }
}

/// Foreground iff `p > 0.5`.
pub fn threshold_mask<F: Scalar>(p: &Tensor<F>) -> Vec<bool> {
    let half = F::of(0.5);
    p.data().iter().map(|&v| v > half).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn set(store: &mut ParamStore<f64>, name: String, shape: &[usize], data: &[f64]) {
        store.insert(name, Tensor::from_f64(shape, data).unwrap());
    }

    #[test]
    fn decoder_output_at_quarter_resolution() {
        let ch = [4, 4, 6, 6, 6];
        let dec = PyramidDecoder::new("d", ch, 8);
        let mut store = ParamStore::new();
        dec.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::<f64>::new();
        let stages: Vec<Var> = (1..=5)
            .map(|s| {
                let n = 64 >> s;
                tape.constant(Tensor::full(&[ch[s - 1], n, n], 0.3))
            })
            .collect();
        let out = dec.forward(&mut tape, &store, &stages).unwrap();
        assert_eq!(tape.shape(out), &[8, 16, 16]);
        // constant inputs stay constant per channel
        for plane in tape.data(out).chunks(256) {
            assert!(plane.iter().all(|&v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn decoder_ignores_zeroed_deep_stages() {
        let ch = [2, 3, 3, 3, 3];
        let dec = PyramidDecoder::new("d", ch, 4);
        let mut store = ParamStore::new();
        dec.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::<f64>::new();
        let s2 = crate::nn::uniform(&mut rng, &[3, 8, 8], 1.0);
        let mut stages = vec![tape.constant(Tensor::zeros(&[2, 16, 16]))];
        stages.push(tape.constant(s2.clone()));
        for n in [4, 2, 1] {
            stages.push(tape.constant(Tensor::zeros(&[3, n, n])));
        }
        let out = dec.forward(&mut tape, &store, &stages).unwrap();
        let x = tape.constant(s2);
        let direct = pointwise(&mut tape, &store, &dec.proj[0], x).unwrap();
        assert_eq!(tape.data(out), tape.data(direct));
    }

    #[test]
    fn zero_features_stay_zero() {
        let bca = Bca::new("b", 3, 2, BcaFlags::default());
        let mut store = ParamStore::new();
        bca.init(&mut store, &mut ChaCha8Rng::seed_from_u64(4));
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[3, 2, 2]));
        let r = tape.constant(Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap());
        let (ds, dt, g) = bca.forward(&mut tape, &store, z, z, r).unwrap();
        assert!(tape.data(ds).iter().chain(tape.data(dt)).all(|&v| v == 0.0));
        for gate in [g.s_r, g.t_r, g.f_s, g.f_t] {
            assert!(tape
                .data(gate.unwrap())
                .iter()
                .all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn wrong_sentence_width_rejected() {
        let bca = Bca::new("b", 2, 2, BcaFlags::default());
        let mut store = ParamStore::new();
        bca.init(&mut store, &mut ChaCha8Rng::seed_from_u64(5));
        let mut tape = Tape::<f64>::new();
        let d = tape.constant(Tensor::zeros(&[2, 1, 1]));
        let r = tape.constant(Tensor::zeros(&[3]));
        assert!(bca.forward(&mut tape, &store, d, d, r).is_err());
    }

    #[test]
    fn hand_evaluated_gates() {
        // C_d = C_r = 2, one pixel: pooled features equal the pixel values.
        let bca = Bca::new("b", 2, 2, BcaFlags::default());
        let mut store = ParamStore::new();
        let ws = [0.5, -0.2, 0.1, 0.3, -0.4, 0.2, 0.6, -0.1];
        let wt = [-0.3, 0.4, 0.2, -0.5, 0.1, 0.1, -0.2, 0.3];
        let wj = [0.7, -0.3, 0.2, 0.5, -0.6, 0.4, 0.1, 0.2];
        let was = [0.9, -0.4, 0.3, 0.8];
        let wat = [-0.7, 0.2, 0.5, -0.1];
        set(&mut store, "b.denoise_s.w".into(), &[4, 2], &ws);
        set(&mut store, "b.denoise_s.b".into(), &[2], &[0.05, -0.05]);
        set(&mut store, "b.denoise_t.w".into(), &[4, 2], &wt);
        set(&mut store, "b.denoise_t.b".into(), &[2], &[0.0, 0.1]);
        set(&mut store, "b.joint.w".into(), &[4, 2], &wj);
        set(&mut store, "b.joint.b".into(), &[2], &[0.0, -0.2]);
        set(&mut store, "b.act_s.w".into(), &[2, 2], &was);
        set(&mut store, "b.act_s.b".into(), &[2], &[0.1, 0.0]);
        set(&mut store, "b.act_t.w".into(), &[2, 2], &wat);
        set(&mut store, "b.act_t.b".into(), &[2], &[0.0, 0.2]);

        let (s, t, r) = ([0.8, -0.5], [0.3, 1.2], [1.0, 0.5]);
        let lin = |x: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
            (0..b.len())
                .map(|o| b[o] + x.iter().enumerate().map(|(i, v)| v * w[i * b.len() + o]).sum::<f64>())
                .collect()
        };
        let s_r: Vec<f64> = lin(&[s[0], s[1], r[0], r[1]], &ws, &[0.05, -0.05]).into_iter().map(sig).collect();
        let t_r: Vec<f64> = lin(&[t[0], t[1], r[0], r[1]], &wt, &[0.0, 0.1]).into_iter().map(sig).collect();
        let f: Vec<f64> = lin(&[t[0], t[1], s[0], s[1]], &wj, &[0.0, -0.2]).into_iter().map(|v| v.max(0.0)).collect();
        let f_s: Vec<f64> = lin(&f, &was, &[0.1, 0.0]).into_iter().map(sig).collect();
        let f_t: Vec<f64> = lin(&f, &wat, &[0.0, 0.2]).into_iter().map(sig).collect();

        let mut tape = Tape::<f64>::new();
        let ds = tape.constant(Tensor::from_f64(&[2, 1, 1], &s).unwrap());
        let dt = tape.constant(Tensor::from_f64(&[2, 1, 1], &t).unwrap());
        let rv = tape.constant(Tensor::from_f64(&[2], &r).unwrap());
        let (os, ot, _) = bca.forward(&mut tape, &store, ds, dt, rv).unwrap();
        for c in 0..2 {
            assert!((tape.data(os)[c] - f_s[c] * s_r[c] * s[c]).abs() < 1e-12);
            assert!((tape.data(ot)[c] - f_t[c] * t_r[c] * t[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn disabled_components_pass_features_through() {
        let flags = BcaFlags {
            denoiser: false,
            activator: false,
        };
        let bca = Bca::new("b", 2, 2, flags);
        let store = ParamStore::new();
        let mut tape = Tape::<f64>::new();
        let d = tape.constant(Tensor::from_f64(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let r = tape.constant(Tensor::zeros(&[2]));
        let (os, ot, g) = bca.forward(&mut tape, &store, d, d, r).unwrap();
        assert_eq!(tape.data(os), tape.data(d));
        assert_eq!(tape.data(ot), tape.data(d));
        assert!(g.s_r.is_none() && g.f_t.is_none());
    }

    #[test]
    fn zero_logits_give_one_half() {
        let head = PredictionHead::new("h", 4);
        let mut store = ParamStore::new();
        head.init(&mut store, &mut ChaCha8Rng::seed_from_u64(6));
        store.zero_prefix("h.logit");
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[4, 16, 16], 0.7));
        let p = head.forward(&mut tape, &store, x, x, (64, 64)).unwrap();
        assert_eq!(tape.shape(p), &[1, 64, 64]);
        assert!(tape.data(p).iter().all(|&v| v == 0.5));
        assert!(threshold_mask(tape.value(p)).iter().all(|&m| !m));
    }
}
