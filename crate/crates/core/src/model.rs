//! The full two-stream model: encoders, per-stage transfer modules, decoders, gating and head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{sentence_feature, Bca, BcaFlags, Gates, PredictionHead, PyramidDecoder};
use crate::encoders::{
    frame_difference, FramePair, TextEncoder, VisualEncoder, WordVars, NUM_STAGES,
};
use crate::error::{Error, Result};
use crate::lbdt::{LbdtConfig, LbdtModule, ModuleTrace};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub max_words: usize,
    pub vocab_size: usize,
    pub word_dim: usize,
    pub stage_channels: [usize; NUM_STAGES],
    pub c_d: usize,
    pub lbdt: LbdtConfig,
    pub bca: BcaFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            max_words: 25,
            vocab_size: 17,
            word_dim: 32,
            stage_channels: crate::encoders::DEFAULT_STAGE_CHANNELS,
            c_d: crate::decoder::DEFAULT_DECODER_CHANNELS,
            lbdt: LbdtConfig::default(),
            bca: BcaFlags::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.lbdt.validate()?;
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(32) || !self.width.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input size {}×{} must be a positive multiple of 32",
                self.height, self.width
            )));
        }
        if self.max_words == 0 || self.vocab_size < 2 || self.word_dim == 0 || self.c_d == 0 {
            return Err(Error::Config("word count, vocabulary, word_dim and c_d must be positive".into()));
        }
        if self.stage_channels.windows(2).any(|w| w[1] < w[0]) || self.stage_channels[0] == 0 {
            return Err(Error::Config("stage channels must be positive and non-decreasing".into()));
        }
        Ok(())
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Foreground probability 1×H×W.
    pub prob: Var,
    pub words: WordVars,
    pub spatial: Vec<Var>,
    pub temporal: Vec<Var>,
    pub traces: Vec<ModuleTrace>,
    pub gates: Gates,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub spatial: VisualEncoder,
    pub temporal: VisualEncoder,
    pub text: TextEncoder,
    pub modules: Vec<LbdtModule>,
    pub decode_s: PyramidDecoder,
    pub decode_t: PyramidDecoder,
    pub bca: Bca,
    pub head: PredictionHead,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.stage_channels;
        let modules = cfg
            .lbdt
            .insert_stages
            .iter()
            .map(|&s| LbdtModule::new(format!("lbdt.s{s}"), s, ch[s - 1], &cfg.lbdt))
            .collect();
        Ok(Self {
            spatial: VisualEncoder::new("spatial", 3, ch),
            temporal: VisualEncoder::new("temporal", 3, ch),
            text: TextEncoder {
                prefix: "text".into(),
                vocab_size: cfg.vocab_size,
                embed_dim: cfg.word_dim,
                hidden: cfg.lbdt.c_m,
                max_words: cfg.max_words,
            },
            modules,
            decode_s: PyramidDecoder::new("decode_s", ch, cfg.c_d),
            decode_t: PyramidDecoder::new("decode_t", ch, cfg.c_d),
            bca: Bca::new("bca", cfg.c_d, cfg.lbdt.c_m, cfg.bca),
            head: PredictionHead::new("head", cfg.c_d),
            cfg,
        })
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init<F: Scalar>(&self, seed: u64) -> ParamStore<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.spatial.init(&mut store, &mut rng);
        self.temporal.init(&mut store, &mut rng);
        self.text.init(&mut store, &mut rng);
        for m in &self.modules {
            m.init(&mut store, &mut rng);
        }
        self.decode_s.init(&mut store, &mut rng);
        self.decode_t.init(&mut store, &mut rng);
        self.bca.init(&mut store, &mut rng);
        self.head.init(&mut store, &mut rng);
        store
    }

    pub fn module_at(&self, stage: usize) -> Option<&LbdtModule> {
        self.modules.iter().find(|m| m.stage == stage)
    }

    /// Spatial stream reads the target frame, temporal stream the frame difference.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        pair: &FramePair<F>,
        tokens: &[usize],
    ) -> Result<ModelOutput> {
        let expect = [3, self.cfg.height, self.cfg.width];
        if pair.target.shape() != expect {
            return Err(Error::Shape {
                op: "model",
                lhs: expect.to_vec(),
                rhs: pair.target.shape().to_vec(),
            });
        }
        let diff = frame_difference(pair)?;
        let words = self.text.forward(tape, store, tokens)?;
        let mut s = tape.constant(pair.target.clone());
        let mut t = tape.constant(diff);
        let mut spatial = Vec::with_capacity(NUM_STAGES);
        let mut temporal = Vec::with_capacity(NUM_STAGES);
        let mut traces = Vec::new();
        for stage in 1..=NUM_STAGES {
            s = self.spatial.stage(tape, store, stage, s)?;
            t = self.temporal.stage(tape, store, stage, t)?;
            if let Some(m) = self.module_at(stage) {
                let (s2, t2, trace) = m.forward(tape, store, s, t, &words)?;
                s = s2;
                t = t2;
                traces.push(trace);
            }
            spatial.push(s);
            temporal.push(t);
        }
        let d_s = self.decode_s.forward(tape, store, &spatial)?;
        let d_t = self.decode_t.forward(tape, store, &temporal)?;
        let r = sentence_feature(tape, &words)?;
        let (d_s, d_t, gates) = self.bca.forward(tape, store, d_s, d_t, r)?;
        let prob = self
            .head
            .forward(tape, store, d_t, d_s, (self.cfg.height, self.cfg.width))?;
        Ok(ModelOutput {
            prob,
            words,
            spatial,
            temporal,
            traces,
            gates,
        })
    }

    /// Inference without gradient bookkeeping; returns the probability map.
    pub fn predict<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        pair: &FramePair<F>,
        tokens: &[usize],
    ) -> Result<Tensor<F>> {
        let mut tape = Tape::no_grad();
        let out = self.forward(&mut tape, store, pair, tokens)?;
        Ok(tape.value(out.prob).clone())
    }
}
