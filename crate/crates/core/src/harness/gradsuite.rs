//! Finite-difference gradient checks over every tape op and the composite blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{Bca, BcaFlags, PredictionHead};
use crate::encoders::{word_mask, TextEncoder, WordVars};
use crate::error::Result;
use crate::lbdt::{LbdtConfig, LbdtModule, WordEnhancer};
use crate::loss::training_loss;
use crate::nn::{uniform, ParamStore};
use crate::posenc::sinusoid_1d;
use crate::tensor::{gradient_check, CheckReport, OpAttrs, OpKind, Tape, Tensor, Var};

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

/// Spatial size, word slots and medium width of the composite checks.
pub const SIDE: usize = 4;
pub const WORDS: usize = 3;
pub const C_M: usize = 8;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub report: CheckReport,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }

    pub fn line(&self) -> String {
        format!(
            "{:<8} {:<24} checked={:<6} one_sided={:<4} unresolved={:<3} max_rel_err={:.3e}",
            if self.passed() { "ok" } else { "FAILED" },
            self.name,
            self.report.checked,
            self.report.one_sided,
            self.report.unresolved,
            self.report.max_rel_err
        )
    }
}

/// Fixed non-uniform weights so the reduced output depends on every element differently.
fn probe(tape: &mut Tape<f64>, v: Var, k: usize) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|i| (0.7 * i as f64 + 1.3 * k as f64).cos() + 0.25)
        .collect();
    let w = tape.constant(Tensor::new(&shape, w)?);
    let p = tape.mul(v, w)?;
    Ok(tape.sum_all(p))
}

fn reduce(tape: &mut Tape<f64>, outs: &[Var]) -> Result<Var> {
    let mut acc = probe(tape, outs[0], 0)?;
    for (k, &o) in outs.iter().enumerate().skip(1) {
        let p = probe(tape, o, k)?;
        acc = tape.add(acc, p)?;
    }
    Ok(acc)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, 1.0)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = rand_t(rng, shape);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.signum() * (0.1 + v.abs()));
    t
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = rand_t(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v = 1.0 + 0.5 * *v);
    t
}

fn op_check(kind: OpKind, inputs: Vec<Tensor<f64>>, attrs: OpAttrs) -> Result<CheckReport> {
    gradient_check(
        &inputs,
        |tape, vars| {
            let out = tape.op_forward(kind, vars, &attrs)?;
            reduce(tape, &[out])
        },
        EPS,
        TOL,
    )
}

/// One or more cases per op kind; ops with modes get a case per mode.
fn op_cases(rng: &mut ChaCha8Rng) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for kind in OpKind::ALL {
        let mut variants: Vec<(String, Vec<Tensor<f64>>, OpAttrs)> = Vec::new();
        let name = kind.name().to_string();
        let none = OpAttrs::default();
        match kind {
            OpKind::Matmul => variants.push((name, vec![rand_t(rng, &[3, 4]), rand_t(rng, &[4, 2])], none)),
            OpKind::Linear => {
                variants.push((
                    name.clone(),
                    vec![rand_t(rng, &[3, 4]), rand_t(rng, &[4, 2]), rand_t(rng, &[2])],
                    none.clone(),
                ));
                variants.push((
                    format!("{name}[vector]"),
                    vec![rand_t(rng, &[4]), rand_t(rng, &[4, 2]), rand_t(rng, &[2])],
                    none,
                ));
            }
            OpKind::Conv2d => {
                for stride in [1, 2] {
                    variants.push((
                        format!("{name}[stride={stride}]"),
                        vec![rand_t(rng, &[2, 4, 4]), rand_t(rng, &[3, 2, 3, 3]), rand_t(rng, &[3])],
                        OpAttrs {
                            stride: Some(stride),
                            ..Default::default()
                        },
                    ));
                }
            }
            OpKind::Relu | OpKind::Abs => variants.push((name, vec![away_from_zero(rng, &[3, 4])], none)),
            OpKind::Sigmoid | OpKind::Tanh => variants.push((name, vec![rand_t(rng, &[3, 4])], none)),
            OpKind::Ln => variants.push((name, vec![positive(rng, &[3, 4])], none)),
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                variants.push((name, vec![rand_t(rng, &[3, 4]), rand_t(rng, &[3, 4])], none))
            }
            OpKind::Div => variants.push((name, vec![rand_t(rng, &[3, 4]), positive(rng, &[3, 4])], none)),
            OpKind::Scale | OpKind::AddScalar => variants.push((
                name,
                vec![rand_t(rng, &[3, 4])],
                OpAttrs {
                    scalar: Some(-0.7),
                    ..Default::default()
                },
            )),
            OpKind::Reshape => variants.push((
                name,
                vec![rand_t(rng, &[3, 4])],
                OpAttrs {
                    shape: Some(vec![2, 6]),
                    ..Default::default()
                },
            )),
            OpKind::Transpose => variants.push((name, vec![rand_t(rng, &[3, 4])], none)),
            OpKind::Concat => {
                variants.push((
                    format!("{name}[axis=0]"),
                    vec![rand_t(rng, &[2, 3]), rand_t(rng, &[1, 3]), rand_t(rng, &[3, 3])],
                    none,
                ));
                variants.push((
                    format!("{name}[axis=1]"),
                    vec![rand_t(rng, &[2, 3]), rand_t(rng, &[2, 1])],
                    OpAttrs {
                        axis: Some(1),
                        ..Default::default()
                    },
                ));
            }
            OpKind::GlobalAvgPool | OpKind::Upsample2x => {
                variants.push((name, vec![rand_t(rng, &[2, 3, 3])], none))
            }
            OpKind::UpsampleTo => variants.push((
                name,
                vec![rand_t(rng, &[2, 3, 3])],
                OpAttrs {
                    size: Some((5, 7)),
                    ..Default::default()
                },
            )),
            OpKind::MaskedSoftmax => {
                variants.push((format!("{name}[unmasked]"), vec![rand_t(rng, &[3, 4])], none));
                variants.push((
                    format!("{name}[masked]"),
                    vec![rand_t(rng, &[3, 4])],
                    OpAttrs {
                        mask: Some(vec![true, false, true, true]),
                        ..Default::default()
                    },
                ));
            }
            OpKind::SumAxis => {
                for axis in [0, 1, 2] {
                    variants.push((
                        format!("{name}[axis={axis}]"),
                        vec![rand_t(rng, &[2, 3, 4])],
                        OpAttrs {
                            axis: Some(axis),
                            ..Default::default()
                        },
                    ));
                }
            }
            OpKind::SumAll | OpKind::MeanAll => variants.push((name, vec![rand_t(rng, &[3, 4])], none)),
            OpKind::ScaleChannels => {
                variants.push((name, vec![rand_t(rng, &[3, 2, 2]), rand_t(rng, &[3])], none))
            }
            OpKind::SliceRows => variants.push((
                name,
                vec![rand_t(rng, &[4, 3])],
                OpAttrs {
                    start: Some(1),
                    len: Some(2),
                    ..Default::default()
                },
            )),
            OpKind::Embedding => variants.push((
                name,
                vec![rand_t(rng, &[5, 3])],
                OpAttrs {
                    ids: Some(vec![1, 4, 1]),
                    ..Default::default()
                },
            )),
        }
        for (name, inputs, attrs) in variants {
            out.push(GradCase {
                name,
                report: op_check(kind, inputs, attrs)?,
            });
        }
    }
    Ok(out)
}

/// Checks w.r.t. `extra` inputs and every parameter in `store`.
fn module_check<R>(store: &ParamStore<f64>, extra: Vec<Tensor<f64>>, run: R) -> Result<CheckReport>
where
    R: Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Vec<Var>>,
{
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let n_extra = extra.len();
    let mut inputs = extra;
    inputs.extend(names.iter().map(|n| store.get(n).expect("listed name").clone()));
    gradient_check(
        &inputs,
        |tape, vars| {
            for (name, &v) in names.iter().zip(&vars[n_extra..]) {
                tape.bind(name.clone(), v);
            }
            let outs = run(tape, store, &vars[..n_extra])?;
            reduce(tape, &outs)
        },
        EPS,
        TOL,
    )
}

/// Replaces every parameter with random values so zero-initialized branches carry gradient.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let shape = store.get(&n).expect("listed name").shape().to_vec();
        store.insert(n, uniform(rng, &shape, 0.5));
    }
}

fn padded_words(matrix: Var) -> WordVars {
    WordVars {
        matrix,
        mask: word_mask(WORDS - 1, WORDS),
        n_valid: WORDS - 1,
    }
}

fn lbdt_case(rng: &mut ChaCha8Rng, layers: usize) -> Result<CheckReport> {
    let cfg = LbdtConfig {
        layers,
        c_m: C_M,
        insert_stages: vec![4],
        mlp_hidden: 2 * C_M,
        ..Default::default()
    };
    let module = LbdtModule::new("lbdt", 4, C_M, &cfg);
    let mut store = ParamStore::new();
    module.init(&mut store, rng);
    randomize(&mut store, rng);
    let extra = vec![
        rand_t(rng, &[C_M, SIDE, SIDE]),
        rand_t(rng, &[C_M, SIDE, SIDE]),
        rand_t(rng, &[WORDS, C_M]),
    ];
    module_check(&store, extra, |tape, store, v| {
        let (s, t, _) = module.forward(tape, store, v[0], v[1], &padded_words(v[2]))?;
        Ok(vec![s, t])
    })
}

fn enhancer_case(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let enh = WordEnhancer::new("words", C_M);
    let mut store = ParamStore::new();
    enh.init(&mut store, rng);
    let pe = sinusoid_1d(WORDS, C_M)?.tensor::<f64>();
    module_check(&store, vec![rand_t(rng, &[WORDS, C_M])], |tape, store, v| {
        let pe = tape.constant(pe.clone());
        let (r, _) = enh.forward(tape, store, &padded_words(v[0]), pe)?;
        Ok(vec![r])
    })
}

fn bca_case(rng: &mut ChaCha8Rng, flags: BcaFlags) -> Result<CheckReport> {
    let bca = Bca::new("bca", C_M, C_M, flags);
    let mut store = ParamStore::new();
    bca.init(&mut store, rng);
    let extra = vec![
        rand_t(rng, &[C_M, SIDE, SIDE]),
        rand_t(rng, &[C_M, SIDE, SIDE]),
        rand_t(rng, &[C_M]),
    ];
    module_check(&store, extra, |tape, store, v| {
        let (s, t, _) = bca.forward(tape, store, v[0], v[1], v[2])?;
        Ok(vec![s, t])
    })
}

fn text_case(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let enc = TextEncoder {
        prefix: "text".into(),
        vocab_size: 6,
        embed_dim: 4,
        hidden: C_M,
        max_words: WORDS,
    };
    let mut store = ParamStore::new();
    enc.init(&mut store, rng);
    randomize(&mut store, rng);
    module_check(&store, Vec::new(), |tape, store, _| {
        Ok(vec![enc.forward(tape, store, &[2, 5])?.matrix])
    })
}

fn head_case(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let head = PredictionHead::new("head", 4);
    let mut store = ParamStore::new();
    head.init(&mut store, rng);
    randomize(&mut store, rng);
    let extra = vec![rand_t(rng, &[4, SIDE, SIDE]), rand_t(rng, &[4, SIDE, SIDE])];
    module_check(&store, extra, |tape, store, v| {
        Ok(vec![head.forward(tape, store, v[0], v[1], (2 * SIDE, 2 * SIDE))?])
    })
}

fn loss_case(rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let mut p = rand_t(rng, &[1, SIDE, SIDE]);
    p.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.4 * *v);
    let y: Vec<f64> = (0..SIDE * SIDE).map(|i| ((i * 5) % 3 == 0) as u8 as f64).collect();
    let y = Tensor::new(&[1, SIDE, SIDE], y)?;
    gradient_check(
        &[p],
        |tape, v| Ok(training_loss(tape, v[0], &y)?.total),
        EPS,
        TOL,
    )
}

/// Runs every case; the list order is stable.
pub fn run_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = op_cases(&mut rng)?;
    let mut push = |name: &str, report: CheckReport| {
        cases.push(GradCase {
            name: name.to_string(),
            report,
        })
    };
    push("enhance_words", enhancer_case(&mut rng)?);
    push("lbdt_layer[L=1]", lbdt_case(&mut rng, 1)?);
    push("lbdt_layer[L=2]", lbdt_case(&mut rng, 2)?);
    push("bca", bca_case(&mut rng, BcaFlags::default())?);
    push(
        "bca[denoiser]",
        bca_case(
            &mut rng,
            BcaFlags {
                denoiser: true,
                activator: false,
            },
        )?,
    );
    push(
        "bca[activator]",
        bca_case(
            &mut rng,
            BcaFlags {
                denoiser: false,
                activator: true,
            },
        )?,
    );
    push("text_encoder", text_case(&mut rng)?);
    push("prediction_head", head_case(&mut rng)?);
    push("training_loss", loss_case(&mut rng)?);
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_kind_is_covered() {
        let cases = op_cases(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for kind in OpKind::ALL {
            assert!(
                cases.iter().any(|c| c.name.split('[').next() == Some(kind.name())),
                "{}",
                kind.name()
            );
        }
    }

    #[test]
    fn suite_passes() {
        let cases = run_suite(7).unwrap();
        let failed: Vec<String> = cases.iter().filter(|c| !c.passed()).map(GradCase::line).collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }
}
