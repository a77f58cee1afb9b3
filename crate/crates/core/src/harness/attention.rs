//! Where the motion word looks: word-over-temporal attention against the object's swept region.

use std::path::Path;

use super::train::Prepared;
use crate::error::{Error, Result};
use crate::lbdt::dump_attention;
use crate::model::Model;
use crate::nn::ParamStore;
use crate::tensor::{Tape, Tensor};

/// Position of the motion word in `<color> <shape> <motion>`.
pub const MOTION_TOKEN: usize = 2;
pub const DEFAULT_STAGE: usize = 4;

/// Word × pixel attention of the last transfer layer at `stage`, with the map size.
pub fn word_temporal_attention(
    model: &Model,
    params: &ParamStore<f32>,
    sample: &Prepared,
    stage: usize,
) -> Result<(Tensor<f32>, usize, usize)> {
    let mut tape = Tape::no_grad();
    let out = model.forward(&mut tape, params, &sample.pair, &sample.tokens)?;
    let trace = out
        .traces
        .iter()
        .find(|t| t.stage == stage)
        .ok_or_else(|| Error::Config(format!("no transfer module at stage {stage}")))?;
    let attn = trace
        .layers
        .last()
        .and_then(|l| l.words_over_temporal)
        .ok_or_else(|| Error::Config("temporal-to-spatial transfer is disabled".into()))?;
    Ok((tape.value(attn).clone(), trace.height, trace.width))
}

/// Stage cells overlapping the union of the two masks.
pub fn swept_cells(mask: &Tensor<f32>, prev: &Tensor<f32>, h: usize, w: usize) -> Vec<bool> {
    let s = mask.shape();
    let (hh, ww) = (s[s.len() - 2], s[s.len() - 1]);
    let (cy, cx) = (hh / h, ww / w);
    let mut cells = vec![false; h * w];
    for (i, (&a, &b)) in mask.data().iter().zip(prev.data()).enumerate() {
        if a > 0.5 || b > 0.5 {
            let (y, x) = (i / ww, i % ww);
            cells[(y / cy) * w + x / cx] = true;
        }
    }
    cells
}

/// Motion-word attention mass on the swept region; `None` for a standing referred object.
pub fn motion_word_mass(model: &Model, params: &ParamStore<f32>, sample: &Prepared, stage: usize) -> Result<Option<f64>> {
    if !sample.entry.motion.moves() {
        return Ok(None);
    }
    let (attn, h, w) = word_temporal_attention(model, params, sample, stage)?;
    let row = &attn.data()[MOTION_TOKEN * h * w..(MOTION_TOKEN + 1) * h * w];
    let cells = swept_cells(&sample.mask, &sample.prev_mask, h, w);
    Ok(Some(
        row.iter()
            .zip(&cells)
            .filter(|(_, &c)| c)
            .map(|(&a, _)| a as f64)
            .sum(),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Concentration {
    pub stage: usize,
    /// `(stem, mass)` for every sample with a moving referred object.
    pub per_sample: Vec<(String, f64)>,
    /// Fraction of counted samples with mass above one half.
    pub fraction_concentrated: f64,
}

pub fn concentration(model: &Model, params: &ParamStore<f32>, samples: &[Prepared], stage: usize) -> Result<Concentration> {
    let mut per_sample = Vec::new();
    for s in samples {
        if let Some(m) = motion_word_mass(model, params, s, stage)? {
            per_sample.push((s.entry.stem.clone(), m));
        }
    }
    let hits = per_sample.iter().filter(|(_, m)| *m > 0.5).count();
    let fraction_concentrated = if per_sample.is_empty() {
        0.0
    } else {
        hits as f64 / per_sample.len() as f64
    };
    Ok(Concentration {
        stage,
        per_sample,
        fraction_concentrated,
    })
}

/// Writes `{stem}_attn.lbdt` and its word sidecar into `dir`.
pub fn dump_sample(model: &Model, params: &ParamStore<f32>, sample: &Prepared, stage: usize, dir: &Path) -> Result<()> {
    let (attn, h, w) = word_temporal_attention(model, params, sample, stage)?;
    let words: Vec<String> = sample.entry.expression.split(' ').map(str::to_string).collect();
    dump_attention(&attn, &words, h, w, &dir.join(format!("{}_attn.lbdt", sample.entry.stem)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_cover_union_of_masks() {
        let mut m = Tensor::<f32>::zeros(&[1, 8, 8]);
        let mut p = Tensor::<f32>::zeros(&[1, 8, 8]);
        m.data_mut()[0] = 1.0; // cell (0, 0)
        p.data_mut()[7 * 8 + 7] = 1.0; // cell (1, 1)
        assert_eq!(swept_cells(&m, &p, 2, 2), vec![true, false, false, true]);
    }
}
