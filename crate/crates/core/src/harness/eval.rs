//! Prediction files and directory-to-directory scoring.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{EvalReport, Mask};
use crate::tensor::io;

pub const PRED_SUFFIX: &str = "_pred.lbdt";
pub const MASK_SUFFIX: &str = "_mask.lbdt";

/// Writes `{stem}_pred.lbdt` per mask, plus `{stem}_pred.pgm` when `pgm` is set.
pub fn write_predictions(dir: &Path, stems: &[String], masks: &[Mask], pgm: bool) -> Result<()> {
    if stems.len() != masks.len() {
        return Err(Error::invalid("one stem per predicted mask"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (stem, m) in stems.iter().zip(masks) {
        io::write(dir.join(format!("{stem}{PRED_SUFFIX}")), &m.to_tensor::<f32>())?;
        if pgm {
            let p = dir.join(format!("{stem}_pred.pgm"));
            fs::write(&p, m.to_pgm()).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

/// Mask files in `dir` ending in `suffix`, keyed by the stem before it.
fn masks_with_suffix(dir: &Path, suffix: &str) -> Result<BTreeMap<String, Mask>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        let e = e.map_err(|err| Error::io(dir, err))?;
        let name = e.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_suffix(suffix) else {
            continue;
        };
        if suffix == MASK_SUFFIX && stem.ends_with("_prev") {
            continue;
        }
        out.insert(stem.to_string(), Mask::from_tensor(&io::read::<f32>(e.path())?)?);
    }
    Ok(out)
}

/// Scores `{stem}_pred.lbdt` files against `{stem}_mask.lbdt` ground truth.
///
/// Predictions may also be named `{stem}_mask.lbdt`. Every ground-truth stem
/// needs a prediction; extra predictions are ignored. Returns the report and
/// the number of scored pairs.
pub fn score_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<(EvalReport, usize)> {
    let gts = masks_with_suffix(gt_dir, MASK_SUFFIX)?;
    if gts.is_empty() {
        return Err(Error::Config(format!(
            "no *{MASK_SUFFIX} files in {}",
            gt_dir.display()
        )));
    }
    let mut preds = masks_with_suffix(pred_dir, PRED_SUFFIX)?;
    if preds.is_empty() {
        preds = masks_with_suffix(pred_dir, MASK_SUFFIX)?;
    }
    let mut p = Vec::with_capacity(gts.len());
    let mut g = Vec::with_capacity(gts.len());
    for (stem, gt) in gts {
        let pred = preds
            .remove(&stem)
            .ok_or_else(|| Error::Config(format!("no prediction for {stem} in {}", pred_dir.display())))?;
        p.push(pred);
        g.push(gt);
    }
    let n = p.len();
    Ok((EvalReport::compute(&p, &g)?, n))
}
