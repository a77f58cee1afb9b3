//! Configuration grids trained and evaluated with shared seeds.

use std::fs;
use std::path::Path;

use super::config::RunConfig;
use super::train::{train, EpochLog};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::synth::{build_split, META};

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(&'static str, String)>,
}

impl Variant {
    pub fn new(name: impl Into<String>, overrides: &[(&'static str, &str)]) -> Self {
        Self {
            name: name.into(),
            overrides: overrides.iter().map(|&(k, v)| (k, v.to_string())).collect(),
        }
    }

    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

/// Transfer directions {none, S→T, T→S, both} × gating {none, LD, STC, both}.
pub fn component_grid() -> Vec<Variant> {
    let transfer = [("none", false, false), ("s2t", false, true), ("t2s", true, false), ("duplex", true, true)];
    let gating = [("none", false, false), ("ld", true, false), ("stc", false, true), ("bca", true, true)];
    let mut out = Vec::new();
    for (tn, t2s, s2t) in transfer {
        for (gn, ld, stc) in gating {
            out.push(Variant::new(
                format!("transfer-{tn}_gate-{gn}"),
                &[
                    ("enable_t2s", flag(t2s)),
                    ("enable_s2t", flag(s2t)),
                    ("enable_ld", flag(ld)),
                    ("enable_stc", flag(stc)),
                ],
            ));
        }
    }
    out
}

/// The seven cells compared in the ordering check.
pub fn informative_rows() -> Vec<Variant> {
    let keep = [
        "transfer-none_gate-bca",
        "transfer-s2t_gate-bca",
        "transfer-t2s_gate-bca",
        "transfer-duplex_gate-none",
        "transfer-duplex_gate-ld",
        "transfer-duplex_gate-stc",
        "transfer-duplex_gate-bca",
    ];
    component_grid()
        .into_iter()
        .filter(|v| keep.contains(&v.name.as_str()))
        .collect()
}

pub fn delta_grid() -> Vec<Variant> {
    (1..=7)
        .map(|d| Variant::new(format!("delta-{d}"), &[("delta", &d.to_string())]))
        .collect()
}

pub fn stage_grid() -> Vec<Variant> {
    ["2", "3", "4", "5", "4,5", "3,4,5", "2,3,4,5"]
        .iter()
        .map(|s| Variant::new(format!("stages-{}", s.replace(',', "")), &[("insert_stages", s)]))
        .collect()
}

/// Grid by name: `components`, `informative`, `delta`, `stages` or `all`.
pub fn grid(name: &str) -> Result<Vec<Variant>> {
    Ok(match name {
        "components" => component_grid(),
        "informative" => informative_rows(),
        "delta" => delta_grid(),
        "stages" => stage_grid(),
        "all" => {
            let mut v = component_grid();
            v.extend(delta_grid());
            v.extend(stage_grid());
            v
        }
        _ => return Err(Error::Config(format!("unknown ablation grid `{name}`"))),
    })
}

/// Builds the dataset for `cfg` unless one with the same parameters already exists.
pub fn ensure_dataset(cfg: &RunConfig) -> Result<()> {
    let meta = cfg.data_dir.join(META);
    let want = format!(
        "count = {}\nseed = {}\nheight = {}\nwidth = {}\ndelta = {}\n",
        cfg.samples, cfg.data_seed, cfg.height, cfg.width, cfg.delta
    );
    if fs::read_to_string(&meta).ok().as_deref() == Some(want.as_str()) {
        return Ok(());
    }
    build_split(cfg.samples, cfg.data_seed, &cfg.synth_config(), &cfg.data_dir)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub report: EvalReport,
}

pub fn tsv_header() -> String {
    let keys: Vec<String> = EvalReport {
        overall_iou: 0.0,
        mean_iou: 0.0,
        p_at: [0.0; 5],
        ap: 0.0,
        j_mean: 0.0,
        f_mean: 0.0,
    }
    .fields()
    .into_iter()
    .map(|(k, _)| k)
    .collect();
    format!("variant\t{}", keys.join("\t"))
}

impl AblationRow {
    pub fn tsv(&self) -> String {
        let vals: Vec<String> = self.report.fields().iter().map(|(_, v)| format!("{v:.6}")).collect();
        format!("{}\t{}", self.variant, vals.join("\t"))
    }
}

/// Trains every variant under `base.out_dir/<name>`; variants with a different
/// `delta` get their own dataset directory next to `base.data_dir`.
pub fn run_ablation(
    base: &RunConfig,
    variants: &[Variant],
    mut on_epoch: impl FnMut(&str, &EpochLog),
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut cfg = v.apply(base)?;
        if cfg.delta != base.delta {
            let name = format!(
                "{}_delta{}",
                base.data_dir.file_name().and_then(|n| n.to_str()).unwrap_or("data"),
                cfg.delta
            );
            cfg.data_dir = base.data_dir.with_file_name(name);
        }
        cfg.out_dir = base.out_dir.join(&v.name);
        cfg.validate()?;
        ensure_dataset(&cfg)?;
        let outcome = train(&cfg, |log| on_epoch(&v.name, log))?;
        let report = outcome
            .best_report
            .ok_or_else(|| Error::invalid("training produced no epochs"))?;
        let row = AblationRow {
            variant: v.name.clone(),
            report,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Writes `ablation.tsv` and `ablation.jsonl` into `dir`.
pub fn write_table(rows: &[AblationRow], base: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tsv = tsv_header();
    tsv.push('\n');
    let mut jsonl = String::new();
    for r in rows {
        tsv.push_str(&r.tsv());
        tsv.push('\n');
        jsonl.push_str(&format!(
            "{{\"variant\": \"{}\", \"report\": {}, \"config\": {}}}\n",
            r.variant,
            r.report.to_json(),
            base.to_json()
        ));
    }
    let p = dir.join("ablation.tsv");
    fs::write(&p, tsv).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("ablation.jsonl");
    fs::write(&p, jsonl).map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        assert_eq!(component_grid().len(), 16);
        assert_eq!(informative_rows().len(), 7);
        assert_eq!(delta_grid().len(), 7);
        assert!(grid("bogus").is_err());
    }

    #[test]
    fn variants_apply_to_base() {
        let base = RunConfig::default();
        let none = &informative_rows()[0];
        let cfg = none.apply(&base).unwrap();
        assert!(!cfg.enable_t2s && !cfg.enable_s2t && cfg.enable_ld && cfg.enable_stc);
        let cfg = stage_grid()[5].apply(&base).unwrap();
        assert_eq!(cfg.insert_stages, vec![3, 4, 5]);
    }
}
