//! Evaluation CSV and the model-size table.

use std::fmt;

use hnfnet::labels::labels_to_regions;
use hnfnet::metrics::{diagonal_mm, dice_score, hd95};
use hnfnet::network::{cascade_flops, cascade_param_count, flops, param_count};
use hnfnet::tensor::Dims3;
use hnfnet::{LabelMap, Mask3};

use crate::config::ConfigFile;
use crate::error::IoResult;

pub const CSV_HEADER: &str = "region,dice,hd95_mm";

#[derive(Debug, Clone, PartialEq)]
pub struct RegionScore {
    pub region: &'static str,
    pub dice: f64,
    pub hd95_mm: f64,
}

/// HD95 with the report-level conventions: 0 when both masks are empty,
/// the volume diagonal when only one is.
pub fn hd95_or_penalty(pred: &Mask3, gt: &Mask3, spacing: [f64; 3]) -> IoResult<f64> {
    Ok(match (pred.is_empty(), gt.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => diagonal_mm(gt.dims(), spacing),
        (false, false) => hd95(pred, gt, spacing)?,
    })
}

/// Rows ET, WT, TC, then their mean.
pub fn evaluate_labels(pred: &LabelMap, gt: &LabelMap, spacing: [f64; 3]) -> IoResult<Vec<RegionScore>> {
    let p = labels_to_regions(pred)?;
    let g = labels_to_regions(gt)?;
    let mut rows = Vec::with_capacity(4);
    for (region, pm, gm) in [("ET", &p.et, &g.et), ("WT", &p.wt, &g.wt), ("TC", &p.tc, &g.tc)] {
        rows.push(RegionScore {
            region,
            dice: dice_score(pm, gm)?,
            hd95_mm: hd95_or_penalty(pm, gm, spacing)?,
        });
    }
    let mean = |f: fn(&RegionScore) -> f64| rows.iter().map(f).sum::<f64>() / 3.0;
    rows.push(RegionScore {
        region: "mean",
        dice: mean(|r| r.dice),
        hd95_mm: mean(|r| r.hd95_mm),
    });
    Ok(rows)
}

pub fn render_csv(rows: &[RegionScore]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.region, r.dice, r.hd95_mm));
    }
    out
}

/// Published sizes at 128^3: (params in millions, GFLOPs).
pub const PUBLISHED_SINGLE: (f64, f64) = (16.85, 436.59);
pub const PUBLISHED_CASCADE: (f64, f64) = (26.07, 621.09);
/// Accepted parameter ranges in millions.
pub const PARAM_BAND_SINGLE: (f64, f64) = (12.0, 22.0);
pub const PARAM_BAND_CASCADE: (f64, f64) = (18.0, 33.0);
/// Compute counts within +-30% of the published figure are in band.
pub const COMPUTE_BAND: f64 = 0.3;
pub const PUBLISHED_DIMS: Dims3 = [128, 128, 128];

#[derive(Debug, Clone, PartialEq)]
pub struct SizeRow {
    pub model: &'static str,
    pub params: usize,
    /// `2 * MACs`.
    pub flops: u64,
    pub published_params_m: f64,
    pub published_gflops: f64,
    pub param_band_m: (f64, f64),
}

impl SizeRow {
    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    pub fn gmacs(&self) -> f64 {
        self.gflops() / 2.0
    }

    pub fn params_in_band(&self) -> bool {
        (self.param_band_m.0..=self.param_band_m.1).contains(&self.params_m())
    }

    fn compute_in_band(&self, g: f64) -> bool {
        let p = self.published_gflops;
        (p * (1.0 - COMPUTE_BAND)..=p * (1.0 + COMPUTE_BAND)).contains(&g)
    }

    pub fn flops_in_band(&self) -> bool {
        self.compute_in_band(self.gflops())
    }

    pub fn macs_in_band(&self) -> bool {
        self.compute_in_band(self.gmacs())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub dims: Dims3,
    pub rows: Vec<SizeRow>,
}

impl SizeReport {
    /// Compute comparisons only make sense at the published input size.
    pub fn compares_compute(&self) -> bool {
        self.dims == PUBLISHED_DIMS
    }

    pub fn flagged(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.rows {
            if !r.params_in_band() {
                out.push(format!("{} params", r.model));
            }
            if self.compares_compute() && !r.flops_in_band() {
                out.push(format!("{} flops", r.model));
            }
        }
        out
    }
}

pub fn size_report(cfg: &ConfigFile, dims: Dims3) -> IoResult<SizeReport> {
    let mut rows = Vec::new();
    if let Some(s) = &cfg.single {
        rows.push(SizeRow {
            model: "single",
            params: param_count(s)?,
            flops: flops(s, dims)?,
            published_params_m: PUBLISHED_SINGLE.0,
            published_gflops: PUBLISHED_SINGLE.1,
            param_band_m: PARAM_BAND_SINGLE,
        });
    }
    if let Some(c) = &cfg.cascade {
        rows.push(SizeRow {
            model: "cascade",
            params: cascade_param_count(c)?,
            flops: cascade_flops(c, dims)?,
            published_params_m: PUBLISHED_CASCADE.0,
            published_gflops: PUBLISHED_CASCADE.1,
            param_band_m: PARAM_BAND_CASCADE,
        });
    }
    Ok(SizeReport { dims, rows })
}

fn flag(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "OUT-OF-BAND"
    }
}

impl fmt::Display for SizeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [d, h, w] = self.dims;
        writeln!(f, "input {d}x{h}x{w}; FLOPs = 2 x multiply-accumulates")?;
        writeln!(
            f,
            "{:<8} {:>10} {:>10} {:>9} {:>14} {:>12} {:>10} {:>10} {:>10} {:>12} {:>12}",
            "model",
            "params(M)",
            "ref(M)",
            "delta(M)",
            "band(M)",
            "param flag",
            "GFLOPs",
            "ref(G)",
            "delta(G)",
            "GMACs",
            "flop flag"
        )?;
        for r in &self.rows {
            let (ref_g, delta_g, flop_flag) = if self.compares_compute() {
                (
                    format!("{:.2}", r.published_gflops),
                    format!("{:+.2}", r.gflops() - r.published_gflops),
                    flag(r.flops_in_band()).to_string(),
                )
            } else {
                ("-".into(), "-".into(), "-".into())
            };
            writeln!(
                f,
                "{:<8} {:>10.2} {:>10.2} {:>+9.2} {:>14} {:>12} {:>10.2} {:>10} {:>10} {:>12.2} {:>12}",
                r.model,
                r.params_m(),
                r.published_params_m,
                r.params_m() - r.published_params_m,
                format!("[{}, {}]", r.param_band_m.0, r.param_band_m.1),
                flag(r.params_in_band()),
                r.gflops(),
                ref_g,
                delta_g,
                r.gmacs(),
                flop_flag
            )?;
        }
        if self.compares_compute() {
            for r in self.rows.iter().filter(|r| !r.flops_in_band()) {
                writeln!(
                    f,
                    "note: {} GFLOPs outside +-{:.0}% of reference; GMACs {} that band",
                    r.model,
                    COMPUTE_BAND * 100.0,
                    if r.macs_in_band() { "fall inside" } else { "also fall outside" }
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_maps_score_perfectly() {
        let l = LabelMap::new([2, 2, 2], vec![0, 1, 2, 4, 4, 2, 1, 0]).unwrap();
        let rows = evaluate_labels(&l, &l, [1.0; 3]).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.dice == 1.0 && r.hd95_mm == 0.0));
        assert!(render_csv(&rows).starts_with("region,dice,hd95_mm\nET,1.000000,0.000000\n"));
    }

    #[test]
    fn one_sided_empty_gets_diagonal() {
        let gt = LabelMap::new([1, 1, 2], vec![4, 0]).unwrap();
        let pred = LabelMap::background([1, 1, 2]);
        let rows = evaluate_labels(&pred, &gt, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(rows[0].dice, 0.0);
        assert!((rows[0].hd95_mm - 6f64.sqrt()).abs() < 1e-12);
    }
}
