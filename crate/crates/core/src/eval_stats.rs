//! Overlap metrics, class-imbalance audit, cross-validation planning and
//! paired significance testing.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::plane::Mask;

fn check_shapes(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::InvalidArgument(format!(
            "prediction {:?} and label {:?} differ in shape",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// `2|y ∩ ŷ| / (|y| + |ŷ|)`; two empty masks agree perfectly (1.0).
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (p != 0, g != 0);
        inter += usize::from(p && g);
        total += usize::from(p) + usize::from(g);
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

fn pairs(n: u128) -> u128 {
    n * n.saturating_sub(1) / 2
}

/// Number of unordered pixel pairs on which the two segmentations disagree
/// (together in one, apart in the other), and the total number of pairs.
pub fn rand_disagreements(pred: &Mask, gt: &Mask) -> Result<(u128, u128)> {
    check_shapes(pred, gt)?;
    let mut table = [[0u128; 2]; 2];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        table[usize::from(p != 0)][usize::from(g != 0)] += 1;
    }
    let n = pred.len() as u128;
    let together_both: u128 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let together_pred = pairs(table[0][0] + table[0][1]) + pairs(table[1][0] + table[1][1]);
    let together_gt = pairs(table[0][0] + table[1][0]) + pairs(table[0][1] + table[1][1]);
    Ok((together_pred + together_gt - 2 * together_both, pairs(n)))
}

/// One minus the Rand index over all unordered pixel pairs.
pub fn rand_error(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.len() < 2 {
        return Err(Error::InvalidArgument("rand error needs at least 2 pixels".into()));
    }
    let (d, total) = rand_disagreements(pred, gt)?;
    Ok(d as f64 / total as f64)
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for n < 2).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceStats {
    /// Background pixels over foreground pixels, pooled over all slices.
    pub bg_fg_ratio: f64,
    /// Per-slice foreground percentage over slices with foreground.
    pub fg_percent_mean: f64,
    pub fg_percent_std: f64,
    pub slices: usize,
    pub empty_slices: usize,
}

pub fn imbalance_stats<'a>(masks: impl IntoIterator<Item = &'a Mask>) -> Result<ImbalanceStats> {
    let (mut fg, mut bg, mut slices, mut empty) = (0u64, 0u64, 0usize, 0usize);
    let mut percents = Vec::new();
    for m in masks {
        let f = m.count_foreground();
        slices += 1;
        fg += f as u64;
        bg += (m.len() - f) as u64;
        if f == 0 {
            empty += 1;
        } else {
            percents.push(100.0 * f as f64 / m.len() as f64);
        }
    }
    if fg == 0 {
        return Err(Error::EmptyDataset("no foreground pixels in any slice".into()));
    }
    let (mean, std) = mean_std(&percents);
    Ok(ImbalanceStats {
        bg_fg_ratio: bg as f64 / fg as f64,
        fg_percent_mean: mean,
        fg_percent_std: std,
        slices,
        empty_slices: empty,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    All,
    Apex,
    Mid,
    Base,
}

impl Region {
    pub const PARTS: [Region; 3] = [Region::Apex, Region::Mid, Region::Base];

    pub fn name(self) -> &'static str {
        match self {
            Region::All => "all",
            Region::Apex => "apex",
            Region::Mid => "mid",
            Region::Base => "base",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionalSlices {
    pub apex: usize,
    pub mid: usize,
    pub base: usize,
}

impl RegionalSlices {
    /// Regions a slice index belongs to, besides [`Region::All`].
    pub fn regions_of(&self, slice: usize) -> Vec<Region> {
        let mut v = Vec::new();
        if slice == self.apex {
            v.push(Region::Apex);
        }
        if slice == self.mid {
            v.push(Region::Mid);
        }
        if slice == self.base {
            v.push(Region::Base);
        }
        v
    }
}

/// First, central and last gland-bearing slice of a volume.
pub fn regional_slices(masks: &[Mask]) -> Result<RegionalSlices> {
    let mut nonempty = masks.iter().enumerate().filter(|(_, m)| m.count_foreground() > 0).map(|(i, _)| i);
    let first = nonempty.next().ok_or_else(|| Error::EmptyDataset("volume has no labelled slice".into()))?;
    let last = nonempty.last().unwrap_or(first);
    Ok(RegionalSlices {
        apex: first,
        mid: (first + last) / 2,
        base: last,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Digest of seed, k and the sorted patient list.
    pub id: String,
    pub folds: Vec<Fold>,
}

/// Seeded shuffle of the (sorted) patient list, then contiguous partition
/// into `k` test sets whose sizes differ by at most one.
pub fn make_folds(patients: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    let mut sorted = patients.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != patients.len() {
        return Err(Error::InvalidArgument("duplicate patient ids".into()));
    }
    if k < 2 || k > sorted.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot make {k} folds from {} patients",
            sorted.len()
        )));
    }
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((k as u64).to_le_bytes());
    for p in &sorted {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let id = h.finalize().iter().map(|b| format!("{b:02x}")).collect();

    let mut order = sorted;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (order.len() / k, order.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let end = start + base + usize::from(f < extra);
        let test = order[start..end].to_vec();
        let train = order[..start].iter().chain(&order[end..]).cloned().collect();
        folds.push(Fold { train, test });
        start = end;
    }
    Ok(FoldPlan { k, seed, id, folds })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences `a − b`.
    pub w_plus: f64,
    pub w_minus: f64,
    /// Nonzero differences used.
    pub n: usize,
    pub p: f64,
    pub exact: bool,
}

/// Largest sample for which the null distribution is computed exactly.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Average ranks of `values` (ascending), doubled so they are integers.
fn doubled_ranks(values: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged, times two.
        let doubled = (i + 1 + j + 1) as u64;
        for &k in &idx[i..=j] {
            ranks[k] = doubled;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Two-sided paired test of `a` against `b`. Zero differences are dropped.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument("non-finite paired value".into()));
    }
    let n = diffs.len();
    if n == 0 {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = doubled_ranks(&abs);
    let w2: u64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let total2: u64 = ranks.iter().sum();
    let (w_plus, w_minus) = (w2 as f64 / 2.0, (total2 - w2) as f64 / 2.0);

    let (p, exact) = if n <= WILCOXON_EXACT_MAX {
        // counts[s] = sign assignments whose doubled positive-rank sum is s.
        let mut counts = vec![0u64; total2 as usize + 1];
        counts[0] = 1;
        let mut reach = 0usize;
        for &r in &ranks {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] != 0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let all = 2f64.powi(n as i32);
        let lower: u64 = counts[..=w2 as usize].iter().sum();
        let upper: u64 = counts[w2 as usize..].iter().sum();
        ((2.0 * lower.min(upper) as f64 / all).min(1.0), true)
    } else {
        let nf = n as f64;
        let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        let mean = nf * (nf + 1.0) / 4.0;
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        ((2.0 * (1.0 - normal.cdf(z))).min(1.0), false)
    };
    Ok(WilcoxonResult {
        w_plus,
        w_minus,
        n,
        p,
        exact,
    })
}

/// Five-number summary with 1.5·IQR outliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Extremes of the values inside the 1.5·IQR fences.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
    pub n: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(Error::EmptyDataset("no values for box plot".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v.iter().copied().filter(|x| (lo..=hi).contains(x)).collect();
    Ok(BoxStats {
        min: v[0],
        q1,
        median,
        q3,
        max: v[v.len() - 1],
        whisker_low: inside.first().copied().unwrap_or(median),
        whisker_high: inside.last().copied().unwrap_or(median),
        outliers: v.iter().copied().filter(|x| !(lo..=hi).contains(x)).collect(),
        n: v.len(),
    })
}

/// Metrics of one slice under one architecture and cropping method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub architecture: String,
    pub method: String,
    pub fold: usize,
    pub patient: String,
    pub slice: usize,
    pub region: Region,
    pub dice: f64,
    pub rand_error: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    /// Pair individual slices.
    #[default]
    Slice,
    /// Pair per-patient means.
    Patient,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

/// A p-value, or the note that both methods gave identical values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Significance {
    P(f64),
    NoDifference,
}

impl std::fmt::Display for Significance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Significance::P(p) => write!(f, "{p:.4e}"),
            Significance::NoDifference => f.write_str("no difference"),
        }
    }
}

fn significance(a: &[f64], b: &[f64]) -> Result<Significance> {
    match wilcoxon_signed_rank(a, b) {
        Ok(r) => Ok(Significance::P(r.p)),
        Err(Error::Degenerate(_)) => Ok(Significance::NoDifference),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub architecture: String,
    pub method: String,
    /// Mean over slices within each fold.
    pub fold_dice: Vec<f64>,
    pub fold_rand: Vec<f64>,
    pub dice: MeanStd,
    pub rand_error: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub architecture: String,
    pub method_a: String,
    pub method_b: String,
    pub pairs: usize,
    pub dice_p: Significance,
    pub rand_p: Significance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionalCell {
    pub architecture: String,
    pub method: String,
    pub region: Region,
    pub dice: MeanStd,
    pub rand_error: MeanStd,
    pub dice_box: BoxStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionalComparison {
    pub architecture: String,
    pub region: Region,
    pub method_a: String,
    pub method_b: String,
    pub dice_p: Significance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub plan_id: String,
    pub architectures: Vec<String>,
    pub methods: Vec<String>,
    pub pairing: Pairing,
    pub cells: Vec<Cell>,
    pub comparisons: Vec<Comparison>,
    pub regional: Vec<RegionalCell>,
    pub regional_comparisons: Vec<RegionalComparison>,
}

type PairKey = (usize, String, usize);

/// Values keyed for pairing, in a fixed order.
fn paired_values(records: &[&MetricRecord], pairing: Pairing, metric: fn(&MetricRecord) -> f64) -> BTreeMap<PairKey, f64> {
    let mut sums: BTreeMap<PairKey, (f64, usize)> = BTreeMap::new();
    for r in records {
        let key = match pairing {
            Pairing::Slice => (r.fold, r.patient.clone(), r.slice),
            Pairing::Patient => (r.fold, r.patient.clone(), 0),
        };
        let e = sums.entry(key).or_insert((0.0, 0));
        e.0 += metric(r);
        e.1 += 1;
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn compare_paired(
    a: &[&MetricRecord],
    b: &[&MetricRecord],
    pairing: Pairing,
    metric: fn(&MetricRecord) -> f64,
) -> Result<(usize, Significance)> {
    let va = paired_values(a, pairing, metric);
    let vb = paired_values(b, pairing, metric);
    let (mut xa, mut xb) = (Vec::new(), Vec::new());
    for (k, x) in &va {
        if let Some(y) = vb.get(k) {
            xa.push(*x);
            xb.push(*y);
        }
    }
    if xa.len() != va.len() || xa.len() != vb.len() {
        return Err(Error::MissingCell(format!(
            "paired comparison has {} vs {} entries with {} in common",
            va.len(),
            vb.len(),
            xa.len()
        )));
    }
    Ok((xa.len(), significance(&xa, &xb)?))
}

/// Table of mean ± std over folds per (architecture, method), paired
/// Wilcoxon tests between methods, and apex/mid/base sub-tables.
pub fn aggregate_report(
    records: &[MetricRecord],
    plan: &FoldPlan,
    architectures: &[String],
    methods: &[String],
    pairing: Pairing,
) -> Result<AggregateReport> {
    let select = |arch: &str, method: &str, region: Region| -> Vec<&MetricRecord> {
        records
            .iter()
            .filter(|r| r.architecture == arch && r.method == method && r.region == region)
            .collect()
    };
    let mut report = AggregateReport {
        plan_id: plan.id.clone(),
        architectures: architectures.to_vec(),
        methods: methods.to_vec(),
        pairing,
        cells: Vec::new(),
        comparisons: Vec::new(),
        regional: Vec::new(),
        regional_comparisons: Vec::new(),
    };
    for arch in architectures {
        for method in methods {
            let all = select(arch, method, Region::All);
            let (mut fold_dice, mut fold_rand) = (Vec::new(), Vec::new());
            for fold in 0..plan.k {
                let in_fold: Vec<&&MetricRecord> = all.iter().filter(|r| r.fold == fold).collect();
                if in_fold.is_empty() {
                    return Err(Error::MissingCell(format!("{arch} / {method} / fold {fold} has no records")));
                }
                let n = in_fold.len() as f64;
                fold_dice.push(in_fold.iter().map(|r| r.dice).sum::<f64>() / n);
                fold_rand.push(in_fold.iter().map(|r| r.rand_error).sum::<f64>() / n);
            }
            report.cells.push(Cell {
                architecture: arch.clone(),
                method: method.clone(),
                dice: MeanStd::of(&fold_dice),
                rand_error: MeanStd::of(&fold_rand),
                fold_dice,
                fold_rand,
            });
            for region in Region::PARTS {
                let part = select(arch, method, region);
                if part.is_empty() {
                    continue;
                }
                let dice: Vec<f64> = part.iter().map(|r| r.dice).collect();
                let rand: Vec<f64> = part.iter().map(|r| r.rand_error).collect();
                report.regional.push(RegionalCell {
                    architecture: arch.clone(),
                    method: method.clone(),
                    region,
                    dice: MeanStd::of(&dice),
                    rand_error: MeanStd::of(&rand),
                    dice_box: box_stats(&dice)?,
                });
            }
        }
        for (i, ma) in methods.iter().enumerate() {
            for mb in &methods[i + 1..] {
                let (a, b) = (select(arch, ma, Region::All), select(arch, mb, Region::All));
                let (pairs, dice_p) = compare_paired(&a, &b, pairing, |r| r.dice)?;
                let (_, rand_p) = compare_paired(&a, &b, pairing, |r| r.rand_error)?;
                report.comparisons.push(Comparison {
                    architecture: arch.clone(),
                    method_a: ma.clone(),
                    method_b: mb.clone(),
                    pairs,
                    dice_p,
                    rand_p,
                });
                for region in Region::PARTS {
                    let (a, b) = (select(arch, ma, region), select(arch, mb, region));
                    if a.is_empty() && b.is_empty() {
                        continue;
                    }
                    let (_, dice_p) = compare_paired(&a, &b, Pairing::Slice, |r| r.dice)?;
                    report.regional_comparisons.push(RegionalComparison {
                        architecture: arch.clone(),
                        region,
                        method_a: ma.clone(),
                        method_b: mb.clone(),
                        dice_p,
                    });
                }
            }
        }
    }
    Ok(report)
}

impl AggregateReport {
    pub fn cell(&self, architecture: &str, method: &str) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.architecture == architecture && c.method == method)
    }

    /// One row per architecture: Dice per method, p, Rand error per method, p.
    pub fn table_csv(&self) -> String {
        let mut header = vec!["architecture".to_string()];
        for metric in ["dice", "rand_error"] {
            for m in &self.methods {
                header.push(format!("{metric}_{m}"));
            }
            for (i, a) in self.methods.iter().enumerate() {
                for b in &self.methods[i + 1..] {
                    header.push(format!("{metric}_p_{a}_vs_{b}"));
                }
            }
        }
        let mut out = header.join(",");
        out.push('\n');
        for arch in &self.architectures {
            let mut row = vec![arch.clone()];
            for dice in [true, false] {
                for m in &self.methods {
                    let c = self.cell(arch, m).expect("complete report");
                    let v = if dice { c.dice } else { c.rand_error };
                    row.push(format!("{:.4} ± {:.4}", v.mean, v.std));
                }
                for cmp in self.comparisons.iter().filter(|c| &c.architecture == arch) {
                    row.push(if dice { cmp.dice_p } else { cmp.rand_p }.to_string());
                }
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Per-slice records as CSV.
pub fn records_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from("architecture,method,fold,patient,slice,region,dice,rand_error\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6}\n",
            r.architecture,
            r.method,
            r.fold,
            r.patient,
            r.slice,
            r.region.name(),
            r.dice,
            r.rand_error
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubled_ranks_average_ties() {
        let (r, ties) = doubled_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![7, 2, 7, 4]);
        assert_eq!(ties, vec![1, 1, 2]);
    }

    #[test]
    fn quantiles_interpolate() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile(&[5.0], 0.25), 5.0);
    }

    #[test]
    fn single_value_std_is_zero() {
        assert_eq!(mean_std(&[0.3]), (0.3, 0.0));
    }
}
