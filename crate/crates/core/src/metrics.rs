//! Evaluation: confusion matrices, per-class IoU and mIoU, the forgetting and
//! gain summaries over a continual run, and results-table emission.
//!
//! Everything here is pure integer/float bookkeeping with no dependency on
//! the compute substrate, so each piece is independently checkable against
//! brute-force pixel loops.

use std::collections::BTreeMap;

use crate::data::DomainRole;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("prediction value {value} out of range for {classes} classes")]
    PredOutOfRange { value: u32, classes: usize },
    #[error("shape mismatch: pred has {pred} pixels, label has {label}")]
    LengthMismatch { pred: usize, label: usize },
    #[error("all classes absent from the confusion matrix")]
    AllAbsent,
    #[error("mIoU {0} outside [0,1]")]
    BadMiou(f64),
    #[error("missing history entry: checkpoint {checkpoint}, domain '{domain}'")]
    MissingEntry { checkpoint: u32, domain: String },
    #[error("history is incomplete: missing cells {0:?}")]
    Incomplete(Vec<String>),
    #[error("source-only baseline mean is not set")]
    MissingBaseline,
    #[error("unknown domain '{0}'")]
    UnknownDomain(String),
    #[error("bad history file at line {line}: {reason}")]
    BadHistoryFile { line: usize, reason: String },
}

pub type MetricsResult<T> = Result<T, MetricsError>;

// ── confusion matrix and mIoU ──────────────────────────────────────────────

/// Square count matrix; `counts[label * classes + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn at(&self, label: usize, pred: usize) -> u64 {
        self.counts[label * self.classes + pred]
    }

    /// Total counted pixels (ignored pixels never enter).
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Count `pred` against `label`, skipping `ignore` pixels, into `self`.
    pub fn accumulate(
        &mut self,
        pred: &[u8],
        label: &[u8],
        ignore: u8,
    ) -> MetricsResult<()> {
        if pred.len() != label.len() {
            return Err(MetricsError::LengthMismatch {
                pred: pred.len(),
                label: label.len(),
            });
        }
        for (&p, &l) in pred.iter().zip(label) {
            if l == ignore {
                continue;
            }
            if (p as usize) >= self.classes || (l as usize) >= self.classes {
                return Err(MetricsError::PredOutOfRange {
                    value: p.max(l) as u32,
                    classes: self.classes,
                });
            }
            self.counts[l as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }
}

/// Build a confusion matrix from one prediction/label map pair.
pub fn confusion_matrix(
    pred: &[u8],
    label: &[u8],
    classes: usize,
    ignore: u8,
) -> MetricsResult<ConfusionMatrix> {
    let mut m = ConfusionMatrix::zeros(classes);
    m.accumulate(pred, label, ignore)?;
    Ok(m)
}

/// Per-class IoU and their mean. With `present_only`, classes whose union is
/// zero are excluded from the mean (reported as `None`); otherwise they count
/// as zero.
pub fn miou(m: &ConfusionMatrix, present_only: bool) -> MetricsResult<(Vec<Option<f64>>, f64)> {
    let c = m.classes();
    let mut per_class = vec![None; c];
    let mut sum = 0.0f64;
    let mut included = 0usize;
    for k in 0..c {
        let diag = m.at(k, k);
        let row: u64 = (0..c).map(|j| m.at(k, j)).sum();
        let col: u64 = (0..c).map(|j| m.at(j, k)).sum();
        let union = row + col - diag;
        if union == 0 {
            if !present_only {
                per_class[k] = Some(0.0);
                included += 1;
            }
            continue;
        }
        let iou = diag as f64 / union as f64;
        per_class[k] = Some(iou);
        sum += iou;
        included += 1;
    }
    if per_class.iter().all(|v| v.is_none()) {
        return Err(MetricsError::AllAbsent);
    }
    Ok((per_class, sum / included as f64))
}

// ── run history ────────────────────────────────────────────────────────────

/// mIoU matrix over (checkpoint after domain j, evaluated domain d).
/// Domain index 0 is the source; targets are 1..=T in adaptation order.
/// Continual runs use checkpoints 1..=T; a source-only run uses checkpoint 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RunHistory {
    pub method: String,
    pub config_hash: String,
    domains: Vec<(String, DomainRole)>,
    entries: BTreeMap<(u32, u32), f64>,
    pub source_only_mean: Option<f64>,
}

impl RunHistory {
    pub fn new(
        method: impl Into<String>,
        config_hash: impl Into<String>,
        domains: Vec<(String, DomainRole)>,
    ) -> Self {
        Self {
            method: method.into(),
            config_hash: config_hash.into(),
            domains,
            entries: BTreeMap::new(),
            source_only_mean: None,
        }
    }

    pub fn domains(&self) -> &[(String, DomainRole)] {
        &self.domains
    }

    pub fn domain_names(&self) -> Vec<&str> {
        self.domains.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn target_count(&self) -> usize {
        self.domains
            .iter()
            .filter(|(_, r)| *r == DomainRole::Target)
            .count()
    }

    pub fn domain_index(&self, name: &str) -> MetricsResult<u32> {
        self.domains
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| i as u32)
            .ok_or_else(|| MetricsError::UnknownDomain(name.to_string()))
    }

    pub fn record(&mut self, checkpoint: u32, eval_domain: u32, miou: f64) -> MetricsResult<()> {
        if !(0.0..=1.0).contains(&miou) {
            return Err(MetricsError::BadMiou(miou));
        }
        if eval_domain as usize >= self.domains.len() {
            return Err(MetricsError::UnknownDomain(format!("#{eval_domain}")));
        }
        self.entries.insert((checkpoint, eval_domain), miou);
        Ok(())
    }

    pub fn get(&self, checkpoint: u32, eval_domain: u32) -> Option<f64> {
        self.entries.get(&(checkpoint, eval_domain)).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        self.entries.iter().map(|(&(j, d), &v)| (j, d, v))
    }

    pub fn final_checkpoint(&self) -> Option<u32> {
        self.entries.keys().map(|&(j, _)| j).max()
    }

    fn require(&self, checkpoint: u32, eval_domain: u32) -> MetricsResult<f64> {
        self.get(checkpoint, eval_domain)
            .ok_or_else(|| MetricsError::MissingEntry {
                checkpoint,
                domain: self
                    .domains
                    .get(eval_domain as usize)
                    .map(|(n, _)| n.clone())
                    .unwrap_or_else(|| format!("#{eval_domain}")),
            })
    }

    /// Fgt for target `d`: mIoU at the final checkpoint minus mIoU right
    /// after adapting to `d`. Negative means forgetting.
    pub fn forgetting(&self, target_index: u32) -> MetricsResult<f64> {
        let last = self.final_checkpoint().unwrap_or(0);
        let at_end = self.require(last, target_index)?;
        let at_own = self.require(target_index, target_index)?;
        Ok(at_end - at_own)
    }

    /// Mean mIoU over targets at the final checkpoint.
    pub fn mean_miou(&self) -> MetricsResult<f64> {
        let last = self.final_checkpoint().unwrap_or(0);
        let t = self.target_count();
        if t == 0 {
            return Err(MetricsError::AllAbsent);
        }
        let mut sum = 0.0;
        for d in 1..=t as u32 {
            sum += self.require(last, d)?;
        }
        Ok(sum / t as f64)
    }

    /// Mean mIoU over targets minus the source-only baseline mean.
    pub fn gain(&self) -> MetricsResult<f64> {
        let base = self.source_only_mean.ok_or(MetricsError::MissingBaseline)?;
        Ok(self.mean_miou()? - base)
    }

    /// Cells a rendered table needs: final-checkpoint mIoU for every target
    /// and the (d, d) diagonal for non-final targets.
    fn check_complete(&self) -> MetricsResult<()> {
        let last = self.final_checkpoint().unwrap_or(0);
        let t = self.target_count() as u32;
        let mut missing = Vec::new();
        for d in 1..=t {
            if self.get(last, d).is_none() {
                missing.push(format!("({last},{})", self.domains[d as usize].0));
            }
            if d != t && last != 0 && self.get(d, d).is_none() {
                missing.push(format!("({d},{})", self.domains[d as usize].0));
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(MetricsError::Incomplete(missing))
        }
    }
}

// ── table emission ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Csv,
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn pct_signed(v: f64) -> String {
    format!("{:+.2}", v * 100.0)
}

/// Render one method's results. Text: per-target mIoU with Fgt in
/// parentheses (the final target has none), then Mean mIoU and, when a
/// baseline is present, Gain. Csv: schema
/// `method,eval_domain,miou,fgt,mean_miou,gain` with the same 2-decimal
/// percentages.
pub fn emit_table(h: &RunHistory, format: TableFormat) -> MetricsResult<String> {
    h.check_complete()?;
    let last = h.final_checkpoint().unwrap_or(0);
    let t = h.target_count() as u32;
    let mean = h.mean_miou()?;
    let gain = h.source_only_mean.map(|_| h.gain()).transpose()?;
    match format {
        TableFormat::Text => {
            let mut cells = Vec::new();
            for d in 1..=t {
                let name = &h.domains[d as usize].0;
                let val = h.require(last, d)?;
                if d != t && last != 0 {
                    cells.push(format!("{name}: {} ({})", pct(val), pct_signed(h.forgetting(d)?)));
                } else {
                    cells.push(format!("{name}: {}", pct(val)));
                }
            }
            cells.push(format!("Mean {}", pct(mean)));
            if let Some(g) = gain {
                cells.push(format!("Gain {}", pct_signed(g)));
            }
            Ok(cells.join(" | "))
        }
        TableFormat::Csv => {
            let mut out = String::from("method,eval_domain,miou,fgt,mean_miou,gain\n");
            for d in 1..=t {
                let name = &h.domains[d as usize].0;
                let val = h.require(last, d)?;
                let fgt = if d != t && last != 0 {
                    pct_signed(h.forgetting(d)?)
                } else {
                    String::new()
                };
                let gain_s = gain.map(pct_signed).unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    h.method,
                    name,
                    pct(val),
                    fgt,
                    pct(mean),
                    gain_s
                ));
            }
            Ok(out)
        }
    }
}

// ── history file format ────────────────────────────────────────────────────

const HISTORY_HEADER: &str = "#etm-history,v1";

impl RunHistory {
    /// Serialize to the on-disk history CSV. Floats print in shortest
    /// round-trip form, so identical runs produce byte-identical files.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(HISTORY_HEADER);
        out.push('\n');
        out.push_str(&format!("#method,{}\n", self.method));
        out.push_str(&format!("#config_hash,{}\n", self.config_hash));
        let domains: Vec<String> = self
            .domains
            .iter()
            .map(|(n, r)| {
                format!(
                    "{n}:{}",
                    match r {
                        DomainRole::Source => "source",
                        DomainRole::Target => "target",
                    }
                )
            })
            .collect();
        out.push_str(&format!("#domains,{}\n", domains.join(";")));
        if let Some(b) = self.source_only_mean {
            out.push_str(&format!("#source_only_mean,{b}\n"));
        }
        out.push_str("checkpoint,eval_domain,miou\n");
        for (&(j, d), &v) in &self.entries {
            out.push_str(&format!("{j},{},{v}\n", self.domains[d as usize].0));
        }
        out
    }

    pub fn from_csv(text: &str) -> MetricsResult<Self> {
        let bad = |line: usize, reason: &str| MetricsError::BadHistoryFile {
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
        if first.trim() != HISTORY_HEADER {
            return Err(bad(1, "missing #etm-history,v1 header"));
        }
        let mut method = None;
        let mut config_hash = None;
        let mut domains: Vec<(String, DomainRole)> = Vec::new();
        let mut source_only_mean = None;
        let mut saw_columns = false;
        let mut history: Option<RunHistory> = None;
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let (key, value) = rest
                    .split_once(',')
                    .ok_or_else(|| bad(line_no, "expected #key,value"))?;
                match key {
                    "method" => method = Some(value.to_string()),
                    "config_hash" => config_hash = Some(value.to_string()),
                    "source_only_mean" => {
                        source_only_mean = Some(
                            value
                                .parse::<f64>()
                                .map_err(|_| bad(line_no, "bad source_only_mean"))?,
                        )
                    }
                    "domains" => {
                        for part in value.split(';') {
                            let (name, role) = part
                                .split_once(':')
                                .ok_or_else(|| bad(line_no, "expected name:role"))?;
                            let role = match role {
                                "source" => DomainRole::Source,
                                "target" => DomainRole::Target,
                                _ => return Err(bad(line_no, "role must be source|target")),
                            };
                            domains.push((name.to_string(), role));
                        }
                    }
                    _ => return Err(bad(line_no, "unknown metadata key")),
                }
                continue;
            }
            if !saw_columns {
                if line != "checkpoint,eval_domain,miou" {
                    return Err(bad(line_no, "expected column header"));
                }
                if domains.is_empty() {
                    return Err(bad(line_no, "missing #domains metadata"));
                }
                let mut h = RunHistory::new(
                    method.clone().ok_or_else(|| bad(line_no, "missing #method"))?,
                    config_hash
                        .clone()
                        .ok_or_else(|| bad(line_no, "missing #config_hash"))?,
                    domains.clone(),
                );
                h.source_only_mean = source_only_mean;
                history = Some(h);
                saw_columns = true;
                continue;
            }
            let h = history.as_mut().expect("set with column header");
            let mut parts = line.split(',');
            let (j, name, v) = (
                parts.next().ok_or_else(|| bad(line_no, "missing checkpoint"))?,
                parts.next().ok_or_else(|| bad(line_no, "missing domain"))?,
                parts.next().ok_or_else(|| bad(line_no, "missing miou"))?,
            );
            if parts.next().is_some() {
                return Err(bad(line_no, "too many columns"));
            }
            let j: u32 = j.parse().map_err(|_| bad(line_no, "bad checkpoint"))?;
            let d = h
                .domain_index(name)
                .map_err(|_| bad(line_no, "unknown eval_domain"))?;
            let v: f64 = v.parse().map_err(|_| bad(line_no, "bad miou"))?;
            h.record(j, d, v)
                .map_err(|e| bad(line_no, &e.to_string()))?;
        }
        history.ok_or_else(|| bad(text.lines().count().max(1), "missing column header"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_history() -> RunHistory {
        // Published two-target run: 40.61 (-1.35) / 46.73, baseline mean 38.68.
        let mut h = RunHistory::new(
            "etm",
            "cafebabe",
            vec![
                ("GTA5".into(), DomainRole::Source),
                ("T1".into(), DomainRole::Target),
                ("T2".into(), DomainRole::Target),
            ],
        );
        h.record(1, 1, 0.4196).unwrap();
        h.record(2, 1, 0.4061).unwrap();
        h.record(2, 2, 0.4673).unwrap();
        h.source_only_mean = Some(0.3868);
        h
    }

    #[test]
    fn confusion_matrix_diagonal_for_perfect_prediction() {
        let label = vec![0u8, 1, 1, 2, 2, 2];
        let m = confusion_matrix(&label, &label, 3, 255).unwrap();
        assert_eq!(m.at(0, 0), 1);
        assert_eq!(m.at(1, 1), 2);
        assert_eq!(m.at(2, 2), 3);
        assert_eq!(m.total(), 6);
        let (per, mi) = miou(&m, true).unwrap();
        assert_eq!(per, vec![Some(1.0), Some(1.0), Some(1.0)]);
        assert_eq!(mi, 1.0);
    }

    #[test]
    fn all_ignored_gives_zero_matrix() {
        let label = vec![255u8; 8];
        let pred = vec![0u8; 8];
        let m = confusion_matrix(&pred, &label, 3, 255).unwrap();
        assert_eq!(m.total(), 0);
        assert!(matches!(miou(&m, true), Err(MetricsError::AllAbsent)));
    }

    #[test]
    fn worked_two_by_two_example() {
        // label [[0,0],[1,1]], pred [[0,1],[1,1]]: IoU0 = 1/2, IoU1 = 2/3.
        let label = [0u8, 0, 1, 1];
        let pred = [0u8, 1, 1, 1];
        let m = confusion_matrix(&pred, &label, 2, 255).unwrap();
        let (per, mi) = miou(&m, true).unwrap();
        assert_eq!(per[0], Some(0.5));
        assert_eq!(per[1], Some(2.0 / 3.0));
        assert!((mi - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_prediction_scores_zero() {
        let label = [0u8, 0, 1, 1];
        let pred = [1u8, 1, 0, 0];
        let m = confusion_matrix(&pred, &label, 2, 255).unwrap();
        let (_, mi) = miou(&m, true).unwrap();
        assert_eq!(mi, 0.0);
    }

    #[test]
    fn matrix_matches_brute_force_loop() {
        use rand::Rng;
        let mut rng = crate::nn::rng::substream(5, "metrics-oracle", 0);
        for &classes in &[2usize, 3, 5] {
            let n = 64;
            let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..classes as u8)).collect();
            let label: Vec<u8> = (0..n)
                .map(|_| {
                    if rng.random_range(0..10) == 0 {
                        255
                    } else {
                        rng.random_range(0..classes as u8)
                    }
                })
                .collect();
            let m = confusion_matrix(&pred, &label, classes, 255).unwrap();
            // Independent route: per-class set arithmetic directly on pixels.
            for c in 0..classes as u8 {
                let inter = pred
                    .iter()
                    .zip(&label)
                    .filter(|(&p, &l)| l != 255 && p == c && l == c)
                    .count() as u64;
                let union = pred
                    .iter()
                    .zip(&label)
                    .filter(|(&p, &l)| l != 255 && (p == c || l == c))
                    .count() as u64;
                assert_eq!(m.at(c as usize, c as usize), inter);
                let row: u64 = (0..classes).map(|j| m.at(c as usize, j)).sum();
                let col: u64 = (0..classes).map(|j| m.at(j, c as usize)).sum();
                assert_eq!(row + col - inter, union);
            }
            let not_ignored = label.iter().filter(|&&l| l != 255).count() as u64;
            assert_eq!(m.total(), not_ignored);
        }
    }

    #[test]
    fn miou_is_permutation_equivariant() {
        use rand::Rng;
        let mut rng = crate::nn::rng::substream(6, "metrics-perm", 0);
        let classes = 4usize;
        let n = 100;
        let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..classes as u8)).collect();
        let label: Vec<u8> = (0..n).map(|_| rng.random_range(0..classes as u8)).collect();
        let perm = [2u8, 0, 3, 1];
        let map = |v: &[u8]| v.iter().map(|&x| perm[x as usize]).collect::<Vec<u8>>();
        let (mut per_a, mi_a) = miou(
            &confusion_matrix(&pred, &label, classes, 255).unwrap(),
            true,
        )
        .unwrap();
        let (per_b, mi_b) = miou(
            &confusion_matrix(&map(&pred), &map(&label), classes, 255).unwrap(),
            true,
        )
        .unwrap();
        assert_eq!(mi_a, mi_b);
        // per-class list permutes along with the relabeling
        let mut permuted = vec![None; classes];
        for (c, v) in per_a.drain(..).enumerate() {
            permuted[perm[c] as usize] = v;
        }
        assert_eq!(permuted, per_b);
    }

    #[test]
    fn forgetting_definition_and_paper_cross_check() {
        let h = paper_history();
        let fgt = h.forgetting(1).unwrap();
        assert!((fgt - (-0.0135)).abs() < 1e-12);
        // Published cross-check: 40.61 - (-1.35) = 41.96, the mIoU right
        // after adapting to the first target.
        assert!((h.get(2, 1).unwrap() - fgt - 0.4196).abs() < 1e-12);
        // d = T: zero by definition.
        assert_eq!(h.forgetting(2).unwrap(), 0.0);
        // Missing entry is an error.
        let mut h2 = paper_history();
        h2.entries.remove(&(1, 1));
        assert!(matches!(
            h2.forgetting(1),
            Err(MetricsError::MissingEntry { .. })
        ));
    }

    #[test]
    fn gain_arithmetic() {
        let h = paper_history();
        assert!((h.mean_miou().unwrap() - 0.4367).abs() < 1e-12);
        assert!((h.gain().unwrap() - 0.0499).abs() < 1e-12);
        // Method equal to the baseline: zero gain.
        let mut h2 = paper_history();
        h2.source_only_mean = Some(h2.mean_miou().unwrap());
        assert!(h2.gain().unwrap().abs() < 1e-15);
        // Two targets (0.5, 0.3), baseline 0.35: +0.05.
        let mut h3 = RunHistory::new(
            "m",
            "h",
            vec![
                ("s".into(), DomainRole::Source),
                ("a".into(), DomainRole::Target),
                ("b".into(), DomainRole::Target),
            ],
        );
        h3.record(2, 1, 0.5).unwrap();
        h3.record(2, 2, 0.3).unwrap();
        h3.record(1, 1, 0.5).unwrap();
        h3.source_only_mean = Some(0.35);
        assert!((h3.gain().unwrap() - 0.05).abs() < 1e-12);
        let mut h4 = h3.clone();
        h4.source_only_mean = None;
        assert!(matches!(h4.gain(), Err(MetricsError::MissingBaseline)));
    }

    #[test]
    fn table_reproduces_published_row() {
        let h = paper_history();
        let row = emit_table(&h, TableFormat::Text).unwrap();
        assert_eq!(row, "T1: 40.61 (-1.35) | T2: 46.73 | Mean 43.67 | Gain +4.99");
    }

    #[test]
    fn single_target_has_no_forgetting_cell() {
        let mut h = RunHistory::new(
            "m",
            "h",
            vec![
                ("s".into(), DomainRole::Source),
                ("only".into(), DomainRole::Target),
            ],
        );
        h.record(1, 1, 0.75).unwrap();
        let row = emit_table(&h, TableFormat::Text).unwrap();
        assert_eq!(row, "only: 75.00 | Mean 75.00");
        assert!(!row.contains('('));
    }

    #[test]
    fn csv_table_round_trips_to_same_numbers() {
        let h = paper_history();
        let csv = emit_table(&h, TableFormat::Csv).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "method,eval_domain,miou,fgt,mean_miou,gain");
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], vec!["etm", "T1", "40.61", "-1.35", "43.67", "+4.99"]);
        assert_eq!(rows[1], vec!["etm", "T2", "46.73", "", "43.67", "+4.99"]);
        for row in rows {
            assert!((row[2].parse::<f64>().unwrap() - 100.0 * h.get(2, h.domain_index(row[1]).unwrap()).unwrap()).abs() < 0.005);
        }
    }

    #[test]
    fn incomplete_history_lists_missing_cells() {
        let mut h = paper_history();
        h.entries.remove(&(2, 2));
        h.entries.remove(&(1, 1));
        match emit_table(&h, TableFormat::Text) {
            Err(MetricsError::Incomplete(cells)) => {
                assert!(cells.iter().any(|c| c.contains("T2")));
                assert!(cells.iter().any(|c| c.contains("T1")));
            }
            other => panic!("expected Incomplete, got {other:?}"),
        }
    }

    #[test]
    fn history_csv_round_trip_is_exact() {
        let h = paper_history();
        let text = h.to_csv();
        let parsed = RunHistory::from_csv(&text).unwrap();
        assert_eq!(parsed, h);
        assert_eq!(parsed.to_csv(), text);
    }

    #[test]
    fn history_csv_reports_bad_lines_with_numbers() {
        let h = paper_history();
        let mut text = h.to_csv();
        text.push_str("2,nonexistent,0.5\n");
        let line_count = text.lines().count();
        match RunHistory::from_csv(&text) {
            Err(MetricsError::BadHistoryFile { line, .. }) => assert_eq!(line, line_count),
            other => panic!("expected BadHistoryFile, got {other:?}"),
        }
        assert!(RunHistory::from_csv("not a history").is_err());
    }
}
