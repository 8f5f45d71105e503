//! Aggregation of unit results into the report tables, plus JSON, text
//! and CSV rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::Prf;
use super::protocols::{Budget, UnitResult, Variant};
use crate::error::{Error, Result};
use crate::prompting::TemplateDeletion;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    ZeroShot,
    SeenUnseen,
    Robustness,
    FewShot,
    Ablation,
    InverseAnalysis,
}

impl Protocol {
    pub fn key(self) -> &'static str {
        match self {
            Protocol::ZeroShot => "zero_shot",
            Protocol::SeenUnseen => "seen_unseen",
            Protocol::Robustness => "robustness",
            Protocol::FewShot => "few_shot",
            Protocol::Ablation => "ablation",
            Protocol::InverseAnalysis => "inverse_analysis",
        }
    }
}

/// Mean and population standard deviation of a sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt(), n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub scores: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub domain: String,
    pub per_seed: Vec<SeedScore>,
    pub f1: Stat,
    pub precision: Stat,
    pub recall: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotTable {
    pub domains: Vec<DomainRow>,
    /// Unweighted mean over domains, one value per seed.
    pub average_per_seed: Vec<(u64, f64)>,
    pub average_f1: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeenUnseenTable {
    /// Domain-uniform mean over the domains that have such slots.
    pub seen_f1: Stat,
    pub unseen_f1: Stat,
    pub seen_per_seed: Vec<(u64, f64)>,
    pub unseen_per_seed: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub deletion: TemplateDeletion,
    pub f1: Stat,
    pub delta: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub budget: Budget,
    pub f1: Stat,
    pub per_seed: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub f1: Stat,
    pub per_seed: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseSummary {
    pub with_precision: Stat,
    pub with_recall: Stat,
    pub with_f1: Stat,
    pub without_precision: Stat,
    pub without_recall: Stat,
    pub without_f1: Stat,
    pub delta_precision: f64,
    pub delta_recall: f64,
    pub delta_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub protocols: Vec<Protocol>,
    pub units: Vec<UnitResult>,
    pub zero_shot: Option<ZeroShotTable>,
    pub seen_unseen: Option<SeenUnseenTable>,
    pub robustness: Option<Vec<RobustnessRow>>,
    pub few_shot: Option<Vec<BudgetRow>>,
    pub ablation: Option<Vec<AblationRow>>,
    pub inverse_analysis: Option<InverseSummary>,
}

fn is_main(u: &UnitResult, variant: Variant) -> bool {
    u.spec.variant == variant && u.spec.budget == Budget::All
}

/// Per seed, the mean of `value` over that seed's units.
fn per_seed_mean<'a>(units: impl Iterator<Item = &'a UnitResult>, value: impl Fn(&UnitResult) -> Option<f64>) -> Vec<(u64, f64)> {
    let mut by_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for u in units {
        if let Some(v) = value(u) {
            by_seed.entry(u.spec.seed).or_default().push(v);
        }
    }
    by_seed.into_iter().map(|(s, v)| (s, Stat::of(&v).mean)).collect()
}

fn stat_of(pairs: &[(u64, f64)]) -> Stat {
    Stat::of(&pairs.iter().map(|p| p.1).collect::<Vec<_>>())
}

fn zero_shot_table(units: &[UnitResult]) -> ZeroShotTable {
    let mut by_domain: BTreeMap<&str, Vec<SeedScore>> = BTreeMap::new();
    for u in units.iter().filter(|u| is_main(u, Variant::Full)) {
        by_domain.entry(&u.spec.target).or_default().push(SeedScore {
            seed: u.spec.seed,
            scores: u.metrics,
        });
    }
    let domains = by_domain
        .into_iter()
        .map(|(domain, per_seed)| {
            let col = |f: fn(&Prf) -> f64| Stat::of(&per_seed.iter().map(|s| f(&s.scores)).collect::<Vec<_>>());
            DomainRow {
                domain: domain.to_string(),
                f1: col(|p| p.f1),
                precision: col(|p| p.precision),
                recall: col(|p| p.recall),
                per_seed,
            }
        })
        .collect();
    let average_per_seed = per_seed_mean(units.iter().filter(|u| is_main(u, Variant::Full)), |u| Some(u.metrics.f1));
    ZeroShotTable {
        domains,
        average_f1: stat_of(&average_per_seed),
        average_per_seed,
    }
}

fn seen_unseen_table(units: &[UnitResult]) -> SeenUnseenTable {
    let full = || units.iter().filter(|u| is_main(u, Variant::Full));
    let seen_per_seed = per_seed_mean(full(), |u| (!u.seen_types.is_empty()).then_some(u.seen.f1));
    let unseen_per_seed = per_seed_mean(full(), |u| (!u.unseen_types.is_empty()).then_some(u.unseen.f1));
    SeenUnseenTable {
        seen_f1: stat_of(&seen_per_seed),
        unseen_f1: stat_of(&unseen_per_seed),
        seen_per_seed,
        unseen_per_seed,
    }
}

fn robustness_rows(units: &[UnitResult]) -> Vec<RobustnessRow> {
    let mut by_deletion: BTreeMap<TemplateDeletion, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for u in units.iter().filter(|u| is_main(u, Variant::Full)) {
        for r in u.robustness.iter().flatten() {
            let entry = by_deletion.entry(r.deletion).or_default();
            entry.0.push(r.f1);
            entry.1.push(r.delta);
        }
    }
    by_deletion
        .into_iter()
        .map(|(deletion, (f1, delta))| RobustnessRow {
            deletion,
            f1: Stat::of(&f1),
            delta: Stat::of(&delta),
        })
        .collect()
}

fn budget_rows(units: &[UnitResult]) -> Vec<BudgetRow> {
    let budgets: BTreeSet<Budget> = units.iter().filter(|u| u.spec.variant == Variant::Full).map(|u| u.spec.budget).collect();
    budgets
        .into_iter()
        .map(|budget| {
            let per_seed = per_seed_mean(
                units.iter().filter(|u| u.spec.variant == Variant::Full && u.spec.budget == budget),
                |u| Some(u.metrics.f1),
            );
            BudgetRow {
                budget,
                f1: stat_of(&per_seed),
                per_seed,
            }
        })
        .collect()
}

fn ablation_rows(units: &[UnitResult]) -> Vec<AblationRow> {
    Variant::ALL
        .iter()
        .filter(|&&v| units.iter().any(|u| is_main(u, v)))
        .map(|&variant| {
            let per_seed = per_seed_mean(units.iter().filter(|u| is_main(u, variant)), |u| Some(u.metrics.f1));
            AblationRow {
                variant,
                f1: stat_of(&per_seed),
                per_seed,
            }
        })
        .collect()
}

fn inverse_summary(units: &[UnitResult]) -> Option<InverseSummary> {
    let side = |variant: Variant, f: fn(&Prf) -> f64| {
        stat_of(&per_seed_mean(units.iter().filter(|u| is_main(u, variant)), |u| Some(f(&u.metrics))))
    };
    let with_precision = side(Variant::Full, |p| p.precision);
    let without_precision = side(Variant::WithoutRp, |p| p.precision);
    if with_precision.n == 0 || without_precision.n == 0 {
        return None;
    }
    let (with_recall, without_recall) = (side(Variant::Full, |p| p.recall), side(Variant::WithoutRp, |p| p.recall));
    let (with_f1, without_f1) = (side(Variant::Full, |p| p.f1), side(Variant::WithoutRp, |p| p.f1));
    Some(InverseSummary {
        delta_precision: with_precision.mean - without_precision.mean,
        delta_recall: with_recall.mean - without_recall.mean,
        delta_f1: with_f1.mean - without_f1.mean,
        with_precision,
        with_recall,
        with_f1,
        without_precision,
        without_recall,
        without_f1,
    })
}

impl EvalReport {
    /// Builds every requested table from the unit results. Units are sorted
    /// by spec, so the report does not depend on execution order.
    pub fn build(config_hash: impl Into<String>, protocols: &[Protocol], mut units: Vec<UnitResult>) -> Self {
        units.sort_by(|a, b| a.spec.cmp(&b.spec));
        units.dedup_by(|a, b| a.spec == b.spec);
        let protocols: Vec<Protocol> = protocols.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let wants = |p: Protocol| protocols.contains(&p);
        let seeds = units.iter().map(|u| u.spec.seed).collect::<BTreeSet<_>>().into_iter().collect();
        Self {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash.into(),
            seeds,
            zero_shot: wants(Protocol::ZeroShot).then(|| zero_shot_table(&units)),
            seen_unseen: wants(Protocol::SeenUnseen).then(|| seen_unseen_table(&units)),
            robustness: wants(Protocol::Robustness).then(|| robustness_rows(&units)),
            few_shot: wants(Protocol::FewShot).then(|| budget_rows(&units)),
            ablation: wants(Protocol::Ablation).then(|| ablation_rows(&units)),
            inverse_analysis: if wants(Protocol::InverseAnalysis) { inverse_summary(&units) } else { None },
            protocols,
            units,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Reads a report, rejecting files of another schema with the path in
    /// the error.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mismatch = |reason: String| Error::SchemaMismatch {
            path: path.to_path_buf(),
            reason,
        };
        let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| mismatch(e.to_string()))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(mismatch(format!("schema version {v}, expected {SCHEMA_VERSION}"))),
            None => return Err(mismatch("missing schema_version".into())),
        }
        serde_json::from_value(value).map_err(|e| mismatch(e.to_string()))
    }

    /// Pools the units of several reports and rebuilds the tables.
    pub fn merge(reports: &[EvalReport]) -> Self {
        let hashes: BTreeSet<&str> = reports.iter().map(|r| r.config_hash.as_str()).collect();
        let hash = if hashes.len() == 1 { hashes.into_iter().next().unwrap().to_string() } else { "mixed".to_string() };
        let protocols: Vec<Protocol> = reports.iter().flat_map(|r| r.protocols.iter().copied()).collect();
        let units = reports.iter().flat_map(|r| r.units.iter().cloned()).collect();
        Self::build(hash, &protocols, units)
    }
}

fn pct(stat: &Stat) -> String {
    if stat.n > 1 {
        format!("{:6.2} ± {:5.2}", 100.0 * stat.mean, 100.0 * stat.std)
    } else {
        format!("{:6.2}", 100.0 * stat.mean)
    }
}

fn aligned(out: &mut String, title: &str, header: &[&str], rows: &[Vec<String>]) {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(cols) {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let pad = widths[i] - c.chars().count();
                if i == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{}", line(header.to_vec()));
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for row in rows {
        let _ = writeln!(out, "{}", line(row.iter().map(String::as_str).collect()));
    }
    out.push('\n');
}

/// Aligned-column text tables, scores in percent (mean ± std over seeds).
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    if let Some(t) = &report.zero_shot {
        let mut rows: Vec<Vec<String>> = t.domains.iter().map(|d| vec![d.domain.clone(), pct(&d.precision), pct(&d.recall), pct(&d.f1)]).collect();
        rows.push(vec!["Average F1".into(), String::new(), String::new(), pct(&t.average_f1)]);
        aligned(&mut out, "Zero-shot slot F1 per target domain", &["Target domain", "P", "R", "F1"], &rows);
    }
    if let Some(t) = &report.seen_unseen {
        let rows = vec![vec!["seen".into(), pct(&t.seen_f1)], vec!["unseen".into(), pct(&t.unseen_f1)]];
        aligned(&mut out, "Average F1 on seen and unseen slots", &["Slots", "F1"], &rows);
    }
    if let Some(rows) = &report.robustness {
        let rows: Vec<Vec<String>> = rows.iter().map(|r| vec![r.deletion.label().to_string(), pct(&r.f1), pct(&r.delta)]).collect();
        aligned(&mut out, "Template robustness (F1 drop vs full template)", &["Deletion", "F1", "Drop"], &rows);
    }
    if let Some(rows) = &report.few_shot {
        let rows: Vec<Vec<String>> = rows.iter().map(|r| vec![r.budget.to_string(), pct(&r.f1)]).collect();
        aligned(&mut out, "Few-shot budgets (utterances per source domain)", &["Budget", "F1"], &rows);
    }
    if let Some(rows) = &report.ablation {
        let header: Vec<&str> = rows.iter().map(|r| r.variant.label()).collect();
        let cells: Vec<String> = rows.iter().map(|r| pct(&r.f1)).collect();
        let mut full_header = vec!["Ablation"];
        full_header.extend(header);
        let mut row = vec!["F1".to_string()];
        row.extend(cells);
        aligned(&mut out, "Ablation (label prompt LP, inverse prompt RP)", &full_header, &[row]);
    }
    if let Some(s) = &report.inverse_analysis {
        let signed = |d: f64| format!("{:+.2}", 100.0 * d);
        let rows = vec![
            vec!["with inverse".into(), pct(&s.with_precision), pct(&s.with_recall), pct(&s.with_f1)],
            vec!["without inverse".into(), pct(&s.without_precision), pct(&s.without_recall), pct(&s.without_f1)],
            vec!["delta".into(), signed(s.delta_precision), signed(s.delta_recall), signed(s.delta_f1)],
        ];
        aligned(&mut out, "Inverse-task warm-up", &["Pipeline", "P", "R", "F1"], &rows);
    }
    out
}

/// `protocol,row,metric,seed,value` rows, one per per-seed number.
pub fn render_csv(report: &EvalReport) -> String {
    let mut out = String::from("protocol,row,metric,seed,value\n");
    let mut row = |protocol: Protocol, name: &str, metric: &str, seed: u64, value: f64| {
        let _ = writeln!(out, "{},{},{},{},{}", protocol.key(), csv_field(name), metric, seed, value);
    };
    if let Some(t) = &report.zero_shot {
        for d in &t.domains {
            for s in &d.per_seed {
                row(Protocol::ZeroShot, &d.domain, "precision", s.seed, s.scores.precision);
                row(Protocol::ZeroShot, &d.domain, "recall", s.seed, s.scores.recall);
                row(Protocol::ZeroShot, &d.domain, "f1", s.seed, s.scores.f1);
            }
        }
        for &(seed, v) in &t.average_per_seed {
            row(Protocol::ZeroShot, "average", "f1", seed, v);
        }
    }
    if let Some(t) = &report.seen_unseen {
        for &(seed, v) in &t.seen_per_seed {
            row(Protocol::SeenUnseen, "seen", "f1", seed, v);
        }
        for &(seed, v) in &t.unseen_per_seed {
            row(Protocol::SeenUnseen, "unseen", "f1", seed, v);
        }
    }
    if report.robustness.is_some() {
        for u in report.units.iter().filter(|u| is_main(u, Variant::Full)) {
            for r in u.robustness.iter().flatten() {
                row(Protocol::Robustness, &format!("{}/{}", u.spec.target, r.deletion.label()), "delta", u.spec.seed, r.delta);
            }
        }
    }
    if let Some(rows) = &report.few_shot {
        for r in rows {
            for &(seed, v) in &r.per_seed {
                row(Protocol::FewShot, &r.budget.to_string(), "f1", seed, v);
            }
        }
    }
    if let Some(rows) = &report.ablation {
        for r in rows {
            for &(seed, v) in &r.per_seed {
                row(Protocol::Ablation, r.variant.label(), "f1", seed, v);
            }
        }
    }
    if report.inverse_analysis.is_some() {
        for u in report.units.iter().filter(|u| is_main(u, Variant::Full) || is_main(u, Variant::WithoutRp)) {
            let name = if u.spec.variant == Variant::Full { "with" } else { "without" };
            row(Protocol::InverseAnalysis, &format!("{}/{}", u.spec.target, name), "precision", u.spec.seed, u.metrics.precision);
            row(Protocol::InverseAnalysis, &format!("{}/{}", u.spec.target, name), "recall", u.spec.seed, u.metrics.recall);
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
