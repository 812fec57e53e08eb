//! Sweep tables on disk, model comparison and accuracy-vs-severity plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model_id: String,
    pub attack: String,
    pub severity: f64,
    pub bit_acc_mean: f64,
    pub bit_acc_std: f64,
    pub n: usize,
}

/// Context stored next to a sweep table (`<name>.meta.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub model_id: String,
    pub eval_seed: u64,
    /// Severities the model was trained on, per attack.
    #[serde(default)]
    pub trained: BTreeMap<String, Vec<f64>>,
    /// Whether the grids were extended past the training range.
    #[serde(default)]
    pub extended_grids: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub meta: SweepMeta,
}

fn same_severity(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(1.0)
}

/// `sweep.csv` → `sweep.meta.json`.
pub fn meta_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep");
    csv.with_file_name(format!("{stem}.meta.json"))
}

impl SweepTable {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::contract(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::contract(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes the CSV table and its metadata sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_csv_string()?).map_err(|e| Error::io(path, e))?;
        let meta = serde_json::to_string_pretty(&self.meta).expect("metadata serializes") + "\n";
        let mp = meta_path(path);
        std::fs::write(&mp, meta).map_err(|e| Error::io(&mp, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<SweepRow>, _>>()
            .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
        if rows.is_empty() {
            return Err(Error::Ingest(format!("{}: empty sweep table", path.display())));
        }
        let mp = meta_path(path);
        let meta = if mp.exists() {
            let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Ingest(format!("{}: {e}", mp.display())))?
        } else {
            SweepMeta {
                model_id: rows[0].model_id.clone(),
                eval_seed: 0,
                trained: BTreeMap::new(),
                extended_grids: false,
            }
        };
        Ok(SweepTable { rows, meta })
    }

    pub fn model_id(&self) -> &str {
        &self.meta.model_id
    }

    /// Attack labels in row order, without repeats.
    pub fn attacks(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.attack) {
                out.push(r.attack.clone());
            }
        }
        out
    }

    pub fn rows_for<'a>(&'a self, attack: &'a str) -> impl Iterator<Item = &'a SweepRow> + 'a {
        self.rows.iter().filter(move |r| r.attack == attack)
    }

    /// Lowest mean accuracy over the attack's grid, and where it occurs.
    pub fn worst_case(&self, attack: &str) -> Option<(f64, f64)> {
        self.rows_for(attack)
            .map(|r| (r.bit_acc_mean, r.severity))
            .fold(None, |acc: Option<(f64, f64)>, x| match acc {
                Some(a) if a.0 <= x.0 => Some(a),
                _ => Some(x),
            })
    }

    /// Mean accuracy on trained severities minus mean accuracy on the rest.
    pub fn overfit_gap(&self, attack: &str) -> Option<f64> {
        let trained = self.meta.trained.get(attack)?;
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for r in self.rows_for(attack) {
            if trained.iter().any(|&s| same_severity(s, r.severity)) {
                inside.push(r.bit_acc_mean);
            } else {
                outside.push(r.bit_acc_mean);
            }
        }
        if inside.is_empty() || outside.is_empty() {
            return None;
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Some(mean(&inside) - mean(&outside))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowComparison {
    pub attack: String,
    pub severity: f64,
    /// One accuracy per model, in input order.
    pub accuracy: Vec<f64>,
    /// Accuracy minus the first model's accuracy.
    pub delta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackSummary {
    pub attack: String,
    /// Per model: minimum mean accuracy over the grid.
    pub worst_case: Vec<f64>,
    pub worst_severity: Vec<f64>,
    /// Model with the strictly highest worst-case accuracy; `None` on a tie.
    pub most_robust: Option<String>,
    /// Per model: trained-severity accuracy minus held-out accuracy.
    pub overfit_gap: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub models: Vec<String>,
    pub rows: Vec<RowComparison>,
    pub attacks: Vec<AttackSummary>,
}

/// Row-by-row deltas and per-attack worst-case accuracy across models.
pub fn compare_models(tables: &[SweepTable]) -> Result<ComparisonReport> {
    let first = tables.first().ok_or_else(|| Error::contract("nothing to compare"))?;
    for t in &tables[1..] {
        let same = t.rows.len() == first.rows.len()
            && t.rows
                .iter()
                .zip(&first.rows)
                .all(|(a, b)| a.attack == b.attack && same_severity(a.severity, b.severity));
        if !same {
            return Err(Error::contract(format!(
                "sweep grids of `{}` and `{}` differ",
                first.model_id(),
                t.model_id()
            )));
        }
    }
    let rows = first
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let accuracy: Vec<f64> = tables.iter().map(|t| t.rows[i].bit_acc_mean).collect();
            RowComparison {
                attack: r.attack.clone(),
                severity: r.severity,
                delta: accuracy.iter().map(|a| a - accuracy[0]).collect(),
                accuracy,
            }
        })
        .collect();
    let attacks = first
        .attacks()
        .into_iter()
        .filter(|a| a != "identity")
        .map(|attack| {
            let worst: Vec<(f64, f64)> = tables
                .iter()
                .map(|t| t.worst_case(&attack).expect("attack present in every table"))
                .collect();
            let best = worst.iter().map(|w| w.0).fold(f64::NEG_INFINITY, f64::max);
            let leaders: Vec<usize> = (0..worst.len()).filter(|&i| worst[i].0 == best).collect();
            AttackSummary {
                most_robust: (leaders.len() == 1).then(|| tables[leaders[0]].model_id().to_string()),
                worst_case: worst.iter().map(|w| w.0).collect(),
                worst_severity: worst.iter().map(|w| w.1).collect(),
                overfit_gap: tables.iter().map(|t| t.overfit_gap(&attack)).collect(),
                attack,
            }
        })
        .collect();
    Ok(ComparisonReport {
        models: tables.iter().map(|t| t.model_id().to_string()).collect(),
        rows,
        attacks,
    })
}

const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn plot_attack(tables: &[SweepTable], attack: &str) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let severities: Vec<f64> = tables[0].rows_for(attack).map(|r| r.severity).collect();
    let (lo, hi) = severities
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |s: f64| pad + (s - lo) / span * (w - 2.0 * pad);
    let py = |acc: f64| h - pad - acc.clamp(0.0, 1.0) * (h - 2.0 * pad);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{attack}</text>"#, w / 2.0);
    let _ = writeln!(
        svg,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{tick:.2}</text>"#, pad - 4.0, py(tick) + 4.0);
    }
    for &s in &severities {
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{s}</text>"#, px(s), h - pad + 14.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">severity</text>"#, w / 2.0, h - 8.0);
    for (i, t) in tables.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if let Some(reference) = t.rows_for("identity").next() {
            let y = py(reference.bit_acc_mean);
            let _ = writeln!(
                svg,
                r#"<line x1="{pad}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="{color}" stroke-dasharray="4 3" stroke-opacity="0.6"/>"#,
                w - pad
            );
        }
        let points: Vec<String> = t
            .rows_for(attack)
            .map(|r| format!("{:.1},{:.1}", px(r.severity), py(r.bit_acc_mean)))
            .collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, points.join(" "));
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            w - pad - 120.0,
            pad + 14.0 * i as f64,
            t.model_id()
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// One SVG per attack (`<dir>/<attack>.svg`): accuracy against severity for
/// every table, with each model's no-attack accuracy as a dashed reference.
pub fn write_plots(tables: &[SweepTable], dir: &Path) -> Result<Vec<PathBuf>> {
    let first = tables.first().ok_or_else(|| Error::contract("nothing to plot"))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for attack in first.attacks().into_iter().filter(|a| a != "identity") {
        let path = dir.join(format!("{attack}.svg"));
        std::fs::write(&path, plot_attack(tables, &attack)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(id: &str, accs: &[f64]) -> SweepTable {
        let mut rows = vec![SweepRow {
            model_id: id.into(),
            attack: "identity".into(),
            severity: 0.0,
            bit_acc_mean: 1.0,
            bit_acc_std: 0.0,
            n: 4,
        }];
        for (i, &a) in accs.iter().enumerate() {
            rows.push(SweepRow {
                model_id: id.into(),
                attack: "crop".into(),
                severity: 0.1 * (i + 1) as f64,
                bit_acc_mean: a,
                bit_acc_std: 0.01,
                n: 4,
            });
        }
        SweepTable {
            rows,
            meta: SweepMeta {
                model_id: id.into(),
                eval_seed: 1,
                trained: BTreeMap::from([("crop".to_string(), vec![0.2])]),
                extended_grids: true,
            },
        }
    }

    #[test]
    fn self_comparison_has_zero_deltas() {
        let t = table("a", &[0.6, 0.8, 0.9]);
        let r = compare_models(&[t.clone(), t]).unwrap();
        assert!(r.rows.iter().all(|row| row.delta.iter().all(|&d| d == 0.0)));
        assert_eq!(r.attacks[0].most_robust, None);
    }

    #[test]
    fn worst_case_and_winner() {
        let a = table("worst_case", &[0.7, 0.8, 0.9]);
        let b = table("fixed", &[0.55, 0.95, 0.9]);
        let r = compare_models(&[a, b]).unwrap();
        let crop = &r.attacks[0];
        assert_eq!(crop.worst_case, vec![0.7, 0.55]);
        assert_eq!(crop.most_robust.as_deref(), Some("worst_case"));
        // fixed: trained 0.95 vs held-out mean 0.725
        assert!((crop.overfit_gap[1].unwrap() - 0.225).abs() < 1e-12);
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        assert!(compare_models(&[table("a", &[0.5, 0.6]), table("b", &[0.5])]).is_err());
    }

    #[test]
    fn csv_round_trip_and_plots() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        let t = table("m", &[0.5, 0.75]);
        t.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("model_id,attack,severity,bit_acc_mean,bit_acc_std,n\n"));
        assert_eq!(SweepTable::read(&path).unwrap(), t);
        assert!(dir.path().join("sweep.meta.json").exists());
        let plots = write_plots(&[t], &dir.path().join("plots")).unwrap();
        assert_eq!(plots.len(), 1);
        assert!(std::fs::read_to_string(&plots[0]).unwrap().starts_with("<svg"));
    }
}
