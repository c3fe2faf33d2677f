//! The comparison table: per seed, both transfer-learning baselines next to
//! the hybrid run, plus a mean row. Values are copied from the metrics
//! files as they are, never recomputed.

use std::path::PathBuf;

use fusionforge_core::MetricsRecord;
use serde::{Deserialize, Serialize};

/// Hybrid may trail the better baseline by at most this many points and
/// still count as holding up.
pub const DIRECTIONAL_MARGIN_POINTS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Runtimes {
    pub tl_model1: f64,
    pub tl_model2: f64,
    pub hybrid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub pretrain_model1: String,
    pub pretrain_model2: String,
    pub retrain: String,
    pub tl_accuracy_model1: f64,
    pub tl_accuracy_model2: f64,
    pub hybrid_accuracy: f64,
    /// `None` on the mean row.
    pub seed: Option<u64>,
    /// Seconds.
    pub runtimes: Runtimes,
    /// All three runs saw the same split.
    pub same_split: bool,
}

impl ComparisonRow {
    pub fn from_records(seed: u64, tl_a: &MetricsRecord, tl_b: &MetricsRecord, hybrid: &MetricsRecord) -> Self {
        let source = |r: &MetricsRecord, i: usize| {
            r.task.as_ref().and_then(|t| t.source_datasets.get(i).cloned()).unwrap_or_else(|| "--".into())
        };
        ComparisonRow {
            pretrain_model1: source(tl_a, 0),
            pretrain_model2: source(tl_b, 0),
            retrain: hybrid.dataset.clone(),
            tl_accuracy_model1: tl_a.final_test_accuracy,
            tl_accuracy_model2: tl_b.final_test_accuracy,
            hybrid_accuracy: hybrid.final_test_accuracy,
            seed: Some(seed),
            runtimes: Runtimes {
                tl_model1: tl_a.wall_seconds,
                tl_model2: tl_b.wall_seconds,
                hybrid: hybrid.wall_seconds,
            },
            same_split: tl_a.split_hash == hybrid.split_hash && tl_b.split_hash == hybrid.split_hash,
        }
    }

    pub fn best_baseline(&self) -> f64 {
        self.tl_accuracy_model1.max(self.tl_accuracy_model2)
    }

    /// Hybrid accuracy is no more than the margin below the better baseline.
    pub fn holds_up(&self) -> bool {
        self.hybrid_accuracy >= self.best_baseline() - DIRECTIONAL_MARGIN_POINTS / 100.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub experiment: String,
    pub rows: Vec<ComparisonRow>,
    pub mean: ComparisonRow,
    /// Seeds where [`ComparisonRow::holds_up`].
    pub seeds_holding_up: usize,
}

impl Comparison {
    pub fn new(experiment: &str, rows: Vec<ComparisonRow>) -> Self {
        assert!(!rows.is_empty(), "comparison needs at least one row");
        let n = rows.len() as f64;
        let mean_of = |f: &dyn Fn(&ComparisonRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let first = &rows[0];
        let mean = ComparisonRow {
            pretrain_model1: first.pretrain_model1.clone(),
            pretrain_model2: first.pretrain_model2.clone(),
            retrain: first.retrain.clone(),
            tl_accuracy_model1: mean_of(&|r| r.tl_accuracy_model1),
            tl_accuracy_model2: mean_of(&|r| r.tl_accuracy_model2),
            hybrid_accuracy: mean_of(&|r| r.hybrid_accuracy),
            seed: None,
            runtimes: Runtimes {
                tl_model1: mean_of(&|r| r.runtimes.tl_model1),
                tl_model2: mean_of(&|r| r.runtimes.tl_model2),
                hybrid: mean_of(&|r| r.runtimes.hybrid),
            },
            same_split: rows.iter().all(|r| r.same_split),
        };
        let seeds_holding_up = rows.iter().filter(|r| r.holds_up()).count();
        Comparison { experiment: experiment.to_string(), rows, mean, seeds_holding_up }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }

    /// Text table; columns follow the paper's layout with the seed last.
    pub fn to_text(&self) -> String {
        let header = [
            "Pretraining (Model 1)",
            "Pretraining (Model 2)",
            "Retraining",
            "TL Accuracy (Model 1)",
            "TL Accuracy (Model 2)",
            "Hybrid Learning Accuracy",
            "Seed",
        ];
        let cells = |r: &ComparisonRow| {
            [
                r.pretrain_model1.clone(),
                r.pretrain_model2.clone(),
                r.retrain.clone(),
                percent(r.tl_accuracy_model1),
                percent(r.tl_accuracy_model2),
                percent(r.hybrid_accuracy),
                r.seed.map_or("mean".to_string(), |s| s.to_string()),
            ]
        };
        let mut table: Vec<[String; 7]> = vec![header.map(String::from)];
        table.extend(self.rows.iter().map(cells));
        table.push(cells(&self.mean));
        let widths: Vec<usize> =
            (0..7).map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let line = |r: &[String; 7]| {
            let padded: Vec<String> = r.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
            format!("| {} |", padded.join(" | "))
        };
        let rule = format!("|{}|", widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|"));
        let mut out = vec![line(&table[0]), rule.clone()];
        out.extend(table[1..table.len() - 1].iter().map(line));
        out.push(rule);
        out.push(line(&table[table.len() - 1]));
        out.push(format!(
            "hybrid within {DIRECTIONAL_MARGIN_POINTS:.0} points of the better baseline or above: {} of {} seeds",
            self.seeds_holding_up,
            self.rows.len()
        ));
        if !self.mean.same_split {
            out.push("warning: baseline and hybrid runs did not all see the same split".into());
        }
        out.join("\n") + "\n"
    }
}

/// `0.5286` → `52.86%`.
pub fn percent(accuracy: f64) -> String {
    format!("{:.2}%", accuracy * 100.0)
}

/// Metrics files a comparison needs but could not find.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingRuns(pub Vec<PathBuf>);

impl std::fmt::Display for MissingRuns {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{} run(s) missing:", self.0.len())?;
        for p in &self.0 {
            writeln!(f, "  {}", p.display())?;
        }
        Ok(())
    }
}

impl std::error::Error for MissingRuns {}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, a: f64, b: f64, h: f64) -> ComparisonRow {
        ComparisonRow {
            pretrain_model1: "MNIST".into(),
            pretrain_model2: "CIFAR-100".into(),
            retrain: "Natural Images".into(),
            tl_accuracy_model1: a,
            tl_accuracy_model2: b,
            hybrid_accuracy: h,
            seed: Some(seed),
            runtimes: Runtimes { tl_model1: 1.0, tl_model2: 2.0, hybrid: 3.0 },
            same_split: true,
        }
    }

    #[test]
    fn paper_row_format() {
        let c = Comparison::new("x", vec![row(1, 0.5286, 0.5515, 0.6223)]);
        let text = c.to_text();
        let line = text.lines().nth(2).unwrap();
        let cells: Vec<&str> = line.trim_matches('|').split('|').map(str::trim).collect();
        assert_eq!(cells, ["MNIST", "CIFAR-100", "Natural Images", "52.86%", "55.15%", "62.23%", "1"]);
        // A single seed's mean equals the row.
        assert_eq!(c.mean.hybrid_accuracy, 0.6223);
        assert_eq!(c.seeds_holding_up, 1);
    }

    #[test]
    fn margin_counts_per_seed() {
        let rows = vec![row(1, 0.60, 0.50, 0.585), row(2, 0.60, 0.50, 0.579), row(3, 0.4, 0.3, 0.9)];
        let c = Comparison::new("x", rows);
        assert_eq!(c.seeds_holding_up, 2);
        assert!((c.mean.tl_accuracy_model1 - 0.5333333333333333).abs() < 1e-12);
        let back: Comparison = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn percent_rounds_to_two_places() {
        assert_eq!(percent(0.97214), "97.21%");
        assert_eq!(percent(1.0), "100.00%");
    }
}
