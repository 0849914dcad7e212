//! Summary tables built only from stored `result.json` files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::commands::RunResult;

struct Group {
    scores: Vec<f64>,
    per_token: Vec<f64>,
}

fn stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub struct Table {
    pub name: &'static str,
    pub title: &'static str,
    pub tsv: String,
    pub summary: Vec<String>,
}

/// Group by `(hidden, mode, objective)` and aggregate across seeds.
fn table(
    name: &'static str,
    title: &'static str,
    results: &[(&Path, &RunResult)],
    keep: impl Fn(&RunResult) -> bool,
) -> Table {
    let mut groups: BTreeMap<(usize, String, String, String), Group> = BTreeMap::new();
    for (_, r) in results.iter().filter(|(_, r)| keep(r)) {
        let Some(score) = r.score else { continue };
        let mode = r.mode.map(|m| m.tag().to_owned()).unwrap_or_else(|| "-".into());
        let g = groups
            .entry((r.hidden, mode, r.objective.clone(), r.metric.clone()))
            .or_insert(Group {
                scores: Vec::new(),
                per_token: Vec::new(),
            });
        g.scores.push(score);
        if let Some(t) = r.per_token {
            g.per_token.push(t);
        }
    }
    let mut tsv = String::from("hidden\tmode\tobjective\tmetric\truns\tmean\tstd\tper_token_mean\n");
    let mut summary = Vec::new();
    for ((hidden, mode, objective, metric), g) in &groups {
        let (mean, std) = stats(&g.scores);
        let tok = if g.per_token.is_empty() {
            "-".to_owned()
        } else {
            format!("{:.4}", stats(&g.per_token).0)
        };
        let _ = writeln!(
            tsv,
            "{hidden}\t{mode}\t{objective}\t{metric}\t{}\t{mean:.4}\t{std:.4}\t{tok}",
            g.scores.len()
        );
        summary.push(format!(
            "  N={hidden:<5} {mode:<8} {objective:<14} {metric}: {mean:.2} ± {std:.2} ({} run{})",
            g.scores.len(),
            if g.scores.len() == 1 { "" } else { "s" }
        ));
    }
    Table {
        name,
        title,
        tsv,
        summary,
    }
}

pub fn build(results: &[(&Path, &RunResult)]) -> (Vec<Table>, String) {
    let tables = vec![
        table("table1_base.tsv", "Base models", results, |r| {
            r.command == "train" || r.command == "eval"
        }),
        table("table2_interventions.tsv", "Interventions", results, |r| {
            r.command == "intervene"
        }),
        table("table3_probes.tsv", "Probes", results, |r| r.command == "probe"),
        table("table4_gates_toy.tsv", "Gate statistics and toy model", results, |r| {
            r.command == "gates" || r.command == "toy"
        }),
    ];
    let mut text = format!("{} result files\n", results.len());
    for t in &tables {
        let _ = writeln!(text, "\n{}", t.title);
        if t.summary.is_empty() {
            text.push_str("  (none)\n");
        }
        for line in &t.summary {
            text.push_str(line);
            text.push('\n');
        }
    }
    (tables, text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use onion_core::DecodeMode;

    fn result(objective: &str, seed: u64, score: f64) -> RunResult {
        RunResult {
            command: "intervene".into(),
            objective: objective.into(),
            hidden: 64,
            mode: Some(DecodeMode::Autoregressive),
            seed,
            metric: "exact-match".into(),
            score: Some(score),
            per_token: None,
            steps: 10,
            first_step_99: None,
            failure: None,
        }
    }

    #[test]
    fn groups_across_seeds() {
        let a = result("onion", 0, 0.8);
        let b = result("onion", 1, 0.9);
        let c = result("unigram", 0, 0.0);
        let p = Path::new("x");
        let rows = [(p, &a), (p, &b), (p, &c)];
        let (tables, text) = build(&rows);
        let t = &tables[1].tsv;
        assert!(t.contains("64\tar\tonion\texact-match\t2\t0.8500\t0.0707\t-"), "{t}");
        assert!(t.contains("64\tar\tunigram\texact-match\t1\t0.0000\t0.0000\t-"));
        assert!(text.contains("0.85 ± 0.07 (2 runs)"));
        assert_eq!(tables[0].tsv.lines().count(), 1);
    }
}
