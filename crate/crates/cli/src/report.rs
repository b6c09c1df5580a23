use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;

use vone::corruptions::{read_results_csv, CorruptionKind, ResultRow};

use crate::manifest::Manifest;
use crate::{ReportArgs, UsageError};

/// Mean and standard error of the mean.
fn mean_sem(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, None);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, Some((var / n).sqrt()))
}

fn fmt_pct(v: &[f64]) -> String {
    if v.is_empty() {
        return "n/a".into();
    }
    match mean_sem(v) {
        (m, Some(s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
        (m, None) => format!("{:.2}", 100.0 * m),
    }
}

/// Per model, per seed: clean accuracy and per-kind mean over severities.
struct ModelScores {
    seeds: BTreeMap<u64, SeedScores>,
}

#[derive(Default)]
struct SeedScores {
    clean: Option<f64>,
    by_kind: BTreeMap<String, Vec<f64>>,
}

impl SeedScores {
    fn kind_mean(&self, kind: &str) -> Option<f64> {
        self.by_kind.get(kind).filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    fn group_mean(&self, kinds: &[&str]) -> Option<f64> {
        let v: Vec<f64> = kinds.iter().filter_map(|k| self.kind_mean(k)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn collect(rows: &[ResultRow]) -> BTreeMap<String, ModelScores> {
    let mut out: BTreeMap<String, ModelScores> = BTreeMap::new();
    for r in rows {
        let m = out.entry(r.model.clone()).or_insert_with(|| ModelScores { seeds: BTreeMap::new() });
        let s = m.seeds.entry(r.seed).or_default();
        if r.severity == 0 {
            s.clean = Some(r.top1);
        } else {
            s.by_kind.entry(r.kind.clone()).or_default().push(r.top1);
        }
    }
    out
}

fn per_seed(m: &ModelScores, f: impl Fn(&SeedScores) -> Option<f64>) -> Vec<f64> {
    m.seeds.values().filter_map(f).collect()
}

pub fn report(a: ReportArgs) -> Result<()> {
    if a.analysis.is_none() && a.results.is_empty() {
        return Err(anyhow::Error::new(UsageError("report needs --analysis and/or --results".into())));
    }
    let out: PathBuf = a
        .out
        .clone()
        .or_else(|| a.analysis.as_ref().map(|d| d.join("summary.md")))
        .unwrap_or_else(|| PathBuf::from("summary.md"));
    let mut m = Manifest::new("report", None, json!({}));
    let mut text = String::from("# Summary\n");

    let mut rows = Vec::new();
    for p in &a.results {
        rows.extend(read_results_csv(p)?);
        m.input_file(p)?;
    }
    if !rows.is_empty() {
        write_accuracies(&mut text, &collect(&rows));
    }
    if let Some(dir) = &a.analysis {
        write_analysis(&mut text, dir, &mut m)?;
    }

    if let Some(p) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
    m.output_file(&out)?;
    m.write_beside(&out)?;
    log::info!("summary -> {}", out.display());
    Ok(())
}

const NOISE: [&str; 3] = ["gaussian_noise", "shot_noise", "impulse_noise"];

fn write_accuracies(text: &mut String, models: &BTreeMap<String, ModelScores>) {
    let kinds: Vec<&str> = CorruptionKind::ALL.iter().map(|k| k.name()).collect();
    let _ = writeln!(text, "\n## Top-1 accuracy (%), mean ± SEM over seeds\n");
    let _ = writeln!(text, "| model | seeds | clean | all corruptions | noise | {} |", kinds.join(" | "));
    let _ = writeln!(text, "|---|---|---|---|---|{}|", vec!["---"; kinds.len()].join("|"));
    for (name, m) in models {
        let cols: Vec<String> = kinds.iter().map(|k| fmt_pct(&per_seed(m, |s| s.kind_mean(k)))).collect();
        let _ = writeln!(
            text,
            "| {name} | {} | {} | {} | {} | {} |",
            m.seeds.len(),
            fmt_pct(&per_seed(m, |s| s.clean)),
            fmt_pct(&per_seed(m, |s| s.group_mean(&kinds))),
            fmt_pct(&per_seed(m, |s| s.group_mean(&NOISE))),
            cols.join(" | ")
        );
    }
    let names: Vec<&String> = models.keys().collect();
    if names.len() >= 2 {
        let _ = writeln!(text, "\n## Noise robustness gap\n");
        for i in 0..names.len() {
            for j in i + 1..names.len() {
                let a = per_seed(&models[names[i]], |s| s.group_mean(&NOISE));
                let b = per_seed(&models[names[j]], |s| s.group_mean(&NOISE));
                if a.is_empty() || b.is_empty() {
                    continue;
                }
                let (a, b) = (mean_sem(&a).0, mean_sem(&b).0);
                let rel = if b != 0.0 { 100.0 * (a - b) / b } else { f64::NAN };
                let _ = writeln!(
                    text,
                    "- {} vs {}: {:+.2} points ({:+.2}% relative) on noise corruptions",
                    names[i],
                    names[j],
                    100.0 * (a - b),
                    rel
                );
            }
        }
    }
}

fn read_records(path: &Path) -> Result<(csv::StringRecord, Vec<csv::StringRecord>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let recs = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((headers, recs))
}

fn write_analysis(text: &mut String, dir: &Path, m: &mut Manifest) -> Result<()> {
    let corr = dir.join("correlations.csv");
    if corr.is_file() {
        m.input_file(&corr)?;
        let (h, recs) = read_records(&corr)?;
        let col = |name: &str| h.iter().position(|c| c == name);
        let (ni, ri, pi, nn, rule) = (col("name"), col("r"), col("p"), col("n"), col("rule"));
        let _ = writeln!(text, "\n## Cross-variant correlations\n");
        let _ = writeln!(text, "| correlation | rule | n | r | p |");
        let _ = writeln!(text, "|---|---|---|---|---|");
        for rec in &recs {
            let get = |i: Option<usize>| i.and_then(|i| rec.get(i)).unwrap_or("");
            let _ = writeln!(text, "| {} | {} | {} | {} | {} |", get(ni), get(rule), get(nn), short(get(ri)), short(get(pi)));
        }
    }
    let bins = dir.join("bins_rf.csv");
    if bins.is_file() {
        m.input_file(&bins)?;
        let (h, recs) = read_records(&bins)?;
        let vi = h.iter().position(|c| c == "variant");
        let ci = h.iter().position(|c| c == "count");
        let mut empty: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for rec in &recs {
            let v = vi.and_then(|i| rec.get(i)).unwrap_or("").to_string();
            let count: usize = ci.and_then(|i| rec.get(i)).and_then(|c| c.parse().ok()).unwrap_or(0);
            let e = empty.entry(v).or_default();
            e.0 += usize::from(count == 0);
            e.1 += 1;
        }
        let _ = writeln!(text, "\n## Empty RF bins\n");
        for (v, (e, n)) in empty {
            let _ = writeln!(text, "- {v}: {e} of {n} bins empty");
        }
    }
    Ok(())
}

fn short(s: &str) -> String {
    s.parse::<f64>().map(|v| format!("{v:.4e}")).unwrap_or_else(|_| s.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sem() {
        let (m, s) = mean_sem(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m - 2.5).abs() < 1e-12);
        assert!((s.unwrap() - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_sem(&[0.5]).1, None);
    }
}
