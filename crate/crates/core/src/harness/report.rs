//! Aggregated results and the text / CSV / plot-data report files.

use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::Snr;
use crate::error::{Error, Result};
use crate::mask_estimator::BankStats;
use crate::mdt_hmm::EditCounts;

use super::config::Method;

/// Totals over a set of decoded utterances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CellStats {
    pub edits: EditCounts,
    pub utterances: usize,
    pub isolated: usize,
    pub reliable: usize,
    pub delta_reliable: usize,
    pub cells: usize,
}

impl CellStats {
    pub fn add(&mut self, o: &CellStats) {
        self.edits.add(&o.edits);
        self.utterances += o.utterances;
        self.isolated += o.isolated;
        self.reliable += o.reliable;
        self.delta_reliable += o.delta_reliable;
        self.cells += o.cells;
    }

    /// Word accuracy in tenths of a percent, rounded half up.
    pub fn accuracy_tenths(&self) -> i64 {
        let n = self.edits.n as i64;
        let num = 1000 * (n - self.edits.errors() as i64);
        (2 * num + n).div_euclid(2 * n)
    }

    pub fn mean_isolated(&self) -> f64 {
        self.isolated as f64 / self.utterances as f64
    }

    pub fn reliable_fraction(&self) -> f64 {
        self.reliable as f64 / self.cells as f64
    }
}

/// Agreement of predicted static masks with the classical oracle labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Agreement {
    pub cells: usize,
    pub state_dependent: usize,
    pub pooled: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub snrs: Vec<Snr>,
    pub methods: Vec<Method>,
    /// Noise kinds in config order, `none` for the clean condition.
    pub noise_kinds: Vec<String>,
    /// `[snr][method]`, pooled over noise kinds.
    pub by_snr: Vec<Vec<CellStats>>,
    /// `(noise kind, snr index, per-method stats)`.
    pub by_noise: Vec<(String, usize, Vec<CellStats>)>,
    /// Per SNR.
    pub agreement: Vec<Agreement>,
    pub n_bands: usize,
    pub n_states: usize,
    pub bank: BankStats,
}

/// Formats a tenths count as a one-decimal number without `-0.0`.
pub fn fmt_tenths(v: i64) -> String {
    let sign = if v < 0 { "-" } else { "" };
    let a = v.unsigned_abs();
    format!("{sign}{}.{}", a / 10, a % 10)
}

fn snr_label(s: Snr) -> String {
    if s.is_clean() {
        "clean".into()
    } else {
        format!("{}", s.db())
    }
}

fn pct(num: usize, den: usize) -> String {
    if den == 0 {
        return "-".into();
    }
    fmt_tenths(((2000 * num + den) / (2 * den)) as i64)
}

impl ExperimentReport {
    pub fn method_index(&self, m: Method) -> Option<usize> {
        self.methods.iter().position(|&x| x == m)
    }

    pub fn snr_index(&self, s: Snr) -> Option<usize> {
        self.snrs.iter().position(|&x| x == s)
    }

    pub fn accuracy_tenths(&self, snr: usize, m: Method) -> Option<i64> {
        Some(self.by_snr[snr][self.method_index(m)?].accuracy_tenths())
    }

    pub fn accuracy(&self, snr: usize, m: Method) -> Option<f64> {
        self.accuracy_tenths(snr, m).map(|t| t as f64 / 10.0)
    }

    /// State-dependent minus classical, from the rounded values.
    pub fn delta_tenths(&self, snr: usize) -> Option<i64> {
        Some(self.accuracy_tenths(snr, Method::StateDependentOracle)? - self.accuracy_tenths(snr, Method::ClassicalOracle)?)
    }

    pub fn mean_isolated(&self, snr: usize, m: Method) -> Option<f64> {
        Some(self.by_snr[snr][self.method_index(m)?].mean_isolated())
    }

    /// Number of distinct static masks per frame, `2^K`.
    pub fn mask_hypotheses(&self) -> u128 {
        1u128 << self.n_bands.min(127)
    }

    fn table(&self, out: &mut String, rows: &[(String, Vec<String>)]) {
        let _ = write!(out, "{:<12}", "method");
        for s in &self.snrs {
            let _ = write!(out, "{:>8}", snr_label(*s));
        }
        out.push('\n');
        for (label, vals) in rows {
            let _ = write!(out, "{label:<12}");
            for v in vals {
                let _ = write!(out, "{v:>8}");
            }
            out.push('\n');
        }
    }

    fn accuracy_rows(&self, stats: &[&[CellStats]]) -> Vec<(String, Vec<String>)> {
        let mut rows: Vec<(String, Vec<String>)> = self
            .methods
            .iter()
            .enumerate()
            .map(|(mi, m)| {
                (
                    m.label().to_string(),
                    stats.iter().map(|s| fmt_tenths(s[mi].accuracy_tenths())).collect(),
                )
            })
            .collect();
        if let (Some(c), Some(d)) = (
            self.method_index(Method::ClassicalOracle),
            self.method_index(Method::StateDependentOracle),
        ) {
            rows.push((
                "delta acc.".into(),
                stats
                    .iter()
                    .map(|s| fmt_tenths(s[d].accuracy_tenths() - s[c].accuracy_tenths()))
                    .collect(),
            ));
        }
        rows
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let all: Vec<&[CellStats]> = self.by_snr.iter().map(|v| v.as_slice()).collect();
        out.push_str("word accuracy (%), all noise kinds\n");
        self.table(&mut out, &self.accuracy_rows(&all));

        out.push_str("\nmean isolated reliable elements per utterance\n");
        let iso: Vec<(String, Vec<String>)> = self
            .methods
            .iter()
            .enumerate()
            .map(|(mi, m)| {
                (
                    m.label().to_string(),
                    all.iter().map(|s| format!("{:.2}", s[mi].mean_isolated())).collect(),
                )
            })
            .collect();
        self.table(&mut out, &iso);

        out.push_str("\nreliable static cells (%)\n");
        let rel: Vec<(String, Vec<String>)> = self
            .methods
            .iter()
            .enumerate()
            .map(|(mi, m)| {
                (
                    m.label().to_string(),
                    all.iter().map(|s| pct(s[mi].reliable, s[mi].cells)).collect(),
                )
            })
            .collect();
        self.table(&mut out, &rel);

        out.push_str("\nestimated mask agreement with oracle labels (%)\n");
        let agree = vec![
            (
                "state dep.".to_string(),
                self.agreement.iter().map(|a| pct(a.state_dependent, a.cells)).collect(),
            ),
            (
                "pooled".to_string(),
                self.agreement.iter().map(|a| pct(a.pooled, a.cells)).collect(),
            ),
        ];
        self.table(&mut out, &agree);

        let _ = writeln!(
            out,
            "\nmask hypotheses per frame: 2^{} = {} possible masks vs {} state-conditioned masks (S_total = {})",
            self.n_bands,
            self.mask_hypotheses(),
            self.n_states,
            self.n_states
        );
        let _ = writeln!(
            out,
            "estimator bank: {} states x {} bands = {} slots (trained {}, constant {}, fallback {})",
            self.n_states,
            self.n_bands,
            self.bank.total(),
            self.bank.trained,
            self.bank.constant,
            self.bank.fallback
        );

        for kind in &self.noise_kinds {
            if kind == "none" {
                continue;
            }
            let _ = writeln!(out, "\nword accuracy (%), noise kind {kind}");
            let per: Vec<&[CellStats]> = (0..self.snrs.len())
                .map(|si| {
                    self.by_noise
                        .iter()
                        .find(|(k, s, _)| (k == kind || self.snrs[*s].is_clean() && k == "none") && *s == si)
                        .map(|(_, _, v)| v.as_slice())
                        .unwrap_or(&[])
                })
                .collect();
            if per.iter().any(|v| v.is_empty()) {
                continue;
            }
            self.table(&mut out, &self.accuracy_rows(&per));
        }
        out
    }

    pub const CSV_METRICS: [&'static str; 3] = ["accuracy", "mean_isolated_reliable", "reliable_fraction"];

    /// One row per (SNR, method, metric).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("snr,method,metric,value\n");
        for (si, s) in self.snrs.iter().enumerate() {
            for (mi, m) in self.methods.iter().enumerate() {
                let st = &self.by_snr[si][mi];
                let vals = [
                    fmt_tenths(st.accuracy_tenths()),
                    format!("{:.4}", st.mean_isolated()),
                    format!("{:.6}", st.reliable_fraction()),
                ];
                for (metric, v) in Self::CSV_METRICS.iter().zip(vals) {
                    let _ = writeln!(out, "{},{},{},{}", snr_label(*s), m.name(), metric, v);
                }
            }
        }
        out
    }

    /// Finite SNRs only: per method an `snr accuracy` column pair.
    pub fn to_curves(&self) -> String {
        let mut out = String::from("#");
        for m in &self.methods {
            let _ = write!(out, " snr_db {}", m.name());
        }
        out.push('\n');
        for (si, s) in self.snrs.iter().enumerate() {
            if s.is_clean() {
                continue;
            }
            let cols: Vec<String> = (0..self.methods.len())
                .map(|mi| format!("{} {}", s.db(), fmt_tenths(self.by_snr[si][mi].accuracy_tenths())))
                .collect();
            let _ = writeln!(out, "{}", cols.join(" "));
        }
        out
    }
}

pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const CURVES_DAT: &str = "curves.dat";

pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [
        (REPORT_TXT, report.to_text()),
        (REPORT_CSV, report.to_csv()),
        (CURVES_DAT, report.to_curves()),
    ] {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(n: usize, errors: usize, iso: usize) -> CellStats {
        CellStats {
            edits: EditCounts {
                n,
                substitutions: errors,
                deletions: 0,
                insertions: 0,
            },
            utterances: 10,
            isolated: iso,
            reliable: 50,
            delta_reliable: 20,
            cells: 100,
        }
    }

    fn sample(methods: Vec<Method>) -> ExperimentReport {
        let snrs = vec![Snr::CLEAN, Snr(20.0), Snr(-5.0)];
        let by_snr = vec![
            methods.iter().map(|_| stats(1000, 3, 1)).collect(),
            methods.iter().enumerate().map(|(i, _)| stats(1000, 8 - 3 * i, 5)).collect(),
            methods.iter().enumerate().map(|(i, _)| stats(1000, 414 - 87 * i, 9)).collect(),
        ];
        ExperimentReport {
            snrs,
            noise_kinds: vec!["none".into(), "white".into()],
            by_noise: vec![],
            agreement: vec![Agreement::default(); 3],
            by_snr,
            methods,
            n_bands: 23,
            n_states: 179,
            bank: BankStats {
                trained: 4000,
                constant: 100,
                fallback: 17,
            },
        }
    }

    #[test]
    fn tenths_formatting() {
        assert_eq!(fmt_tenths(997), "99.7");
        assert_eq!(fmt_tenths(0), "0.0");
        assert_eq!(fmt_tenths(-3), "-0.3");
        assert_eq!(fmt_tenths(-87), "-8.7");
        assert_eq!(stats(3, 1, 0).accuracy_tenths(), 667);
        assert_eq!(stats(8, 1, 0).accuracy_tenths(), 875);
        let mut s = stats(2, 0, 0);
        s.edits.insertions = 5;
        assert_eq!(s.accuracy_tenths(), -1500);
    }

    #[test]
    fn text_rows_and_delta() {
        let r = sample(vec![Method::ClassicalOracle, Method::StateDependentOracle]);
        let t = r.to_text();
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[2].starts_with("classical "));
        assert!(lines[3].starts_with("state dep. "));
        assert!(lines[4].starts_with("delta acc. "));
        assert!(lines[4].ends_with("8.7"));
        assert!(t.contains("8388608"));
        assert!(t.contains("4117 slots"));
        assert_eq!(r.delta_tenths(2), Some(87));
    }

    #[test]
    fn single_method_has_no_delta_row() {
        let r = sample(vec![Method::ClassicalOracle]);
        assert!(!r.to_text().contains("delta acc."));
        assert_eq!(r.delta_tenths(0), None);
    }

    #[test]
    fn csv_and_curves_shape() {
        let r = sample(vec![Method::ClassicalOracle, Method::StateDependentOracle]);
        assert_eq!(r.to_csv().lines().count(), 1 + 3 * 2 * 3);
        let c = r.to_curves();
        assert_eq!(c.lines().count(), 3);
        assert_eq!(c.lines().nth(2).unwrap().split_whitespace().count(), 4);
    }
}
