use std::fmt::Write as _;

use super::{AblationReport, Metrics, ProtocolResult};

/// `0.7443 -> "74.43"`.
pub fn format_percent(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn confusion_grid(out: &mut String, m: &Metrics, names: &[String]) {
    let width = names.iter().map(String::len).max().unwrap_or(0).max(6);
    let _ = write!(out, "  {:>width$} |", "true");
    for n in names {
        let _ = write!(out, " {n:>width$}");
    }
    out.push('\n');
    for (i, row) in m.confusion.iter().enumerate() {
        let _ = write!(out, "  {:>width$} |", names[i]);
        for v in row {
            let _ = write!(out, " {v:>width$}");
        }
        out.push('\n');
    }
}

fn absent_note(out: &mut String, m: &Metrics, names: &[String]) {
    if !m.absent_classes.is_empty() {
        let absent: Vec<&str> = m.absent_classes.iter().map(|&i| names[i].as_str()).collect();
        let _ = writeln!(out, "  note: UAR excludes classes absent from this set: {}", absent.join(", "));
    }
}

fn confusion_cell(m: &Metrics) -> String {
    m.confusion
        .iter()
        .map(|r| r.iter().map(u64::to_string).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join(";")
}

impl ProtocolResult {
    /// Per-fold and pooled WAR/UAR with confusion grids.
    pub fn to_text(&self) -> String {
        let names = self.labels.names();
        let mut out = String::new();
        let _ = writeln!(out, "Leave-one-{}-out cross-validation, {} folds", self.mode, self.folds.len());
        let _ = writeln!(out, "classes: {}", names.join(", "));
        for f in &self.folds {
            let _ = writeln!(
                out,
                "\nfold {} ({} {}): {} test utterances, {} training segments, {} epochs",
                f.fold, self.mode, f.unit, f.test_utterances, f.train_segments, f.epochs_run
            );
            let _ = writeln!(
                out,
                "  WAR {}  UAR {}",
                format_percent(f.metrics.war),
                format_percent(f.metrics.uar)
            );
            absent_note(&mut out, &f.metrics, names);
            confusion_grid(&mut out, &f.metrics, names);
        }
        let _ = writeln!(out, "\npooled: {} utterances", self.pooled.total());
        let _ = writeln!(
            out,
            "  WAR {}  UAR {}",
            format_percent(self.pooled.war),
            format_percent(self.pooled.uar)
        );
        absent_note(&mut out, &self.pooled, names);
        confusion_grid(&mut out, &self.pooled, names);
        out
    }

    /// `scope,unit,utterances,war,uar,confusion` rows; percentages with two
    /// decimals, confusion rows separated by `;`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,unit,utterances,war,uar,confusion\n");
        for f in &self.folds {
            let _ = writeln!(
                out,
                "fold_{},{},{},{},{},{}",
                f.fold,
                f.unit,
                f.metrics.total(),
                format_percent(f.metrics.war),
                format_percent(f.metrics.uar),
                confusion_cell(&f.metrics)
            );
        }
        let _ = writeln!(
            out,
            "pooled,all,{},{},{},{}",
            self.pooled.total(),
            format_percent(self.pooled.war),
            format_percent(self.pooled.uar),
            confusion_cell(&self.pooled)
        );
        out
    }
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:>4} {:>4} {:>4} {:>10} {:>8} {:>8}", "config", "T", "F", "TF", "params", "WAR(%)", "UAR(%)");
        let mark = |b: bool| if b { "yes" } else { "no" };
        for r in &self.rows {
            let (t, f, tf) = r.ablation.toggles();
            let _ = writeln!(
                out,
                "{:<8} {:>4} {:>4} {:>4} {:>10} {:>8} {:>8}",
                r.ablation.label(),
                mark(t),
                mark(f),
                mark(tf),
                r.parameter_count,
                format_percent(r.result.pooled.war),
                format_percent(r.result.pooled.uar)
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,time,freq,fusion,params,war,uar\n");
        for r in &self.rows {
            let (t, f, tf) = r.ablation.toggles();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.ablation.label(),
                t,
                f,
                tf,
                r.parameter_count,
                format_percent(r.result.pooled.war),
                format_percent(r.result.pooled.uar)
            );
        }
        out
    }
}
