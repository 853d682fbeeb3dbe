//! Seed aggregation and the ablation table.

use scommer::config::{Method, RunConfig};
use scommer::experiment::RunResult;
use scommer::metrics::{mean, std_dev};

/// Mean and sample standard deviation of each scalar metric over seeds.
pub struct Summary {
    pub label: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<(&'static str, f64, f64)>,
}

pub fn summarize(results: &[RunResult]) -> Summary {
    let label = results.first().map(|r| r.label.clone()).unwrap_or_default();
    let names: Vec<&'static str> =
        results.first().map(|r| r.scalar_metrics().into_iter().map(|(n, _)| n).collect()).unwrap_or_default();
    let rows = names
        .into_iter()
        .map(|name| {
            let values: Vec<f64> = results
                .iter()
                .filter_map(|r| r.scalar_metrics().into_iter().find(|(n, _)| *n == name).map(|(_, v)| v))
                .collect();
            (name, mean(&values), std_dev(&values))
        })
        .collect();
    Summary { label, seeds: results.iter().map(|r| r.seed).collect(), rows }
}

impl Summary {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("method\tmetric\tmean\tstd\tseeds\tsummary\n");
        for (name, m, sd) in &self.rows {
            s.push_str(&format!("{}\t{name}\t{m:.6}\t{sd:.6}\t{}\t{}\n", self.label, self.seeds.len(), pm(*m, *sd)));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} over seeds {:?}\n", self.label, self.seeds);
        for (name, m, sd) in &self.rows {
            s.push_str(&format!("  {name:<18} {}\n", pm(*m, *sd)));
        }
        s
    }
}

fn pm(m: f64, sd: f64) -> String {
    format!("{m:.4} ± {sd:.4}")
}

/// One configuration of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationRow {
    Full,
    NoDropout,
    NoDropoutNoSparse,
    NoLongTerm,
    Er,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] = [
        AblationRow::Full,
        AblationRow::NoDropout,
        AblationRow::NoDropoutNoSparse,
        AblationRow::NoLongTerm,
        AblationRow::Er,
    ];

    /// (sparse activations, long-term memory, semantic dropout)
    pub fn switches(self) -> (bool, bool, bool) {
        match self {
            AblationRow::Full => (true, true, true),
            AblationRow::NoDropout => (true, true, false),
            AblationRow::NoDropoutNoSparse => (false, true, false),
            AblationRow::NoLongTerm => (true, false, false),
            AblationRow::Er => (false, false, false),
        }
    }

    /// Class-IL accuracy reported for the full-scale setting.
    pub fn reference(self) -> f64 {
        match self {
            AblationRow::Full => 69.19,
            AblationRow::NoDropout => 67.38,
            AblationRow::NoDropoutNoSparse => 61.88,
            AblationRow::NoLongTerm => 49.44,
            AblationRow::Er => 44.79,
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            AblationRow::Full => "full",
            AblationRow::NoDropout => "no-dropout",
            AblationRow::NoDropoutNoSparse => "no-dropout-no-sparse",
            AblationRow::NoLongTerm => "no-ltm",
            AblationRow::Er => "er",
        }
    }

    /// The ER row keeps the base config and only switches the method, so it
    /// matches a direct `--method er` run.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        if self == AblationRow::Er {
            cfg.method.name = Method::Er;
            return cfg;
        }
        let (sparse, ltm, dropout) = self.switches();
        cfg.method.name = Method::Scommer;
        cfg.method.sparse_activations = sparse;
        cfg.method.long_term_memory = ltm;
        cfg.method.semantic_dropout = dropout;
        cfg
    }
}

pub struct Table {
    pub text: String,
    pub tsv: String,
}

pub fn ablation_table(rows: &[(AblationRow, Vec<f64>)]) -> Table {
    const NOTE: &str = "paper, full scale — not a target";
    let mark = |b: bool| if b { "yes" } else { "no" };
    let mut text =
        format!("{:<22} {:<7} {:<5} {:<8} {:<20} {NOTE}\n", "configuration", "sparse", "ltm", "dropout", "class-il");
    let mut tsv = format!("configuration\tsparse\tltm\tdropout\tclass_il_mean\tclass_il_std\tseeds\t{NOTE}\n");
    for (row, values) in rows {
        let (s, l, d) = row.switches();
        let (m, sd) = (mean(values), std_dev(values));
        text.push_str(&format!(
            "{:<22} {:<7} {:<5} {:<8} {:<20} {:.2}\n",
            row.dir_name(),
            mark(s),
            mark(l),
            mark(d),
            pm(m, sd),
            row.reference()
        ));
        tsv.push_str(&format!(
            "{}\t{s}\t{l}\t{d}\t{m:.6}\t{sd:.6}\t{}\t{:.2}\n",
            row.dir_name(),
            values.len(),
            row.reference()
        ));
    }
    Table { text, tsv }
}
