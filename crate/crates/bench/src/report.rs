use std::fmt::Write as _;

use crate::config::Output;

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Summary {
    pub mean: f64,
    pub stddev: f64,
}

impl Summary {
    pub fn of(samples: &[f64]) -> Summary {
        let n = samples.len() as f64;
        if samples.is_empty() {
            return Summary::default();
        }
        let mean = samples.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Summary {
            mean,
            stddev: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub benchmark: String,
    pub mode: String,
    pub resource_mode: String,
    /// Resource name for the resource benchmark, empty otherwise.
    pub resource: String,
    pub threads: usize,
    pub size: usize,
    pub reps: usize,
    /// Operations or messages per second.
    pub rate: Summary,
    /// Bytes per second; zero where it does not apply.
    pub bandwidth: Summary,
}

pub const CSV_HEADER: &str =
    "benchmark,mode,resource_mode,resource,threads,size,reps,rate_mean,rate_stddev,bandwidth_mean,bandwidth_stddev";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<Row>,
}

impl Report {
    pub fn render(&self, output: Output) -> String {
        match output {
            Output::Csv => self.csv(),
            Output::Table => self.table(),
        }
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{:.3},{:.3},{:.3},{:.3}",
                r.benchmark,
                r.mode,
                r.resource_mode,
                r.resource,
                r.threads,
                r.size,
                r.reps,
                r.rate.mean,
                r.rate.stddev,
                r.bandwidth.mean,
                r.bandwidth.stddev
            )
            .unwrap();
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<10} {:<8} {:<10} {:<9} {:>7} {:>9} {:>16} {:>12} {:>14} {:>12}\n",
            "bench",
            "mode",
            "resources",
            "resource",
            "threads",
            "size",
            "rate/s",
            "stddev",
            "MB/s",
            "stddev"
        );
        for r in &self.rows {
            writeln!(
                s,
                "{:<10} {:<8} {:<10} {:<9} {:>7} {:>9} {:>16.1} {:>12.1} {:>14.2} {:>12.2}",
                r.benchmark,
                r.mode,
                r.resource_mode,
                if r.resource.is_empty() {
                    "-"
                } else {
                    &r.resource
                },
                r.threads,
                r.size,
                r.rate.mean,
                r.rate.stddev,
                r.bandwidth.mean / 1e6,
                r.bandwidth.stddev / 1e6
            )
            .unwrap();
        }
        s
    }
}
