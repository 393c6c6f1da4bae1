//! Reflection-novelty scoring and training-dynamics exports.
//!
//! The echo metric asks how much of the reflection stage merely restates
//! tokens already available to the model: the fraction of reflection
//! n-grams (positional, n = 3 by default) that appear contiguously in the
//! question plus the rollout's own thinking stage. Novelty is its
//! complement. This is a deliberately simple containment proxy for corpus
//! retrieval based creativity indices, which need infrastructure far
//! beyond this laboratory; only the direction of the effect is meaningful.
//!
//! Curve export writes one CSV and one self-contained SVG per run set so
//! entropy and reward trajectories can be compared across algorithms
//! without any plotting dependency. Both outputs are byte-deterministic
//! functions of their inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::policy::PolicyParams;
use crate::rollout::{sample_group, RolloutError, SamplingConfig};
use crate::tasks::TaskInstance;
use crate::trainer::{grade, RunRecord};
use crate::vocab::Vocab;

pub const DEFAULT_NGRAM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EchoScore {
    /// Fraction of reflection n-gram positions found in the reference.
    pub overlap: f64,
    /// 1 − overlap.
    pub novelty: f64,
    pub n: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("n-gram order must be at least 1")]
    ZeroOrder,
    #[error("reflection of {len} tokens is shorter than n-gram order {n}")]
    ReflectionTooShort { len: usize, n: usize },
    #[error("no run logs given")]
    EmptyLogs,
    #[error("run log for {0} is empty")]
    EmptyLog(String),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Positional n-gram containment of `reflection` in `reference`. Each
/// reflection position contributes at most once to the numerator, so a
/// reflection that repeats one echoed n-gram still counts every position.
pub fn echo_overlap(
    reflection: &[u32],
    reference: &[u32],
    n: usize,
) -> Result<EchoScore, MetricsError> {
    if n == 0 {
        return Err(MetricsError::ZeroOrder);
    }
    if reflection.len() < n {
        return Err(MetricsError::ReflectionTooShort {
            len: reflection.len(),
            n,
        });
    }
    let grams = reflection.len() - n + 1;
    let mut hits = 0usize;
    for gram in reflection.windows(n) {
        if reference.windows(n).any(|w| w == gram) {
            hits += 1;
        }
    }
    let overlap = hits as f64 / grams as f64;
    Ok(EchoScore {
        overlap,
        novelty: 1.0 - overlap,
        n,
    })
}

/// Samples groups on `instances` from fixed parameters and scores the echo
/// overlap of every well-formed, correctly answered rollout whose
/// reflection is long enough. The reference is the instance's question
/// concatenated with the rollout's own thinking tokens.
pub fn echo_scores_for_correct_rollouts(
    params: &PolicyParams,
    instances: &[TaskInstance],
    vocab: &Vocab,
    sampling: &SamplingConfig,
    seed: u64,
    n: usize,
) -> Result<Vec<EchoScore>, MetricsError> {
    let mut scores = Vec::new();
    for instance in instances {
        let rollouts = sample_group(params, instance, sampling, vocab, seed, 0)?;
        for rollout in &rollouts {
            let graded = grade(&rollout.response_tokens, instance, vocab);
            let spans = match graded.spans {
                Ok(spans) if graded.correct => spans,
                _ => continue,
            };
            let reflection = &rollout.response_tokens[spans.reflection.clone()];
            if reflection.len() < n {
                continue;
            }
            let mut reference = instance.question_tokens.clone();
            reference.extend_from_slice(&rollout.response_tokens[spans.thinking.clone()]);
            scores.push(echo_overlap(reflection, &reference, n)?);
        }
    }
    Ok(scores)
}

/// Mean |H̄_R − h_star| over the final `fraction` of a run log.
pub fn entropy_gap_last_fraction(log: &[RunRecord], h_star: f64, fraction: f64) -> f64 {
    assert!(!log.is_empty(), "entropy gap of an empty log");
    let count = ((log.len() as f64 * fraction).ceil() as usize).clamp(1, log.len());
    let tail = &log[log.len() - count..];
    tail.iter().map(|r| (r.h_r - h_star).abs()).sum::<f64>() / count as f64
}

/// One algorithm's artifacts for comparison: its run log and the echo
/// scores of its correct rollouts.
#[derive(Debug, Clone)]
pub struct AlgoRun {
    pub name: String,
    pub log: Vec<RunRecord>,
    pub echo: Vec<EchoScore>,
}

impl AlgoRun {
    pub fn new(name: impl Into<String>, log: Vec<RunRecord>) -> Self {
        Self {
            name: name.into(),
            log,
            echo: Vec::new(),
        }
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.log.iter().rev().find_map(|r| r.eval_acc)
    }

    pub fn mean_novelty(&self) -> Option<f64> {
        if self.echo.is_empty() {
            return None;
        }
        Some(self.echo.iter().map(|e| e.novelty).sum::<f64>() / self.echo.len() as f64)
    }
}

/// JSON report keyed by algorithm name with the fixed per-run keys
/// `final_acc`, `entropy_gap` (mean |H̄_R − h_star| over the last 10% of
/// steps), and `mean_novelty`.
pub fn compare_report(runs: &[AlgoRun], h_star: f64) -> Result<serde_json::Value, MetricsError> {
    if runs.is_empty() {
        return Err(MetricsError::EmptyLogs);
    }
    let mut report = serde_json::Map::new();
    for run in runs {
        if run.log.is_empty() {
            return Err(MetricsError::EmptyLog(run.name.clone()));
        }
        report.insert(
            run.name.clone(),
            serde_json::json!({
                "final_acc": run.final_accuracy(),
                "entropy_gap": entropy_gap_last_fraction(&run.log, h_star, 0.1),
                "mean_novelty": run.mean_novelty(),
            }),
        );
    }
    Ok(serde_json::Value::Object(report))
}

/// Writes `curves.csv` and `curves.svg` under `out_dir`: per algorithm a
/// reward column and a reflection-entropy column, one row per step up to
/// the longest log. Returns the two paths.
pub fn export_curves(
    runs: &[AlgoRun],
    out_dir: &Path,
    h_star: Option<f64>,
) -> Result<(PathBuf, PathBuf), MetricsError> {
    if runs.is_empty() {
        return Err(MetricsError::EmptyLogs);
    }
    for run in runs {
        if run.log.is_empty() {
            return Err(MetricsError::EmptyLog(run.name.clone()));
        }
    }
    fs::create_dir_all(out_dir)?;

    let max_steps = runs.iter().map(|r| r.log.len()).max().unwrap_or(0);
    let mut csv = String::from("step");
    for run in runs {
        write!(csv, ",{}_reward,{}_h_r", run.name, run.name).unwrap();
    }
    csv.push('\n');
    for i in 0..max_steps {
        write!(csv, "{i}").unwrap();
        for run in runs {
            match run.log.get(i) {
                Some(r) => write!(csv, ",{},{}", r.mean_reward, r.h_r).unwrap(),
                None => csv.push_str(",,"),
            }
        }
        csv.push('\n');
    }
    let csv_path = out_dir.join("curves.csv");
    fs::write(&csv_path, csv)?;

    let svg_path = out_dir.join("curves.svg");
    fs::write(&svg_path, render_svg(runs, h_star))?;
    Ok((csv_path, svg_path))
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

struct Panel {
    title: &'static str,
    top: f64,
}

/// Two stacked line panels (reward, reflection entropy), no external
/// references, deterministic output.
fn render_svg(runs: &[AlgoRun], h_star: Option<f64>) -> String {
    const W: f64 = 800.0;
    const PANEL_H: f64 = 230.0;
    const LEFT: f64 = 60.0;
    const RIGHT: f64 = 20.0;
    const PAD: f64 = 40.0;
    let height = 2.0 * (PANEL_H + PAD) + 20.0;

    let mut svg = String::new();
    write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{height}\" \
         viewBox=\"0 0 {W} {height}\" font-family=\"monospace\" font-size=\"12\">\n"
    )
    .unwrap();
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    let panels = [
        Panel {
            title: "mean shaped reward",
            top: 20.0,
        },
        Panel {
            title: "reflection entropy (nats)",
            top: PANEL_H + PAD + 20.0,
        },
    ];
    let max_steps = runs.iter().map(|r| r.log.len()).max().unwrap_or(1);
    for (p_idx, panel) in panels.iter().enumerate() {
        let series: Vec<Vec<f64>> = runs
            .iter()
            .map(|run| {
                run.log
                    .iter()
                    .map(|r| if p_idx == 0 { r.mean_reward } else { r.h_r })
                    .collect()
            })
            .collect();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in series.iter().flatten() {
            lo = lo.min(*s);
            hi = hi.max(*s);
        }
        if let (1, Some(h)) = (p_idx, h_star) {
            lo = lo.min(h);
            hi = hi.max(h);
        }
        if hi - lo < 1e-9 {
            lo -= 0.5;
            hi += 0.5;
        }
        let x_of = |i: usize| LEFT + (W - LEFT - RIGHT) * i as f64 / (max_steps - 1).max(1) as f64;
        let y_of = |v: f64| panel.top + PANEL_H * (1.0 - (v - lo) / (hi - lo));

        write!(
            svg,
            "<text x=\"{LEFT}\" y=\"{}\">{}</text>\n",
            panel.top - 6.0,
            panel.title
        )
        .unwrap();
        write!(
            svg,
            "<rect x=\"{LEFT}\" y=\"{}\" width=\"{}\" height=\"{PANEL_H}\" fill=\"none\" stroke=\"#888\"/>\n",
            panel.top,
            W - LEFT - RIGHT
        )
        .unwrap();
        write!(
            svg,
            "<text x=\"4\" y=\"{}\">{hi:.3}</text>\n<text x=\"4\" y=\"{}\">{lo:.3}</text>\n",
            panel.top + 12.0,
            panel.top + PANEL_H
        )
        .unwrap();
        if let (1, Some(h)) = (p_idx, h_star) {
            let y = y_of(h);
            write!(
                svg,
                "<line x1=\"{LEFT}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#aaa\" stroke-dasharray=\"4 3\"/>\n",
                W - RIGHT
            )
            .unwrap();
        }
        for (r_idx, values) in series.iter().enumerate() {
            let color = PALETTE[r_idx % PALETTE.len()];
            let mut points = String::new();
            for (i, v) in values.iter().enumerate() {
                write!(points, "{:.2},{:.2} ", x_of(i), y_of(*v)).unwrap();
            }
            write!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                points.trim_end()
            )
            .unwrap();
            if p_idx == 0 {
                let y = panel.top + 14.0 + 14.0 * r_idx as f64;
                write!(
                    svg,
                    "<text x=\"{:.2}\" y=\"{y}\" fill=\"{color}\">{}</text>\n",
                    W - RIGHT - 80.0,
                    runs[r_idx].name
                )
                .unwrap();
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}
