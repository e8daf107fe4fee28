//! Representation similarity (linear CKA) and the lambda ablation sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dfq_autograd::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::model_zoo::{BnMode, Classifier, NoHook};
use crate::quantization::QuantizedModel;
use crate::training::{self, RunControl, RunSummary};
use crate::{Error, Result};

fn centered(x: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut c = x.to_vec();
    for j in 0..p {
        let mean = (0..n).map(|i| x[i * p + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            c[i * p + j] -= mean;
        }
    }
    c
}

/// `A^T B` for row-major `a: n x p`, `b: n x q`.
fn cross(a: &[f64], b: &[f64], n: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for i in 0..n {
        let (ra, rb) = (&a[i * p..(i + 1) * p], &b[i * q..(i + 1) * q]);
        for (j, &va) in ra.iter().enumerate() {
            if va == 0.0 {
                continue;
            }
            let row = &mut out[j * q..(j + 1) * q];
            for (o, &vb) in row.iter_mut().zip(rb) {
                *o += va * vb;
            }
        }
    }
    out
}

fn frob_sq(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Linear CKA between activations `x: [N, p]` and `y: [N, q]` (rows are samples).
pub fn linear_cka(x: &[f64], y: &[f64], n: usize) -> Result<f64> {
    if n < 2 || x.len() % n != 0 || y.len() % n != 0 || x.is_empty() || y.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "CKA needs N >= 2 rows; got {} and {} values for N = {n}",
            x.len(),
            y.len()
        )));
    }
    let (p, q) = (x.len() / n, y.len() / n);
    let xc = centered(x, n, p);
    let yc = centered(y, n, q);
    if xc.iter().all(|v| *v == 0.0) || yc.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateActivations);
    }
    let yx = frob_sq(&cross(&yc, &xc, n, q, p));
    let xx = frob_sq(&cross(&xc, &xc, n, p, p)).sqrt();
    let yy = frob_sq(&cross(&yc, &yc, n, q, q)).sqrt();
    Ok((yx / (xx * yy)).clamp(0.0, 1.0))
}

/// Convenience wrapper over rank-2 tensors.
pub fn linear_cka_tensors(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 || x.dim(0) != y.dim(0) {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let to64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    linear_cka(&to64(x), &to64(y), x.dim(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    /// `values[t][s]` compares teacher layer `t` with student layer `s`.
    pub values: Vec<Vec<f64>>,
    pub teacher_layers: Vec<String>,
    pub student_layers: Vec<String>,
    pub probe: String,
}

/// Channel-wise spatial mean of a `[N, C, H, W]` activation; rank-2 inputs pass through.
fn pooled(tape: &mut Tape, v: Var) -> Tensor {
    if tape.value(v).rank() == 4 {
        let p = tape.global_avg_pool(v);
        tape.value(p).clone()
    } else {
        tape.value(v).clone()
    }
}

fn teacher_features(model: &mut Classifier, probe: &Tensor) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let pv = model.params.attach(&mut tape, false);
    let x = tape.constant(probe.clone());
    let out = model.forward(&mut tape, &pv, x, BnMode::Running, &mut NoHook);
    out.features.iter().map(|&f| pooled(&mut tape, f)).collect()
}

fn student_features(model: &mut QuantizedModel, probe: &Tensor) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let pv = model.model.params.attach(&mut tape, false);
    let x = tape.constant(probe.clone());
    let out = model.forward(&mut tape, &pv, x, BnMode::Running, false);
    out.features.iter().map(|&f| pooled(&mut tape, f)).collect()
}

/// CKA between every probed teacher layer and every probed student layer on one
/// normalized probe batch. Activation ranges of the student stay frozen.
pub fn cka_heatmap(
    teacher: &mut Classifier,
    student: &mut QuantizedModel,
    probe: &Tensor,
    probe_name: &str,
) -> Result<CkaMatrix> {
    if probe.rank() != 4 || probe.dim(0) < 2 {
        return Err(Error::ShapeMismatch(format!("probe batch {:?}", probe.shape())));
    }
    let tf = teacher_features(teacher, probe);
    let sf = student_features(student, probe);
    let mut values = Vec::with_capacity(tf.len());
    for t in &tf {
        values.push(sf.iter().map(|s| linear_cka_tensors(t, s)).collect::<Result<Vec<_>>>()?);
    }
    Ok(CkaMatrix {
        values,
        teacher_layers: teacher.feature_names(),
        student_layers: student.model.feature_names(),
        probe: probe_name.to_string(),
    })
}

impl CkaMatrix {
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.values.len().min(self.student_layers.len()))
            .map(|i| self.values[i][i])
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("teacher\\student");
        for name in &self.student_layers {
            let _ = write!(s, ",{name}");
        }
        s.push('\n');
        for (name, row) in self.teacher_layers.iter().zip(&self.values) {
            s.push_str(name);
            for v in row {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_svg(&self) -> String {
        let cell = 36.0;
        let margin = 110.0;
        let (rows, cols) = (self.values.len(), self.student_layers.len());
        let w = margin + cols as f64 * cell + 20.0;
        let h = margin + rows as f64 * cell + 20.0;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"10\">\n"
        );
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let shade = (255.0 * (1.0 - v)).round() as u8;
                let _ = writeln!(
                    s,
                    "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\"><title>{v:.4}</title></rect>",
                    margin + j as f64 * cell,
                    margin + i as f64 * cell
                );
            }
            let _ = writeln!(
                s,
                "<text x=\"4\" y=\"{}\">{}</text>",
                margin + (i as f64 + 0.6) * cell,
                self.teacher_layers[i]
            );
        }
        for (j, name) in self.student_layers.iter().enumerate() {
            let x = margin + (j as f64 + 0.6) * cell;
            let _ = writeln!(
                s,
                "<text x=\"{x}\" y=\"{}\" transform=\"rotate(-60 {x} {})\">{name}</text>",
                margin - 6.0,
                margin - 6.0
            );
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (file, text) in [("cka.csv", self.to_csv()), ("cka.svg", self.to_svg())] {
            let p = dir.join(file);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f32,
    pub seed: u64,
    pub final_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub lambda: f32,
    pub mean_acc: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std_acc: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummaryRow>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Name of the run directory used for one sweep cell.
pub fn sweep_run_name(lambda: f32, seed: u64) -> String {
    format!("lambda_{lambda}_seed_{seed}")
}

fn cached_summary(dir: &Path, cfg: &RunConfig) -> Option<RunSummary> {
    let stored = fs::read_to_string(dir.join(training::CONFIG_FILE)).ok()?;
    if stored != cfg.to_toml() {
        return None;
    }
    let text = fs::read_to_string(dir.join(training::SUMMARY_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Runs the full fine-tuning pipeline for every `(lambda, seed)` under `out_dir` and
/// writes `sweep.csv`, `sweep_summary.csv` and `sweep.svg`.
///
/// A cell whose directory already holds a finished run with the identical effective
/// config is read back instead of recomputed.
pub fn lambda_sweep(template: &RunConfig, lambdas: &[f32], seeds: &[u64], out_dir: &Path) -> Result<SweepTable> {
    if !lambdas.contains(&0.0) {
        return Err(Error::validation("sweep.lambdas", "must include 0 as the baseline"));
    }
    if seeds.is_empty() {
        return Err(Error::validation("sweep.seeds", "must not be empty"));
    }
    let runs_root: PathBuf = out_dir.join("runs");
    let mut rows = Vec::new();
    for &lambda in lambdas {
        for &seed in seeds {
            let mut cfg = template.clone();
            cfg.causal.lambda = lambda;
            cfg.seed = seed;
            cfg.out_root = runs_root.clone();
            cfg.run_name = sweep_run_name(lambda, seed);
            let dir = cfg.run_dir(None);
            let summary = match cached_summary(&dir, &cfg) {
                Some(s) => s,
                None => training::run(&cfg, &dir, &RunControl::default())?,
            };
            log::info!("sweep lambda {lambda} seed {seed}: final acc {:.4}", summary.final_acc);
            rows.push(SweepRow {
                lambda,
                seed,
                final_acc: summary.final_acc,
            });
        }
    }
    let summary = lambdas
        .iter()
        .map(|&lambda| {
            let accs: Vec<f64> = rows.iter().filter(|r| r.lambda == lambda).map(|r| r.final_acc).collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            SweepSummaryRow {
                lambda,
                mean_acc,
                std_acc,
                runs: accs.len(),
            }
        })
        .collect();
    let table = SweepTable { rows, summary };
    table.save(out_dir)?;
    Ok(table)
}

impl SweepTable {
    pub fn rows_csv(&self) -> String {
        let mut s = String::from("lambda,seed,final_acc\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6}", r.lambda, r.seed, r.final_acc);
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("lambda,mean_acc,std_acc,runs\n");
        for r in &self.summary {
            let _ = writeln!(s, "{},{:.6},{:.6},{}", r.lambda, r.mean_acc, r.std_acc, r.runs);
        }
        s
    }

    /// Mean accuracy per lambda with one-std error bars; lambdas are evenly spaced in given order.
    pub fn to_svg(&self) -> String {
        let (w, h, m) = (480.0, 320.0, 50.0);
        let lo = self
            .summary
            .iter()
            .map(|r| r.mean_acc - r.std_acc)
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .summary
            .iter()
            .map(|r| r.mean_acc + r.std_acc)
            .fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if hi - lo < 1e-6 { (lo - 0.01, hi + 0.01) } else { (lo, hi) };
        let n = self.summary.len().max(2) as f64;
        let px = |i: usize| m + i as f64 * (w - 2.0 * m) / (n - 1.0);
        let py = |v: f64| h - m - (v - lo) / (hi - lo) * (h - 2.0 * m);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
             <line x1=\"{m}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n\
             <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{0}\" stroke=\"black\"/>\n\
             <text x=\"{2}\" y=\"{3}\">lambda</text>\n\
             <text x=\"4\" y=\"{4}\">{hi:.3}</text>\n<text x=\"4\" y=\"{0}\">{lo:.3}</text>\n",
            h - m,
            w - m,
            w / 2.0,
            h - 10.0,
            m + 4.0
        );
        let mut path = String::new();
        for (i, r) in self.summary.iter().enumerate() {
            let (x, y) = (px(i), py(r.mean_acc));
            let _ = write!(path, "{}{x:.1},{y:.1} ", if i == 0 { "M" } else { "L" });
            let _ = writeln!(
                s,
                "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"gray\"/>\n\
                 <circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3\" fill=\"steelblue\"><title>{:.4}</title></circle>\n\
                 <text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
                py(r.mean_acc - r.std_acc),
                py(r.mean_acc + r.std_acc),
                r.mean_acc,
                x - 8.0,
                h - m + 16.0,
                r.lambda
            );
        }
        let _ = writeln!(s, "<path d=\"{}\" fill=\"none\" stroke=\"steelblue\"/>", path.trim_end());
        s.push_str("</svg>\n");
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (file, text) in [
            ("sweep.csv", self.rows_csv()),
            ("sweep_summary.csv", self.summary_csv()),
            ("sweep.svg", self.to_svg()),
        ] {
            let p = dir.join(file);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
