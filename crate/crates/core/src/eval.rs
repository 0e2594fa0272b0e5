//! Evaluation and reporting: accuracy measurement through the deployment
//! forward pass, seed-aggregated comparison tables, per-block attention
//! maps, and 2-D embedding exports through an external reducer.

use crate::backbone::Backbone;
use crate::data::{eval_batch, ChannelStats, Dataset};
use crate::error::{LfmaError, Result};
use crate::losses::predictions;
use crate::nn::Scalar;
use ndarray::{Array2, Array4};
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Top-1 accuracy through [`Backbone::inference_forward`] — the stripped
/// deployment path, no heads, no augmentation, running statistics.
pub fn evaluate<F: Scalar>(
    backbone: &Backbone<F>,
    ds: &Dataset,
    stats: &ChannelStats,
    batch_size: usize,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(LfmaError::Argument(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let idxs: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for chunk in idxs.chunks(batch_size.max(1)) {
        let (x, labels) = eval_batch::<F>(ds, stats, chunk)?;
        let probs = backbone.inference_forward(&x)?;
        correct += predictions(&probs.view())
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

// ---------------------------------------------------------------------------
// Comparison tables
// ---------------------------------------------------------------------------

/// One measured cell: a (mode, arch, dataset, seed) run and its accuracy.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ComparisonEntry {
    pub mode: String,
    pub arch: String,
    pub dataset: String,
    pub seed: u64,
    pub accuracy: f64,
}

/// Accuracy results grouped by (mode, arch, dataset) across seeds.
#[derive(Clone, Debug, Default)]
pub struct ComparisonTable {
    entries: Vec<ComparisonEntry>,
}

struct GroupRow {
    mode: String,
    arch: String,
    dataset: String,
    accs: Vec<(u64, f64)>,
}

impl ComparisonTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, entry: ComparisonEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[ComparisonEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Groups in a deterministic order independent of insertion order:
    /// by architecture, then dataset, then mode, with seeds ascending.
    fn grouped(&self) -> Vec<GroupRow> {
        let mut sorted = self.entries.clone();
        sorted.sort_by(|a, b| {
            (&a.arch, &a.dataset, &a.mode, a.seed).cmp(&(&b.arch, &b.dataset, &b.mode, b.seed))
        });
        let mut rows: Vec<GroupRow> = Vec::new();
        for e in sorted {
            match rows.last_mut() {
                Some(r) if r.mode == e.mode && r.arch == e.arch && r.dataset == e.dataset => {
                    r.accs.push((e.seed, e.accuracy));
                }
                _ => rows.push(GroupRow {
                    mode: e.mode,
                    arch: e.arch,
                    dataset: e.dataset,
                    accs: vec![(e.seed, e.accuracy)],
                }),
            }
        }
        rows
    }

    /// Fixed-width text table; accuracy as a two-decimal percentage, with a
    /// sample standard deviation only when at least two seeds contribute.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:<10} {:<12} {:>5}  {}\n",
            "mode", "arch", "dataset", "seeds", "accuracy"
        ));
        for row in self.grouped() {
            let (mean, std) = mean_std(&row.accs);
            let acc = match std {
                Some(s) => format!("{:.2}% \u{b1} {:.2}", 100.0 * mean, 100.0 * s),
                None => format!("{:.2}%", 100.0 * mean),
            };
            out.push_str(&format!(
                "{:<10} {:<10} {:<12} {:>5}  {}\n",
                row.mode,
                row.arch,
                row.dataset,
                row.accs.len(),
                acc
            ));
        }
        out
    }

    /// Long-format CSV, one row per (mode, arch, dataset, seed).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,arch,dataset,seed,accuracy\n");
        for row in self.grouped() {
            for (seed, acc) in &row.accs {
                out.push_str(&format!(
                    "{},{},{},{seed},{acc}\n",
                    row.mode, row.arch, row.dataset
                ));
            }
        }
        out
    }

    /// Write both renderings into `dir` as comparison.txt / comparison.csv.
    pub fn write_files(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| LfmaError::io(dir, e))?;
        let txt = dir.join("comparison.txt");
        let csv = dir.join("comparison.csv");
        std::fs::write(&txt, self.render_text()).map_err(|e| LfmaError::io(&txt, e))?;
        std::fs::write(&csv, self.to_csv()).map_err(|e| LfmaError::io(&csv, e))?;
        Ok((txt, csv))
    }
}

fn mean_std(accs: &[(u64, f64)]) -> (f64, Option<f64>) {
    let n = accs.len() as f64;
    let mean = accs.iter().map(|&(_, a)| a).sum::<f64>() / n;
    if accs.len() < 2 {
        return (mean, None);
    }
    let var = accs
        .iter()
        .map(|&(_, a)| (a - mean) * (a - mean))
        .sum::<f64>()
        / (n - 1.0);
    (mean, Some(var.sqrt()))
}

// ---------------------------------------------------------------------------
// Attention maps
// ---------------------------------------------------------------------------

/// Channel-mean absolute activation of one sample, min-max normalized to
/// `[0, 1]`. A constant map (max == min) normalizes to all zeros.
pub fn attention_map_from_features<F: Scalar>(
    features: &Array4<F>,
    sample: usize,
) -> Result<Array2<f64>> {
    let (n, c, h, w) = features.dim();
    if sample >= n {
        return Err(LfmaError::Argument(format!(
            "sample {sample} out of range for a batch of {n}"
        )));
    }
    let mut map = Array2::<f64>::zeros((h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                map[(y, x)] += features[(sample, ch, y, x)].to_f64().unwrap().abs();
            }
        }
    }
    map /= c as f64;
    let min = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        map.mapv_inplace(|v| (v - min) / (max - min));
    } else {
        map.fill(0.0);
    }
    Ok(map)
}

/// Attention maps for every sample and block: `maps[sample][block]`.
pub fn attention_maps<F: Scalar>(
    backbone: &Backbone<F>,
    batch: &Array4<F>,
) -> Result<Vec<Vec<Array2<f64>>>> {
    let rec = backbone.forward_taps_eval(batch)?;
    let n = batch.dim().0;
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let mut per_block = Vec::with_capacity(rec.features.len());
        for f in &rec.features {
            per_block.push(attention_map_from_features(f, s)?);
        }
        out.push(per_block);
    }
    Ok(out)
}

/// Render attention maps as grayscale PNGs plus raw CSV value grids.
/// Returns the paths written, two per (sample, block).
pub fn export_attention_maps<F: Scalar>(
    backbone: &Backbone<F>,
    batch: &Array4<F>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let maps = attention_maps(backbone, batch)?;
    std::fs::create_dir_all(out_dir).map_err(|e| LfmaError::io(out_dir, e))?;
    let mut written = Vec::new();
    for (s, per_block) in maps.iter().enumerate() {
        for (k, map) in per_block.iter().enumerate() {
            let (h, w) = map.dim();
            let mut img = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let v = (map[(y, x)] * 255.0).round().clamp(0.0, 255.0) as u8;
                    img.put_pixel(x as u32, y as u32, image::Luma([v]));
                }
            }
            let png = out_dir.join(format!("attention_s{s}_block{k}.png"));
            img.save(&png)
                .map_err(|e| LfmaError::io(&png, std::io::Error::other(e.to_string())))?;
            let csv = out_dir.join(format!("attention_s{s}_block{k}.csv"));
            let mut text = String::new();
            for y in 0..h {
                let row: Vec<String> = (0..w).map(|x| format!("{}", map[(y, x)])).collect();
                text.push_str(&row.join(","));
                text.push('\n');
            }
            std::fs::write(&csv, text).map_err(|e| LfmaError::io(&csv, e))?;
            written.push(png);
            written.push(csv);
        }
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// Embedding export through an external 2-D reducer
// ---------------------------------------------------------------------------

/// What happened to an embedding export.
#[derive(Debug)]
pub enum EmbeddingOutcome {
    /// Coordinates were written; `rows` counts data rows across all blocks.
    Written { path: PathBuf, rows: usize },
    /// The reducer could not be run; nothing was written.
    Skipped { reason: String },
}

/// Globally average-pooled features per block: one `(n, channels)` matrix
/// per block, in block order.
pub fn pooled_block_features<F: Scalar>(
    backbone: &Backbone<F>,
    batch: &Array4<F>,
) -> Result<Vec<Array2<f64>>> {
    let rec = backbone.forward_taps_eval(batch)?;
    Ok(rec
        .features
        .iter()
        .map(|f| {
            let (n, c, h, w) = f.dim();
            let mut pooled = Array2::<f64>::zeros((n, c));
            for s in 0..n {
                for ch in 0..c {
                    let mut sum = 0.0;
                    for y in 0..h {
                        for x in 0..w {
                            sum += f[(s, ch, y, x)].to_f64().unwrap();
                        }
                    }
                    pooled[(s, ch)] = sum / (h * w) as f64;
                }
            }
            pooled
        })
        .collect())
}

enum ReducerRun {
    Coords(Vec<(f64, f64)>),
    Unavailable(String),
}

/// Feed one CSV row per sample to the reducer's stdin; expect one `x,y`
/// line per sample on stdout.
fn run_reducer(command: &str, features: &Array2<f64>) -> Result<ReducerRun> {
    let parts: Vec<&str> = command.split_whitespace().collect();
    let Some((program, args)) = parts.split_first() else {
        return Ok(ReducerRun::Unavailable("empty reducer command".into()));
    };
    let mut input = String::new();
    for row in features.rows() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        input.push_str(&fields.join(","));
        input.push('\n');
    }
    let mut child = match std::process::Command::new(program)
        .args(args)
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
    {
        Ok(c) => c,
        Err(e) => {
            return Ok(ReducerRun::Unavailable(format!(
                "could not start '{program}': {e}"
            )))
        }
    };
    child
        .stdin
        .take()
        .expect("piped stdin")
        .write_all(input.as_bytes())
        .map_err(|e| LfmaError::Argument(format!("writing to reducer: {e}")))?;
    let output = child
        .wait_with_output()
        .map_err(|e| LfmaError::Argument(format!("waiting for reducer: {e}")))?;
    if !output.status.success() {
        return Ok(ReducerRun::Unavailable(format!(
            "reducer exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    let mut coords = Vec::new();
    for line in stdout.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let mut it = line.split(',');
        let (Some(xs), Some(ys)) = (it.next(), it.next()) else {
            return Err(LfmaError::Argument(format!(
                "reducer produced a malformed line: '{line}'"
            )));
        };
        let x: f64 = xs.trim().parse().map_err(|_| {
            LfmaError::Argument(format!("reducer produced a non-numeric value: '{line}'"))
        })?;
        let y: f64 = ys.trim().parse().map_err(|_| {
            LfmaError::Argument(format!("reducer produced a non-numeric value: '{line}'"))
        })?;
        coords.push((x, y));
    }
    if coords.len() != features.nrows() {
        return Err(LfmaError::Argument(format!(
            "reducer returned {} coordinate rows for {} samples",
            coords.len(),
            features.nrows()
        )));
    }
    Ok(ReducerRun::Coords(coords))
}

/// Reduce each block's pooled features to 2-D and write a single CSV with
/// `block,x,y,label` rows. An unavailable reducer is a graceful skip, not
/// an error.
pub fn export_embeddings<F: Scalar>(
    backbone: &Backbone<F>,
    batch: &Array4<F>,
    labels: &[usize],
    reducer_command: &str,
    out_path: &Path,
) -> Result<EmbeddingOutcome> {
    if batch.dim().0 != labels.len() {
        return Err(LfmaError::Argument(format!(
            "{} images with {} labels",
            batch.dim().0,
            labels.len()
        )));
    }
    let pooled = pooled_block_features(backbone, batch)?;
    let mut rows = String::from("block,x,y,label\n");
    let mut count = 0usize;
    for (block, features) in pooled.iter().enumerate() {
        match run_reducer(reducer_command, features)? {
            ReducerRun::Unavailable(reason) => {
                return Ok(EmbeddingOutcome::Skipped { reason });
            }
            ReducerRun::Coords(coords) => {
                for (i, (x, y)) in coords.iter().enumerate() {
                    rows.push_str(&format!("{block},{x},{y},{}\n", labels[i]));
                    count += 1;
                }
            }
        }
    }
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| LfmaError::io(parent, e))?;
    }
    std::fs::write(out_path, rows).map_err(|e| LfmaError::io(out_path, e))?;
    Ok(EmbeddingOutcome::Written {
        path: out_path.to_path_buf(),
        rows: count,
    })
}
