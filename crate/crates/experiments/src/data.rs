//! Synthetic datasets and their on-disk form.
//!
//! A dataset is a CSV file plus a JSON sidecar sharing one path prefix.
//! Labeled sets store `label,x0,..` rows; traffic sets store one row of node
//! speeds per time step, with the true graph in the sidecar. Generation is
//! deterministic in the seed and the parameters.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sparsegrad::models::metrics::geodesic_distances;
use sparsegrad::Tensor64;

use crate::config::{ClassifyParams, TrafficParams, WiringDataParams};
use crate::error::{ExperimentError, Result};

/// Independent streams of the run generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Batches = 3,
}

/// ChaCha8 keyed by `seed`, on the given stream.
pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Chronological train / eval / test fractions.
pub const SPLIT: [f64; 3] = [0.70, 0.15, 0.15];

/// Consecutive index ranges for the split of `n` items.
pub fn split_ranges(n: usize) -> [std::ops::Range<usize>; 3] {
    let train = (n as f64 * SPLIT[0]).round() as usize;
    let eval = (n as f64 * SPLIT[1]).round() as usize;
    [0..train, train..(train + eval).min(n), (train + eval).min(n)..n]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Classify,
    Wiring,
    TrafficGraph,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSplit {
    /// `[samples, features]`.
    pub x: Tensor64,
    pub labels: Vec<usize>,
}

impl LabeledSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `indices` as a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor64, Vec<usize>) {
        let d = self.x.cols();
        let data = indices.iter().flat_map(|&i| self.x.data()[i * d..(i + 1) * d].iter().copied()).collect();
        let x = Tensor64::new(vec![indices.len(), d], data).expect("rows of a finite tensor");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

/// One weighted edge of the teacher network; sources below `features` are inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherEdge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub kind: DatasetKind,
    pub features: usize,
    pub classes: usize,
    pub train: LabeledSplit,
    pub eval: LabeledSplit,
    pub test: LabeledSplit,
    pub teacher: Vec<TeacherEdge>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficData {
    /// `[steps, nodes]` strictly positive speeds.
    pub series: Tensor64,
    /// Symmetric 0/1 matrix with self-loops.
    pub adjacency: Tensor64,
    pub geodesic: Vec<Vec<usize>>,
}

impl TrafficData {
    pub fn nodes(&self) -> usize {
        self.series.cols()
    }

    pub fn steps(&self) -> usize {
        self.series.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Labeled(LabeledData),
    Traffic(TrafficData),
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn labeled(
    kind: DatasetKind,
    features: usize,
    classes: usize,
    x: Vec<f64>,
    labels: Vec<usize>,
    teacher: Vec<TeacherEdge>,
) -> Result<LabeledData> {
    let n = labels.len();
    let all = LabeledSplit { x: Tensor64::new(vec![n, features], x)?, labels };
    let [train, eval, test] = split_ranges(n).map(|r| {
        let (x, labels) = all.batch(&r.collect::<Vec<_>>());
        LabeledSplit { x, labels }
    });
    Ok(LabeledData { kind, features, classes, train, eval, test, teacher })
}

/// Two classes from a nonlinear score of the first four features; the rest
/// are noise.
pub fn generate_classify(params: &ClassifyParams, seed: u64) -> Result<LabeledData> {
    if params.features < 4 || params.samples < 20 || !(params.noise >= 0.0) {
        return Err(ExperimentError::Config(format!("classify needs >= 4 features and >= 20 samples, got {params:?}")));
    }
    let mut rng = rng_for(seed, Stream::Data);
    let mut x = Vec::with_capacity(params.samples * params.features);
    let mut labels = Vec::with_capacity(params.samples);
    for _ in 0..params.samples {
        let row: Vec<f64> = (0..params.features).map(|_| normal(&mut rng)).collect();
        let score =
            row[0] * row[1] + (2.0 * row[2]).sin() + 0.5 * (row[3] * row[3] - 1.0) + params.noise * normal(&mut rng);
        labels.push(usize::from(score > 0.0));
        x.extend(row);
    }
    labeled(DatasetKind::Classify, params.features, 2, x, labels, Vec::new())
}

/// Labels are the argmax over the last `classes` nodes of a random sparse
/// tanh network over the inputs.
pub fn generate_wiring(params: &WiringDataParams, seed: u64) -> Result<LabeledData> {
    let WiringDataParams { samples, features, teacher_nodes, fan_in, classes } = *params;
    if features == 0 || classes < 2 || teacher_nodes < classes || fan_in == 0 || fan_in > features || samples < 20 {
        return Err(ExperimentError::Config(format!("invalid wiring data parameters {params:?}")));
    }
    let mut rng = rng_for(seed, Stream::Data);
    let mut teacher = Vec::new();
    for k in 0..teacher_nodes {
        let to = features + k;
        let mut sources = sample(&mut rng, to, fan_in).into_vec();
        sources.sort_unstable();
        for from in sources {
            let weight = 1.5 * normal(&mut rng) / (fan_in as f64).sqrt();
            teacher.push(TeacherEdge { from, to, weight });
        }
    }
    let mut x = Vec::with_capacity(samples * features);
    let mut labels = Vec::with_capacity(samples);
    let mut values = vec![0.0; features + teacher_nodes];
    for _ in 0..samples {
        for v in values.iter_mut().take(features) {
            *v = normal(&mut rng);
        }
        for k in 0..teacher_nodes {
            let to = features + k;
            let sum: f64 = teacher.iter().filter(|e| e.to == to).map(|e| e.weight * values[e.from]).sum();
            values[to] = sum.tanh();
        }
        let outputs = &values[features + teacher_nodes - classes..];
        let label = (0..classes).fold(0, |best, c| if outputs[c] > outputs[best] { c } else { best });
        labels.push(label);
        x.extend_from_slice(&values[..features]);
    }
    labeled(DatasetKind::Wiring, features, classes, x, labels, teacher)
}

fn connected(adjacency: &Tensor64) -> Result<bool> {
    Ok(geodesic_distances(adjacency)?[0].iter().all(|&d| d != usize::MAX))
}

/// Random geometric graph on the unit square, connected, with self-loops.
fn geometric_graph(nodes: usize, rng: &mut impl Rng) -> Result<Tensor64> {
    let mut radius = (2.0 * (nodes as f64).ln().max(1.0) / (std::f64::consts::PI * nodes as f64)).sqrt();
    loop {
        for _ in 0..20 {
            let pts: Vec<(f64, f64)> = (0..nodes).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
            let mut a = Tensor64::zeros(&[nodes, nodes]);
            for i in 0..nodes {
                for j in 0..nodes {
                    let (dx, dy) = (pts[i].0 - pts[j].0, pts[i].1 - pts[j].1);
                    if i == j || dx * dx + dy * dy <= radius * radius {
                        a.set2(i, j, 1.0);
                    }
                }
            }
            if connected(&a)? {
                return Ok(a);
            }
        }
        radius *= 1.1;
    }
}

/// Lowest speed after the positivity shift.
pub const MIN_SPEED: f64 = 5.0;

/// Deviations from per-node mean speeds diffuse over the graph:
/// `d' = persistence * (rho * P d + (1 - rho) * d) + noise * e` with `P` the
/// row-normalized adjacency. Speeds are shifted so that the minimum is at
/// least [`MIN_SPEED`].
pub fn generate_traffic(params: &TrafficParams, seed: u64) -> Result<TrafficData> {
    let TrafficParams { nodes, steps, rho, persistence, noise } = *params;
    if nodes < 2 || steps < 20 || !(0.0..=1.0).contains(&rho) || !(0.0..1.0).contains(&persistence) || !(noise > 0.0) {
        return Err(ExperimentError::Config(format!("invalid traffic parameters {params:?}")));
    }
    let mut rng = rng_for(seed, Stream::Data);
    let adjacency = geometric_graph(nodes, &mut rng)?;
    let degree = adjacency.row_sums();
    let means: Vec<f64> = (0..nodes).map(|_| rng.random_range(40.0..60.0)).collect();
    let mut dev = vec![0.0; nodes];
    let burn_in = 200;
    let mut series = Vec::with_capacity(steps * nodes);
    for t in 0..burn_in + steps {
        let next: Vec<f64> = (0..nodes)
            .map(|i| {
                let avg: f64 =
                    (0..nodes).filter(|&j| adjacency.at2(i, j) != 0.0).map(|j| dev[j]).sum::<f64>() / degree[i];
                persistence * (rho * avg + (1.0 - rho) * dev[i])
            })
            .collect();
        dev = next.into_iter().map(|v| v + noise * normal(&mut rng)).collect();
        if t >= burn_in {
            series.extend(dev.iter().zip(&means).map(|(d, m)| m + d));
        }
    }
    let low = series.iter().copied().fold(f64::INFINITY, f64::min);
    if low < MIN_SPEED {
        series.iter_mut().for_each(|v| *v += MIN_SPEED - low);
    }
    let geodesic = geodesic_distances(&adjacency)?;
    Ok(TrafficData { series: Tensor64::new(vec![steps, nodes], series)?, adjacency, geodesic })
}

/// Generate the dataset described by `config`.
pub fn generate(config: &crate::config::GenDataConfig) -> Result<Dataset> {
    Ok(match config.kind {
        DatasetKind::Classify => Dataset::Labeled(generate_classify(&config.classify, config.seed)?),
        DatasetKind::Wiring => Dataset::Labeled(generate_wiring(&config.wiring, config.seed)?),
        DatasetKind::TrafficGraph => Dataset::Traffic(generate_traffic(&config.traffic, config.seed)?),
    })
}

/// Sidecar written next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Sidecar {
    pub kind: DatasetKind,
    pub seed: u64,
    pub params: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub teacher: Vec<TeacherEdge>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adjacency: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub geodesic: Vec<Vec<usize>>,
}

pub fn csv_path(prefix: &Path) -> PathBuf {
    prefix.with_extension("csv")
}

pub fn sidecar_path(prefix: &Path) -> PathBuf {
    prefix.with_extension("json")
}

fn rows_of(t: &Tensor64) -> Vec<Vec<f64>> {
    t.data().chunks(t.cols()).map(<[f64]>::to_vec).collect()
}

/// Write `<prefix>.csv` and `<prefix>.json`.
pub fn write_dataset(prefix: &Path, dataset: &Dataset, seed: u64, params: serde_json::Value) -> Result<()> {
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    }
    let csv = csv_path(prefix);
    let mut w = csv::Writer::from_path(&csv)?;
    let sidecar = match dataset {
        Dataset::Labeled(d) => {
            let mut header = vec!["label".to_string()];
            header.extend((0..d.features).map(|i| format!("x{i}")));
            w.write_record(&header)?;
            for split in [&d.train, &d.eval, &d.test] {
                for (row, label) in split.x.data().chunks(d.features).zip(&split.labels) {
                    let mut rec = vec![label.to_string()];
                    rec.extend(row.iter().map(f64::to_string));
                    w.write_record(&rec)?;
                }
            }
            Sidecar {
                kind: d.kind,
                seed,
                params,
                classes: Some(d.classes),
                teacher: d.teacher.clone(),
                adjacency: Vec::new(),
                geodesic: Vec::new(),
            }
        }
        Dataset::Traffic(d) => {
            let mut header = vec!["t".to_string()];
            header.extend((0..d.nodes()).map(|i| format!("node{i}")));
            w.write_record(&header)?;
            for (t, row) in rows_of(&d.series).into_iter().enumerate() {
                let mut rec = vec![t.to_string()];
                rec.extend(row.iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
            Sidecar {
                kind: DatasetKind::TrafficGraph,
                seed,
                params,
                classes: None,
                teacher: Vec::new(),
                adjacency: rows_of(&d.adjacency),
                geodesic: d.geodesic.clone(),
            }
        }
    };
    w.flush().map_err(|e| ExperimentError::io(&csv, e))?;
    let json = sidecar_path(prefix);
    fs::write(&json, serde_json::to_string_pretty(&sidecar)? + "\n").map_err(|e| ExperimentError::io(&json, e))?;
    Ok(())
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| ExperimentError::Config(format!("`{s}` is not a number")))
}

/// Read a dataset written by [`write_dataset`].
pub fn read_dataset(prefix: &Path) -> Result<(Dataset, Sidecar)> {
    let json = sidecar_path(prefix);
    let text = fs::read_to_string(&json).map_err(|e| ExperimentError::io(&json, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    let mut r = csv::Reader::from_path(csv_path(prefix))?;
    let width = r.headers()?.len();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(rec.iter().map(parse_f64).collect::<Result<Vec<f64>>>()?);
    }
    if width < 2 || rows.is_empty() || rows.iter().any(|r| r.len() != width) {
        return Err(ExperimentError::Config(format!("{}: malformed dataset", prefix.display())));
    }
    let data = match sidecar.kind {
        DatasetKind::TrafficGraph => {
            let nodes = width - 1;
            let series: Vec<f64> = rows.iter().flat_map(|r| r[1..].iter().copied()).collect();
            let adjacency = Tensor64::from_rows(&sidecar.adjacency)?;
            if adjacency.shape() != [nodes, nodes] {
                return Err(ExperimentError::Config("sidecar adjacency does not match the node count".into()));
            }
            Dataset::Traffic(TrafficData {
                series: Tensor64::new(vec![rows.len(), nodes], series)?,
                geodesic: geodesic_distances(&adjacency)?,
                adjacency,
            })
        }
        kind => {
            let features = width - 1;
            let labels = rows.iter().map(|r| r[0] as usize).collect();
            let x = rows.iter().flat_map(|r| r[1..].iter().copied()).collect();
            let classes = sidecar.classes.unwrap_or(2);
            Dataset::Labeled(labeled(kind, features, classes, x, labels, sidecar.teacher.clone())?)
        }
    };
    Ok((data, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_covers_everything() {
        let [a, b, c] = split_ranges(1000);
        assert_eq!((a.len(), b.len(), c.len()), (700, 150, 150));
        assert_eq!(c.end, 1000);
    }

    #[test]
    fn classify_has_both_labels() {
        let d = generate_classify(&ClassifyParams::default(), 3).unwrap();
        let ones = d.train.labels.iter().filter(|&&l| l == 1).count();
        assert!(ones > 200 && ones < 600, "{ones}");
        assert_eq!(d.train.len() + d.eval.len() + d.test.len(), 1200);
    }

    #[test]
    fn wiring_labels_use_every_class() {
        let d = generate_wiring(&WiringDataParams::default(), 5).unwrap();
        for c in 0..4 {
            assert!(d.train.labels.contains(&c));
        }
        assert_eq!(d.teacher.len(), 8 * 3);
    }

    #[test]
    fn traffic_contract() {
        let p = TrafficParams { nodes: 12, steps: 300, ..TrafficParams::default() };
        let d = generate_traffic(&p, 7).unwrap();
        assert!(d.series.data().iter().all(|&v| v > 0.0));
        assert_eq!(d.adjacency.transpose().unwrap(), d.adjacency);
        assert!((0..12).all(|i| d.adjacency.at2(i, i) == 1.0));
        assert!(d.geodesic.iter().flatten().all(|&g| g < 12));
        assert_eq!(generate_traffic(&p, 7).unwrap(), d);
    }
}
