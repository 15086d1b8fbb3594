//! Score estimation by clustering Gaussian-perturbed samples.
//!
//! Each sample `μ` is displaced to `x = μ + σ_G z`. Within a small region `Ω`
//! of `x`-space, `−E[z | x ∈ Ω] / σ_G` estimates the score of the data
//! density smoothed by `N(0, σ_G² I)`. Regions come from bisecting k-means
//! and a dense network interpolates the centroid estimates.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{KdTree, NeuralScore, ScoreModel, ScoreNet};
use crate::nn::{train_mse, DenseNetworkSpec, Mlp, MseData, Network, TrainConfig, TrainReport};
use crate::rng;
use crate::sde::Normalization;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgmmConfig {
    pub sigma_g: f64,
    pub n_clusters: usize,
    pub seed: u64,
    pub network: DenseNetworkSpec,
    pub train: TrainConfig,
    /// Clusters with fewer members are flagged low-confidence.
    pub min_members: usize,
    /// Lloyd iterations after the bisection phase.
    pub refine_iters: usize,
    /// Weight interpolant targets by cluster size instead of uniformly.
    pub count_weighted: bool,
    /// Keep low-confidence centroids in the interpolant's training set.
    pub include_low_confidence: bool,
    /// Independent kernel displacements drawn per sample.
    pub copies: usize,
}

impl KgmmConfig {
    /// Hidden widths 50 and 25, batch 32, 2000 epochs, ten kernel draws per
    /// sample and count-weighted interpolation.
    pub fn new(dim: usize, sigma_g: f64, n_clusters: usize, seed: u64) -> Self {
        KgmmConfig {
            sigma_g,
            n_clusters,
            seed,
            network: DenseNetworkSpec::mlp(dim, &[50, 25], dim, seed),
            train: TrainConfig::new(32, 2000, 1e-3, seed),
            min_members: 10,
            refine_iters: 20,
            count_weighted: true,
            include_low_confidence: false,
            copies: 10,
        }
    }

    /// Replaces the interpolant's hidden widths, batch size and epoch count.
    pub fn with_interpolant(mut self, hidden: &[usize], batch_size: usize, epochs: usize) -> Self {
        let dim = self.network.layer_widths[0];
        self.network = DenseNetworkSpec::mlp(dim, hidden, dim, self.seed);
        self.train.batch_size = batch_size;
        self.train.epochs = epochs;
        self
    }

    /// Cluster count from `N_C ∝ σ_G^{-d}`, anchored at a reference pair.
    pub fn scaled_clusters(reference_clusters: usize, reference_sigma: f64, sigma_g: f64, dim: usize) -> usize {
        let n = reference_clusters as f64 * (sigma_g / reference_sigma).powi(-(dim as i32));
        n.round().max(1.0) as usize
    }

    pub fn validate(&self, n_samples: usize) -> Result<()> {
        if !(self.sigma_g > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma_g must be positive, got {}", self.sigma_g)));
        }
        if self.sigma_g < 1e-2 {
            log::warn!("sigma_g = {} is below the 1e-2 guideline", self.sigma_g);
        }
        if self.copies == 0 {
            return Err(Error::InvalidParameter("copies must be at least 1".into()));
        }
        if self.n_clusters == 0 || self.n_clusters > n_samples * self.copies {
            return Err(Error::InvalidParameter(format!(
                "cluster count {} must be in 1..={n_samples}",
                self.n_clusters
            )));
        }
        self.network.validate()
    }
}

/// Perturbed samples `x = μ + σ_G z` together with their `z`.
#[derive(Debug, Clone)]
pub struct PerturbedSamples {
    pub dim: usize,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

impl PerturbedSamples {
    pub fn len(&self) -> usize {
        self.x.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// `copies` perturbed versions of every sample; copy `c` of sample `i` is
/// row `c·n + i`.
pub fn perturb_samples(samples: &[f64], dim: usize, sigma_g: f64, copies: usize, seed: u64) -> PerturbedSamples {
    let mut r = rng::stream(seed, rng::domain::KERNEL, 0);
    let mut z = vec![0.0; samples.len() * copies];
    rng::fill_normal(&mut r, &mut z);
    let x = samples
        .iter()
        .cycle()
        .zip(&z)
        .map(|(m, zi)| m + sigma_g * zi)
        .collect();
    PerturbedSamples { dim, x, z }
}

/// Partition of a point set into `k` clusters.
#[derive(Debug, Clone)]
pub struct ClusterSet {
    pub dim: usize,
    /// Row-major `k × dim`.
    pub centroids: Vec<f64>,
    pub counts: Vec<usize>,
    pub assignment: Vec<u32>,
    pub inertia: f64,
    /// Clusters that came out of refinement empty and were re-split.
    pub resplits: usize,
    pub refine_iterations: usize,
    pub converged: bool,
}

impl ClusterSet {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }
}

struct Cluster {
    members: Vec<u32>,
    centroid: Vec<f64>,
    inertia: f64,
}

struct ByInertia(f64, usize);

impl PartialEq for ByInertia {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for ByInertia {}
impl PartialOrd for ByInertia {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for ByInertia {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(other.1.cmp(&self.1))
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn make_cluster(points: &[f64], dim: usize, members: Vec<u32>) -> Cluster {
    let mut centroid = vec![0.0; dim];
    for &m in &members {
        let p = &points[m as usize * dim..(m as usize + 1) * dim];
        for (c, v) in centroid.iter_mut().zip(p) {
            *c += v;
        }
    }
    let n = members.len().max(1) as f64;
    centroid.iter_mut().for_each(|c| *c /= n);
    let inertia = members
        .iter()
        .map(|&m| dist2(&points[m as usize * dim..(m as usize + 1) * dim], &centroid))
        .sum();
    Cluster {
        members,
        centroid,
        inertia,
    }
}

/// 2-means on `members` with k-means++ seeding. `None` when all members
/// coincide.
fn split(points: &[f64], dim: usize, members: &[u32], r: &mut rng::Stream) -> Option<(Cluster, Cluster)> {
    let p = |m: u32| &points[m as usize * dim..(m as usize + 1) * dim];
    let first = members[r.gen_range(0..members.len())];
    let d: Vec<f64> = members.iter().map(|&m| dist2(p(m), p(first))).collect();
    let total: f64 = d.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut u = r.gen_range(0.0..total);
    let mut second = members[members.len() - 1];
    for (&m, &dm) in members.iter().zip(&d) {
        if u < dm {
            second = m;
            break;
        }
        u -= dm;
    }
    let mut c = [p(first).to_vec(), p(second).to_vec()];
    let mut side = vec![false; members.len()];
    for iter in 0..50 {
        let mut changed = false;
        for (s, &m) in side.iter_mut().zip(members) {
            let right = dist2(p(m), &c[1]) < dist2(p(m), &c[0]);
            if right != *s || iter == 0 {
                changed |= right != *s;
                *s = right;
            }
        }
        let mut sums = [vec![0.0; dim], vec![0.0; dim]];
        let mut n = [0usize; 2];
        for (&s, &m) in side.iter().zip(members) {
            let k = s as usize;
            n[k] += 1;
            for (a, v) in sums[k].iter_mut().zip(p(m)) {
                *a += v;
            }
        }
        if n[0] == 0 || n[1] == 0 {
            return None;
        }
        for k in 0..2 {
            for (ci, s) in c[k].iter_mut().zip(&sums[k]) {
                *ci = s / n[k] as f64;
            }
        }
        if !changed && iter > 0 {
            break;
        }
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (&s, &m) in side.iter().zip(members) {
        if s {
            b.push(m)
        } else {
            a.push(m)
        }
    }
    Some((make_cluster(points, dim, a), make_cluster(points, dim, b)))
}

/// Bisecting k-means: repeatedly split the cluster of largest inertia with
/// 2-means until `k` clusters exist, then run up to `refine_iters` global
/// Lloyd iterations (nearest centroid by kd-tree).
pub fn bisecting_kmeans(points: &[f64], dim: usize, k: usize, seed: u64, refine_iters: usize) -> Result<ClusterSet> {
    let n = points.len() / dim.max(1);
    if dim == 0 || n == 0 {
        return Err(Error::InsufficientData("no points to cluster".into()));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!("cluster count {k} must be in 1..={n}")));
    }
    let mut r = rng::stream(seed, rng::domain::KMEANS, 0);
    let mut clusters = vec![make_cluster(points, dim, (0..n as u32).collect())];
    let mut heap = BinaryHeap::new();
    heap.push(ByInertia(clusters[0].inertia, 0));
    while clusters.len() < k {
        let Some(ByInertia(_, j)) = heap.pop() else {
            return Err(Error::InsufficientData(format!(
                "only {} distinct clusters can be formed, {k} requested",
                clusters.len()
            )));
        };
        if clusters[j].members.len() < 2 {
            continue;
        }
        let Some((a, b)) = split(points, dim, &clusters[j].members, &mut r) else {
            continue;
        };
        let jb = clusters.len();
        heap.push(ByInertia(a.inertia, j));
        heap.push(ByInertia(b.inertia, jb));
        clusters[j] = a;
        clusters.push(b);
    }

    let mut assignment = vec![0u32; n];
    for (j, c) in clusters.iter().enumerate() {
        for &m in &c.members {
            assignment[m as usize] = j as u32;
        }
    }
    let mut centroids: Vec<f64> = clusters.iter().flat_map(|c| c.centroid.iter().copied()).collect();
    drop(clusters);

    let mut resplits = 0;
    let mut converged = refine_iters == 0;
    let mut iterations = 0;
    for _ in 0..refine_iters {
        iterations += 1;
        let tree = KdTree::build(&centroids, dim);
        let mut changed = 0usize;
        for (i, a) in assignment.iter_mut().enumerate() {
            let (j, _) = tree.nearest(&points[i * dim..(i + 1) * dim]);
            if *a != j as u32 {
                *a = j as u32;
                changed += 1;
            }
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a as usize] += 1;
            for (s, v) in sums[a as usize * dim..(a as usize + 1) * dim]
                .iter_mut()
                .zip(&points[i * dim..(i + 1) * dim])
            {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for d in 0..dim {
                    centroids[j * dim + d] = sums[j * dim + d] / counts[j] as f64;
                }
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        for &e in &empty {
            // re-split the largest-inertia cluster into itself and the empty slot
            let mut inertia = vec![0.0; k];
            for (i, &a) in assignment.iter().enumerate() {
                inertia[a as usize] += dist2(&points[i * dim..(i + 1) * dim], &centroids[a as usize * dim..(a as usize + 1) * dim]);
            }
            let big = (0..k).max_by(|&a, &b| inertia[a].total_cmp(&inertia[b]).then(b.cmp(&a))).unwrap();
            let members: Vec<u32> = (0..n as u32).filter(|&i| assignment[i as usize] == big as u32).collect();
            if let Some((a, b)) = split(points, dim, &members, &mut r) {
                for &m in &b.members {
                    assignment[m as usize] = e as u32;
                }
                centroids[big * dim..(big + 1) * dim].copy_from_slice(&a.centroid);
                centroids[e * dim..(e + 1) * dim].copy_from_slice(&b.centroid);
                resplits += 1;
            }
        }
        if changed == 0 && empty.is_empty() {
            converged = true;
            break;
        }
    }

    let mut counts = vec![0usize; k];
    let mut inertia = 0.0;
    for (i, &a) in assignment.iter().enumerate() {
        counts[a as usize] += 1;
        inertia += dist2(&points[i * dim..(i + 1) * dim], &centroids[a as usize * dim..(a as usize + 1) * dim]);
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::DegenerateData(format!("cluster {j} is empty after refinement")));
    }
    if resplits > 0 {
        log::info!("k-means refinement re-split {resplits} empty clusters");
    }
    Ok(ClusterSet {
        dim,
        centroids,
        counts,
        assignment,
        inertia,
        resplits,
        refine_iterations: iterations,
        converged,
    })
}

/// Discrete score estimates at cluster centroids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreTable {
    pub dim: usize,
    pub centroids: Vec<f64>,
    pub scores: Vec<f64>,
    /// Standard error of each score component.
    pub stderr: Vec<f64>,
    pub counts: Vec<usize>,
    pub low_confidence: Vec<bool>,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn score(&self, j: usize) -> &[f64] {
        &self.scores[j * self.dim..(j + 1) * self.dim]
    }

    /// Columns `c1..cn, s1..sn, se1..sen, count, low_confidence`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let d = self.dim;
        let head: Vec<String> = (1..=d)
            .map(|i| format!("c{i}"))
            .chain((1..=d).map(|i| format!("s{i}")))
            .chain((1..=d).map(|i| format!("se{i}")))
            .collect();
        writeln!(w, "{},count,low_confidence", head.join(","))?;
        for j in 0..self.len() {
            let vals: Vec<String> = self
                .centroid(j)
                .iter()
                .chain(self.score(j))
                .chain(&self.stderr[j * d..(j + 1) * d])
                .map(|v| v.to_string())
                .collect();
            writeln!(w, "{},{},{}", vals.join(","), self.counts[j], self.low_confidence[j])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `ŝ_j = −mean(z | Ω_j) / σ_G` with standard errors from the member spread.
pub fn centroid_scores(clusters: &ClusterSet, z: &[f64], sigma_g: f64, min_members: usize) -> Result<ScoreTable> {
    let d = clusters.dim;
    if z.len() != clusters.assignment.len() * d {
        return Err(Error::dim("kernel displacements", clusters.assignment.len() * d, z.len()));
    }
    if !(sigma_g > 0.0) {
        return Err(Error::InvalidParameter("sigma_g must be positive".into()));
    }
    let k = clusters.len();
    let mut sum = vec![0.0; k * d];
    let mut sq = vec![0.0; k * d];
    for (i, &a) in clusters.assignment.iter().enumerate() {
        let a = a as usize;
        for c in 0..d {
            let v = z[i * d + c];
            sum[a * d + c] += v;
            sq[a * d + c] += v * v;
        }
    }
    let mut scores = vec![0.0; k * d];
    let mut stderr = vec![0.0; k * d];
    for j in 0..k {
        let n = clusters.counts[j] as f64;
        for c in 0..d {
            let m = sum[j * d + c] / n;
            scores[j * d + c] = -m / sigma_g;
            stderr[j * d + c] = if n > 1.0 {
                let var = (sq[j * d + c] / n - m * m).max(0.0) * n / (n - 1.0);
                (var / n).sqrt() / sigma_g
            } else {
                f64::NAN
            };
        }
    }
    Ok(ScoreTable {
        dim: d,
        centroids: clusters.centroids.clone(),
        scores,
        stderr,
        counts: clusters.counts.clone(),
        low_confidence: clusters.counts.iter().map(|&c| c < min_members).collect(),
    })
}

/// Trains the dense interpolant on the table. Scores are returned in the
/// coordinates the table lives in; `normalization` records how those were
/// obtained from physical units.
pub fn fit_score(table: &ScoreTable, config: &KgmmConfig, normalization: Normalization) -> Result<(ScoreModel, TrainReport)> {
    config.network.validate()?;
    let net = Mlp::new(config.network.clone());
    if net.input_len() != table.dim || net.output_len() != table.dim {
        return Err(Error::dim("score network width", table.dim, net.input_len()));
    }
    let keep: Vec<usize> = (0..table.len())
        .filter(|&j| config.include_low_confidence || !table.low_confidence[j])
        .collect();
    if keep.is_empty() {
        return Err(Error::DegenerateData("no high-confidence centroids to fit".into()));
    }
    let mut data = MseData::new(
        keep.iter().map(|&j| table.centroid(j).to_vec()).collect(),
        keep.iter().map(|&j| table.score(j).to_vec()).collect(),
    );
    if config.count_weighted {
        data = data.with_weights(keep.iter().map(|&j| table.counts[j] as f64).collect());
    }
    let mut train = config.train.clone();
    train.batch_size = train.batch_size.min(keep.len());
    let (params, report) = train_mse(&net, &data, &train)?;
    let model = NeuralScore::new(ScoreNet::Dense(net), params, normalization)?;
    Ok((ScoreModel::Neural(model), report))
}

/// Output of the full estimator.
#[derive(Debug, Clone)]
pub struct KgmmFit {
    pub table: ScoreTable,
    pub model: ScoreModel,
    pub report: TrainReport,
    pub resplits: usize,
    pub refine_converged: bool,
}

/// Perturb, cluster, estimate and interpolate. `samples` are row-major in
/// normalized coordinates.
pub fn kgmm(samples: &[f64], dim: usize, config: &KgmmConfig, normalization: Normalization) -> Result<KgmmFit> {
    let n = samples.len() / dim.max(1);
    config.validate(n)?;
    let pert = perturb_samples(samples, dim, config.sigma_g, config.copies, config.seed);
    let clusters = bisecting_kmeans(&pert.x, dim, config.n_clusters, config.seed, config.refine_iters)?;
    let table = centroid_scores(&clusters, &pert.z, config.sigma_g, config.min_members)?;
    let (model, report) = fit_score(&table, config, normalization)?;
    Ok(KgmmFit {
        table,
        model,
        report,
        resplits: clusters.resplits,
        refine_converged: clusters.converged,
    })
}
