//! Disentanglement diagnostics: static/dynamic feature extraction,
//! domain-classification probes, and 2-D embedding export.

use crate::data::{assemble_batch, DomainSample};
use crate::dynconv::Model;
use crate::error::{bail, Result};
use crate::rng::{stream_rng, STREAM_PROBE};
use crate::tensor::{Graph, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    StaticFeatures,
    DynamicCoefficients,
}

/// N×D feature rows with per-row class/domain metadata.
#[derive(Clone, Debug)]
pub struct FeatureMatrix {
    pub rows: Vec<f32>,
    pub n: usize,
    pub d: usize,
    pub classes: Vec<usize>,
    pub domains: Vec<usize>,
    pub split_tag: String,
    pub source: FeatureSource,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != self.n * self.d
            || self.classes.len() != self.n
            || self.domains.len() != self.n
        {
            bail!(Dim, "feature matrix metadata does not match its rows");
        }
        Ok(())
    }
}

const EXTRACT_CHUNK: usize = 64;

/// λ from every block of a non-perturbed forward, concatenated per sample
/// (D = Σ M over blocks).
pub fn extract_coefficients<S: Scalar>(
    model: &Model<S>,
    samples: &[DomainSample],
    split_tag: &str,
) -> Result<FeatureMatrix> {
    if samples.is_empty() {
        bail!(Config, "cannot extract features from an empty sample list");
    }
    let d = model.config.coefficient_width();
    let mut rows = Vec::with_capacity(samples.len() * d);
    let indices: Vec<usize> = (0..samples.len()).collect();
    for chunk in indices.chunks(EXTRACT_CHUNK) {
        let batch = assemble_batch::<S>(samples, chunk)?;
        let mut g = Graph::new();
        let vars = model.register(&mut g)?;
        let x = g.input(&batch.images)?;
        let out = model.forward(&mut g, x, &vars)?;
        let per_block: Vec<(&[S], usize)> = out
            .lambdas
            .iter()
            .map(|l| (g.value(*l), g.shape(*l)[1]))
            .collect();
        for b in 0..chunk.len() {
            for (vals, m) in &per_block {
                rows.extend(vals[b * m..(b + 1) * m].iter().map(|v| v.to_f64().unwrap() as f32));
            }
        }
    }
    Ok(FeatureMatrix {
        rows,
        n: samples.len(),
        d,
        classes: samples.iter().map(|s| s.class_label).collect(),
        domains: samples.iter().map(|s| s.domain_label).collect(),
        split_tag: split_tag.to_string(),
        source: FeatureSource::DynamicCoefficients,
    })
}

/// Pooled features with the last block running static-only (earlier
/// blocks dynamic), D = C_out of the last block.
pub fn extract_static_features<S: Scalar>(
    model: &Model<S>,
    samples: &[DomainSample],
    split_tag: &str,
) -> Result<FeatureMatrix> {
    if samples.is_empty() {
        bail!(Config, "cannot extract features from an empty sample list");
    }
    let d = model.config.feature_width();
    let mut rows = Vec::with_capacity(samples.len() * d);
    let indices: Vec<usize> = (0..samples.len()).collect();
    for chunk in indices.chunks(EXTRACT_CHUNK) {
        let batch = assemble_batch::<S>(samples, chunk)?;
        let mut g = Graph::new();
        let vars = model.register(&mut g)?;
        let x = g.input(&batch.images)?;
        let pooled = model.forward_static_tail(&mut g, x, &vars)?;
        rows.extend(g.value(pooled).iter().map(|v| v.to_f64().unwrap() as f32));
    }
    Ok(FeatureMatrix {
        rows,
        n: samples.len(),
        d,
        classes: samples.iter().map(|s| s.class_label).collect(),
        domains: samples.iter().map(|s| s.domain_label).collect(),
        split_tag: split_tag.to_string(),
        source: FeatureSource::StaticFeatures,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub holdout_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 32,
            lr: 0.1,
            epochs: 200,
            seed: 0,
            holdout_fraction: 0.2,
        }
    }
}

/// Held-out accuracy curve of the domain probe.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeResult {
    pub curve: Vec<f64>,
    pub final_accuracy: f64,
    pub config: ProbeConfig,
}

impl ProbeResult {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,holdout_accuracy\n");
        for (i, v) in self.curve.iter().enumerate() {
            out.push_str(&format!("{i},{v}\n"));
        }
        out
    }
}

/// Trains a one-hidden-layer classifier on frozen features to predict
/// domain labels, with a stratified 80/20 split; returns the held-out
/// accuracy after every probe epoch. Full-batch gradient descent, so
/// probe capacity and schedule cancel out across comparisons.
pub fn domain_probe(features: &FeatureMatrix, config: &ProbeConfig) -> Result<ProbeResult> {
    features.validate()?;
    let domain_ids: Vec<usize> = {
        let set: std::collections::BTreeSet<usize> = features.domains.iter().copied().collect();
        set.into_iter().collect()
    };
    if domain_ids.len() < 2 {
        bail!(Config, "domain probe needs at least two domains");
    }
    if !(config.holdout_fraction > 0.0 && config.holdout_fraction < 1.0) {
        bail!(Config, "holdout fraction must lie strictly between 0 and 1");
    }
    let n_classes = domain_ids.len();
    let class_of: BTreeMap<usize, usize> = domain_ids
        .iter()
        .enumerate()
        .map(|(i, d)| (*d, i))
        .collect();

    let mut rng = stream_rng(config.seed, STREAM_PROBE);
    let mut train_idx = Vec::new();
    let mut hold_idx = Vec::new();
    for d in &domain_ids {
        let mut members: Vec<usize> = (0..features.n)
            .filter(|i| features.domains[*i] == *d)
            .collect();
        members.shuffle(&mut rng);
        let train_n =
            ((1.0 - config.holdout_fraction) * members.len() as f64).floor() as usize;
        train_idx.extend_from_slice(&members[..train_n]);
        hold_idx.extend_from_slice(&members[train_n..]);
    }
    if train_idx.is_empty() || hold_idx.is_empty() {
        bail!(Config, "probe split produced an empty partition");
    }

    let gather = |idx: &[usize]| -> (Vec<f64>, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * features.d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend(features.row(i).iter().map(|v| *v as f64));
            labels.push(class_of[&features.domains[i]]);
        }
        (data, labels)
    };
    let (mut train_x, train_y) = gather(&train_idx);
    let (mut hold_x, hold_y) = gather(&hold_idx);

    // Standardize columns with statistics from the training partition so
    // feature scale cancels out of the probe comparison.
    let nt = train_idx.len() as f64;
    for j in 0..features.d {
        let mean = train_x.iter().skip(j).step_by(features.d).sum::<f64>() / nt;
        let var = train_x
            .iter()
            .skip(j)
            .step_by(features.d)
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / nt;
        let inv = 1.0 / var.sqrt().max(1e-8);
        for v in train_x.iter_mut().skip(j).step_by(features.d) {
            *v = (*v - mean) * inv;
        }
        for v in hold_x.iter_mut().skip(j).step_by(features.d) {
            *v = (*v - mean) * inv;
        }
    }

    let d = features.d;
    let h = config.hidden;
    let kaiming = |fan_in: usize, n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let bound = (6.0 / fan_in as f64).sqrt();
        (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect()
    };
    let mut params = vec![
        Tensor::<f64>::from_vec(&[d, h], kaiming(d, d * h, &mut rng))?.with_grad(),
        Tensor::<f64>::zeros(&[h]).with_grad(),
        Tensor::<f64>::from_vec(&[h, n_classes], kaiming(h, h * n_classes, &mut rng))?.with_grad(),
        Tensor::<f64>::zeros(&[n_classes]).with_grad(),
    ];

    let forward = |g: &mut Graph<f64>,
                   params: &[Tensor<f64>],
                   x: &[f64],
                   n: usize|
     -> Result<crate::tensor::Var> {
        let xv = g.constant(&[n, d], x.to_vec())?;
        let vars: Vec<_> = params.iter().map(|p| g.input(p)).collect::<Result<_>>()?;
        let hpre = g.linear(xv, vars[0], vars[1])?;
        let hact = g.relu(hpre)?;
        g.linear(hact, vars[2], vars[3])
    };

    let mut curve = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        // full-batch gradient step on the training partition
        let mut g = Graph::new();
        let xv = g.constant(&[train_idx.len(), d], train_x.clone())?;
        let vars: Vec<_> = params.iter().map(|p| g.input(p)).collect::<Result<Vec<_>>>()?;
        let hpre = g.linear(xv, vars[0], vars[1])?;
        let hact = g.relu(hpre)?;
        let logits = g.linear(hact, vars[2], vars[3])?;
        let loss = g.cross_entropy(logits, &train_y)?;
        g.backward(loss)?;
        for (p, v) in params.iter_mut().zip(&vars) {
            if let Some(grad) = g.grad(*v) {
                for (x, gg) in p.data_mut().iter_mut().zip(grad) {
                    *x -= config.lr * gg;
                }
            }
        }

        // held-out accuracy
        let mut ge = Graph::new();
        let logits = forward(&mut ge, &params, &hold_x, hold_idx.len())?;
        let vals = ge.value(logits);
        let mut correct = 0;
        for (b, y) in hold_y.iter().enumerate() {
            let row = &vals[b * n_classes..(b + 1) * n_classes];
            let mut best = 0;
            for (i, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = i;
                }
            }
            if best == *y {
                correct += 1;
            }
        }
        curve.push(correct as f64 / hold_y.len() as f64);
    }

    Ok(ProbeResult {
        final_accuracy: *curve.last().unwrap(),
        curve,
        config: *config,
    })
}

/// Principal-component embedding.
#[derive(Clone, Debug)]
pub struct PcaEmbedding {
    /// N×dims coordinates, row-major; column means are zero
    pub coords: Vec<f64>,
    /// dims×D projection directions (orthonormal rows)
    pub components: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub dims: usize,
}

impl PcaEmbedding {
    /// `x,y,class,domain` rows for external plotting.
    pub fn to_csv(&self, features: &FeatureMatrix) -> String {
        let mut out = String::from("x,y,class,domain\n");
        for i in 0..features.n {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.coords[i * self.dims],
                self.coords[i * self.dims + 1],
                features.classes[i],
                features.domains[i]
            ));
        }
        out
    }
}

/// Centers the columns and projects onto the top principal directions
/// (covariance eigenvectors, descending eigenvalue, sign fixed so each
/// component's largest-magnitude loading is positive).
pub fn pca_embed(features: &FeatureMatrix, dims: usize) -> Result<PcaEmbedding> {
    features.validate()?;
    let (n, d) = (features.n, features.d);
    if n < dims {
        bail!(Config, "{n} samples cannot support a {dims}-dimensional embedding");
    }
    if dims == 0 || dims > d {
        bail!(Config, "embedding dims {dims} outside 1..={d}");
    }

    // center columns in f64
    let mut centered = vec![0.0f64; n * d];
    for j in 0..d {
        let mean: f64 = (0..n).map(|i| features.rows[i * d + j] as f64).sum::<f64>() / n as f64;
        for i in 0..n {
            centered[i * d + j] = features.rows[i * d + j] as f64 - mean;
        }
    }
    // covariance
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut cov = vec![0.0f64; d * d];
    for i in 0..n {
        let row = &centered[i * d..(i + 1) * d];
        for a in 0..d {
            for b in a..d {
                cov[a * d + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a * d + b] /= denom;
            cov[b * d + a] = cov[a * d + b];
        }
    }

    let (mut eigenvalues, mut vectors) = jacobi_eigen(&cov, d);

    // descending eigenvalue order (stable under ties)
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).unwrap().then(a.cmp(&b)));
    eigenvalues = order.iter().map(|&i| eigenvalues[i]).collect();
    vectors = order
        .iter()
        .flat_map(|&i| vectors[i * d..(i + 1) * d].to_vec())
        .collect();

    // fix signs: largest-magnitude loading positive
    for k in 0..dims {
        let comp = &mut vectors[k * d..(k + 1) * d];
        let mut pivot = 0;
        for (i, v) in comp.iter().enumerate().skip(1) {
            if v.abs() > comp[pivot].abs() {
                pivot = i;
            }
        }
        if comp[pivot] < 0.0 {
            comp.iter_mut().for_each(|v| *v = -*v);
        }
    }

    let mut coords = vec![0.0f64; n * dims];
    for i in 0..n {
        for k in 0..dims {
            let mut acc = 0.0;
            for j in 0..d {
                acc += centered[i * d + j] * vectors[k * d + j];
            }
            coords[i * dims + k] = acc;
        }
    }

    Ok(PcaEmbedding {
        coords,
        components: vectors[..dims * d].to_vec(),
        eigenvalues: eigenvalues[..dims].to_vec(),
        dims,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, row-major eigenvectors: row i pairs with eigenvalue i).
fn jacobi_eigen(matrix: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off.sqrt() < 1e-14 * frob {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    // transpose: row i = eigenvector i
    let mut rows = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..d {
            rows[i * d + j] = v[j * d + i];
        }
    }
    (eigenvalues, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_domains, SyntheticSpec};
    use crate::dynconv::{build_network, BlockConfig, NetworkConfig};
    use rand::Rng;

    fn small_net() -> NetworkConfig {
        NetworkConfig {
            input_channels: 3,
            input_height: 16,
            input_width: 16,
            classes: 4,
            blocks: vec![
                BlockConfig { c_in: 3, c_out: 6, k: 3, templates: 4, stride: 1, pad: 1 },
                BlockConfig { c_in: 6, c_out: 8, k: 3, templates: 4, stride: 1, pad: 1 },
            ],
            adjuster_hidden: None,
        }
    }

    fn small_samples(per_cell: usize) -> Vec<DomainSample> {
        let spec = SyntheticSpec {
            per_cell,
            ..SyntheticSpec::default()
        };
        generate_synthetic_domains(&spec, 11).unwrap()
    }

    #[test]
    fn fresh_model_coefficients_are_uniform_rows() {
        let model = build_network::<f32>(&small_net(), 1).unwrap();
        let samples = small_samples(2);
        let fm = extract_coefficients(&model, &samples, "train").unwrap();
        assert_eq!(fm.d, 8);
        assert_eq!(fm.n, samples.len());
        for i in 0..fm.n {
            for v in fm.row(i) {
                assert!((v - 0.25).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn duplicate_samples_give_duplicate_rows_and_simplex_segments() {
        let mut model = build_network::<f32>(&small_net(), 2).unwrap();
        let mut rng = stream_rng(5, STREAM_PROBE);
        for b in model.blocks.iter_mut() {
            for v in b.adjuster.weight.data_mut() {
                *v = (rng.gen::<f64>() as f32 - 0.5) * 2.0;
            }
        }
        let mut samples = small_samples(1);
        samples.push(samples[0].clone());
        let fm = extract_coefficients(&model, &samples, "train").unwrap();
        let last = fm.n - 1;
        assert_eq!(fm.row(0), fm.row(last));
        for i in 0..fm.n {
            let row = fm.row(i);
            for seg in [&row[..4], &row[4..]] {
                let sum: f32 = seg.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn static_features_match_plain_forward_when_templates_are_zero() {
        let mut model = build_network::<f32>(&small_net(), 3).unwrap();
        for b in model.blocks.iter_mut() {
            for t in b.bank.templates.iter_mut() {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let samples = small_samples(1);
        let fm = extract_static_features(&model, &samples, "train").unwrap();

        // plain forward pooled features
        let batch = crate::data::assemble_batch::<f32>(&samples, &(0..samples.len()).collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new();
        let vars = model.register(&mut g).unwrap();
        let x = g.input(&batch.images).unwrap();
        let out = model.forward(&mut g, x, &vars).unwrap();
        for (a, b) in fm.rows.iter().zip(g.value(out.pooled)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn static_features_equal_manual_composition() {
        let model = build_network::<f32>(&small_net(), 4).unwrap();
        let samples = small_samples(1);
        let fm = extract_static_features(&model, &samples, "t").unwrap();

        let idx: Vec<usize> = (0..samples.len()).collect();
        let batch = crate::data::assemble_batch::<f32>(&samples, &idx).unwrap();
        let mut g = Graph::new();
        let vars = model.register(&mut g).unwrap();
        let x = g.input(&batch.images).unwrap();
        // by hand: blocks 0..L-1 dynamic, block L static-only, pool, GAP
        let (f0, _) = model.block_forward(&mut g, 0, x, &vars, None).unwrap();
        let p0 = g.avg_pool2(f0).unwrap();
        let f1 = model.block_forward_static(&mut g, 1, p0, &vars).unwrap();
        let p1 = g.avg_pool2(f1).unwrap();
        let pooled = g.global_avg_pool(p1).unwrap();
        for (a, b) in fm.rows.iter().zip(g.value(pooled)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn onehot_features(per_domain: usize, domains: usize) -> FeatureMatrix {
        let n = per_domain * domains;
        let mut rows = vec![0.0f32; n * domains];
        let mut dlab = Vec::with_capacity(n);
        for i in 0..n {
            let d = i % domains;
            rows[i * domains + d] = 1.0;
            dlab.push(d);
        }
        FeatureMatrix {
            rows,
            n,
            d: domains,
            classes: vec![0; n],
            domains: dlab,
            split_tag: "fixture".into(),
            source: FeatureSource::DynamicCoefficients,
        }
    }

    #[test]
    fn probe_saturates_on_separable_features() {
        let fm = onehot_features(25, 4);
        let result = domain_probe(&fm, &ProbeConfig::default()).unwrap();
        assert!(result.final_accuracy >= 0.99, "{}", result.final_accuracy);
        assert_eq!(result.curve.len(), 200);
    }

    #[test]
    fn probe_stays_near_chance_on_noise() {
        let mut finals = Vec::new();
        for seed in [0u64, 1, 2] {
            let mut rng = stream_rng(seed + 100, STREAM_PROBE);
            let n = 200;
            let d = 8;
            let rows: Vec<f32> = (0..n * d).map(|_| rng.gen::<f32>() - 0.5).collect();
            let fm = FeatureMatrix {
                rows,
                n,
                d,
                classes: vec![0; n],
                domains: (0..n).map(|i| i % 4).collect(),
                split_tag: "noise".into(),
                source: FeatureSource::StaticFeatures,
            };
            let cfg = ProbeConfig { seed, ..ProbeConfig::default() };
            finals.push(domain_probe(&fm, &cfg).unwrap().final_accuracy);
        }
        finals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = finals[1];
        assert!((0.15..=0.40).contains(&median), "noise median {median}");
    }

    #[test]
    fn probe_is_stable_under_row_duplication() {
        let fm = onehot_features(25, 4);
        let doubled = FeatureMatrix {
            rows: fm.rows.iter().chain(&fm.rows).copied().collect(),
            n: fm.n * 2,
            d: fm.d,
            classes: fm.classes.iter().chain(&fm.classes).copied().collect(),
            domains: fm.domains.iter().chain(&fm.domains).copied().collect(),
            split_tag: fm.split_tag.clone(),
            source: fm.source,
        };
        let a = domain_probe(&fm, &ProbeConfig::default()).unwrap();
        let b = domain_probe(&doubled, &ProbeConfig::default()).unwrap();
        assert!((a.final_accuracy - b.final_accuracy).abs() <= 0.02);
    }

    #[test]
    fn probe_rejects_single_domain() {
        let mut fm = onehot_features(10, 4);
        fm.domains = vec![0; fm.n];
        assert!(domain_probe(&fm, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn pca_collapses_rank_one_data() {
        // points on a line through a 5-dimensional space
        let n = 40;
        let d = 5;
        let dir = [1.0f32, -2.0, 0.5, 3.0, -1.0];
        let mut rows = Vec::with_capacity(n * d);
        for i in 0..n {
            let t = i as f32 / n as f32 - 0.5;
            rows.extend(dir.iter().map(|v| v * t));
        }
        let fm = FeatureMatrix {
            rows,
            n,
            d,
            classes: vec![0; n],
            domains: vec![0; n],
            split_tag: "line".into(),
            source: FeatureSource::StaticFeatures,
        };
        let e = pca_embed(&fm, 2).unwrap();
        let var = |k: usize| -> f64 {
            (0..n).map(|i| e.coords[i * 2 + k] * e.coords[i * 2 + k]).sum::<f64>() / n as f64
        };
        assert!(var(1) < 1e-10 * var(0), "{} vs {}", var(1), var(0));
        // column means are zero
        for k in 0..2 {
            let mean: f64 = (0..n).map(|i| e.coords[i * 2 + k]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-9);
        }
    }

    /// Power iteration with deflation: an independent eigensolver for the
    /// oracle comparison.
    fn power_eigen(cov: &[f64], d: usize, k: usize) -> Vec<Vec<f64>> {
        let mut mat = cov.to_vec();
        let mut out = Vec::new();
        for _ in 0..k {
            let mut v = vec![1.0 / (d as f64).sqrt(); d];
            for _ in 0..10_000 {
                let mut next = vec![0.0; d];
                for i in 0..d {
                    for j in 0..d {
                        next[i] += mat[i * d + j] * v[j];
                    }
                }
                let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
                for x in next.iter_mut() {
                    *x /= norm;
                }
                v = next;
            }
            let mut lambda = 0.0;
            for i in 0..d {
                for j in 0..d {
                    lambda += v[i] * mat[i * d + j] * v[j];
                }
            }
            for i in 0..d {
                for j in 0..d {
                    mat[i * d + j] -= lambda * v[i] * v[j];
                }
            }
            out.push(v);
        }
        out
    }

    #[test]
    fn pca_matches_power_iteration_oracle_on_3x3() {
        let rows: Vec<f32> = vec![
            1.0, 2.0, 0.5, //
            -1.0, 0.5, 1.5, //
            0.25, -2.0, 1.0, //
            2.0, 1.0, -0.5, //
            -0.5, 0.75, 2.0, //
        ];
        let fm = FeatureMatrix {
            rows,
            n: 5,
            d: 3,
            classes: vec![0; 5],
            domains: vec![0; 5],
            split_tag: "o".into(),
            source: FeatureSource::StaticFeatures,
        };
        let e = pca_embed(&fm, 2).unwrap();

        // independent covariance + eigensolve
        let n = 5;
        let d = 3;
        let mut centered = vec![0.0f64; n * d];
        for j in 0..d {
            let mean: f64 = (0..n).map(|i| fm.rows[i * d + j] as f64).sum::<f64>() / n as f64;
            for i in 0..n {
                centered[i * d + j] = fm.rows[i * d + j] as f64 - mean;
            }
        }
        let mut cov = vec![0.0f64; d * d];
        for i in 0..n {
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += centered[i * d + a] * centered[i * d + b] / (n - 1) as f64;
                }
            }
        }
        let oracle = power_eigen(&cov, d, 2);
        for (k, vec_oracle) in oracle.iter().enumerate() {
            for i in 0..n {
                let want: f64 = (0..d).map(|j| centered[i * d + j] * vec_oracle[j]).sum();
                let got = e.coords[i * 2 + k];
                assert!(
                    (want.abs() - got.abs()).abs() < 1e-8,
                    "component {k} sample {i}: {got} vs {want}"
                );
            }
        }

        // orthonormal projection directions
        for a in 0..2 {
            for b in 0..2 {
                let dot: f64 = (0..d)
                    .map(|j| e.components[a * d + j] * e.components[b * d + j])
                    .sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pca_rejects_fewer_samples_than_dims() {
        let fm = onehot_features(1, 1);
        assert!(pca_embed(&fm, 2).is_err());
    }
}
