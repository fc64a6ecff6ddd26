//! Synthetic multi-domain datasets, PGM/PPM ingestion, and DG splits.
//!
//! Classes are shapes (content); domains are deterministic style
//! transforms applied to the rendered shape. Content survives every
//! style, so class stays decidable from geometry alone while the style
//! carries the domain signal.

use crate::error::{bail, Result};
use crate::rng::derive;
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// One image with its class (content) and domain (style) labels.
#[derive(Clone, Debug)]
pub struct DomainSample {
    /// C×H×W pixels in [0, 1]
    pub image: Tensor<f32>,
    pub class_label: usize,
    pub domain_label: usize,
}

/// Evaluation protocol for a [`DatasetSplit`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Protocol {
    /// train on all but `target`, test on `target` only
    LeaveOneOut { target: usize },
    /// train on `source` only, test on everything else
    SingleSource { source: usize },
}

/// Train/test partition under a DG protocol.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<DomainSample>,
    pub test: Vec<DomainSample>,
    pub protocol: Protocol,
}

impl DatasetSplit {
    /// N_S: number of training samples.
    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    /// Checks the containment invariants of the active protocol.
    pub fn validate(&self) -> Result<()> {
        match self.protocol {
            Protocol::LeaveOneOut { target } => {
                if self.train.iter().any(|s| s.domain_label == target) {
                    bail!(Config, "train split contains target domain {target}");
                }
                if self.test.iter().any(|s| s.domain_label != target) {
                    bail!(Config, "test split contains non-target domains");
                }
            }
            Protocol::SingleSource { source } => {
                if self.train.iter().any(|s| s.domain_label != source) {
                    bail!(Config, "train split contains non-source domains");
                }
                if self.test.iter().any(|s| s.domain_label == source) {
                    bail!(Config, "test split contains the source domain {source}");
                }
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// shape classes, up to 4: disk, cross, bar, ring
    pub classes: usize,
    /// style domains, up to 4: identity, inverted, gradient, stroke
    pub domains: usize,
    /// samples per (class, domain) cell
    pub per_cell: usize,
    /// square image size in pixels
    pub size: usize,
    /// amplitude of per-pixel uniform noise
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            domains: 4,
            per_cell: 25,
            size: 16,
            noise: 0.02,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.domains == 0 || self.per_cell == 0 {
            bail!(Config, "synthetic spec requires positive counts");
        }
        if self.classes > 4 {
            bail!(Config, "only 4 shape classes are defined, got {}", self.classes);
        }
        if self.domains > 4 {
            bail!(Config, "only 4 style domains are defined, got {}", self.domains);
        }
        if self.size < 8 {
            bail!(Config, "image size {} too small to render shapes", self.size);
        }
        if self.noise < 0.0 {
            bail!(Config, "noise level must be non-negative");
        }
        Ok(())
    }
}

/// Renders the binary mask of one shape class with small geometry jitter.
/// Classes are sized so their pixel areas stay well separated.
pub fn render_shape(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    if class > 3 {
        bail!(Config, "shape class {class} out of range");
    }
    let s = size as f64;
    let jitter = |rng: &mut ChaCha8Rng, a: f64| rng.gen::<f64>() * 2.0 * a - a;
    let cx = s / 2.0 + jitter(rng, 0.8);
    let cy = s / 2.0 + jitter(rng, 0.8);
    let scale = s / 16.0;

    let mut mask = vec![0.0f32; size * size];
    match class {
        // disk, area ≈ 95·scale²
        0 => {
            let r = (5.5 + jitter(rng, 0.25)) * scale;
            fill(&mut mask, size, |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                dx * dx + dy * dy <= r * r
            });
        }
        // cross, area ≈ 69·scale²
        1 => {
            let half_len = (6.5 + jitter(rng, 0.5)) * scale;
            let half_w = 1.49 * scale;
            fill(&mut mask, size, |x, y| {
                let (dx, dy) = ((x - cx).abs(), (y - cy).abs());
                (dx <= half_w && dy <= half_len) || (dy <= half_w && dx <= half_len)
            });
        }
        // bar, area ≈ 20·scale²
        2 => {
            let half_len = (5.0 + jitter(rng, 0.5)) * scale;
            let half_h = 0.99 * scale;
            fill(&mut mask, size, |x, y| {
                (x - cx).abs() <= half_len && (y - cy).abs() <= half_h
            });
        }
        // ring, area ≈ 45·scale²
        _ => {
            let r_out = (4.9 + jitter(rng, 0.2)) * scale;
            let r_in = (3.1 + jitter(rng, 0.15)) * scale;
            fill(&mut mask, size, |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                let d2 = dx * dx + dy * dy;
                d2 <= r_out * r_out && d2 >= r_in * r_in
            });
        }
    }
    Ok(mask)
}

fn fill(mask: &mut [f32], size: usize, inside: impl Fn(f64, f64) -> bool) {
    for y in 0..size {
        for x in 0..size {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                mask[y * size + x] = 1.0;
            }
        }
    }
}

/// Applies one domain style to a rendered mask, producing 3×H×W pixels:
/// 0 identity, 1 inverted contrast, 2 additive low-frequency color
/// gradient, 3 stroke rendering (Laplacian of the mask).
pub fn apply_style(domain: usize, mask: &[f32], size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    if mask.len() != size * size {
        bail!(Dim, "mask length {} does not match size {size}", mask.len());
    }
    let hw = size * size;
    let mut out = vec![0.0f32; 3 * hw];
    match domain {
        0 => {
            for c in 0..3 {
                out[c * hw..(c + 1) * hw].copy_from_slice(mask);
            }
        }
        1 => {
            for c in 0..3 {
                for (o, m) in out[c * hw..(c + 1) * hw].iter_mut().zip(mask) {
                    *o = 1.0 - *m;
                }
            }
        }
        2 => {
            // per-channel linear ramp, capped so shapes stay separable
            for c in 0..3 {
                let ax = rng.gen::<f64>() * 0.175;
                let ay = rng.gen::<f64>() * 0.175;
                for y in 0..size {
                    for x in 0..size {
                        let ramp = ax * x as f64 / (size - 1) as f64
                            + ay * y as f64 / (size - 1) as f64;
                        let v = mask[y * size + x] as f64 + ramp;
                        out[c * hw + y * size + x] = v.min(1.0) as f32;
                    }
                }
            }
        }
        3 => {
            // |discrete Laplacian| / 4, zero boundary conditions
            let at = |x: isize, y: isize| -> f32 {
                if x < 0 || y < 0 || x >= size as isize || y >= size as isize {
                    0.0
                } else {
                    mask[y as usize * size + x as usize]
                }
            };
            for y in 0..size as isize {
                for x in 0..size as isize {
                    let lap = 4.0 * at(x, y) - at(x - 1, y) - at(x + 1, y) - at(x, y - 1) - at(x, y + 1);
                    let v = (lap.abs() / 4.0).min(1.0);
                    for c in 0..3 {
                        out[c as usize * hw + y as usize * size + x as usize] = v;
                    }
                }
            }
        }
        _ => bail!(Config, "style domain {domain} out of range"),
    }
    Ok(out)
}

/// Deterministic synthetic dataset: `classes × domains × per_cell`
/// samples, ordered by (class, domain, index).
pub fn generate_synthetic_domains(spec: &SyntheticSpec, seed: u64) -> Result<Vec<DomainSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.size;
    let mut samples = Vec::with_capacity(spec.classes * spec.domains * spec.per_cell);
    for class in 0..spec.classes {
        for domain in 0..spec.domains {
            for _ in 0..spec.per_cell {
                let mask = render_shape(class, size, &mut rng)?;
                let mut pixels = apply_style(domain, &mask, size, &mut rng)?;
                if spec.noise > 0.0 {
                    for p in pixels.iter_mut() {
                        let n = (rng.gen::<f64>() * 2.0 - 1.0) * spec.noise;
                        *p = (*p as f64 + n).clamp(0.0, 1.0) as f32;
                    }
                }
                samples.push(DomainSample {
                    image: Tensor::from_vec(&[3, size, size], pixels)?,
                    class_label: class,
                    domain_label: domain,
                });
            }
        }
    }
    Ok(samples)
}

// ── PNM on-disk format ──────────────────────────────────────────────────

fn parse_pnm(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let err = |msg: &str| crate::error::err_fmt!(Parse, "{}: {msg}", path.display());
    if bytes.len() < 2 {
        return Err(err("file too short for a PNM header"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(err("expected binary P5 or P6 magic")),
    };
    // header tokens separated by whitespace; '#' starts a comment to EOL
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(err("malformed header: expected integer"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| err("header integer out of range"))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(err("only maxval 255 is supported"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err("missing whitespace after maxval"));
    }
    pos += 1;
    let need = w * h * channels;
    if bytes.len() - pos < need {
        return Err(err("pixel data truncated"));
    }
    let raw = &bytes[pos..pos + need];
    // interleaved rgb (P6) -> planar channels
    let mut data = vec![0.0f32; need];
    if channels == 1 {
        for (d, b) in data.iter_mut().zip(raw) {
            *d = *b as f32 / 255.0;
        }
    } else {
        for i in 0..w * h {
            for c in 0..3 {
                data[c * w * h + i] = raw[i * 3 + c] as f32 / 255.0;
            }
        }
    }
    Ok((channels, h, w, data))
}

fn encode_pnm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => bail!(Dim, "image must be C×H×W, got {s:?}"),
    };
    if c != 1 && c != 3 {
        bail!(Dim, "PNM export supports 1 or 3 channels, got {c}");
    }
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for i in 0..h * w {
        for ch in 0..c {
            out.push(quant(data[ch * h * w + i]));
        }
    }
    Ok(out)
}

/// Loads `root/<domain>/<class>/<name>.pgm|.ppm`; domain and class ids
/// are assigned by sorted directory name, samples ordered by path.
pub fn load_image_folder(root: &Path) -> Result<Vec<DomainSample>> {
    let sorted_dirs = |p: &Path| -> Result<Vec<std::path::PathBuf>> {
        let mut dirs: Vec<_> = std::fs::read_dir(p)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        Ok(dirs)
    };
    let mut samples = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for (domain, ddir) in sorted_dirs(root)?.into_iter().enumerate() {
        for (class, cdir) in sorted_dirs(&ddir)?.into_iter().enumerate() {
            let mut files: Vec<_> = std::fs::read_dir(&cdir)?
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .map(|e| e.path())
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()),
                        Some("pgm") | Some("ppm")
                    )
                })
                .collect();
            files.sort();
            for file in files {
                let bytes = std::fs::read(&file)?;
                let (c, h, w, data) = parse_pnm(&bytes, &file)?;
                let image = Tensor::from_vec(&[c, h, w], data)?;
                match &shape {
                    None => shape = Some(image.shape().to_vec()),
                    Some(s) if s.as_slice() != image.shape() => bail!(
                        Dim,
                        "{}: image shape {:?} differs from earlier {:?}",
                        file.display(),
                        image.shape(),
                        s
                    ),
                    _ => {}
                }
                samples.push(DomainSample {
                    image,
                    class_label: class,
                    domain_label: domain,
                });
            }
        }
    }
    if samples.is_empty() {
        bail!(Config, "no PGM/PPM samples under {}", root.display());
    }
    Ok(samples)
}

/// Writes samples back out in the ingestion layout (P6, or P5 for
/// single-channel images).
pub fn export_dataset(root: &Path, samples: &[DomainSample]) -> Result<()> {
    let mut counters: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for s in samples {
        let n = counters.entry((s.domain_label, s.class_label)).or_insert(0);
        let dir = root
            .join(format!("domain{}", s.domain_label))
            .join(format!("class{}", s.class_label));
        std::fs::create_dir_all(&dir)?;
        let ext = if s.image.shape()[0] == 1 { "pgm" } else { "ppm" };
        std::fs::write(dir.join(format!("sample{n:04}.{ext}")), encode_pnm(&s.image)?)?;
        *n += 1;
    }
    Ok(())
}

// ── protocols and batching ──────────────────────────────────────────────

pub fn leave_one_domain_out_split(samples: &[DomainSample], target: usize) -> Result<DatasetSplit> {
    if !samples.iter().any(|s| s.domain_label == target) {
        bail!(Config, "target domain {target} not present in dataset");
    }
    let (test, train): (Vec<_>, Vec<_>) = samples
        .iter()
        .cloned()
        .partition(|s| s.domain_label == target);
    Ok(DatasetSplit {
        train,
        test,
        protocol: Protocol::LeaveOneOut { target },
    })
}

pub fn single_source_split(samples: &[DomainSample], source: usize) -> Result<DatasetSplit> {
    if !samples.iter().any(|s| s.domain_label == source) {
        bail!(Config, "source domain {source} not present in dataset");
    }
    let (train, test): (Vec<_>, Vec<_>) = samples
        .iter()
        .cloned()
        .partition(|s| s.domain_label == source);
    Ok(DatasetSplit {
        train,
        test,
        protocol: Protocol::SingleSource { source },
    })
}

pub fn make_split(samples: &[DomainSample], protocol: Protocol) -> Result<DatasetSplit> {
    match protocol {
        Protocol::LeaveOneOut { target } => leave_one_domain_out_split(samples, target),
        Protocol::SingleSource { source } => single_source_split(samples, source),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Shuffle,
    /// near-equal counts per source domain in every batch
    DomainBalanced,
}

/// Batches of indices into `train` for one epoch. Deterministic given
/// (seed, epoch); the last short batch is kept.
pub fn make_batches(
    train: &[DomainSample],
    batch_size: usize,
    sampler: SamplerKind,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        bail!(Config, "batch size must be positive");
    }
    if train.is_empty() {
        bail!(Config, "cannot batch an empty training split");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, epoch as u64));
    let order: Vec<usize> = match sampler {
        SamplerKind::Shuffle => {
            let mut idx: Vec<usize> = (0..train.len()).collect();
            idx.shuffle(&mut rng);
            idx
        }
        SamplerKind::DomainBalanced => {
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, s) in train.iter().enumerate() {
                groups.entry(s.domain_label).or_default().push(i);
            }
            let mut queues: Vec<Vec<usize>> = groups
                .into_values()
                .map(|mut v| {
                    v.shuffle(&mut rng);
                    v.reverse(); // pop() draws in shuffled order
                    v
                })
                .collect();
            let n_queues = queues.len();
            let mut order = Vec::with_capacity(train.len());
            let mut turn = 0;
            while order.len() < train.len() {
                // next non-empty queue in round-robin order
                let mut hops = 0;
                while queues[turn % n_queues].is_empty() {
                    turn += 1;
                    hops += 1;
                    debug_assert!(hops <= n_queues);
                }
                order.push(queues[turn % n_queues].pop().unwrap());
                turn += 1;
            }
            order
        }
    };
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// A materialized mini-batch in the requested precision.
#[derive(Clone, Debug)]
pub struct Batch<S> {
    /// B×C×H×W
    pub images: Tensor<S>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

impl<S: Scalar> Batch<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Stacks the referenced samples into one batch tensor.
pub fn assemble_batch<S: Scalar>(samples: &[DomainSample], indices: &[usize]) -> Result<Batch<S>> {
    if indices.is_empty() {
        bail!(Config, "cannot assemble an empty batch");
    }
    let shape = samples[indices[0]].image.shape().to_vec();
    let per = samples[indices[0]].image.numel();
    let mut data = Vec::with_capacity(indices.len() * per);
    let mut labels = Vec::with_capacity(indices.len());
    let mut domains = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = samples
            .get(i)
            .ok_or_else(|| crate::error::err_fmt!(Index, "batch index {i} out of range"))?;
        if s.image.shape() != shape.as_slice() {
            bail!(Dim, "sample {i} shape {:?} differs from {:?}", s.image.shape(), shape);
        }
        data.extend(s.image.data().iter().map(|v| S::from_f32(*v).unwrap()));
        labels.push(s.class_label);
        domains.push(s.domain_label);
    }
    let mut full_shape = vec![indices.len()];
    full_shape.extend_from_slice(&shape);
    Ok(Batch {
        images: Tensor::from_vec(&full_shape, data)?,
        labels,
        domains,
    })
}
