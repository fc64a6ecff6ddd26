//! Browser bindings for the interactive demo page.
//!
//! Three operations are exposed: rendering synthetic domain samples,
//! assembling a dynamic kernel from slider coefficients, and stepping a
//! small training run with live coefficient embeddings.

use ddpe::analysis::{extract_coefficients, pca_embed};
use ddpe::data::{generate_synthetic_domains, leave_one_domain_out_split, DatasetSplit, SyntheticSpec};
use ddpe::dynconv::{build_network, Model, NetworkConfig};
use ddpe::harness::{evaluate, train, SwaConfig, TrainConfig};
use ddpe::perturb::{PerturbMode, PerturbationPlan};
use ddpe::rng::{derive, stream_rng, STREAM_DATA, STREAM_INIT};
use ddpe::tensor::{Graph, Tensor};
use rand::Rng;
use wasm_bindgen::prelude::*;

fn err_to_js(e: ddpe::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// RGBA pixels (row-major, `size·size·4` bytes) of one synthetic sample.
#[wasm_bindgen]
pub fn render_sample(class: usize, domain: usize, seed: u64, size: usize) -> Result<Vec<u8>, JsValue> {
    let mut rng = stream_rng(seed, STREAM_DATA);
    let mask = ddpe::data::render_shape(class, size, &mut rng).map_err(err_to_js)?;
    let styled = ddpe::data::apply_style(domain, &mask, size, &mut rng).map_err(err_to_js)?;
    let hw = size * size;
    let mut out = Vec::with_capacity(hw * 4);
    for i in 0..hw {
        for c in 0..3 {
            out.push((styled[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    Ok(out)
}

/// A single-channel template bank for the kernel assembly explorer.
#[wasm_bindgen]
pub struct KernelExplorer {
    k: usize,
    static_kernel: Vec<f32>,
    templates: Vec<Vec<f32>>, // padded to k×k
    sample: Vec<f32>,         // grayscale probe image
    sample_size: usize,
}

#[wasm_bindgen]
impl KernelExplorer {
    /// Draws a random K×K bank (one channel) and a probe shape image.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, k: usize) -> Result<KernelExplorer, JsValue> {
        if k == 0 || k.is_multiple_of(2) {
            return Err(JsValue::from_str("kernel size must be odd"));
        }
        let mut rng = stream_rng(seed, STREAM_INIT);
        let mut draw = |n: usize, fan: usize| -> Vec<f32> {
            let bound = (6.0 / fan as f64).sqrt();
            (0..n)
                .map(|_| ((rng.gen::<f64>() * 2.0 - 1.0) * bound) as f32)
                .collect()
        };
        let static_kernel = draw(k * k, k * k);
        let dense = draw(k * k, k * k);
        let point = draw(1, 1);
        let col = draw(k, k);
        let row = draw(k, k);

        let mid = k / 2;
        let mut pad_point = vec![0.0f32; k * k];
        pad_point[mid * k + mid] = point[0];
        let mut pad_col = vec![0.0f32; k * k];
        for y in 0..k {
            pad_col[y * k + mid] = col[y];
        }
        let mut pad_row = vec![0.0f32; k * k];
        for x in 0..k {
            pad_row[mid * k + x] = row[x];
        }

        let size = 24;
        let mut srng = stream_rng(seed, STREAM_DATA);
        let sample = ddpe::data::render_shape(1, size, &mut srng).map_err(err_to_js)?;

        Ok(KernelExplorer {
            k,
            static_kernel,
            templates: vec![dense, pad_point, pad_col, pad_row],
            sample,
            sample_size: size,
        })
    }

    /// Assembles the per-instance kernel (static + coefficient-weighted
    /// templates, coefficients normalized onto the simplex) and convolves
    /// the probe image. Returns JSON with kernels, λ, and the response map.
    pub fn assemble(&self, l0: f64, l1: f64, l2: f64, l3: f64) -> Result<String, JsValue> {
        let raw = [l0.max(0.0), l1.max(0.0), l2.max(0.0), l3.max(0.0)];
        let total: f64 = raw.iter().sum();
        let lambda: Vec<f64> = if total > 0.0 {
            raw.iter().map(|v| v / total).collect()
        } else {
            vec![0.25; 4]
        };

        let kk = self.k * self.k;
        let mut assembled = self.static_kernel.clone();
        for (m, t) in self.templates.iter().enumerate() {
            for (a, v) in assembled.iter_mut().zip(t) {
                *a += lambda[m] as f32 * v;
            }
        }

        // convolve the probe image with the assembled kernel
        let size = self.sample_size;
        let image = Tensor::from_vec(&[1, 1, size, size], self.sample.clone()).map_err(err_to_js)?;
        let kernel = Tensor::from_vec(&[1, 1, 1, self.k, self.k], assembled.clone()).map_err(err_to_js)?;
        let mut g = Graph::<f32>::new();
        let x = g.input(&image).map_err(err_to_js)?;
        let kv = g.input(&kernel).map_err(err_to_js)?;
        let y = g
            .conv2d_per_instance(x, kv, 1, self.k / 2)
            .map_err(err_to_js)?;
        let response: Vec<f32> = g.value(y).to_vec();

        let payload = serde_json::json!({
            "k": self.k,
            "lambda": lambda,
            "static": self.static_kernel,
            "templates": self.templates,
            "assembled": assembled[..kk].to_vec(),
            "sample": self.sample,
            "sample_size": size,
            "response": response,
        });
        Ok(payload.to_string())
    }
}

/// A small leave-one-domain-out training run that the page steps
/// interactively.
#[wasm_bindgen]
pub struct MiniTrainer {
    model: Model<f32>,
    split: DatasetSplit,
    config: TrainConfig,
    epochs_done: usize,
}

#[wasm_bindgen]
impl MiniTrainer {
    /// `mode`: "none", "cross_instance", "cross_kernel", or "mix".
    #[wasm_bindgen(constructor)]
    pub fn new(mode: &str, seed: u64) -> Result<MiniTrainer, JsValue> {
        let mode = match mode {
            "none" => PerturbMode::None,
            "cross_instance" => PerturbMode::CrossInstance,
            "cross_kernel" => PerturbMode::CrossKernel,
            "mix" => PerturbMode::Mix,
            other => return Err(JsValue::from_str(&format!("unknown mode {other}"))),
        };
        let spec = SyntheticSpec {
            per_cell: 10,
            noise: 0.05,
            ..SyntheticSpec::default()
        };
        let samples = generate_synthetic_domains(&spec, derive(seed, STREAM_DATA)).map_err(err_to_js)?;
        let split = leave_one_domain_out_split(&samples, 3).map_err(err_to_js)?;
        let net = NetworkConfig {
            input_channels: 3,
            input_height: 16,
            input_width: 16,
            classes: 4,
            blocks: vec![
                ddpe::dynconv::BlockConfig { c_in: 3, c_out: 6, k: 3, templates: 4, stride: 1, pad: 1 },
                ddpe::dynconv::BlockConfig { c_in: 6, c_out: 8, k: 3, templates: 4, stride: 1, pad: 1 },
            ],
            adjuster_hidden: None,
        };
        let model = build_network::<f32>(&net, derive(seed, STREAM_INIT)).map_err(err_to_js)?;
        let config = TrainConfig {
            epochs: 1,
            batch_size: 16,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            swa: SwaConfig { enabled: false, start_fraction: 0.5 },
            plan: PerturbationPlan { mode, ..PerturbationPlan::default() },
            sampler: ddpe::data::SamplerKind::Shuffle,
            seed,
        };
        Ok(MiniTrainer {
            model,
            split,
            config,
            epochs_done: 0,
        })
    }

    /// Trains `n` more epochs; returns the appended history as JSON
    /// `[{epoch, ce_clean, ce_perturbed, train_acc}]`.
    ///
    /// The cosine schedule restarts per call, which suits a demo that
    /// trains in short interactive bursts.
    pub fn step_epochs(&mut self, n: usize) -> Result<String, JsValue> {
        let mut config = self.config.clone();
        config.epochs = n.max(1);
        config.seed = derive(self.config.seed, self.epochs_done as u64);
        let placeholder = build_network(&self.model.config, 0).map_err(err_to_js)?;
        let model = std::mem::replace(&mut self.model, placeholder);
        let (model, _, history) = train(model, &self.split, &config).map_err(err_to_js)?;
        self.model = model;
        let mut out = Vec::new();
        for e in &history.epochs {
            out.push(serde_json::json!({
                "epoch": self.epochs_done + e.epoch,
                "ce_clean": e.ce_clean,
                "ce_perturbed": e.ce_perturbed,
                "train_acc": e.train_acc,
            }));
        }
        self.epochs_done += config.epochs;
        Ok(serde_json::Value::Array(out).to_string())
    }

    /// Held-out (unseen-domain) accuracy of the current weights.
    pub fn target_accuracy(&self) -> Result<f64, JsValue> {
        evaluate(&self.model, &self.split.test).map_err(err_to_js)
    }

    /// 2-D PCA of the dynamic coefficients over the full dataset as JSON
    /// `[{x, y, domain, class}]`.
    pub fn coefficient_embedding(&self) -> Result<String, JsValue> {
        let mut all = self.split.train.clone();
        all.extend(self.split.test.iter().cloned());
        let fm = extract_coefficients(&self.model, &all, "all").map_err(err_to_js)?;
        let e = pca_embed(&fm, 2).map_err(err_to_js)?;
        let points: Vec<serde_json::Value> = (0..fm.n)
            .map(|i| {
                serde_json::json!({
                    "x": e.coords[i * 2],
                    "y": e.coords[i * 2 + 1],
                    "domain": fm.domains[i],
                    "class": fm.classes[i],
                })
            })
            .collect();
        Ok(serde_json::Value::Array(points).to_string())
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }
}
