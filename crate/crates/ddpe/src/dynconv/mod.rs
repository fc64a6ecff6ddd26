//! Dynamic convolution blocks: a shared static kernel plus an
//! instance-conditioned combination of asymmetric kernel templates.
//!
//! Each block owns a template bank and a meta-adjuster. The adjuster maps
//! pooled input features to a simplex row λ(x); the per-instance kernel is
//! `Θ(x) = Θ_s + Σ_m λ_m(x)·pad(Φ_m)`.

pub mod checkpoint;

use crate::error::{bail, Result};
use crate::tensor::{cast, Graph, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Epsilon inside the per-channel standardization.
pub const NORM_EPS: f64 = 1e-5;

/// The four legal template footprints, in bank order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplatePattern {
    /// dense K×K
    Dense,
    /// 1×1, padded onto the kernel center
    Point,
    /// K×1, padded onto the center column
    Column,
    /// 1×K, padded onto the center row
    Row,
}

impl TemplatePattern {
    pub const ORDER: [TemplatePattern; 4] = [
        TemplatePattern::Dense,
        TemplatePattern::Point,
        TemplatePattern::Column,
        TemplatePattern::Row,
    ];

    pub fn dims(self, k: usize) -> (usize, usize) {
        match self {
            TemplatePattern::Dense => (k, k),
            TemplatePattern::Point => (1, 1),
            TemplatePattern::Column => (k, 1),
            TemplatePattern::Row => (1, k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    /// number of kernel templates M (1..=4, default 4)
    pub templates: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub classes: usize,
    pub blocks: Vec<BlockConfig>,
    /// Optional hidden width for the meta-adjuster; `None` is the
    /// plain GAP → linear → softmax form.
    #[serde(default)]
    pub adjuster_hidden: Option<usize>,
}

impl NetworkConfig {
    /// Two dynamic blocks sized for 3×16×16 inputs.
    pub fn desk_scale(classes: usize) -> Self {
        NetworkConfig {
            input_channels: 3,
            input_height: 16,
            input_width: 16,
            classes,
            blocks: vec![
                BlockConfig { c_in: 3, c_out: 8, k: 3, templates: 4, stride: 1, pad: 1 },
                BlockConfig { c_in: 8, c_out: 16, k: 3, templates: 4, stride: 1, pad: 1 },
            ],
            adjuster_hidden: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            bail!(Config, "network needs at least one block");
        }
        if self.classes < 2 {
            bail!(Config, "classifier needs at least two classes");
        }
        if self.blocks[0].c_in != self.input_channels {
            bail!(
                Config,
                "first block expects {} channels but input has {}",
                self.blocks[0].c_in,
                self.input_channels
            );
        }
        let mut h = self.input_height;
        let mut w = self.input_width;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.k % 2 == 0 {
                bail!(Config, "block {i}: kernel size {} must be odd", b.k);
            }
            if b.templates == 0 || b.templates > TemplatePattern::ORDER.len() {
                bail!(Config, "block {i}: template count {} outside 1..=4", b.templates);
            }
            if b.stride == 0 {
                bail!(Config, "block {i}: stride must be positive");
            }
            if i > 0 && self.blocks[i - 1].c_out != b.c_in {
                bail!(
                    Config,
                    "block {i} expects {} channels but block {} emits {}",
                    b.c_in,
                    i - 1,
                    self.blocks[i - 1].c_out
                );
            }
            if h + 2 * b.pad < b.k || w + 2 * b.pad < b.k {
                bail!(Config, "block {i}: spatial extent {h}×{w} too small for K={}", b.k);
            }
            h = (h + 2 * b.pad - b.k) / b.stride + 1;
            w = (w + 2 * b.pad - b.k) / b.stride + 1;
            if h < 2 || w < 2 {
                bail!(Config, "block {i}: {h}×{w} output too small for 2×2 pooling");
            }
            h /= 2;
            w /= 2;
        }
        if let Some(hd) = self.adjuster_hidden {
            if hd == 0 {
                bail!(Config, "adjuster hidden width must be positive when set");
            }
        }
        Ok(())
    }

    /// Classifier input width: channels of the last block.
    pub fn feature_width(&self) -> usize {
        self.blocks.last().map(|b| b.c_out).unwrap_or(0)
    }

    /// Total λ width across blocks (Σ M per block).
    pub fn coefficient_width(&self) -> usize {
        self.blocks.iter().map(|b| b.templates).sum()
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        for b in &self.blocks {
            total += b.c_out * b.c_in * b.k * b.k; // static kernel
            for pattern in &TemplatePattern::ORDER[..b.templates] {
                let (th, tw) = pattern.dims(b.k);
                total += b.c_out * b.c_in * th * tw;
            }
            total += b.c_out; // conv bias
            match self.adjuster_hidden {
                Some(h) => total += b.c_in * h + h + h * b.templates + b.templates,
                None => total += b.c_in * b.templates + b.templates,
            }
        }
        total + self.feature_width() * self.classes + self.classes
    }

    /// Canonical textual form, embedded into checkpoints.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("network config serializes")
    }
}

/// The M asymmetric templates Φ_m plus the static kernel Θ_s of one block.
#[derive(Clone, Debug)]
pub struct KernelTemplateBank<S> {
    pub static_kernel: Tensor<S>,
    pub templates: Vec<Tensor<S>>,
    pub patterns: Vec<TemplatePattern>,
    pub k: usize,
}

/// GAP → (optional hidden layer) → linear → softmax, yielding λ(x).
#[derive(Clone, Debug)]
pub struct MetaAdjuster<S> {
    pub hidden: Option<(Tensor<S>, Tensor<S>)>,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct DynamicBlock<S> {
    pub cfg: BlockConfig,
    pub bank: KernelTemplateBank<S>,
    pub adjuster: MetaAdjuster<S>,
    /// Static per-output-channel shift, applied after normalization so it
    /// is not cancelled by the centering.
    pub conv_bias: Tensor<S>,
}

/// Stack of dynamic blocks plus a linear classifier head.
#[derive(Clone, Debug)]
pub struct Model<S> {
    pub config: NetworkConfig,
    pub blocks: Vec<DynamicBlock<S>>,
    pub classifier_weight: Tensor<S>,
    pub classifier_bias: Tensor<S>,
}

/// Graph handles for every registered parameter of a [`Model`].
pub struct BlockVars {
    pub static_kernel: Var,
    pub templates: Vec<Var>,
    pub conv_bias: Var,
    pub adj_hidden: Option<(Var, Var)>,
    pub adj_weight: Var,
    pub adj_bias: Var,
}

pub struct ModelVars {
    pub blocks: Vec<BlockVars>,
    pub classifier_weight: Var,
    pub classifier_bias: Var,
}

/// One forward pass over the whole network.
pub struct ForwardOutput {
    pub logits: Var,
    /// λ actually used per block (post-override/exchange).
    pub lambdas: Vec<Var>,
    /// pooled features feeding the classifier (B×C_out of the last block)
    pub pooled: Var,
}

/// Per-instance simplex coefficients captured from a forward pass.
#[derive(Clone, Debug)]
pub struct DynamicCoefficients<S> {
    pub values: Vec<S>,
    pub batch: usize,
    pub m: usize,
    /// provenance: which block and which forward pass produced the rows
    pub block: usize,
    pub pass: u64,
}

impl<S: Scalar> DynamicCoefficients<S> {
    pub fn from_graph(g: &Graph<S>, lambda: Var, block: usize, pass: u64) -> Result<Self> {
        let shape = g.shape(lambda);
        let (batch, m) = match shape {
            [b, m] => (*b, *m),
            _ => bail!(Dim, "coefficients must be B×M, got {shape:?}"),
        };
        Ok(DynamicCoefficients {
            values: g.value(lambda).to_vec(),
            batch,
            m,
            block,
            pass,
        })
    }

    /// Every row must be non-negative and sum to 1 within `tol`.
    pub fn check_simplex(&self, tol: f64) -> Result<()> {
        for (i, row) in self.values.chunks(self.m).enumerate() {
            let mut sum = 0.0;
            for v in row {
                let v = v.to_f64().unwrap();
                if v < -tol {
                    bail!(Numeric, "coefficient row {i} has negative entry {v}");
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                bail!(Numeric, "coefficient row {i} sums to {sum}");
            }
        }
        Ok(())
    }
}

fn kaiming_fill<S: Scalar>(t: &mut Tensor<S>, fan_in: usize, rng: &mut ChaCha8Rng) {
    let bound = (6.0 / fan_in as f64).sqrt();
    for v in t.data_mut() {
        *v = cast::<S>((rng.gen::<f64>() * 2.0 - 1.0) * bound);
    }
}

/// Builds a network with deterministic initialization: Kaiming-uniform
/// fan-in scaling for kernels and the classifier, zeros for the
/// meta-adjuster output layer so training starts at uniform λ (the pure
/// static network).
pub fn build_network<S: Scalar>(config: &NetworkConfig, seed: u64) -> Result<Model<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(config.blocks.len());
    for bc in &config.blocks {
        let mut static_kernel = Tensor::zeros(&[bc.c_out, bc.c_in, bc.k, bc.k]).with_grad();
        kaiming_fill(&mut static_kernel, bc.c_in * bc.k * bc.k, &mut rng);

        let patterns = TemplatePattern::ORDER[..bc.templates].to_vec();
        let mut templates = Vec::with_capacity(bc.templates);
        for pattern in &patterns {
            let (th, tw) = pattern.dims(bc.k);
            let mut t = Tensor::zeros(&[bc.c_out, bc.c_in, th, tw]).with_grad();
            kaiming_fill(&mut t, bc.c_in * th * tw, &mut rng);
            templates.push(t);
        }

        let conv_bias = Tensor::zeros(&[bc.c_out]).with_grad();

        let hidden = match config.adjuster_hidden {
            Some(h) => {
                // hidden layer gets real weights; the output layer below
                // stays zero so λ still starts uniform
                let mut hw = Tensor::zeros(&[bc.c_in, h]).with_grad();
                kaiming_fill(&mut hw, bc.c_in, &mut rng);
                Some((hw, Tensor::zeros(&[h]).with_grad()))
            }
            None => None,
        };
        let adj_in = config.adjuster_hidden.unwrap_or(bc.c_in);
        let adjuster = MetaAdjuster {
            hidden,
            weight: Tensor::zeros(&[adj_in, bc.templates]).with_grad(),
            bias: Tensor::zeros(&[bc.templates]).with_grad(),
        };

        blocks.push(DynamicBlock {
            cfg: bc.clone(),
            bank: KernelTemplateBank {
                static_kernel,
                templates,
                patterns,
                k: bc.k,
            },
            adjuster,
            conv_bias,
        });
    }

    let d = config.feature_width();
    let mut classifier_weight = Tensor::zeros(&[d, config.classes]).with_grad();
    kaiming_fill(&mut classifier_weight, d, &mut rng);
    let classifier_bias = Tensor::zeros(&[config.classes]).with_grad();

    Ok(Model {
        config: config.clone(),
        blocks,
        classifier_weight,
        classifier_bias,
    })
}

impl<S: Scalar> Model<S> {
    /// Parameters in checkpoint order, with their serialized names.
    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.static_kernel"), &b.bank.static_kernel));
            for (m, t) in b.bank.templates.iter().enumerate() {
                out.push((format!("block{i}.template{m}"), t));
            }
            out.push((format!("block{i}.conv_bias"), &b.conv_bias));
            if let Some((hw, hb)) = &b.adjuster.hidden {
                out.push((format!("block{i}.adjuster.hidden_weight"), hw));
                out.push((format!("block{i}.adjuster.hidden_bias"), hb));
            }
            out.push((format!("block{i}.adjuster.weight"), &b.adjuster.weight));
            out.push((format!("block{i}.adjuster.bias"), &b.adjuster.bias));
        }
        out.push(("classifier.weight".to_string(), &self.classifier_weight));
        out.push(("classifier.bias".to_string(), &self.classifier_bias));
        out
    }

    /// Mutable view of the parameters, in the same order as
    /// [`Model::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = Vec::new();
        for b in self.blocks.iter_mut() {
            out.push(&mut b.bank.static_kernel);
            for t in b.bank.templates.iter_mut() {
                out.push(t);
            }
            out.push(&mut b.conv_bias);
            if let Some((hw, hb)) = &mut b.adjuster.hidden {
                out.push(hw);
                out.push(hb);
            }
            out.push(&mut b.adjuster.weight);
            out.push(&mut b.adjuster.bias);
        }
        out.push(&mut self.classifier_weight);
        out.push(&mut self.classifier_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn convert<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| DynamicBlock {
                    cfg: b.cfg.clone(),
                    bank: KernelTemplateBank {
                        static_kernel: b.bank.static_kernel.convert(),
                        templates: b.bank.templates.iter().map(|t| t.convert()).collect(),
                        patterns: b.bank.patterns.clone(),
                        k: b.bank.k,
                    },
                    adjuster: MetaAdjuster {
                        hidden: b
                            .adjuster
                            .hidden
                            .as_ref()
                            .map(|(w, bs)| (w.convert(), bs.convert())),
                        weight: b.adjuster.weight.convert(),
                        bias: b.adjuster.bias.convert(),
                    },
                    conv_bias: b.conv_bias.convert(),
                })
                .collect(),
            classifier_weight: self.classifier_weight.convert(),
            classifier_bias: self.classifier_bias.convert(),
        }
    }

    /// Registers every parameter as a graph leaf.
    pub fn register(&self, g: &mut Graph<S>) -> Result<ModelVars> {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            blocks.push(BlockVars {
                static_kernel: g.input(&b.bank.static_kernel)?,
                templates: b
                    .bank
                    .templates
                    .iter()
                    .map(|t| g.input(t))
                    .collect::<Result<_>>()?,
                conv_bias: g.input(&b.conv_bias)?,
                adj_hidden: match &b.adjuster.hidden {
                    Some((w, bs)) => Some((g.input(w)?, g.input(bs)?)),
                    None => None,
                },
                adj_weight: g.input(&b.adjuster.weight)?,
                adj_bias: g.input(&b.adjuster.bias)?,
            });
        }
        Ok(ModelVars {
            blocks,
            classifier_weight: g.input(&self.classifier_weight)?,
            classifier_bias: g.input(&self.classifier_bias)?,
        })
    }

    /// After `Graph::backward`, adds each parameter's gradient into the
    /// corresponding tensor.
    pub fn collect_grads(&mut self, g: &Graph<S>, vars: &ModelVars) -> Result<()> {
        let handles = vars.flat();
        let mut params = self.params_mut();
        if handles.len() != params.len() {
            bail!(Contract, "parameter/handle count mismatch");
        }
        for (t, v) in params.iter_mut().zip(handles) {
            g.accumulate_grad_into(v, t)?;
        }
        Ok(())
    }

    /// λ(x) for one block: softmax(linear(GAP(features))).
    pub fn meta_adjust(&self, g: &mut Graph<S>, block: usize, x: Var, vars: &ModelVars) -> Result<Var> {
        let bv = &vars.blocks[block];
        let pooled = g.global_avg_pool(x)?;
        let pre = match bv.adj_hidden {
            Some((hw, hb)) => {
                let h = g.linear(pooled, hw, hb)?;
                g.relu(h)?
            }
            None => pooled,
        };
        let z = g.linear(pre, bv.adj_weight, bv.adj_bias)?;
        g.softmax(z)
    }

    /// conv → channel norm → bias → ReLU with the given per-instance kernel.
    fn block_apply(&self, g: &mut Graph<S>, block: usize, x: Var, vars: &ModelVars, kernels: Var) -> Result<Var> {
        let cfg = &self.blocks[block].cfg;
        let y = g.conv2d_per_instance(x, kernels, cfg.stride, cfg.pad)?;
        let y = g.channel_norm(y, NORM_EPS)?;
        let y = g.add_channel_bias(y, vars.blocks[block].conv_bias)?;
        g.relu(y)
    }

    /// Pads this block's templates and assembles per-instance kernels for λ.
    pub fn assemble_block_kernel(&self, g: &mut Graph<S>, block: usize, lambda: Var, vars: &ModelVars) -> Result<Var> {
        let bv = &vars.blocks[block];
        let k = self.blocks[block].cfg.k;
        let padded: Vec<Var> = bv
            .templates
            .iter()
            .map(|t| g.pad_template(*t, k))
            .collect::<Result<_>>()?;
        g.assemble_kernel(lambda, bv.static_kernel, &padded)
    }

    /// One dynamic block without pooling. Returns the features and the λ
    /// actually used (the override when given, else the adjusted one).
    pub fn block_forward(
        &self,
        g: &mut Graph<S>,
        block: usize,
        x: Var,
        vars: &ModelVars,
        override_lambda: Option<Var>,
    ) -> Result<(Var, Var)> {
        let lambda = match override_lambda {
            Some(l) => {
                let b = g.shape(x)[0];
                let m = self.blocks[block].cfg.templates;
                if g.shape(l) != [b, m] {
                    bail!(
                        Dim,
                        "override coefficients shape {:?} does not match {b}×{m}",
                        g.shape(l)
                    );
                }
                l
            }
            None => self.meta_adjust(g, block, x, vars)?,
        };
        let kernels = self.assemble_block_kernel(g, block, lambda, vars)?;
        let features = self.block_apply(g, block, x, vars, kernels)?;
        Ok((features, lambda))
    }

    /// The same block pipeline convolving with Θ_s broadcast to every
    /// instance: the dynamic component is omitted entirely.
    pub fn block_forward_static(&self, g: &mut Graph<S>, block: usize, x: Var, vars: &ModelVars) -> Result<Var> {
        let batch = g.shape(x)[0];
        let kernels = g.broadcast_batch(vars.blocks[block].static_kernel, batch)?;
        self.block_apply(g, block, x, vars, kernels)
    }

    /// Full forward pass. `tweak` may replace each block's λ (identity for
    /// the plain pass; the exchange operators during perturbed passes).
    pub fn forward_with<F>(&self, g: &mut Graph<S>, x: Var, vars: &ModelVars, mut tweak: F) -> Result<ForwardOutput>
    where
        F: FnMut(&mut Graph<S>, usize, Var) -> Result<Var>,
    {
        let mut cur = x;
        let mut lambdas = Vec::with_capacity(self.blocks.len());
        for i in 0..self.blocks.len() {
            let lambda = self.meta_adjust(g, i, cur, vars)?;
            let lambda = tweak(g, i, lambda)?;
            let kernels = self.assemble_block_kernel(g, i, lambda, vars)?;
            let feat = self.block_apply(g, i, cur, vars, kernels)?;
            cur = g.avg_pool2(feat)?;
            lambdas.push(lambda);
        }
        let pooled = g.global_avg_pool(cur)?;
        let logits = g.linear(pooled, vars.classifier_weight, vars.classifier_bias)?;
        Ok(ForwardOutput {
            logits,
            lambdas,
            pooled,
        })
    }

    pub fn forward(&self, g: &mut Graph<S>, x: Var, vars: &ModelVars) -> Result<ForwardOutput> {
        self.forward_with(g, x, vars, |_, _, l| Ok(l))
    }

    /// Forward pass with the last block running static-only; earlier
    /// blocks run normally. Returns the pooled features (B×C_out).
    pub fn forward_static_tail(&self, g: &mut Graph<S>, x: Var, vars: &ModelVars) -> Result<Var> {
        let last = self.blocks.len() - 1;
        let mut cur = x;
        for i in 0..last {
            let (feat, _) = self.block_forward(g, i, cur, vars, None)?;
            cur = g.avg_pool2(feat)?;
        }
        let feat = self.block_forward_static(g, last, cur, vars)?;
        let pooled = g.avg_pool2(feat)?;
        g.global_avg_pool(pooled)
    }
}

impl ModelVars {
    /// Handles in the same order as [`Model::named_params`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(b.static_kernel);
            out.extend_from_slice(&b.templates);
            out.push(b.conv_bias);
            if let Some((w, bs)) = b.adj_hidden {
                out.push(w);
                out.push(bs);
            }
            out.push(b.adj_weight);
            out.push(b.adj_bias);
        }
        out.push(self.classifier_weight);
        out.push(self.classifier_bias);
        out
    }
}
