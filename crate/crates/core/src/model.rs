//! Model assembly: configuration, parameter allocation, geometry planning
//! and the tape-based forward pass of the 2D classification network.

use crate::activations::{fit_poly_relu, Activation, NormInner};
use crate::autodiff::{BnUse, NodeId, ParamId, ParamStore, Tape};
use crate::conv2d::{
    build_conv_plan, build_pool_plan_from, crop_indices_from, BnStats, ConvPlan, PoolPlan,
    QLayout, RingSpec,
};
use crate::error::{Error, Result};
use crate::fourier::FeatureMap;
use crate::scalar::Scalar;
use rand::Rng;
use std::sync::Arc;

/// Serializable activation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    LeakyRelu,
    Silu,
    Elu,
    Tanh,
    Sigmoid,
    Poly2,
    Poly4,
    CRelu,
    CSigmoid,
}

impl ActivationKind {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "relu" => Self::Relu,
            "leaky_relu" | "leakyrelu" => Self::LeakyRelu,
            "silu" => Self::Silu,
            "elu" => Self::Elu,
            "tanh" => Self::Tanh,
            "sigmoid" => Self::Sigmoid,
            "poly2" => Self::Poly2,
            "poly4" => Self::Poly4,
            "c_relu" | "crelu" => Self::CRelu,
            "c_sigmoid" | "csigmoid" => Self::CSigmoid,
            other => {
                return Err(Error::Config(format!("unknown activation '{other}'")));
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Relu => "relu",
            Self::LeakyRelu => "leaky_relu",
            Self::Silu => "silu",
            Self::Elu => "elu",
            Self::Tanh => "tanh",
            Self::Sigmoid => "sigmoid",
            Self::Poly2 => "poly2",
            Self::Poly4 => "poly4",
            Self::CRelu => "c_relu",
            Self::CSigmoid => "c_sigmoid",
        }
    }

    /// Instantiate the activation; polynomial coefficients come from the
    /// in-repo least-squares ReLU fit on [-5, 5].
    pub fn build<T: Scalar>(&self) -> Result<Activation<T>> {
        Ok(match self {
            Self::Relu => Activation::Relu,
            Self::LeakyRelu => Activation::LeakyRelu(T::of(0.01)),
            Self::Silu => Activation::Silu,
            Self::Elu => Activation::Elu,
            Self::Tanh => Activation::Tanh,
            Self::Sigmoid => Activation::Sigmoid,
            Self::Poly2 => Activation::Poly(fit_poly_relu(2, 5.0)?),
            Self::Poly4 => Activation::Poly(fit_poly_relu(4, 5.0)?),
            Self::CRelu => Activation::NormOnly(NormInner::Relu),
            Self::CSigmoid => Activation::NormOnly(NormInner::Sigmoid),
        })
    }

    pub fn is_poly(&self) -> bool {
        matches!(self, Self::Poly2 | Self::Poly4)
    }

    /// Pad that makes the FFT route exact for the polynomial activations.
    pub fn exact_pad(&self, max_freq: usize) -> Option<usize> {
        match self {
            Self::Poly2 => Some(crate::activations::minimal_exact_pad(max_freq, 2)),
            Self::Poly4 => Some(crate::activations::minimal_exact_pad(max_freq, 4)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduce {
    Crop(usize),
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvariantMap {
    Norm,
    Conv2Triv,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvLayerConfig {
    pub channels: usize,
    /// output coefficient count C = 2K+1 (odd)
    pub coeffs: usize,
    pub rings: Vec<RingSpec>,
    pub reduce: Option<Reduce>,
}

/// Full model description; serializable as JSON for the CLI --config flag.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub conv_layers: Vec<ConvLayerConfig>,
    pub activation: ActivationKind,
    pub fft_pad: usize,
    pub invariant: InvariantMap,
    pub linear_widths: Vec<usize>,
    pub dropout: f64,
    /// ℓ1 cap applied per channel before polynomial activations
    pub clip_cap: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_layers.is_empty() || self.linear_widths.is_empty() {
            return Err(Error::Config("need conv layers and linear widths".into()));
        }
        for l in &self.conv_layers {
            if l.coeffs % 2 == 0 {
                return Err(Error::Config(format!(
                    "coefficient count must be odd (C = 2K+1), got {}",
                    l.coeffs
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// The rotated-digits architecture: 6 ring-filter convolution layers with
    /// crop/pool reductions, then 3 linear layers. `width_scale` shrinks the
    /// channel and hidden widths (desk-scale runs use 0.5); `final_width`
    /// sets the last linear layer (40 as printed in the reference stack,
    /// commonly overridden to the 10 classes).
    pub fn mnist_stack(
        coeffs: usize,
        pad: usize,
        activation: ActivationKind,
        invariant: InvariantMap,
        final_width: usize,
        width_scale: f64,
    ) -> Self {
        let w = |c: usize| ((c as f64 * width_scale).round() as usize).max(1);
        let rings_a = vec![
            RingSpec::new(0.0, 0.005, 0),
            RingSpec::new(1.0, 0.6, 2),
            RingSpec::new(2.0, 0.6, 3),
            RingSpec::new(3.0, 0.6, 6),
            RingSpec::new(4.0, 0.4, 2),
        ];
        let rings_b = vec![
            RingSpec::new(0.0, 0.005, 0),
            RingSpec::new(1.0, 0.6, 2),
            RingSpec::new(2.0, 0.6, 3),
            RingSpec::new(3.0, 0.4, 2),
        ];
        let rings_c = vec![
            RingSpec::new(0.0, 0.005, 0),
            RingSpec::new(1.0, 0.6, 2),
            RingSpec::new(2.0, 0.4, 2),
        ];
        let final_coeffs = match invariant {
            InvariantMap::Norm => coeffs,
            InvariantMap::Conv2Triv => 1,
        };
        ModelConfig {
            conv_layers: vec![
                ConvLayerConfig {
                    channels: w(24),
                    coeffs,
                    rings: rings_a,
                    reduce: Some(Reduce::Crop(4)),
                },
                ConvLayerConfig {
                    channels: w(32),
                    coeffs,
                    rings: rings_b.clone(),
                    reduce: Some(Reduce::Pool),
                },
                ConvLayerConfig {
                    channels: w(36),
                    coeffs,
                    rings: rings_b.clone(),
                    reduce: None,
                },
                ConvLayerConfig {
                    channels: w(36),
                    coeffs,
                    rings: rings_b.clone(),
                    reduce: Some(Reduce::Pool),
                },
                ConvLayerConfig {
                    channels: w(64),
                    coeffs,
                    rings: rings_b,
                    reduce: None,
                },
                ConvLayerConfig {
                    channels: w(96),
                    coeffs: final_coeffs,
                    rings: rings_c,
                    reduce: Some(Reduce::Crop(2)),
                },
            ],
            activation,
            fft_pad: pad,
            invariant,
            linear_widths: vec![w(96), w(96), final_width],
            dropout: 0.3,
            clip_cap: 5.0,
            bn_eps: 1e-8,
        }
    }

    /// Full-width reference stack (printed final linear width 40).
    pub fn mnist_full(activation: ActivationKind, pad: usize, invariant: InvariantMap) -> Self {
        Self::mnist_stack(9, pad, activation, invariant, 40, 1.0)
    }

    /// Desk-scale stack: channels halved, 10-class output.
    pub fn mnist_desk(activation: ActivationKind, pad: usize) -> Self {
        Self::mnist_stack(9, pad, activation, InvariantMap::Norm, 10, 0.5)
    }
}

// ---------------------------------------------------------------------------
// Assembled model
// ---------------------------------------------------------------------------

/// Parameter handles and normalization state for one configured network.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub layouts: Vec<Arc<QLayout>>,
    conv_pids: Vec<ParamId>,
    conv_bn_pids: Vec<(ParamId, ParamId)>,
    act_bias_pids: Vec<Option<ParamId>>,
    linear_pids: Vec<(ParamId, ParamId)>,
    head_bn_pids: Vec<(ParamId, ParamId)>,
    /// running statistics per BN layer: conv BNs first, then head BNs
    pub bn_stats: Vec<BnStats<T>>,
}

/// Precomputed geometry for one input point layout.
#[derive(Debug)]
pub struct GeometrySet<T> {
    pub stages: Vec<StageGeometry<T>>,
    /// points entering the invariant map
    pub final_points: usize,
}

#[derive(Debug)]
pub struct StageGeometry<T> {
    pub plan: Arc<ConvPlan<T>>,
    pub pool: Option<Arc<PoolPlan<T>>>,
}

/// BN statistics source during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// statistics of the current batch (training / statistics pass)
    Batch,
    /// the model's stored statistics (evaluation)
    Running,
}

/// Handles into the tape for one forward pass.
pub struct ForwardPass {
    pub logits: NodeId,
    /// post-activation feature node per conv layer
    pub taps: Vec<NodeId>,
    /// invariant-map output
    pub invariant: NodeId,
    /// BN nodes in model order (conv then head)
    pub bn_nodes: Vec<NodeId>,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut layouts = Vec::new();
        let mut conv_pids = Vec::new();
        let mut conv_bn_pids = Vec::new();
        let mut act_bias_pids = Vec::new();
        let mut bn_stats = Vec::new();

        let norm_only = matches!(
            config.activation,
            ActivationKind::CRelu | ActivationKind::CSigmoid
        );

        let mut k_in = 0usize;
        let mut d_in = 1usize;
        for (i, layer) in config.conv_layers.iter().enumerate() {
            let k_out = (layer.coeffs - 1) / 2;
            let spec = crate::conv2d::RingFilterSpec::new(layer.rings.clone())?;
            let layout = QLayout::new(spec, k_in, k_out, d_in, layer.channels);
            let raw = layout.init_raw::<T, _>(rng);
            conv_pids.push(store.add(format!("conv{}.q", i + 1), raw));
            let g = store.add(
                format!("conv{}.bn.gamma", i + 1),
                vec![T::one(); layer.channels],
            );
            let b = store.add(
                format!("conv{}.bn.beta", i + 1),
                vec![T::zero(); layer.channels],
            );
            conv_bn_pids.push((g, b));
            bn_stats.push(BnStats::identity(layer.channels));
            act_bias_pids.push(if norm_only {
                Some(store.add(
                    format!("conv{}.act.bias", i + 1),
                    vec![T::zero(); layer.channels],
                ))
            } else {
                None
            });
            layouts.push(Arc::new(layout));
            k_in = k_out;
            d_in = layer.channels;
        }

        // invariant map output width feeds the first linear layer
        let last = config.conv_layers.last().unwrap();
        let feat_width = match config.invariant {
            InvariantMap::Norm => last.channels * ((last.coeffs - 1) / 2 + 1),
            InvariantMap::Conv2Triv => last.channels,
        };

        let mut linear_pids = Vec::new();
        let mut head_bn_pids = Vec::new();
        let mut fan_in = feat_width;
        for (i, &width) in config.linear_widths.iter().enumerate() {
            let sigma = T::of((2.0 / fan_in as f64).sqrt());
            let w: Vec<T> = (0..width * fan_in)
                .map(|_| T::sample_normal(rng) * sigma)
                .collect();
            let pw = store.add(format!("linear{}.w", i + 1), w);
            let pb = store.add(format!("linear{}.b", i + 1), vec![T::zero(); width]);
            linear_pids.push((pw, pb));
            if i + 1 < config.linear_widths.len() {
                let g = store.add(format!("linear{}.bn.gamma", i + 1), vec![T::one(); width]);
                let b = store.add(format!("linear{}.bn.beta", i + 1), vec![T::zero(); width]);
                head_bn_pids.push((g, b));
                bn_stats.push(BnStats::identity(width));
            }
            fan_in = width;
        }

        Ok(Self {
            config,
            store,
            layouts,
            conv_pids,
            conv_bn_pids,
            act_bias_pids,
            linear_pids,
            head_bn_pids,
            bn_stats,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.total_len()
    }

    pub fn num_classes(&self) -> usize {
        *self.config.linear_widths.last().unwrap()
    }

    /// Walk the geometry through the layer stack once per input layout:
    /// crops restrict the convolution's output points, pools follow it.
    pub fn plan_geometry(
        &self,
        coords: &[[T; 2]],
        lattice: Option<&[[i64; 2]]>,
    ) -> Result<GeometrySet<T>> {
        let mut cur_coords: Vec<[T; 2]> = coords.to_vec();
        let mut cur_lattice: Option<Vec<[i64; 2]>> = lattice.map(|l| l.to_vec());
        let mut stages = Vec::new();
        for (i, layer) in self.config.conv_layers.iter().enumerate() {
            let out_coords: Vec<[T; 2]>;
            let out_lattice: Option<Vec<[i64; 2]>>;
            match layer.reduce {
                Some(Reduce::Crop(margin)) => {
                    let keep = crop_indices_from(&cur_coords, cur_lattice.as_deref(), margin);
                    if keep.is_empty() {
                        return Err(Error::Config(format!(
                            "crop({margin}) leaves no points at layer {}",
                            i + 1
                        )));
                    }
                    out_coords = keep.iter().map(|&j| cur_coords[j]).collect();
                    out_lattice = cur_lattice
                        .as_ref()
                        .map(|l| keep.iter().map(|&j| l[j]).collect());
                }
                _ => {
                    out_coords = cur_coords.clone();
                    out_lattice = cur_lattice.clone();
                }
            }
            let plan = Arc::new(build_conv_plan(&cur_coords, &out_coords, &self.layouts[i]));
            let pool = if matches!(layer.reduce, Some(Reduce::Pool)) {
                let p = build_pool_plan_from(&out_coords, out_lattice.as_deref())?;
                cur_coords = p.out_coords.clone();
                cur_lattice = Some(p.out_lattice.clone());
                Some(Arc::new(p))
            } else {
                cur_coords = out_coords;
                cur_lattice = out_lattice;
                None
            };
            stages.push(StageGeometry { plan, pool });
        }
        Ok(GeometrySet {
            final_points: cur_coords.len(),
            stages,
        })
    }

    /// Forward pass on the tape. `dropout_rng` enables training-mode dropout;
    /// pass `None` for evaluation and measurement runs.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        input: FeatureMap<T>,
        geom: &GeometrySet<T>,
        bn_mode: BnMode,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<ForwardPass> {
        let activation: Activation<T> = self.config.activation.build()?;
        let mut taps = Vec::new();
        let mut bn_nodes = Vec::new();
        let mut node = tape.leaf_features(input);
        let mut bn_index = 0usize;

        for i in 0..self.config.conv_layers.len() {
            node = tape.conv2d(
                node,
                &self.store,
                self.conv_pids[i],
                geom.stages[i].plan.clone(),
                self.layouts[i].clone(),
            )?;
            if let Some(pool) = &geom.stages[i].pool {
                node = tape.avg_pool(node, pool.clone());
            }
            let usage = match bn_mode {
                BnMode::Batch => BnUse::Batch,
                BnMode::Running => BnUse::Fixed(self.bn_stats[bn_index].clone()),
            };
            let (g, b) = self.conv_bn_pids[i];
            node = tape.fourier_bn(node, &self.store, g, b, usage, T::of(self.config.bn_eps));
            bn_nodes.push(node);
            bn_index += 1;

            node = match &activation {
                Activation::NormOnly(inner) => {
                    let pid = self.act_bias_pids[i].expect("norm-only layers carry a bias");
                    tape.norm_activation(node, &self.store, *inner, pid)
                }
                Activation::Poly(_) => {
                    let clipped = tape.clip_l1(node, T::of(self.config.clip_cap));
                    tape.fft_activation(clipped, activation.clone(), self.config.fft_pad)?
                }
                other => tape.fft_activation(node, other.clone(), self.config.fft_pad)?,
            };
            taps.push(node);
        }

        let invariant = match self.config.invariant {
            InvariantMap::Norm => tape.norm_map(node),
            InvariantMap::Conv2Triv => tape.conv2triv(node),
        };

        let head_act = self.head_activation()?;
        let p = T::of(self.config.dropout);
        let mut real = invariant;
        for (i, &width) in self.config.linear_widths.iter().enumerate() {
            if let Some(rng) = dropout_rng.as_deref_mut() {
                if self.config.dropout > 0.0 {
                    real = tape.dropout(real, p, rng);
                }
            }
            let (pw, pb) = self.linear_pids[i];
            real = tape.linear(real, &self.store, pw, pb, width);
            if i + 1 < self.config.linear_widths.len() {
                let usage = match bn_mode {
                    BnMode::Batch => BnUse::Batch,
                    BnMode::Running => BnUse::Fixed(self.bn_stats[bn_index].clone()),
                };
                let (g, b) = self.head_bn_pids[i];
                real = tape.real_bn(real, &self.store, g, b, usage, T::of(self.config.bn_eps));
                bn_nodes.push(real);
                bn_index += 1;
                real = tape.pointwise(real, head_act.clone());
            }
        }

        Ok(ForwardPass {
            logits: real,
            taps,
            invariant,
            bn_nodes,
        })
    }

    /// The scalar activation used after linear layers: the inner function for
    /// norm-only choices, the pointwise function itself otherwise.
    pub fn head_activation(&self) -> Result<Activation<T>> {
        Ok(match self.config.activation {
            ActivationKind::CRelu => Activation::Relu,
            ActivationKind::CSigmoid => Activation::Sigmoid,
            other => other.build()?,
        })
    }

    /// Replace the stored normalization statistics (index order: conv BNs,
    /// then head BNs).
    pub fn set_bn_stats(&mut self, stats: Vec<BnStats<T>>) {
        assert_eq!(stats.len(), self.bn_stats.len());
        self.bn_stats = stats;
    }

    /// Harvest the statistics every BN node of a forward pass used.
    pub fn bn_stats_from_pass(&self, tape: &Tape<T>, pass: &ForwardPass) -> Vec<BnStats<T>> {
        let n_conv = self.config.conv_layers.len();
        pass.bn_nodes
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                if i < n_conv {
                    tape.fourier_bn_stats_used(id)
                        .expect("conv BN node")
                        .clone()
                } else {
                    tape.real_bn_stats_used(id).expect("head BN node")
                }
            })
            .collect()
    }
}
