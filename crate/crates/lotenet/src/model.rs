//! The full LoTeNet model.
//!
//! Per layer: squeeze with stride `k` (non-overlapping `k^S` neighborhoods
//! move into the feature axis), one MPS block per patch contracting the
//! patch's sites into a virtual-dimension vector, batch normalization, and a
//! reshape back into image space at reduced resolution. After `L - 1` such
//! layers a single final MPS block contracts the remaining grid into the
//! class logits. Without batch norm the whole pipeline is multilinear in the
//! first layer's per-site feature vectors; there are no nonlinear
//! activations anywhere.
//!
//! Per-layer forward cost is `O(N_l * k^S * d * beta^3)` for `N_l` patches,
//! so total cost stays linear in the pixel count at fixed `beta` while the
//! spatial resolution shrinks geometrically across layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, ParamId, Tape};
use crate::feature_map::{apply_map, FeatureMapError, FeatureMapKind};
use crate::mps::{ContractionScheme, MpsBlock, MpsError};
use crate::scalar::Real;
use crate::tensor::{Tensor, TensorError};

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum: `running = (1 - m) * running + m * batch`.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match configured shape {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("spatial extent {extent} is not divisible by stride {stride}")]
    Indivisible { extent: usize, stride: usize },
    #[error("site count {got} does not fill grid {grid:?}")]
    GridMismatch { grid: Vec<usize>, got: usize },
    #[error("feature dimension {feat} does not split into {k}^{rank} patch cells")]
    FeatureSplit { feat: usize, k: usize, rank: usize },
    #[error("layer {layer}: {source}")]
    AtLayer { layer: usize, source: MpsError },
    #[error("layer {layer}: {source}")]
    TapeAtLayer {
        layer: usize,
        source: AutodiffError,
    },
    #[error(transparent)]
    FeatureMap(#[from] FeatureMapError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Squeeze parameters: stride `k` applied along each of `rank` spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SqueezeSpec {
    pub stride: usize,
    pub rank: usize,
}

impl SqueezeSpec {
    /// Sites produced from `n_pixels` inputs.
    pub fn site_count(&self, n_pixels: usize) -> usize {
        n_pixels / self.stride.pow(self.rank as u32)
    }

    /// Feature dimension produced from `channels` inputs.
    pub fn feature_dim(&self, channels: usize) -> usize {
        channels * self.stride.pow(self.rank as u32)
    }
}

/// Architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct LoTeNetConfig {
    /// Number of layers `L`, counting the final MPS block.
    pub layers: usize,
    /// Squeeze strides for layers `1..L-1`.
    pub strides: Vec<usize>,
    pub bond_dim: usize,
    /// Output dimension of intermediate blocks; equals `bond_dim` by default.
    pub virtual_dim: usize,
    pub feature_map: FeatureMapKind,
    pub n_classes: usize,
    pub spatial_rank: usize,
    /// Spatial extents followed by the channel count.
    pub input_shape: Vec<usize>,
    pub share_weights_per_layer: bool,
    pub batch_norm: bool,
    pub init_std: f64,
    pub seed: u64,
}

impl LoTeNetConfig {
    /// The fixed architecture used across all experiments: `L = 4`,
    /// `k_1 = 8`, `k_l = 2` afterwards, `beta = nu = 5`.
    pub fn default_for(input_shape: Vec<usize>, spatial_rank: usize, n_classes: usize) -> Self {
        Self {
            layers: 4,
            strides: vec![8, 2, 2],
            bond_dim: 5,
            virtual_dim: 5,
            feature_map: if spatial_rank == 3 {
                FeatureMapKind::None
            } else {
                FeatureMapKind::Sinusoidal
            },
            n_classes,
            spatial_rank,
            input_shape,
            share_weights_per_layer: false,
            batch_norm: true,
            init_std: 1e-2,
            seed: 0,
        }
    }

    pub fn channels(&self) -> usize {
        *self.input_shape.last().expect("non-empty input shape")
    }

    pub fn spatial_extents(&self) -> &[usize] {
        &self.input_shape[..self.input_shape.len() - 1]
    }
}

/// Derived per-layer shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGeometry {
    /// Squeeze stride (1 for the final layer).
    pub stride: usize,
    /// Spatial extents entering the layer.
    pub grid_in: Vec<usize>,
    /// Spatial extents after the squeeze.
    pub grid_out: Vec<usize>,
    /// MPS blocks at this layer (one per patch; 1 for the final layer).
    pub n_blocks: usize,
    /// Chain length of each block.
    pub n_sites: usize,
    /// Per-site input dimension.
    pub site_dim: usize,
    /// Block output dimension (`nu`, or `M` for the final layer).
    pub out_dim: usize,
}

/// Running batch-norm state for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Real> BnLayer<T> {
    fn new(features: usize) -> Self {
        Self {
            gamma: Tensor::filled(vec![features], T::one()),
            beta: Tensor::zeros(vec![features]),
            running_mean: Tensor::zeros(vec![features]),
            running_var: Tensor::filled(vec![features], T::one()),
        }
    }
}

/// Whether a forward pass records batch statistics or uses running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// A tracked forward pass: the tape, the logits node, and (in train mode)
/// the per-layer batch statistics for updating running averages.
pub struct TrackedForward<T> {
    pub tape: Tape<T>,
    pub logits: NodeId,
    pub bn_stats: Vec<(Tensor<T>, Tensor<T>)>,
}

/// Classes and per-class probabilities for a batch.
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub classes: Vec<usize>,
    /// `(batch, n_classes)`: softmax rows for `M >= 2`, sigmoid for `M = 1`.
    pub probabilities: Tensor<T>,
}

/// The instantiated model: per-layer MPS blocks plus batch-norm state.
#[derive(Debug, Clone, PartialEq)]
pub struct LoTeNetModel<T> {
    config: LoTeNetConfig,
    padded_extents: Vec<usize>,
    geometry: Vec<LayerGeometry>,
    blocks: Vec<Vec<MpsBlock<T>>>,
    bn: Vec<BnLayer<T>>,
}

/// Derives padded extents and per-layer geometry from a configuration.
pub fn derive_geometry(
    config: &LoTeNetConfig,
) -> Result<(Vec<usize>, Vec<LayerGeometry>), ModelError> {
    let s = config.spatial_rank;
    if !(2..=3).contains(&s) {
        return Err(ModelError::Config(format!("spatial rank {s} not in {{2, 3}}")));
    }
    if config.input_shape.len() != s + 1 {
        return Err(ModelError::Config(format!(
            "input shape {:?} must list {s} spatial extents plus channels",
            config.input_shape
        )));
    }
    if config.layers == 0 {
        return Err(ModelError::Config("layers must be >= 1".into()));
    }
    if config.strides.len() + 1 != config.layers {
        return Err(ModelError::Config(format!(
            "{} strides for {} layers; expected layers - 1",
            config.strides.len(),
            config.layers
        )));
    }
    if config.strides.iter().any(|&k| k == 0)
        || config.bond_dim == 0
        || config.virtual_dim == 0
        || config.n_classes == 0
        || config.input_shape.iter().any(|&e| e == 0)
    {
        return Err(ModelError::Config(
            "strides, dimensions, classes and extents must be >= 1".into(),
        ));
    }
    let stride_product: usize = config.strides.iter().product();
    let padded: Vec<usize> = config
        .spatial_extents()
        .iter()
        .map(|&e| e.div_ceil(stride_product) * stride_product)
        .collect();

    let channels_in = config.feature_map.embed_dim() * config.channels();
    let nu = config.virtual_dim;
    let mut geometry = Vec::with_capacity(config.layers);
    let mut grid = padded.clone();
    for (l, &k) in config.strides.iter().enumerate() {
        let grid_out: Vec<usize> = grid.iter().map(|&e| e / k).collect();
        geometry.push(LayerGeometry {
            stride: k,
            grid_in: grid.clone(),
            grid_out: grid_out.clone(),
            n_blocks: grid_out.iter().product(),
            n_sites: k.pow(s as u32),
            site_dim: if l == 0 { channels_in } else { nu },
            out_dim: nu,
        });
        grid = grid_out;
    }
    geometry.push(LayerGeometry {
        stride: 1,
        grid_in: grid.clone(),
        grid_out: vec![1; s],
        n_blocks: 1,
        n_sites: grid.iter().product(),
        site_dim: if config.layers == 1 { channels_in } else { nu },
        out_dim: config.n_classes,
    });
    Ok((padded, geometry))
}

/// Shapes and permutation realizing a squeeze as reshape-permute-reshape.
fn squeeze_steps(
    batch: usize,
    spatial: &[usize],
    feat: usize,
    k: usize,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), ModelError> {
    let s = spatial.len();
    for &e in spatial {
        if e % k != 0 {
            return Err(ModelError::Indivisible { extent: e, stride: k });
        }
    }
    let grid: Vec<usize> = spatial.iter().map(|&e| e / k).collect();
    let mut split = vec![batch];
    for &g in &grid {
        split.push(g);
        split.push(k);
    }
    split.push(feat);
    // (B, g0, k, g1, k, ..., F) -> (B, g0, g1, ..., k, k, ..., F)
    let mut perm = vec![0usize];
    perm.extend((0..s).map(|i| 1 + 2 * i));
    perm.extend((0..s).map(|i| 2 + 2 * i));
    perm.push(2 * s + 1);
    let final_shape = vec![
        batch,
        grid.iter().product(),
        k.pow(s as u32) * feat,
    ];
    Ok((split, perm, final_shape))
}

/// Squeeze: `(batch, spatial..., C) -> (batch, N/k^S, C * k^S)`. Each
/// non-overlapping `k^S` patch becomes one site; the feature axis is
/// within-patch raster order, channel-minor. A bijection on elements.
pub fn squeeze<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>, ModelError> {
    let nd = x.ndim();
    if nd < 3 {
        return Err(ModelError::Config(format!(
            "squeeze input must be (batch, spatial..., C); got {:?}",
            x.shape()
        )));
    }
    let batch = x.shape()[0];
    let spatial = &x.shape()[1..nd - 1];
    let feat = x.shape()[nd - 1];
    let (split, perm, final_shape) = squeeze_steps(batch, spatial, feat, k)?;
    Ok(x.reshape(&split)?.permute(&perm)?.reshape(&final_shape)?)
}

/// Inverse of [`squeeze`] for a known patch grid and stride:
/// `(batch, N, C * k^S) -> (batch, grid * k ..., C)`. With `k = 1` this is
/// the plain reshape of sites back into image space.
pub fn unsqueeze<T: Real>(
    sites: &Tensor<T>,
    grid: &[usize],
    k: usize,
) -> Result<Tensor<T>, ModelError> {
    if sites.ndim() != 3 {
        return Err(ModelError::Config(format!(
            "unsqueeze input must be (batch, sites, features); got {:?}",
            sites.shape()
        )));
    }
    let batch = sites.shape()[0];
    let n = sites.shape()[1];
    let feat = sites.shape()[2];
    let s = grid.len();
    let expected: usize = grid.iter().product();
    if n != expected {
        return Err(ModelError::GridMismatch {
            grid: grid.to_vec(),
            got: n,
        });
    }
    let cells = k.pow(s as u32);
    if feat % cells != 0 {
        return Err(ModelError::FeatureSplit {
            feat,
            k,
            rank: s,
        });
    }
    let channels = feat / cells;
    let spatial: Vec<usize> = grid.iter().map(|&g| g * k).collect();
    let (_, perm, _) = squeeze_steps(batch, &spatial, channels, k)?;
    let mut inverse = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let mut mid = vec![batch];
    mid.extend_from_slice(grid);
    mid.extend(std::iter::repeat(k).take(s));
    mid.push(channels);
    let mut out_shape = vec![batch];
    out_shape.extend_from_slice(&spatial);
    out_shape.push(channels);
    Ok(sites.reshape(&mid)?.permute(&inverse)?.reshape(&out_shape)?)
}

/// Zero-pads each spatial axis on the high side to the target extents.
pub fn pad_high<T: Real>(x: &Tensor<T>, target_spatial: &[usize]) -> Result<Tensor<T>, ModelError> {
    let nd = x.ndim();
    let spatial = &x.shape()[1..nd - 1];
    if spatial == target_spatial {
        return Ok(x.clone());
    }
    let batch = x.shape()[0];
    let channels = x.shape()[nd - 1];
    let mut out_shape = vec![batch];
    out_shape.extend_from_slice(target_spatial);
    out_shape.push(channels);
    let out_len: usize = out_shape.iter().product();
    let mut data = vec![T::zero(); out_len];
    let in_strides = crate::tensor::strides(x.shape());
    let out_strides = crate::tensor::strides(&out_shape);
    // copy one contiguous (last spatial axis * C) run at a time
    let s = spatial.len();
    let run = spatial[s - 1] * channels;
    let mut index = vec![0usize; 1 + (s - 1)]; // batch + leading spatial axes
    let total_runs: usize = batch * spatial[..s - 1].iter().product::<usize>();
    let src = x.data();
    for _ in 0..total_runs {
        let mut src_off = 0;
        let mut dst_off = 0;
        for (axis, &i) in index.iter().enumerate() {
            src_off += i * in_strides[axis];
            dst_off += i * out_strides[axis];
        }
        data[dst_off..dst_off + run].copy_from_slice(&src[src_off..src_off + run]);
        for axis in (0..index.len()).rev() {
            index[axis] += 1;
            let limit = if axis == 0 { batch } else { spatial[axis - 1] };
            if index[axis] < limit {
                break;
            }
            index[axis] = 0;
        }
    }
    Ok(Tensor::from_vec(out_shape, data)?)
}

impl<T: Real> LoTeNetModel<T> {
    /// Instantiates all blocks and batch-norm layers, deterministically from
    /// `config.seed`.
    pub fn new(config: LoTeNetConfig) -> Result<Self, ModelError> {
        let (padded_extents, geometry) = derive_geometry(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut blocks = Vec::with_capacity(config.layers);
        for (l, geo) in geometry.iter().enumerate() {
            let is_final = l + 1 == config.layers;
            let instances = if is_final || config.share_weights_per_layer {
                1
            } else {
                geo.n_blocks
            };
            let mut layer_blocks = Vec::with_capacity(instances);
            for _ in 0..instances {
                let seed = rng.gen::<u64>();
                let block = MpsBlock::init_uniform(
                    geo.n_sites,
                    geo.site_dim,
                    config.bond_dim,
                    geo.out_dim,
                    seed,
                    config.init_std,
                )
                .map_err(|source| ModelError::AtLayer { layer: l + 1, source })?;
                layer_blocks.push(block);
            }
            blocks.push(layer_blocks);
        }
        let bn = if config.batch_norm {
            (0..config.layers - 1)
                .map(|_| BnLayer::new(config.virtual_dim))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            config,
            padded_extents,
            geometry,
            blocks,
            bn,
        })
    }

    pub fn config(&self) -> &LoTeNetConfig {
        &self.config
    }

    pub fn geometry(&self) -> &[LayerGeometry] {
        &self.geometry
    }

    pub fn padded_extents(&self) -> &[usize] {
        &self.padded_extents
    }

    pub fn blocks(&self) -> &[Vec<MpsBlock<T>>] {
        &self.blocks
    }

    pub fn bn_layers(&self) -> &[BnLayer<T>] {
        &self.bn
    }

    pub fn blocks_mut(&mut self) -> &mut [Vec<MpsBlock<T>>] {
        &mut self.blocks
    }

    pub fn bn_layers_mut(&mut self) -> &mut [BnLayer<T>] {
        &mut self.bn
    }

    /// Trainable tensors in registry order: every block's cores
    /// (layer-major, patch-major), then each batch-norm layer's gamma and
    /// beta. Checkpoints and gradients use the same order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for layer in &self.blocks {
            for block in layer {
                out.extend(block.cores().iter());
            }
        }
        for bn in &self.bn {
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.blocks {
            for block in layer {
                out.extend(block.cores_mut().iter_mut());
            }
        }
        for bn in &mut self.bn {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out
    }

    /// Total trainable element count: MPS cores plus batch-norm scale/shift.
    pub fn count_parameters(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Updates running batch-norm statistics from a train-mode pass.
    pub fn update_bn_stats(&mut self, stats: &[(Tensor<T>, Tensor<T>)]) {
        let m = T::real(BN_MOMENTUM);
        let keep = T::one() - m;
        for (layer, (mean, var)) in self.bn.iter_mut().zip(stats) {
            let blend = |running: &Tensor<T>, batch: &Tensor<T>| {
                let data: Vec<T> = running
                    .data()
                    .iter()
                    .zip(batch.data())
                    .map(|(&r, &b)| keep * r + m * b)
                    .collect();
                Tensor::from_vec(vec![data.len()], data).expect("finite stats")
            };
            layer.running_mean = blend(&layer.running_mean, mean);
            layer.running_var = blend(&layer.running_var, var);
        }
    }

    /// Pads and feature-maps raw images into the first layer's input.
    pub fn prepare_features(&self, images: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let nd = images.ndim();
        if nd != self.config.input_shape.len() + 1
            || images.shape()[1..] != *self.config.input_shape.as_slice()
        {
            return Err(ModelError::InputShape {
                expected: self.config.input_shape.clone(),
                got: images.shape()[1.min(nd)..].to_vec(),
            });
        }
        let padded = pad_high(images, &self.padded_extents)?;
        Ok(apply_map(self.config.feature_map, &padded)?)
    }

    /// Records the full forward pass on a fresh tape. With `track = true`
    /// every parameter is registered for gradients (registry order);
    /// otherwise parameters enter as constants.
    pub fn forward_tracked(
        &self,
        images: &Tensor<T>,
        phase: Phase,
        track: bool,
    ) -> Result<TrackedForward<T>, ModelError> {
        let features = self.prepare_features(images)?;
        self.forward_from_features(&features, phase, track)
    }

    /// Forward pass from already-padded, feature-mapped inputs
    /// `(batch, padded spatial..., d0 * C)`.
    pub fn forward_from_features(
        &self,
        features: &Tensor<T>,
        phase: Phase,
        track: bool,
    ) -> Result<TrackedForward<T>, ModelError> {
        let mut tape = Tape::new();
        let batch = features.shape()[0];

        // register parameters first, in registry order
        let mut next_param = 0usize;
        let mut reg = |tape: &mut Tape<T>, t: &Tensor<T>| -> NodeId {
            let node = if track {
                let id = ParamId(next_param);
                next_param += 1;
                tape.parameter(id, t.clone())
            } else {
                tape.constant(t.clone())
            };
            node
        };
        let mut core_nodes: Vec<Vec<Vec<NodeId>>> = Vec::with_capacity(self.blocks.len());
        for layer in &self.blocks {
            let mut per_block = Vec::with_capacity(layer.len());
            for block in layer {
                per_block.push(block.cores().iter().map(|c| reg(&mut tape, c)).collect());
            }
            core_nodes.push(per_block);
        }
        let bn_nodes: Vec<(NodeId, NodeId)> = self
            .bn
            .iter()
            .map(|bn| {
                let g = reg(&mut tape, &bn.gamma);
                let b = reg(&mut tape, &bn.beta);
                (g, b)
            })
            .collect();

        let mut x = tape.constant(features.clone());
        let mut bn_stats = Vec::new();
        let eps = T::real(BN_EPS);
        let layers = self.config.layers;

        for (l, geo) in self.geometry.iter().enumerate() {
            let layer_no = l + 1;
            let tape_err = |source: AutodiffError| ModelError::TapeAtLayer {
                layer: layer_no,
                source,
            };
            let is_final = l + 1 == layers;
            // squeeze current (B, spatial..., F) into (B, N_l, sites * F)
            let feat_in = *tape.value(x).shape().last().unwrap();
            let (split, perm, final_shape) = squeeze_steps(batch, &geo.grid_in, feat_in, geo.stride)?;
            let squeezed = {
                let a = tape.reshape(x, &split).map_err(tape_err)?;
                let b = tape.permute(a, &perm).map_err(tape_err)?;
                tape.reshape(b, &final_shape).map_err(tape_err)?
            };

            if is_final {
                // one block over all remaining sites
                let sites: Vec<NodeId> = (0..geo.n_sites)
                    .map(|j| tape.select(squeezed, 1, j))
                    .collect::<Result<_, _>>()
                    .map_err(tape_err)?;
                let block = &self.blocks[l][0];
                let logits = block
                    .forward_on_tape(&mut tape, &sites, &core_nodes[l][0], ContractionScheme::ParallelPairwise)
                    .map_err(|source| ModelError::AtLayer { layer: layer_no, source })?;
                return Ok(TrackedForward {
                    tape,
                    logits,
                    bn_stats,
                });
            }

            // per-patch blocks
            let mut outputs = Vec::with_capacity(geo.n_blocks);
            for p in 0..geo.n_blocks {
                let patch = tape.select(squeezed, 1, p).map_err(tape_err)?;
                let patch_sites = tape
                    .reshape(patch, &[batch, geo.n_sites, geo.site_dim])
                    .map_err(tape_err)?;
                let sites: Vec<NodeId> = (0..geo.n_sites)
                    .map(|j| tape.select(patch_sites, 1, j))
                    .collect::<Result<_, _>>()
                    .map_err(tape_err)?;
                let which = if self.config.share_weights_per_layer { 0 } else { p };
                let block = &self.blocks[l][which];
                let out = block
                    .forward_on_tape(&mut tape, &sites, &core_nodes[l][which], ContractionScheme::ParallelPairwise)
                    .map_err(|source| ModelError::AtLayer { layer: layer_no, source })?;
                outputs.push(out);
            }
            let mut stacked = tape.stack(&outputs).map_err(tape_err)?;

            if self.config.batch_norm {
                let (gamma, beta) = bn_nodes[l];
                stacked = match phase {
                    Phase::Train => {
                        let (node, mean, var) = tape
                            .batch_norm_train(stacked, gamma, beta, eps)
                            .map_err(tape_err)?;
                        bn_stats.push((mean, var));
                        node
                    }
                    Phase::Eval => tape
                        .batch_norm_eval(
                            stacked,
                            gamma,
                            beta,
                            &self.bn[l].running_mean,
                            &self.bn[l].running_var,
                            eps,
                        )
                        .map_err(tape_err)?,
                };
            }

            // back into image space at the reduced resolution
            let mut grid_shape = vec![batch];
            grid_shape.extend_from_slice(&geo.grid_out);
            grid_shape.push(geo.out_dim);
            x = tape.reshape(stacked, &grid_shape).map_err(tape_err)?;
        }
        unreachable!("final layer returns")
    }

    /// Eval-mode logits.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let fwd = self.forward_tracked(images, Phase::Eval, false)?;
        Ok(fwd.tape.value(fwd.logits).clone())
    }

    /// Per-layer site outputs (after batch norm) followed by the logits;
    /// eval mode.
    pub fn forward_trace(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>, ModelError> {
        let features = self.prepare_features(images)?;
        let mut outputs = Vec::new();
        let mut remaining = features;
        for l in 0..self.config.layers - 1 {
            let partial = self.layer_eval(&remaining, l)?;
            outputs.push(partial.clone());
            let geo = &self.geometry[l];
            let mut grid_shape = vec![partial.shape()[0]];
            grid_shape.extend_from_slice(&geo.grid_out);
            grid_shape.push(geo.out_dim);
            remaining = partial.reshape(&grid_shape)?;
        }
        let last = self.config.layers - 1;
        let sites = squeeze(&remaining, 1)?;
        let logits = self.blocks[last][0]
            .forward(&sites, ContractionScheme::ParallelPairwise)
            .map_err(|source| ModelError::AtLayer {
                layer: last + 1,
                source,
            })?;
        outputs.push(logits);
        Ok(outputs)
    }

    /// Runs a single non-final layer in eval mode on `(B, spatial..., F)`,
    /// returning the `(B, N_l, nu)` site tensor after batch norm.
    fn layer_eval(&self, x: &Tensor<T>, l: usize) -> Result<Tensor<T>, ModelError> {
        let geo = &self.geometry[l];
        let batch = x.shape()[0];
        let squeezed = squeeze(x, geo.stride)?;
        let mut parts = Vec::with_capacity(geo.n_blocks);
        for p in 0..geo.n_blocks {
            let patch = squeezed
                .select(1, p)?
                .reshape(&[batch, geo.n_sites, geo.site_dim])?;
            let which = if self.config.share_weights_per_layer { 0 } else { p };
            let out = self.blocks[l][which]
                .forward(&patch, ContractionScheme::ParallelPairwise)
                .map_err(|source| ModelError::AtLayer { layer: l + 1, source })?;
            parts.push(out);
        }
        let stacked = Tensor::stack_axis1(&parts)?;
        if !self.config.batch_norm {
            return Ok(stacked);
        }
        let bn = &self.bn[l];
        let mut tape = Tape::new();
        let xn = tape.constant(stacked);
        let g = tape.constant(bn.gamma.clone());
        let b = tape.constant(bn.beta.clone());
        let y = tape
            .batch_norm_eval(xn, g, b, &bn.running_mean, &bn.running_var, T::real(BN_EPS))
            .map_err(|source| ModelError::TapeAtLayer { layer: l + 1, source })?;
        Ok(tape.value(y).clone())
    }

    /// Class predictions with probabilities. Softmax-argmax for `M >= 2`
    /// (ties resolve to the lowest class index); sigmoid with a strict 0.5
    /// threshold for `M = 1`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Prediction<T>, ModelError> {
        let logits = self.forward(images)?;
        Ok(predict_from_logits(&logits))
    }
}

/// Converts logits `(B, M)` into classes and probabilities.
pub fn predict_from_logits<T: Real>(logits: &Tensor<T>) -> Prediction<T> {
    let b = logits.shape()[0];
    let m = logits.shape()[1];
    let mut probs = Vec::with_capacity(b * m);
    let mut classes = Vec::with_capacity(b);
    for row in logits.data().chunks(m) {
        if m == 1 {
            let z = row[0];
            let p = if z >= T::zero() {
                (T::one() + (-z).exp()).recip()
            } else {
                let e = z.exp();
                e / (T::one() + e)
            };
            probs.push(p);
            classes.push(usize::from(p > T::real(0.5)));
        } else {
            let max = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
            let mut denom = T::zero();
            for &v in row {
                denom += (v - max).exp();
            }
            let mut best = 0usize;
            let mut best_val = T::neg_infinity();
            for (i, &v) in row.iter().enumerate() {
                probs.push((v - max).exp() / denom);
                if v > best_val {
                    best_val = v;
                    best = i;
                }
            }
            classes.push(best);
        }
    }
    Prediction {
        classes,
        probabilities: Tensor::from_vec(vec![b, m], probs).expect("finite probabilities"),
    }
}
