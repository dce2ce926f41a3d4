//! Matrix product state blocks.
//!
//! An [`MpsBlock`] factorizes a linear map from the joint (tensor-product)
//! space of `n` site vectors into an output vector: a chain of order-3 cores
//! (order-2 at the boundaries), one of which carries the output leg. Bond
//! indices between adjacent cores have dimension `bond_dim`; the forward
//! contraction never materializes the underlying weight tensor, whose
//! element count is exponential in `n`.
//!
//! [`MpsBlock::reconstruct_weight_tensor`] does materialize it, by explicit
//! summation over all bond indices, and serves as the brute-force oracle for
//! small instances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::scalar::Real;
use crate::tensor::{Tensor, TensorError};

/// Element cap for [`MpsBlock::reconstruct_weight_tensor`]; the oracle is for
/// small instances only.
pub const RECONSTRUCT_CAP: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum MpsError {
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("output position {position} out of range for {n_sites} sites")]
    OutPositionRange { position: usize, n_sites: usize },
    #[error("expected {expected} site vectors, got {got}")]
    SiteCount { expected: usize, got: usize },
    #[error("site {site}: input dimension {got} does not match site dimension {expected}")]
    SiteDim {
        site: usize,
        expected: usize,
        got: usize,
    },
    #[error("site {site}: batch size {got} differs from {expected}")]
    BatchSize {
        site: usize,
        expected: usize,
        got: usize,
    },
    #[error("weight tensor has {elements} elements, above the cap of {cap}")]
    CapExceeded { elements: usize, cap: usize },
    #[error("core {core} has shape {got:?}, expected {expected:?}")]
    CoreShape {
        core: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("site {site}: {source}")]
    AtSite {
        site: usize,
        source: AutodiffError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Order in which the chain of site-contracted matrices is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContractionScheme {
    /// Pairwise reduction of adjacent matrices, halving the chain per round.
    #[default]
    ParallelPairwise,
    /// Left-to-right fold; lower peak memory, same result up to rounding.
    Sequential,
}

/// Chain of MPS cores mapping `n` site vectors to an output vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MpsBlock<T> {
    site_dims: Vec<usize>,
    bond_dim: usize,
    out_dim: usize,
    out_position: usize,
    cores: Vec<Tensor<T>>,
}

impl<T: Real> MpsBlock<T> {
    /// Shape of core `j` under the open-boundary convention: boundary cores
    /// are order-2, the output core gains one leg of `out_dim`.
    fn core_shape(
        site_dims: &[usize],
        bond_dim: usize,
        out_dim: usize,
        out_position: usize,
        j: usize,
    ) -> Vec<usize> {
        let n = site_dims.len();
        let d = site_dims[j];
        let carries_out = j == out_position;
        if n == 1 {
            return vec![d, out_dim];
        }
        match (j == 0, j == n - 1, carries_out) {
            (true, _, false) => vec![d, bond_dim],
            (true, _, true) => vec![d, out_dim, bond_dim],
            (_, true, false) => vec![bond_dim, d],
            (_, true, true) => vec![bond_dim, d, out_dim],
            (false, false, false) => vec![bond_dim, d, bond_dim],
            (false, false, true) => vec![bond_dim, d, out_dim, bond_dim],
        }
    }

    /// Identity component of a core: the Kronecker delta over its bond
    /// indices (a boundary's missing bond acts as a fixed index 0), broadcast
    /// over site and output legs.
    fn identity_core(shape: &[usize], is_first: bool, is_last: bool, n: usize) -> Vec<T> {
        let len: usize = shape.iter().product();
        let mut data = vec![T::zero(); len];
        if n == 1 {
            // no bonds at all: every channel passes through
            return vec![T::one(); len];
        }
        let (bond_left, bond_right, inner): (Option<usize>, Option<usize>, usize) = if is_first {
            (None, Some(*shape.last().unwrap()), len / shape.last().unwrap())
        } else if is_last {
            (Some(shape[0]), None, len / shape[0])
        } else {
            (
                Some(shape[0]),
                Some(*shape.last().unwrap()),
                len / (shape[0] * shape.last().unwrap()),
            )
        };
        match (bond_left, bond_right) {
            (None, Some(br)) => {
                // index layout (.., inner, br): delta(0, b)
                for i in 0..inner {
                    data[i * br] = T::one();
                }
            }
            (Some(_bl), None) => {
                // (bl, inner..): delta(a, 0)
                for v in data.iter_mut().take(inner) {
                    *v = T::one();
                }
            }
            (Some(bl), Some(br)) => {
                // (bl, inner.., br): delta(a, b)
                let b = bl.min(br);
                for a in 0..b {
                    for i in 0..inner {
                        data[(a * inner + i) * br + a] = T::one();
                    }
                }
            }
            (None, None) => unreachable!(),
        }
        data
    }

    /// Builds a block with identity-plus-noise cores: each core is the
    /// broadcast bond identity plus zero-mean Gaussian noise of `init_std`.
    /// Deterministic given `seed`.
    pub fn init(
        site_dims: &[usize],
        bond_dim: usize,
        out_dim: usize,
        out_position: usize,
        seed: u64,
        init_std: f64,
    ) -> Result<Self, MpsError> {
        let n = site_dims.len();
        if n == 0 || bond_dim == 0 || out_dim == 0 || site_dims.iter().any(|&d| d == 0) {
            return Err(MpsError::InvalidDims(format!(
                "sites {site_dims:?}, bond {bond_dim}, out {out_dim}: all must be >= 1"
            )));
        }
        if out_position >= n {
            return Err(MpsError::OutPositionRange {
                position: out_position,
                n_sites: n,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, init_std).expect("valid std");
        let cores = (0..n)
            .map(|j| {
                let shape = Self::core_shape(site_dims, bond_dim, out_dim, out_position, j);
                let mut data = Self::identity_core(&shape, j == 0, j == n - 1, n);
                if init_std > 0.0 {
                    for v in data.iter_mut() {
                        *v += T::real(noise.sample(&mut rng));
                    }
                }
                Tensor::from_vec(shape, data).expect("core data matches shape")
            })
            .collect();
        Ok(Self {
            site_dims: site_dims.to_vec(),
            bond_dim,
            out_dim,
            out_position,
            cores,
        })
    }

    /// Uniform-dimension convenience constructor with the default output
    /// position at mid-chain.
    pub fn init_uniform(
        n_sites: usize,
        site_dim: usize,
        bond_dim: usize,
        out_dim: usize,
        seed: u64,
        init_std: f64,
    ) -> Result<Self, MpsError> {
        Self::init(
            &vec![site_dim; n_sites],
            bond_dim,
            out_dim,
            n_sites / 2,
            seed,
            init_std,
        )
    }

    /// Builds a block from explicit cores, validating every core shape.
    pub fn from_cores(
        site_dims: &[usize],
        bond_dim: usize,
        out_dim: usize,
        out_position: usize,
        cores: Vec<Tensor<T>>,
    ) -> Result<Self, MpsError> {
        let n = site_dims.len();
        if out_position >= n {
            return Err(MpsError::OutPositionRange {
                position: out_position,
                n_sites: n,
            });
        }
        if cores.len() != n {
            return Err(MpsError::SiteCount {
                expected: n,
                got: cores.len(),
            });
        }
        for (j, core) in cores.iter().enumerate() {
            let expected = Self::core_shape(site_dims, bond_dim, out_dim, out_position, j);
            if core.shape() != expected.as_slice() {
                return Err(MpsError::CoreShape {
                    core: j,
                    expected,
                    got: core.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            site_dims: site_dims.to_vec(),
            bond_dim,
            out_dim,
            out_position,
            cores,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.site_dims.len()
    }

    pub fn site_dims(&self) -> &[usize] {
        &self.site_dims
    }

    pub fn bond_dim(&self) -> usize {
        self.bond_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn out_position(&self) -> usize {
        self.out_position
    }

    pub fn cores(&self) -> &[Tensor<T>] {
        &self.cores
    }

    pub(crate) fn cores_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.cores
    }

    pub fn set_core(&mut self, j: usize, core: Tensor<T>) -> Result<(), MpsError> {
        let expected = Self::core_shape(
            &self.site_dims,
            self.bond_dim,
            self.out_dim,
            self.out_position,
            j,
        );
        if core.shape() != expected.as_slice() {
            return Err(MpsError::CoreShape {
                core: j,
                expected,
                got: core.shape().to_vec(),
            });
        }
        self.cores[j] = core;
        Ok(())
    }

    /// Exact number of tunable elements across all cores.
    pub fn param_count(&self) -> usize {
        self.cores.iter().map(|c| c.len()).sum()
    }

    /// Forward contraction of a uniform-dimension site batch
    /// `(batch, n_sites, d)` into `(batch, out_dim)`.
    pub fn forward(
        &self,
        sites: &Tensor<T>,
        scheme: ContractionScheme,
    ) -> Result<Tensor<T>, MpsError> {
        if sites.ndim() != 3 {
            return Err(MpsError::InvalidDims(format!(
                "expected (batch, n_sites, d) input, got shape {:?}",
                sites.shape()
            )));
        }
        if sites.shape()[1] != self.n_sites() {
            return Err(MpsError::SiteCount {
                expected: self.n_sites(),
                got: sites.shape()[1],
            });
        }
        let mut tape = Tape::new();
        let x = tape.constant(sites.clone());
        let site_nodes: Result<Vec<NodeId>, AutodiffError> =
            (0..self.n_sites()).map(|j| tape.select(x, 1, j)).collect();
        let site_nodes = site_nodes?;
        let core_nodes: Vec<NodeId> = self
            .cores
            .iter()
            .map(|c| tape.constant(c.clone()))
            .collect();
        let out = self.forward_on_tape(&mut tape, &site_nodes, &core_nodes, scheme)?;
        Ok(tape.value(out).clone())
    }

    /// Forward contraction from per-site vectors `(batch, d_j)`; supports
    /// heterogeneous site dimensions.
    pub fn forward_per_site(
        &self,
        site_vecs: &[Tensor<T>],
        scheme: ContractionScheme,
    ) -> Result<Tensor<T>, MpsError> {
        let mut tape = Tape::new();
        let site_nodes: Vec<NodeId> = site_vecs
            .iter()
            .map(|v| tape.constant(v.clone()))
            .collect();
        let core_nodes: Vec<NodeId> = self
            .cores
            .iter()
            .map(|c| tape.constant(c.clone()))
            .collect();
        let out = self.forward_on_tape(&mut tape, &site_nodes, &core_nodes, scheme)?;
        Ok(tape.value(out).clone())
    }

    /// Records the forward contraction on an existing tape. `site_nodes[j]`
    /// must hold `(batch, d_j)`; `core_nodes` are this block's cores as
    /// recorded by the caller (parameters when training, constants
    /// otherwise). Returns the `(batch, out_dim)` output node.
    ///
    /// Each site vector is first contracted into its core, then the chain of
    /// matrices is reduced per `scheme`, vectorized over the batch.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        site_nodes: &[NodeId],
        core_nodes: &[NodeId],
        scheme: ContractionScheme,
    ) -> Result<NodeId, MpsError> {
        let n = self.n_sites();
        if site_nodes.len() != n {
            return Err(MpsError::SiteCount {
                expected: n,
                got: site_nodes.len(),
            });
        }
        debug_assert_eq!(core_nodes.len(), n);
        let batch = tape.value(site_nodes[0]).shape()[0];
        for (j, &s) in site_nodes.iter().enumerate() {
            let shape = tape.value(s).shape();
            if shape.len() != 2 || shape[1] != self.site_dims[j] {
                return Err(MpsError::SiteDim {
                    site: j,
                    expected: self.site_dims[j],
                    got: *shape.last().unwrap_or(&0),
                });
            }
            if shape[0] != batch {
                return Err(MpsError::BatchSize {
                    site: j,
                    expected: batch,
                    got: shape[0],
                });
            }
        }

        let at = |site: usize, e: AutodiffError| MpsError::AtSite { site, source: e };

        if n == 1 {
            // single core (d, out)
            return tape
                .contract(site_nodes[0], core_nodes[0], &[1], &[0])
                .map_err(|e| at(0, e));
        }

        // Contract each site vector into its core. The site axis of boundary
        // cores sits first; elsewhere it follows the left bond.
        let mut left: Vec<NodeId> = Vec::new(); // (B, bl, br) chain elements left of the output core
        let mut output = None; // site-contracted output core
        let mut right: Vec<NodeId> = Vec::new();
        for j in 0..n {
            let s = site_nodes[j];
            let c = core_nodes[j];
            let site_axis = if j == 0 { 0 } else { 1 };
            let m = tape.contract(s, c, &[1], &[site_axis]).map_err(|e| at(j, e))?;
            if j == self.out_position {
                output = Some(m);
            } else if j == 0 {
                // (B, br) -> (B, 1, br)
                let r = tape.reshape(m, &[batch, 1, self.bond_dim]).map_err(|e| at(j, e))?;
                left.push(r);
            } else if j == n - 1 {
                // (B, bl) -> (B, bl, 1)
                let r = tape.reshape(m, &[batch, self.bond_dim, 1]).map_err(|e| at(j, e))?;
                right.push(r);
            } else if j < self.out_position {
                left.push(m);
            } else {
                right.push(m);
            }
        }
        let output = output.expect("output core contracted");

        // Fold the output core into matrix form with the output leg packed
        // into the column axis, multiply the reduced left product in, unpack,
        // then multiply the right product.
        let left_prod = self.reduce_chain(tape, &left, scheme)?;
        let out_rows = match (self.out_position == 0, left_prod) {
            (true, None) => output, // already (B, out, br)
            (false, Some(lp)) => {
                let oshape = tape.value(output).shape().to_vec();
                // (B, bl, out[, br]) -> (B, bl, out*br)
                let cols: usize = oshape[2..].iter().product();
                let om = tape.reshape(output, &[batch, self.bond_dim, cols])?;
                let t = tape.batch_matmul(lp, om)?; // (B, 1, out*br)
                let mut unpacked = vec![batch, self.out_dim];
                unpacked.extend(&oshape[3..]);
                tape.reshape(t, &unpacked)?
            }
            _ => unreachable!("left side empty iff output sits at position 0"),
        };
        // out_rows: (B, out) if the output core was last, else (B, out, br)
        let result = match self.reduce_chain(tape, &right, scheme)? {
            None => out_rows,
            Some(rp) => {
                let t = tape.batch_matmul(out_rows, rp)?; // (B, out, 1)
                tape.reshape(t, &[batch, self.out_dim])?
            }
        };
        Ok(result)
    }

    fn reduce_chain(
        &self,
        tape: &mut Tape<T>,
        elems: &[NodeId],
        scheme: ContractionScheme,
    ) -> Result<Option<NodeId>, AutodiffError> {
        if elems.is_empty() {
            return Ok(None);
        }
        match scheme {
            ContractionScheme::Sequential => {
                let mut acc = elems[0];
                for &m in &elems[1..] {
                    acc = tape.batch_matmul(acc, m)?;
                }
                Ok(Some(acc))
            }
            ContractionScheme::ParallelPairwise => {
                let mut level: Vec<NodeId> = elems.to_vec();
                while level.len() > 1 {
                    let mut next = Vec::with_capacity(level.len() / 2 + 1);
                    let mut it = level.chunks(2);
                    for pair in &mut it {
                        match pair {
                            [a, b] => next.push(tape.batch_matmul(*a, *b)?),
                            [a] => next.push(*a),
                            _ => unreachable!(),
                        }
                    }
                    level = next;
                }
                Ok(Some(level[0]))
            }
        }
    }

    /// Materializes the weight tensor the block represents, shape
    /// `site_dims ++ [out_dim]`, by explicit summation over all bond indices.
    pub fn reconstruct_weight_tensor(&self) -> Result<Tensor<T>, MpsError> {
        self.reconstruct_weight_tensor_capped(RECONSTRUCT_CAP)
    }

    pub fn reconstruct_weight_tensor_capped(&self, cap: usize) -> Result<Tensor<T>, MpsError> {
        let elements: usize = self.site_dims.iter().product::<usize>() * self.out_dim;
        if elements > cap {
            return Err(MpsError::CapExceeded { elements, cap });
        }
        let n = self.n_sites();
        let mut acc = self.cores[0].clone();
        for core in &self.cores[1..] {
            let bond_axis = acc.ndim() - 1;
            acc = acc.contract(core, &[bond_axis], &[0])?;
        }
        // axes are d_0..d_p, out, d_{p+1}..d_{n-1}; move out to the end
        if self.out_position < n - 1 {
            let p = self.out_position;
            let mut perm: Vec<usize> = (0..=p).collect();
            perm.extend(p + 2..=n);
            perm.push(p + 1);
            acc = acc.permute(&perm)?;
        }
        Ok(acc)
    }
}
