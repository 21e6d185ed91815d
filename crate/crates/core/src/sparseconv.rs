//! Submanifold sparse 3D convolution over [`SparseVoxelTensor`].

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::voxelgrid::{downsample, SparseVoxelTensor, VoxelEntry};

#[derive(Serialize, Deserialize)]
struct KernelRepr {
    extent: usize,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

/// Convolution kernel with one `out x in` matrix per offset. Offsets run
/// lexicographically over `(dx, dy, dz)` in `[-r, r]^3`, `dx` slowest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelRepr", into = "KernelRepr")]
pub struct ConvKernel {
    extent: usize,
    in_channels: usize,
    out_channels: usize,
    /// `extent^3 * out * in`, offset-major, each matrix row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvKernel {
    pub fn new(extent: usize, in_channels: usize, out_channels: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if extent.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel extent must be odd, got {extent}")));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::shape("kernel channels must be positive"));
        }
        let n = extent.pow(3) * in_channels * out_channels;
        if weights.len() != n || bias.len() != out_channels {
            return Err(Error::shape(format!(
                "kernel {extent}^3 x {out_channels}x{in_channels} needs {n} weights and {out_channels} bias, got {} and {}",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|w| !w.is_finite()) {
            return Err(Error::invalid("kernel weights must be finite"));
        }
        Ok(Self {
            extent,
            in_channels,
            out_channels,
            weights,
            bias,
        })
    }

    pub fn zeros(extent: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        let n = extent.pow(3) * in_channels * out_channels;
        Self::new(extent, in_channels, out_channels, vec![0.0; n], vec![0.0; out_channels])
    }

    /// Identity matrix at the center offset, zero elsewhere.
    pub fn identity(extent: usize, channels: usize) -> Result<Self> {
        let mut k = Self::zeros(extent, channels, channels)?;
        let center = k.offsets().iter().position(|o| *o == [0, 0, 0]).unwrap();
        for c in 0..channels {
            *k.weight_mut(center, c, c) = 1.0;
        }
        Ok(k)
    }

    pub fn extent(&self) -> usize {
        self.extent
    }
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn offsets(&self) -> Vec<[i32; 3]> {
        let r = (self.extent / 2) as i32;
        let mut out = Vec::with_capacity(self.extent.pow(3));
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    out.push([dx, dy, dz]);
                }
            }
        }
        out
    }

    /// Weight matrix for the offset at position `o` in [`Self::offsets`].
    pub fn matrix(&self, o: usize) -> &[f64] {
        let n = self.in_channels * self.out_channels;
        &self.weights[o * n..(o + 1) * n]
    }

    pub fn weight(&self, o: usize, out: usize, inp: usize) -> f64 {
        self.matrix(o)[out * self.in_channels + inp]
    }

    pub fn weight_mut(&mut self, o: usize, out: usize, inp: usize) -> &mut f64 {
        let n = self.in_channels * self.out_channels;
        &mut self.weights[o * n + out * self.in_channels + inp]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut k = self.clone();
        k.weights.iter_mut().for_each(|w| *w *= alpha);
        k.bias.iter_mut().for_each(|w| *w *= alpha);
        k
    }
}

impl TryFrom<KernelRepr> for ConvKernel {
    type Error = Error;

    fn try_from(r: KernelRepr) -> Result<Self> {
        let out = r.bias.len();
        let per = r.weights.first().map_or(0, Vec::len);
        if out == 0 || !per.is_multiple_of(out) || r.weights.iter().any(|w| w.len() != per) {
            return Err(Error::shape("kernel weights must be equal-length out x in matrices"));
        }
        if r.weights.len() != r.extent.pow(3) {
            return Err(Error::shape(format!(
                "kernel extent {} needs {} offset matrices, got {}",
                r.extent,
                r.extent.pow(3),
                r.weights.len()
            )));
        }
        Self::new(r.extent, per / out, out, r.weights.into_iter().flatten().collect(), r.bias)
    }
}

impl From<ConvKernel> for KernelRepr {
    fn from(k: ConvKernel) -> Self {
        let n = k.in_channels * k.out_channels;
        KernelRepr {
            extent: k.extent,
            weights: k.weights.chunks(n).map(<[f64]>::to_vec).collect(),
            bias: k.bias,
        }
    }
}

/// Convolution whose output active set equals the input active set. Each
/// output is `bias + sum_o W_o * x[key + o]` over active neighbors, with
/// offsets accumulated in lexicographic order.
pub fn submanifold_conv(t: &SparseVoxelTensor, k: &ConvKernel) -> Result<SparseVoxelTensor> {
    if k.in_channels != t.channels() {
        return Err(Error::shape(format!(
            "kernel expects {} input channels, tensor has {}",
            k.in_channels,
            t.channels()
        )));
    }
    let offsets = k.offsets();
    let features: Vec<Vec<f64>> = t
        .keys()
        .par_iter()
        .map(|&key| {
            let mut out = k.bias.clone();
            for (o, d) in offsets.iter().enumerate() {
                let Some(n) = t.get(&key.offset(*d)) else {
                    continue;
                };
                let m = k.matrix(o);
                for (r, acc) in out.iter_mut().enumerate() {
                    let row = &m[r * k.in_channels..(r + 1) * k.in_channels];
                    *acc += row.iter().zip(&n.feature).map(|(w, x)| w * x).sum::<f64>();
                }
            }
            out
        })
        .collect();
    let map = t
        .iter()
        .zip(features)
        .map(|((key, e), f)| (key, VoxelEntry::new(f, e.modality, e.count)))
        .collect();
    SparseVoxelTensor::from_map(t.voxel_size(), t.origin(), k.out_channels, map)
}

/// Stride-2 convolution: each stride window is pooled into its coarse cell
/// (count-weighted mean, as in [`downsample`]) and the kernel is then applied
/// over the coarse active set.
pub fn strided_conv(t: &SparseVoxelTensor, k: &ConvKernel, stride: u32) -> Result<SparseVoxelTensor> {
    if stride != 2 {
        return Err(Error::invalid(format!("only stride 2 is supported, got {stride}")));
    }
    submanifold_conv(&downsample(t), k)
}
