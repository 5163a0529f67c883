#![allow(dead_code)]

use randes::rng::SplitMix64;
use randes::tensor::{Tensor, TensorMap};

/// Storage grid of the fixtures: every value is a multiple of 2^-20 below 8 in
/// magnitude, so differences of fixture weights are exact in f32.
pub const GRID: f64 = 1.0 / (1u64 << 20) as f64;

#[derive(Debug, Clone)]
pub struct Arch {
    pub blocks: usize,
    pub width: usize,
    pub d_in: usize,
    /// Block layer types with their shapes.
    pub block_layers: Vec<(String, Vec<usize>)>,
}

impl Arch {
    /// Small architecture with two matrix types and a bias per block.
    pub fn random(rng: &mut SplitMix64) -> Self {
        let blocks = 2 + rng.below(5) as usize;
        let width = 2 + rng.below(7) as usize;
        let d_in = 1 + rng.below(5) as usize;
        let hidden = 1 + rng.below(9) as usize;
        Self {
            blocks,
            width,
            d_in,
            block_layers: vec![
                ("attn.qkv".into(), vec![width, width]),
                ("mlp.fc1".into(), vec![hidden, width]),
                ("mlp.bias".into(), vec![hidden]),
            ],
        }
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("input.embed".to_string(), vec![self.width, self.d_in])];
        for k in 0..self.blocks {
            for (ty, shape) in &self.block_layers {
                out.push((format!("blocks.{k}.{ty}"), shape.clone()));
            }
        }
        out.push(("output.head".into(), vec![2, self.width]));
        out
    }
}

pub fn on_grid(v: f64) -> f32 {
    let clipped = v.clamp(-7.5, 7.5);
    ((clipped / GRID).round() * GRID) as f32
}

pub fn map_from(shapes: &[(String, Vec<usize>)], mut f: impl FnMut(&str) -> f32) -> TensorMap {
    let mut m = TensorMap::new();
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| f(name)).collect();
        m.insert(name.clone(), Tensor::new(shape.clone(), data).unwrap()).unwrap();
    }
    m
}

/// Grid-valued map with standard normal entries times `scale`.
pub fn grid_map(shapes: &[(String, Vec<usize>)], rng: &mut SplitMix64, scale: f64) -> TensorMap {
    map_from(shapes, |_| on_grid(rng.standard_normal() * scale))
}

/// `base` plus a grid-valued perturbation; the difference is exact.
pub fn grid_finetune(base: &TensorMap, rng: &mut SplitMix64, scale: f64) -> TensorMap {
    base.iter()
        .map(|(name, t)| {
            let data = t
                .data()
                .iter()
                .map(|&v| on_grid(f64::from(v) + rng.standard_normal() * scale))
                .collect();
            (name.to_string(), Tensor::new(t.shape().to_vec(), data).unwrap())
        })
        .collect()
}

/// Unquantized Gaussian map.
pub fn gaussian_map(shapes: &[(String, Vec<usize>)], rng: &mut SplitMix64) -> TensorMap {
    map_from(shapes, |_| rng.standard_normal() as f32)
}

/// Elementwise `a·x + b·y` in f64, rounded once.
pub fn combine(a: f64, x: &TensorMap, b: f64, y: &TensorMap) -> TensorMap {
    x.iter()
        .map(|(name, t)| {
            let u = y.get(name).unwrap().data();
            let data = t
                .data()
                .iter()
                .zip(u)
                .map(|(&p, &q)| (a * f64::from(p) + b * f64::from(q)) as f32)
                .collect();
            (name.to_string(), Tensor::new(t.shape().to_vec(), data).unwrap())
        })
        .collect()
}

/// Four blocks of two `[25, 50]` layers: 10 000 parameters in total.
pub fn decorrelation_shapes() -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for k in 0..4 {
        out.push((format!("blocks.{k}.attn.weight"), vec![25, 50]));
        out.push((format!("blocks.{k}.mlp.weight"), vec![25, 50]));
    }
    out
}
