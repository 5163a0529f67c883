//! The student network: `h = x Eᵀ`, then per block `h ← h + tanh(h Aᵀ) Bᵀ`, then `y = h Hᵀ`.
//! Forward and backward passes run in f64 over row-major buffers.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Tensor, TensorMap};

use super::ArchConfig;

pub(crate) const EMBED: &str = "input.embed";
pub(crate) const HEAD: &str = "output.head";

pub(crate) fn attn_name(k: usize) -> String {
    format!("blocks.{k}.attn.weight")
}

pub(crate) fn mlp_name(k: usize) -> String {
    format!("blocks.{k}.mlp.weight")
}

/// Grid step of stored weights. Weights on this grid with magnitude below
/// `QUANT_LIMIT` have exactly representable f32 differences.
pub const QUANT_STEP: f64 = 1.0 / (1u64 << 20) as f64;
pub const QUANT_LIMIT: f64 = 8.0;

#[derive(Debug, Clone)]
pub(crate) struct Params {
    pub embed: Vec<f64>,
    pub attn: Vec<Vec<f64>>,
    pub mlp: Vec<Vec<f64>>,
    pub head: Vec<f64>,
}

fn normal_vec(rng: &mut SplitMix64, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.standard_normal() * std).collect()
}

/// `out[n,r] = x[n,c] · w[r,c]ᵀ`.
fn matmul_t(x: &[f64], n: usize, c: usize, w: &[f64], r: usize) -> Vec<f64> {
    let mut wt = vec![0.0; c * r];
    for i in 0..r {
        for j in 0..c {
            wt[j * r + i] = w[i * c + j];
        }
    }
    let mut out = vec![0.0; n * r];
    for s in 0..n {
        let o = &mut out[s * r..(s + 1) * r];
        for j in 0..c {
            let v = x[s * c + j];
            for (o, w) in o.iter_mut().zip(&wt[j * r..(j + 1) * r]) {
                *o += v * w;
            }
        }
    }
    out
}

/// `out[n,c] = g[n,r] · w[r,c]`.
fn matmul(g: &[f64], n: usize, r: usize, w: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for s in 0..n {
        let o = &mut out[s * c..(s + 1) * c];
        for i in 0..r {
            let v = g[s * r + i];
            for (o, w) in o.iter_mut().zip(&w[i * c..(i + 1) * c]) {
                *o += v * w;
            }
        }
    }
    out
}

/// `G[r,c] = g[n,r]ᵀ · x[n,c]`.
fn grad_weight(g: &[f64], n: usize, r: usize, x: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for s in 0..n {
        let xs = &x[s * c..(s + 1) * c];
        for i in 0..r {
            let v = g[s * r + i];
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(xs) {
                *o += v * x;
            }
        }
    }
    out
}

fn add_scaled(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

struct Trace {
    /// Hidden state entering each block, plus the final one.
    hidden: Vec<Vec<f64>>,
    /// `tanh(h Aᵀ)` per block.
    act: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl Params {
    pub fn init(arch: &ArchConfig, rng: &mut SplitMix64) -> Self {
        let w = arch.width;
        let inner_std = 1.0 / (w as f64).sqrt();
        let embed = normal_vec(rng, w * arch.d_in, 1.0 / (arch.d_in as f64).sqrt());
        let mut attn = Vec::with_capacity(arch.blocks);
        let mut mlp = Vec::with_capacity(arch.blocks);
        for _ in 0..arch.blocks {
            attn.push(normal_vec(rng, w * w, inner_std));
            mlp.push(normal_vec(rng, w * w, inner_std));
        }
        let head = normal_vec(rng, arch.d_out * w, inner_std);
        Self {
            embed,
            attn,
            mlp,
            head,
        }
    }

    pub fn from_map(map: &TensorMap, arch: &ArchConfig) -> Result<Self> {
        let get = |name: &str, shape: [usize; 2]| -> Result<Vec<f64>> {
            let t = map.require(name)?;
            if t.shape() != shape {
                return Err(Error::mismatch(
                    name,
                    format!("expected shape {shape:?}, found {:?}", t.shape()),
                ));
            }
            Ok(t.data().iter().map(|&v| f64::from(v)).collect())
        };
        let (w, k) = (arch.width, arch.blocks);
        if map.len() != 2 * k + 2 {
            return Err(Error::mismatch(
                map.names().next().unwrap_or(""),
                format!("expected {} tensors, found {}", 2 * k + 2, map.len()),
            ));
        }
        Ok(Self {
            embed: get(EMBED, [w, arch.d_in])?,
            attn: (0..k).map(|b| get(&attn_name(b), [w, w])).collect::<Result<_>>()?,
            mlp: (0..k).map(|b| get(&mlp_name(b), [w, w])).collect::<Result<_>>()?,
            head: get(HEAD, [arch.d_out, w])?,
        })
    }

    /// Rounds every weight to the storage grid.
    pub fn to_map(&self, arch: &ArchConfig) -> Result<TensorMap> {
        let w = arch.width;
        let q = |name: &str, shape: Vec<usize>, v: &[f64]| -> Result<(String, Tensor)> {
            let data = v
                .iter()
                .map(|&x| {
                    if x.abs() >= QUANT_LIMIT || !x.is_finite() {
                        Err(Error::NumericalDegeneracy(format!(
                            "weight {x} in `{name}` outside the storage range ±{QUANT_LIMIT}"
                        )))
                    } else {
                        Ok(((x / QUANT_STEP).round() * QUANT_STEP) as f32)
                    }
                })
                .collect::<Result<Vec<f32>>>()?;
            Ok((name.to_string(), Tensor::new(shape, data)?))
        };
        let mut map = TensorMap::new();
        let (name, t) = q(EMBED, vec![w, arch.d_in], &self.embed)?;
        map.insert(name, t)?;
        for k in 0..arch.blocks {
            let (name, t) = q(&attn_name(k), vec![w, w], &self.attn[k])?;
            map.insert(name, t)?;
            let (name, t) = q(&mlp_name(k), vec![w, w], &self.mlp[k])?;
            map.insert(name, t)?;
        }
        let (name, t) = q(HEAD, vec![arch.d_out, w], &self.head)?;
        map.insert(name, t)?;
        Ok(map)
    }

    fn trace(&self, arch: &ArchConfig, x: &[f64], n: usize) -> Trace {
        let w = arch.width;
        let mut h = matmul_t(x, n, arch.d_in, &self.embed, w);
        let mut hidden = Vec::with_capacity(arch.blocks + 1);
        let mut act = Vec::with_capacity(arch.blocks);
        for k in 0..arch.blocks {
            let mut a = matmul_t(&h, n, w, &self.attn[k], w);
            a.iter_mut().for_each(|v| *v = v.tanh());
            let update = matmul_t(&a, n, w, &self.mlp[k], w);
            let next: Vec<f64> = h.iter().zip(&update).map(|(h, u)| h + u).collect();
            hidden.push(h);
            act.push(a);
            h = next;
        }
        let out = matmul_t(&h, n, w, &self.head, arch.d_out);
        hidden.push(h);
        Trace { hidden, act, out }
    }

    pub fn forward(&self, arch: &ArchConfig, x: &[f64], n: usize) -> Vec<f64> {
        self.trace(arch, x, n).out
    }

    /// Mean over samples of the squared error summed over outputs.
    pub fn loss(&self, arch: &ArchConfig, x: &[f64], y: &[f64], n: usize) -> f64 {
        mse(&self.forward(arch, x, n), y, n)
    }

    /// One full-batch gradient step. Input and output layers move only when `train_io`.
    pub fn step(&mut self, arch: &ArchConfig, x: &[f64], y: &[f64], n: usize, lr: f64, train_io: bool) {
        let w = arch.width;
        let tr = self.trace(arch, x, n);
        let g: Vec<f64> = tr
            .out
            .iter()
            .zip(y)
            .map(|(o, y)| 2.0 * (o - y) / n as f64)
            .collect();
        let last = &tr.hidden[arch.blocks];
        let g_head = train_io.then(|| grad_weight(&g, n, arch.d_out, last, w));
        let mut gh = matmul(&g, n, arch.d_out, &self.head, w);
        for k in (0..arch.blocks).rev() {
            let a = &tr.act[k];
            let g_mlp = grad_weight(&gh, n, w, a, w);
            let mut gz = matmul(&gh, n, w, &self.mlp[k], w);
            for (gz, a) in gz.iter_mut().zip(a) {
                *gz *= 1.0 - a * a;
            }
            let g_attn = grad_weight(&gz, n, w, &tr.hidden[k], w);
            if k > 0 || train_io {
                let back = matmul(&gz, n, w, &self.attn[k], w);
                add_scaled(&mut gh, 1.0, &back);
            }
            add_scaled(&mut self.mlp[k], -lr, &g_mlp);
            add_scaled(&mut self.attn[k], -lr, &g_attn);
        }
        if let Some(g_head) = g_head {
            let g_embed = grad_weight(&gh, n, w, x, arch.d_in);
            add_scaled(&mut self.embed, -lr, &g_embed);
            add_scaled(&mut self.head, -lr, &g_head);
        }
    }
}

pub(crate) fn mse(pred: &[f64], y: &[f64], n: usize) -> f64 {
    pred.iter().zip(y).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> ArchConfig {
        ArchConfig {
            width: 5,
            blocks: 2,
            d_in: 3,
            d_out: 2,
        }
    }

    fn data(rng: &mut SplitMix64, n: usize, a: &ArchConfig) -> (Vec<f64>, Vec<f64>) {
        (normal_vec(rng, n * a.d_in, 1.0), normal_vec(rng, n * a.d_out, 1.0))
    }

    fn flat(p: &Params) -> Vec<f64> {
        let mut v = p.embed.clone();
        for k in 0..p.attn.len() {
            v.extend(&p.attn[k]);
            v.extend(&p.mlp[k]);
        }
        v.extend(&p.head);
        v
    }

    fn set(p: &mut Params, i: usize, value: f64) {
        let mut idx = i;
        let mut slots: Vec<&mut Vec<f64>> = vec![&mut p.embed];
        for (a, m) in p.attn.iter_mut().zip(p.mlp.iter_mut()) {
            slots.push(a);
            slots.push(m);
        }
        slots.push(&mut p.head);
        for s in slots {
            if idx < s.len() {
                s[idx] = value;
                return;
            }
            idx -= s.len();
        }
    }

    #[test]
    fn gradient_step_matches_finite_differences() {
        let a = arch();
        let mut rng = SplitMix64::new(7);
        let p = Params::init(&a, &mut rng);
        let (x, y) = data(&mut rng, 6, &a);
        let lr = 1e-3;
        let mut stepped = p.clone();
        stepped.step(&a, &x, &y, 6, lr, true);
        let before = flat(&p);
        let after = flat(&stepped);
        for i in 0..before.len() {
            let analytic = (before[i] - after[i]) / lr;
            let eps = 1e-6;
            let (mut up, mut down) = (p.clone(), p.clone());
            set(&mut up, i, before[i] + eps);
            set(&mut down, i, before[i] - eps);
            let numeric = (up.loss(&a, &x, &y, 6) - down.loss(&a, &x, &y, 6)) / (2.0 * eps);
            assert!(
                (analytic - numeric).abs() < 1e-6 * (1.0 + numeric.abs()),
                "param {i}: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn frozen_io_layers_do_not_move() {
        let a = arch();
        let mut rng = SplitMix64::new(8);
        let mut p = Params::init(&a, &mut rng);
        let (x, y) = data(&mut rng, 4, &a);
        let (e, h) = (p.embed.clone(), p.head.clone());
        p.step(&a, &x, &y, 4, 0.1, false);
        assert_eq!(p.embed, e);
        assert_eq!(p.head, h);
    }

    #[test]
    fn map_round_trip_is_on_grid() {
        let a = arch();
        let p = Params::init(&a, &mut SplitMix64::new(9));
        let m = p.to_map(&a).unwrap();
        let back = Params::from_map(&m, &a).unwrap();
        for (x, y) in flat(&p).iter().zip(flat(&back)) {
            assert!((x - y).abs() <= QUANT_STEP / 2.0);
            assert_eq!((y / QUANT_STEP).fract(), 0.0);
        }
        assert!(back.to_map(&a).unwrap().bit_eq(&m));
    }
}
