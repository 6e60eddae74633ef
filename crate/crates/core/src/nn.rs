//! Parameter storage, layers and the optimizer.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, RowMap, Var};
use crate::tensor::Matrix;

/// Named parameter arrays of one model component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn get(&self, i: usize) -> &Matrix {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.values[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Registers every array on the tape, as gradient leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|m| if trainable { g.leaf(m.clone()) } else { g.constant(m.clone()) })
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (n, v) in self.iter() {
            buf.clear();
            buf.extend_from_slice(n.as_bytes());
            buf.push(0);
            v.write_bytes(&mut buf);
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// Shape-compatible replacement of all values (checkpoint restore).
    pub fn load_from(&mut self, other: &ParamSet) -> Result<(), String> {
        if self.names != other.names {
            return Err("parameter names differ".into());
        }
        for (a, b) in self.values.iter().zip(&other.values) {
            if a.shape() != b.shape() {
                return Err("parameter shapes differ".into());
            }
        }
        self.values = other.values.clone();
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    w: usize,
    b: Option<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let w = ps.push(format!("{name}.weight"), Matrix::randn(fan_in, fan_out, std, rng));
        let b = ps.push(format!("{name}.bias"), Matrix::zeros(1, fan_out));
        Self { w, b: Some(b), fan_in, fan_out }
    }

    /// He-normal weights and no bias term, so zero rows map to zero rows.
    pub fn without_bias<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let w = ps.push(format!("{name}.weight"), Matrix::randn(fan_in, fan_out, std, rng));
        Self { w, b: None, fan_in, fan_out }
    }

    pub fn weight_index(&self) -> usize {
        self.w
    }

    pub fn bias_index(&self) -> Option<usize> {
        self.b
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let y = g.matmul(x, p[self.w]);
        match self.b {
            Some(b) => g.add_bias(y, p[b]),
            None => y,
        }
    }
}

/// Layer normalization with learned gain and shift.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    gamma: usize,
    beta: usize,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize) -> Self {
        let gamma = ps.push(format!("{name}.gamma"), Matrix::filled(1, width, 1.0));
        let beta = ps.push(format!("{name}.beta"), Matrix::zeros(1, width));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let y = g.layer_norm(x, LN_EPS);
        let y = g.mul_row(y, p[self.gamma]);
        g.add_bias(y, p[self.beta])
    }
}

/// Affine layers with rectifiers between them; the last layer is linear.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, p, h);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }
}

/// Spatial geometry of a 2D convolution over row-major pixel rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height.div_ceil(self.stride)
    }

    pub fn out_width(&self) -> usize {
        self.width.div_ceil(self.stride)
    }

    /// Patch-extraction map: output row `o * k² + t` is input pixel `t` of
    /// output pixel `o`'s window, or empty (zero padding) outside the image.
    ///
    /// Windows are centred on the stride block so that a stride-`s` output
    /// pixel sits over the centre of its `s × s` input block.
    pub fn im2col(&self) -> Arc<RowMap> {
        static CACHE: OnceLock<Mutex<HashMap<ConvGeometry, Arc<RowMap>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        let mut guard = cache.lock().expect("im2col cache poisoned");
        guard.entry(*self).or_insert_with(|| Arc::new(self.build_im2col())).clone()
    }

    fn build_im2col(&self) -> RowMap {
        assert!(self.kernel >= self.stride && (self.kernel - self.stride) % 2 == 0, "kernel/stride parity");
        let start = -(((self.kernel - self.stride) / 2) as isize);
        let (oh, ow, k) = (self.out_height(), self.out_width(), self.kernel);
        let mut entries = Vec::with_capacity(oh * ow * k * k);
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * self.stride) as isize + start + ky as isize;
                        let ix = (ox * self.stride) as isize + start + kx as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < self.height && (ix as usize) < self.width {
                            entries.push(vec![(iy as usize * self.width + ix as usize, 1.0)]);
                        } else {
                            entries.push(Vec::new());
                        }
                    }
                }
            }
        }
        RowMap::new(self.height * self.width, entries)
    }
}

/// 2D convolution implemented as patch extraction followed by an affine map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub geometry: ConvGeometry,
    pub in_channels: usize,
    linear: Linear,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        geometry: ConvGeometry,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let k2 = geometry.kernel * geometry.kernel;
        let linear = Linear::new(ps, name, k2 * in_channels, out_channels, rng);
        Self { geometry, in_channels, linear }
    }

    pub fn without_bias<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        geometry: ConvGeometry,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let k2 = geometry.kernel * geometry.kernel;
        let linear = Linear::without_bias(ps, name, k2 * in_channels, out_channels, rng);
        Self { geometry, in_channels, linear }
    }

    pub fn out_channels(&self) -> usize {
        self.linear.fan_out
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let geo = self.geometry;
        let k2 = geo.kernel * geo.kernel;
        let patches = g.rows(x, geo.im2col());
        let cols = g.reshape(patches, geo.out_height() * geo.out_width(), k2 * self.in_channels);
        self.linear.forward(g, p, cols)
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, clip_norm: Some(10.0), t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Matrix]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.values().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        let norm = grads.iter().map(|g| g.data().iter().map(|a| a * a).sum::<f64>()).sum::<f64>().sqrt();
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                let gv = gv * clip;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
                *pv -= self.lr * (update + self.weight_decay * *pv);
            }
        }
    }
}

/// Cosine decay from `base` at step 0 to zero at `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Gathers the gradients of bound parameters, zeros where none flowed.
pub fn collect_grads(g: &Graph, grads: &crate::autograd::Grads, vars: &[Var]) -> Vec<Matrix> {
    vars.iter().map(|&v| grads.get_or_zeros(v, g)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let geo = ConvGeometry { height: 6, width: 4, kernel: 4, stride: 2 };
        let conv = Conv2d::new(&mut ps, "c", geo, 2, 3, &mut rng);
        ps.get_mut(1).data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
        let x = Matrix::randn(24, 2, 1.0, &mut rng);
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = conv.forward(&mut g, &p, xv);
        let y = g.value(y).clone();
        assert_eq!(y.shape(), (6, 3));
        let w = ps.get(0);
        for oy in 0..3 {
            for ox in 0..2 {
                for oc in 0..3 {
                    let mut s = ps.get(1).get(0, oc);
                    for ky in 0..4 {
                        for kx in 0..4 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 6 || ix >= 4 {
                                continue;
                            }
                            for ic in 0..2 {
                                s += x.get(iy as usize * 4 + ix as usize, ic) * w.get((ky * 4 + kx) * 2 + ic, oc);
                            }
                        }
                    }
                    assert!((y.get(oy * 2 + ox, oc) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut ps = ParamSet::new();
        ps.push("x", Matrix::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..500 {
            let mut g = Graph::new();
            let p = ps.bind(&mut g, true);
            let sq = g.mul(p[0], p[0]);
            let l = g.sum(sq);
            let grads = g.backward(l);
            let gs = collect_grads(&g, &grads, &p);
            opt.step(&mut ps, &gs);
        }
        assert!(ps.get(0).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn checksum_tracks_values() {
        let mut ps = ParamSet::new();
        ps.push("a", Matrix::zeros(2, 2));
        let before = ps.checksum();
        assert_eq!(before, ps.clone().checksum());
        ps.get_mut(0).set(0, 0, 1e-300);
        assert_ne!(before, ps.checksum());
    }
}
