//! A small convolutional network with hand-written backpropagation.
//!
//! Layout: two 3×3 (or 3×3×3) stride-2 convolutions with ReLU, a ReLU fully
//! connected layer and a linear head. Planar nets are the volumetric case with
//! depth 1 and a depth-1 kernel. All parameters live in one flat vector:
//! `[conv1.w, conv1.b, conv2.w, conv2.b, fc.w, fc.b, head.w, head.b]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetSpec {
    pub in_channels: usize,
    /// Input extent `[depth, height, width]`.
    pub in_shape: [usize; 3],
    /// Kernel extent per axis, 1 or 3.
    pub kernel: [usize; 3],
    pub channels: [usize; 2],
    pub hidden: usize,
    pub outputs: usize,
}

impl NetSpec {
    /// Sinogram-domain Q-network: 3×3 kernels on a planar observation.
    pub fn planar(in_channels: usize, hw: usize, outputs: usize) -> Self {
        NetSpec {
            in_channels,
            in_shape: [1, hw, hw],
            kernel: [1, 3, 3],
            channels: [8, 16],
            hidden: 128,
            outputs,
        }
    }

    /// Volume-domain Q-network: 3×3×3 kernels on a cubic observation.
    pub fn volumetric(in_channels: usize, n: usize, outputs: usize) -> Self {
        NetSpec {
            in_channels,
            in_shape: [n, n, n],
            kernel: [3, 3, 3],
            channels: [8, 16],
            hidden: 128,
            outputs,
        }
    }

    fn conv_out(n: usize, k: usize) -> usize {
        if k == 1 {
            n
        } else {
            (n + 2 - k) / 2 + 1
        }
    }

    fn shape_after(&self, layer: usize) -> [usize; 3] {
        let mut s = self.in_shape;
        for _ in 0..layer {
            for a in 0..3 {
                s[a] = Self::conv_out(s[a], self.kernel[a]);
            }
        }
        s
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_shape.iter().product::<usize>()
    }

    fn flat_len(&self) -> usize {
        self.channels[1] * self.shape_after(2).iter().product::<usize>()
    }

    fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    fn layer_sizes(&self) -> [usize; 8] {
        let k = self.kernel_len();
        [
            self.channels[0] * self.in_channels * k,
            self.channels[0],
            self.channels[1] * self.channels[0] * k,
            self.channels[1],
            self.hidden * self.flat_len(),
            self.hidden,
            self.outputs * self.hidden,
            self.outputs,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes().iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.in_channels > 0
            && self.in_shape.iter().all(|&n| n > 0)
            && self.kernel.iter().all(|&k| k == 1 || k == 3)
            && self.channels.iter().all(|&c| c > 0)
            && self.hidden > 0
            && self.outputs > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid network spec {self:?}")))
        }
    }

    fn offsets(&self) -> [usize; 9] {
        let mut o = [0; 9];
        for (i, s) in self.layer_sizes().iter().enumerate() {
            o[i + 1] = o[i] + s;
        }
        o
    }
}

/// Forward-pass intermediates needed for backpropagation.
#[derive(Clone, Debug)]
pub struct Activations {
    pub input: Vec<f64>,
    /// Pre-activations of the three ReLU layers.
    pub pre: [Vec<f64>; 3],
    pub output: Vec<f64>,
}

impl Activations {
    /// Which ReLU units are active.
    pub fn pattern(&self) -> Vec<bool> {
        self.pre.iter().flatten().map(|&v| v > 0.0).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    pub spec: NetSpec,
    pub params: Vec<f64>,
}

struct ConvDims {
    cin: usize,
    cout: usize,
    ins: [usize; 3],
    outs: [usize; 3],
    k: [usize; 3],
}

impl ConvDims {
    fn pad(&self, a: usize) -> isize {
        (self.k[a] / 2) as isize
    }

    fn stride(&self, a: usize) -> usize {
        if self.k[a] == 1 {
            1
        } else {
            2
        }
    }

    /// Calls `f(out_index, in_index, weight_index_within_filter)` for every
    /// in-bounds tap; the channel terms are added by the caller.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [od, oh, ow] = self.outs;
        let [id, ih, iw] = self.ins;
        let [kd, kh, kw] = self.k;
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let o = (z * oh + y) * ow + x;
                    for a in 0..kd {
                        let zz = (z * self.stride(0)) as isize + a as isize - self.pad(0);
                        if zz < 0 || zz >= id as isize {
                            continue;
                        }
                        for b in 0..kh {
                            let yy = (y * self.stride(1)) as isize + b as isize - self.pad(1);
                            if yy < 0 || yy >= ih as isize {
                                continue;
                            }
                            for c in 0..kw {
                                let xx = (x * self.stride(2)) as isize + c as isize - self.pad(2);
                                if xx < 0 || xx >= iw as isize {
                                    continue;
                                }
                                let i = ((zz as usize) * ih + yy as usize) * iw + xx as usize;
                                f(o, i, (a * kh + b) * kw + c);
                            }
                        }
                    }
                }
            }
        }
    }

    fn in_len(&self) -> usize {
        self.ins.iter().product()
    }

    fn out_len(&self) -> usize {
        self.outs.iter().product()
    }

    fn forward(&self, w: &[f64], bias: &[f64], input: &[f64]) -> Vec<f64> {
        let (il, ol, kl) = (self.in_len(), self.out_len(), self.k.iter().product::<usize>());
        let mut out = vec![0.0; self.cout * ol];
        for co in 0..self.cout {
            out[co * ol..(co + 1) * ol].iter_mut().for_each(|v| *v = bias[co]);
        }
        self.for_each_tap(|o, i, t| {
            for co in 0..self.cout {
                let mut acc = 0.0;
                for ci in 0..self.cin {
                    acc += w[(co * self.cin + ci) * kl + t] * input[ci * il + i];
                }
                out[co * ol + o] += acc;
            }
        });
        out
    }

    fn backward(&self, w: &[f64], input: &[f64], dout: &[f64], dw: &mut [f64], db: &mut [f64], din: Option<&mut [f64]>) {
        let (il, ol, kl) = (self.in_len(), self.out_len(), self.k.iter().product::<usize>());
        for co in 0..self.cout {
            db[co] += dout[co * ol..(co + 1) * ol].iter().sum::<f64>();
        }
        match din {
            Some(din) => self.for_each_tap(|o, i, t| {
                for co in 0..self.cout {
                    let g = dout[co * ol + o];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..self.cin {
                        let wi = (co * self.cin + ci) * kl + t;
                        dw[wi] += g * input[ci * il + i];
                        din[ci * il + i] += g * w[wi];
                    }
                }
            }),
            None => self.for_each_tap(|o, i, t| {
                for co in 0..self.cout {
                    let g = dout[co * ol + o];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..self.cin {
                        dw[(co * self.cin + ci) * kl + t] += g * input[ci * il + i];
                    }
                }
            }),
        }
    }
}

fn dense_forward(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(o, &bias)| bias + w[o * x.len()..(o + 1) * x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn dense_backward(w: &[f64], x: &[f64], dout: &[f64], dw: &mut [f64], db: &mut [f64], dx: &mut [f64]) {
    let n = x.len();
    for (o, &g) in dout.iter().enumerate() {
        db[o] += g;
        if g == 0.0 {
            continue;
        }
        for i in 0..n {
            dw[o * n + i] += g * x[i];
            dx[i] += g * w[o * n + i];
        }
    }
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

fn relu_grad(pre: &[f64], d: &mut [f64]) {
    for (g, &p) in d.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

impl ConvNet {
    pub fn zeros(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        Ok(ConvNet {
            params: vec![0.0; spec.param_count()],
            spec,
        })
    }

    /// He-normal weights, zero biases.
    pub fn he_init<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let k = spec.kernel_len();
        let fan_in = [spec.in_channels * k, spec.channels[0] * k, spec.flat_len(), spec.hidden];
        let o = spec.offsets();
        for (layer, &fan) in fan_in.iter().enumerate() {
            let normal = Normal::new(0.0, (2.0 / fan as f64).sqrt()).expect("positive std");
            for w in &mut net.params[o[2 * layer]..o[2 * layer + 1]] {
                *w = normal.sample(rng);
            }
        }
        Ok(net)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn slices(&self) -> [&[f64]; 8] {
        let o = self.spec.offsets();
        std::array::from_fn(|i| &self.params[o[i]..o[i + 1]])
    }

    /// Head weights and bias, for callers that tune the initial output.
    pub fn head_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let o = self.spec.offsets();
        let (w, b) = self.params[o[6]..o[8]].split_at_mut(o[7] - o[6]);
        (w, b)
    }

    fn conv_dims(&self, layer: usize) -> ConvDims {
        let s = &self.spec;
        ConvDims {
            cin: if layer == 0 { s.in_channels } else { s.channels[0] },
            cout: s.channels[layer],
            ins: s.shape_after(layer),
            outs: s.shape_after(layer + 1),
            k: s.kernel,
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_len() {
            return Err(Error::shape(format!(
                "network expects {} inputs, got {}",
                self.spec.input_len(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.output)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<Activations> {
        self.check_input(x)?;
        let p = self.slices();
        let pre1 = self.conv_dims(0).forward(p[0], p[1], x);
        let pre2 = self.conv_dims(1).forward(p[2], p[3], &relu(&pre1));
        let pre3 = dense_forward(p[4], p[5], &relu(&pre2));
        let output = dense_forward(p[6], p[7], &relu(&pre3));
        Ok(Activations {
            input: x.to_vec(),
            pre: [pre1, pre2, pre3],
            output,
        })
    }

    /// Accumulates `∂L/∂params` into `grad` given `∂L/∂output`.
    pub fn backward(&self, act: &Activations, dout: &[f64], grad: &mut [f64]) {
        let p = self.slices();
        let o = self.spec.offsets();
        let a1 = relu(&act.pre[0]);
        let a2 = relu(&act.pre[1]);
        let a3 = relu(&act.pre[2]);

        let mut d3 = vec![0.0; a3.len()];
        {
            let (gw, gb) = grad[o[6]..o[8]].split_at_mut(o[7] - o[6]);
            dense_backward(p[6], &a3, dout, gw, gb, &mut d3);
        }
        relu_grad(&act.pre[2], &mut d3);
        let mut d2 = vec![0.0; a2.len()];
        {
            let (gw, gb) = grad[o[4]..o[6]].split_at_mut(o[5] - o[4]);
            dense_backward(p[4], &a2, &d3, gw, gb, &mut d2);
        }
        relu_grad(&act.pre[1], &mut d2);
        let mut d1 = vec![0.0; a1.len()];
        {
            let (gw, gb) = grad[o[2]..o[4]].split_at_mut(o[3] - o[2]);
            self.conv_dims(1).backward(p[2], &a1, &d2, gw, gb, Some(&mut d1));
        }
        relu_grad(&act.pre[0], &mut d1);
        let (gw, gb) = grad[o[0]..o[2]].split_at_mut(o[1] - o[0]);
        self.conv_dims(0).backward(p[0], &act.input, &d1, gw, gb, None);
    }

    /// Loss `(target − Q(x)[action])²` and its gradient.
    pub fn td_loss_grad(&self, x: &[f64], action: usize, target: f64) -> Result<(f64, Vec<f64>)> {
        if action >= self.spec.outputs {
            return Err(Error::Index {
                index: action,
                limit: self.spec.outputs,
            });
        }
        let act = self.forward_cached(x)?;
        let err = target - act.output[action];
        let mut dout = vec![0.0; self.spec.outputs];
        dout[action] = -2.0 * err;
        let mut grad = vec![0.0; self.params.len()];
        self.backward(&act, &dout, &mut grad);
        Ok((err * err, grad))
    }

    pub fn td_loss(&self, x: &[f64], action: usize, target: f64) -> Result<f64> {
        let q = self.forward(x)?;
        let err = target - q[action];
        Ok(err * err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn paper_sized_counts() {
        assert_eq!(NetSpec::planar(1, 32, 5).param_count(), 133_093);
        assert_eq!(NetSpec::planar(3, 32, 5).param_count(), 133_237);
        assert_eq!(NetSpec::volumetric(3, 16, 5).param_count(), 656 + 3472 + 131_200 + 645);
    }

    #[test]
    fn zero_weights_give_zero_values() {
        let net = ConvNet::zeros(NetSpec::planar(1, 8, 5)).unwrap();
        let x: Vec<f64> = (0..64).map(|i| i as f64).collect();
        assert!(net.forward(&x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = NetSpec::volumetric(2, 6, 5);
        let mut net = ConvNet::he_init(spec, &mut rng).unwrap();
        let x: Vec<f64> = (0..spec.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = net.forward(&x).unwrap();
        let (w, b) = net.head_mut();
        w.iter_mut().for_each(|v| *v *= 2.0);
        b.iter_mut().for_each(|v| *v *= 2.0);
        let q2 = net.forward(&x).unwrap();
        for (a, b) in q.iter().zip(&q2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_input_length_is_rejected() {
        let net = ConvNet::zeros(NetSpec::planar(1, 8, 5)).unwrap();
        assert!(net.forward(&[0.0; 10]).is_err());
    }

    #[test]
    fn matching_target_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = NetSpec::planar(1, 8, 3);
        let net = ConvNet::he_init(spec, &mut rng).unwrap();
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = net.forward(&x).unwrap();
        let (loss, g) = net.td_loss_grad(&x, 1, q[1]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unselected_head_rows_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = NetSpec::planar(1, 8, 4);
        let net = ConvNet::he_init(spec, &mut rng).unwrap();
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, g) = net.td_loss_grad(&x, 2, 5.0).unwrap();
        let o = spec.offsets();
        let h = spec.hidden;
        for a in [0, 1, 3] {
            assert!(g[o[6] + a * h..o[6] + (a + 1) * h].iter().all(|&v| v == 0.0));
            assert_eq!(g[o[7] + a], 0.0);
        }
        assert!(g[o[6] + 2 * h..o[6] + 3 * h].iter().any(|&v| v != 0.0));
    }
}
