//! Independent reference implementations used as test oracles. Nothing
//! here calls the crate's numeric kernels; it only reads parameters out of
//! a model.

#![allow(dead_code)]

use mdshare::archspec::{Activation, ArchitectureSpec, ConvLayerSpec};
use mdshare::MultiDomainModel;
use rand::Rng;

const EPS: f64 = 1e-5;

/// One domain's network with replacements already applied: plain
/// per-layer weights as if it were a single-domain CNN.
pub struct MergedNet {
    pub arch: ArchitectureSpec,
    /// Per layer: `out × in/groups × kh × kw` weights.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Option<Vec<f64>>>,
    /// Per layer: `(scale, bias, running_mean, running_var)` when the layer
    /// has a BN site.
    pub bn: Vec<Option<[Vec<f64>; 4]>>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
    pub classes: usize,
}

impl MergedNet {
    /// Copies domain `d`'s effective weights out of `model`: channel `f` of
    /// layer `l` comes from the domain's private copy when the plan selects
    /// it and from the shared store otherwise.
    pub fn from_model(model: &MultiDomainModel<f64>, d: usize) -> Self {
        let arch = model.arch().clone();
        let plan = model.plan();
        let overlay = model.overlay(d);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut bn = Vec::new();
        for layer in &arch.layers {
            let l = layer.layer_id;
            let flen = layer.filter_weight_len();
            let shared = &model.shared()[l];
            let spec = &overlay.specific[l];
            let mut w = Vec::with_capacity(layer.out_channels * flen);
            let mut b = layer.has_bias.then(Vec::new);
            for f in 0..layer.out_channels {
                if plan.is_selected(l, f) {
                    let slot = spec.filters.iter().position(|&x| x == f).expect("selected filter has a copy");
                    w.extend_from_slice(&spec.params.weight[slot * flen..(slot + 1) * flen]);
                    if let Some(b) = b.as_mut() {
                        b.push(spec.params.bias.as_ref().unwrap()[slot]);
                    }
                } else {
                    w.extend_from_slice(&shared.weight[f * flen..(f + 1) * flen]);
                    if let Some(b) = b.as_mut() {
                        b.push(shared.bias.as_ref().unwrap()[f]);
                    }
                }
            }
            weights.push(w);
            biases.push(b);
            bn.push(arch.bn_sites.iter().position(|s| s.layer_id == l).map(|site| {
                let a = &overlay.bn[site];
                let s = &model.bn_stats(d)[site];
                [a.scale.clone(), a.bias.clone(), s.mean.clone(), s.var.clone()]
            }));
        }
        let head = &overlay.head;
        Self {
            arch,
            weights,
            biases,
            bn,
            head_w: head.weight.clone(),
            head_b: head.bias.clone(),
            classes: head.num_classes,
        }
    }

    /// Element count of this network's learnable parameters.
    pub fn param_elements(&self) -> u64 {
        let conv: usize = self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().flatten().map(Vec::len).sum::<usize>();
        let bn: usize = self.bn.iter().flatten().map(|b| b[0].len() + b[1].len()).sum();
        (conv + bn + self.head_w.len() + self.head_b.len()) as u64
    }

    /// Evaluation-mode logits for `x` (`n × c × h × w`, row-major).
    pub fn forward(&self, x: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
        let mut outputs: Vec<(Vec<f64>, usize, usize, usize)> = Vec::new();
        let mut cur = (x.to_vec(), c, h, w);
        for (l, layer) in self.arch.layers.iter().enumerate() {
            let (ref input, ic, ih, iw) = cur;
            let (mut y, oh, ow) = naive_conv(input, n, ic, ih, iw, layer, &self.weights[l], self.biases[l].as_deref());
            let oc = layer.out_channels;
            if let Some([scale, bias, mean, var]) = &self.bn[l] {
                for b in 0..n {
                    for ch in 0..oc {
                        let inv = 1.0 / (var[ch] + EPS).sqrt();
                        for p in 0..oh * ow {
                            let v = &mut y[(b * oc + ch) * oh * ow + p];
                            *v = (*v - mean[ch]) * inv * scale[ch] + bias[ch];
                        }
                    }
                }
            }
            if let Some(src) = layer.residual_from {
                let (ref r, ..) = outputs[src];
                for (v, a) in y.iter_mut().zip(r) {
                    *v += a;
                }
            }
            for v in y.iter_mut() {
                *v = match layer.activation {
                    Activation::Relu => v.max(0.0),
                    Activation::Relu6 => v.clamp(0.0, 6.0),
                    Activation::Identity => *v,
                };
            }
            outputs.push((y.clone(), oc, oh, ow));
            cur = (y, oc, oh, ow);
        }
        let (feat, fc, fh, fw) = cur;
        let mut logits = Vec::with_capacity(n * self.classes);
        for b in 0..n {
            let pooled: Vec<f64> = (0..fc)
                .map(|ch| feat[(b * fc + ch) * fh * fw..(b * fc + ch + 1) * fh * fw].iter().sum::<f64>() / (fh * fw) as f64)
                .collect();
            for k in 0..self.classes {
                let row = &self.head_w[k * fc..(k + 1) * fc];
                logits.push(self.head_b[k] + row.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        logits
    }
}

/// Direct seven-loop convolution with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    layer: &ConvLayerSpec,
    weight: &[f64],
    bias: Option<&[f64]>,
) -> (Vec<f64>, usize, usize) {
    let (kh, kw, s, p) = (layer.kernel_h, layer.kernel_w, layer.stride, layer.padding as isize);
    let oh = (h + 2 * layer.padding - kh) / s + 1;
    let ow = (w + 2 * layer.padding - kw) / s + 1;
    let oc_n = layer.out_channels;
    let cin = c / layer.groups;
    let opg = oc_n / layer.groups;
    let mut y = vec![0.0; n * oc_n * oh * ow];
    for b in 0..n {
        for oc in 0..oc_n {
            let grp = oc / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[oc]);
                    for ic in 0..cin {
                        let ch = grp * cin + ic;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky) as isize - p;
                                let ix = (ox * s + kx) as isize - p;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ch) * h + iy as usize) * w + ix as usize];
                                acc += xv * weight[((oc * cin + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    y[((b * oc_n + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (y, oh, ow)
}

/// Conv weight and bias elements of `arch`, counted by allocating each
/// layer's weight tensor shape and multiplying its dimensions out.
pub fn brute_conv_elements(arch: &ArchitectureSpec) -> u64 {
    arch.layers
        .iter()
        .map(|l| {
            let shape = [l.out_channels, l.in_channels / l.groups, l.kernel_h, l.kernel_w];
            let weight: usize = shape.iter().product();
            (weight + if l.has_bias { l.out_channels } else { 0 }) as u64
        })
        .sum()
}

/// Fills every learnable parameter of `model` with fresh random values, so
/// private copies differ from the shared filters.
pub fn randomize(model: &mut MultiDomainModel<f64>, rng: &mut impl Rng) {
    let params = model.params_mut();
    for conv in &mut params.shared {
        conv.weight.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        if let Some(b) = conv.bias.as_mut() {
            b.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
    for o in &mut params.overlays {
        for s in &mut o.specific {
            s.params.weight.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            if let Some(b) = s.params.bias.as_mut() {
                b.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
            }
        }
        for bn in &mut o.bn {
            bn.scale.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
            bn.bias.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
        o.head.weight.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        o.head.bias.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
}

/// Relative closeness with an absolute floor for values near zero.
pub fn rel_close(a: &[f64], b: &[f64], tol: f64) -> Result<(), String> {
    if a.len() != b.len() {
        return Err(format!("length {} vs {}", a.len(), b.len()));
    }
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        let scale = x.abs().max(y.abs()).max(1.0);
        if (x - y).abs() > tol * scale {
            return Err(format!("element {i}: {x} vs {y}"));
        }
    }
    Ok(())
}
