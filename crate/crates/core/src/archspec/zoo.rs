//! Built-in backbone descriptions.

use rand::Rng;

use super::{Activation, ArchitectureSpec, BnSite, ConvLayerSpec};

pub const BUILTIN_NAMES: &[&str] = &["toyT", "desk_cnn", "mobilenet_v2"];

pub fn builtin(name: &str) -> Option<ArchitectureSpec> {
    match name {
        "toyT" => Some(toy_t()),
        "desk_cnn" => Some(desk_cnn()),
        "mobilenet_v2" => Some(mobilenet_v2()),
        _ => None,
    }
}

/// Three-layer toy network: 1→2 (3×3), 2→4 (3×3), 4→4 (1×1), no biases,
/// no BN. Per-filter costs 9, 18 and 4; 106 conv parameters in total.
pub fn toy_t() -> ArchitectureSpec {
    ArchitectureSpec::new(
        "toyT",
        vec![
            ConvLayerSpec::new(0, 1, 2, 3),
            ConvLayerSpec::new(1, 2, 4, 3),
            ConvLayerSpec::new(2, 4, 4, 1),
        ],
        vec![],
        4,
    )
}

/// Small backbone used for desk-scale training on 3×16×16 inputs.
pub fn desk_cnn() -> ArchitectureSpec {
    ArchitectureSpec::new(
        "desk_cnn",
        vec![
            ConvLayerSpec::new(0, 3, 8, 3),
            ConvLayerSpec::new(1, 8, 16, 3).with_stride(2),
            ConvLayerSpec::new(2, 16, 16, 3).with_residual_from(1),
            ConvLayerSpec::new(3, 16, 32, 3).with_stride(2),
        ],
        vec![],
        32,
    )
    .with_bn_everywhere()
}

/// MobileNetV2 (width 1.0) as a layer chain: stem, seventeen inverted
/// residual blocks and the final 1×1 expansion to 1280 channels. 52 conv
/// layers, each followed by BN.
pub fn mobilenet_v2() -> ArchitectureSpec {
    // (expansion, out_channels, repeats, first stride)
    const SETTINGS: [(usize, usize, usize, usize); 7] = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    let mut layers = vec![ConvLayerSpec::new(0, 3, 32, 3)
        .with_stride(2)
        .with_activation(Activation::Relu6)];
    let mut channels = 32;
    for (t, c, n, s) in SETTINGS {
        for i in 0..n {
            let stride = if i == 0 { s } else { 1 };
            let block_input = layers.len() - 1;
            let hidden = channels * t;
            if t != 1 {
                let id = layers.len();
                layers.push(ConvLayerSpec::new(id, channels, hidden, 1).with_activation(Activation::Relu6));
            }
            let id = layers.len();
            layers.push(
                ConvLayerSpec::new(id, hidden, hidden, 3)
                    .with_groups(hidden)
                    .with_stride(stride)
                    .with_activation(Activation::Relu6),
            );
            let id = layers.len();
            let mut project = ConvLayerSpec::new(id, hidden, c, 1).with_activation(Activation::Identity);
            if stride == 1 && channels == c {
                project = project.with_residual_from(block_input);
            }
            layers.push(project);
            channels = c;
        }
    }
    let id = layers.len();
    layers.push(ConvLayerSpec::new(id, channels, 1280, 1).with_activation(Activation::Relu6));
    ArchitectureSpec::new("mobilenet_v2", layers, vec![], 1280).with_bn_everywhere()
}

/// Random valid chain of 1 to `max_layers` small layers: 1×1 or 3×3
/// kernels, optional biases, occasional depthwise layers, strides, residual
/// adds and BN sites.
pub fn random_small<R: Rng + ?Sized>(rng: &mut R, max_layers: usize) -> ArchitectureSpec {
    let n = rng.random_range(1..=max_layers.max(1));
    let mut layers: Vec<ConvLayerSpec> = Vec::with_capacity(n);
    let mut in_ch = rng.random_range(1..=3);
    for id in 0..n {
        let kernel = if rng.random_bool(0.7) { 3 } else { 1 };
        let depthwise = id > 0 && in_ch > 1 && rng.random_bool(0.2);
        let out_ch = if depthwise { in_ch } else { rng.random_range(1..=8) };
        let mut layer = ConvLayerSpec::new(id, in_ch, out_ch, kernel).with_bias(rng.random_bool(0.3));
        if depthwise {
            layer = layer.with_groups(in_ch);
        } else if in_ch % 2 == 0 && out_ch % 2 == 0 && rng.random_bool(0.15) {
            layer = layer.with_groups(2);
        }
        if rng.random_bool(0.2) {
            layer = layer.with_stride(2);
        }
        layer.activation = match rng.random_range(0..3) {
            0 => Activation::Relu,
            1 => Activation::Relu6,
            _ => Activation::Identity,
        };
        if layer.stride == 1 && rng.random_bool(0.4) {
            // Any earlier layer reachable through stride-1 layers only.
            let mut src = id;
            while src > 0 {
                src -= 1;
                if layers[src].out_channels == out_ch {
                    layer.residual_from = Some(src);
                    break;
                }
                if layers[src].stride != 1 {
                    break;
                }
            }
        }
        in_ch = out_ch;
        layers.push(layer);
    }
    let bn_sites = layers
        .iter()
        .filter(|_| rng.random_bool(0.6))
        .map(|l| BnSite {
            layer_id: l.layer_id,
            num_features: l.out_channels,
        })
        .collect();
    let head_in = layers.last().map(|l| l.out_channels).unwrap_or(1);
    ArchitectureSpec::new(format!("random{n}"), layers, bn_sites, head_in)
}
