//! Named architectures for the two 28x28 grayscale benchmarks.

use super::tree::{RouterSource, TreeSpec};
use crate::error::{CignError, Result};
use crate::substrate::LayerSpec as L;

/// A named tree layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub summary: &'static str,
    pub spec: TreeSpec,
}

const NAMES: [&str; 8] = [
    "mnist-baseline",
    "mnist-thin",
    "mnist-cign-independent",
    "mnist-cign-fed",
    "fashion-baseline",
    "fashion-thin",
    "fashion-cign-independent",
    "fashion-cign-fed",
];

pub fn preset_names() -> &'static [&'static str] {
    &NAMES
}

fn conv(k: usize, f: usize) -> Vec<L> {
    vec![L::conv(k, f), L::Relu]
}

fn conv_pool(k: usize, f: usize) -> Vec<L> {
    vec![L::conv(k, f), L::Relu, L::pool(2, 2)]
}

fn plain(classes: usize, layers: Vec<L>) -> TreeSpec {
    TreeSpec {
        input_shape: [1, 28, 28],
        classes,
        branching: Vec::new(),
        split_f: Vec::new(),
        split_h: Vec::new(),
        leaf_f: layers,
        router_source: RouterSource::Independent,
    }
}

fn cat(parts: &[Vec<L>]) -> Vec<L> {
    parts.concat()
}

fn mnist_expert(c2: usize, hidden: usize) -> Vec<L> {
    cat(&[conv_pool(5, 20), conv_pool(5, c2), vec![L::fc(hidden), L::Relu, L::fc(10)]])
}

fn mnist_cign(router_source: RouterSource) -> TreeSpec {
    let h = match router_source {
        RouterSource::Independent => cat(&[conv_pool(5, 1), vec![L::Flatten, L::fc(16), L::Relu]]),
        RouterSource::FedFromF { .. } => vec![L::pool(2, 2), L::Flatten, L::fc(24), L::Relu],
    };
    TreeSpec {
        input_shape: [1, 28, 28],
        classes: 10,
        branching: vec![2, 2],
        split_f: vec![conv_pool(5, 20), conv_pool(5, 15)],
        split_h: vec![h.clone(), h],
        leaf_f: vec![L::fc(25), L::Relu, L::fc(10)],
        router_source,
    }
}

fn fashion_expert(c1: usize, c2: usize, c3: usize, hidden: usize, dropout: f64) -> Vec<L> {
    cat(&[
        conv_pool(3, c1),
        conv_pool(3, c2),
        conv(3, c3),
        vec![L::fc(hidden), L::Relu, L::dropout(dropout), L::fc(10)],
    ])
}

fn fashion_cign(router_source: RouterSource) -> TreeSpec {
    let (h, leaf_dropout) = match router_source {
        RouterSource::Independent => (
            cat(&[conv(3, 16), vec![L::pool(2, 2), L::pool(2, 2), L::Flatten, L::fc(32), L::Relu, L::dropout(0.35)]]),
            0.2,
        ),
        RouterSource::FedFromF { .. } => (vec![L::pool(2, 2), L::Flatten, L::fc(64), L::Relu, L::dropout(0.35)], 0.15),
    };
    TreeSpec {
        input_shape: [1, 28, 28],
        classes: 10,
        branching: vec![2, 2],
        split_f: vec![cat(&[conv_pool(3, 24), conv_pool(3, 120)]), conv(3, 64)],
        split_h: vec![h.clone(), h],
        leaf_f: vec![L::fc(32), L::Relu, L::dropout(leaf_dropout), L::fc(10)],
        router_source,
    }
}

/// Looks up a named architecture.
pub fn preset(name: &str) -> Result<Preset> {
    let fed = || RouterSource::FedFromF { taps: None };
    let (summary, spec) = match name {
        "mnist-baseline" => {
            ("two 5x5 conv layers (20, 50) with pooling, FC 500, FC 10", plain(10, mnist_expert(50, 500)))
        }
        "mnist-thin" => ("baseline topology with 15 second-layer filters and FC 25", plain(10, mnist_expert(15, 25))),
        "mnist-cign-independent" => ("[2,2] tree, routers on the raw image", mnist_cign(RouterSource::Independent)),
        "mnist-cign-fed" => ("[2,2] tree, routers on pooled F outputs", mnist_cign(fed())),
        "fashion-baseline" => (
            "three 3x3 conv layers (48, 128, 192), FC 256 with dropout, FC 10",
            plain(10, fashion_expert(48, 128, 192, 256, 0.35)),
        ),
        "fashion-thin" => {
            ("baseline topology at widths 24, 120, 64 and FC 32", plain(10, fashion_expert(24, 120, 64, 32, 0.35)))
        }
        "fashion-cign-independent" => ("[2,2] tree, routers on the raw image", fashion_cign(RouterSource::Independent)),
        "fashion-cign-fed" => ("[2,2] tree, routers on F outputs", fashion_cign(fed())),
        other => {
            return Err(CignError::Config(format!(
                "unknown model preset {other:?}; expected one of {}",
                NAMES.join(", ")
            )))
        }
    };
    let name = NAMES.iter().find(|n| **n == name).expect("listed");
    Ok(Preset { name, summary, spec })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for n in preset_names() {
            preset(n).unwrap().spec.validate().unwrap();
        }
    }

    #[test]
    fn unknown_name_is_config_error() {
        assert!(matches!(preset("lenet"), Err(CignError::Config(_))));
    }
}
