#![allow(dead_code)]

use shipnet_core::chipgen::ChipSpec;
use shipnet_core::unet::{build_unet, ModelState, UNetConfig};
use shipnet_core::Tensor;
use shipnet_dataserver::{serve, Client, ServerConfig, ServerHandle};
use shipnet_train::dataset::populate;
use shipnet_train::keys::{TRAIN_PREFIX, VAL_PREFIX};

pub fn tiny_config() -> UNetConfig {
    UNetConfig {
        in_channels: 3,
        num_classes: 1,
        encoder_channels: vec![4, 8],
        bottleneck_enabled: true,
    }
}

pub fn tiny_model(seed: u64) -> ModelState {
    build_unet(&tiny_config(), seed).unwrap()
}

pub fn spec() -> ChipSpec {
    ChipSpec {
        height: 32,
        width: 32,
        ship_length: (8.0, 12.0),
        ..ChipSpec::default()
    }
}

pub fn server() -> ServerHandle {
    serve("127.0.0.1:0", ServerConfig::default()).unwrap()
}

pub fn client(h: &ServerHandle) -> Client {
    Client::connect(h.addr()).unwrap()
}

/// Server holding `n_train` training chips and `n_val` validation chips.
pub fn populated(n_train: u64, n_val: u64) -> (ServerHandle, Vec<String>, Vec<String>) {
    let h = server();
    let mut c = client(&h);
    let train = populate(&mut c, &spec(), 0..n_train, TRAIN_PREFIX).unwrap();
    let val = populate(&mut c, &spec(), n_train..n_train + n_val, VAL_PREFIX).unwrap();
    (h, train, val)
}

/// max |a - b| / max(max |a|, max |b|) over one tensor pair.
pub fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        diff = diff.max((x as f64 - y as f64).abs());
        scale = scale.max((x as f64).abs()).max((y as f64).abs());
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Largest per-parameter relative difference between two models.
pub fn model_rel_diff(a: &ModelState, b: &ModelState) -> f64 {
    a.params
        .iter()
        .zip(&b.params)
        .map(|(p, q)| {
            assert_eq!(p.name, q.name);
            rel_diff(&p.value, &q.value)
        })
        .fold(0.0, f64::max)
}

pub fn bits(m: &ModelState) -> Vec<u32> {
    m.params.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
}
