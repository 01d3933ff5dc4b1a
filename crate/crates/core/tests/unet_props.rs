use proptest::prelude::*;
use shipnet_core::chipgen::{generate_chip, ChipSpec};
use shipnet_core::loss::{mean_focal_dice_loss, FocalDiceParams};
use shipnet_core::optim::{sgd_step, SgdConfig};
use shipnet_core::unet::{build_unet, count_params, UNetConfig};
use shipnet_core::Tensor;

fn config_strategy() -> impl Strategy<Value = UNetConfig> {
    (1usize..4, 1usize..3, proptest::collection::vec(1usize..4, 2..4), any::<bool>()).prop_map(
        |(in_channels, num_classes, steps, bottleneck_enabled)| {
            // Strictly increasing widths starting above in_channels.
            let mut c = in_channels;
            let encoder_channels = steps
                .iter()
                .map(|s| {
                    c += s;
                    c
                })
                .collect();
            UNetConfig {
                in_channels,
                num_classes,
                encoder_channels,
                bottleneck_enabled,
            }
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn analytic_count_equals_built_sizes(cfg in config_strategy(), seed in any::<u64>()) {
        let m = build_unet(&cfg, seed).unwrap();
        let built: usize = m.params.iter().map(|p| p.value.numel()).sum();
        prop_assert_eq!(count_params(&cfg).unwrap(), built);
        prop_assert_eq!(m.param_count(), built);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_spatial_dims_match_input(cfg in config_strategy(), n in 1usize..3, hm in 1usize..4, wm in 1usize..4) {
        let f = 1usize << (cfg.encoder_channels.len() - 1);
        let (h, w) = (f * hm, f * wm);
        let m = build_unet(&cfg, 1).unwrap();
        let y = m.predict(&Tensor::full(&[n, cfg.in_channels, h, w], 0.25)).unwrap();
        prop_assert_eq!(y.shape(), &[n, cfg.num_classes, h, w]);
        prop_assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn two_builds_forward_identically() {
    let chip = generate_chip(&ChipSpec::default(), 3).unwrap();
    let x = Tensor::stack(&[chip.image]).unwrap();
    let a = build_unet(&UNetConfig::desk(), 42).unwrap().predict(&x).unwrap();
    let b = build_unet(&UNetConfig::desk(), 42).unwrap().predict(&x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_chip_overfits() {
    let chip = generate_chip(&ChipSpec::default(), 0).unwrap();
    let x = Tensor::stack(&[chip.image]).unwrap();
    let y = Tensor::stack(&[chip.mask]).unwrap();
    let mut m = build_unet(&UNetConfig::desk(), 1).unwrap();
    let cfg = SgdConfig {
        learning_rate: 5e-3,
        ..SgdConfig::default()
    };
    let p = FocalDiceParams::default();
    let mut losses = Vec::new();
    for it in 0..20 {
        let pass = m.forward(&x).unwrap();
        let (loss, g) = mean_focal_dice_loss(pass.output(), &y, &p).unwrap();
        let grads = pass.param_grads(&g).unwrap();
        m.accumulate_grads(&grads).unwrap();
        sgd_step(&mut m.params, &cfg, it).unwrap();
        losses.push(loss);
    }
    let last = *losses.last().unwrap();
    assert!(last < 0.95 * losses[0], "losses {losses:?}");
}

#[test]
fn paper_preset_count_is_reported() {
    const PUBLISHED: usize = 306_270_726;
    let n = count_params(&UNetConfig::paper_preset()).unwrap();
    println!(
        "paper preset: {n} trainable parameters (published {PUBLISHED}, ratio {:.3})",
        n as f64 / PUBLISHED as f64
    );
    assert!(n > 0);
}
