use wmrobust_core::config::ArchConfig;
use wmrobust_core::gradcheck::{check_attack, check_networks};
use wmrobust_core::{AttackKind, LossWeights};

const TOL: f64 = 1e-2;

fn small_arch(side: usize) -> ArchConfig {
    ArchConfig {
        image_height: side,
        image_width: side,
        message_length: 4,
        channels: 4,
        encoder_blocks: 1,
        encoder_post_blocks: 1,
        decoder_blocks: 2,
        discriminator_blocks: 1,
        discriminator_channels: 4,
        ..ArchConfig::default()
    }
}

#[test]
fn attack_pullbacks_match_finite_differences() {
    let cases: &[(AttackKind, &[f64], usize)] = &[
        (AttackKind::Identity, &[0.0], 8),
        (AttackKind::Crop, &[0.3, 0.5, 0.8], 16),
        (AttackKind::Cropout, &[0.3, 0.6, 0.9], 8),
        (AttackKind::Dropout, &[0.3, 0.6, 0.9], 8),
        (AttackKind::GaussianBlur, &[1.0, 3.0, 5.0], 8),
        (AttackKind::Jpeg, &[50.0, 80.0, 100.0], 8),
    ];
    for &(kind, severities, side) in cases {
        for &s in severities {
            let c = check_attack(kind, s, side, side, 7).unwrap();
            assert!(c.passes(TOL), "{c:?}");
        }
    }
}

#[test]
fn network_gradients_match_finite_differences() {
    let plans = [
        (AttackKind::Identity, 0.0, 8),
        (AttackKind::Dropout, 0.5, 8),
        (AttackKind::GaussianBlur, 2.0, 8),
        (AttackKind::Jpeg, 60.0, 8),
        (AttackKind::Crop, 0.5, 16),
    ];
    for (kind, s, side) in plans {
        for c in check_networks(&small_arch(side), kind, s, LossWeights::default(), 4, 3).unwrap() {
            assert!(c.passes(TOL), "{c:?}");
        }
    }
}

#[test]
fn adversarial_term_gradient() {
    let weights = LossWeights {
        lambda_image: 0.0,
        lambda_adv: 1.0,
    };
    for c in check_networks(&small_arch(8), AttackKind::Identity, 0.0, weights, 4, 11).unwrap() {
        assert!(c.passes(TOL), "{c:?}");
    }
}
