//! Analytic gradients against central finite differences on a tiny model,
//! in full-precision mode so the only error source is the O(ε²) truncation
//! of the difference quotient.

use charlm_core::model::{HiddenState, Mlstm, MlstmConfig};
use charlm_core::numerics::Precision;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0xA11CE, 0xB0B, 0xCAFE, 0xD00D, 0xE66];

/// Criterion: on an h=4, e=3 model every parameter's analytic gradient
/// matches the central difference within relative error 1e-4, across five
/// random seeds. Seeds vary the weights, the token/target streams, and the
/// incoming hidden state (with one row reset, as in real training).
pub fn gradients_vs_central_differences() -> Result<String, String> {
    let mut total = 0usize;
    let mut worst_rel = 0.0f64;
    let mut worst_abs = 0.0f64;
    for (si, &seed) in SEEDS.iter().enumerate() {
        let cfg = MlstmConfig::new(3, 4, 3);
        let batch = 2usize;
        let steps = 3usize;
        let model = Mlstm::<f64>::init(cfg, Precision::Fp32, seed)
            .map_err(|e| format!("init failed: {e}"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7057);
        let tokens: Vec<u8> = (0..batch * steps).map(|_| rng.gen()).collect();
        let targets: Vec<u8> = (0..batch * steps).map(|_| rng.gen()).collect();

        let mut state = HiddenState::zeros(batch, 4);
        for v in state.h.data_mut() {
            *v = rng.gen_range(-0.4..0.4);
        }
        for v in state.c.data_mut() {
            *v = rng.gen_range(-0.6..0.6);
        }
        state.apply_resets(&[si % 2 == 0, si % 2 == 1]);

        let active = vec![true; batch];
        let denom = (batch * steps) as f64;
        let fwd = model
            .forward_sequence(&tokens, batch, &state)
            .map_err(|e| format!("forward failed: {e}"))?;
        let analytic = model
            .loss_and_backward(&fwd, &targets, &active, denom, 1.0)
            .map_err(|e| format!("backward failed: {e}"))?;

        let loss_of = |m: &Mlstm<f64>| -> f64 {
            let fwd = m.forward_sequence(&tokens, batch, &state).unwrap();
            m.loss_and_backward(&fwd, &targets, &active, denom, 1.0)
                .unwrap()
                .loss_nats
        };

        let eps = 1e-3;
        for ti in 0..analytic.grads.tensors().len() {
            let (name, grad) = analytic.grads.tensors()[ti];
            for k in 0..grad.len() {
                let mut plus = model.clone();
                plus.masters_mut().tensors_mut()[ti].1[k] += eps;
                plus.rebuild_working().map_err(|e| e.to_string())?;
                let mut minus = model.clone();
                minus.masters_mut().tensors_mut()[ti].1[k] -= eps;
                minus.rebuild_working().map_err(|e| e.to_string())?;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let ga = grad[k];
                let diff = (ga - fd).abs();
                let scale = ga.abs().max(fd.abs());
                // Coordinates whose gradient is exactly zero (e.g. embedding
                // rows for bytes absent from this minibatch) get an absolute
                // escape hatch; everything else is held to the relative bound.
                check!(
                    diff <= 1e-4 * scale || diff <= 1e-7,
                    "seed {seed:#x} {name}[{k}]: analytic {ga} vs central difference {fd}"
                );
                // The quotient only means something where the gradient
                // itself is above truncation noise.
                if scale >= 1e-3 {
                    worst_rel = worst_rel.max(diff / scale);
                }
                worst_abs = worst_abs.max(diff);
                total += 1;
            }
        }
        check!(
            total % model.param_count() == 0,
            "swept {total} coordinates, not a multiple of param_count {}",
            model.param_count()
        );
    }
    Ok(format!(
        "{total} coordinates over {} seeds; worst rel {worst_rel:.1e}, worst abs {worst_abs:.1e}",
        SEEDS.len()
    ))
}
