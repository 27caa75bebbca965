//! Bit-exact and table-exact checks: the binary16 converters against a
//! reference implementation, and the learning-rate / speedup arithmetic
//! against the published figures they reproduce.

use crate::support::{round_2sf, ulp_2sf};
use charlm_core::ddp::{speedup_report, IterationTiming};
use charlm_core::half::{f16_bits_to_f32, f32_to_f16_bits, Half};
use charlm_core::optimizer::{LrPolicy, LrRule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criterion: every f16 widens to the reference value bit for bit, widening
/// then narrowing is the identity on every non-NaN f16, and a million random
/// f32 bit patterns narrow exactly as the reference does.
pub fn half_conversion_oracle() -> Result<String, String> {
    // Exhaustive widen + round-trip over all 2^16 patterns.
    for bits in 0..=u16::MAX {
        let ours = f16_bits_to_f32(bits);
        let reference = half::f16::from_bits(bits).to_f32();
        if ours.is_nan() || reference.is_nan() {
            check!(
                ours.is_nan() && reference.is_nan(),
                "widen 0x{bits:04x}: NaN class disagrees ({ours} vs {reference})"
            );
        } else {
            check!(
                ours.to_bits() == reference.to_bits(),
                "widen 0x{bits:04x}: got 0x{:08x}, reference 0x{:08x}",
                ours.to_bits(),
                reference.to_bits()
            );
        }
        let back = f32_to_f16_bits(ours);
        if Half(bits).is_nan() {
            check!(Half(back).is_nan(), "round-trip 0x{bits:04x} lost NaN-ness");
        } else {
            check!(
                back == bits,
                "round-trip 0x{bits:04x} came back as 0x{back:04x}"
            );
        }
    }

    // Random narrowing over the full f32 bit space, which exercises overflow
    // to infinity, subnormal rounding, and NaN payload classes.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_F16);
    let trials = 1_000_000u32;
    for _ in 0..trials {
        let word: u32 = rng.gen();
        let x = f32::from_bits(word);
        let ours = f32_to_f16_bits(x);
        let reference = half::f16::from_f32(x).to_bits();
        if Half(reference).is_nan() {
            check!(
                Half(ours).is_nan(),
                "narrow 0x{word:08x}: got 0x{ours:04x}, reference NaN 0x{reference:04x}"
            );
        } else {
            check!(
                ours == reference,
                "narrow 0x{word:08x}: got 0x{ours:04x}, reference 0x{reference:04x}"
            );
        }
    }
    Ok(format!(
        "65536 widen/round-trip + {trials} random narrowings agree with the reference"
    ))
}

/// Published learning-rate table: base rate 5e-4 at batch 128, scaled to
/// large batches by the linear and square-root rules, quoted to two
/// significant figures. The quoted figures were rounded by hand, so the
/// check allows the reproduction to land within one unit of the second
/// significant figure after rounding.
const LR_TABLE: &[(usize, LrRule, f64)] = &[
    (2048, LrRule::Linear, 8.0e-3),
    (2048, LrRule::Sqrt, 2.0e-3),
    (4096, LrRule::Linear, 1.6e-2),
    (4096, LrRule::Sqrt, 2.8e-3),
    (8192, LrRule::Linear, 3.2e-2),
    (8192, LrRule::Sqrt, 4.0e-3),
    (16384, LrRule::Linear, 6.4e-2),
    (16384, LrRule::Sqrt, 5.8e-3),
    (32768, LrRule::Linear, 1.3e-1),
    (32768, LrRule::Sqrt, 8.0e-3),
];

pub fn lr_scaling_table() -> Result<String, String> {
    for &(batch, rule, published) in LR_TABLE {
        let policy = LrPolicy {
            base_lr: 5.0e-4,
            rule,
            batch_size: batch,
            decay_iters: 1,
            max_epochs: 0,
        };
        let computed = policy.initial_lr();
        let rounded = round_2sf(computed);
        let err_ulps = (rounded - published).abs() / ulp_2sf(published);
        check!(
            err_ulps <= 1.0 + 1e-9,
            "batch {batch} {rule:?}: computed {computed:.4e} rounds to {rounded:.4e}, \
             published {published:.4e} ({err_ulps:.2} ulps of the 2nd figure)"
        );
    }
    Ok(format!(
        "{} published rates reproduced to 2 significant figures",
        LR_TABLE.len()
    ))
}

/// Quoted weak-scaling measurements: seconds per iteration at each worker
/// count, and the speedup figure printed next to them. The speedup our
/// report derives from the quoted times must match the quoted speedup to
/// ±0.5x — except for five rows where the quoted speedups are not derivable
/// from the quoted times at any rounding. Three of them (13.6x, 27.2x, 109x
/// in the interleaved group) imply a common unrounded one-worker baseline
/// near 0.774 s/iter rather than the printed 0.81; the other two (14.3x,
/// 55.7x in the non-interleaved group) match what the *interleaved* times
/// yield at those worker counts, i.e. they were apparently computed from
/// the wrong column. For those rows the check asserts the value the quoted
/// times actually yield, and asserts that it genuinely disagrees with the
/// quoted figure, so the discrepancy is pinned rather than glossed over.
struct SpeedupRowSpec {
    n: u32,
    t: f64,
    quoted: f64,
    consistent: bool,
}

struct SpeedupGroup {
    label: &'static str,
    rows: &'static [SpeedupRowSpec],
}

fn speedup_groups() -> Vec<SpeedupGroup> {
    vec![
        SpeedupGroup {
            label: "4096d",
            rows: &[
                SpeedupRowSpec { n: 1, t: 0.81, quoted: 1.0, consistent: true },
                SpeedupRowSpec { n: 8, t: 0.85, quoted: 7.6, consistent: true },
                SpeedupRowSpec { n: 16, t: 1.09, quoted: 14.3, consistent: false },
                SpeedupRowSpec { n: 32, t: 1.11, quoted: 23.4, consistent: true },
                SpeedupRowSpec { n: 64, t: 1.13, quoted: 55.7, consistent: false },
                SpeedupRowSpec { n: 128, t: 1.12, quoted: 92.6, consistent: true },
            ],
        },
        SpeedupGroup {
            label: "4096d-interleaved",
            rows: &[
                SpeedupRowSpec { n: 1, t: 0.81, quoted: 1.0, consistent: true },
                SpeedupRowSpec { n: 8, t: 0.85, quoted: 7.6, consistent: true },
                SpeedupRowSpec { n: 16, t: 0.91, quoted: 13.6, consistent: false },
                SpeedupRowSpec { n: 32, t: 0.91, quoted: 27.2, consistent: false },
                SpeedupRowSpec { n: 64, t: 0.93, quoted: 55.7, consistent: true },
                SpeedupRowSpec { n: 128, t: 0.91, quoted: 109.0, consistent: false },
            ],
        },
        SpeedupGroup {
            label: "8192d-interleaved",
            rows: &[
                SpeedupRowSpec { n: 1, t: 2.01, quoted: 1.0, consistent: true },
                SpeedupRowSpec { n: 8, t: 2.02, quoted: 7.9, consistent: true },
                SpeedupRowSpec { n: 16, t: 2.08, quoted: 15.5, consistent: true },
                SpeedupRowSpec { n: 32, t: 2.05, quoted: 31.4, consistent: true },
                SpeedupRowSpec { n: 64, t: 2.10, quoted: 61.3, consistent: true },
                SpeedupRowSpec { n: 128, t: 2.13, quoted: 120.8, consistent: true },
            ],
        },
    ]
}

pub fn speedup_table() -> Result<String, String> {
    let groups = speedup_groups();
    let mut timings = Vec::new();
    for g in &groups {
        for r in g.rows {
            timings.push(IterationTiming {
                label: g.label.to_string(),
                n_gpus: r.n,
                seconds_per_iter: r.t,
            });
        }
    }
    let report = speedup_report(&timings).map_err(|e| format!("report failed: {e}"))?;

    let mut idx = 0;
    let mut mismatched_rows = 0;
    for g in &groups {
        for want in g.rows {
            let row = &report[idx];
            idx += 1;
            check!(
                row.label == g.label && row.n_gpus == want.n,
                "report row order diverged at {}/{}",
                g.label,
                want.n
            );
            let expected = want.n as f64 * g.rows[0].t / want.t;
            check!(
                (row.speedup - expected).abs() < 1e-9,
                "{}/{}: report says {:.4}x, times give {expected:.4}x",
                g.label,
                want.n,
                row.speedup
            );
            if want.n == 1 {
                check!(
                    row.speedup == 1.0,
                    "{}: baseline row must be exactly 1.0x, got {}",
                    g.label,
                    row.speedup
                );
            }
            if want.consistent {
                check!(
                    (row.speedup - want.quoted).abs() <= 0.5,
                    "{}/{}: derived {:.2}x vs quoted {:.1}x exceeds ±0.5",
                    g.label,
                    want.n,
                    row.speedup,
                    want.quoted
                );
            } else {
                // These quoted figures cannot come from the quoted times;
                // assert the self-consistent value and the disagreement.
                mismatched_rows += 1;
                check!(
                    (row.speedup - want.quoted).abs() > 0.5,
                    "{}/{}: quoted {:.1}x now within ±0.5 of derived {:.2}x — \
                     inconsistency note is stale",
                    g.label,
                    want.n,
                    want.quoted,
                    row.speedup
                );
            }
            let eff = row.speedup / want.n as f64;
            check!(
                (row.efficiency - eff).abs() < 1e-9,
                "{}/{}: efficiency {:.4} != speedup/n {:.4}",
                g.label,
                want.n,
                row.efficiency,
                eff
            );
        }
    }

    // The flagship disagreement: 128 interleaved workers are quoted at 109x,
    // but 128·0.81/0.91 = 113.9x. Pin the derived value tightly.
    let flagship = report
        .iter()
        .find(|r| r.label == "4096d-interleaved" && r.n_gpus == 128)
        .unwrap();
    check!(
        (flagship.speedup - 113.934).abs() < 0.05,
        "128-worker interleaved speedup derived as {:.3}x, expected 113.934x",
        flagship.speedup
    );

    Ok(format!(
        "{} rows checked; {mismatched_rows} quoted figures are unreproducible from the \
         quoted times and are pinned at their derived values",
        report.len()
    ))
}
