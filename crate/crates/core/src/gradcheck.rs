//! Central finite-difference checks of the analytic network and loss
//! gradients, on a small network configuration.

use nalgebra::{DMatrix, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::beliefmap::{encode_target, render_belief, BeliefMap, ChannelMode, HeadConfig, KeypointSet2D, Resolution};
use crate::fusion::{
    cross_attention_backward, cross_attention_block, network_backward, run_network, FusionConfig,
    FusionWeights, ImageTensor, NetworkInput,
};
use crate::metrics::{loss_belief, loss_offset, loss_total, LossConfig};

/// Central difference step.
pub const STEP: f64 = 1e-5;
/// Coordinates whose analytic and numeric gradients are both below this are
/// skipped: there the central difference is dominated by roundoff.
pub const MIN_GRADIENT: f64 = 1e-5;

/// The reduced network used for checking.
pub fn small_config() -> FusionConfig {
    FusionConfig {
        head: HeadConfig {
            input_size: 64,
            ..HeadConfig::default()
        },
        base_channels: 4,
        heads: 2,
        window_sizes: [5, 3, 3],
        attention_layers: 3,
        image_channels: 3,
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

struct Scene {
    prev_image: ImageTensor,
    prev_belief: BeliefMap,
    cur_image: ImageTensor,
    cur_belief: BeliefMap,
    prev_kps: KeypointSet2D,
    cur_kps: KeypointSet2D,
    target: KeypointSet2D,
}

fn scene(cfg: &FusionConfig, rng: &mut ChaCha8Rng) -> Scene {
    let n = cfg.head.input_size;
    let pts = |rng: &mut ChaCha8Rng| {
        KeypointSet2D::new(
            (0..cfg.head.keypoints)
                .map(|_| Vector2::new(rng.random_range(4.0..60.0), rng.random_range(4.0..60.0)))
                .collect(),
        )
    };
    let prev_kps = pts(rng);
    let cur_kps = pts(rng);
    let target = pts(rng);
    let image = |rng: &mut ChaCha8Rng| ImageTensor {
        width: n,
        height: n,
        channels: 3,
        values: (0..3 * n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    Scene {
        prev_image: image(rng),
        prev_belief: render_belief(&prev_kps, &cfg.head, Resolution::Full, ChannelMode::Single),
        cur_image: image(rng),
        cur_belief: render_belief(&cur_kps, &cfg.head, Resolution::Full, ChannelMode::Single),
        prev_kps,
        cur_kps,
        target,
    }
}

fn input(s: &Scene) -> NetworkInput<'_> {
    NetworkInput {
        prev_image: &s.prev_image,
        prev_belief: &s.prev_belief,
        cur_image: &s.cur_image,
        cur_belief: &s.cur_belief,
        prev_keypoints: &s.prev_kps,
        cur_keypoints: &s.cur_kps,
    }
}

/// `L(w_plus) − L(w_minus)`. The belief term is summed as
/// `(a − b)(a + b − 2y)` per cell so the difference does not drown in the
/// rounding of two large totals.
fn loss_change(s: &Scene, tca: bool, cfg: &FusionConfig, w_plus: &FusionWeights, w_minus: &FusionWeights) -> f64 {
    let a = run_network(&input(s), tca, cfg, w_plus).unwrap();
    let b = run_network(&input(s), tca, cfg, w_minus).unwrap();
    let target = encode_target(&s.target, &cfg.head);
    let lc = LossConfig::default();
    let lb: f64 = a
        .heatmaps
        .iter()
        .zip(&b.heatmaps)
        .zip(&target.heatmaps)
        .map(|((x, y), t)| (x - y) * (x + y - 2.0 * t))
        .sum();
    let lo = loss_offset(&a, &s.target, &cfg.head, lc.smooth_l1_beta).0
        - loss_offset(&b, &s.target, &cfg.head, lc.smooth_l1_beta).0;
    loss_total(lb, lo, &lc)
}

fn analytic(s: &Scene, tca: bool, cfg: &FusionConfig, w: &FusionWeights) -> FusionWeights {
    let head = run_network(&input(s), tca, cfg, w).unwrap();
    let target = encode_target(&s.target, &cfg.head);
    let lc = LossConfig::default();
    let (_, gb) = loss_belief(&head, &target).unwrap();
    let (_, go) = loss_offset(&head, &s.target, &cfg.head, lc.smooth_l1_beta);
    let gb: Vec<f64> = gb.iter().map(|g| lc.lambda_b * g).collect();
    let go: Vec<f64> = go.iter().map(|g| lc.lambda_off * g).collect();
    network_backward(&input(s), tca, cfg, w, &gb, &go).unwrap()
}

/// Checks `samples` random coordinates drawn from the weight tensors whose
/// name starts with `prefix`, returning the worst relative error.
///
/// # Panics
/// If no tensor matches `prefix` or too few coordinates carry a gradient.
pub fn check_weight_group(prefix: &str, tca: bool, samples: usize, seed: u64) -> f64 {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = FusionWeights::init(&cfg, seed);
    // nonzero biases so their paths are exercised
    for (name, t) in w.tensors_mut() {
        if name.ends_with(".b1") || name.ends_with(".b2") || name == "decoder.bias" {
            t.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
    let s = scene(&cfg, &mut rng);
    let g = analytic(&s, tca, &cfg, &w);
    let names: Vec<String> = g
        .tensors()
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, _)| n.clone())
        .collect();
    assert!(!names.is_empty(), "no tensors match {prefix}");
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut attempts = 0;
    while checked < samples {
        attempts += 1;
        assert!(attempts < 100 * samples, "{prefix}: too few coordinates with a gradient");
        let name = &names[rng.random_range(0..names.len())];
        let gt = g.tensors().into_iter().find(|(n, _)| n == name).unwrap().1.clone();
        let (r, c) = (rng.random_range(0..gt.nrows()), rng.random_range(0..gt.ncols()));
        let a = gt[(r, c)];
        let mut wp = w.clone();
        let mut wm = w.clone();
        bump(&mut wp, name, r, c, STEP);
        bump(&mut wm, name, r, c, -STEP);
        let num = loss_change(&s, tca, &cfg, &wp, &wm) / (2.0 * STEP);
        if a.abs().max(num.abs()) < MIN_GRADIENT {
            continue;
        }
        worst = worst.max(rel_err(a, num));
        checked += 1;
    }
    worst
}

fn bump(w: &mut FusionWeights, name: &str, r: usize, c: usize, h: f64) {
    let t: &mut DMatrix<f64> = w.tensors_mut().into_iter().find(|(n, _)| n == name).unwrap().1;
    t[(r, c)] += h;
}

/// Worst relative error of the attention block's query and key/value
/// gradients over `samples` coordinates each.
pub fn check_attention_inputs(samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = small_config();
    let w = FusionWeights::init(&cfg, seed);
    let rand = |rng: &mut ChaCha8Rng, r, c| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let q = rand(&mut rng, 9, 4);
    let kv = rand(&mut rng, 9, 4);
    let up = rand(&mut rng, 9, 4);
    let f = |q: &DMatrix<f64>, kv: &DMatrix<f64>| {
        cross_attention_block(q, kv, &w.attention[0], 2).unwrap().component_mul(&up).sum()
    };
    let g = cross_attention_backward(&q, &kv, &w.attention[0], 2, &up).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let (r, c) = (rng.random_range(0..9), rng.random_range(0..4));
        let (mut qp, mut qm) = (q.clone(), q.clone());
        qp[(r, c)] += STEP;
        qm[(r, c)] -= STEP;
        worst = worst.max(rel_err(g.d_query[(r, c)], (f(&qp, &kv) - f(&qm, &kv)) / (2.0 * STEP)));
        let (mut kp, mut km) = (kv.clone(), kv.clone());
        kp[(r, c)] += STEP;
        km[(r, c)] -= STEP;
        worst = worst.max(rel_err(g.d_kv[(r, c)], (f(&q, &kp) - f(&q, &km)) / (2.0 * STEP)));
    }
    worst
}

/// Worst relative errors of the belief and offset loss gradients over
/// `samples` coordinates each; half of the offset coordinates are supervised
/// cells.
pub fn check_loss_gradients(samples: usize, seed: u64) -> (f64, f64) {
    let head_cfg = HeadConfig {
        input_size: 64,
        ..HeadConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = KeypointSet2D::new(
        (0..7)
            .map(|_| Vector2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)))
            .collect(),
    );
    let target = encode_target(&gt, &head_cfg);
    let mut pred = target.clone();
    pred.heatmaps.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
    pred.offsets.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
    let (_, gb) = loss_belief(&pred, &target).unwrap();
    let (_, go) = loss_offset(&pred, &gt, &head_cfg, 1.0);
    let (mut worst_b, mut worst_o) = (0.0f64, 0.0f64);
    for _ in 0..samples {
        let i = rng.random_range(0..pred.heatmaps.len());
        let (mut p, mut m) = (pred.clone(), pred.clone());
        p.heatmaps[i] += STEP;
        m.heatmaps[i] -= STEP;
        let num = (loss_belief(&p, &target).unwrap().0 - loss_belief(&m, &target).unwrap().0) / (2.0 * STEP);
        worst_b = worst_b.max(rel_err(gb[i], num));
    }
    let supervised: Vec<usize> = (0..go.len()).filter(|&i| go[i] != 0.0).collect();
    for k in 0..samples {
        let i = if k % 2 == 0 {
            supervised[k / 2 % supervised.len()]
        } else {
            rng.random_range(0..go.len())
        };
        let (mut p, mut m) = (pred.clone(), pred.clone());
        p.offsets[i] += STEP;
        m.offsets[i] -= STEP;
        let num = (loss_offset(&p, &gt, &head_cfg, 1.0).0 - loss_offset(&m, &gt, &head_cfg, 1.0).0) / (2.0 * STEP);
        worst_o = worst_o.max(rel_err(go[i], num));
    }
    (worst_b, worst_o)
}
