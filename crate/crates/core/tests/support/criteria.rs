//! Acceptance criteria 1-7. Each returns an outcome plus the values it
//! observed, so reruns can be compared bitwise.

use std::time::{Duration, Instant};

use candle_core::{DType, Device};
use edgeforge::augment::{
    flip, local_tps_warp, resize_translate_pad_with, AugmentChain, AugmentParams, FlipMode,
    ResizeTranslate,
};
use edgeforge::edgeops::{
    edit_edges, select_semantic_region, select_stochastic_region, CandidateRegionMap, Donor,
    EditKind, EditStrategy, RegionSource, StochasticShapeParams,
};
use edgeforge::evalmetrics::{
    cluster_lpips_from_matrix, inception_score_from_probs, partition_score, pixel_auroc,
};
use edgeforge::losses::{heatmap_loss, total_loss, LossWeights, StageLosses};
use edgeforge::netarch::{fuse, GeneratorConfig, Stage, StageWeights};
use edgeforge::{EdgeMap, Heatmap, ImageTensor, RegionMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
    pub values: Vec<f64>,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl Outcome {
    fn new(ok: bool, detail: String, values: Vec<f64>, start: Instant, budget_s: f64) -> Self {
        let elapsed = start.elapsed();
        let budget = Duration::from_secs_f64(budget_s);
        Outcome {
            pass: ok && elapsed < budget,
            detail,
            values,
            elapsed,
            budget,
        }
    }

    /// Bit patterns of the observed values.
    pub fn bits(&self) -> Vec<u64> {
        self.values.iter().map(|v| v.to_bits()).collect()
    }
}

fn rand_image(rng: &mut ChaCha8Rng, n: usize) -> ImageTensor {
    ImageTensor::from_fn(n, n, |_, _, _| rng.random())
}

fn rand_edges(rng: &mut ChaCha8Rng, n: usize) -> EdgeMap {
    EdgeMap::from_fn(n, n, |_, _, _| rng.random_bool(0.25) as u8 as f32)
}

fn sum(img: &ImageTensor) -> f64 {
    img.data().iter().map(|&v| v as f64).sum()
}

pub fn c1_fusion_law() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 16;
    let (mut id_ok, mut swap_ok, mut worst) = (true, true, 0.0f32);
    let mut values = Vec::new();
    for _ in 0..1000 {
        let i_in = rand_image(&mut rng, n);
        let t = rand_image(&mut rng, n);
        let h = Heatmap::from_fn(n, n, |_, _, _| rng.random());
        id_ok &= fuse(&i_in, &t, &Heatmap::zeros(n, n)).unwrap() == i_in;
        swap_ok &= fuse(&i_in, &t, &Heatmap::filled(n, n, 1.0)).unwrap() == t;
        let out = fuse(&i_in, &t, &h).unwrap();
        for y in 0..n {
            for x in 0..n {
                let hv = h.get(y, x, 0);
                for c in 0..3 {
                    let direct = i_in.get(y, x, c) * (1.0 - hv) + t.get(y, x, c) * hv;
                    worst = worst.max((out.get(y, x, c) - direct).abs());
                }
            }
        }
        values.push(sum(&out));
    }
    let ok = id_ok && swap_ok && worst <= f32::EPSILON;
    Outcome::new(
        ok,
        format!("H=0 identity {id_ok}, H=1 swap {swap_ok}, max |fuse - direct| {worst:.1e}"),
        values,
        start,
        5.0,
    )
}

pub fn c2_loss_arithmetic() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = RegionMask::from_fn(8, 8, |_, _| rng.random_bool(0.4));
    let eq = heatmap_loss(&m.to_heatmap(), &m).unwrap();
    let max = heatmap_loss(&Heatmap::filled(8, 8, 1.0), &RegionMask::empty(8, 8)).unwrap();
    let half = heatmap_loss(&Heatmap::filled(8, 8, 0.5), &m).unwrap();
    let parts = StageLosses {
        perceptual: 1.0,
        adversarial: 0.5,
        heatmap: Some(0.04),
    };
    let lw = LossWeights {
        w_fh: 10.0,
        ..Default::default()
    };
    let flare = total_loss(Stage::Flare, &parts, &lw).unwrap();
    let ok = eq == 0.0 && max == 1.0 && half == 0.25 && (flare - 1.9).abs() <= 1e-9;
    Outcome::new(
        ok,
        format!("heatmap losses ({eq}, {max}, {half}), flare total {flare}"),
        vec![eq, max, half, flare],
        start,
        1.0,
    )
}

pub fn c3_gradient_checks() -> Outcome {
    let start = Instant::now();
    let checks = super::gradcheck::run_all().unwrap();
    let ok = checks.iter().all(|c| c.pass);
    let detail = checks
        .iter()
        .map(|c| format!("{} {:.1e}", c.term, c.worst_rel))
        .collect::<Vec<_>>()
        .join(", ");
    let straddling: usize = checks.iter().map(|c| c.straddling).sum();
    let values = checks
        .iter()
        .flat_map(|c| c.pairs.iter().flat_map(|&(a, n)| [a, n]))
        .collect();
    Outcome::new(
        ok,
        format!("worst relative error: {detail}; {straddling} kink-straddling draws redrawn"),
        values,
        start,
        60.0,
    )
}

/// Image whose channels encode the source row and column; the edge map
/// carries the row ramp.
fn coordinate_grid(n: usize) -> (ImageTensor, EdgeMap) {
    let s = (n - 1) as f32;
    (
        ImageTensor::from_fn(n, n, |y, x, c| match c {
            0 => y as f32 / s,
            1 => x as f32 / s,
            _ => 0.5,
        }),
        EdgeMap::from_fn(n, n, |y, _, _| y as f32 / s),
    )
}

pub fn c4_augmentation_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let zero_tps = AugmentParams {
        tps_max_shift: 0.0,
        ..Default::default()
    };
    let unit = ResizeTranslate::new(1.0, (0.0, 0.0)).unwrap();
    let (mut tps_ok, mut rtp_ok, mut flip_ok) = (true, true, true);
    for i in 0..100 {
        let n = 16 + 4 * (i % 5);
        let img = rand_image(&mut rng, n);
        let edge = rand_edges(&mut rng, n);
        tps_ok &= local_tps_warp(&img, &edge, &zero_tps, i as u64).unwrap()
            == (img.clone(), edge.clone());
        rtp_ok &= resize_translate_pad_with(&img, &edge, unit, 0.3).unwrap()
            == (img.clone(), edge.clone());
        for mode in [FlipMode::None, FlipMode::TopBottom, FlipMode::LeftRight] {
            let (a, b) = flip(&img, &edge, mode);
            flip_ok &= flip(&a, &b, mode) == (img.clone(), edge.clone());
        }
    }
    // geometric consistency: the row ramp must land in the same place in
    // both outputs, and resize-translate must move it as the affine map says
    let n = 32;
    let (grid, ramp) = coordinate_grid(n);
    let params = AugmentParams {
        apply_prob: 1.0,
        tps_max_shift: 0.2,
        pad_value: 0.0,
        ..Default::default()
    };
    let (mut consistent, mut worst_affine) = (true, 0.0f32);
    let mut values = Vec::new();
    for seed in 0..50 {
        let chain = AugmentChain::sample(n, n, &params, seed).unwrap();
        let (img, edge) = chain.apply(&grid, &ramp).unwrap();
        consistent &= img.raster().channel(0) == *edge.raster();
        values.push(sum(&img));
        let scale = rng.random_range(0.6f32..1.0);
        let shift = (
            rng.random_range(-4.0f32..4.0),
            rng.random_range(-4.0f32..4.0),
        );
        let rt = ResizeTranslate::new(scale, shift).unwrap();
        let (img, _) = resize_translate_pad_with(&grid, &ramp, rt, 0.0).unwrap();
        let c = (n - 1) as f32 / 2.0;
        for y in 0..n {
            for x in 0..n {
                let sy = (y as f32 - c - shift.0) / scale + c;
                let sx = (x as f32 - c - shift.1) / scale + c;
                // interior only: bilinear sampling reproduces a linear ramp
                if sy >= 0.0 && sx >= 0.0 && sy <= (n - 1) as f32 && sx <= (n - 1) as f32 {
                    worst_affine = worst_affine.max((img.get(y, x, 0) - sy / (n - 1) as f32).abs());
                    worst_affine = worst_affine.max((img.get(y, x, 1) - sx / (n - 1) as f32).abs());
                }
            }
        }
    }
    let ok = tps_ok && rtp_ok && flip_ok && consistent && worst_affine < 1e-4;
    Outcome::new(
        ok,
        format!(
            "zero-TPS {tps_ok}, unit-RTP {rtp_ok}, flip twice {flip_ok}, image/edge consistent {consistent}, affine grid error {worst_affine:.1e}"
        ),
        values,
        start,
        30.0,
    )
}

fn random_regions(rng: &mut ChaCha8Rng, n: usize) -> Vec<RegionMask> {
    (0..rng.random_range(1..5))
        .map(|_| {
            let (y0, x0) = (rng.random_range(0..n - 4), rng.random_range(0..n - 4));
            let (hh, ww) = (rng.random_range(2..n - y0), rng.random_range(2..n - x0));
            RegionMask::from_fn(n, n, |y, x| {
                y >= y0 && y < y0 + hh && x >= x0 && x < x0 + ww
            })
        })
        .collect()
}

pub fn c5_edit_locality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 32;
    let shapes = StochasticShapeParams::default();
    let (mut local, mut fidelity, mut blank) = (true, true, true);
    let mut values = Vec::new();
    for case in 0..200 {
        let edge = rand_edges(&mut rng, n);
        let region = if case % 2 == 0 {
            let cands =
                CandidateRegionMap::new(random_regions(&mut rng, n), RegionSource::Semantic);
            select_semantic_region(&cands, (1, 2), rng.random()).unwrap()
        } else {
            select_stochastic_region(n, n, (1, 2), &shapes, rng.random()).unwrap()
        };
        let donor = Donor {
            edge: rand_edges(&mut rng, n),
            region: select_stochastic_region(n, n, (1, 1), &shapes, rng.random()).unwrap(),
        };
        let strategy = match case % 3 {
            0 => EditStrategy::remove(),
            1 => EditStrategy::replace(donor.clone()),
            _ => EditStrategy::merge(donor.clone()),
        };
        let (out, m) = edit_edges(&edge, &region, &strategy).unwrap();
        fidelity &= m == region;
        for y in 0..n {
            for x in 0..n {
                if !region.contains(y, x) {
                    local &= out.get(y, x, 0) == edge.get(y, x, 0);
                }
            }
        }
        let blank_donor = Donor {
            edge: EdgeMap::zeros(n, n),
            region: donor.region.clone(),
        };
        let replaced = edit_edges(&edge, &region, &EditStrategy::replace(blank_donor)).unwrap();
        let removed = edit_edges(&edge, &region, &EditStrategy::remove()).unwrap();
        blank &= replaced == removed;
        assert_eq!(strategy.kind == EditKind::Remove, strategy.donor.is_none());
        values.push(out.data().iter().map(|&v| v as f64).sum());
    }
    Outcome::new(
        local && fidelity && blank,
        format!("unchanged outside M {local}, M equals selection {fidelity}, replace-with-blank = remove {blank}"),
        values,
        start,
        30.0,
    )
}

/// Minimum score over every split of 4 items into two pairs.
fn brute_force_4x2(d: &[Vec<f64>]) -> f64 {
    [[[0, 1], [2, 3]], [[0, 2], [1, 3]], [[0, 3], [1, 2]]]
        .iter()
        .map(|p| partition_score(d, &[p[0].to_vec(), p[1].to_vec()]))
        .fold(f64::INFINITY, f64::min)
}

pub fn c6_metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cluster_ok = true;
    let mut values = Vec::new();
    for _ in 0..20 {
        let mut block = [0, 0, 1, 1];
        for i in (1..4).rev() {
            block.swap(i, rng.random_range(0..=i));
        }
        let mut d = vec![vec![0.0; 4]; 4];
        for i in 0..4 {
            for j in i + 1..4 {
                let v = if block[i] == block[j] {
                    rng.random_range(0.0..0.1)
                } else {
                    rng.random_range(1.0..2.0)
                };
                d[i][j] = v;
                d[j][i] = v;
            }
        }
        let greedy = cluster_lpips_from_matrix(&d, 2).unwrap();
        cluster_ok &= (greedy - brute_force_4x2(&d)).abs() < 1e-12;
        values.push(greedy);
    }
    let (is, _) = inception_score_from_probs(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1).unwrap();
    let m = RegionMask::from_fn(8, 8, |y, x| y > 2 && x < 5);
    let h = m.to_heatmap();
    let inv = Heatmap::from_fn(8, 8, |y, x, _| 1.0 - h.get(y, x, 0));
    let aucs = [
        pixel_auroc(&[h], &[m.clone()]).unwrap(),
        pixel_auroc(&[inv], &[m.clone()]).unwrap(),
        pixel_auroc(&[Heatmap::filled(8, 8, 0.7)], &[m]).unwrap(),
    ];
    values.push(is);
    values.extend(aucs);
    let ok = cluster_ok && (is - 2.0).abs() <= 1e-6 && aucs == [1.0, 0.0, 0.5];
    Outcome::new(
        ok,
        format!("greedy = brute force on 20 instances {cluster_ok}, IS {is}, AUROC {aucs:?}"),
        values,
        start,
        30.0,
    )
}

pub fn c7_architecture_unification() -> Outcome {
    let start = Instant::now();
    let cfg = GeneratorConfig::default();
    let sigs: Vec<_> = [Stage::Boot, Stage::Flare, Stage::Blaze]
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            StageWeights::init(&cfg, s, 70 + i as u64, DType::F32, &Device::Cpu)
                .unwrap()
                .architecture_signature()
        })
        .collect();
    let ok = sigs[0] == sigs[1] && sigs[1] == sigs[2] && !sigs[0].is_empty();
    let count: usize = sigs[0]
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    Outcome::new(
        ok,
        format!(
            "{} tensors, {count} parameters per stage, shape lists identical {ok}",
            sigs[0].len()
        ),
        vec![sigs[0].len() as f64, count as f64],
        start,
        10.0,
    )
}
