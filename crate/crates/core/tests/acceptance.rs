//! Acceptance criteria 1 to 11. Each test prints one `criterion N: PASS|FAIL`
//! line (directly on stderr, so it shows even when output is captured) and
//! then asserts.

use std::io::Write as _;
use std::time::{Duration, Instant};

use fuselage::atlas::{label_table, AtlasSet};
use fuselage::cli::{cmd_jackknife, cmd_segment, JackknifeArgs, ModelArgs, SegmentArgs, SelectBy};
use fuselage::intensity::BiasModel;
use fuselage::metrics::{dice, generalized_dice, report, tenengrad};
use fuselage::phantom::{
    brute_force_edt, exact_membership_posterior, gaussian_blur, generate,
    PhantomConfig, PhantomInfo, TinyProblem,
};
use fuselage::prior::signed_edt;
use fuselage::vem::{apply_mask_rule, run_vem, VemConfig, VemState};
use fuselage::volume::{GridMeta, LabelVolume, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, pass: bool, detail: String) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

/// Mean-field marginals after `sweeps` sweeps with the problem's true mixture.
fn meanfield(p: &TinyProblem, sweeps: usize) -> VemState {
    let cfg = VemConfig {
        meanfield_sweeps_per_estep: sweeps,
        ..p.vem_config()
    };
    let mut s = VemState::initialize(&p.atlases, &p.image, &p.mask, &label_table(), &cfg).unwrap();
    s.set_mixture(p.mixture.clone()).unwrap();
    s.e_step().unwrap();
    s
}

#[test]
fn criterion_01_exact_at_beta_zero() {
    let t0 = Instant::now();
    let shapes = [[2, 2, 2], [2, 2, 1], [2, 1, 1], [1, 1, 2], [1, 2, 2]];
    let mut worst: f64 = 0.0;
    let n_instances = 60;
    for seed in 0..n_instances {
        let dims = shapes[seed as usize % shapes.len()];
        let n = 1 + (seed as usize / shapes.len()) % 3;
        let p = TinyProblem::random(1000 + seed, dims, n, 0.0).unwrap();
        let exact = exact_membership_posterior(&p).unwrap();
        let s = meanfield(&p, 1);
        for pos in 0..exact.voxels.len() {
            for (a, b) in s.membership().row(pos).iter().zip(exact.membership_row(pos)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let el = t0.elapsed();
    verdict(
        1,
        worst <= 1e-9 && within(el, 10),
        format!("{n_instances} instances, max |q - exact| = {worst:.2e} (tol 1e-9), {el:.2?} (limit 10 s)"),
    );
}

#[test]
fn criterion_02_meanfield_fidelity() {
    let t0 = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for beta in [0.25, 0.5, 1.0] {
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let p = TinyProblem::random(2000 + seed, [2, 2, 2], 2, beta).unwrap();
            let exact = exact_membership_posterior(&p).unwrap();
            let s = meanfield(&p, 500);
            for pos in 0..8 {
                let tv: f64 = 0.5
                    * s.membership()
                        .row(pos)
                        .iter()
                        .zip(exact.membership_row(pos))
                        .map(|(a, b)| (a - b).abs())
                        .sum::<f64>();
                worst = worst.max(tv);
            }
        }
        pass &= worst <= 0.02;
        parts.push(format!("beta {beta}: max TV {worst:.4}"));
    }
    let el = t0.elapsed();
    pass &= within(el, 30);
    verdict(
        2,
        pass,
        format!("20 instances per beta, {} (tol 0.02), {el:.2?} (limit 30 s)", parts.join(", ")),
    );
}

#[test]
fn criterion_03_elbo_monotone() {
    let t0 = Instant::now();
    let mut violations = 0;
    let mut worst_drop = f64::NEG_INFINITY;
    let mut iterations = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let coeffs: Vec<f64> = (0..10).map(|_| rng.random_range(-0.2..0.2)).collect();
        let cfg = PhantomConfig {
            seed: 3000 + seed,
            n_atlases: rng.random_range(2..=5),
            noise_sigma: rng.random_range(0.05..0.3),
            deform: rng.random_range(0.5..2.5),
            bias: BiasModel::from_coeffs(2, coeffs).unwrap(),
            no_wm_fraction: 0.25,
            ..PhantomConfig::default()
        };
        let p = generate(&cfg).unwrap();
        let r = run_vem(&p.atlases, &p.image, &p.mask, &label_table(), &VemConfig::default()).unwrap();
        iterations += r.iterations;
        for w in r.free_energy_trace.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
            if w[1] < w[0] - 1e-9 {
                violations += 1;
            }
        }
    }
    let el = t0.elapsed();
    verdict(
        3,
        violations == 0 && within(el, 300),
        format!(
            "20 phantoms at 24^3, {iterations} outer iterations, {violations} violations, largest drop {worst_drop:.2e}, {el:.2?} (limit 300 s)"
        ),
    );
}

#[test]
fn criterion_04_consistent_model_recovery() {
    let table = label_table();
    let mut exact_ok = true;
    for seed in 0..3 {
        let cfg = PhantomConfig {
            seed: 4000 + seed,
            noise_sigma: 0.0,
            deform: 0.0,
            ..PhantomConfig::default()
        };
        let p = generate(&cfg).unwrap();
        let r = run_vem(&p.atlases, &p.image, &p.mask, &table, &VemConfig::default()).unwrap();
        let all = p.truth.distinct_labels();
        exact_ok &= generalized_dice(&r.map_labels, &p.truth, &all).unwrap() == 1.0;
        exact_ok &= report(&r.map_labels, &p.truth, &table, None).unwrap().generalized_dice == 1.0;
    }
    let mut scores = Vec::new();
    for seed in 0..10 {
        let cfg = PhantomConfig {
            seed: 4100 + seed,
            dims: [32; 3],
            n_atlases: 5,
            noise_sigma: 0.1,
            deform: 1.5,
            ..PhantomConfig::default()
        };
        let p = generate(&cfg).unwrap();
        let chosen = p.atlases.select_by_age(p.test_age_days, 5).unwrap();
        let r = run_vem(&chosen, &p.image, &p.mask, &table, &VemConfig::default()).unwrap();
        scores.push(report(&r.map_labels, &p.truth, &table, None).unwrap().generalized_dice);
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    verdict(
        4,
        exact_ok && min >= 0.90,
        format!(
            "noiseless GenDice == 1.0 on 3 seeds: {exact_ok}; noise 0.1 deform 1.5 N=k=5 at 32^3: min GenDice {min:.4} over 10 seeds (floor 0.90)"
        ),
    );
}

#[test]
fn criterion_05_bias_recovery() {
    let table = label_table();
    let vem = VemConfig {
        bias_degree: Some(2),
        ..VemConfig::default()
    };
    let mut worst_rel: f64 = 0.0;
    let mut worst_same: f64 = 1.0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        // The constant term is confounded with the intensity means.
        let coeffs: Vec<f64> = (0..10)
            .map(|i| {
                if i == 0 {
                    0.0
                } else {
                    let m: f64 = rng.random_range(0.05..0.3);
                    if rng.random::<bool>() {
                        m
                    } else {
                        -m
                    }
                }
            })
            .collect();
        let base = PhantomConfig {
            seed: 5000 + seed,
            noise_sigma: 0.0,
            ..PhantomConfig::default()
        };
        let biased = PhantomConfig {
            bias: BiasModel::from_coeffs(2, coeffs.clone()).unwrap(),
            ..base.clone()
        };
        let pb = generate(&biased).unwrap();
        let p0 = generate(&base).unwrap();
        let rb = run_vem(&pb.atlases, &pb.image, &pb.mask, &table, &vem).unwrap();
        let r0 = run_vem(&p0.atlases, &p0.image, &p0.mask, &table, &vem).unwrap();
        for i in 1..10 {
            worst_rel = worst_rel.max((rb.bias.coeffs[i] - coeffs[i]).abs() / coeffs[i].abs());
        }
        let same = rb
            .map_labels
            .data()
            .iter()
            .zip(r0.map_labels.data())
            .filter(|(a, b)| a == b)
            .count() as f64
            / rb.map_labels.len() as f64;
        worst_same = worst_same.min(same);
    }
    verdict(
        5,
        worst_rel <= 0.10 && worst_same >= 0.99,
        format!(
            "5 noiseless phantoms, degree-2 bias |c| in [0.05, 0.3]: worst relative error of non-constant coefficients {worst_rel:.4} (tol 0.10); labels unchanged on >= {:.4} of voxels (floor 0.99)",
            worst_same
        ),
    );
}

#[test]
fn criterion_06_masking_rule() {
    let table = label_table();
    let cfg = PhantomConfig {
        seed: 6000,
        noise_sigma: 0.1,
        ..PhantomConfig::default()
    };
    let p = generate(&cfg).unwrap();
    // Flag the first atlas: merge its cortex into white matter.
    let mut atlases: Vec<_> = p.atlases.iter().cloned().collect();
    atlases[0].labels = atlases[0].labels.map(|l| match l {
        3 => 2,
        42 => 41,
        l => l,
    });
    atlases[0].has_wm = false;
    let flagged = AtlasSet::new(atlases.clone()).unwrap();
    atlases[0].has_wm = true;
    let unflagged = AtlasSet::new(atlases).unwrap();

    let r = run_vem(&flagged, &p.image, &p.mask, &table, &VemConfig::default()).unwrap();
    let q = &r.membership;
    let dom = q.domain();
    let labels0 = flagged.get(0).labels.data();
    let mut masked = 0;
    let mut zero = 0;
    for pos in 0..dom.len() {
        if table.is_wm_or_cortex(labels0[dom.voxels()[pos]]) {
            masked += 1;
            zero += (q.prob(pos, 0) == 0.0) as usize;
        }
    }
    // Elsewhere the rule leaves a posterior untouched.
    let r_free = run_vem(&unflagged, &p.image, &p.mask, &table, &VemConfig::default()).unwrap();
    let ruled = apply_mask_rule(&r_free.membership, &flagged, &table);
    let mut other = 0;
    let mut unchanged = 0;
    for pos in 0..dom.len() {
        if !table.is_wm_or_cortex(labels0[dom.voxels()[pos]]) {
            other += 1;
            unchanged += (ruled.row(pos) == r_free.membership.row(pos)) as usize;
        }
    }
    verdict(
        6,
        masked > 0 && zero == masked && unchanged == other && r.fallback_voxels == 0,
        format!(
            "q = 0 at {zero}/{masked} WM/cortex voxels of the flagged atlas; rows unchanged at {unchanged}/{other} other voxels"
        ),
    );
}

#[test]
fn criterion_07_edt_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7000);
    let mut compared = 0;
    let mut mismatches = 0;
    for v in 0..100 {
        let spacing = if v % 2 == 0 {
            [1.0; 3]
        } else {
            [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)]
        };
        let meta = GridMeta::new([6, 6, 6], spacing, [0.0; 3]).unwrap();
        // Blobs: a few random balls of labels 1..=3 on background 0.
        let balls: Vec<([f64; 3], f64, u32)> = (0..rng.random_range(1..5))
            .map(|_| {
                (
                    [rng.random_range(0.0..6.0), rng.random_range(0.0..6.0), rng.random_range(0.0..6.0)],
                    rng.random_range(0.5..3.0),
                    rng.random_range(1..=3),
                )
            })
            .collect();
        let labels: LabelVolume = Volume::from_fn(meta, |i, j, k| {
            let mut l = 0;
            for (c, r, id) in &balls {
                let d2 = (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2);
                if d2 <= r * r {
                    l = *id;
                }
            }
            l
        })
        .unwrap();
        for id in 0..=4 {
            let fast = signed_edt(&labels, id, 20.0).unwrap().field;
            let slow = brute_force_edt(&labels, id, 20.0).unwrap();
            compared += 1;
            if fast.data() != slow.data() {
                mismatches += 1;
            }
        }
    }
    let el = t0.elapsed();
    verdict(
        7,
        mismatches == 0 && within(el, 5),
        format!("100 random 6^3 volumes, {compared} label fields, {mismatches} differ, {el:.2?} (limit 5 s)"),
    );
}

#[test]
fn criterion_08_metrics() {
    let m8 = GridMeta::with_dims([8, 1, 1]).unwrap();
    let a = Volume::from_vec(m8, vec![1, 1, 1, 1, 0, 0, 0, 0]).unwrap();
    let b = Volume::from_vec(m8, vec![0, 0, 1, 1, 1, 1, 0, 0]).unwrap();
    let d = dice(&a, &b, 1).unwrap().unwrap();
    let m4 = GridMeta::with_dims([4, 1, 1]).unwrap();
    let ga = Volume::from_vec(m4, vec![1, 1, 2, 2]).unwrap();
    let gb = Volume::from_vec(m4, vec![1, 2, 2, 2]).unwrap();
    let g = generalized_dice(&ga, &gb, &[1, 2]).unwrap();
    let mut reductions = true;
    for l in [1, 2] {
        reductions &= generalized_dice(&ga, &gb, &[l]).unwrap() == dice(&ga, &gb, l).unwrap().unwrap();
    }
    verdict(
        8,
        (d - 0.5).abs() <= 1e-15 && (g - 0.75).abs() <= 1e-15 && reductions,
        format!("dice {d} (expect 0.5), generalized {g} (expect 0.75), singleton reduction holds: {reductions}"),
    );
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for t in i..=j {
                r[idx[t]] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn criterion_09_sharpness() {
    let table = label_table();
    let mut ordered = 0;
    for seed in 0..20 {
        let cfg = PhantomConfig {
            seed: 9000 + seed,
            noise_sigma: 0.1 * (seed % 3) as f64,
            ..PhantomConfig::default()
        };
        let p = generate(&cfg).unwrap();
        if tenengrad(&p.image).unwrap() > tenengrad(&gaussian_blur(&p.image, 2.0)).unwrap() {
            ordered += 1;
        }
    }
    // Degradation sweep: noise level nu together with blur of 5 nu voxels.
    let levels = [0.0, 0.1, 0.2, 0.3];
    let mut gd = Vec::new();
    let mut tg = Vec::new();
    for nu in levels {
        let (mut g, mut t) = (0.0, 0.0);
        let seeds = 4;
        for seed in 0..seeds {
            let cfg = PhantomConfig {
                seed: 9100 + seed,
                noise_sigma: nu,
                blur_sigma: 5.0 * nu,
                ..PhantomConfig::default()
            };
            let p = generate(&cfg).unwrap();
            let r = run_vem(&p.atlases, &p.image, &p.mask, &table, &VemConfig::default()).unwrap();
            g += report(&r.map_labels, &p.truth, &table, None).unwrap().generalized_dice;
            t += tenengrad(&p.image).unwrap();
        }
        gd.push(g / seeds as f64);
        tg.push(t / seeds as f64);
    }
    let non_inc = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0]);
    let rho = spearman(&gd, &tg);
    verdict(
        9,
        ordered == 20 && non_inc(&gd) && non_inc(&tg) && rho > 0.8,
        format!(
            "sharp > blurred on {ordered}/20; sweep nu {levels:?}: mean GenDice {gd:.4?}, Tenengrad {tg:.4?}, rank correlation {rho:.3} (floor 0.8)"
        ),
    );
}

#[test]
fn criterion_10_determinism() {
    let mut identical = 0;
    for seed in 0..5 {
        let dir = tempfile::tempdir().unwrap();
        let mut inst = generate(&PhantomConfig {
            seed: 10_000 + seed,
            ..PhantomConfig::default()
        })
        .unwrap();
        let manifest = inst.write(dir.path()).unwrap();
        let info: PhantomInfo =
            serde_json::from_slice(&std::fs::read(dir.path().join("phantom.json")).unwrap()).unwrap();
        let run = |workers: usize| {
            let out = dir.path().join(format!("out{workers}"));
            let args = SegmentArgs {
                image: dir.path().join(&info.image),
                mask: dir.path().join(&info.mask),
                manifest: manifest.clone(),
                k: 5,
                select_by: SelectBy::Age,
                age_days: Some(info.test_age_days),
                model: ModelArgs {
                    workers: Some(workers),
                    ..ModelArgs::default()
                },
                posteriors: false,
                out_dir: out.clone(),
            };
            let o = cmd_segment(&args).unwrap();
            (o.labels, std::fs::read(out.join("labels.nii.gz")).unwrap())
        };
        let (l1, f1) = run(1);
        let (l8, f8) = run(8);
        if l1.data() == l8.data() && f1 == f8 {
            identical += 1;
        }
    }
    verdict(
        10,
        identical == 5,
        format!("label volumes bit-identical with 1 vs 8 workers on {identical}/5 phantoms"),
    );
}

#[test]
fn criterion_11_jackknife() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PhantomConfig {
        seed: 11_000,
        n_atlases: 6,
        noise_sigma: 0.3,
        deform: 3.0,
        ..PhantomConfig::default()
    };
    let mut inst = generate(&cfg).unwrap();
    let manifest = inst.write(dir.path()).unwrap();
    let out = dir.path().join("jk").join("jackknife.csv");
    let table = cmd_jackknife(&JackknifeArgs {
        manifest,
        sizes: "1-5".into(),
        model: ModelArgs::default(),
        out: out.clone(),
    })
    .unwrap();

    let mut rdr = csv::Reader::from_path(&out).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    let mut schema_ok = header == ["subject_id", "k", "label_id", "dice", "gen_dice"];
    let mut rows = 0;
    let mut pairs = std::collections::BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        rows += 1;
        let k: usize = rec[1].parse().unwrap();
        let g: f64 = rec[4].parse().unwrap();
        let d: f64 = rec[3].parse().unwrap();
        schema_ok &= (1..=5).contains(&k) && &rec[2] == "ALL" && (0.0..=1.0).contains(&g) && (0.0..=1.0).contains(&d);
        pairs.insert((rec[0].to_string(), k));
    }
    schema_ok &= pairs.len() == 30;
    // The largest k uses every atlas except the held-out one.
    let full_ok = table
        .runs
        .iter()
        .filter(|r| r.k == 5)
        .all(|r| r.selected.len() == 5 && !r.selected.contains(&r.subject_id));

    let win_path = out.parent().unwrap().join("winning_k.csv");
    let mut wins = Vec::new();
    for rec in csv::Reader::from_path(&win_path).unwrap().records() {
        let rec = rec.unwrap();
        wins.push((rec[0].parse::<usize>().unwrap(), rec[1].parse::<usize>().unwrap()));
    }
    let total: usize = wins.iter().map(|w| w.1).sum();
    let small: usize = wins.iter().filter(|w| w.0 <= 3).map(|w| w.1).sum();
    let hist_ok = wins.len() == 5 && total == 6;
    verdict(
        11,
        table.runs.len() == 30 && rows == 30 && schema_ok && full_ok && hist_ok,
        format!(
            "{} runs, {rows} CSV rows, schema ok: {schema_ok}, k=5 uses all others: {full_ok}, winning-k histogram {wins:?} (k <= 3 wins {small}/{total})",
            table.runs.len()
        ),
    );
}
