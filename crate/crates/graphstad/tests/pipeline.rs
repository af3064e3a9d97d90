//! Cross-module invariants: graph-layer permutation behavior, property
//! tests over the scaling and evaluation contracts, and a smoke test of
//! the command-line stages on a miniature dataset.

use std::sync::Arc;

use graphstad::simlab::{self, InjectionSpec, Persistence, SyntheticWorld, WorldConfig};
use graphstad::geometry::GeometryConfig;
use graphstad::tensor::{gcn_layer, global_attention_pool, Propagation, Tensor};
use graphstad::training::{ScalingStats, SCALE_CLIP};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, v)
}

/// Relabeling graph nodes permutes GCN rows and leaves the attention
/// pooling readout unchanged: the layers see graph structure, not node
/// order.
#[test]
fn gcn_is_equivariant_and_pooling_invariant_under_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let m = 24;
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); m];
    for i in 0..m {
        for j in (i + 1)..m {
            if rng.random_bool(0.2) {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    // perm[new] = old
    let mut perm: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let mut inv = vec![0usize; m];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let permuted_neighbors: Vec<Vec<usize>> = perm
        .iter()
        .map(|&old| neighbors[old].iter().map(|&j| inv[j]).collect())
        .collect();

    let (f_in, f_out) = (5, 7);
    let h = randn(&mut rng, &[m, f_in]);
    let w = randn(&mut rng, &[f_in, f_out]);
    let b = randn(&mut rng, &[f_out]);
    let w_gate = randn(&mut rng, &[f_out, 1]);
    let b_gate = randn(&mut rng, &[1]);

    let hv = h.to_vec();
    let mut hp = vec![0.0; m * f_in];
    for new in 0..m {
        hp[new * f_in..(new + 1) * f_in]
            .copy_from_slice(&hv[perm[new] * f_in..(perm[new] + 1) * f_in]);
    }
    let h_perm = Tensor::from_vec(&[m, f_in], hp);

    let prop = Arc::new(Propagation::from_adjacency(m, &neighbors));
    let prop_perm = Arc::new(Propagation::from_adjacency(m, &permuted_neighbors));
    let y = gcn_layer(&h, &prop, &w, &b);
    let y_perm = gcn_layer(&h_perm, &prop_perm, &w, &b);

    let yv = y.to_vec();
    let ypv = y_perm.to_vec();
    for new in 0..m {
        for o in 0..f_out {
            let a = ypv[new * f_out + o];
            let e = yv[perm[new] * f_out + o];
            assert!((a - e).abs() < 1e-9, "row {new}: {a} vs {e}");
        }
    }

    let pooled = global_attention_pool(&y, &w_gate, &b_gate).to_vec();
    let pooled_perm = global_attention_pool(&y_perm, &w_gate, &b_gate).to_vec();
    for (a, e) in pooled_perm.iter().zip(&pooled) {
        assert!((a - e).abs() < 1e-9, "pooled {a} vs {e}");
    }
}

/// Injection touches exactly the labeled cells; everything else stays
/// bit-identical to the healthy stream.
#[test]
fn injection_touches_only_labeled_cells() {
    let world = SyntheticWorld::new(WorldConfig::default(), &GeometryConfig::toy(), 9);
    let maps = simlab::generate_dataset(&world, 2, 20);
    let (target_ls, channels) = simlab::random_targets(&world.seg, maps.len(), 4, 6, 5, 9);
    let spec = InjectionSpec {
        r_d: 0.0,
        target_ls,
        channels,
        persistence: Persistence::Window,
        window: 5,
    };
    let (injected, labels) = simlab::inject(&maps, &world.seg, &spec).unwrap();
    let touched: std::collections::HashSet<(usize, usize)> =
        labels.iter().map(|l| (l.map_idx, l.flat)).collect();
    let mut n_changed = 0;
    for (i, (a, b)) in maps.iter().zip(&injected).enumerate() {
        for (flat, (x, y)) in a.values.iter().zip(&b.values).enumerate() {
            if touched.contains(&(i, flat)) {
                assert_eq!(*y, 0.0, "dead cell must read zero");
                n_changed += 1;
            } else {
                assert!(x.to_bits() == y.to_bits(), "untouched cell modified");
            }
        }
    }
    assert_eq!(n_changed, labels.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Min-max scaling lands training-range values in [0, 1], clips
    /// arbitrary values to [0, SCALE_CLIP], and unscale inverts scale on
    /// the clipped image for non-constant channels.
    #[test]
    fn scaling_roundtrip_and_range(
        lo in proptest::collection::vec(-50.0f64..50.0, 6),
        span in proptest::collection::vec(0.0f64..20.0, 6),
        frac in proptest::collection::vec(0.0f64..1.0, 6),
    ) {
        let hi: Vec<f64> = lo.iter().zip(&span).map(|(l, s)| l + s).collect();
        let stats = ScalingStats::fit([lo.as_slice(), hi.as_slice()]);
        let inside: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .zip(&frac)
            .map(|((l, h), f)| l + f * (h - l))
            .collect();
        let scaled = stats.scale(&inside);
        for (i, s) in scaled.iter().enumerate() {
            prop_assert!((0.0..=SCALE_CLIP).contains(s), "channel {i}: {s}");
            if span[i] > 1e-9 {
                prop_assert!(*s <= 1.0 + 1e-12);
                let back = stats.unscale(&scaled);
                prop_assert!((back[i] - inside[i]).abs() < 1e-9 * (1.0 + inside[i].abs()));
            }
        }
        // Values far above the training max saturate at the clip;
        // constant channels always scale to zero.
        let wild: Vec<f64> = hi.iter().map(|h| h + 1e4).collect();
        for (i, s) in stats.scale(&wild).iter().enumerate() {
            if stats.is_constant(i) {
                prop_assert_eq!(*s, 0.0, "constant channel {}", i);
            } else {
                prop_assert!((s - SCALE_CLIP).abs() < 1e-12, "channel {i}: {s}");
            }
        }
    }

    /// Every operating point satisfies the anchored-recall contract:
    /// counts partition the population, reachable points reach the
    /// anchor, and no strictly larger threshold would.
    #[test]
    fn evaluation_operating_points_satisfy_anchor_contract(
        scores in proptest::collection::vec(0.0f64..10.0, 20..120),
        flags in proptest::collection::vec(any::<bool>(), 120),
        anchor in 0.5f64..1.0,
    ) {
        let cells: Vec<(f64, bool)> = scores
            .iter()
            .zip(&flags)
            .map(|(s, f)| (*s, *f))
            .collect();
        prop_assume!(cells.iter().any(|(_, a)| *a));
        let n_pos = cells.iter().filter(|(_, a)| *a).count();
        let eval = simlab::evaluate(&cells, &[anchor]).unwrap();
        let p = &eval.points[0];
        prop_assert_eq!(p.tp + p.fn_, n_pos);
        prop_assert_eq!(p.tp + p.fp + p.fn_ + p.tn, cells.len());
        let recall_at = |thr: f64| {
            let tp = cells.iter().filter(|(s, a)| *a && *s >= thr).count();
            tp as f64 / n_pos as f64
        };
        if p.reachable {
            prop_assert!(p.recall >= anchor);
            prop_assert!((recall_at(p.threshold) - p.recall).abs() < 1e-12);
            // The threshold is maximal: any strictly larger distinct
            // score misses the anchor.
            let next_up = cells
                .iter()
                .map(|(s, _)| *s)
                .filter(|s| *s > p.threshold)
                .fold(f64::INFINITY, f64::min);
            if next_up.is_finite() {
                prop_assert!(recall_at(next_up) < anchor);
            }
        } else {
            prop_assert!(recall_at(p.threshold) < anchor);
        }
    }
}

/// Drive the binary through generate -> renorm -> inject -> report on a
/// miniature stream; each stage must exit cleanly and produce its
/// artifacts.
#[test]
fn cli_stages_compose_on_disk() {
    let bin = env!("CARGO_BIN_EXE_graphstad");
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let out = std::process::Command::new(bin)
            .args(args)
            .env("GRAPHSTAD_DATA__TRAIN_RUNS", "2")
            .env("GRAPHSTAD_DATA__LS_PER_RUN", "10")
            .env("GRAPHSTAD_DATA__TEST_RUNS", "1")
            .env("GRAPHSTAD_RENORM__EPOCHS", "50")
            .env("GRAPHSTAD_INJECTION__N_STARTS", "2")
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).into_owned()
    };
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    run(&["gen-data", "--out", &p("healthy"), "--seed", "3"]);
    assert!(dir.path().join("healthy/manifest.toml").is_file());

    run(&["train-renorm", "--data", &p("healthy"), "--out", &p("renorm")]);
    run(&["inject", "--data", &p("healthy"), "--r-d", "0.0", "--out", &p("bad")]);
    assert!(dir.path().join("bad/ground_truth.csv").is_file());

    let report = run(&["report", "--data", &p("healthy"), "--renorm", &p("renorm"), "--out", &p("totals.csv")]);
    assert!(report.contains("CoV raw"), "unexpected report output: {report}");
    assert!(dir.path().join("totals.csv").is_file());

    // Unknown stream name must fail with a one-line error.
    let out = std::process::Command::new(bin)
        .args(["gen-data", "--out", &p("x"), "--stream", "bogus"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
