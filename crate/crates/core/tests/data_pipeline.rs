use jepa_core::data::*;
use proptest::prelude::*;

fn window_strategy() -> impl Strategy<Value = Window> {
    (1usize..4, 1usize..5, 1usize..6).prop_flat_map(|(dim, p, l)| {
        prop::collection::vec(-50.0f64..50.0, p * l * dim).prop_map(move |v| Window::new(p * l, dim, v).unwrap())
    })
}

proptest! {
    #[test]
    fn revin_moments(w in window_strategy()) {
        let (n, stats) = revin_normalize(&w);
        for v in 0..w.dim {
            let col = n.column(v);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            if stats.std[v] > REVIN_EPS {
                let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64;
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
            }
            prop_assert!(stats.std[v] >= REVIN_EPS);
        }
        let back = revin_denormalize(&n, &stats);
        for (a, b) in back.values.iter().zip(&w.values) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn down_avg_matches_formula(w in window_strategy(), pick in 0usize..100) {
        let divisors: Vec<usize> = (1..=w.len).filter(|p| w.len % p == 0).collect();
        let p = divisors[pick % divisors.len()];
        let l = w.len / p;
        let c = down_avg(&w, p).unwrap();
        for ell in 0..l {
            for v in 0..w.dim {
                let mut s = 0.0;
                for j in 0..p {
                    s += w.at(ell * p + j, v);
                }
                prop_assert!((c.at(ell, v) - s / p as f64).abs() < 1e-12);
            }
        }
        // Same means as the length-P patches of the L-patch split.
        let f = patchify(&w, l, p).unwrap();
        for ell in 0..l {
            for v in 0..w.dim {
                let m = (0..p).map(|j| f.at(ell, j, v)).sum::<f64>() / p as f64;
                prop_assert!((c.at(ell, v) - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patches_partition_the_window(w in window_strategy(), pick in 0usize..100) {
        let divisors: Vec<usize> = (1..=w.len).filter(|p| w.len % p == 0).collect();
        let p = divisors[pick % divisors.len()];
        let f = patchify(&w, p, w.len / p).unwrap();
        for v in 0..w.dim {
            prop_assert_eq!(f.variable(v), w.column(v));
        }
    }

    #[test]
    fn pairs_are_consecutive_and_disjoint(len in 20usize..200, win in 1usize..10, stride in 1usize..12, seed in 0u64..50) {
        let s = synth_regime_series(seed, len, 2, &SynthConfig::default()).unwrap();
        let pairs = make_window_pairs(&s, win, stride).unwrap();
        for p in &pairs {
            prop_assert!(p.start + 2 * win <= len);
            prop_assert_eq!(p.context.values.as_slice(), &s.values()[p.start * 2..(p.start + win) * 2]);
            prop_assert_eq!(p.target.values.as_slice(), &s.values()[(p.start + win) * 2..(p.start + 2 * win) * 2]);
            let any = s.labels().unwrap()[p.start + win..p.start + 2 * win].contains(&1);
            prop_assert_eq!(p.label, Some(u8::from(any)));
        }
    }
}

#[test]
fn csv_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    let s = synth_regime_series(9, 300, 3, &SynthConfig::default()).unwrap();
    std::fs::write(&path, s.to_csv_string().unwrap()).unwrap();
    assert_eq!(RawSeries::read_csv(&path).unwrap(), s);
}
