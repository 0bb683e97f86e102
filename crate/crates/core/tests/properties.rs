use fibershape::constellation::Constellation4D;
use fibershape::dsp::{apply_dispersion, cd_compensate, DualPolWaveform};
use num_complex::Complex64;
use proptest::prelude::*;

fn format(m: usize) -> impl Strategy<Value = Constellation4D> {
    let n = 1usize << m;
    (prop::collection::vec(prop::array::uniform4(-3.0f64..3.0), n), prop::collection::vec(0.01f64..1.0, n)).prop_map(move |(pts, w)| {
        let s: f64 = w.iter().sum();
        let c = Constellation4D::new(m, pts, (0..n as u32).collect(), w.iter().map(|v| v / s).collect()).unwrap();
        c.normalize().unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn format_text_round_trips(c in format(3)) {
        let back = Constellation4D::from_text(&c.to_text()).unwrap();
        prop_assert_eq!(back.labels(), c.labels());
        for (a, b) in back.points().iter().zip(c.points()) {
            for k in 0..4 {
                prop_assert!((a[k] - b[k]).abs() <= 1e-15 * a[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn normalized_mean_energy_is_one(c in format(4)) {
        prop_assert!((c.mean_energy() - 1.0).abs() < 1e-12);
        prop_assert!(c.entropy() <= 4.0 + 1e-12);
    }

    #[test]
    fn dispersion_is_undone_by_compensation(seed in 0u64..1000, length in 1e3f64..1e6) {
        let n = 64;
        let v: Vec<Complex64> = (0..n).map(|k| Complex64::new(((k as u64 * 31 + seed) % 17) as f64, ((k as u64 * 7 + seed) % 5) as f64)).collect();
        let w = DualPolWaveform::new(v.clone(), v.iter().map(|z| z.conj()).collect(), 1e11).unwrap();
        let beta2 = -21.7e-27;
        let out = cd_compensate(apply_dispersion(w.clone(), beta2, length), beta2, length);
        let err: f64 = out.x.iter().zip(&w.x).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
        prop_assert!(err / w.energy() < 1e-20);
    }
}
