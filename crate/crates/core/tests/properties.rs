use chrono::{Duration, NaiveDate, NaiveDateTime};
use proptest::prelude::*;
use vtec_bnn::calibrate::{apply_calibration, fit_calibration, CalibrationPair};
use vtec_bnn::dataset::{batch_indices, bootstrap_indices, Normalizer, ENCODED_DIM};
use vtec_bnn::eval::{band_stats, day_night, ErrorRecord, Regime};
use vtec_bnn::ionex::{parse_ionex, write_ionex, GridSpec, IonexFile, IonexHeader, TecMap};

fn t0() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2009, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
}

/// 5 x 9 grid, `maps` TEC maps two hours apart, values in units of 0.1.
fn ionex_strategy() -> impl Strategy<Value = (usize, Vec<Option<u16>>)> {
    (1usize..4).prop_flat_map(|maps| {
        let cells = maps * 5 * 9;
        (Just(maps), prop::collection::vec(prop::option::weighted(0.9, 0u16..9999), cells))
    })
}

fn build_file(maps: usize, raw: &[Option<u16>]) -> IonexFile {
    let grid = GridSpec::new((40.0, 20.0, -5.0), (-20.0, 20.0, 5.0), 450.0).unwrap();
    let epochs: Vec<_> = (0..maps).map(|m| t0() + Duration::hours(2 * m as i64)).collect();
    let tec_maps = epochs
        .iter()
        .zip(raw.chunks(grid.len()))
        .map(|(&e, chunk)| TecMap::new(e, grid, chunk.iter().map(|v| v.map(|x| x as f64 * 0.1)).collect()).unwrap())
        .collect();
    IonexFile {
        header: IonexHeader::for_maps(grid, &epochs, -1),
        tec_maps,
        rms_maps: vec![],
    }
}

fn record(lat: f64, lon: f64, hour: i64, eps: f64, sigma: f64) -> ErrorRecord {
    let epoch = t0() + Duration::hours(hour);
    ErrorRecord {
        epoch,
        lat,
        lon,
        eps,
        sigma_raw: sigma,
        sigma_cal: None,
        regime: day_night(epoch, lon),
    }
}

fn record_strategy() -> impl Strategy<Value = ErrorRecord> {
    (-87.5f64..=87.5, -180.0f64..=180.0, 0i64..24, -5.0f64..5.0, 0.01f64..3.0)
        .prop_map(|(lat, lon, h, eps, s)| record(lat, lon, h, eps, s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ionex_round_trip_preserves_scaled_values((maps, raw) in ionex_strategy()) {
        let file = build_file(maps, &raw);
        let text = write_ionex(&file).unwrap();
        let parsed = parse_ionex(&text).unwrap();
        prop_assert_eq!(parsed.tec_maps.len(), maps);
        prop_assert_eq!(parsed.tec_value_count(), raw.len());
        let back: Vec<Option<u16>> = parsed
            .tec_maps
            .iter()
            .flat_map(|m| m.values.iter().map(|v| v.map(|x| (x * 10.0).round() as u16)))
            .collect();
        prop_assert_eq!(back, raw);
        prop_assert_eq!(write_ionex(&parsed).unwrap(), text);
    }

    #[test]
    fn normalization_inverts(
        mean in prop::collection::vec(-100.0f64..100.0, ENCODED_DIM),
        std in prop::collection::vec(0.01f64..50.0, ENCODED_DIM),
        x in prop::collection::vec(-1e3f64..1e3, ENCODED_DIM),
        target_mean in 0.0f64..50.0,
        target_std in 0.1f64..30.0,
        y in -10.0f64..200.0,
    ) {
        let n = Normalizer { input_mean: mean, input_std: std, target_mean, target_std };
        let mut z = vec![0.0; ENCODED_DIM];
        n.normalize_input(&x, &mut z);
        for (a, b) in n.denormalize_input(&z).iter().zip(&x) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
        let back = n.denormalize_target(n.normalize_target(y));
        prop_assert!((back - y).abs() <= 1e-9 * y.abs().max(1.0));
    }

    #[test]
    fn batches_partition_the_indices(len in 0usize..2000, batch in 1usize..300, seed: u64) {
        let batches = batch_indices(len, batch, seed);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        if let Some((last, full)) = batches.split_last() {
            prop_assert!(full.iter().all(|b| b.len() == batch));
            prop_assert!(!last.is_empty() && last.len() <= batch);
        }
        prop_assert_eq!(batches, batch_indices(len, batch, seed));
    }

    #[test]
    fn bootstrap_stays_in_range(n in 1usize..5000, seed: u64) {
        let idx = bootstrap_indices(n, seed);
        prop_assert_eq!(idx.len(), n);
        prop_assert!(idx.iter().all(|&i| i < n));
    }

    #[test]
    fn band_stats_ignore_record_order(
        records in prop::collection::vec(record_strategy(), 1..200),
        seed: u64,
    ) {
        let mut shuffled = records.clone();
        let mut rng = vtec_bnn::rng::stream(seed, &[]);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let a = band_stats(&records, 10.0).unwrap();
        let b = band_stats(&shuffled, 10.0).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.count, y.count);
            prop_assert_eq!(x.regime, y.regime);
            if x.count > 0 {
                prop_assert!((x.mean_abs_error - y.mean_abs_error).abs() < 1e-9);
                prop_assert!((x.rms_error - y.rms_error).abs() < 1e-9);
                prop_assert!((x.mean_sigma - y.mean_sigma).abs() < 1e-9);
                prop_assert_eq!(x.max_abs_error, y.max_abs_error);
            }
        }
        prop_assert_eq!(a.iter().map(|s| s.count).sum::<usize>(), records.len());
    }

    #[test]
    fn calibration_is_monotone_and_positive(
        pairs in prop::collection::vec((0.01f64..3.0, 0.0f64..10.0, -90.0f64..=90.0), 1..400),
        s1 in 0.0f64..5.0,
        s2 in 0.0f64..5.0,
        lat in -90.0f64..=90.0,
    ) {
        let pairs: Vec<_> = pairs
            .into_iter()
            .map(|(sigma_raw, abs_error, lat)| CalibrationPair { sigma_raw, abs_error, lat })
            .collect();
        let model = fit_calibration(&pairs, 10.0).unwrap();
        let (lo, hi) = (s1.min(s2), s1.max(s2));
        let (a, b) = (apply_calibration(&model, lo, lat), apply_calibration(&model, hi, lat));
        prop_assert!(a <= b + 1e-12);
        prop_assert!(a >= 0.0);
        for band in &model.bands {
            prop_assert!(band.scale >= 0.0 && band.offset >= 0.0);
        }
    }

    #[test]
    fn local_time_decides_the_regime(hour in 0i64..24, minute in 0i64..60, lon in -180.0f64..=180.0) {
        let epoch = t0() + Duration::minutes(hour * 60 + minute);
        let lt = ((hour * 60 + minute) as f64 / 60.0 + lon / 15.0).rem_euclid(24.0);
        let expected = if (6.0..18.0).contains(&lt) { Regime::Day } else { Regime::Night };
        // Skip points within rounding distance of the boundaries.
        prop_assume!((lt - 6.0).abs() > 1e-9 && (lt - 18.0).abs() > 1e-9);
        prop_assert_eq!(day_night(epoch, lon), expected);
        // Shifting east by 180 degrees flips day and night.
        if lon <= 0.0 {
            let flipped = day_night(epoch, lon + 180.0);
            prop_assert_ne!(flipped, expected);
        }
    }
}
