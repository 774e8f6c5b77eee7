use std::collections::BTreeMap;

use ndarray::{Array2, Array4};
use nesy_core::backbone::{l2_norm, FeatureMaps};
use nesy_core::binarization::{binarize_features, BinarizationTable, TableRow};
use nesy_core::inference::{FactSet, Interpreter};
use nesy_core::rules::{fold_sem_with, parse_program, ruleset_size, FoldConfig};
use nesy_core::sparsity::{sigmoid_activations, thresholds_from_norms};
use proptest::prelude::*;

fn table_strategy() -> impl Strategy<Value = BinarizationTable> {
    (1usize..=6, 1usize..=40, 1usize..=3).prop_flat_map(|(f, n, c)| {
        proptest::collection::vec((proptest::collection::vec(0u8..=1, f), 0..c), n).prop_map(move |rows| {
            let names: Vec<String> = (0..c).map(|k| format!("class{k}")).collect();
            let rows = rows
                .into_iter()
                .enumerate()
                .map(|(i, (features, label))| TableRow {
                    id: format!("img{i:03}"),
                    features,
                    label,
                })
                .collect();
            BinarizationTable::new(f, names, rows).unwrap()
        })
    })
}

/// Class names are recovered from the labels, so drop unused ones before
/// comparing.
fn compact(t: &BinarizationTable) -> BinarizationTable {
    let used: Vec<usize> = (0..t.class_names.len()).filter(|c| t.rows.iter().any(|r| r.label == *c)).collect();
    let rows = t
        .rows
        .iter()
        .map(|r| TableRow {
            label: used.iter().position(|&c| c == r.label).unwrap(),
            ..r.clone()
        })
        .collect();
    BinarizationTable::new(t.num_features, used.iter().map(|&c| t.class_names[c].clone()).collect(), rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn table_csv_round_trip(t in table_strategy()) {
        let t = compact(&t);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        t.write_csv(&path).unwrap();
        prop_assert_eq!(BinarizationTable::read_csv(&path).unwrap(), t);
    }

    #[test]
    fn learned_programs_reparse_and_replay_coverage(t in table_strategy()) {
        let out = fold_sem_with(&t, &FoldConfig::default()).unwrap();
        let rs = &out.rules;
        let reparsed = parse_program(&rs.render(), None).unwrap();
        prop_assert_eq!(reparsed.render(), rs.render());
        prop_assert_eq!(ruleset_size(&reparsed), ruleset_size(rs));

        let interp = Interpreter::new(rs).unwrap();
        let mut fired: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        let mut abstained = Vec::new();
        for row in &t.rows {
            match interp.fired_rule(&FactSet::from_row(row)) {
                Some(i) => {
                    let e = fired.entry(i).or_default();
                    if interp.classify(&FactSet::from_row(row)) == Some(t.class_names[row.label].as_str()) {
                        e.0 += 1;
                    } else {
                        e.1 += 1;
                    }
                }
                None => abstained.push(row.id.clone()),
            }
        }
        for (i, r) in rs.class_rules.iter().enumerate() {
            prop_assert_eq!(fired.get(&i).copied().unwrap_or_default(), (r.tp, r.fp));
        }
        abstained.sort();
        let mut uncovered = out.uncovered.clone();
        uncovered.sort();
        prop_assert_eq!(abstained, uncovered);
    }

    #[test]
    fn binarization_matches_norm_threshold_comparison(
        data in proptest::collection::vec(-2.0f64..2.0, 3 * 4 * 4 * 4),
        h1 in 0.0f64..1.0,
        h2 in 0.0f64..1.0,
    ) {
        let fm = FeatureMaps(Array4::from_shape_vec((3, 4, 4, 4), data).unwrap());
        let norms = l2_norm(&fm);
        let t = thresholds_from_norms(&norms, h1, h2).unwrap();
        let bits = binarize_features(&sigmoid_activations(&fm, Some(&t)).unwrap());
        for i in 0..3 {
            for j in 0..4 {
                let mut sq = 0.0;
                for y in 0..4 {
                    for x in 0..4 {
                        sq += fm.0[[i, j, y, x]] * fm.0[[i, j, y, x]];
                    }
                }
                let want = u8::from(sq.sqrt() - t.values[j] >= 0.0);
                prop_assert_eq!(bits[[i, j]], want);
            }
        }
    }

    #[test]
    fn thresholds_use_population_std(norms in proptest::collection::vec(0.0f64..10.0, 2..20)) {
        let n = norms.len() as f64;
        let mu = norms.iter().sum::<f64>() / n;
        let sigma = (norms.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
        let arr = Array2::from_shape_vec((norms.len(), 1), norms).unwrap();
        let t = thresholds_from_norms(&arr, 0.6, 0.7).unwrap();
        prop_assert!((t.values[0] - (0.6 * mu + 0.7 * sigma)).abs() < 1e-9);
    }

    #[test]
    fn fact_set_render_parse(bits in proptest::collection::vec(0u8..=1, 0..24)) {
        let fs = FactSet::from_bits("img", &bits);
        prop_assert_eq!(FactSet::parse("img", &fs.render()).unwrap(), fs);
    }
}
