//! Loaders, the synthetic generator and the client partitioners.

use std::collections::BTreeSet;
use std::fs;

use fedfim::data::{
    load_csv, load_idx, partition_iid, partition_noniid_l, share_subset, synth_logistic, Dataset, SyntheticTask,
};
use fedfim::numerics::{streams, DenseMatrix};
use fedfim::Error;
use proptest::prelude::*;

fn labelled(counts: &[usize]) -> Dataset {
    let labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    let n = labels.len();
    let features = DenseMatrix::new(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
    Dataset::new(features, labels, counts.len(), "counts").unwrap()
}

fn assert_disjoint_cover(assignment: &[Vec<usize>], n: usize) {
    let mut seen = vec![0u8; n];
    for idx in assignment {
        assert!(!idx.is_empty(), "empty client");
        for &i in idx {
            seen[i] += 1;
        }
    }
    assert!(seen.iter().all(|&c| c == 1), "not a disjoint cover");
}

proptest! {
    #[test]
    fn iid_is_balanced_cover(n in 1usize..300, k in 1usize..40, seed in 0u64..1000) {
        prop_assume!(k <= n);
        let ds = labelled(&[n]);
        let plan = partition_iid(&ds, k, seed).unwrap();
        assert_disjoint_cover(&plan.assignment, n);
        let sizes: Vec<usize> = plan.assignment.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        plan.check(n).unwrap();
    }

    #[test]
    fn noniid_gives_exactly_l_labels(
        n_classes in 2usize..8,
        k in 1usize..30,
        l_seed in 0usize..100,
        surplus in prop::collection::vec(0usize..5, 8),
        seed in 0u64..1000,
    ) {
        let l = 1 + l_seed % n_classes;
        prop_assume!((l * k) % n_classes == 0);
        let per = l * k / n_classes;
        let counts: Vec<usize> = (0..n_classes).map(|c| per + surplus[c]).collect();
        let ds = labelled(&counts);
        let plan = partition_noniid_l(&ds, k, l, seed).unwrap();
        assert_disjoint_cover(&plan.assignment, ds.len());
        for idx in &plan.assignment {
            prop_assert_eq!(ds.label_set(idx).len(), l);
        }
    }
}

#[test]
fn noniid_rejects_indivisible_and_thin_labels() {
    let ds = labelled(&[10, 10, 10]);
    let err = partition_noniid_l(&ds, 4, 2, 0).unwrap_err();
    assert!(matches!(err, Error::Config { .. }), "{err}");
    assert!(err.to_string().contains("divisible"));
    assert!(partition_noniid_l(&ds, 3, 0, 0).is_err());
    assert!(partition_noniid_l(&ds, 3, 4, 0).is_err());
    let thin = labelled(&[1, 10, 10]);
    assert!(partition_noniid_l(&thin, 6, 2, 0).is_err());
}

#[test]
fn noniid_pairs_are_not_fixed() {
    // With ties broken at random the ten labels must not collapse into five fixed pairs.
    let ds = labelled(&[20; 10]);
    let plan = partition_noniid_l(&ds, 100, 2, 3).unwrap();
    let pairs: BTreeSet<Vec<usize>> = plan
        .assignment
        .iter()
        .map(|idx| ds.label_set(idx).into_iter().collect())
        .collect();
    assert!(pairs.len() > 5, "only {} distinct label pairs", pairs.len());
}

#[test]
fn partitions_are_deterministic() {
    let ds = labelled(&[30, 30, 30, 30]);
    assert_eq!(partition_iid(&ds, 7, 5).unwrap(), partition_iid(&ds, 7, 5).unwrap());
    assert_eq!(
        partition_noniid_l(&ds, 8, 2, 5).unwrap(),
        partition_noniid_l(&ds, 8, 2, 5).unwrap()
    );
    assert_ne!(partition_iid(&ds, 7, 5).unwrap(), partition_iid(&ds, 7, 6).unwrap());
}

#[test]
fn share_subset_size_and_determinism() {
    let ds = labelled(&[100, 100]);
    let a = share_subset(&ds, 0.25, 20.0, 9).unwrap();
    assert_eq!(a.len(), 5);
    assert_eq!(a, share_subset(&ds, 0.25, 20.0, 9).unwrap());
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert!(share_subset(&ds, 0.0, 20.0, 9).is_err());
    assert!(share_subset(&ds, 1.5, 20.0, 9).is_err());
    assert!(share_subset(&ds, 0.01, 20.0, 9).is_err());
}

#[test]
fn synthetic_is_seeded_and_balanced() {
    let a = synth_logistic(1000, 6, 4, 5.0, 1).unwrap();
    let b = synth_logistic(1000, 6, 4, 5.0, 1).unwrap();
    assert_eq!(a.features, b.features);
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.label_histogram(&(0..1000).collect::<Vec<_>>()), vec![250; 4]);
    let c = synth_logistic(1000, 6, 4, 5.0, 2).unwrap();
    assert_ne!(a.features, c.features);
}

#[test]
fn synthetic_streams_are_independent() {
    let task = SyntheticTask::new(5, 3, 5.0, 4).unwrap();
    let train = task.sample(60, streams::DATA, "train").unwrap();
    let test = task.sample(60, streams::TEST_DATA, "test").unwrap();
    assert_ne!(train.features, test.features);
    // the truth weights must not replay the training features
    assert_ne!(&task.true_weights.data()[..5], &train.features.data()[..5]);
}

fn idx(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend(d.to_be_bytes());
    }
    out.extend_from_slice(body);
    out
}

#[test]
fn idx_round_trip_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let pixels: Vec<u8> = (0..2 * 3 * 2).map(|i| (i * 21) as u8).collect();
    fs::write(p("img"), idx(0x803, &[2, 3, 2], &pixels)).unwrap();
    fs::write(p("lab"), idx(0x801, &[2], &[7, 1])).unwrap();
    let ds = load_idx(p("img"), p("lab")).unwrap();
    assert_eq!((ds.features.rows(), ds.features.cols()), (2, 6));
    assert_eq!(ds.features.get(1, 5), 231.0 / 255.0);
    assert_eq!(ds.labels, vec![7, 1]);
    assert_eq!(ds.num_classes, 8);

    fs::write(p("badmagic"), idx(0x802, &[2, 3, 2], &pixels)).unwrap();
    assert!(matches!(load_idx(p("badmagic"), p("lab")), Err(Error::Format(_))));
    assert!(matches!(load_idx(p("img"), p("img")), Err(Error::Format(_))));

    fs::write(p("short"), idx(0x803, &[2, 3, 2], &pixels[..7])).unwrap();
    assert!(matches!(load_idx(p("short"), p("lab")), Err(Error::Io { .. })));

    fs::write(p("lab3"), idx(0x801, &[3], &[0, 1, 2])).unwrap();
    assert!(matches!(load_idx(p("img"), p("lab3")), Err(Error::Consistency(_))));

    assert!(matches!(load_idx(p("missing"), p("lab")), Err(Error::Io { .. })));
}

#[test]
fn csv_standardizes_and_densifies() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.csv");
    fs::write(&path, "a,label,b\n1,10,5\n2,2,5\n3,10,5\n6,30,5\n").unwrap();
    let ds = load_csv(&path, "label").unwrap();
    assert_eq!(ds.input_dim(), 2);
    // numeric labels keep numeric order: 2 < 10 < 30
    assert_eq!(ds.labels, vec![1, 0, 1, 2]);
    assert_eq!(ds.num_classes, 3);
    let col: Vec<f64> = (0..4).map(|i| ds.features.get(i, 0)).collect();
    let mean = col.iter().sum::<f64>() / 4.0;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    // constant column collapses to zero
    assert!((0..4).all(|i| ds.features.get(i, 1) == 0.0));
}

#[test]
fn csv_string_labels_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("s.csv");
    fs::write(&good, "x,y\n0.5,cat\n1.5,ant\n2.5,cat\n").unwrap();
    assert_eq!(load_csv(&good, "y").unwrap().labels, vec![1, 0, 1]);

    assert!(matches!(load_csv(&good, "label"), Err(Error::Format(_))));
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "x,label\n0.5,1\noops,0\n").unwrap();
    let err = load_csv(&bad, "label").unwrap_err();
    assert!(err.to_string().contains("row 2"), "{err}");
    let ragged = dir.path().join("ragged.csv");
    fs::write(&ragged, "x,label\n0.5,1,9\n").unwrap();
    assert!(matches!(load_csv(&ragged, "label"), Err(Error::Format(_))));
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "x,label\n").unwrap();
    assert!(matches!(load_csv(&empty, "label"), Err(Error::Format(_))));
}
