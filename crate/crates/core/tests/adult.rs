use std::path::PathBuf;

use ppfl_core::regression::{
    local_train, preprocess_adult_file, sample_local, split_and_sample, train_test_split, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn adult_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/adult.csv")
}

#[test]
fn cleaned_adult_counts() {
    let ds = preprocess_adult_file(&adult_path()).unwrap();
    assert_eq!(ds.rows(), 45_222);
    assert_eq!(ds.positives(), 11_208);
    assert_eq!(ds.n_cols(), 104 + 1);
    for i in 0..ds.rows() {
        let row = ds.row(i);
        let norm = row[..104].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9, "row {i} norm {norm}");
        assert_eq!(row[104], 1.0);
    }

    let (train, test) = train_test_split(&ds, 0.25, 3).unwrap();
    assert!(test.rows() == 11_305 || test.rows() == 11_306);
    assert_eq!(train.rows() + test.rows(), ds.rows());

    let (locals, _) = split_and_sample(&ds, 0.25, 200, 10, 3).unwrap();
    assert!(locals.iter().all(|d| d.rows() == 200));

    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let local = sample_local(&train, 200, 1, &mut rng).unwrap().remove(0);
    let cfg = TrainConfig {
        learning_rate: 0.5,
        iterations: 50,
        reg_alpha: 1e-4,
    };
    let w = local_train(&local, &vec![0.0; 105], &cfg).unwrap();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(w.iter().all(|v| v.is_finite()));
    assert!(norm < (1u64 << 20) as f64);
}
