//! Classifier behaviour against labels with and without signal.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use floodlens::evalmetrics::rocauc;
use floodlens::model::{self, SearchConfig};

fn grid() -> SearchConfig {
    SearchConfig {
        max_depth: vec![2, 3],
        learning_rate: vec![0.1],
        n_trees: vec![20, 40],
        ..SearchConfig::default()
    }
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("x{i}")).collect()
}

fn sample(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Vec<f64>>, Vec<u8>) {
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..5).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let y = x
        .iter()
        .map(|r| u8::from(r[1] + 0.2 * rng.random_range(-1.0..1.0) > 0.5))
        .collect();
    (x, y)
}

#[test]
fn permuted_labels_score_near_one_half() {
    let mut cv = Vec::new();
    let mut held_out = Vec::new();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, mut y) = sample(&mut rng, 600);
        y.shuffle(&mut rng);
        let (xt, mut yt) = sample(&mut rng, 600);
        yt.shuffle(&mut rng);
        let clf = model::train(&x, &y, &names(5), &grid(), seed).unwrap();
        cv.push(clf.cv_auc);
        let p = clf.predict_proba(&names(5), &xt).unwrap();
        held_out.push(rocauc(&p, &yt).unwrap());
    }
    // A 95% band: at most one of twenty runs may leave it.
    let outside = cv.iter().filter(|a| !(0.4..=0.6).contains(*a)).count();
    assert!(outside <= 1, "cv ROCAUC {cv:?}");
    let mean = held_out.iter().sum::<f64>() / held_out.len() as f64;
    assert!(
        (mean - 0.5).abs() < 0.04,
        "held-out mean {mean:.3} over {held_out:?}"
    );
}

#[test]
fn informative_feature_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (x, y) = sample(&mut rng, 300);
    let (xt, yt) = sample(&mut rng, 300);
    let clf = model::train(&x, &y, &names(5), &grid(), 1).unwrap();
    let auc = rocauc(&clf.predict_proba(&names(5), &xt).unwrap(), &yt).unwrap();
    assert!(auc > 0.9, "{auc}");
    assert!(clf.cv_auc > 0.85, "{}", clf.cv_auc);
}
