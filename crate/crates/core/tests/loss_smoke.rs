use geomamba::model::ModelConfig;
use geomamba::synthdata::{build_manifest, DataConfig, Dataset, SplitCounts, SynthConfig};
use geomamba::trainer::{train_run, RunConfig};

const STEPS: usize = 50;
const WINDOW: usize = 10;

/// Fraction of window positions where the mean loss over the next 10 steps
/// is lower than over the current 10.
fn decreasing_fraction(loss: &[f64]) -> f64 {
    let means: Vec<f64> = loss.windows(WINDOW).map(|w| w.iter().sum::<f64>() / WINDOW as f64).collect();
    let pairs: Vec<bool> = means.iter().zip(means.iter().skip(WINDOW)).map(|(a, b)| b < a).collect();
    pairs.iter().filter(|&&d| d).count() as f64 / pairs.len() as f64
}

#[test]
fn window_fraction_helper() {
    let falling: Vec<f64> = (0..30).map(|i| 10.0 - i as f64 * 0.1).collect();
    assert_eq!(decreasing_fraction(&falling), 1.0);
    let flat = vec![1.0; 30];
    assert_eq!(decreasing_fraction(&flat), 0.0);
}

#[test]
fn training_loss_falls_over_fifty_steps() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        image_size: 32,
        categories: 4,
        counts: SplitCounts {
            train: 160,
            query: 16,
            gallery: 16,
        },
        seed: 11,
        ..SynthConfig::default()
    };
    build_manifest(&synth, dir.path()).unwrap();
    let ds = Dataset::load(dir.path(), &DataConfig::default()).unwrap();
    for seed in 0..3 {
        let cfg = RunConfig {
            epochs: 1,
            p: 4,
            k: 2,
            steps_per_epoch: Some(STEPS),
            image_size: 32,
            seed,
            model: ModelConfig {
                embed_dim: 32,
                num_classes: 4,
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        };
        let s = train_run(&cfg, &ds, None).unwrap();
        let loss: Vec<f64> = s.records.iter().map(|r| r.total).collect();
        assert_eq!(loss.len(), STEPS);
        let f = decreasing_fraction(&loss);
        assert!(f >= 0.8, "seed {seed}: {f:.2} of windows decreased; loss {loss:?}");
    }
}
