use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use downscale::data::{default_synthetic_table, Dataset};
use downscale::diffusion::{heun_sample, EdmParams};
use downscale::experiment::{
    cmd_evaluate, cmd_make_synthetic, cmd_predict, cmd_train_diffusion, cmd_train_regression, forecast,
    ExperimentConfig, Stage, METRICS_CSV,
};
use downscale::grid::Extent;
use downscale::nn::Tensor;
use downscale::Error;

fn tiny(dir: &std::path::Path) -> ExperimentConfig {
    let body = include_str!("../../../configs/tiny.toml");
    let mut c = ExperimentConfig::from_toml(body).unwrap();
    c.output_dir = dir.to_path_buf();
    c.evaluate.plots = false;
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampler_returns_a_constant_denoiser_target(seed in 0u64..1000, h in 1usize..6, w in 1usize..6, level in -3.0f32..3.0) {
        let shape = [1, 2, h, w];
        let target = Tensor::new(&shape, (0..2 * h * w).map(|k| level + 0.1 * k as f32).collect()).unwrap();
        let out = heun_sample(|_, _| Ok(target.clone()), &shape, seed, &EdmParams::default()).unwrap();
        prop_assert!(out.max_abs_diff(&target) <= 1e-4);
    }

    #[test]
    fn degradation_is_zero_at_zero_and_linear_in_amplitude(seed in 0u64..1000, d in 0.01f64..1.0) {
        let table = default_synthetic_table();
        let c = table.n_coarse_inputs();
        let x = Tensor::new(&[c, 6, 8], (0..c * 48).map(|k| 200.0 + ((k * 31) % 23) as f32).collect()).unwrap();
        let rng = || ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(&forecast::degrade_inputs(&x, &table, 0.0, &mut rng()).unwrap(), &x);
        let a = forecast::degrade_inputs(&x, &table, d, &mut rng()).unwrap();
        let b = forecast::degrade_inputs(&x, &table, 2.0 * d, &mut rng()).unwrap();
        for (k, spec) in table.coarse_inputs().enumerate() {
            if spec.fixed_range.is_some() {
                continue;
            }
            for i in k * 48..(k + 1) * 48 {
                let (x0, xa, xb) = (x.data()[i], a.data()[i], b.data()[i]);
                prop_assert!(((xb - x0) - 2.0 * (xa - x0)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn stage_hashes_only_depend_on_upstream_settings(members in 1usize..50, epochs in 1usize..20) {
        let base = ExperimentConfig::default();
        let mut p = base.clone();
        p.predict.n_members = members + 20;
        for s in [Stage::Data, Stage::Regression, Stage::Diffusion, Stage::Forecast] {
            prop_assert_eq!(base.stage_hash(s), p.stage_hash(s));
        }
        prop_assert_ne!(base.stage_hash(Stage::Predict), p.stage_hash(Stage::Predict));
        let mut r = base.clone();
        r.regression.train.max_epochs = epochs + 8;
        prop_assert_eq!(base.stage_hash(Stage::Data), r.stage_hash(Stage::Data));
        for s in [Stage::Regression, Stage::Diffusion, Stage::Predict, Stage::Forecast] {
            prop_assert_ne!(base.stage_hash(s), r.stage_hash(s));
        }
    }
}

#[test]
fn library_pipeline_scores_and_guards_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_make_synthetic(&cfg).unwrap();
    let ds = Dataset::open(&cfg.dataset_dir()).unwrap();
    assert_eq!(ds.pair().fine.shape(), (32, 48));

    // A different data seed must not silently overwrite the dataset.
    let mut other = cfg.clone();
    other.seeds.data += 1;
    assert!(matches!(cmd_make_synthetic(&other), Err(Error::Config(_))));

    cmd_train_regression(&cfg).unwrap();
    cmd_train_diffusion(&cfg).unwrap();
    let p = cmd_predict(&cfg).unwrap();
    assert_eq!((p.n_samples, p.n_members), (3, 3));
    assert!(p.spread.iter().all(|s| s.mean_std > 0.0 && s.max_std >= s.mean_std));
    let ev = cmd_evaluate(&cfg).unwrap();
    let r = &ev.evaluation.report;
    for row in r.rows.iter().filter(|row| row.metric == "crps") {
        let mm = r.get(&row.variable, &row.level, "mae_member_mean", None).unwrap();
        assert!(row.value <= mm + 1e-12);
    }
    assert!(cfg.evaluation_dir().join(METRICS_CSV).is_file());

    // Regression settings changed after the fact: downstream stages refuse.
    let mut changed = cfg.clone();
    changed.regression.train.learning_rate *= 2.0;
    assert!(matches!(cmd_train_diffusion(&changed), Err(Error::Config(_))));
}

#[test]
fn grids_are_validated_on_load() {
    let mut c = ExperimentConfig::default();
    // Non-integer ratios are legal; a fine grid coarser than the input is not.
    c.grid.fine_res = 0.1;
    assert!(c.validate().is_ok());
    c.grid.fine_res = 0.5;
    assert!(c.validate().is_err());
    c.grid.fine_res = 0.03125;
    c.grid.coarse_res = 0.0;
    assert!(c.validate().is_err());
    c.grid.coarse_res = 0.25;
    c.grid.fine_extent = Extent::edges(20.0, 26.0, 100.0, 119.0);
    assert!(c.validate().is_err(), "fine extent a full coarse cell past the coarse one");
}
