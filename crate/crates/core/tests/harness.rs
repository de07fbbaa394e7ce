use mcn::harness::{
    evaluate_model, predict, score, Checkpoint, Prediction, RunConfig, Trainer, CHECKPOINT_FILE, LOSS_LOG_FILE,
};
use mcn::model::{Model, Structure};
use mcn::postprocess::{RefinementConfig, RefinementMode};
use mcn::synth::{Dataset, SynthConfig};
use mcn::Error;

fn data(n_train: usize, n_val: usize) -> Dataset {
    Dataset::generate(n_train, n_val, 3, &SynthConfig::default()).unwrap()
}

fn config(epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.optim.epochs = epochs;
    cfg
}

#[test]
fn one_epoch_writes_loadable_checkpoint() {
    let ds = data(10, 2);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(1);
    cfg.out_dir = Some(dir.path().to_path_buf());
    let ck = Trainer::new(cfg, &ds).unwrap().run().unwrap();

    let loaded = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(loaded, ck);
    assert_eq!(loaded.epoch, 1);
    assert_eq!(loaded.dataset_hash.as_deref(), Some(ds.manifest.config_hash.as_str()));
    let log = std::fs::read_to_string(dir.path().join(LOSS_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.starts_with("epoch,lr,total,rec,res,cem"));
}

#[test]
fn same_seed_same_losses() {
    let ds = data(10, 2);
    let run = || Trainer::new(config(2), &ds).unwrap().run().unwrap();
    let (a, b) = (run(), run());
    for (x, y) in a.history.iter().zip(&b.history) {
        assert!((x.total - y.total).abs() <= 1e-12);
    }
    assert_eq!(a.params, b.params);

    let mut other = config(2);
    other.seed = 8;
    let c = Trainer::new(other, &ds).unwrap().run().unwrap();
    assert_ne!(a.history[0].total, c.history[0].total);
}

#[test]
fn resume_continues_the_same_trajectory() {
    let ds = data(12, 2);
    let straight = Trainer::new(config(3), &ds).unwrap().run().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.mcnp");
    Trainer::new(config(1), &ds).unwrap().run().unwrap().save(&path).unwrap();
    let mut ck = Checkpoint::load(&path).unwrap();
    ck.config.optim.epochs = 3;
    let resumed = Trainer::resume(ck, &ds).unwrap().run().unwrap();

    assert_eq!(resumed.params, straight.params);
    assert_eq!(resumed.adam, straight.adam);
    let totals = |c: &Checkpoint| c.history.iter().map(|h| h.total).collect::<Vec<_>>();
    assert_eq!(totals(&resumed), totals(&straight));
}

#[test]
fn nan_parameter_is_a_training_fault() {
    let ds = data(4, 1);
    let mut t = Trainer::new(config(1), &ds).unwrap();
    t.model.params.get_mut("rec.b").unwrap().data_mut()[0] = f64::NAN;
    match t.run_epoch() {
        Err(Error::TrainingFault { epoch, step, .. }) => assert_eq!((epoch, step), (1, 0)),
        other => panic!("expected a training fault, got {other:?}"),
    }
}

#[test]
fn mismatched_mask_stride_is_rejected() {
    let cfg = SynthConfig {
        mask_stride: 8,
        ..SynthConfig::default()
    };
    let ds = Dataset::generate(2, 1, 1, &cfg).unwrap();
    assert!(matches!(Trainer::new(config(1), &ds), Err(Error::Config(_))));
}

#[test]
fn ground_truth_prediction_scores_perfectly() {
    let ds = data(3, 0);
    for s in &ds.train {
        let pred = Prediction {
            bbox: Some(s.gt_box),
            confidence: Some(1.0),
            prob_mask: None,
            refined_mask: Some(s.mask_coarse.bits.clone()),
            mask_grid: (s.mask_coarse.height, s.mask_coarse.width),
            mask_stride: s.mask_stride(),
            attention: Default::default(),
        };
        assert_eq!(score(&pred, s).unwrap(), (Some(1.0), Some(1.0)));
    }
}

#[test]
fn prediction_contracts() {
    let ds = data(0, 6);
    for structure in Structure::ALL {
        let mut cfg = RunConfig::default();
        cfg.model.structure = structure;
        let model = Model::init(cfg.model, 1).unwrap();
        for s in &ds.val {
            let p = predict(&model, s, &RefinementConfig::default()).unwrap();
            assert_eq!(p.bbox.is_some(), structure.has_rec());
            assert_eq!(p.refined_mask.is_some(), structure.has_res());
            if let Some(b) = p.bbox {
                assert!(b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= 64.0 && b[3] <= 64.0 && b[0] <= b[2] && b[1] <= b[3]);
            }
            if let Some(c) = p.confidence {
                assert!(c > 0.0 && c < 1.0);
            }
            for (name, a) in &p.attention {
                assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{structure:?} {name}");
            }
        }
    }
}

#[test]
fn refinement_mode_only_moves_segmentation_metrics() {
    let ds = data(0, 8);
    let model = Model::init(RunConfig::default().model, 2).unwrap();
    let base = evaluate_model(&model, &ds.val, "val", &RefinementConfig::with_mode(RefinementMode::None)).unwrap();
    for mode in RefinementMode::ALL {
        let r = evaluate_model(&model, &ds.val, "val", &RefinementConfig::with_mode(mode)).unwrap();
        assert_eq!(r.rec_prec_at_05, base.rec_prec_at_05);
        assert_eq!(r.n_samples, base.n_samples);
    }
    assert!(evaluate_model(&model, &[], "val", &RefinementConfig::default()).is_err());
}
