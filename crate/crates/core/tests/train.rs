use std::path::Path;

use refinematch::config::RunConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use refinematch::data::{generate_dataset, sample_batch, write_manifest, DataConfig, TrainingPair};
use refinematch::geometry::Supervision;
use refinematch::nn::{zero_grads, Adam};
use refinematch::proposals::{oracle_match, ProposalSpec};
use refinematch::refine::RegressorConfig;
use refinematch::train::{batch_loss, evaluate_checkpoint, train, Checkpoint, Model, Trainer, LOG_FILE};
use refinematch::Error;

fn tiny_config(seed: u64) -> RunConfig {
    let mut c = RunConfig {
        seed,
        data: DataConfig {
            num_pairs: 6,
            width: 48,
            height: 32,
            ..DataConfig::default()
        },
        ..RunConfig::default()
    };
    c.backbone.channels = vec![3, 4, 4, 8, 8];
    c.refiner.regressor = RegressorConfig {
        conv_channels: [4, 8],
        fc_width: 16,
    };
    c.batch.batch_size = 2;
    c.batch.per_pair_proposals = 4;
    c.oracle.n = 40;
    c
}

fn pairs(c: &RunConfig) -> Vec<TrainingPair> {
    generate_dataset(&c.data, c.seed).unwrap()
}

fn log_rows(dir: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(dir.join(LOG_FILE))
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let c = tiny_config(3);
    let ps = pairs(&c);
    let mut t = Trainer::new(c, &ps).unwrap();
    t.step(None).unwrap();
    t.step(None).unwrap();
    let first = t.checkpoint().to_bytes().unwrap();
    let (model, adam, state) = Model::from_checkpoint(&Checkpoint::from_bytes(&first).unwrap()).unwrap();
    assert_eq!(model.to_checkpoint(&adam, &state).to_bytes().unwrap(), first);

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    t.checkpoint().save(&a).unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let c = tiny_config(3);
    let ps = pairs(&c);
    let bytes = Trainer::new(c, &ps).unwrap().checkpoint().to_bytes().unwrap();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
}

#[test]
fn resume_mid_epoch_reproduces_the_uninterrupted_log() {
    let mut c = tiny_config(5);
    let ps = pairs(&c);
    c.train.max_steps = Some(6);
    let full = tempfile::tempdir().unwrap();
    train(&c, &ps, full.path(), None).unwrap();

    // Three steps per epoch; stop after step 4 and resume.
    let split = tempfile::tempdir().unwrap();
    let mut first = c.clone();
    first.train.max_steps = Some(4);
    let out = train(&first, &ps, split.path(), None).unwrap();
    assert_eq!(out.steps, 4);
    train(&c, &ps, split.path(), Some(&out.final_checkpoint)).unwrap();

    assert_eq!(
        std::fs::read(full.path().join(LOG_FILE)).unwrap(),
        std::fs::read(split.path().join(LOG_FILE)).unwrap()
    );
    assert_eq!(
        std::fs::read(full.path().join("final.ckpt")).unwrap(),
        std::fs::read(split.path().join("final.ckpt")).unwrap()
    );
}

#[test]
fn learning_rate_drops_after_the_fifth_epoch() {
    let mut c = tiny_config(7);
    c.data.num_pairs = 2;
    c.train.max_steps = Some(6);
    let ps = pairs(&c);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&c, &ps, dir.path(), None).unwrap();
    assert_eq!(out.epochs_completed, 6);
    let rows = log_rows(dir.path());
    assert_eq!(&rows[0][..3], ["step", "epoch", "lr"]);
    let lr_of_epoch = |e: &str| -> Vec<f64> {
        rows[1..].iter().filter(|r| r[1] == e).map(|r| r[2].parse().unwrap()).collect()
    };
    assert_eq!(*lr_of_epoch("5").last().unwrap(), 5e-4);
    assert_eq!(lr_of_epoch("6")[0], 1e-4);
    for e in 1..=6 {
        assert!(dir.path().join(format!("checkpoints/epoch_{e:04}.ckpt")).exists());
    }
}

#[test]
fn convergence_stops_after_stalled_epochs() {
    let mut c = tiny_config(8);
    c.data.num_pairs = 2;
    c.train.max_epochs = 4;
    let ps = pairs(&c);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&c, &ps, dir.path(), None).unwrap();
    assert!(out.converged);
    assert!(out.epochs_completed <= 4);
}

#[test]
fn non_finite_loss_dumps_the_batch() {
    let c = tiny_config(9);
    let ps = pairs(&c);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(c, &ps).unwrap();
    // Validation rejects this up front, so poison the live trainer.
    t.config.loss.alpha = f64::NAN;
    let before = t.checkpoint().to_bytes().unwrap();
    match t.step(Some(dir.path())) {
        Err(Error::NanLoss { step, dump }) => {
            assert_eq!(step, 1);
            assert!(dump.ends_with("nan_step_0000001.json"));
            let body: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&dump).unwrap()).unwrap();
            assert_eq!(body["pair_ids"].as_array().unwrap().len(), 2);
            assert_eq!(body["pair_indices"].as_array().unwrap().len(), 2);
        }
        other => panic!("expected a NaN loss, got {other:?}"),
    }
    assert_eq!(t.checkpoint().to_bytes().unwrap(), before);
}

fn zero_offset_checkpoint(c: &RunConfig, path: &Path) {
    let ps = pairs(c);
    let mut ckpt = Trainer::new(c.clone(), &ps).unwrap().checkpoint();
    let mut zeroed = 0;
    for t in &mut ckpt.tensors {
        if t.name.contains(".offset.") && !t.name.starts_with("adam.") {
            t.data.iter_mut().for_each(|v| *v = 0.0);
            zeroed += 1;
        }
    }
    assert!(zeroed >= 4, "offset head tensors not found");
    ckpt.save(path).unwrap();
}

#[test]
fn zero_offset_checkpoint_leaves_proposal_metrics_unchanged() {
    let mut c = tiny_config(11);
    c.refiner.confidence = 0.0;
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("zero.ckpt");
    zero_offset_checkpoint(&c, &ckpt);
    let held = generate_dataset(&DataConfig { num_pairs: 3, ..c.data }, 99).unwrap();
    write_manifest(dir.path().join("held"), &held).unwrap();

    let ev = evaluate_checkpoint(&ckpt, &dir.path().join("held"), &ProposalSpec::Oracle, &c, None).unwrap();
    assert_eq!(ev.proposals.mma, ev.refined.mma);
    assert_eq!(ev.proposals.homography_acc, ev.refined.homography_acc);
    assert_eq!(ev.proposals.match_count, ev.refined.match_count);
}

#[test]
fn evaluating_a_checkpoint_twice_gives_the_same_report() {
    let c = tiny_config(12);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    zero_offset_checkpoint(&c, &ckpt);
    let held = generate_dataset(&DataConfig { num_pairs: 3, ..c.data }, 98).unwrap();
    write_manifest(dir.path().join("held"), &held).unwrap();
    let results = dir.path().join("results.jsonl");
    let run = || {
        evaluate_checkpoint(&ckpt, &dir.path().join("held"), &ProposalSpec::Oracle, &c, Some(&results))
            .unwrap()
            .without_timing()
    };
    assert_eq!(run(), run());
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&results)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["schema_version"], 1);
}

#[test]
fn resume_rejects_a_different_architecture() {
    let c = tiny_config(13);
    let ps = pairs(&c);
    let ckpt = Trainer::new(c.clone(), &ps).unwrap().checkpoint();
    let mut other = c;
    other.refiner.regressor.fc_width = 8;
    assert!(matches!(Trainer::resume(other, &ps, &ckpt), Err(Error::Config(_))));
}

/// Ratio of the total loss after 200 Adam steps on one frozen oracle batch
/// to the loss before the first step.
fn frozen_batch_loss_ratio(seed: u64) -> f64 {
    let mut c = tiny_config(seed);
    c.data.num_pairs = 4;
    c.data.width = 64;
    c.data.height = 48;
    c.batch.batch_size = 4;
    c.batch.per_pair_proposals = 2;
    let ps = generate_dataset(&c.data, seed).unwrap();
    let mut model = Model::new(c.backbone.clone(), c.refiner.clone(), c.nc, seed).unwrap();
    let pyramids: Vec<_> = ps.iter().map(|p| model.pyramids(&p.image_a, &p.image_b).unwrap()).collect();
    let sets: Vec<_> = ps
        .iter()
        .enumerate()
        .map(|(i, p)| oracle_match(&p.supervision.ground_truth().unwrap(), 16, 12, p.size(), i as u64).unwrap())
        .collect();
    let batch = sample_batch(&sets, &c.batch, &mut ChaCha8Rng::seed_from_u64(seed));
    let sups: Vec<Supervision> = ps.iter().map(|p| p.supervision.supervision().unwrap()).collect();
    let mut adam = Adam::new();
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..=200 {
        let (report, grads) = batch_loss(&model, &pyramids, &sups, &batch, &c.loss).unwrap();
        first.get_or_insert(report.total);
        last = report.total;
        zero_grads(&mut model);
        model
            .refiner
            .backward_batch(&pyramids, &batch.proposals, &batch.pair_index, None, &grads, None)
            .unwrap();
        adam.update(&mut model.refiner, 1e-3);
    }
    last / first.unwrap()
}

#[test]
fn two_hundred_steps_halve_the_loss_on_a_frozen_batch() {
    let mut ratios: Vec<f64> = (1..=3).map(frozen_batch_loss_ratio).collect();
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[1] < 0.5, "loss ratios {ratios:?}");
}
