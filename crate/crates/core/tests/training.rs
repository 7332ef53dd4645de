use std::sync::OnceLock;

use pyramid_reid::batching::Strategy;
use pyramid_reid::data::{generate_dataset, CorruptionConfig, Dataset, GenConfig};
use pyramid_reid::scheduler::Phase;
use pyramid_reid::trainer::{
    evaluate_checkpoint, read_trace, trace_to_string, Checkpoint, TrainConfig, TraceRow, Trainer,
};
use pyramid_reid::Error;

fn dataset() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| generate_dataset(&GenConfig::desk(), &CorruptionConfig { severity: 0.3 }, 1).unwrap())
}

fn config(epochs: u64) -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.epochs = epochs;
    c.seed = 7;
    c
}

fn run(config: TrainConfig) -> (Trainer, Vec<TraceRow>) {
    let mut t = Trainer::new(config, dataset()).unwrap();
    let rows = t.run().unwrap();
    (t, rows)
}

#[test]
fn same_seed_gives_identical_trace() {
    let (_, a) = run(config(10));
    let (_, b) = run(config(10));
    let (sa, sb) = (trace_to_string(&a), trace_to_string(&b));
    assert_eq!(sa.as_bytes(), sb.as_bytes());
    assert_eq!(read_trace(sa.as_bytes()).unwrap().len(), a.len());

    assert_eq!(a[0].phase, Phase::IdOnly);
    assert!(a.iter().any(|r| r.phase == Phase::Combined));

    let mut other = config(10);
    other.seed = 8;
    let (_, c) = run(other);
    assert_ne!(trace_to_string(&c), sa);
}

#[test]
fn resume_continues_the_uninterrupted_trace() {
    let (full_trainer, full) = run(config(10));

    let mut t = Trainer::new(config(10), dataset()).unwrap();
    let head = t.run_until(5, |_, _| Ok(())).unwrap();
    let bytes = t.checkpoint().unwrap().to_bytes().unwrap();
    drop(t);

    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ckpt.counters().unwrap().iteration, head.len() as u64);
    let mut resumed = Trainer::resume(config(10), dataset(), &ckpt).unwrap();
    assert_eq!(resumed.epoch(), 5);
    let tail = resumed.run().unwrap();

    let joined: Vec<TraceRow> = head.into_iter().chain(tail).collect();
    assert_eq!(trace_to_string(&joined), trace_to_string(&full));
    assert_eq!(
        resumed.checkpoint().unwrap().to_bytes().unwrap(),
        full_trainer.checkpoint().unwrap().to_bytes().unwrap()
    );
}

#[test]
fn checkpoint_file_round_trip_is_byte_exact() {
    let (t, _) = run(config(1));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.pyrt");
    let ckpt = t.checkpoint().unwrap();
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    assert_eq!(loaded.config().unwrap(), *t.config());

    let first = evaluate_checkpoint(&loaded, dataset(), None).unwrap();
    let second = evaluate_checkpoint(&loaded, dataset(), None).unwrap();
    assert_eq!(first, second);
}

#[test]
fn resume_with_other_part_count_is_refused() {
    let (t, _) = run(config(1));
    let ckpt = t.checkpoint().unwrap();
    let mut other = config(2);
    other.parts = 3;
    other.pyramid_mask = "111".parse().unwrap();
    let err = Trainer::resume(other, dataset(), &ckpt).err().expect("must refuse");
    assert!(matches!(err, Error::Checkpoint(_)));
    let msg = err.to_string();
    assert!(msg.contains("fingerprint"), "{msg}");
    assert!(msg.contains("n=6") && msg.contains("n=3"), "{msg}");
}

#[test]
fn phase_matches_sampling_strategy() {
    let mut t = Trainer::new(config(3), dataset()).unwrap();
    let mut first = true;
    while !t.is_finished() {
        let row = t.step().unwrap();
        let batch = t.last_batch().unwrap();
        let expect = match row.phase {
            Phase::IdOnly => Strategy::Random,
            Phase::Combined => Strategy::IdBalanced,
        };
        assert_eq!(batch.strategy, expect, "iteration {}", row.tau);
        if first {
            assert_eq!(row.phase, Phase::IdOnly);
            first = false;
        }
    }
    assert_eq!(t.iteration(), 3 * t.iterations_per_epoch());
}

#[test]
fn random_iterations_cover_the_train_split_per_pass() {
    let d = dataset();
    let n = d.train.len();
    let mut t = Trainer::new(config(8), d).unwrap();
    let mut seen = Vec::new();
    while !t.is_finished() {
        t.step().unwrap();
        let b = t.last_batch().unwrap();
        if b.strategy == Strategy::Random {
            seen.extend_from_slice(&b.indices);
        }
    }
    let passes = seen.len() / n;
    assert!(passes >= 1, "only {} random images consumed", seen.len());
    for chunk in seen.chunks(n).take(passes) {
        let mut sorted = chunk.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn alternating_mode_never_uses_the_triplet_loss() {
    let mut c = config(2);
    c.no_triplet_alternating = true;
    let mut t = Trainer::new(c, dataset()).unwrap();
    while !t.is_finished() {
        let row = t.step().unwrap();
        assert_eq!(row.l_tp, None);
        let strategy = t.last_batch().unwrap().strategy;
        if row.tau % 2 == 1 {
            assert_eq!((row.phase, strategy), (Phase::IdOnly, Strategy::Random));
        } else {
            assert_eq!((row.phase, strategy), (Phase::Combined, Strategy::IdBalanced));
        }
    }
    let s = t.scheduler();
    assert_eq!(s.tp.observations, 0);
}

#[test]
fn lr_follows_the_epoch_schedule() {
    let mut c = config(4);
    c.lr_halving_epochs = vec![1, 3];
    let (t, rows) = run(c);
    let per = t.iterations_per_epoch() as usize;
    for (i, row) in rows.iter().enumerate() {
        let expect = match i / per {
            0 => 0.01,
            1 | 2 => 0.005,
            _ => 0.0025,
        };
        assert_eq!(row.lr, expect, "iteration {}", row.tau);
    }
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let mut c = config(3);
    c.base_lr = 1e12;
    let mut t = Trainer::new(c, dataset()).unwrap();
    match t.run() {
        Err(Error::Diverged { iteration, .. }) => assert!(iteration >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}
