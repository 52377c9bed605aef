//! Training loop: one step against a hand-derived update, resumption from a file,
//! divergence, best-epoch retention, grid ranking and thread-count independence.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semkge::config::{Regularizer, TrainConfig};
use semkge::kg::{SemIndex, Triple};
use semkge::losses::{LossFamily, LossSpec, Variant};
use semkge::models::{ModelKind, ModelParams};
use semkge::sampler::pair_for;
use semkge::synth::typed_blocks;
use semkge::trainer::{grid_search, Trainer};
use semkge::{load_checkpoint, save_checkpoint, Error, KnowledgeGraph};

fn blocks() -> KnowledgeGraph {
    typed_blocks(&mut ChaCha8Rng::seed_from_u64(5), 25).unwrap()
}

fn cfg(model: ModelKind, loss: LossSpec) -> TrainConfig {
    TrainConfig {
        model,
        loss,
        dim: 8,
        batch_size: 256,
        lr: 0.01,
        max_epochs: 4,
        eval_every: 2,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn transe(p: &ModelParams, t: &Triple) -> (f64, Vec<f64>) {
    let h = p.tables()[0].row(t.head.index());
    let r = p.tables()[1].row(t.rel.index());
    let tl = p.tables()[0].row(t.tail.index());
    let u: Vec<f64> = sub(&h.iter().zip(r).map(|(a, b)| a + b).collect::<Vec<_>>(), tl);
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    (-norm, u.iter().map(|x| x / norm).collect())
}

#[test]
fn single_step_matches_hand_derived_update() {
    let kg = blocks();
    let index = SemIndex::build(&kg);
    let lambda = 1e-3;
    let lr = 0.05;
    let margin = 1.5;
    let c = TrainConfig {
        batch_size: 4096,
        lr,
        regularizer: Regularizer::L2,
        reg_weight: lambda,
        loss: LossSpec::vanilla(LossFamily::Phl).with_margin(margin),
        ..cfg(ModelKind::TransE, LossSpec::vanilla(LossFamily::Phl))
    };
    let p0 = ModelParams::init(ModelKind::TransE, kg.num_entities(), kg.num_relations(), c.dim, c.seed).unwrap();

    // gradient of Σ [γ + f(t') − f(t)]₊ with f = −‖h + r − t‖, keyed by (table, row)
    let mut g: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    let add_score_grad = |t: &Triple, w: f64, g: &mut HashMap<(usize, usize), Vec<f64>>| {
        let (_, unit) = transe(&p0, t);
        for (slot, row, sign) in [(0, t.head.index(), 1.0), (1, t.rel.index(), 1.0), (0, t.tail.index(), -1.0)] {
            let v = g.entry((slot, row)).or_insert_with(|| vec![0.0; c.dim]);
            for (x, u) in v.iter_mut().zip(&unit) {
                // ∂f/∂h = −u/‖u‖
                *x += -w * sign * u;
            }
        }
    };
    let mut expected_loss = 0.0;
    let mut rows = Vec::new();
    for (i, t) in kg.train().iter().enumerate() {
        let pair = pair_for(&kg, &index, c.seed, 0, i).unwrap();
        for neg in [pair.valid.triple, pair.invalid.triple] {
            for x in [t, &neg] {
                rows.push((0, x.head.index()));
                rows.push((0, x.tail.index()));
                rows.push((1, x.rel.index()));
            }
            let term = margin + transe(&p0, &neg).0 - transe(&p0, t).0;
            if term > 0.0 {
                expected_loss += term;
                add_score_grad(&neg, 1.0, &mut g);
                add_score_grad(t, -1.0, &mut g);
            }
        }
    }
    for key in rows {
        g.entry(key).or_insert_with(|| vec![0.0; c.dim]);
    }
    for ((slot, row), v) in g.iter_mut() {
        for (x, p) in v.iter_mut().zip(p0.tables()[*slot].row(*row)) {
            expected_loss += lambda * p * p;
            *x += 2.0 * lambda * p;
        }
    }

    let mut tr = Trainer::with_params(c.clone(), &kg, p0.clone()).unwrap();
    let mean = tr.train_epoch().unwrap();
    let got_loss = mean * kg.train().len() as f64;
    assert!((got_loss - expected_loss).abs() <= 1e-10 * expected_loss.abs().max(1.0), "{got_loss} vs {expected_loss}");

    // first Adam step: m̂ = g, v̂ = g², so Δ = −lr · g / (|g| + eps)
    let p1 = tr.params();
    for slot in 0..2 {
        for row in 0..p0.tables()[slot].rows() {
            let before = p0.tables()[slot].row(row);
            let after = p1.tables()[slot].row(row);
            for k in 0..c.dim {
                let expect = match g.get(&(slot, row)) {
                    Some(v) => before[k] - lr * v[k] / (v[k].abs() + 1e-8),
                    None => before[k],
                };
                assert!((after[k] - expect).abs() <= 1e-10, "slot {slot} row {row} coord {k}: {} vs {expect}", after[k]);
            }
        }
    }
}

#[test]
fn resume_from_file_matches_uninterrupted_run() {
    let kg = blocks();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    for (model, loss) in [
        (ModelKind::TransH, LossSpec::vanilla(LossFamily::Phl).with_variant(Variant::S, 0.5)),
        (ModelKind::ComplEx, LossSpec::vanilla(LossFamily::Pll).with_variant(Variant::S, 0.3)),
    ] {
        let c = cfg(model, loss);
        let full = Trainer::new(c.clone(), &kg).unwrap().run(|_| Ok(())).unwrap();

        let mut first = Trainer::new(TrainConfig { max_epochs: 2, ..c.clone() }, &kg).unwrap();
        first.train_epoch().unwrap();
        first.train_epoch().unwrap();
        let mut snap = first.snapshot();
        snap.config = c.clone();
        save_checkpoint(&snap, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, snap);
        let resumed = Trainer::resume(loaded, &kg).unwrap().run(|_| Ok(())).unwrap();
        assert_eq!(resumed.last.params, full.last.params, "{model}");
        assert_eq!(resumed.last.optimizer, full.last.optimizer);
    }
}

#[test]
fn truncated_checkpoint_file_is_rejected() {
    let kg = blocks();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    let tr = Trainer::new(cfg(ModelKind::DistMult, LossSpec::vanilla(LossFamily::Pll)), &kg).unwrap();
    save_checkpoint(&tr.snapshot(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn non_finite_parameters_report_divergence() {
    let kg = blocks();
    let c = cfg(ModelKind::DistMult, LossSpec::vanilla(LossFamily::Pll));
    let mut p = ModelParams::init(c.model, kg.num_entities(), kg.num_relations(), c.dim, c.seed).unwrap();
    p.tables_mut()[1].row_mut(0)[0] = f64::NAN;
    let mut tr = Trainer::with_params(c, &kg, p).unwrap();
    match tr.train_epoch() {
        Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 1),
        other => panic!("expected divergence, got {other:?}"),
    }

    // an absurd learning rate overflows the embeddings
    let c = TrainConfig {
        lr: 1e300,
        max_epochs: 50,
        eval_every: 50,
        ..cfg(ModelKind::DistMult, LossSpec::vanilla(LossFamily::Pll))
    };
    let mut seen = 0;
    let err = Trainer::new(c, &kg).unwrap().run(|_| {
        seen += 1;
        Ok(())
    });
    assert!(matches!(err, Err(Error::Divergence { .. })), "{err:?}");
    assert_eq!(seen, 0, "diverged before the first validation");
}

#[test]
fn best_checkpoint_is_first_maximum() {
    let kg = blocks();
    let c = TrainConfig {
        eval_every: 1,
        max_epochs: 6,
        ..cfg(ModelKind::TransE, LossSpec::vanilla(LossFamily::Phl).with_variant(Variant::S, 0.5))
    };
    let out = Trainer::new(c, &kg).unwrap().run(|_| Ok(())).unwrap();
    let hist = &out.last.history;
    assert_eq!(hist.len(), 6);
    let mut best = &hist[0];
    for r in hist {
        if r.val_mrr.unwrap() > best.val_mrr.unwrap() {
            best = r;
        }
    }
    assert_eq!(out.best.epoch, best.epoch);
    assert_eq!(out.best.history.last().unwrap(), best);
    assert_eq!(out.last.epoch, 6);
}

#[test]
fn grid_ranks_by_validation_mrr() {
    let kg = blocks();
    let base = TrainConfig {
        max_epochs: 10,
        eval_every: 5,
        ..cfg(ModelKind::TransE, LossSpec::vanilla(LossFamily::Phl))
    };
    let frozen = TrainConfig { lr: 0.0, ..base.clone() };
    let grid = vec![frozen.clone(), base.clone(), frozen.clone()];
    let res = grid_search(&grid, &kg).unwrap();
    let order: Vec<usize> = res.iter().map(|r| r.index).collect();
    assert_eq!(order, vec![1, 0, 2], "trained cell first, identical cells keep grid order");
    let scores: Vec<f64> = res.iter().map(|r| r.outcome.as_ref().unwrap().val_mrr).collect();
    assert!(scores[0] > scores[1]);
    assert_eq!(scores[1], scores[2]);

    let single = grid_search(std::slice::from_ref(&base), &kg).unwrap();
    assert_eq!(single[0].outcome, res[0].outcome);

    let bad = TrainConfig { lr: 1e300, ..base.clone() };
    let res = grid_search(&[bad, base], &kg).unwrap();
    assert_eq!(res[0].index, 1);
    assert!(res[1].outcome.is_err());
}

#[test]
fn thread_count_does_not_change_results() {
    let kg = blocks();
    let run = |threads: usize, loss: LossSpec| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| Trainer::new(cfg(ModelKind::SimplE, loss), &kg).unwrap().run(|_| Ok(())).unwrap().last)
    };
    for loss in [
        LossSpec::vanilla(LossFamily::Bcel).with_variant(Variant::SPrime, 0.2),
        LossSpec::vanilla(LossFamily::Pll).with_variant(Variant::S, 0.5),
    ] {
        let a = run(1, loss);
        let b = run(4, loss);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }
}
