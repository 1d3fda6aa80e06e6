use super::*;
use crate::world::GridSpec;

fn tiny_cfg() -> RunConfig {
    let mut c = RunConfig::default();
    c.data.world.grid = GridSpec::new(12, 12, 1.0).unwrap();
    c.data.world.t_out = 2;
    c.data.world.agents = [1, 2];
    c.data.world.spawn_half_extent = 3.0;
    c.data.world.min_gap = 3.0;
    c.data.train_scenarios = 4;
    c.data.eval_scenarios = 2;
    c.model = crate::model::ModelConfig {
        num_queries: 3,
        ..crate::model::ModelConfig::tiny()
    };
    c.train.epochs = 2;
    c.train.batch_size = 2;
    c.train.lr = 1e-3;
    c
}

fn data(c: &RunConfig) -> (Dataset, Dataset) {
    (
        Dataset::generate(&c.data.train_split()).unwrap(),
        Dataset::generate(&c.data.eval_split()).unwrap(),
    )
}

#[test]
fn cosine_schedule_endpoints() {
    let total = 1000;
    assert_eq!(lr_at(2e-4, 0, 0, total), 2e-4);
    assert!(lr_at(2e-4, 0, total - 1, total) < 2e-4 * 1e-4);
    let mut prev = f64::INFINITY;
    for s in 0..total {
        let v = lr_at(2e-4, 0, s, total);
        assert!(v <= prev && v >= 0.0);
        prev = v;
    }
    assert!((lr_at(1.0, 10, 4, 100) - 0.5).abs() < 1e-12);
    assert_eq!(lr_at(1.0, 10, 10, 100), 1.0);
}

#[test]
fn epoch_orders_are_seeded_permutations() {
    let a = epoch_order(3, 0, 50);
    assert_eq!(a, epoch_order(3, 0, 50));
    assert_ne!(a, epoch_order(3, 1, 50));
    assert_ne!(a, epoch_order(4, 0, 50));
    let mut s = a.clone();
    s.sort_unstable();
    assert_eq!(s, (0..50).collect::<Vec<_>>());
}

#[test]
fn clipped_steps_respect_the_bound() {
    let mut c = tiny_cfg();
    c.train.clip = 1e-3;
    let (tr, ev) = data(&c);
    let mut t = Trainer::new(c, &tr, &ev).unwrap();
    for _ in 0..2 {
        let s = t.step().unwrap();
        assert!(s.loss.total.is_finite());
        assert!(s.grad_norm > 1e-3);
        assert!(s.clipped_norm <= 1e-3);
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let c = tiny_cfg();
    let (tr, ev) = data(&c);
    let mut full = Trainer::new(c.clone(), &tr, &ev).unwrap();
    for _ in 0..3 {
        full.step().unwrap();
    }
    let next_full = full.step().unwrap();

    let mut part = Trainer::new(c, &tr, &ev).unwrap();
    part.step().unwrap();
    let bytes = part.checkpoint().to_container().unwrap().to_bytes();
    drop(part);
    let ck = Checkpoint::from_container(&Container::from_bytes(&bytes, Path::new("mem")).unwrap()).unwrap();
    let mut resumed = Trainer::from_checkpoint(ck, &tr, &ev).unwrap();
    resumed.step().unwrap();
    resumed.step().unwrap();
    let next = resumed.step().unwrap();
    assert_eq!(next, next_full);
    for (n, p) in full.state.store.iter() {
        assert_eq!(resumed.state.store.get(n).unwrap(), p, "{n}");
    }
}

#[test]
fn run_directory_and_full_run() {
    let c = tiny_cfg();
    let (tr, ev) = data(&c);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(c.clone(), &tr, &ev).unwrap();
    t.run(Some(dir.path()), None).unwrap();
    assert!(t.done());
    let l = RunLayout::new(dir.path());
    assert!(l.config().exists() && l.history().exists() && l.best_checkpoint().exists());
    assert_eq!(t.state.history.len(), 2);
    assert!(t.state.history.last().unwrap().eval.len() == 2);
    let ck = Checkpoint::load(&l.last_checkpoint()).unwrap();
    assert_eq!(ck.state.step, t.total_steps());
    assert_eq!(ck.state.history, t.state.history);

    // stopping early and resuming from disk ends in the same place
    let dir2 = tempfile::tempdir().unwrap();
    let mut a = Trainer::new(c, &tr, &ev).unwrap();
    a.run(Some(dir2.path()), Some(3)).unwrap();
    let ck = Checkpoint::load(&RunLayout::new(dir2.path()).last_checkpoint()).unwrap();
    assert_eq!(ck.state.step, 3);
    let mut b = Trainer::from_checkpoint(ck, &tr, &ev).unwrap();
    b.run(Some(dir2.path()), None).unwrap();
    for (n, p) in t.state.store.iter() {
        assert_eq!(b.state.store.get(n).unwrap(), p, "{n}");
    }
    assert_eq!(b.state.history, t.state.history);
}

#[test]
fn evaluation_is_deterministic_and_checks_data() {
    let c = tiny_cfg();
    let (tr, ev) = data(&c);
    let t = Trainer::new(c.clone(), &tr, &ev).unwrap();
    let ck = t.checkpoint();
    let a = evaluate_checkpoint(&ck, &ev, "m").unwrap();
    let b = evaluate_checkpoint(&ck, &ev, "m").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_string(), b.to_string());
    assert_eq!(a.rows.len(), 2);
    assert_eq!(a.rows[0].roi, "near");
    assert_eq!(a.sweep.len(), 5);
    assert!(a.box_ap.is_some());

    let mut other = c.clone();
    other.data.world.speed = [0.0, 1.0];
    let ev2 = Dataset::generate(&other.data.eval_split()).unwrap();
    assert!(matches!(evaluate_checkpoint(&ck, &ev2, "m"), Err(Error::Config(_))));
    assert!(matches!(Trainer::new(c, &tr, &ev2), Err(Error::Config(_))));
}

#[test]
fn baseline_is_exact_on_the_current_frame() {
    let c = tiny_cfg();
    let (_, ev) = data(&c);
    let r = baseline_report(&c, &ev).unwrap();
    for row in &r.rows {
        assert_eq!(row.per_frame_vpq[0], 1.0);
    }
    assert!(r.sweep.is_empty() && r.box_ap.is_none());
}

#[test]
fn non_finite_parameters_abort_with_batch_id() {
    let c = tiny_cfg();
    let (tr, ev) = data(&c);
    let mut t = Trainer::new(c, &tr, &ev).unwrap();
    let name = t.state.store.names().filter(|n| n.starts_with("head.cls")).last().unwrap().to_string();
    t.state.store.get_mut(&name).unwrap().data_mut()[0] = f64::NAN;
    match t.step() {
        Err(Error::Numeric(m)) => assert!(m.contains("batch samples"), "{m}"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn ablation_grid_is_a_cartesian_product() {
    let axes = [
        AblationAxis::parse("loss.matching=multi,single,none").unwrap(),
        AblationAxis::parse("model.attention=fada,vanilla").unwrap(),
    ];
    let v = ablation_variants(&axes);
    assert_eq!(v.len(), 6);
    assert_eq!(v[1], vec!["loss.matching=multi".to_string(), "model.attention=vanilla".to_string()]);
    assert!(AblationAxis::parse("loss.matching=").is_err());
    assert!(AblationAxis::parse("nothing").is_err());
}

#[test]
fn ablation_rows_and_deltas() {
    let mut c = tiny_cfg();
    c.train.epochs = 1;
    let (tr, ev) = data(&c);
    let axes = [AblationAxis::parse("loss.matching=multi,single").unwrap()];
    let tab = run_ablation(&c, &axes, &[0], &tr, &ev, None).unwrap();
    assert_eq!(tab.rows.len(), 2);
    assert_eq!(tab.rows[0].delta_vpq, 0.0);
    assert!((tab.rows[1].delta_vpq - (tab.rows[1].mean_vpq - tab.rows[0].mean_vpq)).abs() < 1e-15);
    assert!(tab.to_string().contains("delta_vpq"));
}
