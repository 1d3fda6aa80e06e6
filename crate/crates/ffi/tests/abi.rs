use std::ffi::{CStr, CString};
use std::ptr;

use bevpred::config::RunConfig;
use bevpred::trainer::Trainer;
use bevpred::world::{Dataset, GridSpec};
use bevpred_ffi::*;

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.data.world.grid = GridSpec::new(12, 12, 1.0).unwrap();
    c.data.world.t_out = 2;
    c.data.world.agents = [1, 2];
    c.data.world.spawn_half_extent = 3.0;
    c.data.world.min_gap = 3.0;
    c.data.train_scenarios = 2;
    c.data.eval_scenarios = 2;
    c.model = bevpred::model::ModelConfig {
        num_queries: 3,
        ..bevpred::model::ModelConfig::tiny()
    };
    c.train.epochs = 0;
    c
}

fn last_error() -> String {
    let p = bp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

#[test]
fn dataset_handles() {
    let cfg = CString::new(tiny().to_toml()).unwrap();
    let mut a = ptr::null_mut();
    let mut b = ptr::null_mut();
    unsafe {
        assert_eq!(bp_dataset_generate(cfg.as_ptr(), BpSplit::Eval, &mut a), BpStatus::Ok);
        assert_eq!(bp_dataset_generate(cfg.as_ptr(), BpSplit::Eval, &mut b), BpStatus::Ok);
        let mut n = 0usize;
        assert_eq!(bp_dataset_len(a, &mut n), BpStatus::Ok);
        assert_eq!(n, 2);
        let mut ha = [0 as std::ffi::c_char; 65];
        let mut hb = [0 as std::ffi::c_char; 65];
        assert_eq!(bp_dataset_hash(a, ha.as_mut_ptr(), ha.len()), BpStatus::Ok);
        assert_eq!(bp_dataset_hash(b, hb.as_mut_ptr(), hb.len()), BpStatus::Ok);
        assert_eq!(CStr::from_ptr(ha.as_ptr()), CStr::from_ptr(hb.as_ptr()));
        assert_eq!(CStr::from_ptr(ha.as_ptr()).to_bytes().len(), 64);
        assert_eq!(bp_dataset_hash(a, ha.as_mut_ptr(), 10), BpStatus::BufferTooSmall);
        bp_dataset_free(a);
        bp_dataset_free(b);
        bp_dataset_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_codes() {
    let bad = CString::new("[train]\nlr = -1.0\n").unwrap();
    let missing = CString::new("/nonexistent/bevpred").unwrap();
    let mut ds = ptr::null_mut();
    unsafe {
        assert_eq!(bp_dataset_generate(bad.as_ptr(), BpSplit::Train, &mut ds), BpStatus::Config);
        assert!(last_error().contains("lr"));
        assert!(ds.is_null());
        assert_eq!(bp_dataset_open(missing.as_ptr(), &mut ds), BpStatus::Data);
        assert_eq!(bp_dataset_open(ptr::null(), &mut ds), BpStatus::NullArgument);
        assert!(last_error().contains("dir"));
        let mut n = 0usize;
        assert_eq!(bp_dataset_len(ptr::null(), &mut n), BpStatus::NullArgument);
    }
    let v = unsafe { CStr::from_ptr(bp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn predict_and_evaluate_through_the_abi() {
    let c = tiny();
    let tr = Dataset::generate(&c.data.train_split()).unwrap();
    let ev = Dataset::generate(&c.data.eval_split()).unwrap();
    let trainer = Trainer::new(c.clone(), &tr, &ev).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ck_path = dir.path().join("m.ckpt");
    trainer.checkpoint().save(&ck_path).unwrap();
    let want = bevpred::trainer::evaluate_checkpoint(&trainer.checkpoint(), &ev, "x").unwrap();

    let cfg = CString::new(c.to_toml()).unwrap();
    let path = CString::new(ck_path.to_str().unwrap()).unwrap();
    unsafe {
        let mut ds = ptr::null_mut();
        let mut ck = ptr::null_mut();
        assert_eq!(bp_dataset_generate(cfg.as_ptr(), BpSplit::Eval, &mut ds), BpStatus::Ok);
        assert_eq!(bp_checkpoint_open(path.as_ptr(), &mut ck), BpStatus::Ok);
        let mut step = 9u64;
        assert_eq!(bp_checkpoint_step(ck, &mut step), BpStatus::Ok);
        assert_eq!(step, 0);

        let mut maps = ptr::null_mut();
        assert_eq!(bp_predict(ck, ds, 5, &mut maps), BpStatus::OutOfRange);
        assert_eq!(bp_predict(ck, ds, 1, &mut maps), BpStatus::Ok);
        let (mut t, mut h, mut w) = (0, 0, 0);
        assert_eq!(bp_maps_dims(maps, &mut t, &mut h, &mut w), BpStatus::Ok);
        assert_eq!((t, h, w), (3, 12, 12));
        let mut buf = vec![u32::MAX; t * h * w];
        assert_eq!(bp_maps_copy(maps, buf.as_mut_ptr(), buf.len() - 1), BpStatus::BufferTooSmall);
        assert_eq!(bp_maps_copy(maps, buf.as_mut_ptr(), buf.len()), BpStatus::Ok);
        assert!(buf.iter().all(|&v| v <= 3));

        let mut m = BpMetrics::default();
        assert_eq!(bp_evaluate(ck, ds, &mut m), BpStatus::Ok);
        assert_eq!(m.vpq, want.primary().vpq);
        assert_eq!(m.iou, want.primary().iou);

        bp_maps_free(maps);
        bp_checkpoint_free(ck);
        bp_dataset_free(ds);
    }
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/bevpred.h")).unwrap();
    for f in [
        "bp_last_error",
        "bp_version",
        "bp_dataset_generate",
        "bp_dataset_open",
        "bp_dataset_len",
        "bp_dataset_hash",
        "bp_dataset_free",
        "bp_checkpoint_open",
        "bp_checkpoint_step",
        "bp_checkpoint_free",
        "bp_predict",
        "bp_maps_dims",
        "bp_maps_copy",
        "bp_maps_free",
        "bp_evaluate",
    ] {
        assert!(h.contains(&format!("{f}(")), "{f}");
    }
    assert!(h.contains("BP_STATUS_BUFFER_TOO_SMALL = 8"));
    assert!(h.contains("typedef struct BpDataset BpDataset;"));
}

#[test]
fn header_compiles_as_c() {
    let root = env!("CARGO_MANIFEST_DIR");
    let Ok(o) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I", &format!("{root}/include")])
        .arg(format!("{root}/examples/eval.c"))
        .output()
    else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
