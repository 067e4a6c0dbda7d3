use std::ffi::{CStr, CString};
use std::ptr;

use zoft_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(zoft_last_error()) }.to_string_lossy().into_owned()
}

fn partition(sizes: &[usize]) -> *mut ZoftPartition {
    let mut p = ptr::null_mut();
    let st = unsafe { zoft_partition_new(sizes.as_ptr(), sizes.len(), &mut p) };
    assert_eq!(st, ZoftStatus::Ok);
    p
}

fn task() -> *mut ZoftQuadratic {
    let (sizes, ranks, opnorms) = ([4usize, 12], [1.0, 12.0], [1.0, 1.0]);
    let mut t = ptr::null_mut();
    let st = unsafe { zoft_quadratic_rank_family(sizes.as_ptr(), ranks.as_ptr(), opnorms.as_ptr(), 2, &mut t) };
    assert_eq!(st, ZoftStatus::Ok);
    t
}

#[test]
fn partition_reports_shape() {
    let p = partition(&[3, 5]);
    unsafe {
        assert_eq!(zoft_partition_dim(p), 8);
        assert_eq!(zoft_partition_blocks(p), 2);
        zoft_partition_free(p);
        assert_eq!(zoft_partition_dim(ptr::null()), 0);
    }
}

#[test]
fn empty_partition_is_rejected_with_message() {
    let mut p = ptr::null_mut();
    let st = unsafe { zoft_partition_new(ptr::null(), 0, &mut p) };
    assert_ne!(st, ZoftStatus::Ok);
    assert!(p.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn null_output_pointer_is_reported() {
    let sizes = [2usize];
    let st = unsafe { zoft_partition_new(sizes.as_ptr(), 1, ptr::null_mut()) };
    assert_eq!(st, ZoftStatus::NullPointer);
    assert!(last_error().contains("out_partition"));
}

#[test]
fn normalized_scales_meet_budget() {
    let p = partition(&[2, 6]);
    let raw = [3.0, 0.5];
    let mut s = [0.0; 2];
    unsafe {
        assert_eq!(zoft_normalize_scales(p, raw.as_ptr(), s.as_mut_ptr(), 2), ZoftStatus::Ok);
        zoft_partition_free(p);
    }
    let budget = 2.0 * s[0] * s[0] + 6.0 * s[1] * s[1];
    assert!((budget - 8.0).abs() < 1e-12);
    assert!((s[0] / s[1] - 6.0).abs() < 1e-12);
    assert!(last_error().is_empty());
}

#[test]
fn noise_is_reproducible_and_walk_restores() {
    let p = partition(&[3, 4]);
    let scales = [0.5, 2.0];
    let mut a = [0.0; 7];
    let mut b = [0.0; 7];
    let theta0 = [0.1, -0.2, 0.3, 1.0, 2.0, -3.0, 0.5];
    let mut theta = theta0;
    unsafe {
        assert_eq!(zoft_sample_noise(p, scales.as_ptr(), 2, 9, 1, a.as_mut_ptr(), 7), ZoftStatus::Ok);
        assert_eq!(zoft_sample_noise(p, scales.as_ptr(), 2, 9, 1, b.as_mut_ptr(), 7), ZoftStatus::Ok);
        for step in [1e-3, -2e-3, 1e-3] {
            let st = zoft_perturb_in_place(p, theta.as_mut_ptr(), 7, scales.as_ptr(), 2, 9, 1, step);
            assert_eq!(st, ZoftStatus::Ok);
        }
        let st = zoft_sample_noise(p, scales.as_ptr(), 2, 9, 1, b.as_mut_ptr(), 6);
        assert_eq!(st, ZoftStatus::PartitionMismatch);
        zoft_partition_free(p);
    }
    assert_eq!(a.map(f64::to_bits)[..], b.map(f64::to_bits)[..]);
    for (x, y) in theta.iter().zip(&theta0) {
        assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
    }
}

#[test]
fn pertnn_round_trips_through_checkpoint() {
    let p = partition(&[4, 12]);
    let dir = tempfile::tempdir().unwrap();
    let file = CString::new(dir.path().join("net.pertnn").to_str().unwrap()).unwrap();
    let x = [1.0, 0.9, 1.0, 0.0, 0.5];
    let (mut s1, mut s2) = (0.0, 0.0);
    unsafe {
        let mut nn = ptr::null_mut();
        assert_eq!(zoft_pertnn_init(p, 8, 3, &mut nn), ZoftStatus::Ok);
        assert_eq!(zoft_pertnn_forward(nn, 1, x.as_ptr(), &mut s1), ZoftStatus::Ok);
        assert_eq!(zoft_pertnn_save(nn, file.as_ptr()), ZoftStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(zoft_pertnn_load(file.as_ptr(), &mut back), ZoftStatus::Ok);
        assert_eq!(zoft_pertnn_forward(back, 1, x.as_ptr(), &mut s2), ZoftStatus::Ok);
        assert_eq!(zoft_pertnn_forward(back, 5, x.as_ptr(), &mut s2), ZoftStatus::PartitionMismatch);
        zoft_pertnn_free(nn);
        zoft_pertnn_free(back);
        zoft_partition_free(p);
    }
    assert!(s1 > 0.0);
    assert_eq!(s1.to_bits(), s2.to_bits());
}

#[test]
fn corrupt_checkpoint_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.pertnn");
    std::fs::write(&path, "not a checkpoint\n").unwrap();
    let file = CString::new(path.to_str().unwrap()).unwrap();
    let mut nn = ptr::null_mut();
    let st = unsafe { zoft_pertnn_load(file.as_ptr(), &mut nn) };
    assert_eq!(st, ZoftStatus::Checkpoint);
    assert!(nn.is_null());
}

#[test]
fn quadratic_loss_and_finetune() {
    let t = task();
    let dim = unsafe { zoft_quadratic_dim(t) };
    assert_eq!(dim, 16);
    let ones = vec![1.0; dim];
    let mut loss = 0.0;
    let mut losses = vec![0.0; 50];
    unsafe {
        assert_eq!(zoft_quadratic_loss(t, ones.as_ptr(), dim, &mut loss), ZoftStatus::Ok);
        assert_eq!(zoft_finetune(t, ptr::null(), 0.05, 50, 1, losses.as_mut_ptr()), ZoftStatus::Ok);
        assert_eq!(zoft_quadratic_loss(t, ones.as_ptr(), dim - 1, &mut loss), ZoftStatus::PartitionMismatch);
        zoft_quadratic_free(t);
    }
    assert!(losses[0] > 0.0);
    assert!(losses[49] < losses[0]);
}

#[test]
fn finetune_reports_divergence() {
    let t = task();
    let mut losses = vec![0.0; 200];
    let st = unsafe { zoft_finetune(t, ptr::null(), 50.0, 200, 1, losses.as_mut_ptr()) };
    unsafe { zoft_quadratic_free(t) };
    assert_eq!(st, ZoftStatus::Diverged);
    assert!(losses[0].is_finite());
}

#[test]
fn bounds_are_ordered() {
    let t = task();
    let theta: Vec<f64> = (0..16).map(|k| 1.0 - 0.1 * k as f64).collect();
    let mut b = ZoftBounds::default();
    let st = unsafe { zoft_bounds(t, theta.as_ptr(), 16, 0.01, &mut b) };
    unsafe { zoft_quadratic_free(t) };
    assert_eq!(st, ZoftStatus::Ok);
    assert!(b.blockwise_optimal < b.blockwise_unit);
    assert!(b.blockwise_unit <= b.mezo);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/zoft.h")).unwrap();
    for name in [
        "zoft_last_error",
        "zoft_partition_new",
        "zoft_partition_free",
        "zoft_normalize_scales",
        "zoft_sample_noise",
        "zoft_perturb_in_place",
        "zoft_pertnn_init",
        "zoft_pertnn_load",
        "zoft_pertnn_save",
        "zoft_pertnn_forward",
        "zoft_quadratic_rank_family",
        "zoft_quadratic_loss",
        "zoft_finetune",
        "zoft_bounds",
        "ZOFT_STATUS_DIVERGED",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("check.c");
    std::fs::write(&src, "#include \"zoft.h\"\nint main(void) { return zoft_partition_dim(0) == 0 ? 0 : 1; }\n").unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
