use std::ffi::{CStr, CString};
use std::ptr;

use cubediff::checkpoint::{save_checkpoint, Checkpoint};
use cubediff::predictor::{MaskValueMode, PredictorConfig};
use cubediff::quantizer::{CalibrationStats, QuantizerSpec};
use cubediff::trainer::{TrainConfig, TrainState};
use cubediff::Shape3;
use cubediff_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(cd_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn quantize_round_trip_through_handles() {
    let mut q = ptr::null_mut();
    assert_eq!(unsafe { cd_quantizer_new_uniform(8, 3, -1.0, 1.0, &mut q) }, CD_OK);
    assert_eq!(unsafe { cd_quantizer_levels(q) }, 8);
    let values = [-1.0f32, 0.0, 0.99, 0.3, -0.3, 5.0];
    let mut ids = [0u16; 6];
    assert_eq!(unsafe { cd_quantize(q, values.as_ptr(), 1, 2, 3, ids.as_mut_ptr()) }, CD_OK);
    assert_eq!(ids, [0, 4, 7, 5, 2, 7]);
    let mut back = [0f32; 6];
    assert_eq!(unsafe { cd_dequantize(q, ids.as_ptr(), 1, 2, 3, back.as_mut_ptr()) }, CD_OK);
    assert_eq!(back[0], -0.875);
    let mut again = [0u16; 6];
    assert_eq!(unsafe { cd_quantize(q, back.as_ptr(), 1, 2, 3, again.as_mut_ptr()) }, CD_OK);
    assert_eq!(again, ids);
    unsafe { cd_quantizer_free(q) };
}

#[test]
fn errors_are_codes_with_messages() {
    let mut q = ptr::null_mut();
    assert_eq!(unsafe { cd_quantizer_new_uniform(1, 3, -1.0, 1.0, &mut q) }, CD_ERR_INVALID);
    assert!(q.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { cd_quantizer_new_uniform(4, 2, 0.0, 1.0, &mut q) }, CD_OK);
    let values = [0.5f32; 6];
    let mut ids = [0u16; 6];
    // Quantizer has d = 2, tensor has d = 3.
    assert_eq!(unsafe { cd_quantize(q, values.as_ptr(), 1, 2, 3, ids.as_mut_ptr()) }, CD_ERR_SHAPE);
    assert_eq!(unsafe { cd_quantize(q, ptr::null(), 1, 2, 2, ids.as_mut_ptr()) }, CD_ERR_NULL);
    unsafe { cd_quantizer_free(q) };

    let missing = CString::new("/nonexistent/spec.json").unwrap();
    assert_eq!(unsafe { cd_quantizer_load(missing.as_ptr(), &mut q) }, CD_ERR_IO);
    assert!(last_error().contains("nonexistent"));
}

fn write_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
    let shape = Shape3::new(2, 2, 3).unwrap();
    let predictor = PredictorConfig {
        shape,
        levels: 4,
        hidden: 8,
        blocks: 1,
        heads: 2,
        mlp_ratio: 2,
        classes: 3,
        mask_mode: MaskValueMode::Learned,
    };
    let train = TrainConfig::default();
    let ckpt = Checkpoint {
        state: TrainState::new(predictor, &train).unwrap(),
        train,
        spec: QuantizerSpec::new(4, CalibrationStats::uniform(3, -1.0, 1.0).unwrap()).unwrap(),
    };
    let path = dir.join("model.cbdk");
    save_checkpoint(&path, &ckpt).unwrap();
    path
}

#[test]
fn model_generation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(write_checkpoint(dir.path()).to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cd_model_load(path.as_ptr(), 1, &mut m) }, CD_OK);
    let (mut h, mut w, mut d, mut levels, mut classes) = (0, 0, 0, 0, 0);
    assert_eq!(
        unsafe { cd_model_info(m, &mut h, &mut w, &mut d, &mut levels, &mut classes) },
        CD_OK
    );
    assert_eq!((h, w, d, levels, classes), (2, 2, 3, 4, 3));

    let opts = CdSampleOptions {
        steps: 6,
        temperature: 1.0,
        guidance: 2.0,
        class_id: 1,
        seed: 9,
    };
    let mut a = [0u16; 12];
    let mut b = [0u16; 12];
    let mut calls = 0u32;
    assert_eq!(unsafe { cd_generate(m, &opts, a.as_mut_ptr(), 12, &mut calls) }, CD_OK);
    assert_eq!(calls, 12);
    assert_eq!(unsafe { cd_generate(m, &opts, b.as_mut_ptr(), 12, ptr::null_mut()) }, CD_OK);
    assert_eq!(a, b);
    assert!(a.iter().all(|&id| id < 4));

    let bad = CdSampleOptions { steps: 0, ..opts };
    assert_eq!(unsafe { cd_generate(m, &bad, a.as_mut_ptr(), 12, ptr::null_mut()) }, CD_ERR_CONFIG);
    assert_eq!(unsafe { cd_generate(m, &opts, a.as_mut_ptr(), 11, ptr::null_mut()) }, CD_ERR_SHAPE);
    unsafe { cd_model_free(m) };
}

#[test]
fn corrupted_checkpoint_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_checkpoint(dir.path());
    let mut bytes = std::fs::read(&p).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&p, bytes).unwrap();
    let path = CString::new(p.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cd_model_load(path.as_ptr(), 0, &mut m) }, CD_ERR_INTEGRITY);
    assert!(m.is_null());
}

#[test]
fn verify_suite_by_name() {
    let name = CString::new("schedule").unwrap();
    assert_eq!(unsafe { cd_verify(name.as_ptr(), 0) }, CD_OK);
    let bogus = CString::new("nope").unwrap();
    assert_eq!(unsafe { cd_verify(bogus.as_ptr(), 0) }, CD_ERR_CONFIG);
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/cubediff.h")).unwrap();
    for sym in [
        "cd_quantizer_load",
        "cd_quantize",
        "cd_dequantize",
        "cd_model_load",
        "cd_generate",
        "cd_last_error",
        "CdSampleOptions",
        "CD_ERR_PANIC",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
}
