use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use duet::concepts::{save_concept, ConceptTokens};
use duet::model::{Backbone, ModelConfig};
use duet_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_tiny(dir: &Path) -> (CString, CString) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = ModelConfig {
        d: 16,
        d_mlp: 32,
        n_layers: 1,
        ..ModelConfig::default()
    };
    let b = Backbone::init(cfg, &mut rng).unwrap();
    let t = ConceptTokens::allocate_random(2, 2, 16, 0.1, &mut rng).unwrap();
    let bp = dir.join("b.ckpt");
    let cp = dir.join("c.ckpt");
    b.save(&bp, Default::default()).unwrap();
    save_concept(&cp, "<sks>", &t).unwrap();
    (CString::new(bp.to_str().unwrap()).unwrap(), CString::new(cp.to_str().unwrap()).unwrap())
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(duet_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn open_sample_and_free() {
    let dir = tempfile::tempdir().unwrap();
    let (bp, cp) = write_tiny(dir.path());
    let mut m = std::ptr::null_mut();
    unsafe {
        assert_eq!(duet_model_open(bp.as_ptr(), cp.as_ptr(), &mut m), DuetStatus::Ok);
        let n = duet_model_latent_dim(m);
        assert_eq!(n, 64);
        let prompt = CString::new("generate <sks>").unwrap();
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        assert_eq!(duet_sample(m, prompt.as_ptr(), std::ptr::null(), 0, 7, 4, a.as_mut_ptr(), n), DuetStatus::Ok);
        assert_eq!(duet_sample(m, prompt.as_ptr(), std::ptr::null(), 0, 7, 4, b.as_mut_ptr(), n), DuetStatus::Ok);
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x.is_finite()));
        assert_eq!(
            duet_sample(m, prompt.as_ptr(), std::ptr::null(), 0, 7, 4, a.as_mut_ptr(), n - 1),
            DuetStatus::BufferTooSmall
        );
        let mut fp = [0 as c_char; 65];
        let mut len = 0;
        assert_eq!(duet_model_fingerprint(m, fp.as_mut_ptr(), fp.len(), &mut len), DuetStatus::Ok);
        assert_eq!(len, 64);
        assert_eq!(duet_model_fingerprint(m, fp.as_mut_ptr(), 10, &mut len), DuetStatus::BufferTooSmall);
        assert_eq!(len, 64);
        duet_model_free(m);
        duet_model_free(std::ptr::null_mut());
    }
}

#[test]
fn text_and_replay_report_truncation_or_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let (bp, cp) = write_tiny(dir.path());
    let mut m = std::ptr::null_mut();
    unsafe {
        assert_eq!(duet_model_open(bp.as_ptr(), cp.as_ptr(), &mut m), DuetStatus::Ok);
        assert_eq!(duet_model_set_max_new_tokens(m, 3), DuetStatus::Ok);
        let q = CString::new("what is <sks> 's toy ?").unwrap();
        let mut buf = [0 as c_char; 256];
        let mut len = 0;
        let s = duet_generate_text(m, std::ptr::null(), 0, q.as_ptr(), buf.as_mut_ptr(), buf.len(), &mut len);
        assert!(matches!(s, DuetStatus::Ok | DuetStatus::Truncated), "{s:?}");
        if s == DuetStatus::Truncated {
            assert!(last_error().contains("3 tokens"));
        }
        let n = duet_model_latent_dim(m);
        let mut z = vec![0.0; n];
        let s = duet_replay(m, q.as_ptr(), DuetReplayMode::Off, 0, 1, 4, z.as_mut_ptr(), n, buf.as_mut_ptr(), buf.len(), &mut len);
        assert_eq!(s, DuetStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), "what is <sks> 's toy ?");
        assert_eq!(len, q.as_bytes().len());
        duet_model_free(m);
    }
}

#[test]
fn errors_set_status_and_message() {
    let missing = CString::new("/nonexistent/b.ckpt").unwrap();
    let mut m = std::ptr::null_mut();
    unsafe {
        assert_eq!(duet_model_open(missing.as_ptr(), missing.as_ptr(), &mut m), DuetStatus::Io);
        assert!(m.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(duet_model_open(std::ptr::null(), missing.as_ptr(), &mut m), DuetStatus::NullArgument);
        assert_eq!(last_error(), "backbone_path is null");
        let bad = [0xffu8, 0];
        assert_eq!(duet_model_open(bad.as_ptr() as *const c_char, missing.as_ptr(), &mut m), DuetStatus::InvalidUtf8);
        assert_eq!(duet_model_latent_dim(std::ptr::null()), 0);
    }
}

#[test]
fn bleu_through_the_abi() {
    let a = CString::new("<sks> is a dog .").unwrap();
    let mut v = 0.0;
    unsafe {
        assert_eq!(duet_bleu(a.as_ptr(), a.as_ptr(), &mut v), DuetStatus::Ok);
        assert_eq!(v, 1.0);
        assert!(last_error().is_empty());
        let empty = CString::new("").unwrap();
        assert_eq!(duet_bleu(a.as_ptr(), empty.as_ptr(), &mut v), DuetStatus::Failed);
    }
}
