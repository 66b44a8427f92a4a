//! C ABI for the specmtm toolkit.
//!
//! Every function returns a [`SpecmtmStatus`]; on failure the message is
//! kept per thread and can be copied out with [`specmtm_last_error`].
//! Matrices are dense, row-major `double` arrays. Models are opaque
//! handles created by [`specmtm_model_load`] and released with
//! [`specmtm_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use specmtm::backbone::TimeSeriesBatch;
use specmtm::data::NormStats;
use specmtm::diagnostics::interaction_rank;
use specmtm::engine::graph::Graph;
use specmtm::model::Model;
use specmtm::ser::{bernstein_basis, MAX_ORDER};
use specmtm::spectral::{dft_forward, dft_inverse_with_residue, FeatureTensor, Spectrum};
use specmtm::{Error, Mat};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecmtmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Parse = 5,
    Config = 6,
    Checkpoint = 7,
    Io = 8,
    Internal = 9,
}

/// A loaded model together with the normalization it was trained with.
pub struct SpecmtmModel {
    model: Model,
    norm: Option<NormStats>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> SpecmtmStatus {
    match e {
        Error::NonFinite { .. } => SpecmtmStatus::NonFinite,
        Error::Shape { .. } => SpecmtmStatus::Shape,
        Error::InvalidArgument(_) | Error::Optimizer(_) => SpecmtmStatus::InvalidArgument,
        Error::Parse { .. } => SpecmtmStatus::Parse,
        Error::Config(_) => SpecmtmStatus::Config,
        Error::Checkpoint(_) => SpecmtmStatus::Checkpoint,
        Error::Io(_) => SpecmtmStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SpecmtmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SpecmtmStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer passed for {what}"));
            SpecmtmStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal error (panic)".into());
            SpecmtmStatus::Internal
        }
    }
}

fn nonnull<T>(p: *const T, what: &'static str) -> Result<*const T, Fail> {
    if p.is_null() {
        Err(Fail::Null(what))
    } else {
        Ok(p)
    }
}

fn out_ptr<T>(p: *mut T, what: &'static str) -> Result<*mut T, Fail> {
    if p.is_null() {
        Err(Fail::Null(what))
    } else {
        Ok(p)
    }
}

fn checked_len(rows: usize, cols: usize) -> Result<usize, Fail> {
    rows.checked_mul(cols)
        .ok_or_else(|| Fail::Lib(Error::InvalidArgument("matrix size overflows".into())))
}

/// # Safety
/// `p` must point to `rows * cols` readable doubles.
unsafe fn read_mat(p: *const f64, rows: usize, cols: usize, what: &'static str) -> Result<Mat, Fail> {
    let n = checked_len(rows, cols)?;
    let p = nonnull(p, what)?;
    let data = if n == 0 { Vec::new() } else { std::slice::from_raw_parts(p, n).to_vec() };
    Ok(Mat::from_vec(rows, cols, data)?)
}

/// # Safety
/// `p` must point to `m.len()` writable doubles.
unsafe fn write_mat(p: *mut f64, m: &Mat, what: &'static str) -> Result<(), Fail> {
    let p = out_ptr(p, what)?;
    if !m.is_empty() {
        std::slice::from_raw_parts_mut(p, m.len()).copy_from_slice(m.as_slice());
    }
    Ok(())
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `capacity` bytes, into `buf`. Returns the full message
/// length in bytes (excluding the terminator); `buf` may be null to query
/// the length.
///
/// # Safety
/// `buf` must be null or point to `capacity` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn specmtm_last_error(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && capacity > 0 {
            let n = msg.len().min(capacity - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn specmtm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Forward DFT of a real `t × d` matrix into `re` and `im` (`t × d` each).
///
/// # Safety
/// `x` must hold `t * d` doubles; `re` and `im` must each have room for
/// `t * d` doubles.
#[no_mangle]
pub unsafe extern "C" fn specmtm_dft_forward(
    x: *const f64,
    t: usize,
    d: usize,
    re: *mut f64,
    im: *mut f64,
) -> SpecmtmStatus {
    guard(|| {
        let z = FeatureTensor::new(read_mat(x, t, d, "x")?)?;
        let s = dft_forward(&z);
        write_mat(re, &s.re, "re")?;
        write_mat(im, &s.im, "im")
    })
}

/// Inverse DFT keeping the real part. When `residue` is not null it
/// receives the norm of the discarded imaginary part.
///
/// # Safety
/// `re`, `im` must hold `t * d` doubles; `out` must have room for `t * d`
/// doubles; `residue` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn specmtm_dft_inverse(
    re: *const f64,
    im: *const f64,
    t: usize,
    d: usize,
    out: *mut f64,
    residue: *mut f64,
) -> SpecmtmStatus {
    guard(|| {
        let spec = Spectrum::new(read_mat(re, t, d, "re")?, read_mat(im, t, d, "im")?)?;
        let (z, r) = dft_inverse_with_residue(&spec)?;
        write_mat(out, z.values(), "out")?;
        if !residue.is_null() {
            *residue = r;
        }
        Ok(())
    })
}

/// The `order + 1` Bernstein basis values at `w ∈ [0, 1]`.
///
/// # Safety
/// `out` must have room for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn specmtm_bernstein_basis(order: usize, w: f64, out: *mut f64, out_len: usize) -> SpecmtmStatus {
    guard(|| {
        if order == 0 || order > MAX_ORDER {
            return Err(Error::InvalidArgument(format!("order must lie in 1..={MAX_ORDER}, got {order}")).into());
        }
        if out_len != order + 1 {
            return Err(Error::InvalidArgument(format!("out_len must be order + 1 = {}", order + 1)).into());
        }
        let b = bernstein_basis(order, w)?;
        let out = out_ptr(out, "out")?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(b.values());
        Ok(())
    })
}

/// Number of singular values of the `n × n` matrix `a` above
/// `rel_tol · σ_max`.
///
/// # Safety
/// `a` must hold `n * n` doubles; `rank` must be writable.
#[no_mangle]
pub unsafe extern "C" fn specmtm_interaction_rank(
    a: *const f64,
    n: usize,
    rel_tol: f64,
    rank: *mut usize,
) -> SpecmtmStatus {
    guard(|| {
        if !(rel_tol.is_finite() && rel_tol >= 0.0) {
            return Err(Error::InvalidArgument("rel_tol must be finite and non-negative".into()).into());
        }
        let m = read_mat(a, n, n, "a")?;
        *out_ptr(rank, "rank")? = interaction_rank(&m, rel_tol)?;
        Ok(())
    })
}

/// Loads a checkpoint written by `specmtm pretrain`, `finetune` or
/// `probe`. On success `*out` owns a handle to release with
/// [`specmtm_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn specmtm_model_load(path: *const c_char, out: *mut *mut SpecmtmModel) -> SpecmtmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(nonnull(path, "path")?)
            .to_str()
            .map_err(|_| Error::InvalidArgument("path is not valid UTF-8".into()))?;
        let (model, meta) = Model::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(SpecmtmModel { model, norm: meta.norm }));
        Ok(())
    })
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`specmtm_model_load`] that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn specmtm_model_free(model: *mut SpecmtmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Series length, channel count and class count the model expects.
///
/// # Safety
/// `model` must be a live handle; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn specmtm_model_dims(
    model: *const SpecmtmModel,
    length: *mut usize,
    channels: *mut usize,
    classes: *mut usize,
) -> SpecmtmStatus {
    guard(|| {
        let m = &*nonnull(model, "model")?;
        let d = m.model.dims;
        *out_ptr(length, "length")? = d.length;
        *out_ptr(channels, "channels")? = d.channels;
        *out_ptr(classes, "classes")? = d.classes;
        Ok(())
    })
}

/// Classifies one raw `length × channels` series. The checkpoint's
/// normalization is applied first. `logits` (length `classes`) may be
/// null; `label` receives the arg-max class.
///
/// # Safety
/// `model` must be a live handle; `x` must hold `length * channels`
/// doubles; `logits` must be null or have room for `classes` doubles;
/// `label` must be writable.
#[no_mangle]
pub unsafe extern "C" fn specmtm_model_classify(
    model: *const SpecmtmModel,
    x: *const f64,
    length: usize,
    channels: usize,
    logits: *mut f64,
    classes: usize,
    label: *mut usize,
) -> SpecmtmStatus {
    guard(|| {
        let m = &*nonnull(model, "model")?;
        let dims = m.model.dims;
        if (length, channels) != (dims.length, dims.channels) {
            return Err(Error::InvalidArgument(format!(
                "series is {length} x {channels}, the model expects {} x {}",
                dims.length, dims.channels
            ))
            .into());
        }
        let label = out_ptr(label, "label")?;
        let mut x = read_mat(x, length, channels, "x")?;
        if let Some(norm) = &m.norm {
            let batch = TimeSeriesBatch::new(vec![x], None, length, channels, dims.classes)?;
            x = norm.apply(&batch)?.sample(0).clone();
        }
        let mut g = Graph::new(&m.model.store);
        let v = m.model.logits(&mut g, &x)?;
        let row = g.value(v).row(0);
        if !logits.is_null() {
            if classes != row.len() {
                return Err(Error::InvalidArgument(format!("classes must be {}, got {classes}", row.len())).into());
            }
            std::slice::from_raw_parts_mut(logits, classes).copy_from_slice(row);
        }
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        *label = best;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn last_error() -> String {
        unsafe {
            let n = specmtm_last_error(std::ptr::null_mut(), 0);
            let mut buf = vec![0u8; n + 1];
            specmtm_last_error(buf.as_mut_ptr().cast(), buf.len());
            CStr::from_bytes_until_nul(&buf).unwrap().to_string_lossy().into_owned()
        }
    }

    #[test]
    fn dft_roundtrip_through_the_abi() {
        let x = [1.0, -2.0, 0.5, 3.0, 0.0, 1.5];
        let (mut re, mut im, mut back) = ([0.0; 6], [0.0; 6], [0.0; 6]);
        let mut residue = -1.0;
        unsafe {
            assert_eq!(specmtm_dft_forward(x.as_ptr(), 3, 2, re.as_mut_ptr(), im.as_mut_ptr()), SpecmtmStatus::Ok);
            // Bin 0 of channel 0 is the plain sum.
            assert!((re[0] - (1.0 + 0.5 + 0.0)).abs() < 1e-12);
            let s = specmtm_dft_inverse(re.as_ptr(), im.as_ptr(), 3, 2, back.as_mut_ptr(), &mut residue);
            assert_eq!(s, SpecmtmStatus::Ok);
        }
        for (a, b) in x.iter().zip(back) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(residue.abs() < 1e-12);
    }

    #[test]
    fn errors_carry_status_and_message() {
        let mut out = [0.0; 3];
        unsafe {
            assert_eq!(specmtm_bernstein_basis(2, 1.5, out.as_mut_ptr(), 3), SpecmtmStatus::InvalidArgument);
            assert!(last_error().contains("1.5"), "{}", last_error());
            assert_eq!(specmtm_bernstein_basis(2, 0.5, out.as_mut_ptr(), 3), SpecmtmStatus::Ok);
            assert_eq!(last_error(), "");
            assert_eq!(out, [0.25, 0.5, 0.25]);
            let s = specmtm_dft_forward(std::ptr::null(), 2, 2, out.as_mut_ptr(), out.as_mut_ptr());
            assert_eq!(s, SpecmtmStatus::NullPointer);
            let nan = [f64::NAN; 4];
            let mut rank = 0;
            assert_eq!(specmtm_interaction_rank(nan.as_ptr(), 2, 1e-6, &mut rank), SpecmtmStatus::NonFinite);
        }
    }

    #[test]
    fn rank_of_identity() {
        let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut rank = 0;
        unsafe {
            assert_eq!(specmtm_interaction_rank(id.as_ptr(), 3, 1e-6, &mut rank), SpecmtmStatus::Ok);
        }
        assert_eq!(rank, 3);
    }

    #[test]
    fn truncated_message_is_terminated() {
        let mut out = [0.0; 2];
        unsafe {
            specmtm_bernstein_basis(0, 0.5, out.as_mut_ptr(), 1);
            let mut buf = [0x7fu8; 6];
            let n = specmtm_last_error(buf.as_mut_ptr().cast(), buf.len());
            assert!(n > 5);
            assert_eq!(buf[5], 0);
        }
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let p = CString::new("/nonexistent/model.ckpt").unwrap();
        let mut h: *mut SpecmtmModel = std::ptr::null_mut();
        unsafe {
            assert_eq!(specmtm_model_load(p.as_ptr(), &mut h), SpecmtmStatus::Checkpoint);
            assert!(last_error().contains("cannot open"));
            assert!(h.is_null());
            specmtm_model_free(h);
        }
    }

    #[test]
    fn classify_matches_the_library() {
        use specmtm::config::ModelConfig;
        use specmtm::engine::checkpoint::Dtype;
        use specmtm::model::Dims;
        use specmtm::rng::SeedTree;

        let cfg = ModelConfig {
            d: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            cbd_blocks: 1,
            heads: 2,
            window: 4,
            ff_mult: 2,
            order: 3,
            ..Default::default()
        };
        let model = Model::new(&cfg, Dims::new(16, 2, 3, 4).unwrap(), SeedTree::new(1)).unwrap();
        let norm = NormStats {
            mean: vec![0.5, -1.0],
            std: vec![2.0, 1.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path, Some(&norm), "test", Dtype::F64).unwrap();

        let raw: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let normalized = Mat::from_fn(16, 2, |r, c| (raw[r * 2 + c] - norm.mean[c]) / norm.std[c]);
        let mut g = Graph::new(&model.store);
        let v = model.logits(&mut g, &normalized).unwrap();
        let expect = g.value(v).row(0).to_vec();

        let p = CString::new(path.to_str().unwrap()).unwrap();
        let mut h: *mut SpecmtmModel = std::ptr::null_mut();
        let (mut len, mut ch, mut k) = (0, 0, 0);
        let mut logits = [0.0; 3];
        let mut label = 99;
        unsafe {
            assert_eq!(specmtm_model_load(p.as_ptr(), &mut h), SpecmtmStatus::Ok);
            assert_eq!(specmtm_model_dims(h, &mut len, &mut ch, &mut k), SpecmtmStatus::Ok);
            assert_eq!((len, ch, k), (16, 2, 3));
            let s = specmtm_model_classify(h, raw.as_ptr(), 16, 2, logits.as_mut_ptr(), 3, &mut label);
            assert_eq!(s, SpecmtmStatus::Ok);
            let s = specmtm_model_classify(h, raw.as_ptr(), 8, 2, std::ptr::null_mut(), 0, &mut label);
            assert_eq!(s, SpecmtmStatus::InvalidArgument);
            specmtm_model_free(h);
        }
        assert_eq!(logits.to_vec(), expect);
        let best = (0..3).max_by(|&a, &b| expect[a].total_cmp(&expect[b])).unwrap();
        assert_eq!(label, best);
    }

    /// The generated header must be valid C.
    #[test]
    fn header_compiles() {
        let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/specmtm.h");
        let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
        match std::process::Command::new(&cc)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
            .output()
        {
            Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
            Err(e) => eprintln!("skipping: no C compiler ({cc}: {e})"),
        }
    }
}
