//! C ABI for the stfusion pipeline. All objects are opaque handles created
//! and destroyed by this library; every fallible call returns a status code
//! and stores a message retrievable with `stf_last_error`.
//!
//! Status codes mirror the CLI's exit codes where they overlap:
//! 0 ok, 2 config/usage error, 3 numerical failure, 4 failed check,
//! 5 null pointer, 6 invalid UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::path::PathBuf;

use stfusion::encoder::Teacher;
use stfusion::error::Error;
use stfusion::harness::train::teacher_encoder_spec;
use stfusion::harness::{
    evaluate, gradcheck_all, train_student, train_teacher, ExperimentConfig, MetricsRecord,
    StudentModel,
};
use stfusion::scene::{generate_scene, save_scene};
use stfusion::tensor::ParameterStore;

pub const STF_OK: i32 = 0;
pub const STF_ERR_CONFIG: i32 = 2;
pub const STF_ERR_NUMERICAL: i32 = 3;
pub const STF_ERR_CHECK_FAILED: i32 = 4;
pub const STF_ERR_NULL: i32 = 5;
pub const STF_ERR_UTF8: i32 = 6;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> i32 {
    match err.exit_code() {
        3 => STF_ERR_NUMERICAL,
        _ => STF_ERR_CONFIG,
    }
}

fn fail(err: Error) -> i32 {
    let code = status_of(&err);
    set_error(err.to_string());
    code
}

/// Copy the message of the most recent error on this thread into `buf`
/// (NUL-terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must point to `len` writable bytes (or be null to only query the length).
#[no_mangle]
pub unsafe extern "C" fn stf_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

unsafe fn path_arg(ptr: *const c_char) -> Result<PathBuf, i32> {
    if ptr.is_null() {
        set_error("null path");
        return Err(STF_ERR_NULL);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(STF_ERR_UTF8)
        }
    }
}

macro_rules! nonnull {
    ($ptr:expr) => {
        match unsafe { $ptr.as_ref() } {
            Some(r) => r,
            None => {
                set_error(concat!("null handle: ", stringify!($ptr)));
                return STF_ERR_NULL;
            }
        }
    };
}

// ── configuration ───────────────────────────────────────────────────

/// Opaque experiment configuration.
pub struct StfConfig(ExperimentConfig);

/// Default configuration (the synthetic benchmark preset).
#[no_mangle]
pub extern "C" fn stf_config_default() -> *mut StfConfig {
    Box::into_raw(Box::new(StfConfig(ExperimentConfig::default())))
}

/// Load a configuration from a TOML file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stf_config_load(path: *const c_char, out: *mut *mut StfConfig) -> i32 {
    if out.is_null() {
        set_error("null output pointer");
        return STF_ERR_NULL;
    }
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(c) => return c,
    };
    match ExperimentConfig::load(&path) {
        Ok(cfg) => {
            *out = Box::into_raw(Box::new(StfConfig(cfg)));
            STF_OK
        }
        Err(e) => fail(e),
    }
}

/// Set one configuration field by its TOML key (value parsed as TOML, e.g.
/// `"42"`, `"0.1"`, `"\"st\""`, `"true"`). Unknown keys are errors.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn stf_config_set(
    cfg: *mut StfConfig,
    key: *const c_char,
    value: *const c_char,
) -> i32 {
    let Some(cfg) = cfg.as_mut() else {
        set_error("null config handle");
        return STF_ERR_NULL;
    };
    let (key, value) = match (CStr::from_ptr(key).to_str(), CStr::from_ptr(value).to_str()) {
        (Ok(k), Ok(v)) => (k, v),
        _ => {
            set_error("key/value not valid UTF-8");
            return STF_ERR_UTF8;
        }
    };
    let serialized = match toml::to_string(&cfg.0) {
        Ok(s) => s,
        Err(e) => return fail(Error::Config(e.to_string())),
    };
    let mut table: toml::Table = match serialized.parse() {
        Ok(t) => t,
        Err(e) => {
            let e: toml::de::Error = e;
            return fail(Error::Config(e.to_string()));
        }
    };
    let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(e) => return fail(Error::Config(format!("bad value for {key}: {e}"))),
    };
    table.insert(key.to_string(), parsed);
    match table.try_into::<ExperimentConfig>() {
        Ok(new_cfg) => match new_cfg.validate() {
            Ok(()) => {
                cfg.0 = new_cfg;
                STF_OK
            }
            Err(e) => fail(e),
        },
        Err(e) => fail(Error::Config(e.to_string())),
    }
}

/// # Safety
/// `cfg` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn stf_config_free(cfg: *mut StfConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

// ── scenes ──────────────────────────────────────────────────────────

/// Generate one scene with the config's scene parameters and write it to
/// `path` in the text scene format.
///
/// # Safety
/// `cfg` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn stf_gen_scene(
    cfg: *const StfConfig,
    scene_seed: u64,
    path: *const c_char,
) -> i32 {
    let cfg = nonnull!(cfg);
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(c) => return c,
    };
    let result = generate_scene(&cfg.0.scene_config(scene_seed))
        .and_then(|seq| save_scene(&seq, None, &path));
    match result {
        Ok(()) => STF_OK,
        Err(e) => fail(e),
    }
}

// ── teacher ─────────────────────────────────────────────────────────

/// Opaque frozen teacher.
pub struct StfTeacher(Teacher);

/// Train a teacher for the given config and return the frozen handle.
///
/// # Safety
/// `cfg` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stf_train_teacher(cfg: *const StfConfig, out: *mut *mut StfTeacher) -> i32 {
    let cfg = nonnull!(cfg);
    if out.is_null() {
        set_error("null output pointer");
        return STF_ERR_NULL;
    }
    let built = train_teacher(&cfg.0).and_then(|(store, _)| {
        Teacher::new(
            store,
            true,
            teacher_encoder_spec(&cfg.0),
            cfg.0.teacher_one_hot.then_some(cfg.0.num_classes),
        )
    });
    match built {
        Ok(t) => {
            *out = Box::into_raw(Box::new(StfTeacher(t)));
            STF_OK
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `teacher` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn stf_teacher_save(teacher: *const StfTeacher, path: *const c_char) -> i32 {
    let teacher = nonnull!(teacher);
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(c) => return c,
    };
    match teacher.0.store().save(&path, true) {
        Ok(()) => STF_OK,
        Err(e) => fail(e),
    }
}

/// # Safety
/// `cfg` must be a live handle; `path` NUL-terminated; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn stf_teacher_load(
    cfg: *const StfConfig,
    path: *const c_char,
    out: *mut *mut StfTeacher,
) -> i32 {
    let cfg = nonnull!(cfg);
    if out.is_null() {
        set_error("null output pointer");
        return STF_ERR_NULL;
    }
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(c) => return c,
    };
    let loaded = ParameterStore::load(&path).and_then(|(store, frozen)| {
        Teacher::new(
            store,
            frozen,
            teacher_encoder_spec(&cfg.0),
            cfg.0.teacher_one_hot.then_some(cfg.0.num_classes),
        )
    });
    match loaded {
        Ok(t) => {
            *out = Box::into_raw(Box::new(StfTeacher(t)));
            STF_OK
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `teacher` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn stf_teacher_free(teacher: *mut StfTeacher) {
    if !teacher.is_null() {
        drop(Box::from_raw(teacher));
    }
}

// ── student ─────────────────────────────────────────────────────────

/// Opaque trained student: weights plus its per-epoch metric records.
pub struct StfStudent {
    store: ParameterStore,
    metrics: Vec<MetricsRecord>,
}

/// Train a student. `teacher` may be null when the config's use_sup is off.
///
/// # Safety
/// Handles must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stf_train_student(
    cfg: *const StfConfig,
    teacher: *const StfTeacher,
    out: *mut *mut StfStudent,
) -> i32 {
    let cfg = nonnull!(cfg);
    if out.is_null() {
        set_error("null output pointer");
        return STF_ERR_NULL;
    }
    let teacher = teacher.as_ref().map(|t| &t.0);
    match train_student(&cfg.0, teacher) {
        Ok(t) => {
            *out = Box::into_raw(Box::new(StfStudent { store: t.store, metrics: t.metrics }));
            STF_OK
        }
        Err(e) => fail(e),
    }
}

/// Number of logged epochs.
///
/// # Safety
/// `student` must be a live handle (null yields 0).
#[no_mangle]
pub unsafe extern "C" fn stf_student_epochs(student: *const StfStudent) -> usize {
    student.as_ref().map_or(0, |s| s.metrics.len())
}

/// Fetch one epoch's record: detection loss, total loss, and eval AP.
///
/// # Safety
/// `student` must be live; output pointers may be null to skip a field.
#[no_mangle]
pub unsafe extern "C" fn stf_student_metric(
    student: *const StfStudent,
    epoch: usize,
    l_det: *mut f64,
    l_total: *mut f64,
    ap: *mut f64,
) -> i32 {
    let student = nonnull!(student);
    let Some(r) = student.metrics.get(epoch) else {
        set_error(format!("epoch {epoch} out of range"));
        return STF_ERR_CONFIG;
    };
    if !l_det.is_null() {
        *l_det = r.l_det;
    }
    if !l_total.is_null() {
        *l_total = r.l_total;
    }
    if !ap.is_null() {
        *ap = r.ap;
    }
    STF_OK
}

/// # Safety
/// `student` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn stf_student_save(student: *const StfStudent, path: *const c_char) -> i32 {
    let student = nonnull!(student);
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(c) => return c,
    };
    match student.store.save(&path, false) {
        Ok(()) => STF_OK,
        Err(e) => fail(e),
    }
}

/// Re-evaluate a student on the config's eval split; writes pooled AP.
///
/// # Safety
/// Handles must be live; `ap` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stf_eval(
    cfg: *const StfConfig,
    student: *const StfStudent,
    ap: *mut f64,
) -> i32 {
    let cfg = nonnull!(cfg);
    let student = nonnull!(student);
    if ap.is_null() {
        set_error("null output pointer");
        return STF_ERR_NULL;
    }
    let result = StudentModel::new(&cfg.0).and_then(|model| {
        model.check_store(&student.store)?;
        let scenes = model.eval_scenes()?;
        evaluate(&model, &student.store, &scenes)
    });
    match result {
        Ok(v) => {
            *ap = v;
            STF_OK
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `student` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn stf_student_free(student: *mut StfStudent) {
    if !student.is_null() {
        drop(Box::from_raw(student));
    }
}

// ── gradcheck ───────────────────────────────────────────────────────

/// Run the whole-model gradient audit. Returns 0 on pass, 4 on a tolerance
/// failure; `max_rel_err` (optional) receives the worst relative error.
///
/// # Safety
/// `max_rel_err` may be null or must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stf_gradcheck(seed: u64, tol: f64, max_rel_err: *mut f64) -> i32 {
    match gradcheck_all(seed) {
        Ok(report) => {
            if !max_rel_err.is_null() {
                *max_rel_err = report.max_rel_err();
            }
            if report.passes(tol) {
                STF_OK
            } else {
                set_error(format!("gradcheck max relative error {}", report.max_rel_err()));
                STF_ERR_CHECK_FAILED
            }
        }
        Err(e) => fail(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn set(cfg: *mut StfConfig, key: &str, value: &str) -> i32 {
        let k = CString::new(key).unwrap();
        let v = CString::new(value).unwrap();
        unsafe { stf_config_set(cfg, k.as_ptr(), v.as_ptr()) }
    }

    fn tiny(cfg: *mut StfConfig) {
        for (k, v) in [
            ("train_scenes", "4"),
            ("eval_scenes", "2"),
            ("epochs", "1"),
            ("teacher_epochs", "1"),
            ("grid_h", "16"),
            ("grid_w", "16"),
            ("c_p", "3"),
            ("c", "4"),
            ("k", "2"),
            ("num_objects", "2"),
            ("clutter_density", "0.02"),
        ] {
            assert_eq!(set(cfg, k, v), STF_OK, "setting {k}");
        }
    }

    #[test]
    fn config_set_rejects_unknown_keys_and_bad_values() {
        let cfg = stf_config_default();
        assert_eq!(set(cfg, "bogus", "1"), STF_ERR_CONFIG);
        assert_eq!(set(cfg, "k", "0"), STF_ERR_CONFIG);
        assert_eq!(set(cfg, "k", "2"), STF_OK);
        let mut buf = [0i8; 256];
        let n = unsafe { stf_last_error(buf.as_mut_ptr(), buf.len()) };
        assert!(n > 0);
        unsafe { stf_config_free(cfg) };
    }

    #[test]
    fn null_handles_are_rejected() {
        let mut ap = 0.0;
        assert_eq!(
            unsafe { stf_eval(std::ptr::null(), std::ptr::null(), &mut ap) },
            STF_ERR_NULL
        );
        assert_eq!(unsafe { stf_student_epochs(std::ptr::null()) }, 0);
    }

    #[test]
    fn scene_generation_writes_a_parseable_file() {
        let dir = tempdir();
        let cfg = stf_config_default();
        tiny(cfg);
        let path = CString::new(dir.join("scene.txt").to_str().unwrap()).unwrap();
        assert_eq!(unsafe { stf_gen_scene(cfg, 7, path.as_ptr()) }, STF_OK);
        let text = std::fs::read_to_string(dir.join("scene.txt")).unwrap();
        assert!(text.starts_with("stfusion-scene v1"));
        unsafe { stf_config_free(cfg) };
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn full_train_eval_roundtrip_through_the_abi() {
        let dir = tempdir();
        let cfg = stf_config_default();
        tiny(cfg);
        let mut teacher: *mut StfTeacher = std::ptr::null_mut();
        assert_eq!(unsafe { stf_train_teacher(cfg, &mut teacher) }, STF_OK);
        // save + reload the teacher through the ABI
        let tpath = CString::new(dir.join("teacher.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(unsafe { stf_teacher_save(teacher, tpath.as_ptr()) }, STF_OK);
        let mut teacher2: *mut StfTeacher = std::ptr::null_mut();
        assert_eq!(unsafe { stf_teacher_load(cfg, tpath.as_ptr(), &mut teacher2) }, STF_OK);

        let mut student: *mut StfStudent = std::ptr::null_mut();
        assert_eq!(unsafe { stf_train_student(cfg, teacher2, &mut student) }, STF_OK);
        assert_eq!(unsafe { stf_student_epochs(student) }, 1);
        let (mut l_det, mut l_total, mut ap) = (0.0, 0.0, -1.0);
        assert_eq!(
            unsafe { stf_student_metric(student, 0, &mut l_det, &mut l_total, &mut ap) },
            STF_OK
        );
        assert!(l_det.is_finite() && l_total >= l_det && ap >= 0.0);
        let mut ap2 = -1.0;
        assert_eq!(unsafe { stf_eval(cfg, student, &mut ap2) }, STF_OK);
        assert_eq!(ap, ap2);
        unsafe {
            stf_student_free(student);
            stf_teacher_free(teacher2);
            stf_teacher_free(teacher);
            stf_config_free(cfg);
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "stfusion-ffi-test-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
