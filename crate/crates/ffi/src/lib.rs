//! C ABI over the `owlab` losses, open-world metrics, base queue and
//! experiment runner.
//!
//! Every function returns an [`OwlabStatus`]; on failure a message is
//! available from [`owlab_last_error`] on the same thread. Results come back
//! through out-pointers. Handles are opaque and must be released with their
//! `_free` function. Strings returned by the library are released with
//! [`owlab_string_free`].

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use owlab::error::Error;
use owlab::harness::experiment::{run_experiment, ExperimentConfig};
use owlab::inductive::{inductive_loss, BaseEntry, BaseQueue};
use owlab::losses::{
    balanced_loss, ce_multiclass, focal_softmax, smooth_l1, BalancedFactorMode, ClassCounts, LossConfig,
};
use owlab::numcore::masked_softmax;
use owlab::openworld::{energy, evaluate_detections, iou, map50, BBox, DetectionRecord, GroundTruth};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OwlabStatus {
    Ok = 0,
    InvalidArgument = 1,
    NumericDomain = 2,
    Divergence = 3,
    UndefinedMetric = 4,
    Config = 5,
    Parse = 6,
    Io = 7,
    NullPointer = 8,
    /// A run failed; any partial output was still written.
    PartialRun = 9,
    Panic = 10,
}

impl From<&Error> for OwlabStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) => OwlabStatus::InvalidArgument,
            Error::NumericDomain(_) => OwlabStatus::NumericDomain,
            Error::Divergence { .. } => OwlabStatus::Divergence,
            Error::UndefinedMetric(_) => OwlabStatus::UndefinedMetric,
            Error::Config(_) => OwlabStatus::Config,
            Error::Parse(_) | Error::Json(_) => OwlabStatus::Parse,
            Error::Io(_) => OwlabStatus::Io,
            Error::PartialRun { .. } => OwlabStatus::PartialRun,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn owlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn owlab_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

struct Fail(OwlabStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(OwlabStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, turning errors and panics into a status plus last-error text.
fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> OwlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OwlabStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            OwlabStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or point to `n` readable values.
unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn write<T>(out: *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    // SAFETY: checked non-null; the caller guarantees it is writable
    unsafe { out.write(v) };
    Ok(())
}

/// # Safety
/// `b` must be null or point to four values.
unsafe fn bbox(b: *const f64) -> Result<BBox, Fail> {
    let s = slice(b, 4, "box")?;
    Ok(BBox::new(s[0], s[1], s[2], s[3])?)
}

fn counts_from(counts: &[u64]) -> ClassCounts {
    ClassCounts::new(counts.iter().copied().enumerate().collect())
}

fn focal_config(k: usize, gamma: f64, alpha: f64, balanced: bool) -> LossConfig {
    LossConfig {
        gamma,
        alpha: (0..k).map(|c| (c, alpha)).collect(),
        balanced_factor_mode: if balanced {
            BalancedFactorMode::PaperCorrected
        } else {
            BalancedFactorMode::Off
        },
    }
}

/// Cross-entropy `-log probs[target]` of a probability vector of length `k`.
///
/// # Safety
/// `probs` must point to `k` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn owlab_ce_multiclass(probs: *const f64, k: usize, target: usize, out: *mut f64) -> OwlabStatus {
    guard(|| write(out, ce_multiclass(slice(probs, k, "probs")?, target)?))
}

/// Softmax focal loss with a uniform class weight `alpha`.
///
/// # Safety
/// `probs` must point to `k` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn owlab_focal_softmax(
    probs: *const f64,
    k: usize,
    target: usize,
    gamma: f64,
    alpha: f64,
    out: *mut f64,
) -> OwlabStatus {
    guard(|| {
        let cfg = focal_config(k, gamma, alpha, false);
        write(out, focal_softmax(slice(probs, k, "probs")?, target, &cfg)?)
    })
}

/// Focal loss scaled by the rarity factor of `target`; `counts[c]` is the
/// training instance count of class `c`.
///
/// # Safety
/// `probs` and `counts` must point to `k` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn owlab_balanced_loss(
    probs: *const f64,
    counts: *const u64,
    k: usize,
    target: usize,
    gamma: f64,
    alpha: f64,
    out: *mut f64,
) -> OwlabStatus {
    guard(|| {
        let cfg = focal_config(k, gamma, alpha, true);
        let counts = counts_from(slice(counts, k, "counts")?);
        write(out, balanced_loss(slice(probs, k, "probs")?, target, &cfg, &counts)?)
    })
}

/// Summed smooth-L1 over `n` coordinates.
///
/// # Safety
/// `pred` and `target` must point to `n` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn owlab_smooth_l1(pred: *const f64, target: *const f64, n: usize, out: *mut f64) -> OwlabStatus {
    guard(|| write(out, smooth_l1(slice(pred, n, "pred")?, slice(target, n, "target")?)?))
}

/// Softmax over classes with `seen[c] != 0`; unseen classes get probability
/// below 1e-12.
///
/// # Safety
/// `logits` and `seen` must point to `k` values and `out` to `k` writable
/// values.
#[no_mangle]
pub unsafe extern "C" fn owlab_masked_softmax(
    logits: *const f64,
    seen: *const u8,
    k: usize,
    out: *mut f64,
) -> OwlabStatus {
    guard(|| {
        let seen: Vec<bool> = slice(seen, k, "seen")?.iter().map(|&s| s != 0).collect();
        let p = masked_softmax(slice(logits, k, "logits")?, &seen)?;
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, k).copy_from_slice(&p);
        Ok(())
    })
}

/// Energy score `-logsumexp(logits)` over `n` seen-class logits.
///
/// # Safety
/// `logits` must point to `n` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn owlab_energy(logits: *const f64, n: usize, out: *mut f64) -> OwlabStatus {
    guard(|| write(out, energy(slice(logits, n, "logits")?)?))
}

/// Intersection over union of two `[x1, y1, x2, y2]` boxes.
///
/// # Safety
/// `a` and `b` must point to four values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn owlab_iou(a: *const f64, b: *const f64, out: *mut f64) -> OwlabStatus {
    guard(|| write(out, iou(&bbox(a)?, &bbox(b)?)))
}

/// Accumulates detections and ground truth for metric computation.
pub struct OwlabEvaluator {
    dets: Vec<DetectionRecord>,
    gts: Vec<GroundTruth>,
}

/// New empty evaluator; never null.
#[no_mangle]
pub extern "C" fn owlab_evaluator_new() -> *mut OwlabEvaluator {
    Box::into_raw(Box::new(OwlabEvaluator {
        dets: Vec::new(),
        gts: Vec::new(),
    }))
}

/// # Safety
/// `h` must be null or a live evaluator handle.
unsafe fn evaluator<'a>(h: *mut OwlabEvaluator) -> Result<&'a mut OwlabEvaluator, Fail> {
    h.as_mut().ok_or_else(|| null("evaluator"))
}

/// Adds a detection. `class_id < 0` marks an unknown-object detection.
///
/// # Safety
/// `h` must be a live evaluator and `bbox` must point to four values.
#[no_mangle]
pub unsafe extern "C" fn owlab_evaluator_add_detection(
    h: *mut OwlabEvaluator,
    image_id: u64,
    bbox_xyxy: *const f64,
    class_id: i64,
    score: f64,
) -> OwlabStatus {
    guard(|| {
        let class = usize::try_from(class_id).ok();
        let rec = DetectionRecord::new(image_id, bbox(bbox_xyxy)?, class, score)?;
        evaluator(h)?.dets.push(rec);
        Ok(())
    })
}

/// # Safety
/// `h` must be a live evaluator and `bbox` must point to four values.
#[no_mangle]
pub unsafe extern "C" fn owlab_evaluator_add_ground_truth(
    h: *mut OwlabEvaluator,
    image_id: u64,
    bbox_xyxy: *const f64,
    class_id: u64,
) -> OwlabStatus {
    guard(|| {
        let gt = GroundTruth {
            image_id,
            bbox: bbox(bbox_xyxy)?,
            class_id: class_id as usize,
        };
        evaluator(h)?.gts.push(gt);
        Ok(())
    })
}

/// mAP@0.5 over the `n` given classes. Fails with `UndefinedMetric` when
/// none of them has ground truth.
///
/// # Safety
/// `h` must be a live evaluator, `classes` must point to `n` values and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn owlab_evaluator_map50(
    h: *mut OwlabEvaluator,
    classes: *const u64,
    n: usize,
    out: *mut f64,
) -> OwlabStatus {
    guard(|| {
        let ev = evaluator(h)?;
        let set: BTreeSet<usize> = slice(classes, n, "classes")?.iter().map(|&c| c as usize).collect();
        let r = map50(&ev.dets, &ev.gts, &set)?;
        let mean = r
            .mean
            .ok_or_else(|| Fail(OwlabStatus::UndefinedMetric, "no ground truth for the given classes".into()))?;
        write(out, mean)
    })
}

/// Every open-world metric as a JSON document in `*out_json`; release it
/// with [`owlab_string_free`]. Classes in neither set count as unknown.
///
/// # Safety
/// `h` must be a live evaluator, the class arrays must hold `n_prev` and
/// `n_cur` values and `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn owlab_evaluator_evaluate_json(
    h: *mut OwlabEvaluator,
    previously_known: *const u64,
    n_prev: usize,
    current_known: *const u64,
    n_cur: usize,
    out_json: *mut *mut c_char,
) -> OwlabStatus {
    guard(|| {
        let ev = evaluator(h)?;
        let prev: BTreeSet<usize> = slice(previously_known, n_prev, "previously_known")?
            .iter()
            .map(|&c| c as usize)
            .collect();
        let cur: BTreeSet<usize> = slice(current_known, n_cur, "current_known")?
            .iter()
            .map(|&c| c as usize)
            .collect();
        let result = evaluate_detections(&ev.dets, &ev.gts, &prev, &cur)?;
        write(out_json, to_c_string(serde_json::to_string(&result).map_err(Error::from)?)?)
    })
}

/// # Safety
/// `h` must be null or a handle from [`owlab_evaluator_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn owlab_evaluator_free(h: *mut OwlabEvaluator) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Per-class FIFO of recent predictions used by the inductive loss.
pub struct OwlabBaseQueue {
    queue: BaseQueue,
}

/// New queue holding at most `capacity` entries per class; null when
/// `capacity` is 0.
#[no_mangle]
pub extern "C" fn owlab_base_queue_new(capacity: usize) -> *mut OwlabBaseQueue {
    match BaseQueue::new(capacity) {
        Ok(queue) => Box::into_raw(Box::new(OwlabBaseQueue { queue })),
        Err(e) => {
            set_error(e.to_string());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `h` must be null or a live queue handle.
unsafe fn queue<'a>(h: *mut OwlabBaseQueue) -> Result<&'a mut OwlabBaseQueue, Fail> {
    h.as_mut().ok_or_else(|| null("queue"))
}

/// Appends a prediction `(probs, boxes)` with its ground truth to the queue
/// of `target_class`, evicting that class's oldest entry when full.
///
/// # Safety
/// `h` must be a live queue, `probs` must point to `k` values and both box
/// pointers to four values.
#[no_mangle]
pub unsafe extern "C" fn owlab_base_queue_push(
    h: *mut OwlabBaseQueue,
    probs: *const f64,
    k: usize,
    boxes: *const f64,
    target_class: usize,
    target_box: *const f64,
) -> OwlabStatus {
    guard(|| {
        let four = |p, what| -> Result<[f64; 4], Fail> { Ok(slice(p, 4, what)?.try_into().expect("four values")) };
        let entry = BaseEntry {
            probs: slice(probs, k, "probs")?.to_vec(),
            boxes: four(boxes, "boxes")?,
            target_class,
            target_box: four(target_box, "target_box")?,
            input: Vec::new(),
        };
        queue(h)?.queue.push(target_class, entry);
        Ok(())
    })
}

/// Number of entries stored for `class`.
///
/// # Safety
/// `h` must be a live queue and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn owlab_base_queue_len(h: *mut OwlabBaseQueue, class: usize, out: *mut usize) -> OwlabStatus {
    guard(|| write(out, queue(h)?.queue.class_len(class)))
}

/// Inductive loss over the queue with balanced-loss parameters `gamma`,
/// uniform `alpha` and per-class training counts `counts[0..k]`.
///
/// # Safety
/// `h` must be a live queue, `counts` must point to `k` values and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn owlab_base_queue_inductive_loss(
    h: *mut OwlabBaseQueue,
    counts: *const u64,
    k: usize,
    gamma: f64,
    alpha: f64,
    out: *mut f64,
) -> OwlabStatus {
    guard(|| {
        let cfg = focal_config(k, gamma, alpha, true);
        let counts = counts_from(slice(counts, k, "counts")?);
        write(out, inductive_loss(&queue(h)?.queue, &counts, &cfg)?)
    })
}

/// # Safety
/// `h` must be null or a handle from [`owlab_base_queue_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn owlab_base_queue_free(h: *mut OwlabBaseQueue) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Experiment configuration built from `key=value` text.
pub struct OwlabExperiment {
    config: ExperimentConfig,
}

/// Parses a configuration (null or empty text gives the defaults). Returns
/// null on error; see [`owlab_last_error`].
///
/// # Safety
/// `config_kv` must be null or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn owlab_experiment_new(config_kv: *const c_char) -> *mut OwlabExperiment {
    let mut handle = ptr::null_mut();
    let status = guard(|| {
        let text = if config_kv.is_null() {
            ""
        } else {
            CStr::from_ptr(config_kv)
                .to_str()
                .map_err(|_| Fail(OwlabStatus::Parse, "config is not UTF-8".into()))?
        };
        let config = ExperimentConfig::from_kv(text)?;
        handle = Box::into_raw(Box::new(OwlabExperiment { config }));
        Ok(())
    });
    if status == OwlabStatus::Ok {
        handle
    } else {
        ptr::null_mut()
    }
}

/// Applies one `key=value` setting.
///
/// # Safety
/// `h` must be a live experiment handle and both strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn owlab_experiment_set(
    h: *mut OwlabExperiment,
    key: *const c_char,
    value: *const c_char,
) -> OwlabStatus {
    guard(|| {
        let exp = h.as_mut().ok_or_else(|| null("experiment"))?;
        let s = |p: *const c_char, what| -> Result<&str, Fail> {
            if p.is_null() {
                return Err(null(what));
            }
            CStr::from_ptr(p)
                .to_str()
                .map_err(|_| Fail(OwlabStatus::Parse, format!("{what} is not UTF-8")))
        };
        exp.config.set(s(key, "key")?, s(value, "value")?)?;
        Ok(exp.config.validate()?)
    })
}

/// sha256 of the configuration in `*out` (64 hex characters); release with
/// [`owlab_string_free`].
///
/// # Safety
/// `h` must be a live experiment handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn owlab_experiment_config_hash(h: *mut OwlabExperiment, out: *mut *mut c_char) -> OwlabStatus {
    guard(|| {
        let exp = h.as_ref().ok_or_else(|| null("experiment"))?;
        write(out, to_c_string(exp.config.config_hash())?)
    })
}

/// Runs the experiment and stores the report as JSON in `*out_json`. When
/// some runs fail the status is `PartialRun` and `*out_json` still receives
/// the partial report. Release the string with [`owlab_string_free`].
///
/// # Safety
/// `h` must be a live experiment handle and `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn owlab_experiment_run_json(h: *mut OwlabExperiment, out_json: *mut *mut c_char) -> OwlabStatus {
    guard(|| {
        let exp = h.as_ref().ok_or_else(|| null("experiment"))?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let (report, err) = match run_experiment(&exp.config) {
            Ok(r) => (r, None),
            Err(Error::PartialRun { cause, report }) => (*report, Some(cause)),
            Err(e) => return Err(e.into()),
        };
        write(out_json, to_c_string(serde_json::to_string(&report).map_err(Error::from)?)?)?;
        match err {
            None => Ok(()),
            Some(cause) => Err(Fail(OwlabStatus::PartialRun, cause)),
        }
    })
}

/// # Safety
/// `h` must be null or a handle from [`owlab_experiment_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn owlab_experiment_free(h: *mut OwlabExperiment) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

fn to_c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(OwlabStatus::InvalidArgument, "string contains NUL".into()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn owlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Maximum relative error per check of the finite-difference suite, written
/// to `out_max[0..11]` in the order of `owlab::gradcheck::CHECKS`.
/// `*out_passed` is 1 when every check is within tolerance.
///
/// # Safety
/// `out_max` must point to 11 writable values and `out_passed` be writable.
#[no_mangle]
pub unsafe extern "C" fn owlab_gradcheck(
    samples: usize,
    seed: u64,
    out_max: *mut f64,
    out_passed: *mut u8,
) -> OwlabStatus {
    guard(|| {
        let report = owlab::gradcheck::run_gradcheck(samples, seed)?;
        if out_max.is_null() {
            return Err(null("out_max"));
        }
        let dst = std::slice::from_raw_parts_mut(out_max, report.checks.len());
        for (d, c) in dst.iter_mut().zip(&report.checks) {
            *d = c.max_rel_err;
        }
        write(out_passed, u8::from(report.passed()))
    })
}
