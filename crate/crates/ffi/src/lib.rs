//! C interface to `moralis`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_read`
//! style functions and released with the matching `*_free`. Fallible calls
//! return a [`MoralisStatus`]; on failure the message is available from
//! [`moralis_last_error`] until the next failing call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufWriter;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use moralis::error::{Error, EstimateError};
use moralis::estimate::{fit_representative, FitOptions, Param, RepresentativeEstimate};
use moralis::io;
use moralis::model::{kappa_threshold, PayoffTable, PreferenceParameters};
use moralis::simulate::{simulate_experiment, Arm, ChoiceDataset, PopulationComponent, PopulationSpec, TreatmentPlan};

/// Result of a fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoralisStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Malformed or unreadable input file.
    DataError = 3,
    /// The optimiser stopped without meeting its tolerance.
    ConvergenceError = 4,
    /// Estimation or simulation rejected the inputs.
    ModelError = 5,
    Panic = 6,
}

/// Treatment arms: non-VOI then VOI (neutral or market), or VOI in both
/// frames in either order.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoralisArm {
    N = 0,
    M = 1,
    A = 2,
    B = 3,
}

impl From<MoralisArm> for Arm {
    fn from(a: MoralisArm) -> Self {
        match a {
            MoralisArm::N => Arm::N,
            MoralisArm::M => Arm::M,
            MoralisArm::A => Arm::A,
            MoralisArm::B => Arm::B,
        }
    }
}

pub struct MoralisPayoffTable(PayoffTable);

/// Population under construction; validated when used.
pub struct MoralisPopulation(Vec<PopulationComponent>);

pub struct MoralisDataset(ChoiceDataset);

pub struct MoralisEstimate(RepresentativeEstimate);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: MoralisStatus, msg: impl Into<String>) -> MoralisStatus {
    set_error(msg);
    status
}

fn status_of(err: &Error) -> MoralisStatus {
    match err {
        Error::Estimate(
            EstimateError::NonConvergence(_)
            | EstimateError::MixtureNonConvergence(_)
            | EstimateError::LabelDegeneracy { .. },
        ) => MoralisStatus::ConvergenceError,
        Error::Data(_) => MoralisStatus::DataError,
        Error::Config(_) => MoralisStatus::InvalidArgument,
        _ => MoralisStatus::ModelError,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard<F>(f: F) -> MoralisStatus
where
    F: FnOnce() -> Result<(), MoralisStatus>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MoralisStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(MoralisStatus::Panic, "internal panic"),
    }
}

fn lift<T, E: Into<Error>>(r: Result<T, E>) -> Result<T, MoralisStatus> {
    r.map_err(|e| {
        let e = e.into();
        fail(status_of(&e), e.to_string())
    })
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, MoralisStatus> {
    if p.is_null() {
        return Err(fail(MoralisStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(MoralisStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, MoralisStatus> {
    p.as_ref()
        .ok_or_else(|| fail(MoralisStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, MoralisStatus> {
    p.as_mut()
        .ok_or_else(|| fail(MoralisStatus::NullPointer, format!("{what} is null")))
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn moralis_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn moralis_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// The built-in 20-row payoff table.
#[no_mangle]
pub extern "C" fn moralis_payoff_table_builtin() -> *mut MoralisPayoffTable {
    Box::into_raw(Box::new(MoralisPayoffTable(PayoffTable::builtin())))
}

/// Reads a payoff CSV (`id,e1,e2,g,l`).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn moralis_payoff_table_read(
    path: *const c_char,
    out: *mut *mut MoralisPayoffTable,
) -> MoralisStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let table = lift(io::read_payoffs(path_arg(path)?))?;
        *out = Box::into_raw(Box::new(MoralisPayoffTable(table)));
        Ok(())
    })
}

/// Number of payoff configurations; 0 for a null handle.
///
/// # Safety
/// `table` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moralis_payoff_table_len(table: *const MoralisPayoffTable) -> usize {
    table.as_ref().map_or(0, |t| t.0.len())
}

/// Switching threshold `(z - beta) / (1 - z)` for payoff `id`.
///
/// # Safety
/// `table` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn moralis_kappa_threshold(
    table: *const MoralisPayoffTable,
    id: u32,
    beta: f64,
    out: *mut f64,
) -> MoralisStatus {
    guard(|| {
        let table = deref(table, "table")?;
        let out = out_ptr(out, "out")?;
        let payoff = table
            .0
            .get(id)
            .ok_or_else(|| fail(MoralisStatus::InvalidArgument, format!("no payoff with id {id}")))?;
        *out = kappa_threshold(beta, payoff);
        Ok(())
    })
}

/// # Safety
/// `table` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn moralis_payoff_table_free(table: *mut MoralisPayoffTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Empty population; add types with [`moralis_population_add`].
#[no_mangle]
pub extern "C" fn moralis_population_new() -> *mut MoralisPopulation {
    Box::into_raw(Box::new(MoralisPopulation(Vec::new())))
}

/// Adds a preference type with the given share. Shares must sum to one by
/// the time the population is used.
///
/// # Safety
/// `pop` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn moralis_population_add(
    pop: *mut MoralisPopulation,
    share: f64,
    beta: f64,
    kappa: f64,
    sigma: f64,
) -> MoralisStatus {
    guard(|| {
        let pop = out_ptr(pop, "population")?;
        let params = PreferenceParameters::new(beta, kappa, sigma);
        lift(params.validate_for_simulation())?;
        pop.0.push(PopulationComponent::new(share, params));
        Ok(())
    })
}

/// # Safety
/// `pop` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn moralis_population_free(pop: *mut MoralisPopulation) {
    if !pop.is_null() {
        drop(Box::from_raw(pop));
    }
}

/// Simulates `n_subjects` subjects in one arm.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn moralis_simulate(
    pop: *const MoralisPopulation,
    table: *const MoralisPayoffTable,
    arm: MoralisArm,
    n_subjects: usize,
    seed: u64,
    out: *mut *mut MoralisDataset,
) -> MoralisStatus {
    guard(|| {
        let pop = deref(pop, "population")?;
        let table = deref(table, "table")?;
        let out = out_ptr(out, "out")?;
        let spec = lift(PopulationSpec::new(pop.0.clone()))?;
        let plans = [(TreatmentPlan::for_table(arm.into(), &table.0), n_subjects)];
        let ds = lift(simulate_experiment(&spec, &plans, &table.0, seed))?;
        *out = Box::into_raw(Box::new(MoralisDataset(ds)));
        Ok(())
    })
}

/// Reads a choice dataset CSV against a payoff table.
///
/// # Safety
/// `path` must be NUL-terminated, `table` live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn moralis_dataset_read(
    path: *const c_char,
    table: *const MoralisPayoffTable,
    out: *mut *mut MoralisDataset,
) -> MoralisStatus {
    guard(|| {
        let table = deref(table, "table")?;
        let out = out_ptr(out, "out")?;
        let ds = lift(io::read_dataset(path_arg(path)?, table.0.clone()))?;
        *out = Box::into_raw(Box::new(MoralisDataset(ds)));
        Ok(())
    })
}

/// Writes the dataset as CSV.
///
/// # Safety
/// `ds` must be live and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn moralis_dataset_write(ds: *const MoralisDataset, path: *const c_char) -> MoralisStatus {
    guard(|| {
        let ds = deref(ds, "dataset")?;
        let path = path_arg(path)?;
        let f = File::create(path).map_err(|e| fail(MoralisStatus::DataError, format!("{}: {e}", path.display())))?;
        lift(io::write_dataset(BufWriter::new(f), &ds.0))
    })
}

/// Number of decisions; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moralis_dataset_len(ds: *const MoralisDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Fraction of selfish choices; NaN for a null or empty dataset.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moralis_dataset_selfish_share(ds: *const MoralisDataset) -> f64 {
    match ds.as_ref() {
        Some(d) if !d.0.is_empty() => d.0.records.iter().filter(|r| r.choice).count() as f64 / d.0.len() as f64,
        _ => f64::NAN,
    }
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn moralis_dataset_free(ds: *mut MoralisDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Representative-agent maximum likelihood with `starts` random starts
/// (0 selects the default).
///
/// # Safety
/// `ds` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn moralis_fit_representative(
    ds: *const MoralisDataset,
    starts: usize,
    seed: u64,
    out: *mut *mut MoralisEstimate,
) -> MoralisStatus {
    guard(|| {
        let ds = deref(ds, "dataset")?;
        let out = out_ptr(out, "out")?;
        let mut opts = FitOptions {
            seed,
            ..FitOptions::default()
        };
        if starts > 0 {
            opts.starts = starts;
        }
        let est = lift(fit_representative(&ds.0, &opts))?;
        *out = Box::into_raw(Box::new(MoralisEstimate(est)));
        Ok(())
    })
}

/// Point estimates `[beta, kappa, sigma]` and their subject-clustered
/// standard errors; `se` may be null. Missing clustered errors are NaN.
///
/// # Safety
/// `est` must be live; `params` must hold 3 doubles, as must `se` if non-null.
#[no_mangle]
pub unsafe extern "C" fn moralis_estimate_params(
    est: *const MoralisEstimate,
    params: *mut f64,
    se: *mut f64,
) -> MoralisStatus {
    guard(|| {
        let est = deref(est, "estimate")?;
        if params.is_null() {
            return Err(fail(MoralisStatus::NullPointer, "params is null"));
        }
        let params = std::slice::from_raw_parts_mut(params, 3);
        for p in Param::ALL {
            params[p.index()] = p.value(&est.0.params);
        }
        if !se.is_null() {
            let se = std::slice::from_raw_parts_mut(se, 3);
            for p in Param::ALL {
                se[p.index()] = est.0.se_clustered(p).unwrap_or(f64::NAN);
            }
        }
        Ok(())
    })
}

/// Maximised log-likelihood; NaN for a null handle.
///
/// # Safety
/// `est` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moralis_estimate_loglik(est: *const MoralisEstimate) -> f64 {
    est.as_ref().map_or(f64::NAN, |e| e.0.loglik)
}

/// # Safety
/// `est` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn moralis_estimate_free(est: *mut MoralisEstimate) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}
