//! C ABI over the topology and game layers.
//!
//! Every fallible function returns an [`HcStatus`]; on failure a message is kept per
//! thread and can be read with [`hc_last_error_message`]. Matrices are row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use hinf_coalition::linalg::{Mat, Vector};
use hinf_coalition::riccati::{AgentDynamics, LocalWeights};
use hinf_coalition::{game::GlobalGame, topology::Topology, Error};

/// Opaque communication graph.
pub struct HcTopology {
    inner: Topology,
}

/// Opaque solved game (local GAREs plus the grounded Laplacian).
pub struct HcGame {
    inner: GlobalGame,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    SingularGrounding = 3,
    NotConnected = 4,
    NotHurwitz = 5,
    NoStabilizingSolution = 6,
    DimensionMismatch = 7,
    NotSymmetric = 8,
    InvalidTopology = 9,
    Internal = 10,
    Panic = 11,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HcStatus {
    match e {
        Error::SingularGrounding(_) => HcStatus::SingularGrounding,
        Error::NotConnected => HcStatus::NotConnected,
        Error::NotHurwitz { .. } => HcStatus::NotHurwitz,
        Error::NoStabilizingSolution(_) => HcStatus::NoStabilizingSolution,
        Error::DimensionMismatch(_) => HcStatus::DimensionMismatch,
        Error::NotSymmetric(_) => HcStatus::NotSymmetric,
        Error::InvalidTopology(_) => HcStatus::InvalidTopology,
        Error::Validation(_) | Error::Parse(_) => HcStatus::InvalidArgument,
        _ => HcStatus::Internal,
    }
}

fn fail(status: HcStatus, msg: &str) -> HcStatus {
    set_error(msg);
    status
}

fn guard<F: FnOnce() -> Result<(), HcStatus>>(f: F) -> HcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HcStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(HcStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: hinf_coalition::Result<T>) -> Result<T, HcStatus> {
    r.map_err(|e| fail(status_of(&e), &e.to_string()))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], HcStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(HcStatus::NullPointer, &format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], HcStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(HcStatus::NullPointer, &format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Mat, HcStatus> {
    Ok(Mat::from_row_slice(rows, cols, slice(p, rows * cols, what)?))
}

fn write_rows(m: &Mat, out: &mut [f64]) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[i * m.ncols() + j] = m[(i, j)];
        }
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, HcStatus> {
    p.as_ref()
        .ok_or_else(|| fail(HcStatus::NullPointer, &format!("{what} is null")))
}

/// Message for the last failing call on this thread, or null. Valid until the next failure.
#[no_mangle]
pub extern "C" fn hc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Static, nul-terminated version string.
#[no_mangle]
pub extern "C" fn hc_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(c) => c,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

/// Builds a graph from an `n × n` adjacency matrix and `n` pinning gains.
///
/// # Safety
/// `adjacency` must point to `n * n` doubles, `pinning` to `n` doubles and `out` to
/// writable storage for one pointer. Free the result with [`hc_topology_free`].
#[no_mangle]
pub unsafe extern "C" fn hc_topology_new(
    n: usize,
    adjacency: *const f64,
    pinning: *const f64,
    n_bar: usize,
    out: *mut *mut HcTopology,
) -> HcStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(HcStatus::NullPointer, "out is null"));
        }
        let adj = matrix(adjacency, n, n, "adjacency")?;
        let pins = slice(pinning, n, "pinning")?.to_vec();
        let top = lift(Topology::new(adj, pins, n_bar))?;
        *out = Box::into_raw(Box::new(HcTopology { inner: top }));
        Ok(())
    })
}

/// # Safety
/// `top` must be null or a pointer returned by [`hc_topology_new`] and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hc_topology_free(top: *mut HcTopology) {
    if !top.is_null() {
        drop(Box::from_raw(top));
    }
}

/// Algebraic connectivity of the Laplacian (infinite for a single agent).
///
/// # Safety
/// `top` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hc_topology_lambda2(top: *const HcTopology, out: *mut f64) -> HcStatus {
    guard(|| {
        let top = handle(top, "topology")?;
        let out = slice_mut(out, 1, "out")?;
        out[0] = lift(top.inner.lambda2())?;
        Ok(())
    })
}

/// Smallest eigenvalue of the grounded Laplacian `L + G`.
///
/// # Safety
/// `top` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hc_topology_grounded_min_eigenvalue(top: *const HcTopology, out: *mut f64) -> HcStatus {
    guard(|| {
        let top = handle(top, "topology")?;
        let out = slice_mut(out, 1, "out")?;
        out[0] = lift(top.inner.grounded())?.min_eigenvalue();
        Ok(())
    })
}

/// Solves the local GARE shared by every agent (homogeneous weights).
///
/// `a` is `n × n`, `b` is `n × m1`, `d` is `n × m2`, `q` is `n × n`, `r` is `m1 × m1`.
///
/// # Safety
/// All matrix pointers must cover their stated sizes, `top` must be a live handle and
/// `out` writable. Free the result with [`hc_game_free`].
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn hc_game_new(
    top: *const HcTopology,
    n: usize,
    m1: usize,
    m2: usize,
    a: *const f64,
    b: *const f64,
    d: *const f64,
    q: *const f64,
    r: *const f64,
    gamma: f64,
    out: *mut *mut HcGame,
) -> HcStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(HcStatus::NullPointer, "out is null"));
        }
        let top = handle(top, "topology")?;
        let dyn_ = lift(AgentDynamics::new(
            matrix(a, n, n, "a")?,
            matrix(b, n, m1, "b")?,
            matrix(d, n, m2, "d")?,
        ))?;
        let w = lift(LocalWeights::new(matrix(q, n, n, "q")?, matrix(r, m1, m1, "r")?, gamma))?;
        let game = lift(GlobalGame::homogeneous(top.inner.clone(), dyn_, w))?;
        *out = Box::into_raw(Box::new(HcGame { inner: game }));
        Ok(())
    })
}

/// # Safety
/// `game` must be null or a pointer returned by [`hc_game_new`] and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hc_game_free(game: *mut HcGame) {
    if !game.is_null() {
        drop(Box::from_raw(game));
    }
}

/// Copies agent `agent`'s `P` (`n × n`), `K` (`m1 × n`) and `L` (`m2 × n`). Any output may be null.
///
/// # Safety
/// `game` must be a live handle; non-null outputs must hold the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn hc_game_local_gains(
    game: *const HcGame,
    agent: usize,
    p: *mut f64,
    k: *mut f64,
    l: *mut f64,
) -> HcStatus {
    guard(|| {
        let game = &handle(game, "game")?.inner;
        let sol = game
            .solutions()
            .get(agent)
            .ok_or_else(|| fail(HcStatus::InvalidArgument, &format!("agent {agent} out of range")))?;
        for (m, dst) in [(&sol.p, p), (&sol.k, k), (&sol.l_gain, l)] {
            if !dst.is_null() {
                write_rows(m, slice_mut(dst, m.len(), "gain output")?);
            }
        }
        Ok(())
    })
}

/// Frobenius residual of `blkdiag(P_i)` in the global GARE.
///
/// # Safety
/// `game` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hc_game_global_residual(game: *const HcGame, out: *mut f64) -> HcStatus {
    guard(|| {
        let game = &handle(game, "game")?.inner;
        let out = slice_mut(out, 1, "out")?;
        out[0] = game.global_gare_residual();
        Ok(())
    })
}

/// Saddle-point strategies for the stacked neighbor error `delta` (length `N n`).
///
/// # Safety
/// `game` must be a live handle; `delta`, `u` and `w` must cover `delta_len`, `N m1`
/// and `N m2` doubles.
#[no_mangle]
pub unsafe extern "C" fn hc_game_coupled_strategies(
    game: *const HcGame,
    delta: *const f64,
    delta_len: usize,
    u: *mut f64,
    u_len: usize,
    w: *mut f64,
    w_len: usize,
) -> HcStatus {
    guard(|| {
        let game = &handle(game, "game")?.inner;
        let dims = game.dims();
        if u_len != dims.agents * dims.m1 || w_len != dims.agents * dims.m2 {
            return Err(fail(
                HcStatus::DimensionMismatch,
                &format!(
                    "outputs need {} and {} entries",
                    dims.agents * dims.m1,
                    dims.agents * dims.m2
                ),
            ));
        }
        let delta = Vector::from_column_slice(slice(delta, delta_len, "delta")?);
        let s = lift(game.coupled_strategies(&delta))?;
        slice_mut(u, u_len, "u")?.copy_from_slice(s.u.as_slice());
        slice_mut(w, w_len, "w")?.copy_from_slice(s.w.as_slice());
        Ok(())
    })
}

/// `V(δ) = ½ δᵀ blkdiag(P_i) δ`.
///
/// # Safety
/// `game` must be a live handle, `delta` must cover `delta_len` doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn hc_game_value(
    game: *const HcGame,
    delta: *const f64,
    delta_len: usize,
    out: *mut f64,
) -> HcStatus {
    guard(|| {
        let game = &handle(game, "game")?.inner;
        let dims = game.dims();
        if delta_len != dims.agents * dims.n {
            return Err(fail(
                HcStatus::DimensionMismatch,
                &format!("delta needs {} entries", dims.agents * dims.n),
            ));
        }
        let delta = Vector::from_column_slice(slice(delta, delta_len, "delta")?);
        slice_mut(out, 1, "out")?[0] = game.value_function(&delta);
        Ok(())
    })
}
