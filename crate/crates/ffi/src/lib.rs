//! C ABI over `onelora` adapters.
//!
//! A `OneloraLayer` owns one frozen linear layer plus the adapter attached to
//! it. Every fallible function returns a `OneloraStatus`; on failure the
//! message is available from `onelora_last_error` on the same thread.
//! Matrices are dense row-major `double` arrays, `d × k` for weights.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use onelora::adapters::{self, make_adapter, AdapterKind, AdapterState, InitStreams, Method};
use onelora::linalg::{Matrix, Vector};
use onelora::model::FrozenLinear;
use onelora::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OneloraStatus {
    Ok = 0,
    NullPointer = 1,
    Shape = 2,
    Domain = 3,
    InvalidArgument = 4,
    Degenerate = 5,
    InvalidState = 6,
    Io = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OneloraMethod {
    OneLora = 0,
    Lora = 1,
    Dora = 2,
    Vera = 3,
    Mora1 = 4,
    Mora6 = 5,
    BitFit = 6,
    DiffFit = 7,
    All = 8,
    RandomCompression = 9,
}

impl From<OneloraMethod> for Method {
    fn from(m: OneloraMethod) -> Self {
        match m {
            OneloraMethod::OneLora => Method::OneLora,
            OneloraMethod::Lora => Method::Lora,
            OneloraMethod::Dora => Method::Dora,
            OneloraMethod::Vera => Method::Vera,
            OneloraMethod::Mora1 => Method::Mora1,
            OneloraMethod::Mora6 => Method::Mora6,
            OneloraMethod::BitFit => Method::BitFit,
            OneloraMethod::DiffFit => Method::DiffFit,
            OneloraMethod::All => Method::All,
            OneloraMethod::RandomCompression => Method::RandomCompression,
        }
    }
}

impl TryFrom<i32> for OneloraMethod {
    type Error = Error;

    fn try_from(v: i32) -> Result<Self, Error> {
        Method::ALL
            .into_iter()
            .map(OneloraMethod::from)
            .find(|m| *m as i32 == v)
            .ok_or_else(|| Error::Argument(format!("unknown method code {v}")))
    }
}

impl From<Method> for OneloraMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::OneLora => OneloraMethod::OneLora,
            Method::Lora => OneloraMethod::Lora,
            Method::Dora => OneloraMethod::Dora,
            Method::Vera => OneloraMethod::Vera,
            Method::Mora1 => OneloraMethod::Mora1,
            Method::Mora6 => OneloraMethod::Mora6,
            Method::BitFit => OneloraMethod::BitFit,
            Method::DiffFit => OneloraMethod::DiffFit,
            Method::All => OneloraMethod::All,
            Method::RandomCompression => OneloraMethod::RandomCompression,
        }
    }
}

/// Extra forward work of an unmerged adapter on one input.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OneloraFlops {
    pub mults: usize,
    pub adds: usize,
}

/// Opaque layer handle.
pub struct OneloraLayer {
    base: FrozenLinear,
    adapter: AdapterState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> OneloraStatus {
    match e {
        Error::Shape { .. } => OneloraStatus::Shape,
        Error::Domain(_) => OneloraStatus::Domain,
        Error::Argument(_) => OneloraStatus::InvalidArgument,
        Error::Degenerate(_) => OneloraStatus::Degenerate,
        Error::State(_) => OneloraStatus::InvalidState,
        Error::Io { .. } => OneloraStatus::Io,
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

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> OneloraStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OneloraStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            OneloraStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            OneloraStatus::Internal
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn live<'a>(h: *const OneloraLayer) -> Result<&'a OneloraLayer, Fail> {
    h.as_ref().ok_or(Fail::Null("layer"))
}

unsafe fn live_mut<'a>(h: *mut OneloraLayer) -> Result<&'a mut OneloraLayer, Fail> {
    h.as_mut().ok_or(Fail::Null("layer"))
}

fn check_len(op: &'static str, want: usize, got: usize) -> Result<(), Fail> {
    if want != got {
        return Err(Fail::Lib(Error::Shape {
            op,
            expected: want.to_string(),
            got: got.to_string(),
        }));
    }
    Ok(())
}

fn kind(method: i32, rank: usize) -> Result<AdapterKind, Fail> {
    let m = OneloraMethod::try_from(method)?;
    let kind = AdapterKind::new(m.into()).with_rank(rank);
    kind.validate()?;
    Ok(kind)
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn onelora_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parses a method name such as `"ilora"` or `"mora6"`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn onelora_method_from_name(name: *const c_char, out: *mut OneloraMethod) -> OneloraStatus {
    guard(|| {
        if name.is_null() {
            return Err(Fail::Null("name"));
        }
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        let s = CStr::from_ptr(name)
            .to_str()
            .map_err(|_| Error::Argument("method name is not UTF-8".into()))?;
        *out = s.parse::<Method>()?.into();
        Ok(())
    })
}

/// Trainable parameters `method` (a `OneloraMethod` code) adds to a
/// `d × k` layer. `rank` matters for LoRA, DoRA and VeRA only.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn onelora_param_count(
    method: i32,
    k: usize,
    d: usize,
    rank: usize,
    out: *mut usize,
) -> OneloraStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        *out = adapters::param_count(&kind(method, rank)?, k, d);
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn onelora_flop_count(
    method: i32,
    k: usize,
    d: usize,
    rank: usize,
    out: *mut OneloraFlops,
) -> OneloraStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        let f = adapters::flop_count(&kind(method, rank)?, k, d);
        *out = OneloraFlops {
            mults: f.mults,
            adds: f.adds,
        };
        Ok(())
    })
}

/// MoRA's square inner rank; `very_low` selects `round(√d)`.
#[no_mangle]
pub extern "C" fn onelora_mora_rank(k: usize, d: usize, r: usize, very_low: bool) -> usize {
    adapters::mora_rank(k, d, r, very_low)
}

/// Builds a layer with frozen `w0` (`d × k`) and `beta0` (`d`, may be NULL
/// for zero) and attaches a zero-shift adapter of `method` (a
/// `OneloraMethod` code) seeded by `seed`.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths; `out` must be
/// writable. Free the result with `onelora_layer_free`.
#[no_mangle]
pub unsafe extern "C" fn onelora_layer_new(
    method: i32,
    rank: usize,
    d: usize,
    k: usize,
    w0: *const f64,
    beta0: *const f64,
    seed: u64,
    out: *mut *mut OneloraLayer,
) -> OneloraStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        *out = ptr::null_mut();
        let n = d
            .checked_mul(k)
            .ok_or_else(|| Error::Argument("d·k overflows".into()))?;
        let w = slice(w0, n, "w0")?;
        if n == 0 {
            return Err(Error::Argument("layer needs d >= 1 and k >= 1".into()).into());
        }
        let beta = if beta0.is_null() {
            Vector::zeros(d)
        } else {
            Vector::new(slice(beta0, d, "beta0")?.to_vec())
        };
        if !w.iter().chain(beta.iter()).all(|v| v.is_finite()) {
            return Err(Error::Domain("frozen weights must be finite".into()).into());
        }
        let base = FrozenLinear::new(Matrix::from_vec(d, k, w.to_vec())?, beta)?;
        let adapter = make_adapter(kind(method, rank)?, base.w0(), &mut InitStreams::new(seed))?;
        *out = Box::into_raw(Box::new(OneloraLayer { base, adapter }));
        Ok(())
    })
}

/// # Safety
/// `layer` must come from `onelora_layer_new` and not be used afterwards.
/// NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn onelora_layer_free(layer: *mut OneloraLayer) {
    if !layer.is_null() {
        drop(Box::from_raw(layer));
    }
}

/// Number of trainable scalars in the layer.
///
/// # Safety
/// `layer` must be a live handle or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn onelora_layer_param_len(layer: *const OneloraLayer) -> usize {
    layer.as_ref().map_or(0, |l| l.adapter.trainable_count())
}

/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn onelora_layer_get_params(
    layer: *const OneloraLayer,
    out: *mut f64,
    len: usize,
) -> OneloraStatus {
    guard(|| {
        let l = live(layer)?;
        let flat = l.adapter.flat();
        check_len("get_params", flat.len(), len)?;
        slice_mut(out, len, "out")?.copy_from_slice(&flat);
        Ok(())
    })
}

/// # Safety
/// `params` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn onelora_layer_set_params(
    layer: *mut OneloraLayer,
    params: *const f64,
    len: usize,
) -> OneloraStatus {
    guard(|| {
        let l = live_mut(layer)?;
        let p = slice(params, len, "params")?;
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("parameters must be finite".into()).into());
        }
        l.adapter.set_flat(p)?;
        Ok(())
    })
}

/// `out = adapted(x)`; `x` has `k` entries, `out` has `d`.
///
/// # Safety
/// Arrays must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn onelora_layer_forward(
    layer: *const OneloraLayer,
    x: *const f64,
    k: usize,
    out: *mut f64,
    d: usize,
) -> OneloraStatus {
    guard(|| {
        let l = live(layer)?;
        check_len("forward input", l.base.k(), k)?;
        check_len("forward output", l.base.d(), d)?;
        let y = l.adapter.forward(l.base.w0(), l.base.beta0(), slice(x, k, "x")?)?;
        slice_mut(out, d, "out")?.copy_from_slice(&y);
        Ok(())
    })
}

/// Pulls `g_out` (`d`) back through the layer at input `x` (`k`). Writes the
/// parameter gradient in `get_params` order to `grad` (`grad_len`), and the
/// input gradient to `g_in` (`k`) unless it is NULL.
///
/// # Safety
/// Arrays must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn onelora_layer_backward(
    layer: *const OneloraLayer,
    x: *const f64,
    g_out: *const f64,
    grad: *mut f64,
    grad_len: usize,
    g_in: *mut f64,
) -> OneloraStatus {
    guard(|| {
        let l = live(layer)?;
        let (k, d) = (l.base.k(), l.base.d());
        check_len("backward grad", l.adapter.trainable_count(), grad_len)?;
        let bundle = l.adapter.backward(
            l.base.w0(),
            l.base.beta0(),
            slice(x, k, "x")?,
            slice(g_out, d, "g_out")?,
        )?;
        let flat: Vec<f64> = bundle.grads.iter().flat_map(|g| g.data.iter().copied()).collect();
        slice_mut(grad, grad_len, "grad")?.copy_from_slice(&flat);
        if !g_in.is_null() {
            slice_mut(g_in, k, "g_in")?.copy_from_slice(&bundle.g_in);
        }
        Ok(())
    })
}

/// Folds the adapter into plain weights: `w_out` (`d × k`), `beta_out` (`d`).
///
/// # Safety
/// Arrays must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn onelora_layer_merge(
    layer: *const OneloraLayer,
    w_out: *mut f64,
    beta_out: *mut f64,
) -> OneloraStatus {
    guard(|| {
        let l = live(layer)?;
        let (k, d) = (l.base.k(), l.base.d());
        let (w, beta) = l.adapter.merge(l.base.w0(), l.base.beta0())?;
        slice_mut(w_out, d * k, "w_out")?.copy_from_slice(w.as_slice());
        slice_mut(beta_out, d, "beta_out")?.copy_from_slice(&beta);
        Ok(())
    })
}

/// Method of a live handle.
///
/// # Safety
/// `layer` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn onelora_layer_method(layer: *const OneloraLayer, out: *mut OneloraMethod) -> OneloraStatus {
    guard(|| {
        let l = live(layer)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = l.adapter.method().into();
        Ok(())
    })
}
